//! Per-epoch matching: feasible actions, route search and the exact
//! assignment solver.
//!
//! Each driver gets a list of feasible actions (request bundles with a
//! validated route, always including the empty bundle). Every action is
//! weighted by its objective delta plus the discounted value of the driver's
//! projected state, and the solver picks one action per driver such that no
//! request is used twice, maximizing the summed weight.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::city::{CityGraph, LocationId};
use crate::demand::{RequestBatch, RequestId, RequestLog, RideRequest};
use crate::fleet::{
    advance_fleet, apply_matching, DriverState, FleetState, RoutePlan, Stop, StopKind,
};
use crate::objectives::{ObjectiveSpec, ObjectiveState};
use crate::rng::SimRng;
use crate::value::{project_key, ValueKey, ValueModel};
use crate::{Error, Result};

/// Strict upper bounds on waiting and detour, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayConstraints {
    pub max_pickup_delay: f64,
    pub max_dropoff_delay: f64,
}

impl Default for DelayConstraints {
    fn default() -> Self {
        Self {
            max_pickup_delay: 300.0,
            max_dropoff_delay: 60.0,
        }
    }
}

impl DelayConstraints {
    pub fn new(max_pickup_delay: f64, max_dropoff_delay: f64) -> Result<Self> {
        if !(max_pickup_delay > 0.0 && max_dropoff_delay > 0.0) {
            return Err(Error::invalid("delay thresholds must be positive"));
        }
        Ok(Self {
            max_pickup_delay,
            max_dropoff_delay,
        })
    }
}

/// A request bundle for one driver slot plus the route that serves it
/// together with the driver's outstanding commitments.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleAction {
    /// Index into `FleetState::drivers`.
    pub driver: usize,
    /// New requests, sorted by id. Empty for the no-op action.
    pub requests: Vec<RideRequest>,
    pub route: RoutePlan,
}

impl FeasibleAction {
    /// The no-op action: the driver keeps its current route.
    pub fn empty(slot: usize, driver: &DriverState) -> Self {
        Self {
            driver: slot,
            requests: Vec::new(),
            route: driver.route.clone(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn request_ids(&self) -> Vec<RequestId> {
        self.requests.iter().map(|r| r.id).collect()
    }
}

/// One pickup or dropoff to be scheduled.
#[derive(Debug, Clone, Copy)]
struct Job {
    request: RideRequest,
    direct: f64,
    /// Known pickup time for riders already onboard.
    onboard_since: Option<f64>,
}

struct Search<'a> {
    graph: &'a CityGraph,
    limits: DelayConstraints,
    capacity: u32,
    jobs: Vec<Job>,
    /// Candidate stops in lexicographic (request id, kind) order.
    order: Vec<(usize, StopKind)>,
    picked: Vec<Option<f64>>,
    dropped: Vec<bool>,
    seq: Vec<(usize, StopKind, f64, u32)>,
    best: Option<(f64, Vec<(usize, StopKind, f64, u32)>)>,
}

impl Search<'_> {
    fn location(&self, job: usize, kind: StopKind) -> LocationId {
        match kind {
            StopKind::Pickup => self.jobs[job].request.origin,
            StopKind::Dropoff => self.jobs[job].request.destination,
        }
    }

    /// True if some remaining stop can no longer meet its deadline.
    fn doomed(&self, at: LocationId, now: f64) -> bool {
        let t = &self.graph.travel;
        self.jobs
            .iter()
            .enumerate()
            .any(|(j, job)| match self.picked[j] {
                None => {
                    now + t.seconds(at, job.request.origin) - job.request.created_at
                        >= self.limits.max_pickup_delay
                }
                Some(p) if !self.dropped[j] => {
                    now + t.seconds(at, job.request.destination) - (p + job.direct)
                        >= self.limits.max_dropoff_delay
                }
                _ => false,
            })
    }

    fn dfs(&mut self, at: LocationId, now: f64, load: u32, cost: f64) {
        if self.best.as_ref().is_some_and(|(c, _)| cost > *c) {
            return;
        }
        if self.seq.len() == self.order.len() {
            if self.best.as_ref().is_none_or(|(c, _)| cost < *c) {
                self.best = Some((cost, self.seq.clone()));
            }
            return;
        }
        if self.doomed(at, now) {
            return;
        }
        for i in 0..self.order.len() {
            let (j, kind) = self.order[i];
            let loc = self.location(j, kind);
            let arrive = now + self.graph.travel.seconds(at, loc);
            let job = self.jobs[j];
            match kind {
                StopKind::Pickup => {
                    if self.picked[j].is_some() || load >= self.capacity {
                        continue;
                    }
                    let wait = arrive - job.request.created_at;
                    if wait >= self.limits.max_pickup_delay {
                        continue;
                    }
                    self.picked[j] = Some(arrive);
                    self.seq.push((j, kind, arrive, load + 1));
                    self.dfs(loc, arrive, load + 1, cost + wait);
                    self.seq.pop();
                    self.picked[j] = None;
                }
                StopKind::Dropoff => {
                    let Some(p) = self.picked[j] else { continue };
                    if self.dropped[j] {
                        continue;
                    }
                    let detour = arrive - (p + job.direct);
                    if detour >= self.limits.max_dropoff_delay {
                        continue;
                    }
                    self.dropped[j] = true;
                    self.seq.push((j, kind, arrive, load - 1));
                    self.dfs(loc, arrive, load - 1, cost + detour);
                    self.seq.pop();
                    self.dropped[j] = false;
                }
            }
        }
    }
}

/// Cheapest valid route serving the driver's outstanding requests plus `new`.
///
/// Searches every stop order with pickups before dropoffs and occupancy
/// within capacity. Every not-yet-picked-up request must be reached strictly
/// within the pickup limit of its creation time, and every rider's in-vehicle
/// detour over the direct trip must stay strictly under the dropoff limit.
/// Cost is the summed pickup waits plus detours; ties go to the
/// lexicographically smallest `(request id, kind)` stop sequence. `None`
/// means infeasible.
pub fn route_feasible(
    driver: &DriverState,
    new: &[RideRequest],
    graph: &CityGraph,
    limits: &DelayConstraints,
    now: f64,
) -> Option<(RoutePlan, f64)> {
    let t = &graph.travel;
    let mut jobs: Vec<Job> = driver
        .active
        .iter()
        .map(|a| Job {
            request: a.request,
            direct: t.seconds(a.request.origin, a.request.destination),
            onboard_since: a.picked_up_at,
        })
        .collect();
    jobs.extend(new.iter().map(|r| Job {
        request: *r,
        direct: t.seconds(r.origin, r.destination),
        onboard_since: None,
    }));
    jobs.sort_by_key(|j| j.request.id);

    let mut order = Vec::new();
    for (j, job) in jobs.iter().enumerate() {
        if job.onboard_since.is_none() {
            order.push((j, StopKind::Pickup));
        }
        order.push((j, StopKind::Dropoff));
    }
    let onboard = jobs.iter().filter(|j| j.onboard_since.is_some()).count() as u32;
    let mut search = Search {
        graph,
        limits: *limits,
        capacity: driver.capacity,
        picked: jobs.iter().map(|j| j.onboard_since).collect(),
        dropped: vec![false; jobs.len()],
        jobs,
        order,
        seq: Vec::new(),
        best: None,
    };
    if onboard > driver.capacity {
        return None;
    }
    search.dfs(driver.location, now + driver.eta, onboard, 0.0);
    let (cost, seq) = search.best.take()?;
    let stops = seq
        .iter()
        .map(|&(j, kind, at, _)| Stop {
            kind,
            request_id: search.jobs[j].request.id,
            location: search.location(j, kind),
            scheduled_arrival: at,
        })
        .collect();
    let onboard = seq.iter().map(|&(_, _, _, load)| load).collect();
    Some((RoutePlan { stops, onboard }, cost))
}

/// All feasible actions for one driver slot, empty action first, sorted by
/// request id lists.
///
/// Bundles hold at most `capacity - occupancy` new requests. A bundle is
/// only tried when every bundle one request smaller is feasible.
pub fn enumerate_feasible(
    slot: usize,
    driver: &DriverState,
    batch: &[RideRequest],
    graph: &CityGraph,
    limits: &DelayConstraints,
    now: f64,
) -> Vec<FeasibleAction> {
    let mut reqs = batch.to_vec();
    reqs.sort_by_key(|r| r.id);
    let max_new = driver.capacity.saturating_sub(driver.occupancy) as usize;

    let mut out = vec![FeasibleAction::empty(slot, driver)];
    let mut level: Vec<Vec<usize>> = vec![Vec::new()];
    let mut level_set: HashSet<Vec<usize>> = level.iter().cloned().collect();
    for size in 1..=max_new.min(reqs.len()) {
        let mut next = Vec::new();
        for base in &level {
            let start = base.last().map_or(0, |&l| l + 1);
            for add in start..reqs.len() {
                let mut cand = base.clone();
                cand.push(add);
                let closed = size == 1
                    || (0..cand.len()).all(|skip| {
                        let sub: Vec<usize> = cand
                            .iter()
                            .enumerate()
                            .filter(|&(i, _)| i != skip)
                            .map(|(_, &x)| x)
                            .collect();
                        level_set.contains(&sub)
                    });
                if !closed {
                    continue;
                }
                let bundle: Vec<RideRequest> = cand.iter().map(|&i| reqs[i]).collect();
                if let Some((route, _)) = route_feasible(driver, &bundle, graph, limits, now) {
                    out.push(FeasibleAction {
                        driver: slot,
                        requests: bundle,
                        route,
                    });
                    next.push(cand);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        level_set = next.iter().cloned().collect();
        level = next;
    }
    out.sort_by_key(FeasibleAction::request_ids);
    out
}

/// Solver output: `chosen[k]` indexes into the action list of driver slot `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentSolution {
    pub chosen: Vec<usize>,
    /// Left-to-right sum of the chosen weights in slot order.
    pub objective: f64,
}

/// Total order used to break ties between equally weighted assignments.
fn assignment_key(actions: &[Vec<FeasibleAction>], chosen: &[usize]) -> Vec<Vec<RequestId>> {
    chosen
        .iter()
        .enumerate()
        .map(|(d, &a)| actions[d][a].request_ids())
        .collect()
}

struct Solver<'a> {
    /// Per slot: (request ids, weight, original index), lexicographically sorted.
    options: Vec<Vec<(Vec<RequestId>, f64, usize)>>,
    actions: &'a [Vec<FeasibleAction>],
    used: HashSet<RequestId>,
    path: Vec<usize>,
    best_value: f64,
    best: Vec<usize>,
}

impl Solver<'_> {
    /// Optimistic completion value from slot `depth` on. Folded left to
    /// right like real objective sums, so rounding never undercuts them.
    fn bound(&self, depth: usize, value: f64) -> f64 {
        let mut b = value;
        for opts in &self.options[depth..] {
            let m = opts
                .iter()
                .filter(|(ids, _, _)| ids.iter().all(|id| !self.used.contains(id)))
                .map(|(_, w, _)| *w)
                .fold(f64::NEG_INFINITY, f64::max);
            b += m;
        }
        b
    }

    fn dfs(&mut self, depth: usize, value: f64) {
        if depth == self.options.len() {
            if value > self.best_value {
                self.best_value = value;
                self.best = self.path.clone();
            }
            return;
        }
        if self.bound(depth, value) <= self.best_value {
            return;
        }
        for k in 0..self.options[depth].len() {
            let (ids, w, orig) = {
                let (ids, w, orig) = &self.options[depth][k];
                (ids.clone(), *w, *orig)
            };
            if ids.iter().any(|id| self.used.contains(id)) {
                continue;
            }
            self.used.extend(ids.iter().copied());
            self.path.push(orig);
            self.dfs(depth + 1, value + w);
            self.path.pop();
            for id in &ids {
                self.used.remove(id);
            }
        }
    }
}

/// Exact maximum-weight assignment of one action per driver slot with each
/// request used at most once.
///
/// Branch and bound over slots in order, actions in lexicographic order of
/// their request ids, starting from the all-empty assignment (the
/// lexicographically smallest). Only strictly better solutions replace the
/// incumbent, so among optimal assignments the lexicographically smallest
/// is returned.
pub fn solve_assignment(
    actions: &[Vec<FeasibleAction>],
    weights: &[Vec<f64>],
) -> Result<AssignmentSolution> {
    if actions.len() != weights.len() {
        return Err(Error::invalid(
            "actions and weights disagree in driver count",
        ));
    }
    let mut options = Vec::with_capacity(actions.len());
    let mut empty_choice = Vec::with_capacity(actions.len());
    for (d, (acts, ws)) in actions.iter().zip(weights).enumerate() {
        if acts.is_empty() {
            return Err(Error::NoActions(d));
        }
        if acts.len() != ws.len() {
            return Err(Error::invalid(format!(
                "driver {d}: {} actions but {} weights",
                acts.len(),
                ws.len()
            )));
        }
        if let Some(w) = ws.iter().find(|w| !w.is_finite()) {
            return Err(Error::invalid(format!("driver {d}: non-finite weight {w}")));
        }
        let mut opts: Vec<(Vec<RequestId>, f64, usize)> = acts
            .iter()
            .zip(ws)
            .enumerate()
            .map(|(i, (a, &w))| (a.request_ids(), w, i))
            .collect();
        opts.sort_by(|a, b| a.0.cmp(&b.0));
        match opts.first() {
            Some((ids, _, i)) if ids.is_empty() => empty_choice.push(*i),
            _ => return Err(Error::invalid(format!("driver {d} lacks the empty action"))),
        }
        options.push(opts);
    }
    let empty_value = empty_choice
        .iter()
        .enumerate()
        .fold(0.0, |acc, (d, &i)| acc + weights[d][i]);
    let mut solver = Solver {
        options,
        actions,
        used: HashSet::new(),
        path: Vec::new(),
        best_value: empty_value,
        best: empty_choice,
    };
    solver.dfs(0, 0.0);
    debug_assert!(assignment_key(solver.actions, &solver.best).len() == actions.len());
    Ok(AssignmentSolution {
        chosen: solver.best,
        objective: solver.best_value,
    })
}

/// Settings shared by every epoch of a run.
#[derive(Debug, Clone, Copy)]
pub struct EpochSettings<'a> {
    pub graph: &'a CityGraph,
    pub limits: DelayConstraints,
    pub objective: ObjectiveSpec,
    pub value: &'a ValueModel,
    pub epoch_len: f64,
}

/// Audit line for one driver's chosen action in one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub driver_id: usize,
    pub request_ids: Vec<RequestId>,
    pub weight: f64,
    pub delta_o: f64,
    /// γ·V of the projected post-decision state.
    pub value_term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub records: Vec<EpochRecord>,
    pub objective: f64,
    /// Post-decision value key of each driver slot's chosen action.
    pub chosen_keys: Vec<ValueKey>,
    pub chosen: Vec<FeasibleAction>,
}

/// Random-exploration switch used during value training.
pub struct Exploration<'r> {
    pub rng: &'r mut SimRng,
    pub epsilon: f64,
}

/// Scored candidate actions for every driver slot.
pub struct ScoredActions {
    pub actions: Vec<Vec<FeasibleAction>>,
    pub delta_o: Vec<Vec<f64>>,
    pub value_terms: Vec<Vec<f64>>,
    pub keys: Vec<Vec<ValueKey>>,
}

impl ScoredActions {
    pub fn weights(&self) -> Vec<Vec<f64>> {
        self.delta_o
            .iter()
            .zip(&self.value_terms)
            .map(|(d, v)| d.iter().zip(v).map(|(a, b)| a + b).collect())
            .collect()
    }
}

/// Enumerates and scores actions for the current (already advanced and
/// logged) state.
pub fn score_actions(
    fleet: &FleetState,
    log: &RequestLog,
    batch: &[RideRequest],
    s: &EpochSettings,
) -> ScoredActions {
    let state = ObjectiveState::capture(fleet, log, s.graph);
    let now = fleet.clock;
    let mut out = ScoredActions {
        actions: Vec::new(),
        delta_o: Vec::new(),
        value_terms: Vec::new(),
        keys: Vec::new(),
    };
    for (slot, driver) in fleet.drivers.iter().enumerate() {
        let acts = enumerate_feasible(slot, driver, batch, s.graph, &s.limits, now);
        let mut d_o = Vec::with_capacity(acts.len());
        let mut v_t = Vec::with_capacity(acts.len());
        let mut ks = Vec::with_capacity(acts.len());
        for a in &acts {
            d_o.push(state.delta(a, &s.objective, s.graph));
            let key = project_key(driver, a, s.graph, now, s.epoch_len);
            v_t.push(s.value.gamma * s.value.driver_value(&key));
            ks.push(key);
        }
        out.actions.push(acts);
        out.delta_o.push(d_o);
        out.value_terms.push(v_t);
        out.keys.push(ks);
    }
    out
}

fn random_assignment(actions: &[Vec<FeasibleAction>], rng: &mut SimRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..actions.len()).collect();
    order.shuffle(rng);
    let mut used = HashSet::new();
    let mut chosen = vec![0; actions.len()];
    for d in order {
        let ok: Vec<usize> = (0..actions[d].len())
            .filter(|&i| actions[d][i].requests.iter().all(|r| !used.contains(&r.id)))
            .collect();
        let pick = ok[rng.random_range(0..ok.len())];
        used.extend(actions[d][pick].requests.iter().map(|r| r.id));
        chosen[d] = pick;
    }
    chosen
}

/// One matching round: advance the fleet to the end of the batch window,
/// log the batch, score every feasible action, solve, and commit.
pub fn run_epoch(
    fleet: &mut FleetState,
    log: &mut RequestLog,
    batch: &RequestBatch,
    s: &EpochSettings,
    explore: Option<Exploration<'_>>,
) -> Result<EpochOutcome> {
    advance_fleet(fleet, s.epoch_len, s.graph);
    log.extend(&batch.requests)?;
    let scored = score_actions(fleet, log, &batch.requests, s);
    let weights = scored.weights();

    let chosen = match explore {
        Some(Exploration { rng, epsilon }) => {
            if rng.random_bool(epsilon.clamp(0.0, 1.0)) {
                random_assignment(&scored.actions, rng)
            } else {
                solve_assignment(&scored.actions, &weights)?.chosen
            }
        }
        None => solve_assignment(&scored.actions, &weights)?.chosen,
    };
    let objective = chosen
        .iter()
        .enumerate()
        .fold(0.0, |acc, (d, &i)| acc + weights[d][i]);

    let picked: Vec<FeasibleAction> = chosen
        .iter()
        .enumerate()
        .map(|(d, &i)| scored.actions[d][i].clone())
        .collect();
    apply_matching(fleet, &picked, s.graph)?;
    for a in &picked {
        for r in &a.requests {
            log.mark_serviced(r.id)?;
        }
    }
    let records = chosen
        .iter()
        .enumerate()
        .map(|(d, &i)| EpochRecord {
            epoch: batch.epoch,
            driver_id: fleet.drivers[d].id,
            request_ids: scored.actions[d][i].request_ids(),
            weight: weights[d][i],
            delta_o: scored.delta_o[d][i],
            value_term: scored.value_terms[d][i],
        })
        .collect();
    let chosen_keys = chosen
        .iter()
        .enumerate()
        .map(|(d, &i)| scored.keys[d][i])
        .collect();
    Ok(EpochOutcome {
        records,
        objective,
        chosen_keys,
        chosen: picked,
    })
}

pub fn write_epoch_records<W: Write>(out: &mut W, records: &[EpochRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Re-checks a committed plan from scratch against the driver state it was
/// built for. Returns a description of the first violation.
pub fn audit_plan(
    driver: &DriverState,
    action: &FeasibleAction,
    graph: &CityGraph,
    limits: &DelayConstraints,
    now: f64,
) -> std::result::Result<(), String> {
    let mut waiting: Vec<RideRequest> = driver
        .active
        .iter()
        .filter(|a| a.picked_up_at.is_none())
        .map(|a| a.request)
        .chain(action.requests.iter().copied())
        .collect();
    let mut riding: Vec<(RideRequest, f64)> = driver
        .active
        .iter()
        .filter_map(|a| a.picked_up_at.map(|p| (a.request, p)))
        .collect();
    let mut load = riding.len() as u32;
    let mut at = driver.location;
    let mut t = now + driver.eta;
    for (k, stop) in action.route.stops.iter().enumerate() {
        t += graph.travel.seconds(at, stop.location);
        at = stop.location;
        if t != stop.scheduled_arrival {
            return Err(format!(
                "stop {k}: scheduled {} but reachable at {t}",
                stop.scheduled_arrival
            ));
        }
        match stop.kind {
            StopKind::Pickup => {
                let pos = waiting
                    .iter()
                    .position(|r| r.id == stop.request_id)
                    .ok_or_else(|| {
                        format!(
                            "stop {k}: pickup of request {} not awaiting pickup",
                            stop.request_id
                        )
                    })?;
                let r = waiting.remove(pos);
                if r.origin != stop.location {
                    return Err(format!("stop {k}: pickup away from origin"));
                }
                if !(t - r.created_at < limits.max_pickup_delay) {
                    return Err(format!(
                        "request {}: pickup delay {}",
                        r.id,
                        t - r.created_at
                    ));
                }
                load += 1;
                if load > driver.capacity {
                    return Err(format!(
                        "stop {k}: occupancy {load} over capacity {}",
                        driver.capacity
                    ));
                }
                riding.push((r, t));
            }
            StopKind::Dropoff => {
                let pos = riding
                    .iter()
                    .position(|(r, _)| r.id == stop.request_id)
                    .ok_or_else(|| {
                        format!(
                            "stop {k}: dropoff of request {} not onboard",
                            stop.request_id
                        )
                    })?;
                let (r, p) = riding.remove(pos);
                if r.destination != stop.location {
                    return Err(format!("stop {k}: dropoff away from destination"));
                }
                let detour = t - (p + graph.travel.seconds(r.origin, r.destination));
                if !(detour < limits.max_dropoff_delay) {
                    return Err(format!("request {}: dropoff delay {detour}", r.id));
                }
                load -= 1;
            }
        }
        if action.route.onboard.get(k) != Some(&load) {
            return Err(format!("stop {k}: onboard profile disagrees ({load})"));
        }
    }
    if !waiting.is_empty() || !riding.is_empty() {
        return Err("route leaves requests unserved".into());
    }
    Ok(())
}
