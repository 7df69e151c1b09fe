//! Epoch loop, value training and the re-simulation coalition oracle.

use std::collections::BTreeMap;

use crate::city::CityGraph;
use crate::demand::{
    batch_requests_padded, synth_demand, RequestBatch, RequestLog, RideRequest, SynthDemand,
};
use crate::fleet::{advance_fleet, snapshot, DriverSnapshot, FleetState};
use crate::matching::{
    run_epoch, DelayConstraints, EpochRecord, EpochSettings, Exploration, FeasibleAction,
};
use crate::objectives::{eval_objective, ObjectiveSpec};
use crate::redistribution::{Coalition, CoalitionOracle};
use crate::rng::{self, derive_seed};
use crate::value::{ValueKey, ValueModel};
use crate::{Error, Result};

pub const DEFAULT_EPOCH_LEN: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub limits: DelayConstraints,
    pub objective: ObjectiveSpec,
    pub epoch_len: f64,
}

impl RunSettings {
    pub fn new(objective: ObjectiveSpec) -> Self {
        Self {
            limits: DelayConstraints::default(),
            objective,
            epoch_len: DEFAULT_EPOCH_LEN,
        }
    }
}

/// Everything a run starts from.
#[derive(Debug, Clone)]
pub struct Scenario<'a> {
    pub graph: &'a CityGraph,
    pub batches: Vec<RequestBatch>,
    pub fleet: FleetState,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub fleet: FleetState,
    pub log: RequestLog,
    pub records: Vec<EpochRecord>,
    /// Fleet state after each epoch's commit.
    pub snapshots: Vec<DriverSnapshot>,
    /// Objective value after each epoch.
    pub objective_values: Vec<f64>,
    /// Per epoch, the actions committed (one per driver slot).
    pub chosen: Vec<Vec<FeasibleAction>>,
}

impl RunResult {
    /// Request id to (epoch, driver id) for every accepted request.
    pub fn assignments(&self) -> BTreeMap<u64, (usize, usize)> {
        self.records
            .iter()
            .flat_map(|r| {
                r.request_ids
                    .iter()
                    .map(move |&id| (id, (r.epoch, r.driver_id)))
            })
            .collect()
    }
}

/// Runs every batch through the matcher with `value` held fixed.
pub fn simulate(
    scenario: &Scenario,
    value: &ValueModel,
    settings: &RunSettings,
) -> Result<RunResult> {
    let mut fleet = scenario.fleet.clone();
    let mut log = RequestLog::new();
    let s = EpochSettings {
        graph: scenario.graph,
        limits: settings.limits,
        objective: settings.objective,
        value,
        epoch_len: settings.epoch_len,
    };
    let mut out = RunResult {
        fleet: fleet.clone(),
        log: RequestLog::new(),
        records: Vec::new(),
        snapshots: Vec::new(),
        objective_values: Vec::new(),
        chosen: Vec::new(),
    };
    for batch in &scenario.batches {
        let outcome = run_epoch(&mut fleet, &mut log, batch, &s, None)?;
        out.records.extend(outcome.records);
        out.snapshots.extend(snapshot(&fleet, batch.epoch));
        out.objective_values.push(eval_objective(
            &fleet,
            &log,
            &settings.objective,
            scenario.graph,
        ));
        out.chosen.push(outcome.chosen);
    }
    out.fleet = fleet;
    out.log = log;
    Ok(out)
}

/// Advances in `step`-second increments until every route is finished.
/// Gives up after `max_steps`.
pub fn drain(fleet: &mut FleetState, graph: &CityGraph, step: f64, max_steps: usize) -> Result<()> {
    for _ in 0..max_steps {
        if fleet.is_idle() {
            return Ok(());
        }
        advance_fleet(fleet, step, graph);
    }
    if fleet.is_idle() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "fleet still busy after {max_steps} steps"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DemandSource {
    /// Fresh draw per episode.
    Synthetic(SynthDemand),
    /// Same requests every episode; must be sorted by creation time.
    Fixed(Vec<RideRequest>),
}

#[derive(Debug, Clone)]
pub struct TrainingSetup<'a> {
    pub graph: &'a CityGraph,
    pub demand: DemandSource,
    pub fleet: FleetState,
    pub settings: RunSettings,
    pub num_epochs: usize,
    pub explore_epsilon: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingStats {
    pub episodes: usize,
    pub updates: usize,
    /// Mean squared TD error per episode, measured before each update.
    pub mean_sq_td_error: Vec<f64>,
}

/// Trains `model` in place. After each epoch every driver's previous
/// post-decision key moves towards its share of the epoch's objective gain
/// plus the discounted value of its new key.
pub fn train(
    model: &mut ValueModel,
    setup: &TrainingSetup,
    episodes: usize,
    seed: u64,
) -> Result<TrainingStats> {
    if model.mode == crate::value::ValueMode::Zero {
        return Err(Error::NotTrainable);
    }
    model.seed = seed;
    let mut stats = TrainingStats::default();
    for ep in 0..episodes {
        let ep_seed = derive_seed(seed, &format!("episode-{ep}"));
        let requests = match &setup.demand {
            DemandSource::Synthetic(p) => {
                synth_demand(setup.graph, p, &mut rng::stream(ep_seed, rng::DEMAND))?
            }
            DemandSource::Fixed(r) => r.clone(),
        };
        let batches = batch_requests_padded(&requests, setup.settings.epoch_len, setup.num_epochs);
        let mut explore_rng = rng::stream(ep_seed, rng::EXPLORE);
        let mut fleet = setup.fleet.clone();
        let mut log = RequestLog::new();
        let mut prev: Option<Vec<ValueKey>> = None;
        let (mut err_sum, mut err_n) = (0.0, 0usize);
        for batch in &batches {
            let outcome = {
                let s = EpochSettings {
                    graph: setup.graph,
                    limits: setup.settings.limits,
                    objective: setup.settings.objective,
                    value: model,
                    epoch_len: setup.settings.epoch_len,
                };
                let ex = Exploration {
                    rng: &mut explore_rng,
                    epsilon: setup.explore_epsilon,
                };
                run_epoch(&mut fleet, &mut log, batch, &s, Some(ex))?
            };
            if let Some(pre_keys) = &prev {
                for ((pre, post), rec) in pre_keys
                    .iter()
                    .zip(&outcome.chosen_keys)
                    .zip(&outcome.records)
                {
                    err_sum += model.td_error_sq(pre, rec.delta_o, post);
                    err_n += 1;
                    model.td_update(*pre, rec.delta_o, *post, model.alpha)?;
                    stats.updates += 1;
                }
            }
            prev = Some(outcome.chosen_keys);
        }
        stats.mean_sq_td_error.push(if err_n == 0 {
            0.0
        } else {
            err_sum / err_n as f64
        });
        stats.episodes += 1;
    }
    Ok(stats)
}

/// Coalition value by re-running the scenario with only the coalition's
/// drivers. Bit `i` selects `scenario.fleet.drivers[i]`.
pub struct SimulationOracle<'a> {
    pub scenario: Scenario<'a>,
    pub value: &'a ValueModel,
    pub settings: RunSettings,
}

impl SimulationOracle<'_> {
    pub fn drivers(&self) -> usize {
        self.scenario.fleet.drivers.len()
    }
}

impl CoalitionOracle for SimulationOracle<'_> {
    fn value(&self, coalition: Coalition) -> Result<f64> {
        if coalition == 0 {
            return Ok(0.0);
        }
        let n = self.drivers();
        if n < 64 && coalition >> n != 0 {
            return Err(Error::invalid(format!(
                "coalition {coalition:#b} names drivers beyond {n}"
            )));
        }
        let ids: Vec<usize> = (0..n)
            .filter(|i| coalition & (1u64 << i) != 0)
            .map(|i| self.scenario.fleet.drivers[i].id)
            .collect();
        let sub = Scenario {
            graph: self.scenario.graph,
            batches: self.scenario.batches.clone(),
            fleet: self.scenario.fleet.restricted(&ids),
        };
        Ok(simulate(&sub, self.value, &self.settings)?
            .fleet
            .total_income())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::city::{build_travel_closure, Edge, Location, NeighborhoodMap};
    use crate::demand::batch_requests;
    use crate::fleet::DriverState;
    use crate::redistribution::{shapley_exact, Memoized};

    /// Locations 0..n on a line with `minutes` per hop, one neighborhood each.
    fn line(n: usize, minutes: f64) -> CityGraph {
        let locations = (0..n)
            .map(|i| Location {
                id: i,
                lat: 0.0,
                lon: i as f64,
            })
            .collect();
        let edges: Vec<Edge> = (1..n)
            .flat_map(|i| {
                [
                    Edge {
                        src: i - 1,
                        dst: i,
                        minutes,
                    },
                    Edge {
                        src: i,
                        dst: i - 1,
                        minutes,
                    },
                ]
            })
            .collect();
        let travel = build_travel_closure(n, &edges).unwrap();
        let labels = (1..=n as u32).collect();
        CityGraph::new(
            locations,
            travel,
            5.0,
            NeighborhoodMap::new(labels, n).unwrap(),
        )
        .unwrap()
    }

    fn req(id: u64, o: usize, d: usize, t: f64) -> RideRequest {
        RideRequest {
            id,
            origin: o,
            destination: d,
            created_at: t,
        }
    }

    fn fleet_at(locs: &[usize], cap: u32) -> FleetState {
        FleetState {
            drivers: locs
                .iter()
                .enumerate()
                .map(|(i, &l)| DriverState::idle(i, l, cap))
                .collect(),
            clock: 0.0,
        }
    }

    #[test]
    fn empty_demand_runs_clean() {
        let g = line(3, 1.0);
        let sc = Scenario {
            graph: &g,
            batches: batch_requests_padded(&[], 60.0, 4),
            fleet: fleet_at(&[0, 2], 4),
        };
        let r = simulate(
            &sc,
            &ValueModel::zero(0.9),
            &RunSettings::new(ObjectiveSpec::requests()),
        )
        .unwrap();
        assert_eq!(r.fleet.total_income(), 0.0);
        assert_eq!(r.records.len(), 8);
        assert!(r.records.iter().all(|x| x.request_ids.is_empty()));
        assert_eq!(r.fleet.clock, 240.0);
    }

    #[test]
    fn simulate_is_deterministic_and_serves_requests() {
        let g = line(5, 1.0);
        let reqs = vec![req(0, 0, 4, 0.0), req(1, 4, 0, 10.0), req(2, 2, 3, 70.0)];
        let sc = Scenario {
            graph: &g,
            batches: batch_requests(&reqs, 60.0),
            fleet: fleet_at(&[0, 4], 2),
        };
        let st = RunSettings::new(ObjectiveSpec::requests());
        let a = simulate(&sc, &ValueModel::zero(0.9), &st).unwrap();
        let b = simulate(&sc, &ValueModel::zero(0.9), &st).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.log.serviced_count(), a.fleet.serviced_count());
        assert_eq!(a.assignments().len(), a.log.serviced_count());
        let mut f = a.fleet.clone();
        drain(&mut f, &g, 60.0, 100).unwrap();
        for d in &f.drivers {
            for c in &d.completed {
                assert!(c.picked_up_at - c.request.created_at < 300.0);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_zero_episodes_is_noop() {
        let g = line(5, 1.0);
        let setup = TrainingSetup {
            graph: &g,
            demand: DemandSource::Synthetic(SynthDemand {
                rate_per_epoch: 1.5,
                num_epochs: 6,
                hotspot_skew: 0.5,
                epoch_len: 60.0,
            }),
            fleet: fleet_at(&[0, 4], 2),
            settings: RunSettings::new(ObjectiveSpec::income()),
            num_epochs: 6,
            explore_epsilon: 0.2,
        };
        let mut m0 = ValueModel::tabular(0.1, 0.9);
        train(&mut m0, &setup, 0, 3).unwrap();
        assert!(m0.table.is_empty());
        let mut a = ValueModel::tabular(0.1, 0.9);
        let mut b = ValueModel::tabular(0.1, 0.9);
        train(&mut a, &setup, 20, 3).unwrap();
        train(&mut b, &setup, 20, 3).unwrap();
        assert_eq!(a, b);
        assert!(!a.table.is_empty());
        assert!(matches!(
            train(&mut ValueModel::zero(0.9), &setup, 1, 3),
            Err(Error::NotTrainable)
        ));
    }

    #[test]
    fn hotspot_keys_outvalue_unvisited_ones() {
        // Requests keep appearing at location 0 heading to 1 and back; the
        // far end of the line never sees demand.
        let g = line(6, 1.0);
        let reqs: Vec<RideRequest> = (0..8)
            .map(|k| {
                let (o, d) = if k % 2 == 0 { (0, 1) } else { (1, 0) };
                req(k, o, d, 120.0 * k as f64)
            })
            .collect();
        let setup = TrainingSetup {
            graph: &g,
            demand: DemandSource::Fixed(reqs),
            fleet: fleet_at(&[0], 1),
            settings: RunSettings::new(ObjectiveSpec::income()),
            num_epochs: 16,
            explore_epsilon: 0.2,
        };
        let mut m = ValueModel::tabular(0.1, 0.9);
        train(&mut m, &setup, 50, 11).unwrap();
        let hot = m
            .table
            .iter()
            .filter(|(k, _)| k.neighborhood <= 2)
            .map(|(_, v)| *v)
            .fold(f64::MIN, f64::max);
        let cold = m.driver_value(&ValueKey {
            neighborhood: 6,
            occupancy: 0,
            time_bucket: 0,
        });
        assert!(hot > cold, "hot {hot} cold {cold}");
    }

    #[test]
    fn simulation_oracle_matches_solo_runs() {
        let g = line(5, 1.0);
        let reqs = vec![req(0, 0, 1, 0.0), req(1, 4, 3, 0.0), req(2, 0, 2, 65.0)];
        let sc = Scenario {
            graph: &g,
            batches: batch_requests(&reqs, 60.0),
            fleet: fleet_at(&[0, 4], 1),
        };
        let zero = ValueModel::zero(0.9);
        let oracle = Memoized::new(SimulationOracle {
            scenario: sc.clone(),
            value: &zero,
            settings: RunSettings::new(ObjectiveSpec::income()),
        });
        assert_eq!(oracle.value(0).unwrap(), 0.0);
        let full = simulate(&sc, &zero, &RunSettings::new(ObjectiveSpec::income())).unwrap();
        assert_eq!(oracle.value(0b11).unwrap(), full.fleet.total_income());
        let v = shapley_exact(&oracle, 2, 12).unwrap();
        assert!((v.values.iter().sum::<f64>() - full.fleet.total_income()).abs() < 1e-9);
        assert!(oracle.value(0b100).is_err());
    }
}
