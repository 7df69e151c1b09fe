//! Driver states and route execution.
//!
//! A driver is always either parked at `location` (`eta == 0`) or travelling
//! towards it with `eta` seconds left. Routes are sequences of pickup and
//! dropoff stops; the driver drives directly between consecutive stops using
//! the closure travel times.

use std::collections::HashSet;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::city::{CityGraph, LocationId};
use crate::demand::{RequestId, RideRequest};
use crate::matching::FeasibleAction;
use crate::rng::SimRng;
use crate::{Error, Result};

pub const DEFAULT_CAPACITY: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    Pickup,
    Dropoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub kind: StopKind,
    pub request_id: RequestId,
    pub location: LocationId,
    /// Absolute simulation time, seconds.
    pub scheduled_arrival: f64,
}

/// Ordered stops with the onboard count after each stop.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoutePlan {
    pub stops: Vec<Stop>,
    pub onboard: Vec<u32>,
}

impl RoutePlan {
    pub fn is_empty(&self) -> bool {
        self.stops.is_empty()
    }

    fn pop_front(&mut self) -> Stop {
        self.onboard.remove(0);
        self.stops.remove(0)
    }
}

/// A request the driver has accepted but not yet dropped off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveRequest {
    pub request: RideRequest,
    pub fare: f64,
    pub picked_up_at: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletedRequest {
    pub request: RideRequest,
    pub fare: f64,
    pub picked_up_at: f64,
    pub dropped_off_at: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriverState {
    pub id: usize,
    pub capacity: u32,
    /// Riders currently in the vehicle.
    pub occupancy: u32,
    /// Current location, or the next one when `eta > 0`.
    pub location: LocationId,
    /// Seconds until `location` is reached.
    pub eta: f64,
    pub active: Vec<ActiveRequest>,
    pub completed: Vec<CompletedRequest>,
    pub route: RoutePlan,
    /// Sum of fares over active and completed requests.
    pub income: f64,
}

impl DriverState {
    pub fn idle(id: usize, location: LocationId, capacity: u32) -> Self {
        Self {
            id,
            capacity,
            occupancy: 0,
            location,
            eta: 0.0,
            active: Vec::new(),
            completed: Vec::new(),
            route: RoutePlan::default(),
            income: 0.0,
        }
    }

    /// Requests serviced so far, ongoing plus completed.
    pub fn serviced_count(&self) -> usize {
        self.active.len() + self.completed.len()
    }

    pub fn serviced_requests(&self) -> impl Iterator<Item = &RideRequest> {
        self.active
            .iter()
            .map(|a| &a.request)
            .chain(self.completed.iter().map(|c| &c.request))
    }

    pub fn holds(&self, id: RequestId) -> bool {
        self.serviced_requests().any(|r| r.id == id)
    }

    /// Adds newly accepted requests and switches to `route`. Income accrues now.
    pub fn accept(&mut self, requests: &[RideRequest], route: RoutePlan, graph: &CityGraph) {
        for r in requests {
            let fare = graph.fare(r.origin, r.destination);
            self.income += fare;
            self.active.push(ActiveRequest {
                request: *r,
                fare,
                picked_up_at: None,
            });
        }
        self.route = route;
    }

    /// Drives the route forward by `dt` seconds starting at absolute time `start`.
    pub fn advance(&mut self, start: f64, dt: f64, graph: &CityGraph) {
        let mut now = start;
        let mut remaining = dt;
        loop {
            if self.eta > 0.0 {
                let step = self.eta.min(remaining);
                self.eta -= step;
                remaining -= step;
                now += step;
                if self.eta > 0.0 {
                    break;
                }
            }
            let Some(next) = self.route.stops.first() else {
                break;
            };
            if next.location == self.location {
                let stop = self.route.pop_front();
                self.serve(stop, now);
            } else {
                self.eta = graph.travel.seconds(self.location, next.location);
                self.location = next.location;
            }
        }
    }

    fn serve(&mut self, stop: Stop, now: f64) {
        let Some(pos) = self
            .active
            .iter()
            .position(|a| a.request.id == stop.request_id)
        else {
            debug_assert!(false, "stop for unknown request {}", stop.request_id);
            return;
        };
        match stop.kind {
            StopKind::Pickup => {
                self.active[pos].picked_up_at = Some(now);
                self.occupancy += 1;
            }
            StopKind::Dropoff => {
                let a = self.active.remove(pos);
                self.occupancy -= 1;
                self.completed.push(CompletedRequest {
                    request: a.request,
                    fare: a.fare,
                    picked_up_at: a.picked_up_at.unwrap_or(now),
                    dropped_off_at: now,
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetState {
    pub drivers: Vec<DriverState>,
    /// Seconds since simulation start.
    pub clock: f64,
}

impl FleetState {
    pub fn total_income(&self) -> f64 {
        self.drivers.iter().map(|d| d.income).sum()
    }

    pub fn incomes(&self) -> Vec<f64> {
        self.drivers.iter().map(|d| d.income).collect()
    }

    pub fn serviced_count(&self) -> usize {
        self.drivers.iter().map(DriverState::serviced_count).sum()
    }

    /// Keeps only the drivers whose `id` is in `ids`, preserving order.
    pub fn restricted(&self, ids: &[usize]) -> FleetState {
        FleetState {
            drivers: self
                .drivers
                .iter()
                .filter(|d| ids.contains(&d.id))
                .cloned()
                .collect(),
            clock: self.clock,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.drivers
            .iter()
            .all(|d| d.route.is_empty() && d.eta == 0.0)
    }
}

/// Places `n` idle drivers uniformly at random over the city.
pub fn init_fleet(
    graph: &CityGraph,
    n: usize,
    capacity: u32,
    rng: &mut SimRng,
) -> Result<FleetState> {
    if n == 0 {
        return Err(Error::invalid("fleet needs at least one driver"));
    }
    if capacity == 0 {
        return Err(Error::invalid("driver capacity must be at least 1"));
    }
    if graph.is_empty() {
        return Err(Error::invalid("cannot place drivers in an empty city"));
    }
    let drivers = (0..n)
        .map(|id| DriverState::idle(id, rng.random_range(0..graph.len()), capacity))
        .collect();
    Ok(FleetState {
        drivers,
        clock: 0.0,
    })
}

/// Commits one action per driver slot. Empty actions leave their driver as is.
///
/// `actions[k]` belongs to `fleet.drivers[k]`. A request may be assigned to
/// at most one driver, and never to a request some driver already holds.
pub fn apply_matching(
    fleet: &mut FleetState,
    actions: &[FeasibleAction],
    graph: &CityGraph,
) -> Result<()> {
    if actions.len() != fleet.drivers.len() {
        return Err(Error::invalid(format!(
            "{} actions for {} drivers",
            actions.len(),
            fleet.drivers.len()
        )));
    }
    let mut seen = HashSet::new();
    for (slot, a) in actions.iter().enumerate() {
        if a.driver != slot {
            return Err(Error::invalid(format!(
                "action for driver slot {} supplied at slot {slot}",
                a.driver
            )));
        }
        for r in &a.requests {
            if !seen.insert(r.id) || fleet.drivers.iter().any(|d| d.holds(r.id)) {
                return Err(Error::DoubleAssignment(r.id));
            }
        }
    }
    for (driver, a) in fleet.drivers.iter_mut().zip(actions) {
        if !a.is_empty() {
            driver.accept(&a.requests, a.route.clone(), graph);
        }
    }
    Ok(())
}

/// Moves every driver forward by `dt` seconds and advances the clock.
pub fn advance_fleet(fleet: &mut FleetState, dt: f64, graph: &CityGraph) {
    let start = fleet.clock;
    for d in &mut fleet.drivers {
        d.advance(start, dt, graph);
    }
    fleet.clock += dt;
}

/// One line of the fleet snapshot stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverSnapshot {
    pub epoch: usize,
    pub driver_id: usize,
    pub location: LocationId,
    pub c: u32,
    pub p: usize,
    pub s: usize,
    pub income: f64,
}

pub fn snapshot(fleet: &FleetState, epoch: usize) -> Vec<DriverSnapshot> {
    fleet
        .drivers
        .iter()
        .map(|d| DriverSnapshot {
            epoch,
            driver_id: d.id,
            location: d.location,
            c: d.occupancy,
            p: d.active.len(),
            s: d.completed.len(),
            income: d.income,
        })
        .collect()
}

pub fn write_snapshots<W: Write>(out: &mut W, records: &[DriverSnapshot]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::city::gen_grid_city;
    use crate::rng;

    fn line_city() -> CityGraph {
        gen_grid_city(5, 1, 1.0, 5.0, 1, &mut rng::stream(0, rng::KMEANS)).unwrap()
    }

    fn request(id: u64, origin: usize, destination: usize, t: f64) -> RideRequest {
        RideRequest {
            id,
            origin,
            destination,
            created_at: t,
        }
    }

    /// Driver at 0 assigned request 0->2 with a direct plan.
    fn busy_driver(graph: &CityGraph) -> DriverState {
        let mut d = DriverState::idle(0, 0, 4);
        let r = request(7, 0, 2, 0.0);
        let route = RoutePlan {
            stops: vec![
                Stop {
                    kind: StopKind::Pickup,
                    request_id: 7,
                    location: 0,
                    scheduled_arrival: 0.0,
                },
                Stop {
                    kind: StopKind::Dropoff,
                    request_id: 7,
                    location: 2,
                    scheduled_arrival: 120.0,
                },
            ],
            onboard: vec![1, 0],
        };
        d.accept(&[r], route, graph);
        d
    }

    #[test]
    fn init_examples() {
        let g = line_city();
        let f = init_fleet(&g, 1, 4, &mut rng::stream(1, rng::FLEET)).unwrap();
        assert_eq!(f.drivers.len(), 1);
        assert_eq!(f.drivers[0].occupancy, 0);
        assert_eq!(f.drivers[0].income, 0.0);
        let a = init_fleet(&g, 6, 4, &mut rng::stream(3, rng::FLEET)).unwrap();
        let b = init_fleet(&g, 6, 4, &mut rng::stream(3, rng::FLEET)).unwrap();
        assert_eq!(a, b);
        let single = gen_grid_city(1, 1, 1.0, 5.0, 1, &mut rng::stream(0, rng::KMEANS)).unwrap();
        let f = init_fleet(&single, 5, 4, &mut rng::stream(1, rng::FLEET)).unwrap();
        assert!(f.drivers.iter().all(|d| d.location == 0));
        assert!(init_fleet(&g, 0, 4, &mut rng::stream(1, rng::FLEET)).is_err());
    }

    #[test]
    fn idle_driver_stays_put() {
        let g = line_city();
        let mut d = DriverState::idle(0, 3, 4);
        let before = d.clone();
        d.advance(0.0, 500.0, &g);
        assert_eq!(d, before);
    }

    #[test]
    fn income_accrues_at_acceptance_and_trip_completes() {
        let g = line_city();
        let mut d = busy_driver(&g);
        assert_eq!(d.income, 7.0);
        d.advance(0.0, 60.0, &g);
        assert_eq!(d.occupancy, 1);
        assert_eq!(d.active[0].picked_up_at, Some(0.0));
        assert_eq!(d.eta, 60.0);
        d.advance(60.0, 60.0, &g);
        assert_eq!(d.occupancy, 0);
        assert!(d.active.is_empty());
        assert_eq!(d.completed[0].dropped_off_at, 120.0);
        assert_eq!(d.income, 7.0);
        assert!(d.route.is_empty());
        assert_eq!(d.location, 2);
    }

    #[test]
    fn split_advance_matches_single_advance() {
        let g = line_city();
        let mut a = busy_driver(&g);
        let mut b = a.clone();
        a.advance(0.0, 30.0, &g);
        a.advance(30.0, 30.0, &g);
        b.advance(0.0, 60.0, &g);
        assert_eq!(a, b);
    }

    #[test]
    fn fleet_advance_moves_clock() {
        let g = line_city();
        let mut f = FleetState {
            drivers: vec![busy_driver(&g)],
            clock: 0.0,
        };
        advance_fleet(&mut f, 200.0, &g);
        assert_eq!(f.clock, 200.0);
        assert!(f.is_idle());
    }

    #[test]
    fn snapshot_lines_serialize() {
        let g = line_city();
        let f = FleetState {
            drivers: vec![busy_driver(&g)],
            clock: 0.0,
        };
        let mut buf = Vec::new();
        write_snapshots(&mut buf, &snapshot(&f, 3)).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(
            line,
            "{\"epoch\":3,\"driver_id\":0,\"location\":0,\"c\":0,\"p\":1,\"s\":0,\"income\":7.0}\n"
        );
    }
}
