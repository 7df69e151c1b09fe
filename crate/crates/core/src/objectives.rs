//! Matching objectives and their per-action deltas.
//!
//! | kind              | value                                              |
//! |-------------------|----------------------------------------------------|
//! | `requests`        | total requests serviced (ongoing + completed)      |
//! | `income`          | total driver income                                |
//! | `rider_fairness`  | income − λ·Var(neighborhood success rates)         |
//! | `driver_fairness` | income − λ·Var(driver incomes)                     |
//!
//! Variances are population variances. Success rates only cover
//! neighborhoods with at least one logged request.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::city::{CityGraph, NeighborhoodMap};
use crate::demand::{RequestLog, RideRequest};
use crate::fleet::{DriverState, FleetState};
use crate::matching::FeasibleAction;
use crate::stats;
use crate::{Error, Result};

/// Driver-side λ grid used for sweeps.
pub const DRIVER_LAMBDAS: [f64; 7] = [
    0.0,
    1.0 / 6.0,
    2.0 / 6.0,
    3.0 / 6.0,
    4.0 / 6.0,
    5.0 / 6.0,
    1.0,
];
/// Rider-side λ grid used for sweeps.
pub const RIDER_LAMBDAS: [f64; 3] = [1e8, 1e9, 1e10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Requests,
    Income,
    RiderFairness,
    DriverFairness,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [
        ObjectiveKind::Requests,
        ObjectiveKind::Income,
        ObjectiveKind::RiderFairness,
        ObjectiveKind::DriverFairness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Requests => "requests",
            ObjectiveKind::Income => "income",
            ObjectiveKind::RiderFairness => "rider_fairness",
            ObjectiveKind::DriverFairness => "driver_fairness",
        }
    }

    pub fn uses_lambda(self) -> bool {
        matches!(
            self,
            ObjectiveKind::RiderFairness | ObjectiveKind::DriverFairness
        )
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown objective `{s}` (expected requests, income, rider_fairness or driver_fairness)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Trade-off weight; ignored by `requests` and `income`.
    pub lambda: f64,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!(
                "lambda {lambda} must be finite and >= 0"
            )));
        }
        Ok(Self { kind, lambda })
    }

    pub fn requests() -> Self {
        Self {
            kind: ObjectiveKind::Requests,
            lambda: 0.0,
        }
    }

    pub fn income() -> Self {
        Self {
            kind: ObjectiveKind::Income,
            lambda: 0.0,
        }
    }
}

/// π_i recomputed from the driver's ongoing and completed requests.
pub fn driver_income(driver: &DriverState, graph: &CityGraph) -> f64 {
    driver
        .serviced_requests()
        .map(|r| graph.fare(r.origin, r.destination))
        .sum()
}

/// Per-neighborhood serviced (`h`) and total (`k`) request counts.
/// Index `j - 1` holds neighborhood `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodTallies {
    pub serviced: Vec<u64>,
    pub total: Vec<u64>,
}

impl NeighborhoodTallies {
    /// `(neighborhood, h_j / k_j)` for every neighborhood with `k_j > 0`.
    pub fn success_rates(&self) -> Vec<(u32, f64)> {
        self.serviced
            .iter()
            .zip(&self.total)
            .enumerate()
            .filter(|(_, (_, &k))| k > 0)
            .map(|(j, (&h, &k))| (j as u32 + 1, h as f64 / k as f64))
            .collect()
    }

    fn rate_variance(&self) -> f64 {
        let rates: Vec<f64> = self.success_rates().into_iter().map(|(_, r)| r).collect();
        stats::variance(&rates)
    }
}

pub fn neighborhood_tallies(
    fleet: &FleetState,
    log: &RequestLog,
    neighborhoods: &NeighborhoodMap,
) -> NeighborhoodTallies {
    let h = neighborhoods.count();
    let mut t = NeighborhoodTallies {
        serviced: vec![0; h],
        total: vec![0; h],
    };
    for r in log.requests() {
        t.total[neighborhoods.label(r.origin) as usize - 1] += 1;
    }
    for d in &fleet.drivers {
        for r in d.serviced_requests() {
            t.serviced[neighborhoods.label(r.origin) as usize - 1] += 1;
        }
    }
    t
}

/// Everything the four objectives read from a fleet state, detached from the
/// fleet so that per-action projections are cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveState {
    pub incomes: Vec<f64>,
    pub serviced: usize,
    pub tallies: NeighborhoodTallies,
}

impl ObjectiveState {
    pub fn capture(fleet: &FleetState, log: &RequestLog, graph: &CityGraph) -> Self {
        Self {
            incomes: fleet.incomes(),
            serviced: fleet.serviced_count(),
            tallies: neighborhood_tallies(fleet, log, &graph.neighborhoods),
        }
    }

    pub fn value(&self, spec: &ObjectiveSpec) -> f64 {
        let income: f64 = self.incomes.iter().sum();
        match spec.kind {
            ObjectiveKind::Requests => self.serviced as f64,
            ObjectiveKind::Income => income,
            ObjectiveKind::RiderFairness => -spec.lambda * self.tallies.rate_variance() + income,
            ObjectiveKind::DriverFairness => -spec.lambda * stats::variance(&self.incomes) + income,
        }
    }

    /// State after driver slot `slot` accepts `requests`. The requests must
    /// already be in the log.
    pub fn with_requests(&self, slot: usize, requests: &[RideRequest], graph: &CityGraph) -> Self {
        let mut next = self.clone();
        for r in requests {
            next.incomes[slot] += graph.fare(r.origin, r.destination);
            next.serviced += 1;
            next.tallies.serviced[graph.neighborhood(r.origin) as usize - 1] += 1;
        }
        next
    }

    pub fn delta(&self, action: &FeasibleAction, spec: &ObjectiveSpec, graph: &CityGraph) -> f64 {
        if action.is_empty() {
            return 0.0;
        }
        self.with_requests(action.driver, &action.requests, graph)
            .value(spec)
            - self.value(spec)
    }
}

pub fn eval_objective(
    fleet: &FleetState,
    log: &RequestLog,
    spec: &ObjectiveSpec,
    graph: &CityGraph,
) -> f64 {
    ObjectiveState::capture(fleet, log, graph).value(spec)
}

/// Objective change if `action` alone is applied to the current state.
pub fn delta_objective(
    fleet: &FleetState,
    log: &RequestLog,
    action: &FeasibleAction,
    spec: &ObjectiveSpec,
    graph: &CityGraph,
) -> f64 {
    ObjectiveState::capture(fleet, log, graph).delta(action, spec, graph)
}
