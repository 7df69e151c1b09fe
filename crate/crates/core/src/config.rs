//! Run configuration: a flat `key = value` document with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; [`RunConfig::echo`] writes back the fully resolved document,
//! which parses to the same configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::city::{
    build_travel_closure, gen_grid_city, kmeans_neighborhoods, read_edges_csv, read_locations_csv,
    CityGraph,
};
use crate::demand::{
    batch_requests, batch_requests_padded, ingest_trips, synth_demand, RequestBatch, RideRequest,
    SynthDemand,
};
use crate::fleet::{init_fleet, FleetState};
use crate::matching::DelayConstraints;
use crate::objectives::{ObjectiveKind, ObjectiveSpec, DRIVER_LAMBDAS, RIDER_LAMBDAS};
use crate::redistribution::{PayoutMode, DEFAULT_EXACT_CAP};
use crate::rng;
use crate::simulation::{RunSettings, Scenario};
use crate::value::ValueMode;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum CitySource {
    Grid {
        width: usize,
        height: usize,
        edge_minutes: f64,
    },
    Csv {
        locations: PathBuf,
        edges: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DemandSpec {
    Synthetic {
        rate_per_epoch: f64,
        hotspot_skew: f64,
    },
    Trips {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapleyChoice {
    /// Exact up to the cap, Monte Carlo beyond.
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub city: CitySource,
    pub delta: f64,
    pub neighborhoods: usize,
    pub demand: DemandSpec,
    /// Epochs to simulate. Zero with trip demand means "as many as the data spans".
    pub num_epochs: usize,
    pub drivers: usize,
    pub capacity: u32,
    pub epoch_len: f64,
    pub limits: DelayConstraints,
    pub objective: ObjectiveSpec,
    pub value_mode: ValueMode,
    pub episodes: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub explore_epsilon: f64,
    pub model_path: Option<PathBuf>,
    pub sweep_objectives: Vec<ObjectiveKind>,
    pub sweep_driver_lambdas: Vec<f64>,
    pub sweep_rider_lambdas: Vec<f64>,
    pub shapley_method: ShapleyChoice,
    pub shapley_exact_cap: usize,
    pub shapley_permutations: usize,
    pub r_grid: Vec<f64>,
    pub payout_mode: PayoutMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            city: CitySource::Grid {
                width: 5,
                height: 5,
                edge_minutes: 1.0,
            },
            delta: crate::city::DEFAULT_DELTA,
            neighborhoods: crate::city::DEFAULT_NEIGHBORHOODS,
            demand: DemandSpec::Synthetic {
                rate_per_epoch: 2.0,
                hotspot_skew: 0.3,
            },
            num_epochs: 60,
            drivers: 5,
            capacity: crate::fleet::DEFAULT_CAPACITY,
            epoch_len: crate::simulation::DEFAULT_EPOCH_LEN,
            limits: DelayConstraints::default(),
            objective: ObjectiveSpec::requests(),
            value_mode: ValueMode::Zero,
            episodes: 0,
            alpha: crate::value::DEFAULT_ALPHA,
            gamma: crate::value::DEFAULT_GAMMA,
            explore_epsilon: 0.1,
            model_path: None,
            sweep_objectives: ObjectiveKind::ALL.to_vec(),
            sweep_driver_lambdas: DRIVER_LAMBDAS.to_vec(),
            sweep_rider_lambdas: RIDER_LAMBDAS.to_vec(),
            shapley_method: ShapleyChoice::Auto,
            shapley_exact_cap: DEFAULT_EXACT_CAP,
            shapley_permutations: 1000,
            r_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            payout_mode: PayoutMode::AsPrinted,
        }
    }
}

fn cfg_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

struct Raw {
    map: BTreeMap<String, String>,
    base: PathBuf,
}

impl Raw {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e: T::Err| cfg_err(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    fn real(
        &mut self,
        key: &str,
        default: f64,
        ok: impl Fn(f64) -> bool,
        rule: &str,
    ) -> Result<f64> {
        let x: f64 = self.parse(key, default)?;
        if !x.is_finite() || !ok(x) {
            return Err(cfg_err(key, format!("{x} is invalid: must be {rule}")));
        }
        Ok(x)
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.take(key)
            .filter(|s| !s.is_empty())
            .map(|s| self.base.join(s))
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.take(key) else {
            return Ok(default);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e: T::Err| cfg_err(key, format!("cannot parse item `{s}`: {e}")))
            })
            .collect()
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parent = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = std::path::absolute(parent).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &base).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Parses a document; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t.split_once('=').ok_or_else(|| Error::Parse {
                path: PathBuf::from("<config>"),
                line: i as u64 + 1,
                message: format!("expected `key = value`, got `{t}`"),
            })?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(cfg_err(&k, "given more than once"));
            }
        }
        let mut raw = Raw {
            map,
            base: base.to_path_buf(),
        };
        let d = RunConfig::default();

        let seed = raw.parse("seed", d.seed)?;
        let city_source = raw.take("city.source").unwrap_or_else(|| "grid".into());
        let width = raw.parse("city.width", 5usize)?;
        let height = raw.parse("city.height", 5usize)?;
        let edge_minutes = raw.real("city.edge_minutes", 1.0, |x| x > 0.0, "> 0")?;
        let locations = raw.path("city.locations_csv");
        let edges = raw.path("city.edges_csv");
        let city = match city_source.as_str() {
            "grid" => {
                if width == 0 || height == 0 {
                    return Err(cfg_err("city.width", "grid dimensions must be at least 1"));
                }
                CitySource::Grid {
                    width,
                    height,
                    edge_minutes,
                }
            }
            "csv" => CitySource::Csv {
                locations: locations.ok_or_else(|| {
                    cfg_err("city.locations_csv", "required when city.source = csv")
                })?,
                edges: edges
                    .ok_or_else(|| cfg_err("city.edges_csv", "required when city.source = csv"))?,
            },
            other => {
                return Err(cfg_err(
                    "city.source",
                    format!("unknown source `{other}` (expected grid or csv)"),
                ))
            }
        };
        let delta = raw.real("city.delta", d.delta, |x| x >= 0.0, ">= 0")?;
        let neighborhoods = raw.parse("city.neighborhoods", d.neighborhoods)?;
        if neighborhoods == 0 {
            return Err(cfg_err("city.neighborhoods", "must be at least 1"));
        }

        let demand_source = raw
            .take("demand.source")
            .unwrap_or_else(|| "synthetic".into());
        let rate = raw.real("demand.rate_per_epoch", 2.0, |x| x >= 0.0, ">= 0")?;
        let skew = raw.real(
            "demand.hotspot_skew",
            0.3,
            |x| (0.0..=1.0).contains(&x),
            "in [0, 1]",
        )?;
        let trips = raw.path("demand.trips_csv");
        let demand = match demand_source.as_str() {
            "synthetic" => DemandSpec::Synthetic {
                rate_per_epoch: rate,
                hotspot_skew: skew,
            },
            "trips" => DemandSpec::Trips {
                path: trips.ok_or_else(|| {
                    cfg_err("demand.trips_csv", "required when demand.source = trips")
                })?,
            },
            other => {
                return Err(cfg_err(
                    "demand.source",
                    format!("unknown source `{other}` (expected synthetic or trips)"),
                ))
            }
        };
        let num_epochs = raw.parse("demand.num_epochs", d.num_epochs)?;

        let drivers = raw.parse("fleet.drivers", d.drivers)?;
        if drivers == 0 {
            return Err(cfg_err("fleet.drivers", "must be at least 1"));
        }
        let capacity = raw.parse("fleet.capacity", d.capacity)?;
        if capacity == 0 {
            return Err(cfg_err("fleet.capacity", "must be at least 1"));
        }
        let epoch_len = raw.real("sim.epoch_len", d.epoch_len, |x| x > 0.0, "> 0")?;
        let pickup = raw.real("constraints.max_pickup_delay", 300.0, |x| x > 0.0, "> 0")?;
        let dropoff = raw.real("constraints.max_dropoff_delay", 60.0, |x| x > 0.0, "> 0")?;
        let limits = DelayConstraints::new(pickup, dropoff)?;

        let kind: ObjectiveKind = raw.parse("objective.kind", d.objective.kind)?;
        let lambda = raw.real("objective.lambda", 0.0, |x| x >= 0.0, ">= 0")?;
        let objective = ObjectiveSpec::new(kind, lambda)
            .map_err(|e| cfg_err("objective.lambda", e.to_string()))?;

        let value_mode = raw.parse("value.mode", d.value_mode)?;
        let episodes = raw.parse("value.episodes", d.episodes)?;
        let alpha = raw.real("value.alpha", d.alpha, |x| x > 0.0 && x <= 1.0, "in (0, 1]")?;
        let gamma = raw.real(
            "value.gamma",
            d.gamma,
            |x| (0.0..=1.0).contains(&x),
            "in [0, 1]",
        )?;
        let explore_epsilon = raw.real(
            "value.explore_epsilon",
            d.explore_epsilon,
            |x| (0.0..=1.0).contains(&x),
            "in [0, 1]",
        )?;
        let model_path = raw.path("value.model_path");

        let sweep_objectives = raw.list("sweep.objectives", d.sweep_objectives)?;
        let sweep_driver_lambdas = raw.list("sweep.driver_lambdas", d.sweep_driver_lambdas)?;
        let sweep_rider_lambdas = raw.list("sweep.rider_lambdas", d.sweep_rider_lambdas)?;
        for (key, xs) in [
            ("sweep.driver_lambdas", &sweep_driver_lambdas),
            ("sweep.rider_lambdas", &sweep_rider_lambdas),
        ] {
            if xs.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(cfg_err(key, "every λ must be finite and >= 0"));
            }
        }

        let shapley_method = match raw.take("shapley.method").as_deref() {
            None | Some("auto") => ShapleyChoice::Auto,
            Some("exact") => ShapleyChoice::Exact,
            Some("monte_carlo") => ShapleyChoice::MonteCarlo,
            Some(other) => {
                return Err(cfg_err(
                    "shapley.method",
                    format!("unknown method `{other}` (expected auto, exact or monte_carlo)"),
                ))
            }
        };
        let shapley_exact_cap = raw.parse("shapley.exact_cap", d.shapley_exact_cap)?;
        let shapley_permutations = raw.parse("shapley.permutations", d.shapley_permutations)?;
        if shapley_permutations == 0 {
            return Err(cfg_err("shapley.permutations", "must be at least 1"));
        }
        let r_grid = raw.list("redistribution.r_grid", d.r_grid)?;
        if r_grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(cfg_err(
                "redistribution.r_grid",
                "every r must lie in [0, 1]",
            ));
        }
        let payout_mode = raw.parse("redistribution.mode", d.payout_mode)?;

        if let Some(k) = raw.map.keys().next() {
            return Err(cfg_err(k, "unknown key"));
        }
        Ok(Self {
            seed,
            city,
            delta,
            neighborhoods,
            demand,
            num_epochs,
            drivers,
            capacity,
            epoch_len,
            limits,
            objective,
            value_mode,
            episodes,
            alpha,
            gamma,
            explore_epsilon,
            model_path,
            sweep_objectives,
            sweep_driver_lambdas,
            sweep_rider_lambdas,
            shapley_method,
            shapley_exact_cap,
            shapley_permutations,
            r_grid,
            payout_mode,
        })
    }

    /// Resolved configuration, one `key = value` line per setting.
    pub fn echo(&self) -> String {
        let mut kv: Vec<(&str, String)> = vec![("seed", self.seed.to_string())];
        match &self.city {
            CitySource::Grid {
                width,
                height,
                edge_minutes,
            } => {
                kv.push(("city.source", "grid".into()));
                kv.push(("city.width", width.to_string()));
                kv.push(("city.height", height.to_string()));
                kv.push(("city.edge_minutes", edge_minutes.to_string()));
            }
            CitySource::Csv { locations, edges } => {
                kv.push(("city.source", "csv".into()));
                kv.push(("city.locations_csv", path_str(locations)));
                kv.push(("city.edges_csv", path_str(edges)));
            }
        }
        kv.push(("city.delta", self.delta.to_string()));
        kv.push(("city.neighborhoods", self.neighborhoods.to_string()));
        match &self.demand {
            DemandSpec::Synthetic {
                rate_per_epoch,
                hotspot_skew,
            } => {
                kv.push(("demand.source", "synthetic".into()));
                kv.push(("demand.rate_per_epoch", rate_per_epoch.to_string()));
                kv.push(("demand.hotspot_skew", hotspot_skew.to_string()));
            }
            DemandSpec::Trips { path } => {
                kv.push(("demand.source", "trips".into()));
                kv.push(("demand.trips_csv", path_str(path)));
            }
        }
        kv.push(("demand.num_epochs", self.num_epochs.to_string()));
        kv.push(("fleet.drivers", self.drivers.to_string()));
        kv.push(("fleet.capacity", self.capacity.to_string()));
        kv.push(("sim.epoch_len", self.epoch_len.to_string()));
        kv.push((
            "constraints.max_pickup_delay",
            self.limits.max_pickup_delay.to_string(),
        ));
        kv.push((
            "constraints.max_dropoff_delay",
            self.limits.max_dropoff_delay.to_string(),
        ));
        kv.push(("objective.kind", self.objective.kind.to_string()));
        kv.push(("objective.lambda", self.objective.lambda.to_string()));
        kv.push(("value.mode", self.value_mode.to_string()));
        kv.push(("value.episodes", self.episodes.to_string()));
        kv.push(("value.alpha", self.alpha.to_string()));
        kv.push(("value.gamma", self.gamma.to_string()));
        kv.push(("value.explore_epsilon", self.explore_epsilon.to_string()));
        if let Some(p) = &self.model_path {
            kv.push(("value.model_path", path_str(p)));
        }
        kv.push(("sweep.objectives", list(&self.sweep_objectives)));
        kv.push(("sweep.driver_lambdas", list(&self.sweep_driver_lambdas)));
        kv.push(("sweep.rider_lambdas", list(&self.sweep_rider_lambdas)));
        kv.push((
            "shapley.method",
            match self.shapley_method {
                ShapleyChoice::Auto => "auto",
                ShapleyChoice::Exact => "exact",
                ShapleyChoice::MonteCarlo => "monte_carlo",
            }
            .into(),
        ));
        kv.push(("shapley.exact_cap", self.shapley_exact_cap.to_string()));
        kv.push((
            "shapley.permutations",
            self.shapley_permutations.to_string(),
        ));
        kv.push(("redistribution.r_grid", list(&self.r_grid)));
        kv.push(("redistribution.mode", self.payout_mode.to_string()));
        kv.into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            limits: self.limits,
            objective: self.objective,
            epoch_len: self.epoch_len,
        }
    }

    pub fn build_city(&self) -> Result<CityGraph> {
        let mut krng = rng::stream(self.seed, rng::KMEANS);
        match &self.city {
            CitySource::Grid {
                width,
                height,
                edge_minutes,
            } => gen_grid_city(
                *width,
                *height,
                *edge_minutes,
                self.delta,
                self.neighborhoods,
                &mut krng,
            ),
            CitySource::Csv { locations, edges } => {
                let locs = read_locations_csv(locations)?;
                let es = read_edges_csv(edges)?;
                let travel = build_travel_closure(locs.len(), &es)?;
                let hoods = kmeans_neighborhoods(
                    &locs,
                    self.neighborhoods.min(locs.len()).max(1),
                    &mut krng,
                )?;
                CityGraph::new(locs, travel, self.delta, hoods)
            }
        }
    }

    /// The request stream; synthetic draws use the demand sub-stream.
    pub fn build_requests(&self, graph: &CityGraph) -> Result<Vec<RideRequest>> {
        match &self.demand {
            DemandSpec::Synthetic {
                rate_per_epoch,
                hotspot_skew,
            } => {
                let p = SynthDemand {
                    rate_per_epoch: *rate_per_epoch,
                    num_epochs: self.num_epochs,
                    hotspot_skew: *hotspot_skew,
                    epoch_len: self.epoch_len,
                };
                synth_demand(graph, &p, &mut rng::stream(self.seed, rng::DEMAND))
            }
            DemandSpec::Trips { path } => Ok(ingest_trips(path, graph)?.requests),
        }
    }

    pub fn batches(&self, requests: &[RideRequest]) -> Vec<RequestBatch> {
        match (&self.demand, self.num_epochs) {
            (DemandSpec::Trips { .. }, 0) => batch_requests(requests, self.epoch_len),
            _ => batch_requests_padded(requests, self.epoch_len, self.num_epochs),
        }
    }

    pub fn build_fleet(&self, graph: &CityGraph) -> Result<FleetState> {
        init_fleet(
            graph,
            self.drivers,
            self.capacity,
            &mut rng::stream(self.seed, rng::FLEET),
        )
    }

    pub fn scenario<'a>(&self, graph: &'a CityGraph) -> Result<Scenario<'a>> {
        let requests = self.build_requests(graph)?;
        Ok(Scenario {
            graph,
            batches: self.batches(&requests),
            fleet: self.build_fleet(graph)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::parse("# nothing\n\n", Path::new("")).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.capacity, 4);
        assert_eq!(c.delta, 5.0);
        assert_eq!(c.neighborhoods, 10);
        assert_eq!(c.gamma, 0.9);
        assert_eq!(c.limits, DelayConstraints::default());
    }

    #[test]
    fn echo_round_trips() {
        let text =
            "seed = 9\nobjective.kind = driver_fairness\nobjective.lambda = 0.6666666666666666\n\
                    sweep.objectives = income,requests\nredistribution.mode = keep_income\n\
                    redistribution.r_grid = 0.5\nshapley.method = monte_carlo\n";
        let c = RunConfig::parse(text, Path::new("")).unwrap();
        assert_eq!(c.objective.lambda, 4.0 / 6.0);
        assert_eq!(
            c.sweep_objectives,
            vec![ObjectiveKind::Income, ObjectiveKind::Requests]
        );
        let again = RunConfig::parse(&c.echo(), Path::new("")).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.echo(), c.echo());
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let c = RunConfig::parse(
            "demand.source = trips\ndemand.trips_csv = t.csv\n",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(
            c.demand,
            DemandSpec::Trips {
                path: PathBuf::from("/data/t.csv")
            }
        );
    }

    #[test]
    fn field_level_errors() {
        let key_of = |text: &str| match RunConfig::parse(text, Path::new("")) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(key_of("fleet.capacity = 0\n"), "fleet.capacity");
        assert_eq!(key_of("fleet.drivers = many\n"), "fleet.drivers");
        assert_eq!(key_of("objective.kind = profit\n"), "objective.kind");
        assert_eq!(key_of("value.gamma = 1.5\n"), "value.gamma");
        assert_eq!(key_of("demand.source = trips\n"), "demand.trips_csv");
        assert_eq!(key_of("colour = blue\n"), "colour");
        assert_eq!(key_of("seed = 1\nseed = 2\n"), "seed");
        assert_eq!(
            key_of("redistribution.r_grid = 0.5,1.5\n"),
            "redistribution.r_grid"
        );
        assert!(matches!(
            RunConfig::parse("just words\n", Path::new("")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn scenario_is_seed_deterministic() {
        let c = RunConfig::parse("seed = 4\ndemand.num_epochs = 5\n", Path::new("")).unwrap();
        let g1 = c.build_city().unwrap();
        let g2 = c.build_city().unwrap();
        assert_eq!(g1.neighborhoods, g2.neighborhoods);
        let (a, b) = (c.scenario(&g1).unwrap(), c.scenario(&g2).unwrap());
        assert_eq!(a.batches, b.batches);
        assert_eq!(a.fleet, b.fleet);
        assert_eq!(a.batches.len(), 5);
    }
}
