//! Non-myopic value estimates for post-decision driver states.
//!
//! The fleet value is a sum of per-driver values, so each (driver, action)
//! pair in the assignment program carries its own value term. The tabular
//! model keys a driver by the neighborhood it will be in, its occupancy and a
//! 15-minute time-of-day bucket, all taken one epoch after the decision.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::city::CityGraph;
use crate::fleet::DriverState;
use crate::matching::FeasibleAction;
use crate::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.9;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const BUCKET_SECONDS: f64 = 900.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ValueKey {
    pub neighborhood: u32,
    pub occupancy: u32,
    pub time_bucket: u32,
}

impl ValueKey {
    pub fn of(driver: &DriverState, clock: f64, graph: &CityGraph) -> Self {
        Self {
            neighborhood: graph.neighborhood(driver.location),
            occupancy: driver.occupancy,
            time_bucket: (clock / BUCKET_SECONDS).floor() as u32,
        }
    }
}

/// Key of the driver's state `horizon` seconds after taking `action` at `now`.
pub fn project_key(
    driver: &DriverState,
    action: &FeasibleAction,
    graph: &CityGraph,
    now: f64,
    horizon: f64,
) -> ValueKey {
    let mut d = driver.clone();
    if !action.is_empty() {
        d.accept(&action.requests, action.route.clone(), graph);
    }
    d.advance(now, horizon, graph);
    ValueKey::of(&d, now + horizon, graph)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// Always zero: myopic matching.
    Zero,
    Tabular,
}

impl fmt::Display for ValueMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueMode::Zero => "zero",
            ValueMode::Tabular => "tabular",
        })
    }
}

impl FromStr for ValueMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(ValueMode::Zero),
            "tabular" => Ok(ValueMode::Tabular),
            _ => Err(Error::invalid(format!(
                "unknown value mode `{s}` (expected zero or tabular)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueModel {
    pub mode: ValueMode,
    pub table: BTreeMap<ValueKey, f64>,
    pub alpha: f64,
    pub gamma: f64,
    /// Seed the table was trained with; informational.
    pub seed: u64,
}

impl ValueModel {
    pub fn zero(gamma: f64) -> Self {
        Self {
            mode: ValueMode::Zero,
            table: BTreeMap::new(),
            alpha: DEFAULT_ALPHA,
            gamma,
            seed: 0,
        }
    }

    pub fn tabular(alpha: f64, gamma: f64) -> Self {
        Self {
            mode: ValueMode::Tabular,
            table: BTreeMap::new(),
            alpha,
            gamma,
            seed: 0,
        }
    }

    /// Value of one driver key; unseen keys are worth 0.
    pub fn driver_value(&self, key: &ValueKey) -> f64 {
        match self.mode {
            ValueMode::Zero => 0.0,
            ValueMode::Tabular => self.table.get(key).copied().unwrap_or(0.0),
        }
    }

    /// Fleet value as the sum of per-driver values.
    pub fn estimate_value<'a>(&self, keys: impl IntoIterator<Item = &'a ValueKey>) -> f64 {
        keys.into_iter().map(|k| self.driver_value(k)).sum()
    }

    /// One TD(0) step on `pre` towards `reward + gamma * V(post)`.
    pub fn td_update(
        &mut self,
        pre: ValueKey,
        reward: f64,
        post: ValueKey,
        alpha: f64,
    ) -> Result<()> {
        if self.mode == ValueMode::Zero {
            return Err(Error::NotTrainable);
        }
        let target = reward + self.gamma * self.driver_value(&post);
        let current = self.driver_value(&pre);
        let updated = current + alpha * (target - current);
        if !updated.is_finite() {
            return Err(Error::invalid(format!(
                "TD update produced non-finite value {updated}"
            )));
        }
        self.table.insert(pre, updated);
        Ok(())
    }

    /// Squared TD error of a transition under the current table.
    pub fn td_error_sq(&self, pre: &ValueKey, reward: f64, post: &ValueKey) -> f64 {
        let e = reward + self.gamma * self.driver_value(post) - self.driver_value(pre);
        e * e
    }

    /// Writes a small `key=value` header followed by
    /// `neighborhood,occupancy,time_bucket,value` rows. Floats use Rust's
    /// shortest round-trip formatting, so [`ValueModel::load`] is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::new();
        out.push_str(&format!(
            "# value-model v1\nmode={}\ngamma={}\nalpha={}\nseed={}\nneighborhood,occupancy,time_bucket,value\n",
            self.mode, self.gamma, self.alpha, self.seed
        ));
        for (k, v) in &self.table {
            out.push_str(&format!(
                "{},{},{},{}\n",
                k.neighborhood, k.occupancy, k.time_bucket, v
            ));
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line as u64,
            message,
        };
        let mut model = ValueModel::zero(DEFAULT_GAMMA);
        let mut in_rows = false;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let lineno = i + 1;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !in_rows {
                if line == "neighborhood,occupancy,time_bucket,value" {
                    in_rows = true;
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(lineno, format!("expected key=value, got `{line}`")))?;
                match k {
                    "mode" => {
                        model.mode = v.parse().map_err(|e: Error| bad(lineno, e.to_string()))?
                    }
                    "gamma" => {
                        model.gamma = v
                            .parse()
                            .map_err(|_| bad(lineno, format!("bad gamma `{v}`")))?
                    }
                    "alpha" => {
                        model.alpha = v
                            .parse()
                            .map_err(|_| bad(lineno, format!("bad alpha `{v}`")))?
                    }
                    "seed" => {
                        model.seed = v
                            .parse()
                            .map_err(|_| bad(lineno, format!("bad seed `{v}`")))?
                    }
                    other => return Err(bad(lineno, format!("unknown header key `{other}`"))),
                }
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad(
                    lineno,
                    format!("expected 4 columns, got {}", cols.len()),
                ));
            }
            let int = |s: &str| {
                s.parse::<u32>()
                    .map_err(|_| bad(lineno, format!("bad integer `{s}`")))
            };
            let key = ValueKey {
                neighborhood: int(cols[0])?,
                occupancy: int(cols[1])?,
                time_bucket: int(cols[2])?,
            };
            let v: f64 = cols[3]
                .parse()
                .map_err(|_| bad(lineno, format!("bad value `{}`", cols[3])))?;
            if !v.is_finite() {
                return Err(bad(lineno, format!("non-finite value {v}")));
            }
            model.table.insert(key, v);
        }
        Ok(model)
    }
}
