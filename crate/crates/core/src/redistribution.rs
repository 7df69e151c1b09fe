//! Shapley values over driver coalitions and risk-parameterised income
//! redistribution.
//!
//! A coalition is a bitmask over driver indices (bit `i` = driver `i`).
//! Oracles report what a coalition would have earned on its own; the exact
//! estimator enumerates every coalition, the Monte Carlo estimator averages
//! marginal contributions over sampled join orders.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;
use crate::{Error, Result};

pub type Coalition = u64;

/// Largest driver count accepted by [`shapley_exact`] by default.
pub const DEFAULT_EXACT_CAP: usize = 12;

/// Income a coalition of drivers would make on its own.
pub trait CoalitionOracle {
    fn value(&self, coalition: Coalition) -> Result<f64>;
}

/// Explicit coalition table; missing entries are an error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableOracle {
    pub values: HashMap<Coalition, f64>,
}

impl TableOracle {
    pub fn new(values: HashMap<Coalition, f64>) -> Self {
        Self { values }
    }

    /// Reads `coalition_bitmask,value` rows.
    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            coalition_bitmask: u64,
            value: f64,
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| crate::city::csv_error(path, e))?;
        let mut values = HashMap::new();
        for rec in r.deserialize::<Row>() {
            let row = rec.map_err(|e| crate::city::csv_error(path, e))?;
            values.insert(row.coalition_bitmask, row.value);
        }
        Ok(Self { values })
    }

    /// Number of drivers implied by the highest set bit.
    pub fn drivers(&self) -> usize {
        self.values
            .keys()
            .map(|&m| 64 - m.leading_zeros() as usize)
            .max()
            .unwrap_or(0)
    }
}

impl CoalitionOracle for TableOracle {
    fn value(&self, coalition: Coalition) -> Result<f64> {
        if coalition == 0 {
            return Ok(self.values.get(&0).copied().unwrap_or(0.0));
        }
        self.values.get(&coalition).copied().ok_or_else(|| {
            Error::invalid(format!("coalition table has no entry for mask {coalition}"))
        })
    }
}

/// Caches another oracle's answers; safe to share across threads.
pub struct Memoized<O> {
    inner: O,
    cache: Mutex<HashMap<Coalition, f64>>,
}

impl<O: CoalitionOracle> Memoized<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.cache.lock().expect("memo lock").len()
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<O: CoalitionOracle> CoalitionOracle for Memoized<O> {
    fn value(&self, coalition: Coalition) -> Result<f64> {
        if coalition == 0 {
            return Ok(0.0);
        }
        if let Some(&v) = self.cache.lock().expect("memo lock").get(&coalition) {
            return Ok(v);
        }
        let v = self.inner.value(coalition)?;
        self.cache.lock().expect("memo lock").insert(coalition, v);
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMethod {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    pub values: Vec<f64>,
    pub method: ShapleyMethod,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
}

/// Join-order counts `s! (n-s-1)!` per coalition size `s`. Marginals are
/// summed against these and divided by `n!` once, which keeps the sums
/// exact for integer tables.
fn coalition_counts(n: usize) -> Vec<f64> {
    let fact: Vec<f64> = std::iter::once(1.0)
        .chain((1..=n).scan(1.0, |f, k| {
            *f *= k as f64;
            Some(*f)
        }))
        .collect();
    (0..n).map(|s| fact[s] * fact[n - s - 1]).collect()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact Shapley values by enumerating all `2^n` coalitions.
pub fn shapley_exact(
    oracle: &dyn CoalitionOracle,
    n: usize,
    cap: usize,
) -> Result<ShapleyEstimate> {
    if n > cap || n > 63 {
        return Err(Error::TooManyDrivers {
            n,
            cap: cap.min(63),
        });
    }
    let full = 1u64 << n;
    let table: Vec<f64> = (0..full).map(|m| oracle.value(m)).collect::<Result<_>>()?;
    let counts = coalition_counts(n);
    let orders = factorial(n);
    let mut values = vec![0.0; n];
    for (i, v) in values.iter_mut().enumerate() {
        let bit = 1u64 << i;
        for s in (0..full).filter(|s| s & bit == 0) {
            let size = s.count_ones() as usize;
            *v += counts[size] * (table[(s | bit) as usize] - table[s as usize]);
        }
        *v /= orders;
    }
    Ok(ShapleyEstimate {
        values,
        method: ShapleyMethod::Exact,
        samples: None,
        seed: None,
    })
}

/// Permutation-sampling Shapley estimate: each sampled join order credits
/// every driver with its marginal contribution to the drivers before it.
pub fn shapley_mc(
    oracle: &dyn CoalitionOracle,
    n: usize,
    permutations: usize,
    rng: &mut SimRng,
    seed: u64,
) -> Result<ShapleyEstimate> {
    if permutations == 0 {
        return Err(Error::invalid(
            "Monte Carlo Shapley needs at least one permutation",
        ));
    }
    if n > 64 {
        return Err(Error::invalid("coalitions are limited to 64 drivers"));
    }
    let mut sums = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..permutations {
        order.shuffle(rng);
        let mut prefix: Coalition = 0;
        let mut before = 0.0;
        for &i in &order {
            prefix |= 1u64 << i;
            let after = oracle.value(prefix)?;
            sums[i] += after - before;
            before = after;
        }
    }
    Ok(ShapleyEstimate {
        values: sums.into_iter().map(|s| s / permutations as f64).collect(),
        method: ShapleyMethod::MonteCarlo,
        samples: Some(permutations),
        seed: Some(seed),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoutMode {
    /// Retained share `r·v_i`, pool `(1 - r)·Σv`.
    AsPrinted,
    /// Retained share `r·π_i`, pool `(1 - r)·Σπ`.
    KeepIncome,
}

impl fmt::Display for PayoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayoutMode::AsPrinted => "as_printed",
            PayoutMode::KeepIncome => "keep_income",
        })
    }
}

impl FromStr for PayoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_printed" => Ok(PayoutMode::AsPrinted),
            "keep_income" => Ok(PayoutMode::KeepIncome),
            _ => Err(Error::invalid(format!(
                "unknown payout mode `{s}` (expected as_printed or keep_income)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedistributionParams {
    /// Fraction of earnings retained before pooling.
    pub risk: f64,
    pub mode: PayoutMode,
}

impl RedistributionParams {
    pub fn new(risk: f64, mode: PayoutMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&risk) {
            return Err(Error::invalid(format!(
                "risk parameter {risk} outside [0, 1]"
            )));
        }
        Ok(Self { risk, mode })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoutVector {
    pub payouts: Vec<f64>,
}

impl PayoutVector {
    pub fn total(&self) -> f64 {
        self.payouts.iter().sum()
    }
}

fn check_inputs(income: &[f64], value: &[f64]) -> Result<()> {
    if income.len() != value.len() {
        return Err(Error::invalid(format!(
            "{} incomes but {} values",
            income.len(),
            value.len()
        )));
    }
    if let Some(x) = income
        .iter()
        .chain(value)
        .find(|x| !(**x >= 0.0) || !x.is_finite())
    {
        return Err(Error::invalid(format!(
            "incomes and values must be finite and >= 0, got {x}"
        )));
    }
    Ok(())
}

/// Payouts after redistribution.
///
/// Each driver keeps a share `r` (of its value or of its income, by mode);
/// the pooled remainder goes out in proportion to `max(0, v_i - r·π_i)`.
/// When no driver has a deficit the pool share is zero.
pub fn redistribute(
    income: &[f64],
    value: &[f64],
    params: &RedistributionParams,
) -> Result<PayoutVector> {
    check_inputs(income, value)?;
    let r = params.risk;
    let deficits: Vec<f64> = income
        .iter()
        .zip(value)
        .map(|(&p, &v)| (v - r * p).max(0.0))
        .collect();
    let total_deficit: f64 = deficits.iter().sum();
    let (kept, pool): (Vec<f64>, f64) = match params.mode {
        PayoutMode::AsPrinted => (
            value.iter().map(|v| r * v).collect(),
            value.iter().map(|v| (1.0 - r) * v).sum(),
        ),
        PayoutMode::KeepIncome => (
            income.iter().map(|p| r * p).collect(),
            income.iter().map(|p| (1.0 - r) * p).sum(),
        ),
    };
    let payouts = kept
        .iter()
        .zip(&deficits)
        .map(|(k, d)| {
            if *d == total_deficit && *d > 0.0 {
                // sole claimant takes the whole pool
                k + pool
            } else if total_deficit > 0.0 {
                // multiply first: exact whenever d * pool is representable
                k + d * pool / total_deficit
            } else {
                *k
            }
        })
        .collect();
    Ok(PayoutVector { payouts })
}

/// Gain of driver `i`: change in its payout per unit of value when its
/// Shapley value doubles, incomes held fixed.
pub fn gain_metric(
    income: &[f64],
    value: &[f64],
    params: &RedistributionParams,
    i: usize,
) -> Result<f64> {
    check_inputs(income, value)?;
    let vi = *value
        .get(i)
        .ok_or_else(|| Error::invalid(format!("driver {i} out of range")))?;
    if vi == 0.0 {
        return Err(Error::ZeroValue(vec![i]));
    }
    let before = redistribute(income, value, params)?.payouts[i];
    let mut doubled = value.to_vec();
    doubled[i] = 2.0 * vi;
    let after = redistribute(income, &doubled, params)?.payouts[i];
    Ok((after - before) / vi)
}

/// Mean gain over all drivers with nonzero value.
pub fn mean_gain(
    income: &[f64],
    value: &[f64],
    params: &RedistributionParams,
) -> Result<Option<f64>> {
    let gains: Vec<f64> = (0..value.len())
        .filter(|&i| value[i] > 0.0)
        .map(|i| gain_metric(income, value, params, i))
        .collect::<Result<_>>()?;
    Ok(crate::stats::mean(&gains))
}

/// Guaranteed payout floor `min(r·v, (1 - r)·v)`.
pub fn minimum_wage_bound(value: f64, risk: f64) -> f64 {
    (risk * value).min((1.0 - risk) * value)
}
