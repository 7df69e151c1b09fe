//! shapley, redistribute and report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fairpool::config::{RunConfig, ShapleyChoice};
use fairpool::objectives::NeighborhoodTallies;
use fairpool::redistribution::{
    gain_metric, mean_gain, minimum_wage_bound, redistribute as payouts, shapley_exact, shapley_mc,
    CoalitionOracle, Memoized, RedistributionParams, ShapleyEstimate, TableOracle,
};
use fairpool::reporting::{
    income_value_spread, metrics_from_parts, write_report, DriverIncome, RedistributionSummary,
    ReportFormat,
};
use fairpool::rng;
use fairpool::simulation::{self, SimulationOracle};

use crate::{config_error, load_config, run, Common};

const BOUND_TOL: f64 = 1e-9;

fn estimate(cfg: &RunConfig, oracle: &dyn CoalitionOracle, n: usize) -> Result<ShapleyEstimate> {
    let exact = match cfg.shapley_method {
        ShapleyChoice::Exact => true,
        ShapleyChoice::MonteCarlo => false,
        ShapleyChoice::Auto => n <= cfg.shapley_exact_cap,
    };
    let est = if exact {
        shapley_exact(oracle, n, cfg.shapley_exact_cap)?
    } else {
        let seed = rng::derive_seed(cfg.seed, rng::SHAPLEY);
        shapley_mc(
            oracle,
            n,
            cfg.shapley_permutations,
            &mut rng::stream(cfg.seed, rng::SHAPLEY),
            seed,
        )?
    };
    Ok(est)
}

fn is_dir(p: &Path) -> bool {
    fs::metadata(p).map(|m| m.is_dir()).unwrap_or(false)
}

fn header_of(p: &Path) -> Result<String> {
    let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
    Ok(text.lines().next().unwrap_or("").trim().to_string())
}

fn pair_incomes(pi: Option<Vec<f64>>, v: &[f64]) -> Result<Vec<f64>> {
    match pi {
        None => Ok(v.to_vec()),
        Some(p) if p.len() == v.len() => Ok(p),
        Some(p) => Err(config_error(format!(
            "--pi has {} entries for {} drivers",
            p.len(),
            v.len()
        ))),
    }
}

/// Per-driver ids, incomes and Shapley values.
struct Valuation {
    ids: Vec<usize>,
    pi: Vec<f64>,
    estimate: ShapleyEstimate,
}

fn from_table(cfg: &RunConfig, path: &Path, pi: Option<Vec<f64>>) -> Result<Valuation> {
    let table = TableOracle::read_csv(path)?;
    let n = table.drivers();
    let estimate = estimate(cfg, &table, n)?;
    Ok(Valuation {
        ids: (0..n).collect(),
        pi: pair_incomes(pi, &estimate.values)?,
        estimate,
    })
}

fn from_simulation(cfg: &RunConfig, out: &Path) -> Result<Valuation> {
    let graph = cfg.build_city()?;
    let scenario = cfg.scenario(&graph)?;
    let value = run::value_model(cfg, &scenario, out)?;
    let full = simulation::simulate(&scenario, &value, &cfg.settings())?;
    let ids: Vec<usize> = scenario.fleet.drivers.iter().map(|d| d.id).collect();
    let n = ids.len();
    let oracle = Memoized::new(SimulationOracle {
        scenario,
        value: &value,
        settings: cfg.settings(),
    });
    let estimate = estimate(cfg, &oracle, n)?;
    Ok(Valuation {
        ids,
        pi: full.fleet.incomes(),
        estimate,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn summary(
    pi: &[f64],
    v: &[f64],
    params: &RedistributionParams,
) -> Result<(Vec<f64>, RedistributionSummary)> {
    let q = payouts(pi, v, params)?.payouts;
    let s = RedistributionSummary {
        r: params.risk,
        mode: params.mode,
        sum_pi: pi.iter().sum(),
        sum_v: v.iter().sum(),
        sum_q: q.iter().sum(),
        mean_gain: mean_gain(pi, v, params)?,
        spread: income_value_spread(&q, v).ok(),
    };
    Ok((q, s))
}

pub fn shapley(c: &Common, input: Option<&Path>, pi: Option<Vec<f64>>) -> Result<()> {
    let out = &c.out;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let (cfg, val) = match input {
        Some(p) if is_dir(p) => {
            let cfg = load_config(&Common {
                config: Some(p.join("config.resolved")),
                ..c.clone()
            })?;
            let val = from_simulation(&cfg, out)?;
            (cfg, val)
        }
        Some(p) => {
            let cfg = load_config(c)?;
            let val = from_table(&cfg, p, pi)?;
            (cfg, val)
        }
        None => {
            let cfg = load_config(c)?;
            let val = from_simulation(&cfg, out)?;
            (cfg, val)
        }
    };
    fs::write(out.join("config.resolved"), cfg.echo())?;
    let r = *cfg
        .r_grid
        .first()
        .ok_or_else(|| config_error("redistribution.r_grid is empty"))?;
    let params = RedistributionParams::new(r, cfg.payout_mode)?;
    let v = &val.estimate.values;
    let (q, s) = summary(&val.pi, v, &params)?;

    let mut w = csv::Writer::from_path(out.join("shapley.csv"))?;
    w.write_record(["driver_id", "pi", "v", "q", "bound"])?;
    for i in 0..v.len() {
        w.write_record([
            val.ids[i].to_string(),
            val.pi[i].to_string(),
            v[i].to_string(),
            q[i].to_string(),
            minimum_wage_bound(v[i], r).to_string(),
        ])?;
    }
    w.flush()?;

    let doc = serde_json::json!({
        "method": val.estimate.method,
        "samples": val.estimate.samples,
        "seed": val.estimate.seed,
        "summary": s,
    });
    fs::write(
        out.join("shapley_summary.json"),
        serde_json::to_string_pretty(&doc)? + "\n",
    )?;
    Ok(())
}

/// Reads `driver_id,pi,v,...` rows.
fn read_shapley_csv(path: &Path) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let h = r.headers()?.clone();
    let col = |name: &str| {
        h.iter()
            .position(|c| c == name)
            .with_context(|| format!("{}: missing column {name}", path.display()))
    };
    let (ci, cp, cv) = (col("driver_id")?, col("pi")?, col("v")?);
    let (mut ids, mut pi, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("").to_string();
        let ctx = || format!("{}: row {}", path.display(), line + 2);
        ids.push(field(ci).parse().with_context(ctx)?);
        pi.push(field(cp).parse().with_context(ctx)?);
        v.push(field(cv).parse().with_context(ctx)?);
    }
    Ok((ids, pi, v))
}

pub fn redistribute(c: &Common, input: &Path, pi: Option<Vec<f64>>) -> Result<()> {
    let cfg = load_config(c)?;
    let out = &c.out;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let path: PathBuf = if is_dir(input) {
        input.join("shapley.csv")
    } else {
        input.to_path_buf()
    };
    let (ids, pi, v) = if header_of(&path)?.starts_with("coalition_bitmask") {
        let val = from_table(&cfg, &path, pi)?;
        (val.ids, val.pi, val.estimate.values)
    } else {
        let (ids, file_pi, v) = read_shapley_csv(&path)?;
        let pi = match pi {
            Some(p) => pair_incomes(Some(p), &v)?,
            None => file_pi,
        };
        (ids, pi, v)
    };

    let mut rows = csv::Writer::from_path(out.join("redistribution.csv"))?;
    rows.write_record([
        "r",
        "driver_id",
        "pi",
        "v",
        "q",
        "gain",
        "bound",
        "bound_ok",
    ])?;
    let mut sums = csv::Writer::from_path(out.join("redistribution_summary.csv"))?;
    sums.write_record([
        "r",
        "mode",
        "sum_pi",
        "sum_v",
        "sum_q",
        "mean_gain",
        "payout_value_spread",
        "bound_violations",
    ])?;
    let mut violations_total = 0;
    for &r in &cfg.r_grid {
        let params = RedistributionParams::new(r, cfg.payout_mode)?;
        let (q, s) = summary(&pi, &v, &params)?;
        let mut violations = 0;
        for i in 0..v.len() {
            let bound = minimum_wage_bound(v[i], r);
            let ok = q[i] >= bound - BOUND_TOL;
            violations += usize::from(!ok);
            let gain = if v[i] > 0.0 {
                Some(gain_metric(&pi, &v, &params, i)?)
            } else {
                None
            };
            rows.write_record([
                r.to_string(),
                ids[i].to_string(),
                pi[i].to_string(),
                v[i].to_string(),
                q[i].to_string(),
                fmt_opt(gain),
                bound.to_string(),
                ok.to_string(),
            ])?;
        }
        violations_total += violations;
        sums.write_record([
            r.to_string(),
            cfg.payout_mode.to_string(),
            s.sum_pi.to_string(),
            s.sum_v.to_string(),
            s.sum_q.to_string(),
            fmt_opt(s.mean_gain),
            fmt_opt(s.spread),
            violations.to_string(),
        ])?;
    }
    rows.flush()?;
    sums.flush()?;
    fs::write(out.join("config.resolved"), cfg.echo())?;
    if violations_total > 0 {
        eprintln!("warning: {violations_total} payouts fall below the minimum-wage bound");
    }
    Ok(())
}

/// Rebuilds the report from `neighborhoods.csv`, `requests.csv` and
/// `fleet.jsonl`. With `--r` and a `shapley.csv` in the run directory, a
/// redistribution summary at the first grid value is attached.
pub fn report(c: &Common, input: &Path) -> Result<()> {
    let out = &c.out;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;

    let mut labels = Vec::new();
    let p = input.join("neighborhoods.csv");
    let mut r =
        csv::Reader::from_path(&p).with_context(|| format!("cannot read {}", p.display()))?;
    for rec in r.records() {
        let rec = rec?;
        let label: u32 = rec
            .get(1)
            .unwrap_or("")
            .parse()
            .with_context(|| format!("{}: bad label", p.display()))?;
        labels.push(label);
    }
    let h = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut tallies = NeighborhoodTallies {
        serviced: vec![0; h],
        total: vec![0; h],
    };
    let p = input.join("requests.csv");
    let mut r =
        csv::Reader::from_path(&p).with_context(|| format!("cannot read {}", p.display()))?;
    for rec in r.records() {
        let rec = rec?;
        let origin: usize = rec
            .get(1)
            .unwrap_or("")
            .parse()
            .with_context(|| format!("{}: bad origin", p.display()))?;
        let label = *labels
            .get(origin)
            .with_context(|| format!("{}: origin {origin} not in neighborhoods.csv", p.display()))?
            as usize;
        tallies.total[label - 1] += 1;
        if !rec.get(5).unwrap_or("").is_empty() {
            tallies.serviced[label - 1] += 1;
        }
    }
    let p = input.join("fleet.jsonl");
    let text = fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
    let mut last: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let snap: fairpool::fleet::DriverSnapshot = serde_json::from_str(line)
            .with_context(|| format!("{}: line {}", p.display(), i + 1))?;
        if !last.contains_key(&snap.driver_id) {
            order.push(snap.driver_id);
        }
        last.insert(snap.driver_id, (snap.epoch, snap.income));
    }
    let incomes = order
        .iter()
        .map(|id| DriverIncome {
            driver_id: *id,
            income: last[id].1,
        })
        .collect();
    let mut m = metrics_from_parts(&tallies, incomes);

    let shap = input.join("shapley.csv");
    if let (Some(grid), true) = (&c.r, shap.exists()) {
        let cfg = load_config(c)?;
        let (_, pi, v) = read_shapley_csv(&shap)?;
        let params = RedistributionParams::new(grid[0], cfg.payout_mode)?;
        m.redistribution = Some(summary(&pi, &v, &params)?.1);
    }
    write_report(&m, &out.join("report.json"), ReportFormat::Structured)?;
    write_report(&m, &out.join("report.csv"), ReportFormat::Tabular)?;
    Ok(())
}
