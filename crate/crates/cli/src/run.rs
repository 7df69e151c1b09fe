//! gen-city, simulate, sweep and train.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fairpool::city::{write_edges_csv, write_locations_csv, CityGraph};
use fairpool::config::{DemandSpec, RunConfig};
use fairpool::demand::SynthDemand;
use fairpool::fleet::write_snapshots;
use fairpool::matching::write_epoch_records;
use fairpool::objectives::{ObjectiveKind, ObjectiveSpec};
use fairpool::reporting::{fairness_metrics, write_report, MetricsReport, ReportFormat};
use fairpool::simulation::{self, DemandSource, RunResult, Scenario, TrainingSetup};
use fairpool::value::{ValueMode, ValueModel};

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))
}

fn write_echo(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = out.join("config.resolved");
    fs::write(&p, cfg.echo()).with_context(|| format!("cannot write {}", p.display()))
}

fn writer(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn gen_city(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let g = cfg.build_city()?;
    write_locations_csv(&g.locations, &out.join("locations.csv"))?;
    write_edges_csv(&g.travel.as_edges(), &out.join("edges.csv"))?;
    g.neighborhoods.write_csv(&out.join("neighborhoods.csv"))?;
    write_echo(cfg, out)
}

fn training_setup<'a>(cfg: &RunConfig, scenario: &Scenario<'a>) -> Result<TrainingSetup<'a>> {
    let demand = match &cfg.demand {
        DemandSpec::Synthetic {
            rate_per_epoch,
            hotspot_skew,
        } => DemandSource::Synthetic(SynthDemand {
            rate_per_epoch: *rate_per_epoch,
            num_epochs: cfg.num_epochs,
            hotspot_skew: *hotspot_skew,
            epoch_len: cfg.epoch_len,
        }),
        DemandSpec::Trips { .. } => DemandSource::Fixed(
            scenario
                .batches
                .iter()
                .flat_map(|b| b.requests.iter().copied())
                .collect(),
        ),
    };
    Ok(TrainingSetup {
        graph: scenario.graph,
        demand,
        fleet: scenario.fleet.clone(),
        settings: cfg.settings(),
        num_epochs: scenario.batches.len(),
        explore_epsilon: cfg.explore_epsilon,
    })
}

/// Zero model, a saved model, or one trained here and saved into `out`.
pub fn value_model(cfg: &RunConfig, scenario: &Scenario, out: &Path) -> Result<ValueModel> {
    match cfg.value_mode {
        ValueMode::Zero => Ok(ValueModel::zero(cfg.gamma)),
        ValueMode::Tabular => {
            if let Some(p) = &cfg.model_path {
                return Ok(ValueModel::load(p)?);
            }
            let mut m = ValueModel::tabular(cfg.alpha, cfg.gamma);
            simulation::train(
                &mut m,
                &training_setup(cfg, scenario)?,
                cfg.episodes,
                cfg.seed,
            )?;
            m.save(&out.join("value_model.txt"))?;
            Ok(m)
        }
    }
}

fn write_requests(path: &Path, scenario: &Scenario, result: &RunResult) -> Result<()> {
    let assigned = result.assignments();
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record([
        "request_id",
        "origin",
        "destination",
        "created_at",
        "epoch",
        "driver_id",
        "fare",
    ])?;
    for b in &scenario.batches {
        for r in &b.requests {
            let (driver, fare) = match assigned.get(&r.id) {
                Some(&(_, d)) => (
                    d.to_string(),
                    scenario.graph.fare(r.origin, r.destination).to_string(),
                ),
                None => (String::new(), String::new()),
            };
            w.write_record([
                r.id.to_string(),
                r.origin.to_string(),
                r.destination.to_string(),
                r.created_at.to_string(),
                b.epoch.to_string(),
                driver,
                fare,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs one simulation and writes every artifact into `out`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    create_dir(out)?;
    write_echo(cfg, out)?;
    let graph = cfg.build_city()?;
    let scenario = cfg.scenario(&graph)?;
    let value = value_model(cfg, &scenario, out)?;
    let result = simulation::simulate(&scenario, &value, &cfg.settings())?;
    write_artifacts(out, &graph, &scenario, &result)
}

fn write_artifacts(
    out: &Path,
    graph: &CityGraph,
    scenario: &Scenario,
    result: &RunResult,
) -> Result<MetricsReport> {
    graph
        .neighborhoods
        .write_csv(&out.join("neighborhoods.csv"))?;
    write_requests(&out.join("requests.csv"), scenario, result)?;
    let mut w = writer(&out.join("epochs.jsonl"))?;
    write_epoch_records(&mut w, &result.records)?;
    w.flush()?;
    let mut w = writer(&out.join("fleet.jsonl"))?;
    write_snapshots(&mut w, &result.snapshots)?;
    w.flush()?;
    let report = fairness_metrics(&result.fleet, &result.log, graph);
    write_report(&report, &out.join("report.json"), ReportFormat::Structured)?;
    write_report(&report, &out.join("report.csv"), ReportFormat::Tabular)?;
    Ok(report)
}

struct Cell {
    name: String,
    spec: ObjectiveSpec,
}

fn sweep_cells(cfg: &RunConfig) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for &kind in &cfg.sweep_objectives {
        let lambdas: &[f64] = match kind {
            ObjectiveKind::Requests | ObjectiveKind::Income => &[0.0],
            ObjectiveKind::DriverFairness => &cfg.sweep_driver_lambdas,
            ObjectiveKind::RiderFairness => &cfg.sweep_rider_lambdas,
        };
        for &lambda in lambdas {
            cells.push(Cell {
                name: format!("cell-{:02}-{kind}", cells.len()),
                spec: ObjectiveSpec::new(kind, lambda).map_err(crate::config_error)?,
            });
        }
    }
    Ok(cells)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One simulate run per cell, all sharing the configured demand seed.
/// Cells run concurrently; failed cells are listed in `failures.csv`.
pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_echo(cfg, out)?;
    let cells = sweep_cells(cfg)?;
    let results: Vec<(PathBuf, Result<MetricsReport>)> = std::thread::scope(|s| {
        let handles: Vec<_> = cells
            .iter()
            .map(|cell| {
                let mut c = cfg.clone();
                c.objective = cell.spec;
                let dir = out.join(&cell.name);
                s.spawn(move || {
                    let r = simulate(&c, &dir);
                    (dir, r)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    (PathBuf::new(), Err(anyhow::anyhow!("sweep cell panicked")))
                })
            })
            .collect()
    });

    let mut table = csv::Writer::from_path(out.join("sweep.csv"))?;
    table.write_record([
        "cell",
        "objective",
        "lambda",
        "status",
        "total_requests",
        "total_requests_serviced",
        "success_rate",
        "min_success_rate",
        "success_rate_variance",
        "total_income",
        "min_income",
        "income_variance",
    ])?;
    let mut failures = csv::Writer::from_path(out.join("failures.csv"))?;
    failures.write_record(["cell", "objective", "lambda", "error"])?;
    let mut failed = 0;
    for (cell, (_, res)) in cells.iter().zip(&results) {
        let (kind, lambda) = (cell.spec.kind.to_string(), cell.spec.lambda.to_string());
        match res {
            Ok(m) => table.write_record([
                cell.name.clone(),
                kind,
                lambda,
                "ok".into(),
                m.total_requests.to_string(),
                m.total_requests_serviced.to_string(),
                opt(m.overall_success_rate),
                opt(m.min_success_rate),
                opt(m.success_rate_variance),
                m.total_income.to_string(),
                opt(m.min_income),
                opt(m.income_variance),
            ])?,
            Err(e) => {
                failed += 1;
                let blank = || String::new();
                table.write_record([
                    cell.name.clone(),
                    kind.clone(),
                    lambda.clone(),
                    "failed".into(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                    blank(),
                ])?;
                failures.write_record([cell.name.clone(), kind, lambda, format!("{e:#}")])?;
            }
        }
    }
    table.flush()?;
    failures.flush()?;
    if failed > 0 {
        anyhow::bail!(
            "{failed} of {} sweep cells failed; see failures.csv",
            cells.len()
        );
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_echo(cfg, out)?;
    let graph = cfg.build_city()?;
    let scenario = cfg.scenario(&graph)?;
    let mut m = ValueModel::tabular(cfg.alpha, cfg.gamma);
    let stats = simulation::train(
        &mut m,
        &training_setup(cfg, &scenario)?,
        cfg.episodes,
        cfg.seed,
    )?;
    m.save(&out.join("value_model.txt"))?;
    let mut w = csv::Writer::from_path(out.join("training.csv"))?;
    w.write_record(["episode", "mean_sq_td_error"])?;
    for (i, e) in stats.mean_sq_td_error.iter().enumerate() {
        w.write_record([i.to_string(), e.to_string()])?;
    }
    w.flush()?;
    let summary: BTreeMap<&str, String> = [
        ("episodes", stats.episodes.to_string()),
        ("updates", stats.updates.to_string()),
        ("table_entries", m.table.len().to_string()),
    ]
    .into_iter()
    .collect();
    let mut w = writer(&out.join("training_summary.txt"))?;
    for (k, v) in summary {
        writeln!(w, "{k} = {v}")?;
    }
    w.flush()?;
    Ok(())
}
