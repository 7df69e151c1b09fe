//! Run metrics and their on-disk forms.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::city::CityGraph;
use crate::demand::RequestLog;
use crate::fleet::FleetState;
use crate::objectives::{neighborhood_tallies, NeighborhoodTallies};
use crate::redistribution::PayoutMode;
use crate::stats;
use crate::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodRate {
    pub neighborhood: u32,
    pub serviced: u64,
    pub total: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverIncome {
    pub driver_id: usize,
    pub income: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedistributionSummary {
    pub r: f64,
    pub mode: PayoutMode,
    pub sum_pi: f64,
    pub sum_v: f64,
    pub sum_q: f64,
    pub mean_gain: Option<f64>,
    /// Population std of `q_i / v_i`; absent when some `v_i` is zero.
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub report_version: u32,
    pub total_requests: u64,
    pub total_requests_serviced: u64,
    pub total_income: f64,
    /// Absent when no request was made.
    pub overall_success_rate: Option<f64>,
    /// Only neighborhoods with at least one request.
    pub neighborhood_rates: Vec<NeighborhoodRate>,
    pub min_success_rate: Option<f64>,
    pub success_rate_variance: Option<f64>,
    pub driver_incomes: Vec<DriverIncome>,
    pub min_income: Option<f64>,
    pub income_variance: Option<f64>,
    pub redistribution: Option<RedistributionSummary>,
}

/// Success-rate and income metrics for a finished (or in-progress) run.
pub fn fairness_metrics(fleet: &FleetState, log: &RequestLog, graph: &CityGraph) -> MetricsReport {
    let tallies = neighborhood_tallies(fleet, log, &graph.neighborhoods);
    let incomes: Vec<DriverIncome> = fleet
        .drivers
        .iter()
        .map(|d| DriverIncome {
            driver_id: d.id,
            income: d.income,
        })
        .collect();
    metrics_from_parts(&tallies, incomes)
}

/// Builds a report from per-neighborhood tallies and per-driver incomes,
/// for callers working from saved artifacts rather than a live fleet.
pub fn metrics_from_parts(
    tallies: &NeighborhoodTallies,
    driver_incomes: Vec<DriverIncome>,
) -> MetricsReport {
    let neighborhood_rates: Vec<NeighborhoodRate> = tallies
        .serviced
        .iter()
        .zip(&tallies.total)
        .enumerate()
        .filter(|(_, (_, &k))| k > 0)
        .map(|(j, (&h, &k))| NeighborhoodRate {
            neighborhood: j as u32 + 1,
            serviced: h,
            total: k,
            rate: h as f64 / k as f64,
        })
        .collect();
    let rates: Vec<f64> = neighborhood_rates.iter().map(|r| r.rate).collect();
    let total: u64 = tallies.total.iter().sum();
    let serviced: u64 = tallies.serviced.iter().sum();
    let incomes: Vec<f64> = driver_incomes.iter().map(|d| d.income).collect();
    MetricsReport {
        report_version: REPORT_VERSION,
        total_requests: total,
        total_requests_serviced: serviced,
        total_income: incomes.iter().sum(),
        overall_success_rate: (total > 0).then(|| serviced as f64 / total as f64),
        min_success_rate: stats::min(&rates),
        success_rate_variance: (!rates.is_empty()).then(|| stats::variance(&rates)),
        neighborhood_rates,
        driver_incomes,
        min_income: stats::min(&incomes),
        income_variance: (!incomes.is_empty()).then(|| stats::variance(&incomes)),
        redistribution: None,
    }
}

/// Population standard deviation of `q_i / v_i`.
pub fn income_value_spread(q: &[f64], v: &[f64]) -> Result<f64> {
    if q.len() != v.len() {
        return Err(Error::invalid(format!(
            "{} payouts but {} values",
            q.len(),
            v.len()
        )));
    }
    let zero: Vec<usize> = (0..v.len()).filter(|&i| v[i] == 0.0).collect();
    if !zero.is_empty() {
        return Err(Error::ZeroValue(zero));
    }
    let ratios: Vec<f64> = q.iter().zip(v).map(|(a, b)| a / b).collect();
    Ok(stats::std_dev(&ratios))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// One JSON document.
    Structured,
    /// CSV rows `metric,scope,value`.
    Tabular,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Tabular form; absent values leave the `value` column empty.
pub fn report_rows(report: &MetricsReport) -> String {
    let mut s = String::from("metric,scope,value\n");
    let mut row = |m: &str, scope: &str, v: String| {
        let _ = writeln!(s, "{m},{scope},{v}");
    };
    row(
        "report_version",
        "overall",
        report.report_version.to_string(),
    );
    row(
        "total_requests",
        "overall",
        report.total_requests.to_string(),
    );
    row(
        "total_requests_serviced",
        "overall",
        report.total_requests_serviced.to_string(),
    );
    row("total_income", "overall", report.total_income.to_string());
    row("success_rate", "overall", opt(report.overall_success_rate));
    row("min_success_rate", "overall", opt(report.min_success_rate));
    row(
        "success_rate_variance",
        "overall",
        opt(report.success_rate_variance),
    );
    row("min_income", "overall", opt(report.min_income));
    row("income_variance", "overall", opt(report.income_variance));
    for n in &report.neighborhood_rates {
        let scope = format!("neighborhood:{}", n.neighborhood);
        row("requests", &scope, n.total.to_string());
        row("serviced", &scope, n.serviced.to_string());
        row("success_rate", &scope, n.rate.to_string());
    }
    for d in &report.driver_incomes {
        row(
            "income",
            &format!("driver:{}", d.driver_id),
            d.income.to_string(),
        );
    }
    if let Some(r) = &report.redistribution {
        row("risk", "overall", r.r.to_string());
        row("payout_mode", "overall", r.mode.to_string());
        row("sum_pi", "overall", r.sum_pi.to_string());
        row("sum_v", "overall", r.sum_v.to_string());
        row("sum_q", "overall", r.sum_q.to_string());
        row("mean_gain", "overall", opt(r.mean_gain));
        row("payout_value_spread", "overall", opt(r.spread));
    }
    s
}

pub fn write_report(report: &MetricsReport, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Structured => {
            let mut s = serde_json::to_string_pretty(report)
                .map_err(|e| Error::invalid(format!("cannot encode report: {e}")))?;
            s.push('\n');
            s
        }
        ReportFormat::Tabular => report_rows(report),
    };
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::city::{build_travel_closure, Edge, Location, NeighborhoodMap};
    use crate::demand::RideRequest;
    use crate::fleet::DriverState;
    use crate::objectives::{eval_objective, ObjectiveSpec};

    fn two_hood_city() -> CityGraph {
        let locations = (0..2)
            .map(|i| Location {
                id: i,
                lat: 0.0,
                lon: i as f64,
            })
            .collect();
        let edges = [
            Edge {
                src: 0,
                dst: 1,
                minutes: 2.0,
            },
            Edge {
                src: 1,
                dst: 0,
                minutes: 2.0,
            },
        ];
        let travel = build_travel_closure(2, &edges).unwrap();
        CityGraph::new(
            locations,
            travel,
            5.0,
            NeighborhoodMap::new(vec![1, 2], 2).unwrap(),
        )
        .unwrap()
    }

    fn req(id: u64, o: usize) -> RideRequest {
        RideRequest {
            id,
            origin: o,
            destination: 1 - o,
            created_at: 0.0,
        }
    }

    /// Hood 1 gets 5 requests (1 serviced), hood 2 gets 5 (2 serviced).
    fn scenario() -> (CityGraph, FleetState, RequestLog) {
        let g = two_hood_city();
        let mut log = RequestLog::new();
        let reqs: Vec<RideRequest> = (0..10).map(|i| req(i, (i / 5) as usize)).collect();
        log.extend(&reqs).unwrap();
        let mut d0 = DriverState::idle(0, 0, 4);
        let mut d1 = DriverState::idle(1, 1, 4);
        d0.accept(&[reqs[0]], Default::default(), &g);
        d1.accept(&[reqs[5], reqs[6]], Default::default(), &g);
        for id in [0, 5, 6] {
            log.mark_serviced(id).unwrap();
        }
        (
            g,
            FleetState {
                drivers: vec![d0, d1],
                clock: 0.0,
            },
            log,
        )
    }

    #[test]
    fn metrics_example() {
        let (g, fleet, log) = scenario();
        let m = fairness_metrics(&fleet, &log, &g);
        assert_eq!(m.min_success_rate, Some(0.2));
        assert!((m.success_rate_variance.unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(m.overall_success_rate, Some(0.3));
        assert_eq!(m.total_requests_serviced, 3);
        assert_eq!(m.total_income, 21.0);
        assert_eq!(
            m.total_income,
            eval_objective(&fleet, &log, &ObjectiveSpec::income(), &g)
        );
        assert_eq!(m.income_variance, Some(12.25));
        assert_eq!(m.min_income, Some(7.0));
    }

    #[test]
    fn empty_run_reports_absent_rates() {
        let g = two_hood_city();
        let fleet = FleetState {
            drivers: vec![DriverState::idle(0, 0, 4)],
            clock: 0.0,
        };
        let m = fairness_metrics(&fleet, &RequestLog::new(), &g);
        assert_eq!(m.overall_success_rate, None);
        assert_eq!(m.min_success_rate, None);
        assert!(m.neighborhood_rates.is_empty());
        assert_eq!(m.income_variance, Some(0.0));
        assert_eq!(m.min_income, Some(0.0));
    }

    #[test]
    fn spread_examples() {
        assert_eq!(income_value_spread(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(income_value_spread(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 0.5);
        assert!(matches!(
            income_value_spread(&[1.0, 1.0, 1.0], &[1.0, 0.0, 0.0]),
            Err(Error::ZeroValue(v)) if v == vec![1, 2]
        ));
    }

    #[test]
    fn files_are_deterministic_and_round_trip() {
        let (g, fleet, log) = scenario();
        let mut m = fairness_metrics(&fleet, &log, &g);
        m.redistribution = Some(RedistributionSummary {
            r: 0.3,
            mode: PayoutMode::KeepIncome,
            sum_pi: 21.0,
            sum_v: 21.0,
            sum_q: 21.0,
            mean_gain: Some(0.1 + 0.2),
            spread: None,
        });
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        write_report(&m, &a, ReportFormat::Structured).unwrap();
        write_report(&m, &b, ReportFormat::Structured).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_report(&a).unwrap(), m);
        let c = dir.path().join("c.csv");
        write_report(&m, &c, ReportFormat::Tabular).unwrap();
        let text = std::fs::read_to_string(&c).unwrap();
        assert!(text.starts_with("metric,scope,value\n"));
        assert!(text.contains("success_rate,neighborhood:1,0.2\n"));
        assert!(text.contains("payout_value_spread,overall,\n"));
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        assert!(rdr.records().all(|r| r.unwrap().len() == 3));
    }
}
