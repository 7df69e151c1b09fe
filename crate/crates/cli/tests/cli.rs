use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fairpool::config::RunConfig;
use fairpool::fleet::advance_fleet;
use fairpool::matching::{enumerate_feasible, FeasibleAction};
use serde_json::Value;

/// Runs `fairpool <cmd> --config <cfg> --out <out> <extra..>` and asserts success.
fn run_ok(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fairpool"));
    c.args([cmd, "--config"])
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra);
    let o = c.output().unwrap();
    assert!(
        o.status.success(),
        "{cmd} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

const SMALL: &str = "seed = 3\ndemand.rate_per_epoch = 3\ndemand.num_epochs = 20\n";

#[test]
fn bad_config_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    for text in [
        "fleet.drivers = 0\n",
        "no.such.key = 1\n",
        "objective.kind = nonsense\n",
    ] {
        let cfg = write(tmp.path(), "bad.cfg", text);
        let o = Command::new(env!("CARGO_BIN_EXE_fairpool"))
            .args(["simulate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(
            o.status.code(),
            Some(2),
            "{text}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let o = Command::new(env!("CARGO_BIN_EXE_fairpool"))
        .args(["simulate", "--r", "1.5", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    // coalition table missing mask 2
    let table = write(tmp.path(), "t.csv", "coalition_bitmask,value\n1,3\n3,5\n");
    let o = Command::new(env!("CARGO_BIN_EXE_fairpool"))
        .args(["shapley", "--input"])
        .arg(&table)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn zero_demand_gives_empty_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.cfg",
        "demand.rate_per_epoch = 0\ndemand.num_epochs = 5\n",
    );
    let out = tmp.path().join("out");
    run_ok("simulate", &cfg, &out, &[]);
    let r = json(&out.join("report.json"));
    assert_eq!(r["total_requests"], 0);
    assert_eq!(r["total_requests_serviced"], 0);
    assert_eq!(r["total_income"], 0.0);
    assert!(r["overall_success_rate"].is_null());
    assert_eq!(r["income_variance"], 0.0);
}

#[test]
fn report_regenerates_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.cfg", SMALL);
    let sim = tmp.path().join("sim");
    run_ok("simulate", &cfg, &sim, &[]);
    let rep = tmp.path().join("rep");
    let o = Command::new(env!("CARGO_BIN_EXE_fairpool"))
        .args(["report", "--input"])
        .arg(&sim)
        .arg("--out")
        .arg(&rep)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "report.csv"] {
        assert_eq!(
            fs::read(sim.join(f)).unwrap(),
            fs::read(rep.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn single_cell_sweep_matches_simulate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.cfg",
        &format!("{SMALL}objective.kind = income\nsweep.objectives = income\n"),
    );
    let sim = tmp.path().join("sim");
    let sweep = tmp.path().join("sweep");
    run_ok("simulate", &cfg, &sim, &[]);
    run_ok("sweep", &cfg, &sweep, &[]);
    let cell = sweep.join("cell-00-income");
    for f in ["report.json", "requests.csv", "epochs.jsonl", "fleet.jsonl"] {
        assert_eq!(
            fs::read(sim.join(f)).unwrap(),
            fs::read(cell.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(csv_rows(&sweep.join("sweep.csv")).len(), 1);
    assert_eq!(csv_rows(&sweep.join("failures.csv")).len(), 0);
}

#[test]
fn driver_fairness_at_zero_lambda_matches_income() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.cfg",
        &format!("{SMALL}sweep.objectives = income,driver_fairness\nsweep.driver_lambdas = 0\n"),
    );
    let out = tmp.path().join("sweep");
    run_ok("sweep", &cfg, &out, &[]);
    let rows = csv_rows(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][1], "income");
    assert_eq!(&rows[1][1], "driver_fairness");
    // metric columns start after cell, objective, lambda, status
    for k in 4..rows[0].len() {
        assert_eq!(rows[0][k], rows[1][k], "column {k}");
    }
}

fn redistribution(tmp: &Path, input: &Path, extra: &[&str]) -> Vec<csv::StringRecord> {
    let out = tmp.join(format!("red-{}", extra.join("_").replace([',', '.'], "")));
    let o = Command::new(env!("CARGO_BIN_EXE_fairpool"))
        .args(["redistribute", "--input"])
        .arg(input)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    csv_rows(&out.join("redistribution.csv"))
}

const EXAMPLE_TABLE: &str = "coalition_bitmask,value\n1,10\n2,10\n4,5\n3,15\n5,15\n6,15\n7,15\n";

fn column(rows: &[csv::StringRecord], k: usize) -> Vec<f64> {
    rows.iter().map(|r| r[k].parse().unwrap()).collect()
}

#[test]
fn redistribute_endpoints_and_worked_example() {
    let tmp = tempfile::tempdir().unwrap();
    let table = write(tmp.path(), "t.csv", EXAMPLE_TABLE);
    let v = [35.0 / 6.0, 35.0 / 6.0, 10.0 / 3.0];

    let rows = redistribution(
        tmp.path(),
        &table,
        &["--r", "1", "--mode", "as_printed", "--pi", "4,4,7"],
    );
    assert_eq!(column(&rows, 4), column(&rows, 3));

    let rows = redistribution(
        tmp.path(),
        &table,
        &["--r", "0", "--mode", "keep_income", "--pi", "4,4,7"],
    );
    assert_eq!(column(&rows, 4), column(&rows, 3));

    // r = 0.5: deficits v - π/2 = (23/6, 23/6, 0), pool 7.5, so the first
    // two split the pool evenly on top of π/2 and the third keeps π/2.
    let rows = redistribution(
        tmp.path(),
        &table,
        &["--r", "0.5", "--mode", "keep_income", "--pi", "4,4,7"],
    );
    let q = column(&rows, 4);
    for (got, want) in q.iter().zip([5.75, 5.75, 3.5]) {
        assert!((got - want).abs() < 1e-12, "{q:?}");
    }
    for (got, want) in column(&rows, 3).iter().zip(v) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!(rows.iter().all(|r| &r[7] == "true"));
}

#[test]
fn shapley_on_example_table() {
    let tmp = tempfile::tempdir().unwrap();
    let table = write(tmp.path(), "t.csv", EXAMPLE_TABLE);
    let out = tmp.path().join("sh");
    let o = Command::new(env!("CARGO_BIN_EXE_fairpool"))
        .args(["shapley", "--input"])
        .arg(&table)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = column(&csv_rows(&out.join("shapley.csv")), 2);
    assert_eq!(v.iter().sum::<f64>(), 15.0);
    assert!((v[0] - 35.0 / 6.0).abs() < 1e-12 && (v[2] - 10.0 / 3.0).abs() < 1e-12);
}

/// Best number of requests served by one action per driver with no request
/// shared, by trying every combination.
fn most_served(actions: &[Vec<FeasibleAction>], d: usize, used: &mut HashSet<u64>) -> usize {
    if d == actions.len() {
        return 0;
    }
    let mut best = 0;
    for a in &actions[d] {
        let ids = a.request_ids();
        if ids.iter().any(|i| used.contains(i)) {
            continue;
        }
        used.extend(&ids);
        best = best.max(ids.len() + most_served(actions, d + 1, used));
        for i in &ids {
            used.remove(i);
        }
    }
    best
}

#[test]
fn scripted_trips_serve_the_brute_force_maximum() {
    let tmp = tempfile::tempdir().unwrap();
    let locs: String = (0..5).map(|i| format!("{i},0,{i}\n")).collect();
    write(tmp.path(), "locations.csv", &format!("id,lat,lon\n{locs}"));
    let edges: String = (1..5)
        .map(|i| format!("{},{i},2\n{i},{},2\n", i - 1, i - 1))
        .collect();
    write(
        tmp.path(),
        "edges.csv",
        &format!("src,dst,minutes\n{edges}"),
    );
    write(
        tmp.path(),
        "trips.csv",
        "pickup_lat,pickup_lon,dropoff_lat,dropoff_lon,epoch_seconds\n\
         0,0,0,4,5\n0,0,0,1,10\n0,4,0,0,15\n0,2,0,3,20\n0,3,0,2,30\n0,1,0,4,40\n",
    );
    let cfg = write(
        tmp.path(),
        "c.cfg",
        "seed = 9\ncity.source = csv\ncity.locations_csv = locations.csv\ncity.edges_csv = edges.csv\n\
         demand.source = trips\ndemand.trips_csv = trips.csv\ndemand.num_epochs = 1\n\
         fleet.drivers = 2\nfleet.capacity = 2\n",
    );
    let out = tmp.path().join("out");
    run_ok("simulate", &cfg, &out, &[]);
    let served = csv_rows(&out.join("requests.csv"))
        .iter()
        .filter(|r| !r[5].is_empty())
        .count();

    let rc = RunConfig::load(&cfg).unwrap();
    let graph = rc.build_city().unwrap();
    let requests = rc.build_requests(&graph).unwrap();
    assert_eq!(requests.len(), 6);
    let mut fleet = rc.build_fleet(&graph).unwrap();
    advance_fleet(&mut fleet, rc.epoch_len, &graph);
    let actions: Vec<Vec<FeasibleAction>> = fleet
        .drivers
        .iter()
        .enumerate()
        .map(|(slot, d)| enumerate_feasible(slot, d, &requests, &graph, &rc.limits, fleet.clock))
        .collect();
    let best = most_served(&actions, 0, &mut HashSet::new());
    assert!(best > 0);
    assert_eq!(served, best);
}

#[test]
fn config_given_as_bare_file_name() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.cfg", SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_fairpool"))
        .current_dir(tmp.path())
        .args(["simulate", "--config", "c.cfg", "--out", "out"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("out/report.json").exists());
}
