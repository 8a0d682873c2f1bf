//! End-to-end tests of the `udkf` binary: deterministic simulation, the
//! Monte Carlo benchmark outputs and the market-efficiency pipeline on a
//! synthesized price series.

use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DVector;
use udkf::{Model, TeeModel};

fn udkf_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_udkf"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn simulate_is_deterministic() {
    let a = run_ok(udkf_bin().args(["simulate", "--model", "example1", "--steps", "20", "--seed", "9"]));
    let b = run_ok(udkf_bin().args(["simulate", "--model", "example1", "--steps", "20", "--seed", "9"]));
    assert_eq!(a.stdout, b.stdout, "same seed must give identical bytes");
    let c = run_ok(udkf_bin().args(["simulate", "--model", "example1", "--steps", "20", "--seed", "10"]));
    assert_ne!(a.stdout, c.stdout, "different seed must give a different draw");

    // 1 presample row + 20 steps + header.
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().count(), 22);
    assert_eq!(text.lines().next().unwrap(), "k,y1,y2");
}

#[test]
fn simulate_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.cfg");
    std::fs::write(
        &cfg,
        "kind = lti\nn = 2\nm = 1\nd = 1\nT = 0.9 0.1  0 0.8\nZ = 1 0.5\n\
         Q = 0.2 0  0 0.1\nH = 0.4\nPi0 = 1 0  0 1\n",
    )
    .unwrap();
    let out = dir.path().join("sim.csv");
    run_ok(udkf_bin().args([
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "15",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 17);
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 2);
        assert!(fields[1].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn simulate_rejects_bad_usage() {
    let out = udkf_bin()
        .args(["simulate", "--model", "nosuch"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = udkf_bin().args(["simulate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn example1_benchmark_reports() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    let out = run_ok(udkf_bin().args([
        "example1",
        "--deltas",
        "1e0",
        "--runs",
        "4",
        "--steps",
        "40",
        "--json",
        json.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("ud-analytic"), "table: {table}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4, "one row per estimator");
    for row in rows {
        assert_eq!(row["failures"], 0);
        let mean = row["mean"].as_f64().unwrap();
        assert!((mean - 3.0).abs() < 1.0, "mean = {mean}");
    }

    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(csv_text.lines().count(), 5);
    assert!(csv_text.starts_with("delta,estimator,mean,rmse,mape_pct"));
}

#[test]
fn example1_exit_code_flags_failures() {
    // At this conditioning level the conventional estimators break down,
    // which the benchmark reports through its exit code.
    let out = udkf_bin()
        .args(["example1", "--deltas", "1e-8", "--runs", "3", "--steps", "40"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

/// Prices synthesized from the efficiency model itself: simulated returns
/// are percentage log-returns, so `p_k = p_{k-1} exp(r_k / 100)`.
fn write_price_csv(path: &Path, n: usize, seed: u64) {
    let theta = DVector::from_vec(vec![0.05, 0.15, 0.75, 0.1, 0.005, 0.005]);
    let model = TeeModel::with_presample(0.5, 0.05, 0.0);
    let sim = model.simulate(&theta, n, seed).unwrap();
    let mut price = 100.0f64;
    let mut lines = vec!["date,close".to_string(), format!("2020-01-01,{price}")];
    let mut day = 0usize;
    let mut push = |r: f64, day: &mut usize, lines: &mut Vec<String>| {
        price *= (r / 100.0).exp();
        *day += 1;
        lines.push(format!("2020-{:02}-{:02},{price:.8}", 1 + *day / 28, 1 + *day % 28));
    };
    push(sim.y0[0], &mut day, &mut lines);
    for y in &sim.y {
        push(y[0], &mut day, &mut lines);
    }
    std::fs::write(path, lines.join("\n")).unwrap();
}

#[test]
fn tee_pipeline_on_synthesized_prices() {
    let dir = tempfile::tempdir().unwrap();
    let prices = dir.path().join("prices.csv");
    write_price_csv(&prices, 500, 0x7EE0_0002);
    let json = dir.path().join("path.json");
    let csv = dir.path().join("path.csv");
    let out = run_ok(udkf_bin().args([
        "tee",
        "--csv",
        prices.to_str().unwrap(),
        "--json",
        json.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]));
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.contains("fitted GARCH-in-mean"), "stdout: {summary}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let a1 = report["theta"]["a1"].as_f64().unwrap();
    let b1 = report["theta"]["b1"].as_f64().unwrap();
    assert!(a1 >= 0.0 && b1 >= 0.0 && a1 + b1 < 1.0, "a1 = {a1}, b1 = {b1}");
    assert!(report["loglik"].as_f64().unwrap().is_finite());

    let rows = report["rows"].as_array().unwrap();
    // One filtered step per return after the lag-seeding first return.
    assert_eq!(rows.len(), 500);
    for row in rows {
        let lo = row["ci_low"].as_f64().unwrap();
        let hi = row["ci_high"].as_f64().unwrap();
        let b = row["beta1"].as_f64().unwrap();
        assert!(lo <= b && b <= hi);
        let efficient = row["efficient"].as_bool().unwrap();
        assert_eq!(efficient, lo <= 0.0 && 0.0 <= hi);
        assert!(!row["date"].as_str().unwrap().is_empty());
    }

    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(csv_text.lines().count(), 501);
    assert!(csv_text.starts_with("date,beta1,ci_low,ci_high,efficient,h"));
}

#[test]
fn tee_rejects_degenerate_prices() {
    let dir = tempfile::tempdir().unwrap();
    let prices = dir.path().join("flat.csv");
    std::fs::write(
        &prices,
        "date,close\n2020-01-01,100\n2020-01-02,100\n2020-01-03,100\n2020-01-04,100\n",
    )
    .unwrap();
    let out = udkf_bin()
        .args(["tee", "--csv", prices.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("constant"), "stderr: {err}");
}
