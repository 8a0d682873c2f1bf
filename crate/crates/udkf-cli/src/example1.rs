//! Monte Carlo benchmark: sweep the ill-conditioning parameter and compare
//! the four estimators on simulated data.

use std::path::PathBuf;

use clap::Args as ClapArgs;
use nalgebra::DVector;
use serde::Serialize;
use udkf::mle::{monte_carlo_study, Estimator, FitConfig};
use udkf::Example1Model;

use crate::util::{fmt_f64, write_csv};
use crate::{EXIT_FAILURES, EXIT_OK};

#[derive(ClapArgs)]
pub struct Args {
    /// Comma-separated ill-conditioning levels.
    #[arg(long, default_value = "1e0,1e-2,1e-4,1e-6,1e-8,1e-10", value_delimiter = ',')]
    pub deltas: Vec<f64>,
    /// Monte Carlo replicates per level.
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    /// Observations per replicate.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// True parameter value used by the simulator.
    #[arg(long, default_value_t = 3.0)]
    pub theta_true: f64,
    /// Starting point of every fit.
    #[arg(long, default_value_t = 1.0)]
    pub theta0: f64,
    #[arg(long, default_value_t = 0x4D43_0001)]
    pub seed: u64,
    /// Write the summary table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write the summary table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Serialize)]
struct Row {
    delta: f64,
    estimator: String,
    mean: Option<f64>,
    rmse: Option<f64>,
    mape_pct: Option<f64>,
    failures: usize,
    runs: usize,
    mean_seconds: Option<f64>,
}

#[derive(Serialize)]
struct Report {
    version: String,
    config: Config,
    rows: Vec<Row>,
}

#[derive(Serialize)]
struct Config {
    deltas: Vec<f64>,
    runs: usize,
    steps: usize,
    theta_true: f64,
    theta0: f64,
    seed: u64,
}

fn opt(v: f64) -> Option<f64> {
    if v.is_finite() {
        Some(v)
    } else {
        None
    }
}

pub fn run(args: &Args) -> Result<i32, udkf::Error> {
    let theta_true = DVector::from_element(1, args.theta_true);
    let config = FitConfig::new(DVector::from_element(1, args.theta0)).with_bounds(
        DVector::from_element(1, 1e-3),
        DVector::from_element(1, 1e3),
    );

    let mut rows = Vec::new();
    let mut any_failures = false;
    for &delta in &args.deltas {
        let model = Example1Model::new(delta)?;
        let study = monte_carlo_study(
            &model,
            &theta_true,
            args.steps,
            args.runs,
            &Estimator::ALL,
            &config,
            args.seed,
        )?;
        for s in &study.summaries {
            any_failures |= s.failures > 0;
            rows.push(Row {
                delta,
                estimator: s.estimator.name().to_string(),
                mean: opt(s.mean[0]),
                rmse: opt(s.rmse[0]),
                mape_pct: opt(s.mape_pct),
                failures: s.failures,
                runs: s.runs,
                mean_seconds: opt(s.mean_seconds),
            });
        }
    }

    // Human-readable table on stdout; all-failed cells are marked.
    println!(
        "{:>9} {:>14} {:>10} {:>10} {:>9} {:>9} {:>10}",
        "delta", "estimator", "mean", "rmse", "mape%", "failures", "sec/fit"
    );
    for r in &rows {
        let cell = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "failed".to_string(),
        };
        println!(
            "{:>9.0e} {:>14} {:>10} {:>10} {:>9} {:>9} {:>10}",
            r.delta,
            r.estimator,
            cell(r.mean),
            cell(r.rmse),
            cell(r.mape_pct),
            format!("{}/{}", r.failures, r.runs),
            cell(r.mean_seconds),
        );
    }

    let report = Report {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: Config {
            deltas: args.deltas.clone(),
            runs: args.runs,
            steps: args.steps,
            theta_true: args.theta_true,
            theta0: args.theta0,
            seed: args.seed,
        },
        rows,
    };
    if let Some(path) = &args.json {
        std::fs::write(path, serde_json::to_string_pretty(&report).unwrap())
            .map_err(|e| udkf::Error::DegenerateData(format!("cannot write json: {e}")))?;
    }
    if let Some(path) = &args.csv {
        let header = [
            "delta", "estimator", "mean", "rmse", "mape_pct", "failures", "runs", "mean_seconds",
        ];
        let csv_rows: Vec<Vec<String>> = report
            .rows
            .iter()
            .map(|r| {
                let cell = |v: Option<f64>| match v {
                    Some(x) => fmt_f64(x),
                    None => "failed".to_string(),
                };
                vec![
                    fmt_f64(r.delta),
                    r.estimator.clone(),
                    cell(r.mean),
                    cell(r.rmse),
                    cell(r.mape_pct),
                    r.failures.to_string(),
                    r.runs.to_string(),
                    cell(r.mean_seconds),
                ]
            })
            .collect();
        write_csv(path, &header, &csv_rows)
            .map_err(|e| udkf::Error::DegenerateData(format!("cannot write csv: {e}")))?;
    }

    Ok(if any_failures { EXIT_FAILURES } else { EXIT_OK })
}
