//! Deterministic trajectory simulator for the built-in models and for
//! models described by a plain-text config file.

use std::path::PathBuf;

use clap::Args as ClapArgs;
use nalgebra::DVector;
use udkf::{Example1Model, FixedModel, Model, TeeModel};

use crate::util::{fmt_f64, write_csv};
use crate::EXIT_OK;

#[derive(ClapArgs)]
pub struct Args {
    /// Built-in model to draw from: `example1` or `tee`. Mutually exclusive
    /// with `--config`.
    #[arg(long, conflicts_with = "config")]
    pub model: Option<String>,
    /// Config file describing a fixed (parameter-free) state-space model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model parameters, comma separated. Defaults: `3` for example1, a
    /// stationary low-volatility set for tee, empty for config models.
    #[arg(long, value_delimiter = ',')]
    pub theta: Option<Vec<f64>>,
    /// Ill-conditioning level of the example1 model.
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &Args) -> Result<i32, udkf::Error> {
    let (model, default_theta): (Box<dyn Model>, Vec<f64>) =
        match (args.model.as_deref(), &args.config) {
            (Some("example1"), _) => (Box::new(Example1Model::new(args.delta)?), vec![3.0]),
            (Some("tee"), _) => (
                Box::new(TeeModel::with_presample(0.5, 0.05, 0.0)),
                vec![0.05, 0.15, 0.75, 0.1, 0.005, 0.005],
            ),
            (Some(other), _) => {
                return Err(udkf::Error::DegenerateData(format!(
                    "unknown model '{other}' (expected example1 or tee)"
                )))
            }
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    udkf::Error::DegenerateData(format!("cannot read {}: {e}", path.display()))
                })?;
                (Box::new(FixedModel::from_config_str(&text)?), Vec::new())
            }
            (None, None) => {
                return Err(udkf::Error::DegenerateData(
                    "either --model or --config is required".into(),
                ))
            }
        };

    let theta = DVector::from_vec(args.theta.clone().unwrap_or(default_theta));
    if theta.len() != model.theta_dim() {
        return Err(udkf::Error::DimensionMismatch(format!(
            "model expects {} parameters, got {}",
            model.theta_dim(),
            theta.len()
        )));
    }
    let sim = model.simulate(&theta, args.steps, args.seed)?;

    let m = sim.y0.len();
    let mut header: Vec<String> = vec!["k".to_string()];
    for j in 0..m {
        header.push(format!("y{}", j + 1));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut rows: Vec<Vec<String>> = Vec::with_capacity(sim.y.len() + 1);
    let push_row = |k: usize, y: &DVector<f64>, rows: &mut Vec<Vec<String>>| {
        let mut row = vec![k.to_string()];
        row.extend(y.iter().map(|&v| fmt_f64(v)));
        rows.push(row);
    };
    push_row(0, &sim.y0, &mut rows);
    for (k, y) in sim.y.iter().enumerate() {
        push_row(k + 1, y, &mut rows);
    }

    match &args.out {
        Some(path) => write_csv(path, &header_refs, &rows)
            .map_err(|e| udkf::Error::DegenerateData(format!("cannot write csv: {e}")))?,
        None => {
            println!("{}", header.join(","));
            for row in &rows {
                println!("{}", row.join(","));
            }
        }
    }
    Ok(EXIT_OK)
}
