//! Command line front end: the ill-conditioning benchmark study, the
//! GARCH-in-mean market-efficiency analysis and a deterministic simulator.

mod example1;
mod prices;
mod simulate;
mod tee;
mod util;

use clap::{Parser, Subcommand};

/// Exit codes: 0 on success, 1 when the requested analysis completed but
/// reported estimator failures, 2 on usage or data errors.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURES: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(name = "udkf", version, about = "UD-factorized Kalman filtering and ML estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo benchmark over a sweep of ill-conditioning levels.
    Example1(example1::Args),
    /// GARCH-in-mean time-varying market-efficiency analysis of a price series.
    Tee(tee::Args),
    /// Draw a deterministic trajectory from a built-in or configured model.
    Simulate(simulate::Args),
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Example1(args) => example1::run(&args),
        Command::Tee(args) => tee::run(&args),
        Command::Simulate(args) => simulate::run(&args),
    };
    let code = match code {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    };
    std::process::exit(code);
}
