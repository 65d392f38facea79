//! Command-line front end: population generation, plan optimization, tier
//! games and billing-cycle simulation. Summaries go to stdout, diagnostics to
//! stderr. Exit codes: 0 success, 2 usage or validation error, 1 anything else.

mod commands;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use throttleplan::population::DEFAULT_SEED;

#[derive(Debug, Parser)]
#[command(
    name = "throttleplan",
    version,
    about = "Regret-minimizing bandwidth throttling plans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded population CSV.
    Generate(GenerateArgs),
    /// Find the regret-minimizing (T, r) plan for a population.
    Optimize(OptimizeArgs),
    /// Tier games: equilibria per capacity split, or leader/follower play.
    #[command(subcommand)]
    Tiers(TiersCommand),
    /// Simulate staggered billing cycles with and without throttling.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Stream,
    Download,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// `lognormal:mu=1,sigma=0.25` or `codec:v=0.2,0.4,0.6,0.8,1.0`.
    #[arg(long)]
    dist: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct CapacityArgs {
    /// Capacity per cycle, in the population's units.
    #[arg(long, conflicts_with = "capacity_fraction")]
    capacity: Option<f64>,
    /// Capacity as a fraction of total demand.
    #[arg(long)]
    capacity_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    #[arg(long)]
    pop: PathBuf,
    #[command(flatten)]
    capacity: CapacityArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Download)]
    mode: ModeArg,
    /// Exponent of both regret terms.
    #[arg(long, default_value_t = 2.0)]
    rho: f64,
    /// Comma-separated codec rates (stream mode).
    #[arg(long, value_delimiter = ',')]
    codecs: Vec<f64>,
    /// Write the `T,r,regret` curve here.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Thresholds sampled for the curve.
    #[arg(long, default_value_t = 200)]
    points: usize,
}

#[derive(Debug, Args)]
struct GameArgs {
    #[arg(long)]
    pop: PathBuf,
    #[command(flatten)]
    capacity: CapacityArgs,
    /// Comma-separated tier prices, cheapest first.
    #[arg(long, value_delimiter = ',', required = true)]
    prices: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    kappa: f64,
    #[arg(long, default_value_t = 2.0)]
    rho: f64,
    /// Directory for the CSV outputs.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum TiersCommand {
    /// Every Nash assignment of a two-tier game at each capacity split.
    Sweep {
        #[command(flatten)]
        game: GameArgs,
        #[arg(long, default_value_t = throttleplan::tiers::DEFAULT_SPLIT_STEP)]
        split_step: f64,
    },
    /// ISP picks thresholds, users switch tiers, until nobody moves.
    Stackelberg {
        #[command(flatten)]
        game: GameArgs,
        #[arg(long, default_value_t = throttleplan::tiers::DEFAULT_MAX_ITERS)]
        max_iters: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    pop: PathBuf,
    /// Plan as `T,r`.
    #[arg(long, value_delimiter = ',', conflicts_with = "optimize")]
    plan: Option<Vec<f64>>,
    /// Use the optimal plan for the given capacity instead of `--plan`.
    #[arg(long)]
    optimize: bool,
    #[command(flatten)]
    capacity: CapacityArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Stream)]
    mode: ModeArg,
    #[arg(long, value_delimiter = ',')]
    codecs: Vec<f64>,
    #[arg(long, default_value_t = 60)]
    days: usize,
    #[arg(long)]
    diurnal: bool,
    /// Also write every user's hourly state.
    #[arg(long)]
    states: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
