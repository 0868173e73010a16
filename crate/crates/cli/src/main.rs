use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcq_cli::{load_config, run, Mode, Overrides};

#[derive(Parser)]
#[command(name = "dcq", version, about = "Divide-and-conquer composite quantile regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write an SVG plot.
    #[arg(long)]
    svg: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo replications and the RASE table.
    Simulate(Common),
    /// Fit the composite estimator to a CSV dataset.
    Fit(Common),
    /// Re-aggregate a saved plan and local values.
    Predict(Common),
    /// Outlier treatment and test-set RMSE/MAE for all estimators.
    Evaluate(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, args) = match cli.command {
        Command::Simulate(a) => (Mode::Simulate, a),
        Command::Fit(a) => (Mode::Fit, a),
        Command::Predict(a) => (Mode::Predict, a),
        Command::Evaluate(a) => (Mode::Evaluate, a),
    };
    let ov = Overrides {
        seed: args.seed,
        threads: args.threads,
        out: args.out,
        svg: args.svg,
    };
    let result = load_config(&args.config, &ov, mode).and_then(|cfg| run(mode, &cfg, ov.svg));
    match result {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
