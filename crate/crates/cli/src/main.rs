use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use indiff_cli::{run, Command, RunConfig, RunOptions};

#[derive(Parser)]
#[command(name = "indiff", version, about = "Indifference prices, exercise boundaries and hedges for American calls on non-traded assets")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Price table `y,t,P` with a JSON sidecar.
    Price(Io),
    /// Exercise boundary `t,y_star`.
    Boundary(Io),
    /// Optimal hedge `y,t,pi`.
    Hedge(Io),
    /// Employee stock option cost `y,t,C`.
    Eso(Io),
    /// Monte-Carlo dual bracket around the price.
    DualCheck(Io),
    /// Price tables over a parameter grid.
    Sweep(Io),
    /// Runs the invariant suite.
    Selftest(Io),
}

#[derive(Args)]
struct Io {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn threads_from_env() -> anyhow::Result<Option<usize>> {
    let Ok(raw) = std::env::var("INDIFF_THREADS") else {
        return Ok(None);
    };
    let n: usize = raw.trim().parse().with_context(|| format!("INDIFF_THREADS={raw:?} is not a count"))?;
    anyhow::ensure!(n > 0, "INDIFF_THREADS must be positive");
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("building the global thread pool")?;
    Ok(Some(n))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, io) = match cli.command {
        Cmd::Price(io) => (Command::Price, io),
        Cmd::Boundary(io) => (Command::Boundary, io),
        Cmd::Hedge(io) => (Command::Hedge, io),
        Cmd::Eso(io) => (Command::Eso, io),
        Cmd::DualCheck(io) => (Command::DualCheck, io),
        Cmd::Sweep(io) => (Command::Sweep, io),
        Cmd::Selftest(io) => (Command::Selftest, io),
    };
    let threads = match threads_from_env() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("indiff: {e:#}");
            return ExitCode::from(1);
        }
    };
    let result = RunConfig::load(&io.config).and_then(|cfg| {
        let opts = RunOptions { out: io.out, threads };
        run(cmd, &cfg, &opts, &mut std::io::stdout())
    });
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("indiff: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
