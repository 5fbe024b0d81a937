mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distvar_core::solver::RegularizationMode;

use config::{parse_mode_arg, RunConfig};

#[derive(Parser)]
#[command(name = "distvar", version, about = "Distance-adaptive variational super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a low-resolution observation from an HR image and depth map.
    Degrade(Common),
    /// Restore an HR estimate from a low-resolution image and depth map.
    Restore(Common),
    /// Write the per-pixel cutoff map and per-depth rank table.
    Analyze(Common),
    /// Run the variant benchmark over a dataset or the synthetic suite.
    Bench(Common),
    /// Fit regularizer parameters on training pairs.
    Calibrate(Common),
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["2", "4", "8"]))]
    scale: Option<String>,
    #[arg(long, value_parser = parse_mode_arg)]
    mode: Option<RegularizationMode>,
    /// Border pixels excluded from metrics.
    #[arg(long)]
    shave: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the built-in synthetic scene suite (bench, calibrate).
    #[arg(long)]
    synthetic: bool,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.atmosphere.rng_seed = seed;
        }
        if let Some(scale) = &self.scale {
            cfg.scale = scale.parse()?;
        }
        if let Some(mode) = self.mode {
            cfg.solver.mode = mode;
        }
        if let Some(shave) = self.shave {
            cfg.shave = shave;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("DISTVAR_THREADS") {
        let n: usize = value
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("DISTVAR_THREADS must be a positive integer, got `{value}`"))?;
        if n == 0 {
            anyhow::bail!("DISTVAR_THREADS must be a positive integer, got `{value}`");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Degrade(c) => commands::degrade(&c.load()?),
        Command::Restore(c) => commands::restore(&c.load()?),
        Command::Analyze(c) => commands::analyze(&c.load()?),
        Command::Bench(c) => commands::bench(&c.load()?, c.synthetic),
        Command::Calibrate(c) => commands::calibrate_cmd(&c.load()?, c.synthetic),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
