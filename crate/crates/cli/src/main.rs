use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nctorus_cli::config::ExperimentConfig;
use nctorus_cli::output::{unix_ms, write_run, Manifest};
use nctorus_cli::{criteria, pipelines};

#[derive(Parser)]
#[command(name = "nct", version, about = "Spectral experiments on the noncommutative two torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Finite-section half-width (overrides `bandwidth`).
    #[arg(long)]
    bandwidth: Option<u32>,
    /// Multiplies every tolerance.
    #[arg(long, default_value_t = 1.0)]
    tolerance_scale: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalue counting slope against the closed-form Weyl constant.
    Weyl(RunArgs),
    /// B0 and B2 by symbol quadrature, heat-trace fit and closed form.
    Heat(RunArgs),
    /// Noncommutative residue of the configured order -2 symbol.
    Residue(RunArgs),
    /// Dixmier estimate of the finite section against half the residue.
    ConnesTrace(RunArgs),
    /// Composes the two differential-operator symbols of the config.
    Compose(RunArgs),
    /// Runs the acceptance suite; TAP output.
    Verify {
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
        /// Run only these criteria (1-10).
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
    },
    /// Prints the fully resolved default config.
    Defaults,
    /// Re-runs a previous run from its manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = args.bandwidth {
        anyhow::ensure!(n > 0, "--bandwidth must be positive");
        cfg.bandwidth = n;
    }
    anyhow::ensure!(args.tolerance_scale > 0.0, "--tolerance-scale must be positive");
    cfg.scale_tolerances(args.tolerance_scale);
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok((cfg, out))
}

fn execute(command: &str, cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let started = unix_ms();
    let report = pipelines::run(command, cfg)?;
    write_run(out, cfg, &report, started)?;
    println!("{}", serde_json::to_string_pretty(&report.json)?);
    Ok(report.pass)
}

fn main_inner() -> Result<bool> {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Weyl(a) => ("weyl", a),
        Command::Heat(a) => ("heat", a),
        Command::Residue(a) => ("residue", a),
        Command::ConnesTrace(a) => ("connes-trace", a),
        Command::Compose(a) => ("compose", a),
        Command::Verify { tolerance_scale, only } => {
            let results: Vec<_> = if only.is_empty() {
                criteria::all(*tolerance_scale)
            } else {
                only.iter().map(|&i| criteria::by_id(i, *tolerance_scale).with_context(|| format!("no criterion {i}"))).collect::<Result<_>>()?
            };
            println!("1..{}", results.len());
            for c in &results {
                println!("{}", c.tap_line());
            }
            return Ok(results.iter().all(|c| c.pass));
        }
        Command::Defaults => {
            println!("{}", ExperimentConfig::default().to_json());
            return Ok(true);
        }
        Command::Replay { manifest, out } => {
            let m = Manifest::load(manifest)?;
            // round-trip through the validator so old manifests get the same checks
            let cfg = ExperimentConfig::parse(&m.config.to_json(), &manifest.display().to_string())?;
            return execute(&m.command, &cfg, out);
        }
    };
    let (cfg, out) = resolve(args)?;
    execute(name, &cfg, &out)
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
