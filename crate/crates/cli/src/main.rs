//! Experiment driver for linear-corruption diffusion: schedule construction,
//! training, sampling, evaluation, verification suites, and NFE sweeps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "lindiff", version, about = "Diffusion over linear corruption processes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model checkpoint (SDM1).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Sampler step counts, e.g. 8,16,32,64,128.
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a corruption schedule (shortest-path, mse-matched, or from file).
    Schedule(CommonArgs),
    /// Train the residual model on the filtered score-matching loss.
    Train(CommonArgs),
    /// Draw samples with the momentum or naive sampler.
    Sample(CommonArgs),
    /// Evaluate samples against held-out data (and the oracle, when it applies).
    Eval(CommonArgs),
    /// Run the verification suites (score identity, gradients, VE reduction,
    /// oracle sampler).
    Verify(CommonArgs),
    /// Sample at several step counts and tabulate metric vs NFE.
    SweepNfe(SweepArgs),
}

fn load_config(args: &CommonArgs) -> Result<(ExperimentConfig, PathBuf), lindiff::Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.display().to_string();
    }
    let out = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn run() -> Result<ExitCode, lindiff::Error> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Schedule(args) => {
            let (cfg, out) = load_config(args)?;
            let path = commands::cmd_schedule(&cfg, &out)?;
            println!("schedule written to {}", path.display());
        }
        Cmd::Train(args) => {
            let (cfg, out) = load_config(args)?;
            let started = std::time::Instant::now();
            let path = commands::cmd_train(&cfg, &out)?;
            println!(
                "checkpoint written to {} ({:.1}s)",
                path.display(),
                started.elapsed().as_secs_f64()
            );
        }
        Cmd::Sample(args) => {
            let (cfg, out) = load_config(args)?;
            let path = commands::cmd_sample(&cfg, &out, args.checkpoint.as_deref())?;
            println!("samples written to {}", path.display());
        }
        Cmd::Eval(args) => {
            let (cfg, out) = load_config(args)?;
            let report = commands::cmd_eval(&cfg, &out, args.checkpoint.as_deref())?;
            println!(
                "sliced_w2 = {}  nfe = {}  samples = {}  ({:.1}s)",
                report.sliced_w2,
                report.nfe_per_sample,
                report.num_samples,
                report.wall_clock_seconds
            );
            if let Some(rows) = &report.per_t_score_mse {
                for (t, mse) in rows {
                    println!("score mse at t = {t}: {mse}");
                }
            }
        }
        Cmd::Verify(args) => {
            let (cfg, out) = load_config(args)?;
            let reports = commands::cmd_verify(&cfg, &out)?;
            let mut all_pass = true;
            for r in &reports {
                println!("{}", r.line());
                all_pass &= r.passed;
            }
            return Ok(if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            });
        }
        Cmd::SweepNfe(args) => {
            let (cfg, out) = load_config(&args.common)?;
            let path =
                commands::cmd_sweep_nfe(&cfg, &out, args.common.checkpoint.as_deref(), &args.steps)?;
            println!("sweep written to {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
