use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use hbdose::experiment::{self, ExperimentConfig, Workspace};

/// Simulate hemodialysis patients, learn dosing policies and compare them
/// against the rule-based protocol.
#[derive(Debug, Parser)]
#[command(name = "hbdose", version)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides `seeds.master` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and cluster the training cohort and draw the evaluation cohort.
    Cohort,
    /// Simulate random-dose treatment of the training cohort into transitions.
    Simulate,
    /// Train the Fitted Q Iteration policy.
    TrainFqi,
    /// Train the Q-learning baseline.
    TrainQl,
    /// Evaluate the protocol and all trained policies on the evaluation cohort.
    Evaluate,
    /// Write plot-ready tables and print the comparison.
    Report,
    /// Run every stage in order.
    Run,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds.master = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = load_config(cli)?;
    let ws = Workspace::new(&cfg.out_dir)?;
    let started = Instant::now();
    let fqi_progress = |p: &hbdose::fqi::ConvergencePoint| {
        eprintln!("  fqi iteration {:>3}: distance {:.4e}", p.iteration, p.distance);
    };
    let lines = match cli.command {
        Command::Cohort => experiment::stage_cohort(&cfg, &ws)?,
        Command::Simulate => experiment::stage_simulate(&cfg, &ws)?,
        Command::TrainFqi => experiment::stage_train_fqi(&cfg, &ws, fqi_progress)?,
        Command::TrainQl => experiment::stage_train_ql(&cfg, &ws)?,
        Command::Evaluate => experiment::stage_evaluate(&cfg, &ws)?,
        Command::Report => experiment::stage_report(&ws)?,
        Command::Run => {
            let mut lines = experiment::stage_cohort(&cfg, &ws)?;
            lines.extend(experiment::stage_simulate(&cfg, &ws)?);
            lines.iter().for_each(|l| println!("{l}"));
            lines = experiment::stage_train_fqi(&cfg, &ws, fqi_progress)?;
            lines.extend(experiment::stage_train_ql(&cfg, &ws)?);
            lines.iter().for_each(|l| println!("{l}"));
            // The report repeats the evaluation summary.
            experiment::stage_evaluate(&cfg, &ws)?;
            experiment::stage_report(&ws)?
        }
    };
    for l in &lines {
        println!("{l}");
    }
    eprintln!("done in {:.1}s, outputs in {}", started.elapsed().as_secs_f64(), cfg.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
