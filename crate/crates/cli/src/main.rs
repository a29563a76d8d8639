use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use csicount::experiment::{
    cmd_analyze, cmd_evaluate, cmd_prepare, cmd_report, cmd_train, ExperimentConfig, MeanSd, DATASET_ROOT_ENV,
};

#[derive(Parser)]
#[command(name = "csicount", version, about = "Multi-user WiFi CSI activity recognition and counting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load or synthesize the dataset, summarize it and write split manifests.
    Prepare(Common),
    /// Train one model per split.
    Train(WithRun),
    /// Recompute metrics from saved checkpoints.
    Evaluate(WithRun),
    /// Measure how far apart users sit in feature space.
    Analyze(WithRun),
    /// Tabulate every trained run under the output directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set train.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct WithRun {
    #[command(flatten)]
    common: Common,
    /// Run directory; defaults to the newest matching run.
    #[arg(long)]
    run: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
            .with_context(|| format!("loading {}", self.config.display()))
    }
}

fn print_aggregate(agg: &std::collections::BTreeMap<String, MeanSd>) {
    for (k, m) in agg {
        println!("{k}: {:.6} ± {:.6} (n={})", m.mean, m.sd, m.n);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(c) => {
            let cfg = c.load()?;
            let (dir, summary) = cmd_prepare(&cfg).context("prepare failed")?;
            print!("{}", summary.render());
            println!("run {}", dir.display());
        }
        Command::Train(w) => {
            let cfg = w.common.load()?;
            let (dir, record) = cmd_train(&cfg, w.run.as_deref()).context("train failed")?;
            println!("run {}", dir.display());
            print_aggregate(&record.aggregate);
        }
        Command::Evaluate(w) => {
            let cfg = w.common.load()?;
            let (path, record) = cmd_evaluate(&cfg, w.run.as_deref()).context("evaluate failed")?;
            println!("wrote {}", path.display());
            print_aggregate(&record.aggregate);
        }
        Command::Analyze(w) => {
            let cfg = w.common.load()?;
            let (path, inv) = cmd_analyze(&cfg, w.run.as_deref()).context("analyze failed")?;
            let r = &inv.report;
            println!("wrote {}", path.display());
            println!("users {:?} (excluded {:?})", r.users, r.excluded);
            println!("euclidean {:.4} ± {:.4}", r.euclidean_mean, r.euclidean_sd);
            println!("cosine {:.4} ± {:.4}", r.cosine_mean, r.cosine_sd);
        }
        Command::Report(c) => {
            let cfg = c.load()?;
            let (dir, report) = cmd_report(&cfg.output_dir).context("report failed")?;
            print!("{}", report.render());
            if let Some(dir) = dir {
                println!("\nwrote {}", dir.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if format!("{e:#}").contains(DATASET_ROOT_ENV) {
                eprintln!("hint: set {DATASET_ROOT_ENV} or data.root");
            }
            ExitCode::FAILURE
        }
    }
}
