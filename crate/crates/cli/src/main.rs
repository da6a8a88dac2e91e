use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use kldispatch::harness::{
    self, best_kl_lambda, emit_plots, read_rows, report, run_cell, run_experiment, write_rows, CellKey,
    ExperimentSpec, PolicyKind, RunOptions,
};
use kldispatch::qnet::save_checkpoint;

#[derive(Parser)]
#[command(name = "kldispatch", version, about = "Grid-world order dispatching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run only this KL weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Run only this drift degree.
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    episodes: Option<u64>,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentSpec::default(),
        };
        if let Some(s) = self.seed {
            spec.seeds = vec![s];
        }
        if let Some(l) = self.lambda {
            spec.lambdas = vec![l];
        }
        if let Some(d) = self.drift {
            spec.drifts = vec![d];
        }
        if let Some(e) = self.episodes {
            spec.episodes = e;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train (or run) a single cell and write its rows.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "kl_based")]
        policy: PolicyKind,
        #[arg(long, default_value = "train.csv")]
        out: PathBuf,
        /// Write the final evaluation episode as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Save the trained network and optimizer state.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the full cross-product of policies, drifts, λ values and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Keep complete cells already in the output file.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print final-window means and improvements over NOD.
    Report {
        #[arg(long, default_value = "results.csv")]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        window: usize,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write λ-sweep plots (SVG) and their CSVs.
    Plot {
        #[arg(long, default_value = "results.csv")]
        input: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        window: usize,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn train(
    common: &Common,
    policy: PolicyKind,
    out: &Path,
    trace: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let spec = common.spec()?;
    let key = CellKey {
        policy,
        drift: spec.drifts[0],
        lambda: match policy {
            PolicyKind::KlBased => spec.lambdas[0],
            _ => 0.0,
        },
        seed: spec.seeds[0],
    };
    let (rows, outputs) = run_cell(&spec, key, trace.is_some()).with_context(|| format!("cell {key}"))?;
    write_rows(out, &rows)?;
    if let Some(path) = trace {
        harness::write_trace(path, &outputs.trace)?;
    }
    if let Some(path) = checkpoint {
        match &outputs.trainer {
            Some(t) => save_checkpoint(&t.online, &t.optimizer, path)?,
            None => bail!("policy {policy} has no network to checkpoint"),
        }
    }
    let tail = &rows[rows.len().saturating_sub(spec.final_window)..];
    let n = tail.len() as f64;
    println!(
        "{key}: final {} episodes ADI {:.3} ORR {:.4}",
        tail.len(),
        tail.iter().map(|r| r.adi).sum::<f64>() / n,
        tail.iter().map(|r| r.orr).sum::<f64>() / n
    );
    Ok(())
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            common,
            policy,
            out,
            trace,
            checkpoint,
        } => {
            train(&common, policy, &out, trace.as_deref(), checkpoint.as_deref())?;
            Ok(true)
        }
        Command::Sweep {
            common,
            out,
            resume,
            jobs,
        } => {
            let spec = common.spec()?;
            let summary = run_experiment(&spec, &out, &RunOptions { resume, jobs })?;
            println!(
                "{} cells: {} reused, {} run, {} failed",
                summary.cells_total,
                summary.cells_reused,
                summary.cells_run,
                summary.failures.len()
            );
            for (key, err) in &summary.failures {
                eprintln!("failed {key}: {err}");
            }
            Ok(summary.all_completed())
        }
        Command::Report { input, window, json } => {
            let rows = read_rows(&input)?;
            let rep = report(&rows, window)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rep)?);
            } else {
                print!("{}", rep.to_table());
                for d in rep.drifts() {
                    if let Some(l) = best_kl_lambda(&rep, d) {
                        println!("best lambda at drift {d}: {l}");
                    }
                }
            }
            Ok(true)
        }
        Command::Plot { input, out, window } => {
            let rows = read_rows(&input)?;
            for path in emit_plots(&rows, window, &out)? {
                println!("{}", path.display());
            }
            Ok(true)
        }
        Command::DefaultConfig => {
            print!("{}", ExperimentSpec::default().to_toml_string()?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
