use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use subsep::model::load_checkpoint;
use subsep_cli::config::ExperimentConfig;
use subsep_cli::experiment::{self, angles_report, load_data, paired_angles_csv, trial_split};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "subsep", version, about = "Train and evaluate subspace-separating autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the base seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every trial of an experiment and write the reports.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        /// Overrides the iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Classify with a saved model on the split of one trial.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Smallest principal angles between class subspaces, before and after.
    Angles {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Dump |coefficients| of one class block as CSV.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tiny synthetic end-to-end run.
    Selftest {
        #[arg(long, default_value = "out/selftest")]
        out: PathBuf,
    },
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, trials, iterations } => {
            let (mut cfg, out) = common.load()?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(i) = iterations {
                cfg.train.iterations = i;
            }
            let start = Instant::now();
            let report = experiment::run_experiment(&cfg, &out, &mut log)?;
            print!("{}", report.to_table());
            eprintln!("wall time {:.1}s, outputs in {}", start.elapsed().as_secs_f64(), out.display());
        }
        Command::Evaluate { common, checkpoint, trial } => {
            let (cfg, _) = common.load()?;
            for (m, a) in experiment::evaluate_checkpoint(&cfg, &checkpoint, trial)? {
                println!("{m:<16} {a:.2}%");
            }
        }
        Command::Angles { common, checkpoint, trial } => {
            let (cfg, out) = common.load()?;
            let data = load_data(&cfg.dataset).context("data")?;
            let (train, _) = trial_split(&cfg, &data, trial).context("split")?;
            let model = load_checkpoint(&checkpoint).context("checkpoint")?;
            let classes = if cfg.analysis.angle_classes.is_empty() {
                (0..train.num_classes()).collect()
            } else {
                cfg.analysis.angle_classes.clone()
            };
            let (pixel, feature) =
                angles_report(&model, &train, &classes, cfg.analysis.basis_dim()).context("angles")?;
            let names: Vec<String> = classes.iter().map(|&c| train.class_names[c].clone()).collect();
            let csv = paired_angles_csv(&pixel, &feature, &names);
            std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
            let path = out.join("angles_paired.csv");
            std::fs::write(&path, &csv).with_context(|| format!("cannot write {}", path.display()))?;
            print!("{csv}");
        }
        Command::Heatmap { checkpoint, class, out } => {
            let path = experiment::export_csse_heatmap(&checkpoint, class, &out)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Selftest { out } => {
            let report = experiment::selftest(&out, &mut log)?;
            print!("{}", report.to_table());
            println!("selftest ok");
        }
    }
    Ok(())
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
