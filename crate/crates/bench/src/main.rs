use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedloc_bench::config::{parse_override, ExperimentConfig};
use fedloc_bench::experiment::{self, eval_checkpoints};
use fedloc_bench::report;
use fedloc_bench::surrogate::{write_surrogate, SurrogateConfig};

#[derive(Parser)]
#[command(name = "fedloc", version, about = "Federated indoor localization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set fl.rounds=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run one experiment per value of an axis.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint file or a directory of checkpoints.
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        min_rss: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Print per-client partition statistics.
    InspectPartition {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write a synthetic UJIIndoorLoc-format dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 19937)]
        records: usize,
        #[arg(long, default_value_t = 1111)]
        validation_records: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(config: &Path, set: &[String]) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    let overrides = set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentConfig::load(config, &overrides)?)
}

fn main_inner(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let mut log = |m: &str| eprintln!("{m}");
    match cli.command {
        Command::Run { config, set } => {
            let cfg = load(&config, &set)?;
            let run = experiment::run_experiment(&cfg, &mut log)?;
            println!("test_accuracy\t{}", run.test.accuracy);
            if let Some(v) = &run.validation {
                println!("validation_accuracy\t{}", v.accuracy);
            }
            println!("output\t{}", cfg.output.dir.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
            set,
        } => {
            let cfg = load(&config, &set)?;
            let rows = experiment::sweep(&cfg, &axis, &values, &mut log)?;
            print!("{}", report::sweep_table(&axis, &rows));
        }
        Command::Eval {
            checkpoint,
            data,
            min_rss,
            alpha,
        } => {
            let mut cfg = ExperimentConfig::default();
            if let Some(m) = min_rss {
                cfg.dataset.min_rss = m;
            }
            if let Some(a) = alpha {
                cfg.dataset.alpha = a;
            }
            let r = eval_checkpoints(&checkpoint, &data, &cfg)?;
            print!("{}", report::metrics_table(&[&r]));
        }
        Command::InspectPartition { config, set } => {
            let cfg = load(&config, &set)?;
            let s = experiment::inspect_partition(&cfg)?;
            print!("{}", s.table);
            println!("label_skew_chi2\t{}\t(iid {})", s.chi2, s.iid_chi2);
            println!("mean_label_divergence\t{}\t(iid {})", s.divergence, s.iid_divergence);
        }
        Command::Synth {
            out,
            records,
            validation_records,
            seed,
        } => {
            write_surrogate(
                &out,
                &SurrogateConfig {
                    train_records: records,
                    validation_records,
                    seed,
                },
            )?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
