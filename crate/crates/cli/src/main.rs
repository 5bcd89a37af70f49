//! `kt`: preprocess interaction logs, generate synthetic learners, train and
//! evaluate knowledge tracing models, and tabulate results.

mod config;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kt_core::data::Task;
use kt_core::ingest::Schema;
use kt_core::pipeline::{self, Dataset};
use kt_core::synth::{self, SynthConfig};
use kt_core::KtError;
use log::info;

use crate::config::RunConfigFile;

/// Bad flags, unreadable or invalid configuration. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "kt",
    version,
    about = "Knowledge tracing for objective and subjective items"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaArg {
    Assist09,
    Scored,
}

impl From<SchemaArg> for Schema {
    fn from(s: SchemaArg) -> Self {
        match s {
            SchemaArg::Assist09 => Schema::Assist09,
            SchemaArg::Scored => Schema::Scored,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Objective,
    Subjective,
}

#[derive(Subcommand)]
enum Command {
    /// Clean and remap a CSV log into a dataset directory.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        schema: SchemaArg,
        #[arg(long)]
        out_dir: PathBuf,
        /// JSON object mapping raw skill ids to full marks.
        #[arg(long)]
        max_score_table: Option<PathBuf>,
    },
    /// Write a synthetic CSV log from the two-state mastery simulator.
    Synth {
        /// JSON simulator settings; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model as described by a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the test split of a dataset directory.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print a comparison table of final test metrics.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn usage(e: impl fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Preprocess {
            input,
            schema,
            out_dir,
            max_score_table,
        } => {
            let report =
                pipeline::preprocess(&input, schema.into(), &out_dir, max_score_table.as_deref())?;
            info!(
                "kept {} of {} rows ({} missing skill, {} duplicate)",
                report.records, report.raw_rows, report.removed.nan, report.removed.dup
            );
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Synth {
            config,
            seed,
            task,
            out,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
                    serde_json::from_str::<SynthConfig>(&text)
                        .map_err(|e| usage(format!("{}: {e}", path.display())))?
                }
                None => SynthConfig::default(),
            };
            if let Some(t) = task {
                cfg.task = match t {
                    TaskArg::Objective => Task::Objective,
                    TaskArg::Subjective => Task::Subjective,
                };
            }
            let data = synth::generate(&cfg, seed)?;
            let mut w = BufWriter::new(File::create(&out)?);
            synth::write_csv(&data, &cfg, &mut w)?;
            w.flush()?;
            info!(
                "wrote {} interactions to {}",
                data.records.len(),
                out.display()
            );
        }
        Command::Train { config } => {
            let cfg = RunConfigFile::load(&config)?;
            let data_dir = cfg.data_dir();
            if let Some(ing) = &cfg.ingest {
                pipeline::preprocess(
                    &ing.input,
                    ing.schema,
                    &data_dir,
                    ing.max_score_table.as_deref(),
                )?;
            }
            let dataset = Dataset::load(&data_dir)?;
            let out = pipeline::run_training(&dataset, &cfg.train, &cfg.out_dir)?;
            for r in &out.reports {
                info!(
                    "epoch {} {}: loss {:.4} rmse {:.4} mae {:.4} acc {:.4}{}",
                    r.epoch,
                    r.split,
                    r.loss,
                    r.rmse,
                    r.mae,
                    r.acc,
                    r.auc.map(|a| format!(" auc {a:.4}")).unwrap_or_default()
                );
            }
            info!("metrics: {}", out.metrics_path.display());
            info!("checkpoint: {}", out.checkpoint_path.display());
        }
        Command::Evaluate { checkpoint, data } => {
            let report = pipeline::evaluate_checkpoint(&checkpoint, &data)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Report { metrics } => {
            let mut all = Vec::new();
            for path in &metrics {
                all.extend(pipeline::read_metrics(path)?);
            }
            print!("{}", pipeline::render_table(&all));
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<KtError>() {
        Some(KtError::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KT_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
