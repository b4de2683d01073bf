//! The `dtst` command line.
//!
//! ```text
//! dtst <train|eval|ablate|gradcheck> --config <path> [--seed N] [--out DIR]
//! ```
//!
//! Exit status is 0 on success, 1 for usage errors and 2 when a command
//! fails, in which case a JSON error record is written to stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::backbone::checkpoint;
use crate::config::{load_config, ExperimentConfig};
use crate::data::generate_split;
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::experiment::{
    ablation_to_csv, compare, embed_samples, embeddings_from_text, embeddings_to_text, evaluate, gradcheck,
    gradcheck_to_csv, init_model, run_ablation, to_jsonl, train_model,
};
use crate::records::export_samples;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUN: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.jsonl";
pub const COMPARE_REPORT_FILE: &str = "compare_report.jsonl";
pub const COMPARISON_FILE: &str = "comparison.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const TRAIN_DATA_FILE: &str = "train_data.txt";
pub const TEST_DATA_FILE: &str = "test_data.txt";

#[derive(Debug, Parser)]
#[command(name = "dtst", version, about = "Token-selective view-decoupled transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the generated split; writes the checkpoint and training log.
    Train(Common),
    /// Score a checkpoint (or stored embeddings) under every view protocol.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the checkpoint in the output directory.
        #[arg(long, conflicts_with = "embeddings")]
        checkpoint: Option<PathBuf>,
        /// A second checkpoint to score and subtract.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Evaluate stored embedding records instead of a checkpoint.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Train and score every selector configuration of the ablation grid.
    Ablate(Common),
    /// Finite-difference check of every parameter group.
    Gradcheck(Common),
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
}

fn prepare(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    cfg.write_echo(&cfg.output_dir)?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn run_train(cfg: &ExperimentConfig) -> Result<()> {
    let split = generate_split(&cfg.data)?;
    let dir = &cfg.output_dir;
    if cfg.export_data {
        write(dir, TRAIN_DATA_FILE, export_samples(&split.train))?;
        write(dir, TEST_DATA_FILE, export_samples(&split.test))?;
    }
    let (model, log) = train_model(cfg.model_config(), &split.train, cfg)?;
    checkpoint::save(&model, &dir.join(CHECKPOINT_FILE))?;
    write(dir, TRAIN_LOG_FILE, log.to_csv())
}

fn run_eval(cfg: &ExperimentConfig, checkpoint_path: Option<&Path>, other: Option<&Path>, embeddings: Option<&Path>) -> Result<()> {
    let dir = &cfg.output_dir;
    let protocols = Protocol::ALL_PROTOCOLS;
    let items = match embeddings {
        Some(path) => embeddings_from_text(&std::fs::read_to_string(path)?)?,
        None => {
            let split = generate_split(&cfg.data)?;
            let path = checkpoint_path.map_or_else(|| dir.join(CHECKPOINT_FILE), Path::to_path_buf);
            let model = checkpoint::load(&path)?;
            let items = embed_samples(&model, &split.test)?;
            write(dir, EMBEDDINGS_FILE, embeddings_to_text(&items))?;
            items
        }
    };
    let reports = evaluate(&items, &protocols)?;
    write(dir, REPORT_FILE, to_jsonl(&reports)?)?;
    if let Some(other) = other {
        let split = generate_split(&cfg.data)?;
        let model = checkpoint::load(other)?;
        let theirs = evaluate(&embed_samples(&model, &split.test)?, &protocols)?;
        write(dir, COMPARE_REPORT_FILE, to_jsonl(&theirs)?)?;
        write(dir, COMPARISON_FILE, to_jsonl(&compare(&reports, &theirs)?)?)?;
    }
    Ok(())
}

fn run_ablate(cfg: &ExperimentConfig) -> Result<()> {
    let split = generate_split(&cfg.data)?;
    let rows = run_ablation(cfg, &split.train, &split.test)?;
    write(&cfg.output_dir, ABLATION_FILE, ablation_to_csv(&rows))
}

/// Returns whether every group passed.
fn run_gradcheck(cfg: &ExperimentConfig) -> Result<bool> {
    let split = generate_split(&cfg.data)?;
    let model = init_model(cfg.model_config(), cfg.seed)?;
    let rows = gradcheck(&model, &split.train, &cfg.loss, cfg.seed)?;
    write(&cfg.output_dir, GRADCHECK_FILE, gradcheck_to_csv(&rows))?;
    Ok(rows.iter().all(|r| r.passed))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(c) => run_train(&prepare(&c)?),
        Command::Eval {
            common,
            checkpoint,
            compare,
            embeddings,
        } => run_eval(&prepare(&common)?, checkpoint.as_deref(), compare.as_deref(), embeddings.as_deref()),
        Command::Ablate(c) => run_ablate(&prepare(&c)?),
        Command::Gradcheck(c) => {
            if run_gradcheck(&prepare(&c)?)? {
                Ok(())
            } else {
                Err(Error::Numeric(format!(
                    "gradient check failed for at least one group, see {GRADCHECK_FILE}"
                )))
            }
        }
    }
}

/// Runs the command line `args` (program name first) and returns the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let record = ErrorRecord {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&record).unwrap_or_else(|_| e.to_string()));
            EXIT_RUN
        }
    }
}
