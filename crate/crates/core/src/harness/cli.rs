//! Command-line entry point.

use std::io::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::harness::checks::{gradcheck_suite, oracle_suite, CheckResult};
use crate::harness::config::{ExperimentConfig, Mode};
use crate::harness::metrics::MetricsRecord;
use crate::harness::run::run_experiment;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "cktf", version, about = "Contrastive knowledge transfer between CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model with cross-entropy only.
    TrainTeacher(RunArgs),
    /// Distill a frozen teacher into a student on labeled data.
    Distill(RunArgs),
    /// Distill on unlabeled target-domain data (no cross-entropy term).
    TransferDistill(RunArgs),
    /// Retrain only the classifier of a student checkpoint.
    Finetune(RunArgs),
    /// Report the accuracy of a checkpoint.
    Eval(RunArgs),
    /// Finite-difference check of every operation and of the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the contrastive losses with direct summation.
    OracleCheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied after the file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

fn build_config(args: &RunArgs) -> crate::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&args.set)?;
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn run_mode(mode: Mode, args: &RunArgs) -> i32 {
    let cfg = match build_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cktf: {e}");
            return EXIT_CONFIG;
        }
    };
    let quiet = args.quiet;
    let mut progress = |r: &MetricsRecord| {
        if !quiet {
            let acc = r.test_acc.or(r.train_acc).map_or("NA".to_string(), |a| format!("{a:.4}"));
            eprintln!("epoch {:>4}  lr {:<8}  loss {:.5}  acc {acc}  {:.1}s", r.epoch, r.lr, r.loss_total, r.seconds);
        }
    };
    match run_experiment(&cfg, mode, &mut progress) {
        Ok(summary) => {
            match serde_json::to_string_pretty(&summary) {
                Ok(s) => out(&s),
                Err(e) => eprintln!("cktf: {e}"),
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("cktf: {e}");
            exit_code(&e)
        }
    }
}

/// Writes a line to stdout; a closed pipe is not an error worth dying for.
fn out(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn report(results: crate::Result<Vec<CheckResult>>) -> i32 {
    match results {
        Ok(results) => {
            for r in &results {
                out(&r.line());
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            out(&format!("{} checks, {failed} failed", results.len()));
            if failed == 0 { EXIT_OK } else { EXIT_RUNTIME }
        }
        Err(e) => {
            eprintln!("cktf: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Parses `argv` (program name first) and runs the chosen subcommand.
/// Returns the process exit code: 0 on success, 2 for an invalid command
/// line or config, 1 for any other failure.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::TrainTeacher(a) => run_mode(Mode::TrainTeacher, &a),
        Command::Distill(a) => run_mode(Mode::Distill, &a),
        Command::TransferDistill(a) => run_mode(Mode::TransferDistill, &a),
        Command::Finetune(a) => run_mode(Mode::FinetuneLinear, &a),
        Command::Eval(a) => run_mode(Mode::Eval, &a),
        Command::Gradcheck { seed } => report(gradcheck_suite(seed)),
        Command::OracleCheck { instances, seed } => report(oracle_suite(instances, seed)),
    }
}
