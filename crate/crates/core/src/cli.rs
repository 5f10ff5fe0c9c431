//! `abr` command line.
//!
//! Exit codes: 0 on success, 1 for configuration or usage errors, 2 when a
//! run aborts (divergence) or its output cannot be written.
//!
//! Relative output paths are resolved against `ABR_OUTPUT_DIR` when that
//! variable is set.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::harness::{
    compare_policies, Cell, Comparison, ExperimentConfig, LogFormat, PolicyRow, Prepared,
    RunSummary,
};

pub const OUTPUT_DIR_ENV: &str = "ABR_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "abr",
    version,
    about = "Adaptive re-initialization of test-time adapting models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the source model for one seed and save its weights as JSON.
    Pretrain(CommonArgs),
    /// Run one policy on one seed and write the per-step CSV log.
    Run(CommonArgs),
    /// Compare all configured policies across seeds.
    Compare(CommonArgs),
    /// Run one policy on one seed and write the per-step JSON-lines log.
    Export(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; overrides the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Policy name (run/export: which policy; compare: only this policy).
    #[arg(long)]
    policy: Option<String>,
    /// Suppress the summary table.
    #[arg(long)]
    quiet: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

fn config_err(e: Error) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_err(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn main_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message());
            f.code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::Pretrain(a) => pretrain(&a, out),
        Command::Run(a) => run(&a, out, LogFormat::Csv),
        Command::Export(a) => run(&a, out, LogFormat::JsonLines),
        Command::Compare(a) => compare(&a, out),
    }
}

fn load_config(args: &CommonArgs, required: bool) -> Result<ExperimentConfig, Failure> {
    match &args.config {
        Some(path) => {
            if !path.exists() {
                return Err(Failure::Config(format!(
                    "config file {} does not exist",
                    path.display()
                )));
            }
            ExperimentConfig::load(path).map_err(config_err)
        }
        None if required => Err(Failure::Config("--config is required".into())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn resolve_output(args: &CommonArgs, config: &ExperimentConfig, default: &str) -> PathBuf {
    let path = args
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from(default));
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path,
    }
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| {
            runtime_err(Error::Io {
                path: parent.to_path_buf(),
                source: e,
            })
        })?;
    }
    Ok(())
}

fn first_seed(args: &CommonArgs, config: &ExperimentConfig) -> u64 {
    args.seed.unwrap_or(config.seeds[0])
}

fn pretrain(args: &CommonArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let config = load_config(args, false)?;
    let seed = first_seed(args, &config);
    let prepared = Prepared::new(&config, seed).map_err(runtime_err)?;
    let path = resolve_output(args, &config, "source_model.json");
    ensure_parent(&path)?;
    let json = serde_json::to_string_pretty(&prepared.source).expect("model serializes");
    std::fs::write(&path, json).map_err(|e| {
        runtime_err(Error::Io {
            path: path.clone(),
            source: e,
        })
    })?;
    if !args.quiet {
        let _ = writeln!(
            out,
            "seed {seed}: source holdout accuracy {:.2}% -> {}",
            100.0 * prepared.source.holdout_accuracy,
            path.display()
        );
    }
    Ok(())
}

fn run(args: &CommonArgs, out: &mut dyn Write, format: LogFormat) -> Result<(), Failure> {
    let config = load_config(args, true)?;
    let policy = config
        .policy(args.policy.as_deref())
        .map_err(config_err)?
        .clone();
    let seed = first_seed(args, &config);
    let default_name = match format {
        LogFormat::Csv => "abr_run.csv",
        LogFormat::JsonLines => "abr_run.jsonl",
    };
    let path = resolve_output(args, &config, default_name);

    let prepared = Prepared::new(&config, seed).map_err(runtime_err)?;
    let log = prepared.run(&config, &policy).map_err(runtime_err)?;
    ensure_parent(&path)?;
    log.write(&path, format).map_err(runtime_err)?;

    if let Some(abort) = &log.aborted {
        return Err(Failure::Runtime(format!(
            "run aborted at step {} ({}); {} completed rows written to {}",
            abort.step,
            abort.reason,
            log.rows.len(),
            path.display()
        )));
    }
    if !args.quiet {
        let source_acc = prepared.source_accuracy().map_err(runtime_err)?;
        let table = Comparison {
            seeds: vec![seed],
            source: single_row(
                "source (frozen)",
                seed,
                RunSummary::from_accuracies(&source_acc, 0),
            ),
            policies: vec![single_row(&log.policy, seed, log.summary())],
        };
        let _ = write!(out, "{}", table.render());
        let _ = writeln!(out, "log: {}", path.display());
    }
    Ok(())
}

fn single_row(label: &str, seed: u64, summary: RunSummary) -> PolicyRow {
    PolicyRow {
        label: label.into(),
        cells: vec![Cell {
            seed,
            result: Ok(summary),
        }],
    }
}

fn compare(args: &CommonArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let config = load_config(args, true)?;
    let policies = match &args.policy {
        Some(_) => vec![config
            .policy(args.policy.as_deref())
            .map_err(config_err)?
            .clone()],
        None => config.policies.clone(),
    };
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => config.seeds.clone(),
    };
    let table = compare_policies(&config, &policies, &seeds).map_err(runtime_err)?;
    if let Some(path) = args.out.as_ref().map(|_| resolve_output(args, &config, "")) {
        ensure_parent(&path)?;
        std::fs::write(&path, summary_csv(&table)).map_err(|e| {
            runtime_err(Error::Io {
                path: path.clone(),
                source: e,
            })
        })?;
    }
    if !args.quiet {
        let _ = write!(out, "{}", table.render());
    }
    if table.has_failures() {
        return Err(Failure::Runtime("one or more runs failed".into()));
    }
    Ok(())
}

/// Per-(policy, seed) summary rows.
fn summary_csv(table: &Comparison) -> String {
    use crate::harness::fmt_sig9;
    let mut s = String::from("policy,seed,mean_accuracy,final_window_accuracy,resets,status\n");
    for row in std::iter::once(&table.source).chain(&table.policies) {
        for c in &row.cells {
            match &c.result {
                Ok(r) => s.push_str(&format!(
                    "{},{},{},{},{},ok\n",
                    row.label,
                    c.seed,
                    fmt_sig9(r.mean_accuracy),
                    fmt_sig9(r.final_window_accuracy),
                    r.reset_count
                )),
                Err(_) => s.push_str(&format!("{},{},,,,failed\n", row.label, c.seed)),
            }
        }
    }
    s
}
