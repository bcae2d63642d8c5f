use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use medqa_cli::config::{require_cache_path, resolve_cache_path};
use medqa_cli::{
    cmd_ablate, cmd_cache_stats, cmd_cache_verify, cmd_eval, cmd_run_gen, cmd_run_mcq,
    parse_systems, CliError, RunConfig,
};
use medqa_core::backend::{DecodingParams, Mode, DEFAULT_MODEL};
use medqa_core::eval::render_report_text;

/// Batch Arabic medical QA: prompt pipelines, majority-vote ensemble and
/// offline evaluation over a record/replay cache.
#[derive(Parser)]
#[command(name = "medqa", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run MCQ systems over a tab-delimited question file.
    RunMcq {
        /// MCQ dataset (id, stem, opt_a..opt_e, gold).
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the unified generation pipeline over a free-text file.
    RunGen {
        /// Generation dataset (id, kind, prompt, gold).
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a run directory against a gold dataset file.
    Eval {
        #[arg(long = "run-dir")]
        run_dir: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Leave-one-out ablation over a full committee run.
    Ablate {
        #[arg(long = "run-dir")]
        run_dir: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Inspect or check the completion cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    /// Entry count, distinct models and file size.
    Stats {
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Re-hash every record and report inconsistencies.
    Verify {
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// live | record | replay | replay-strict
    #[arg(long, default_value = "replay")]
    mode: String,
    #[arg(long, default_value = DEFAULT_MODEL)]
    model: String,
    #[arg(long, default_value_t = DecodingParams::default().temperature)]
    temperature: f64,
    #[arg(long = "top-p", default_value_t = DecodingParams::default().top_p)]
    top_p: f64,
    #[arg(long = "top-k", default_value_t = DecodingParams::default().top_k)]
    top_k: u32,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Completion cache path (or env MEDQA_CACHE).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory; a timestamped one is created when omitted.
    #[arg(long = "run-dir")]
    run_dir: Option<PathBuf>,
    /// Comma-separated systems (rfa,afs,eta,azs) or `all`.
    #[arg(long, value_delimiter = ',')]
    systems: Vec<String>,
    /// Token marking a blank in fill-in-the-blank prompts.
    #[arg(long = "blank-marker")]
    blank_marker: Option<String>,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig, CliError> {
        let mode = Mode::parse(&self.mode)
            .ok_or_else(|| CliError::config(format!("unknown mode {:?}", self.mode)))?;
        Ok(RunConfig {
            mode,
            model_id: self.model,
            params: DecodingParams {
                temperature: self.temperature,
                top_p: self.top_p,
                top_k: self.top_k,
            },
            parallelism: self.parallelism,
            cache_path: resolve_cache_path(self.cache),
            run_dir: self.run_dir,
            systems: parse_systems(&self.systems)?,
            blank_marker: self.blank_marker,
        })
    }
}

/// Print to stdout, tolerating a closed pipe (e.g. `medqa eval | head`).
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::RunMcq { data, run } => {
            let config = run.into_config()?;
            let summary = cmd_run_mcq(&config, &data)?;
            print_summary(&summary)
        }
        Command::RunGen { data, run } => {
            let config = run.into_config()?;
            let summary = cmd_run_gen(&config, &data)?;
            print_summary(&summary)
        }
        Command::Eval { run_dir, gold } => {
            let report = cmd_eval(&run_dir, &gold)?;
            emit(&render_report_text(&report));
            emit(&format!(
                "report written to {}\n",
                run_dir.join("report.txt").display()
            ));
            Ok(0)
        }
        Command::Ablate { run_dir, gold } => {
            let report = cmd_ablate(&run_dir, &gold)?;
            emit(&render_report_text(&report));
            emit(&format!(
                "ablation written to {}\n",
                run_dir.join("ablation.txt").display()
            ));
            Ok(0)
        }
        Command::Cache { action } => match action {
            CacheAction::Stats { cache } => {
                let path = require_cache_path(cache)?;
                emit(&cmd_cache_stats(&path)?);
                Ok(0)
            }
            CacheAction::Verify { cache } => {
                let path = require_cache_path(cache)?;
                let (text, clean) = cmd_cache_verify(&path)?;
                emit(&text);
                Ok(if clean { 0 } else { 1 })
            }
        },
    }
}

fn print_summary(summary: &medqa_cli::RunSummary) -> Result<u8, CliError> {
    for warning in &summary.warnings {
        eprintln!("warning: {warning}");
    }
    emit(&format!(
        "{} predictions written to {}\n",
        summary.predictions,
        summary.run_dir.display()
    ));
    if summary.item_errors > 0 {
        eprintln!(
            "{} item error(s); see {}",
            summary.item_errors,
            summary.run_dir.join("errors.tsv").display()
        );
        return Ok(1);
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
