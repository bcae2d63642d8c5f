//! Subcommand implementations over the core library.
//!
//! Run artifacts are plain files inside the run directory:
//!
//! - `pred_<system>.tsv`   one `id<TAB>letter` row per item (empty = abstain)
//! - `pred_ensemble.tsv`   majority-vote answers for the committee
//! - `pred_gen.tsv`        one `id<TAB>answer` row per generation item
//! - `ensemble.jsonl`      per-item vote outcome records
//! - `trace.jsonl`         per-prediction audit records
//! - `errors.tsv`          rejected rows and per-item pipeline failures
//! - `run_meta.json`       the configuration the run used (timestamp-free)
//!
//! All artifact contents are deterministic for a fixed cache, so replay
//! runs are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use medqa_core::backend::Mode;
use medqa_core::dataset::{
    escape_field, load_gen, load_mcq, unescape_field, RowError, GEN_HEADER, MCQ_HEADER,
};
use medqa_core::ensemble::{majority_vote, VoteOutcome, VoteInput};
use medqa_core::eval::{
    ablate, accuracy, score_generation, write_report, ChoicePredictions, ChrF, EvalError,
    EvalReport, ExactMatch, GoldChoices, SystemPredictions,
};
use medqa_core::pipelines::{
    run_batch, run_gen_batch, GenPrediction, PipelineContext, SystemId, SystemPrediction,
};
use medqa_core::prompting::TemplateSet;
use medqa_core::textnorm::CanonicalChoice;

use crate::config::{require_file, CliError, RunConfig};

/// What a run command produced; `item_errors > 0` maps to exit code 1.
#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub predictions: usize,
    pub item_errors: usize,
    pub warnings: Vec<String>,
}

fn io_ctx<T, E: std::error::Error + Send + Sync + 'static>(
    result: Result<T, E>,
    what: &str,
    path: &Path,
) -> Result<T, CliError> {
    result
        .with_context(|| format!("{what} {}", path.display()))
        .map_err(CliError::Other)
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    mode: &'a str,
    model_id: &'a str,
    params: medqa_core::backend::DecodingParams,
    parallelism: usize,
    systems: Vec<&'a str>,
    data_path: String,
    dataset_checksum: &'a str,
    blank_marker: Option<&'a str>,
}

#[derive(Serialize, Deserialize)]
struct EnsembleRecord {
    item_id: String,
    outcome: Option<VoteOutcome>,
}

fn write_errors_file(
    dir: &Path,
    rejects: &[RowError],
    errors: &[medqa_core::pipelines::ItemError],
) -> Result<(), CliError> {
    let mut text = String::new();
    for reject in rejects {
        let _ = writeln!(
            text,
            "line:{}\t-\tload\t{}",
            reject.line,
            escape_field(&reject.reason)
        );
    }
    for error in errors {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}",
            error.item_id,
            error.system.map_or("-", SystemId::as_str),
            error.stage,
            escape_field(&error.message)
        );
    }
    let path = dir.join("errors.tsv");
    io_ctx(std::fs::write(&path, text), "writing", &path)
}

fn choice_cell(choice: Option<CanonicalChoice>) -> &'static str {
    choice.map_or("", CanonicalChoice::surface)
}

/// Run the selected MCQ systems over a dataset and write all artifacts.
pub fn cmd_run_mcq(config: &RunConfig, data: &Path) -> Result<RunSummary, CliError> {
    config.validate()?;
    require_file(data, "dataset")?;
    let load = load_mcq(data).map_err(|e| CliError::config(e.to_string()))?;
    let (completer, mut warnings) = config.build_completer()?;
    let run_dir = config.prepare_run_dir()?;

    let ctx = PipelineContext::new(
        TemplateSet::builtin(),
        &completer,
        &config.model_id,
        config.params,
    );
    let outcome = run_batch(&ctx, &load.items, &config.systems, config.parallelism);

    for system in &config.systems {
        let mut text = String::new();
        for prediction in outcome.predictions.iter().filter(|p| p.system == *system) {
            let _ = writeln!(
                text,
                "{}\t{}",
                prediction.item_id,
                choice_cell(prediction.choice.letter())
            );
        }
        let path = run_dir.join(format!("pred_{}.tsv", system.as_str()));
        io_ctx(std::fs::write(&path, text), "writing", &path)?;
    }

    let has_committee = SystemId::ENSEMBLE
        .iter()
        .all(|s| config.systems.contains(s));
    if has_committee {
        write_ensemble_files(&run_dir, &load.items, &outcome.predictions)?;
    } else {
        warnings.push(
            "ensemble outputs skipped: needs systems rfa, afs and eta".to_string(),
        );
    }

    write_trace(&run_dir, &outcome.predictions, &[])?;
    write_errors_file(&run_dir, &load.rejects, &outcome.errors)?;
    write_meta(
        &run_dir,
        RunMeta {
            command: "run-mcq",
            mode: config.mode.as_str(),
            model_id: &config.model_id,
            params: config.params,
            parallelism: config.parallelism,
            systems: config.systems.iter().map(|s| s.as_str()).collect(),
            data_path: data.display().to_string(),
            dataset_checksum: &load.checksum,
            blank_marker: config.blank_marker.as_deref(),
        },
    )?;

    strict_replay_check(config.mode, &outcome.errors)?;
    Ok(RunSummary {
        run_dir,
        predictions: outcome.predictions.len(),
        item_errors: outcome.errors.len() + load.rejects.len(),
        warnings,
    })
}

fn strict_replay_check(
    mode: Mode,
    errors: &[medqa_core::pipelines::ItemError],
) -> Result<(), CliError> {
    if mode == Mode::ReplayStrict {
        if let Some(miss) = errors
            .iter()
            .find(|e| e.message.contains("replay cache miss"))
        {
            return Err(CliError::config(format!(
                "strict replay aborted: {miss}"
            )));
        }
    }
    Ok(())
}

fn write_ensemble_files(
    run_dir: &Path,
    items: &[medqa_core::dataset::McqItem],
    predictions: &[SystemPrediction],
) -> Result<(), CliError> {
    let vote_of = |id: &str, system: SystemId| -> Option<CanonicalChoice> {
        predictions
            .iter()
            .find(|p| p.item_id == id && p.system == system)
            .and_then(|p| p.choice.letter())
    };
    let mut ids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();

    let mut tsv = String::new();
    let mut jsonl = String::new();
    for id in ids {
        let input = VoteInput::new(
            vote_of(id, SystemId::Rfa),
            vote_of(id, SystemId::Afs),
            vote_of(id, SystemId::Eta),
        );
        let outcome = majority_vote(&input).ok();
        let _ = writeln!(
            tsv,
            "{id}\t{}",
            choice_cell(outcome.as_ref().map(|o| o.winner))
        );
        let record = EnsembleRecord {
            item_id: id.to_string(),
            outcome,
        };
        let _ = writeln!(jsonl, "{}", serde_json::to_string(&record).unwrap());
    }
    let tsv_path = run_dir.join("pred_ensemble.tsv");
    io_ctx(std::fs::write(&tsv_path, tsv), "writing", &tsv_path)?;
    let jsonl_path = run_dir.join("ensemble.jsonl");
    io_ctx(std::fs::write(&jsonl_path, jsonl), "writing", &jsonl_path)
}

fn write_trace(
    run_dir: &Path,
    mcq: &[SystemPrediction],
    gen: &[GenPrediction],
) -> Result<(), CliError> {
    let mut text = String::new();
    for prediction in mcq {
        let _ = writeln!(text, "{}", serde_json::to_string(prediction).unwrap());
    }
    for prediction in gen {
        let _ = writeln!(text, "{}", serde_json::to_string(prediction).unwrap());
    }
    let path = run_dir.join("trace.jsonl");
    io_ctx(std::fs::write(&path, text), "writing", &path)
}

fn write_meta(run_dir: &Path, meta: RunMeta<'_>) -> Result<(), CliError> {
    let path = run_dir.join("run_meta.json");
    let json = serde_json::to_string_pretty(&meta).unwrap() + "\n";
    io_ctx(std::fs::write(&path, json), "writing", &path)
}

/// Run the unified generation pipeline over a dataset.
pub fn cmd_run_gen(config: &RunConfig, data: &Path) -> Result<RunSummary, CliError> {
    config.validate()?;
    require_file(data, "dataset")?;
    let load = load_gen(data, config.blank_marker.as_deref())
        .map_err(|e| CliError::config(e.to_string()))?;
    let (completer, warnings) = config.build_completer()?;
    let run_dir = config.prepare_run_dir()?;

    let ctx = PipelineContext::new(
        TemplateSet::builtin(),
        &completer,
        &config.model_id,
        config.params,
    );
    let outcome = run_gen_batch(&ctx, &load.items, config.parallelism);

    let mut text = String::new();
    for prediction in &outcome.predictions {
        let _ = writeln!(
            text,
            "{}\t{}",
            prediction.item_id,
            escape_field(prediction.answer.as_str())
        );
    }
    let path = run_dir.join("pred_gen.tsv");
    io_ctx(std::fs::write(&path, text), "writing", &path)?;

    write_trace(&run_dir, &[], &outcome.predictions)?;
    write_errors_file(&run_dir, &load.rejects, &outcome.errors)?;
    write_meta(
        &run_dir,
        RunMeta {
            command: "run-gen",
            mode: config.mode.as_str(),
            model_id: &config.model_id,
            params: config.params,
            parallelism: config.parallelism,
            systems: Vec::new(),
            data_path: data.display().to_string(),
            dataset_checksum: &load.checksum,
            blank_marker: config.blank_marker.as_deref(),
        },
    )?;

    strict_replay_check(config.mode, &outcome.errors)?;
    Ok(RunSummary {
        run_dir,
        predictions: outcome.predictions.len(),
        item_errors: outcome.errors.len() + load.rejects.len(),
        warnings,
    })
}

fn read_choice_predictions(path: &Path) -> Result<ChoicePredictions, CliError> {
    let text = io_ctx(std::fs::read_to_string(path), "reading", path)?;
    let mut preds = ChoicePredictions::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, cell) = line.split_once('\t').ok_or_else(|| {
            CliError::config(format!("{}: line {} is not id<TAB>answer", path.display(), i + 1))
        })?;
        let choice = if cell.is_empty() {
            None
        } else {
            Some(CanonicalChoice::from_surface(cell).ok_or_else(|| {
                CliError::config(format!(
                    "{}: line {} has non-canonical answer {cell:?}",
                    path.display(),
                    i + 1
                ))
            })?)
        };
        preds.insert(id.to_string(), choice);
    }
    Ok(preds)
}

fn sniff_gold_kind(path: &Path) -> Result<&'static str, CliError> {
    let text = io_ctx(std::fs::read_to_string(path), "reading", path)?;
    match text.lines().next().map(|l| l.trim_end_matches('\r')) {
        Some(header) if header == MCQ_HEADER => Ok("mcq"),
        Some(header) if header == GEN_HEADER => Ok("gen"),
        _ => Err(CliError::config(format!(
            "{}: unrecognized gold file header",
            path.display()
        ))),
    }
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::MissingGold(_) | EvalError::MissingSystem(_) => CliError::config(e.to_string()),
        other => CliError::Other(other.into()),
    }
}

fn mcq_gold(path: &Path) -> Result<GoldChoices, CliError> {
    let load = load_mcq(path).map_err(|e| CliError::config(e.to_string()))?;
    Ok(load
        .items
        .iter()
        .filter_map(|item| item.gold.map(|g| (item.id.clone(), g)))
        .collect())
}

/// Score a run directory against a gold dataset file; writes `report.txt`
/// and `report.json` into the run directory and returns the report.
pub fn cmd_eval(run_dir: &Path, gold_path: &Path) -> Result<EvalReport, CliError> {
    require_file(gold_path, "gold file")?;
    if !run_dir.is_dir() {
        return Err(CliError::config(format!(
            "run dir {} does not exist",
            run_dir.display()
        )));
    }
    let report = match sniff_gold_kind(gold_path)? {
        "mcq" => {
            let gold = mcq_gold(gold_path)?;
            let mut by_system = SystemPredictions::new();
            for system in SystemId::ALL {
                let path = run_dir.join(format!("pred_{}.tsv", system.as_str()));
                if path.exists() {
                    by_system.insert(system, read_choice_predictions(&path)?);
                }
            }
            if by_system.is_empty() {
                return Err(CliError::config(format!(
                    "{}: no prediction files found",
                    run_dir.display()
                )));
            }
            let trio = SystemId::ENSEMBLE
                .iter()
                .all(|s| by_system.contains_key(s));
            let mut report = if trio {
                ablate(&by_system, &gold).map_err(eval_error)?
            } else {
                let mut report = EvalReport::empty();
                report.n_items = by_system.values().map(|p| p.len()).max().unwrap_or(0);
                for (system, preds) in &by_system {
                    report
                        .per_system_accuracy
                        .insert(*system, accuracy(preds, &gold).map_err(eval_error)?);
                }
                report
            };
            // AZS is outside the committee but still scored when present
            if let Some(azs) = by_system.get(&SystemId::Azs) {
                if trio {
                    report
                        .per_system_accuracy
                        .insert(SystemId::Azs, accuracy(azs, &gold).map_err(eval_error)?);
                }
            }
            let ensemble_file = run_dir.join("pred_ensemble.tsv");
            if ensemble_file.exists() && report.ensemble_accuracy.is_none() {
                let preds = read_choice_predictions(&ensemble_file)?;
                report.ensemble_accuracy = Some(accuracy(&preds, &gold).map_err(eval_error)?);
            }
            report
        }
        _ => {
            let load =
                load_gen(gold_path, None).map_err(|e| CliError::config(e.to_string()))?;
            let gold: BTreeMap<String, String> = load
                .items
                .iter()
                .filter_map(|item| item.gold.clone().map(|g| (item.id.clone(), g)))
                .collect();
            let path = run_dir.join("pred_gen.tsv");
            require_file(&path, "prediction file")?;
            let text = io_ctx(std::fs::read_to_string(&path), "reading", &path)?;
            let mut preds = BTreeMap::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let (id, cell) = line.split_once('\t').ok_or_else(|| {
                    CliError::config(format!("{}: malformed prediction row", path.display()))
                })?;
                preds.insert(id.to_string(), unescape_field(cell));
            }
            let mut report = EvalReport::empty();
            report.n_items = preds.len();
            report.gen_metrics =
                score_generation(&[&ExactMatch, &ChrF], &preds, &gold).map_err(eval_error)?;
            report
        }
    };
    write_report(&report, run_dir, "report").map_err(eval_error)?;
    Ok(report)
}

/// Leave-one-out ablation over a run directory holding all three committee
/// systems; writes `ablation.txt` and `ablation.json`.
pub fn cmd_ablate(run_dir: &Path, gold_path: &Path) -> Result<EvalReport, CliError> {
    require_file(gold_path, "gold file")?;
    if sniff_gold_kind(gold_path)? != "mcq" {
        return Err(CliError::config("ablation needs an MCQ gold file"));
    }
    let gold = mcq_gold(gold_path)?;
    let mut by_system = SystemPredictions::new();
    for system in SystemId::ENSEMBLE {
        let path = run_dir.join(format!("pred_{}.tsv", system.as_str()));
        require_file(&path, "prediction file")?;
        by_system.insert(system, read_choice_predictions(&path)?);
    }
    let report = ablate(&by_system, &gold).map_err(eval_error)?;
    write_report(&report, run_dir, "ablation").map_err(eval_error)?;
    Ok(report)
}

/// Cache statistics: entry count, distinct models, file size.
pub fn cmd_cache_stats(cache_path: &Path) -> Result<String, CliError> {
    use medqa_core::backend::{CacheEntry, ReplayCache};
    let (_, report) =
        ReplayCache::open(cache_path).map_err(|e| CliError::config(e.to_string()))?;
    let mut models = std::collections::BTreeSet::new();
    if cache_path.exists() {
        let text = io_ctx(std::fs::read_to_string(cache_path), "reading", cache_path)?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Ok(entry) = serde_json::from_str::<CacheEntry>(line) {
                models.insert(entry.model_id);
            }
        }
    }
    let size = std::fs::metadata(cache_path).map(|m| m.len()).unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "cache:    {}", cache_path.display());
    let _ = writeln!(out, "entries:  {}", report.entries);
    let _ = writeln!(out, "models:   {}", models.len());
    let _ = writeln!(out, "bytes:    {size}");
    if report.truncated > 0 {
        let _ = writeln!(out, "dropped:  {} corrupt trailing record(s)", report.truncated);
    }
    Ok(out)
}

/// Re-hash every cache record; returns Ok(true) when the log is clean.
pub fn cmd_cache_verify(cache_path: &Path) -> Result<(String, bool), CliError> {
    use medqa_core::backend::ReplayCache;
    let (cache, report) =
        ReplayCache::open(cache_path).map_err(|e| CliError::config(e.to_string()))?;
    let (total, bad) = cache.verify().map_err(|e| CliError::config(e.to_string()))?;
    let mut out = String::new();
    let _ = writeln!(out, "records:      {total}");
    let _ = writeln!(out, "inconsistent: {bad}");
    if report.truncated > 0 {
        let _ = writeln!(out, "dropped:      {} corrupt trailing record(s)", report.truncated);
    }
    Ok((out, bad == 0))
}
