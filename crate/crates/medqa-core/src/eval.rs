//! Accuracy, ablation accounting and surrogate text metrics.
//!
//! MCQ scoring is exact-match accuracy with abstentions counted incorrect.
//! Generation scoring goes through the [`Metric`] trait: built-ins are
//! normalized exact match and a character n-gram F-score (n = 1..6,
//! β = 2); heavier metrics plug in as external processes.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{majority_vote, subensemble_vote, VoteInput};
use crate::pipelines::SystemId;
use crate::textnorm::{clean, CanonicalChoice};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no gold answer for item {0:?}")]
    MissingGold(String),
    #[error("predictions missing for system {0}")]
    MissingSystem(SystemId),
    #[error("metric {name:?} failed: {reason}")]
    Plugin { name: String, reason: String },
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Per-item predictions: `None` is an abstention.
pub type ChoicePredictions = BTreeMap<String, Option<CanonicalChoice>>;
pub type GoldChoices = BTreeMap<String, CanonicalChoice>;

/// Fraction of items whose prediction exists, is not an abstention, and
/// equals gold. Every scored item must have a gold answer.
pub fn accuracy(preds: &ChoicePredictions, gold: &GoldChoices) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (id, prediction) in preds {
        let expected = gold
            .get(id)
            .ok_or_else(|| EvalError::MissingGold(id.clone()))?;
        if *prediction == Some(*expected) {
            correct += 1;
        }
    }
    Ok(correct as f64 / preds.len() as f64)
}

/// Full evaluation accounting for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_items: usize,
    pub per_system_accuracy: BTreeMap<SystemId, f64>,
    pub ensemble_accuracy: Option<f64>,
    /// Accuracy of the ensemble with one system removed.
    pub leave_one_out_accuracy: BTreeMap<SystemId, f64>,
    /// Accuracy change caused by removing the system (leave-one-out minus
    /// full ensemble), as a fraction: a costly removal is negative.
    pub ablation_deltas: BTreeMap<SystemId, f64>,
    pub gen_metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn empty() -> Self {
        EvalReport {
            n_items: 0,
            per_system_accuracy: BTreeMap::new(),
            ensemble_accuracy: None,
            leave_one_out_accuracy: BTreeMap::new(),
            ablation_deltas: BTreeMap::new(),
            gen_metrics: BTreeMap::new(),
        }
    }
}

/// Committee predictions keyed by system.
pub type SystemPredictions = BTreeMap<SystemId, ChoicePredictions>;

/// Ensemble accuracy plus leave-one-out accuracies and deltas for the
/// three committee systems. The scored item set is the union of all
/// systems' item ids; a system missing an item abstains on it.
pub fn ablate(preds_by_system: &SystemPredictions, gold: &GoldChoices) -> Result<EvalReport, EvalError> {
    for system in SystemId::ENSEMBLE {
        if !preds_by_system.contains_key(&system) {
            return Err(EvalError::MissingSystem(system));
        }
    }
    let mut item_ids: Vec<&String> = preds_by_system
        .values()
        .flat_map(|preds| preds.keys())
        .collect();
    item_ids.sort();
    item_ids.dedup();

    let mut report = EvalReport::empty();
    report.n_items = item_ids.len();
    for (system, preds) in preds_by_system {
        report
            .per_system_accuracy
            .insert(*system, accuracy(preds, gold)?);
    }

    let vote_of = |system: SystemId, id: &String| -> Option<CanonicalChoice> {
        preds_by_system[&system].get(id).copied().flatten()
    };
    let mut ensemble_correct = 0usize;
    let mut loo_correct: BTreeMap<SystemId, usize> =
        SystemId::ENSEMBLE.iter().map(|s| (*s, 0)).collect();
    for id in &item_ids {
        let expected = gold
            .get(*id)
            .ok_or_else(|| EvalError::MissingGold((*id).clone()))?;
        let input = VoteInput::new(
            vote_of(SystemId::Rfa, id),
            vote_of(SystemId::Afs, id),
            vote_of(SystemId::Eta, id),
        );
        if majority_vote(&input).is_ok_and(|o| o.winner == *expected) {
            ensemble_correct += 1;
        }
        for excluded in SystemId::ENSEMBLE {
            if subensemble_vote(&input, excluded).is_ok_and(|o| o.winner == *expected) {
                *loo_correct.get_mut(&excluded).unwrap() += 1;
            }
        }
    }

    let n = report.n_items.max(1) as f64;
    let ensemble_accuracy = ensemble_correct as f64 / n;
    report.ensemble_accuracy = Some(ensemble_accuracy);
    for (system, correct) in loo_correct {
        let reduced = correct as f64 / n;
        report.leave_one_out_accuracy.insert(system, reduced);
        report
            .ablation_deltas
            .insert(system, reduced - ensemble_accuracy);
    }
    Ok(report)
}

const CHRF_MAX_ORDER: usize = 6;
const CHRF_BETA: f64 = 2.0;

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], u32> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for window in chars.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Macro-averaged n-gram precision and recall over orders where both texts
/// have at least one n-gram. `None` when no order qualifies (both texts
/// effectively empty at order 1).
pub fn chrf_components(candidate: &str, reference: &str) -> Option<(f64, f64)> {
    let cand: Vec<char> = clean(candidate)
        .as_str()
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect();
    let reff: Vec<char> = clean(reference)
        .as_str()
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect();

    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=CHRF_MAX_ORDER {
        let cand_grams = char_ngrams(&cand, n);
        let ref_grams = char_ngrams(&reff, n);
        let total_cand: u32 = cand_grams.values().sum();
        let total_ref: u32 = ref_grams.values().sum();
        if total_cand == 0 || total_ref == 0 {
            continue;
        }
        let matching: u32 = ref_grams
            .iter()
            .map(|(gram, ref_count)| cand_grams.get(gram).copied().unwrap_or(0).min(*ref_count))
            .sum();
        precision_sum += matching as f64 / total_cand as f64;
        recall_sum += matching as f64 / total_ref as f64;
        orders += 1;
    }
    (orders > 0).then(|| (precision_sum / orders as f64, recall_sum / orders as f64))
}

/// Character n-gram F-score in [0, 1] with n = 1..6 and β = 2, computed on
/// cleaned texts with whitespace removed. Two empty texts score 1; an
/// empty text against a non-empty one scores 0.
pub fn chrf_score(candidate: &str, reference: &str) -> f64 {
    let Some((precision, recall)) = chrf_components(candidate, reference) else {
        let cand_empty = clean(candidate).as_str().trim().is_empty();
        let ref_empty = clean(reference).as_str().trim().is_empty();
        return if cand_empty && ref_empty { 1.0 } else { 0.0 };
    };
    let beta2 = CHRF_BETA * CHRF_BETA;
    let denominator = beta2 * precision + recall;
    if denominator == 0.0 {
        return 0.0;
    }
    (1.0 + beta2) * precision * recall / denominator
}

/// A candidate/reference scorer in [0, 1].
pub trait Metric: Send + Sync {
    fn name(&self) -> &str;
    fn score_batch(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, EvalError>;

    fn score(&self, candidate: &str, reference: &str) -> Result<f64, EvalError> {
        Ok(self
            .score_batch(&[(candidate.to_string(), reference.to_string())])?
            .remove(0))
    }
}

/// Normalized exact match: 1 when cleaned texts are equal.
pub struct ExactMatch;

impl Metric for ExactMatch {
    fn name(&self) -> &str {
        "exact_match"
    }

    fn score_batch(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, EvalError> {
        Ok(pairs
            .iter()
            .map(|(c, r)| f64::from(clean(c) == clean(r)))
            .collect())
    }
}

/// The built-in chrF surrogate metric.
pub struct ChrF;

impl Metric for ChrF {
    fn name(&self) -> &str {
        "chrf"
    }

    fn score_batch(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, EvalError> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            Ok(pairs.par_iter().map(|(c, r)| chrf_score(c, r)).collect())
        }
        #[cfg(not(feature = "parallel"))]
        {
            Ok(pairs.iter().map(|(c, r)| chrf_score(c, r)).collect())
        }
    }
}

/// External metric plugin: pairs are written to a temp file as
/// `candidate<TAB>reference` lines (backslash-escaped), the command is run
/// with the file path as its argument, and it must print one score per
/// line on stdout.
pub struct ExternalMetric {
    name: String,
    command: PathBuf,
}

impl ExternalMetric {
    pub fn new(name: impl Into<String>, command: impl Into<PathBuf>) -> Self {
        ExternalMetric {
            name: name.into(),
            command: command.into(),
        }
    }
}

impl Metric for ExternalMetric {
    fn name(&self) -> &str {
        &self.name
    }

    fn score_batch(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, EvalError> {
        use crate::dataset::escape_field;
        let plugin_err = |reason: String| EvalError::Plugin {
            name: self.name.clone(),
            reason,
        };
        let mut payload = String::new();
        for (candidate, reference) in pairs {
            payload.push_str(&escape_field(candidate));
            payload.push('\t');
            payload.push_str(&escape_field(reference));
            payload.push('\n');
        }
        let dir = std::env::temp_dir();
        let file = dir.join(format!(
            "medqa-metric-{}-{}.tsv",
            std::process::id(),
            self.name
        ));
        std::fs::write(&file, payload).map_err(|source| EvalError::Io {
            path: file.clone(),
            source,
        })?;
        let output = std::process::Command::new(&self.command)
            .arg(&file)
            .output()
            .map_err(|e| plugin_err(format!("failed to spawn {:?}: {e}", self.command)))?;
        let _ = std::fs::remove_file(&file);
        if !output.status.success() {
            return Err(plugin_err(format!(
                "exit status {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr)
            )));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let scores: Vec<f64> = stdout
            .lines()
            .map(|line| line.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| plugin_err(format!("non-numeric score line: {e}")))?;
        if scores.len() != pairs.len() {
            return Err(plugin_err(format!(
                "expected {} scores, got {}",
                pairs.len(),
                scores.len()
            )));
        }
        Ok(scores)
    }
}

/// Average each metric over (prediction, gold) pairs. Every scored item
/// must have a gold reference.
pub fn score_generation(
    metrics: &[&dyn Metric],
    preds: &BTreeMap<String, String>,
    gold: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut pairs = Vec::with_capacity(preds.len());
    for (id, candidate) in preds {
        let reference = gold
            .get(id)
            .ok_or_else(|| EvalError::MissingGold(id.clone()))?;
        pairs.push((candidate.clone(), reference.clone()));
    }
    let mut out = BTreeMap::new();
    for metric in metrics {
        let scores = metric.score_batch(&pairs)?;
        let mean = if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        out.insert(metric.name().to_string(), mean);
    }
    Ok(out)
}

/// `0.76` → `"76.000%"`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.3}%", fraction * 100.0)
}

/// Signed accuracy points with 3 decimals: `-0.03` → `"-3.000"`.
pub fn format_points(delta: f64) -> String {
    format!("{:+.3}", delta * 100.0)
}

/// Human-readable report table. Sections without data are omitted.
pub fn render_report_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("Items scored: {}\n", report.n_items));
    if !report.per_system_accuracy.is_empty() || report.ensemble_accuracy.is_some() {
        out.push_str("\nSystem accuracy\n");
        for (system, acc) in &report.per_system_accuracy {
            out.push_str(&format!("  {:<9} {:>10}\n", system.to_string(), format_percent(*acc)));
        }
        if let Some(acc) = report.ensemble_accuracy {
            out.push_str(&format!("  {:<9} {:>10}\n", "ensemble", format_percent(acc)));
        }
    }
    if !report.ablation_deltas.is_empty() {
        out.push_str("\nLeave-one-out ablation (accuracy points when removed)\n");
        for (system, delta) in &report.ablation_deltas {
            let reduced = report.leave_one_out_accuracy.get(system).copied().unwrap_or(0.0);
            out.push_str(&format!(
                "  -{:<8} {:>8}   (reduced {})\n",
                system.to_string(),
                format_points(*delta),
                format_percent(reduced)
            ));
        }
    }
    if !report.gen_metrics.is_empty() {
        out.push_str("\nGeneration metrics\n");
        for (name, value) in &report.gen_metrics {
            out.push_str(&format!("  {:<12} {:>10}\n", name, format_percent(*value)));
        }
    }
    out
}

/// Write `<stem>.txt` and `<stem>.json` into `dir`, returning both paths.
pub fn write_report(
    report: &EvalReport,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf), EvalError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io {
            path: path.clone(),
            source,
        }
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let text_path = dir.join(format!("{stem}.txt"));
    std::fs::write(&text_path, render_report_text(report)).map_err(io_err(&text_path))?;
    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;
    Ok((text_path, json_path))
}
