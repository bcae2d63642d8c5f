//! The four MCQ systems (AFS, ETA, RFA, AZS) and the unified generation
//! pipeline, plus deterministic batch execution over a bounded worker pool.
//!
//! Every stage is a pure function of its item given a fixed backend:
//! prompts are rendered from immutable templates, completions go through
//! the shared [`CompletionBackend`], and outputs are canonicalized by
//! `textnorm`. Batch output order is always (item id, system priority),
//! independent of completion order and parallelism.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{prompt_hash, BackendError, CompletionBackend, CompletionRequest, DecodingParams};
use crate::dataset::{GenItem, GenKind, McqItem};
use crate::prompting::{
    mcq_block, render_free, render_mcq, PromptError, RenderedPrompt, TemplateName, TemplateSet,
};
use crate::textnorm::{
    canonicalize_choice, clean, join_blanks, split_blanks, strip_markdown, CanonicalChoice,
    CleanText,
};

/// The MCQ prompting systems. The ensemble priority order is total:
/// RFA > AFS > ETA; AZS is a baseline excluded from ensembles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemId {
    Rfa,
    Afs,
    Eta,
    Azs,
}

impl SystemId {
    /// Ensemble members in descending priority.
    pub const ENSEMBLE: [SystemId; 3] = [SystemId::Rfa, SystemId::Afs, SystemId::Eta];

    pub const ALL: [SystemId; 4] = [SystemId::Rfa, SystemId::Afs, SystemId::Eta, SystemId::Azs];

    /// Tie-break rank: lower wins. AZS sorts after the committee.
    pub fn priority_rank(self) -> usize {
        match self {
            SystemId::Rfa => 0,
            SystemId::Afs => 1,
            SystemId::Eta => 2,
            SystemId::Azs => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SystemId::Rfa => "rfa",
            SystemId::Afs => "afs",
            SystemId::Eta => "eta",
            SystemId::Azs => "azs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rfa" => Some(SystemId::Rfa),
            "afs" => Some(SystemId::Afs),
            "eta" => Some(SystemId::Eta),
            "azs" => Some(SystemId::Azs),
            _ => None,
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemId::Rfa => "RFA",
            SystemId::Afs => "AFS",
            SystemId::Eta => "ETA",
            SystemId::Azs => "AZS",
        })
    }
}

/// What canonicalization made of the raw answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractedChoice {
    Letter(CanonicalChoice),
    Unparseable,
}

impl ExtractedChoice {
    pub fn letter(self) -> Option<CanonicalChoice> {
        match self {
            ExtractedChoice::Letter(c) => Some(c),
            ExtractedChoice::Unparseable => None,
        }
    }

    fn from_raw(raw: &str) -> Self {
        match canonicalize_choice(raw) {
            Ok(letter) => ExtractedChoice::Letter(letter),
            Err(_) => ExtractedChoice::Unparseable,
        }
    }
}

/// One completion stage's audit trail entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: String,
    pub prompt_hash: String,
}

/// A system's answer for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemPrediction {
    pub system: SystemId,
    pub item_id: String,
    /// Raw final-stage model text.
    pub raw: String,
    pub choice: ExtractedChoice,
    /// ETA translation or RFA refined question.
    pub intermediate: Option<String>,
    pub warnings: Vec<String>,
    pub trace: Vec<StageTrace>,
}

/// The generation pipeline's answer for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenPrediction {
    pub item_id: String,
    pub kind: GenKind,
    pub raw: String,
    pub answer: CleanText,
    pub warnings: Vec<String>,
    pub trace: Vec<StageTrace>,
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("translation stage returned empty text")]
    EtaTranslateEmpty,
}

/// A per-item failure collected by batch execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    pub item_id: String,
    pub system: Option<SystemId>,
    pub stage: String,
    pub message: String,
}

impl fmt::Display for ItemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.system {
            Some(system) => write!(
                f,
                "{} [{system}/{}]: {}",
                self.item_id, self.stage, self.message
            ),
            None => write!(f, "{} [{}]: {}", self.item_id, self.stage, self.message),
        }
    }
}

/// Shared, immutable execution environment for all pipeline stages.
pub struct PipelineContext<'a> {
    pub templates: &'a TemplateSet,
    pub backend: &'a dyn CompletionBackend,
    pub model_id: &'a str,
    pub params: DecodingParams,
}

impl<'a> PipelineContext<'a> {
    pub fn new(
        templates: &'a TemplateSet,
        backend: &'a dyn CompletionBackend,
        model_id: &'a str,
        params: DecodingParams,
    ) -> Self {
        PipelineContext {
            templates,
            backend,
            model_id,
            params,
        }
    }

    fn complete(&self, prompt: RenderedPrompt, stage: &str) -> Result<(String, StageTrace), StageError> {
        let trace = StageTrace {
            stage: stage.to_string(),
            prompt_hash: prompt_hash(&prompt.final_text),
        };
        let req = CompletionRequest {
            model_id: self.model_id.to_string(),
            prompt,
            params: self.params,
        };
        let raw = self.backend.complete(&req)?;
        Ok((raw, trace))
    }
}

fn single_stage_mcq(
    ctx: &PipelineContext,
    item: &McqItem,
    system: SystemId,
    template: TemplateName,
) -> Result<SystemPrediction, StageError> {
    let prompt = render_mcq(ctx.templates.get(template), item)?;
    let (raw, trace) = ctx.complete(prompt, template.as_str())?;
    Ok(SystemPrediction {
        system,
        item_id: item.id.clone(),
        choice: ExtractedChoice::from_raw(&raw),
        raw,
        intermediate: None,
        warnings: Vec::new(),
        trace: vec![trace],
    })
}

/// Arabic few-shot: one completion, answer canonicalized.
pub fn run_afs(ctx: &PipelineContext, item: &McqItem) -> Result<SystemPrediction, StageError> {
    single_stage_mcq(ctx, item, SystemId::Afs, TemplateName::Afs)
}

/// Arabic zero-shot baseline: identical to AFS modulo the few-shot block.
pub fn run_azs(ctx: &PipelineContext, item: &McqItem) -> Result<SystemPrediction, StageError> {
    single_stage_mcq(ctx, item, SystemId::Azs, TemplateName::Azs)
}

/// English-translate-then-answer: two completions; the answer stage sees
/// the translation alone and still replies in the canonical Arabic letters.
pub fn run_eta(ctx: &PipelineContext, item: &McqItem) -> Result<SystemPrediction, StageError> {
    let question = mcq_block(item);
    let prompt = render_free(
        ctx.templates.get(TemplateName::EtaTranslate),
        &question,
        &item.id,
    )?;
    let (translation_raw, translate_trace) = ctx.complete(prompt, "eta_translate")?;
    let translation = translation_raw.trim().to_string();
    if translation.is_empty() {
        return Err(StageError::EtaTranslateEmpty);
    }

    let prompt = render_free(
        ctx.templates.get(TemplateName::EtaAnswer),
        &translation,
        &item.id,
    )?;
    let (raw, answer_trace) = ctx.complete(prompt, "eta_answer")?;
    Ok(SystemPrediction {
        system: SystemId::Eta,
        item_id: item.id.clone(),
        choice: ExtractedChoice::from_raw(&raw),
        raw,
        intermediate: Some(translation),
        warnings: Vec::new(),
        trace: vec![translate_trace, answer_trace],
    })
}

/// Lenient surface variants accepted when checking that a refined question
/// still carries an option label.
fn label_variants(label: CanonicalChoice) -> &'static [&'static str] {
    match label {
        CanonicalChoice::Alif => &["أ", "ا", "إ", "آ"],
        CanonicalChoice::Ba => &["ب"],
        CanonicalChoice::Jim => &["ج"],
        CanonicalChoice::Dal => &["د"],
        CanonicalChoice::Ha => &["هـ", "ه"],
    }
}

/// Whether `text` contains `label` used as an option label, i.e. followed
/// by label punctuation rather than buried inside a word.
fn has_option_label(text: &str, label: CanonicalChoice) -> bool {
    for variant in label_variants(label) {
        let mut start = 0;
        while let Some(pos) = text[start..].find(variant) {
            let after = &text[start + pos + variant.len()..];
            if matches!(after.chars().next(), Some('.' | ')' | ':' | '-' | '،')) {
                return true;
            }
            start += pos + variant.len();
        }
    }
    false
}

/// Refine-then-answer: the refinement must keep every original option
/// label; otherwise the answer stage falls back to the original question so
/// the system still votes.
pub fn run_rfa(ctx: &PipelineContext, item: &McqItem) -> Result<SystemPrediction, StageError> {
    let question = mcq_block(item);
    let prompt = render_free(
        ctx.templates.get(TemplateName::RfaRefine),
        &question,
        &item.id,
    )?;
    let (refined_raw, refine_trace) = ctx.complete(prompt, "rfa_refine")?;
    let refined = refined_raw.trim().to_string();

    let mut warnings = Vec::new();
    let dropped: Vec<CanonicalChoice> = item
        .labels()
        .filter(|label| !has_option_label(&refined, *label))
        .collect();
    let answer_question = if refined.is_empty() || !dropped.is_empty() {
        let which = if refined.is_empty() {
            "refinement returned empty text".to_string()
        } else {
            format!(
                "refinement dropped option label(s) {}",
                dropped
                    .iter()
                    .map(|c| c.surface().to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            )
        };
        warnings.push(format!("{which}; answering over the original question"));
        &question
    } else {
        &refined
    };

    let prompt = render_free(
        ctx.templates.get(TemplateName::RfaAnswer),
        answer_question,
        &item.id,
    )?;
    let (raw, answer_trace) = ctx.complete(prompt, "rfa_answer")?;
    Ok(SystemPrediction {
        system: SystemId::Rfa,
        item_id: item.id.clone(),
        choice: ExtractedChoice::from_raw(&raw),
        raw,
        intermediate: Some(refined),
        warnings,
        trace: vec![refine_trace, answer_trace],
    })
}

/// Dispatch one item through one system.
pub fn run_system(
    ctx: &PipelineContext,
    system: SystemId,
    item: &McqItem,
) -> Result<SystemPrediction, StageError> {
    match system {
        SystemId::Afs => run_afs(ctx, item),
        SystemId::Eta => run_eta(ctx, item),
        SystemId::Rfa => run_rfa(ctx, item),
        SystemId::Azs => run_azs(ctx, item),
    }
}

/// Unified generation: one completion, markdown stripped and spacing
/// standardized; fill-blank answers are split to the expected count and
/// re-joined with the canonical `، ` separator.
///
/// Fill-blank answers skip the comma-standardization pass: the model's own
/// commas are the blank separators there, and converting them before the
/// split would make surplus content indistinguishable from the canonical
/// separator. Spacing is still cleaned per part.
pub fn run_generation(ctx: &PipelineContext, item: &GenItem) -> Result<GenPrediction, StageError> {
    let prompt = render_free(
        ctx.templates.get(TemplateName::GenUnified),
        &item.prompt_text,
        &item.id,
    )?;
    let (raw, trace) = ctx.complete(prompt, "gen_unified")?;
    let mut warnings = Vec::new();
    let answer = if item.kind == GenKind::FillBlank {
        let split = split_blanks(strip_markdown(&raw).as_str(), item.blank_count);
        warnings.extend(split.warnings);
        join_blanks(&split.parts)
    } else {
        clean(&raw)
    };
    Ok(GenPrediction {
        item_id: item.id.clone(),
        kind: item.kind,
        raw,
        answer,
        warnings,
        trace: vec![trace],
    })
}

/// MCQ batch results in deterministic order.
#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub predictions: Vec<SystemPrediction>,
    pub errors: Vec<ItemError>,
}

/// Generation batch results in deterministic order.
#[derive(Debug, Default)]
pub struct GenBatchOutcome {
    pub predictions: Vec<GenPrediction>,
    pub errors: Vec<ItemError>,
}

#[cfg(feature = "parallel")]
fn execute<T, R, F>(tasks: Vec<T>, parallelism: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Send + Sync,
{
    use rayon::prelude::*;
    if parallelism <= 1 {
        return tasks.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .expect("worker pool");
    pool.install(|| tasks.into_par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
fn execute<T, R, F>(tasks: Vec<T>, _parallelism: usize, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    tasks.into_iter().map(f).collect()
}

/// Run every (item, system) pair. Per-item failures are collected, never
/// fatal; output order is (item id, system priority) regardless of
/// completion order.
pub fn run_batch(
    ctx: &PipelineContext,
    items: &[McqItem],
    systems: &[SystemId],
    parallelism: usize,
) -> BatchOutcome {
    let tasks: Vec<(&McqItem, SystemId)> = items
        .iter()
        .flat_map(|item| systems.iter().map(move |s| (item, *s)))
        .collect();
    let results = execute(tasks, parallelism.max(1), |(item, system)| {
        run_system(ctx, system, item).map_err(|e| ItemError {
            item_id: item.id.clone(),
            system: Some(system),
            stage: stage_of(&e, system),
            message: e.to_string(),
        })
    });

    let mut outcome = BatchOutcome::default();
    for result in results {
        match result {
            Ok(prediction) => outcome.predictions.push(prediction),
            Err(error) => outcome.errors.push(error),
        }
    }
    outcome
        .predictions
        .sort_by(|a, b| (&a.item_id, a.system.priority_rank()).cmp(&(&b.item_id, b.system.priority_rank())));
    outcome
        .errors
        .sort_by(|a, b| {
            let rank = |e: &ItemError| e.system.map_or(usize::MAX, SystemId::priority_rank);
            (&a.item_id, rank(a)).cmp(&(&b.item_id, rank(b)))
        });
    outcome
}

fn stage_of(error: &StageError, system: SystemId) -> String {
    match error {
        StageError::EtaTranslateEmpty => "eta_translate".to_string(),
        _ => system.as_str().to_string(),
    }
}

/// Run the generation pipeline over all items; same guarantees as
/// [`run_batch`].
pub fn run_gen_batch(
    ctx: &PipelineContext,
    items: &[GenItem],
    parallelism: usize,
) -> GenBatchOutcome {
    let tasks: Vec<&GenItem> = items.iter().collect();
    let results = execute(tasks, parallelism.max(1), |item| {
        run_generation(ctx, item).map_err(|e| ItemError {
            item_id: item.id.clone(),
            system: None,
            stage: "gen_unified".to_string(),
            message: e.to_string(),
        })
    });
    let mut outcome = GenBatchOutcome::default();
    for result in results {
        match result {
            Ok(prediction) => outcome.predictions.push(prediction),
            Err(error) => outcome.errors.push(error),
        }
    }
    outcome.predictions.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    outcome.errors.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    outcome
}
