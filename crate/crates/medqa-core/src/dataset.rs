//! Flat-file ingestion of MCQ and generation items with input-side
//! standardization.
//!
//! Both formats are UTF-8 tab-delimited with a fixed header; embedded
//! newlines and tabs inside fields are backslash-escaped so every record
//! stays on one line. Rows failing validation are rejected individually
//! and reported, never silently dropped.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::textnorm::{canonicalize_choice, standardize_input, CanonicalChoice, ChoiceMap};

pub const MCQ_HEADER: &str = "id\tstem\topt_a\topt_b\topt_c\topt_d\topt_e\tgold";
pub const GEN_HEADER: &str = "id\tkind\tprompt\tgold";

/// A preprocessed multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub stem: String,
    /// 4 or 5 options in canonical label order.
    pub options: Vec<(CanonicalChoice, String)>,
    pub gold: Option<CanonicalChoice>,
}

impl McqItem {
    pub fn labels(&self) -> impl Iterator<Item = CanonicalChoice> + '_ {
        self.options.iter().map(|(label, _)| *label)
    }
}

/// Generation sub-task variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenKind {
    FillBlank,
    PatientQa,
    Gec,
    Paraphrase,
}

impl GenKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fill_blank" => Some(GenKind::FillBlank),
            "patient_qa" => Some(GenKind::PatientQa),
            "gec" => Some(GenKind::Gec),
            "paraphrase" => Some(GenKind::Paraphrase),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GenKind::FillBlank => "fill_blank",
            GenKind::PatientQa => "patient_qa",
            GenKind::Gec => "gec",
            GenKind::Paraphrase => "paraphrase",
        }
    }
}

/// A preprocessed free-text item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenItem {
    pub id: String,
    pub kind: GenKind,
    pub prompt_text: String,
    pub gold: Option<String>,
    /// Number of blank markers in `prompt_text`; 0 for non-fill-blank kinds.
    pub blank_count: usize,
}

/// A loaded collection plus the provenance needed for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub mcq: Vec<McqItem>,
    pub gen: Vec<GenItem>,
    pub source_path: PathBuf,
    pub checksum: String,
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string_pretty(self).expect("dataset serializes");
        std::fs::write(path, json).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DatasetError::BadFormat {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// A row rejected during loading; `line` is the 1-based physical line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line: usize,
    pub reason: String,
}

impl std::fmt::Display for RowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    BadFormat { path: PathBuf, reason: String },
    #[error("{path}: bad header, expected {expected:?}")]
    BadHeader { path: PathBuf, expected: &'static str },
}

/// Items that parsed plus the rows that did not.
#[derive(Debug, Clone)]
pub struct LoadOutcome<T> {
    pub items: Vec<T>,
    pub rejects: Vec<RowError>,
    /// SHA-256 of the source file bytes, hex-encoded.
    pub checksum: String,
}

impl<T> LoadOutcome<T> {
    pub fn clean(&self) -> bool {
        self.rejects.is_empty()
    }
}

/// Escape a field for one-record-per-line TSV.
pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

/// Inverse of [`escape_field`].
pub fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Count blank markers: contiguous runs of `_` of length ≥ 2, or exact
/// occurrences of an explicitly configured marker token.
pub fn count_blank_markers(text: &str, marker: Option<&str>) -> usize {
    if let Some(token) = marker.filter(|t| !t.is_empty()) {
        return text.matches(token).count();
    }
    let mut count = 0;
    let mut run = 0;
    for c in text.chars() {
        if c == '_' {
            run += 1;
        } else {
            if run >= 2 {
                count += 1;
            }
            run = 0;
        }
    }
    if run >= 2 {
        count += 1;
    }
    count
}

const LABEL_PUNCT: &[char] = &['.', ')', '-', ':', '،'];

/// Split an option cell into an embedded label and the option text, when
/// the cell starts with `<letter><punct> `. Returns None when the cell has
/// no recognizable label prefix.
fn split_label_prefix(cell: &str) -> Option<(CanonicalChoice, &str)> {
    let trimmed = cell.trim_start();
    let body = trimmed.strip_prefix('(').unwrap_or(trimmed);
    let map = ChoiceMap::builtin();
    // try the two-char surface (هـ) before single characters
    for n in [2usize, 1] {
        let mut indices = body.char_indices().skip(n);
        let Some((end, _)) = indices.next() else { continue };
        let Some(letter) = map.lookup(&body[..end]) else {
            continue;
        };
        let tail = &body[end..];
        let after_punct = tail.trim_start_matches(LABEL_PUNCT);
        if after_punct.len() == tail.len() {
            continue; // no label punctuation at all
        }
        if !after_punct.is_empty() && !after_punct.starts_with(char::is_whitespace) {
            continue; // punctuation glued to a word, e.g. ب-لاكتام
        }
        return Some((letter, after_punct.trim_start()));
    }
    None
}

/// Parsed data rows as (1-based line number, unescaped fields), plus the
/// file checksum.
type RawRows = (Vec<(usize, Vec<String>)>, String);

fn read_rows(
    path: &Path,
    expected_header: &'static str,
    field_count: usize,
) -> Result<RawRows, DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let checksum = hex_digest(&bytes);
    let text = String::from_utf8(bytes).map_err(|_| DatasetError::BadFormat {
        path: path.to_path_buf(),
        reason: "not valid UTF-8".to_string(),
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r') == expected_header => {}
        _ => {
            return Err(DatasetError::BadHeader {
                path: path.to_path_buf(),
                expected: expected_header,
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut fields: Vec<String> = line.split('\t').map(unescape_field).collect();
        // trailing empty columns may be omitted by writers
        while fields.len() < field_count {
            fields.push(String::new());
        }
        rows.push((idx + 1, fields));
    }
    Ok((rows, checksum))
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Load MCQ items. Option labels and bullet symbols are normalized to the
/// canonical letters; stems and option texts go through
/// [`standardize_input`].
pub fn load_mcq(path: &Path) -> Result<LoadOutcome<McqItem>, DatasetError> {
    let (rows, checksum) = read_rows(path, MCQ_HEADER, 8)?;
    let mut items: Vec<McqItem> = Vec::with_capacity(rows.len());
    let mut rejects = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();

    'rows: for (line, fields) in rows {
        let reject = |reason: String| RowError { line, reason };
        if fields.len() != 8 {
            rejects.push(reject(format!("expected 8 fields, found {}", fields.len())));
            continue;
        }
        let id = fields[0].trim().to_string();
        if id.is_empty() {
            rejects.push(reject("empty id".to_string()));
            continue;
        }
        if !seen_ids.insert(id.clone()) {
            rejects.push(reject(format!("duplicate id {id:?}")));
            continue;
        }
        let stem = standardize_input(&fields[1]).into_string();
        if stem.is_empty() {
            rejects.push(reject("empty stem".to_string()));
            continue;
        }

        let cells = &fields[2..7];
        let filled = cells.iter().take_while(|c| !c.trim().is_empty()).count();
        if cells.iter().skip(filled).any(|c| !c.trim().is_empty()) {
            rejects.push(reject("gap in option columns".to_string()));
            continue;
        }
        if filled < 4 {
            rejects.push(reject(format!("{filled} options; need 4 or 5")));
            continue;
        }

        let mut options = Vec::with_capacity(filled);
        for (col, cell) in cells.iter().take(filled).enumerate() {
            let positional = CanonicalChoice::from_index(col).expect("col < 5");
            let (label, text) = match split_label_prefix(cell) {
                Some((label, rest)) => (label, rest),
                None => (positional, cell.as_str()),
            };
            if options.iter().any(|(seen, _)| *seen == label) {
                rejects.push(reject(format!("duplicate option label {label}")));
                continue 'rows;
            }
            if label != positional {
                rejects.push(reject(format!(
                    "option {} labeled {label}; labels must follow canonical order",
                    positional
                )));
                continue 'rows;
            }
            let text = standardize_input(text).into_string();
            if text.is_empty() {
                rejects.push(reject(format!("option {label} has empty text")));
                continue 'rows;
            }
            options.push((label, text));
        }

        let gold_cell = fields[7].trim();
        let gold = if gold_cell.is_empty() {
            None
        } else {
            match canonicalize_choice(gold_cell) {
                Ok(letter) => Some(letter),
                Err(e) => {
                    rejects.push(reject(format!("unusable gold answer: {e}")));
                    continue;
                }
            }
        };
        if let Some(g) = gold {
            if !options.iter().any(|(label, _)| *label == g) {
                rejects.push(reject(format!("gold {g} is not among the option labels")));
                continue;
            }
        }

        items.push(McqItem {
            id,
            stem,
            options,
            gold,
        });
    }

    Ok(LoadOutcome {
        items,
        rejects,
        checksum,
    })
}

/// Load generation items. `blank_marker` overrides the default blank
/// detection (runs of ≥ 2 underscores).
pub fn load_gen(
    path: &Path,
    blank_marker: Option<&str>,
) -> Result<LoadOutcome<GenItem>, DatasetError> {
    let (rows, checksum) = read_rows(path, GEN_HEADER, 4)?;
    let mut items: Vec<GenItem> = Vec::with_capacity(rows.len());
    let mut rejects = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();

    for (line, fields) in rows {
        let reject = |reason: String| RowError { line, reason };
        if fields.len() != 4 {
            rejects.push(reject(format!("expected 4 fields, found {}", fields.len())));
            continue;
        }
        let id = fields[0].trim().to_string();
        if id.is_empty() {
            rejects.push(reject("empty id".to_string()));
            continue;
        }
        if !seen_ids.insert(id.clone()) {
            rejects.push(reject(format!("duplicate id {id:?}")));
            continue;
        }
        let Some(kind) = GenKind::parse(fields[1].trim()) else {
            rejects.push(reject(format!("unknown kind {:?}", fields[1].trim())));
            continue;
        };
        let prompt_text = standardize_input(&fields[2]).into_string();
        if prompt_text.is_empty() {
            rejects.push(reject("empty prompt".to_string()));
            continue;
        }
        let blank_count = if kind == GenKind::FillBlank {
            let n = count_blank_markers(&prompt_text, blank_marker);
            if n == 0 {
                rejects.push(reject("fill_blank prompt has no blank markers".to_string()));
                continue;
            }
            n
        } else {
            0
        };
        let gold_cell = fields[3].trim();
        let gold = (!gold_cell.is_empty()).then(|| gold_cell.to_string());

        items.push(GenItem {
            id,
            kind,
            prompt_text,
            gold,
            blank_count,
        });
    }

    Ok(LoadOutcome {
        items,
        rejects,
        checksum,
    })
}

/// Load a full dataset from an MCQ file, a gen file, or both.
pub fn load_dataset(
    mcq_path: Option<&Path>,
    gen_path: Option<&Path>,
    blank_marker: Option<&str>,
) -> Result<(Dataset, Vec<RowError>), DatasetError> {
    let mut rejects = Vec::new();
    let mut mcq = Vec::new();
    let mut gen = Vec::new();
    let mut checksum = String::new();
    let mut source = PathBuf::new();
    if let Some(path) = mcq_path {
        let outcome = load_mcq(path)?;
        mcq = outcome.items;
        rejects.extend(outcome.rejects);
        checksum = outcome.checksum;
        source = path.to_path_buf();
    }
    if let Some(path) = gen_path {
        let outcome = load_gen(path, blank_marker)?;
        gen = outcome.items;
        rejects.extend(outcome.rejects);
        if checksum.is_empty() {
            checksum = outcome.checksum;
            source = path.to_path_buf();
        }
    }
    Ok((
        Dataset {
            mcq,
            gen,
            source_path: source,
            checksum,
        },
        rejects,
    ))
}
