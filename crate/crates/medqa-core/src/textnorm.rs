//! Input standardization and output cleaning for Arabic QA text.
//!
//! Everything here is pure and total: input-side standardization
//! ([`standardize_input`]), output-side cleaning ([`strip_markdown`],
//! [`split_blanks`], [`join_blanks`]) and answer-letter canonicalization
//! ([`canonicalize_choice`]) over the alphabet {أ، ب، ج، د، هـ}.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Built-in surface-form → canonical-letter table, shipped as a data file.
const BUILTIN_CHOICE_MAP: &str = include_str!("../assets/choice_map.tsv");

/// Extra table rows merged on top of the built-in map at startup.
pub const CHOICE_MAP_ENV: &str = "MEDQA_CHOICE_MAP";

/// One of the five canonical Arabic option letters.
///
/// The fifth letter's canonical surface form is HEH followed by TATWEEL
/// (`هـ`); bare HEH normalizes to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CanonicalChoice {
    Alif,
    Ba,
    Jim,
    Dal,
    Ha,
}

impl CanonicalChoice {
    /// All five letters in canonical order.
    pub const ALL: [CanonicalChoice; 5] = [
        CanonicalChoice::Alif,
        CanonicalChoice::Ba,
        CanonicalChoice::Jim,
        CanonicalChoice::Dal,
        CanonicalChoice::Ha,
    ];

    /// Canonical surface form.
    pub fn surface(self) -> &'static str {
        match self {
            CanonicalChoice::Alif => "أ",
            CanonicalChoice::Ba => "ب",
            CanonicalChoice::Jim => "ج",
            CanonicalChoice::Dal => "د",
            CanonicalChoice::Ha => "هـ",
        }
    }

    /// Position in the canonical order, 0-based.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).unwrap()
    }

    /// Letter at `index` in the canonical order.
    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Parse a canonical surface form exactly (no leniency).
    pub fn from_surface(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.surface() == s)
    }
}

impl fmt::Display for CanonicalChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.surface())
    }
}

impl Serialize for CanonicalChoice {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.surface())
    }
}

impl<'de> Deserialize<'de> for CanonicalChoice {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        CanonicalChoice::from_surface(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("not a canonical letter: {s:?}")))
    }
}

/// Raised when a raw answer yields no canonical letter, or more than one.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Unparseable {
    #[error("no answer letter found in {0:?}")]
    NoCandidate(String),
    #[error("conflicting answer letters in {0:?}")]
    Ambiguous(String),
}

#[derive(Debug, Error)]
pub enum ChoiceMapError {
    #[error("line {0}: expected `surface<TAB>canonical`")]
    BadRow(usize),
    #[error("line {0}: {1:?} is not a canonical letter")]
    BadCanonical(usize, String),
    #[error("failed to read choice map: {0}")]
    Io(#[from] std::io::Error),
}

/// Surface-form → canonical-letter lookup table.
///
/// The built-in table covers the Latin letters A–E, alif/heh variants and
/// the canonical letters themselves; deployments can extend it from a TSV
/// file without a rebuild.
#[derive(Debug, Clone)]
pub struct ChoiceMap {
    map: HashMap<String, CanonicalChoice>,
}

impl ChoiceMap {
    /// The table bundled with the crate.
    pub fn builtin() -> &'static ChoiceMap {
        static BUILTIN: OnceLock<ChoiceMap> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            ChoiceMap::from_tsv(BUILTIN_CHOICE_MAP).expect("bundled choice map is well-formed")
        })
    }

    /// Parse a `surface<TAB>canonical` table. `#` lines and blanks are skipped.
    pub fn from_tsv(text: &str) -> Result<Self, ChoiceMapError> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, canonical) = line
                .split_once('\t')
                .ok_or(ChoiceMapError::BadRow(i + 1))?;
            let letter = CanonicalChoice::from_surface(canonical.trim())
                .ok_or_else(|| ChoiceMapError::BadCanonical(i + 1, canonical.to_string()))?;
            map.insert(surface.trim().to_string(), letter);
        }
        Ok(ChoiceMap { map })
    }

    pub fn from_tsv_file(path: &Path) -> Result<Self, ChoiceMapError> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    /// Merge additional rows on top of this table. Later rows win.
    pub fn extend_from_tsv(&mut self, text: &str) -> Result<(), ChoiceMapError> {
        let extra = Self::from_tsv(text)?;
        self.map.extend(extra.map);
        Ok(())
    }

    pub fn lookup(&self, token: &str) -> Option<CanonicalChoice> {
        self.map.get(token).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, CanonicalChoice)> {
        self.map.iter().map(|(raw, letter)| (raw.as_str(), *letter))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// The table in effect for this process: the built-in rows extended by
    /// the TSV file named in `MEDQA_CHOICE_MAP`, when set. A broken
    /// extension file is reported on stderr and skipped; command-line
    /// tools validate the path up front.
    pub fn active() -> &'static ChoiceMap {
        static ACTIVE: OnceLock<ChoiceMap> = OnceLock::new();
        ACTIVE.get_or_init(|| {
            let mut map = ChoiceMap::builtin().clone();
            if let Ok(path) = std::env::var(CHOICE_MAP_ENV) {
                if !path.is_empty() {
                    match std::fs::read_to_string(&path) {
                        Ok(text) => {
                            if let Err(e) = map.extend_from_tsv(&text) {
                                eprintln!("warning: {CHOICE_MAP_ENV} {path}: {e}");
                            }
                        }
                        Err(e) => eprintln!("warning: {CHOICE_MAP_ENV} {path}: {e}"),
                    }
                }
            }
            map
        })
    }
}

/// Arabic diacritics and invisible joiners that never distinguish answers.
fn is_ignorable_mark(c: char) -> bool {
    matches!(c,
        '\u{064B}'..='\u{065F}' // tanween, harakat, small marks
        | '\u{0670}'            // superscript alef
        | '\u{200C}'            // ZWNJ
        | '\u{200D}'            // ZWJ
        | '\u{200E}'            // LRM
        | '\u{200F}'            // RLM
        | '\u{FEFF}'            // BOM / ZWNBSP
    )
}

/// Punctuation stripped from around answer tokens.
fn is_wrapping_punct(c: char) -> bool {
    matches!(
        c,
        '.' | ',' | ':' | ';' | '!' | '?' | '(' | ')' | '[' | ']' | '{' | '}' | '<' | '>'
            | '"' | '\'' | '/' | '\\' | '|' | '+' | '=' | '&' | '%' | '~'
            | '،' | '؛' | '؟' | '«' | '»' | '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}'
            | '\u{2013}' | '\u{2014}' | '-'
    )
}

/// Extract the unique canonical answer letter from a raw model reply.
///
/// Markdown is stripped first, then each whitespace-separated token is
/// trimmed of wrapping punctuation and ignorable marks and looked up in the
/// table. Exactly one distinct hit must remain: none is `NoCandidate`, two
/// distinct letters are `Ambiguous` rather than a silent first-wins guess.
pub fn canonicalize_choice(raw: &str) -> Result<CanonicalChoice, Unparseable> {
    canonicalize_choice_with(ChoiceMap::active(), raw)
}

/// [`canonicalize_choice`] against a caller-supplied table.
pub fn canonicalize_choice_with(
    map: &ChoiceMap,
    raw: &str,
) -> Result<CanonicalChoice, Unparseable> {
    let cleaned = strip_markdown(raw);
    let mut found: Option<CanonicalChoice> = None;
    for token in cleaned.as_str().split_whitespace() {
        let token = token.trim_matches(is_wrapping_punct);
        if token.is_empty() {
            continue;
        }
        let key: String = token.chars().filter(|c| !is_ignorable_mark(*c)).collect();
        let Some(letter) = map.lookup(&key) else {
            continue;
        };
        match found {
            None => found = Some(letter),
            Some(prev) if prev == letter => {}
            Some(_) => return Err(Unparseable::Ambiguous(raw.to_string())),
        }
    }
    found.ok_or_else(|| Unparseable::NoCandidate(raw.to_string()))
}

/// Text with markdown removed and spacing standardized: no `**`, no
/// leading-line list or heading markers, no backticks, no double spaces,
/// no leading or trailing whitespace.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CleanText(String);

impl CleanText {
    pub fn empty() -> Self {
        CleanText(String::new())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn from_normalized(s: String) -> Self {
        CleanText(s)
    }
}

impl fmt::Display for CleanText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for CleanText {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

fn is_arabic_letter(c: char) -> bool {
    let code = c as u32;
    let in_block = (0x0600..=0x06FF).contains(&code)
        || (0x0750..=0x077F).contains(&code)
        || (0x08A0..=0x08FF).contains(&code)
        || (0xFB50..=0xFDFF).contains(&code)
        || (0xFE70..=0xFEFF).contains(&code);
    in_block && c.is_alphabetic()
}

/// Input-side standardization: collapse whitespace runs (runs containing a
/// newline collapse to a single newline, others to a single space), convert
/// a Latin comma to the Arabic comma `،` when the nearest non-space
/// characters on both sides are Arabic letters, and keep exactly one space
/// after an Arabic comma. Digits, Latin terms and all letters pass through
/// verbatim.
pub fn standardize_input(raw: &str) -> CleanText {
    let chars: Vec<char> = raw.chars().collect();
    let mut out = String::with_capacity(raw.len());
    let mut i = 0;

    // nearest non-whitespace character at or after `from`
    let next_solid = |from: usize| -> Option<char> {
        chars[from..].iter().copied().find(|c| !c.is_whitespace())
    };

    while i < chars.len() {
        let c = chars[i];

        if c.is_whitespace() {
            let mut saw_newline = false;
            while i < chars.len() && chars[i].is_whitespace() {
                saw_newline |= chars[i] == '\n';
                i += 1;
            }
            // a Latin comma may own this whitespace; let the comma branch decide
            if i < chars.len() && chars[i] == ',' {
                let prev_arabic = out.chars().rev().find(|c| !c.is_whitespace());
                if prev_arabic.is_some_and(is_arabic_letter)
                    && next_solid(i + 1).is_some_and(is_arabic_letter)
                {
                    continue; // drop the run; comma branch emits `، `
                }
            }
            if !out.is_empty() && i < chars.len() {
                out.push(if saw_newline { '\n' } else { ' ' });
            }
            continue;
        }

        if c == ',' {
            let prev = out.chars().rev().find(|c| !c.is_whitespace());
            if prev.is_some_and(is_arabic_letter) && next_solid(i + 1).is_some_and(is_arabic_letter)
            {
                while out.ends_with(' ') || out.ends_with('\n') {
                    out.pop();
                }
                out.push('،');
                out.push(' ');
                i += 1;
                // swallow whitespace the comma already accounts for
                while i < chars.len() && chars[i].is_whitespace() {
                    i += 1;
                }
                continue;
            }
            out.push(',');
            i += 1;
            continue;
        }

        if c == '،' {
            while out.ends_with(' ') {
                out.pop();
            }
            out.push('،');
            i += 1;
            while i < chars.len() && (chars[i] == ' ' || chars[i] == '\t') {
                i += 1;
            }
            if i < chars.len() && !chars[i].is_whitespace() {
                out.push(' ');
            }
            continue;
        }

        out.push(c);
        i += 1;
    }

    while out.ends_with([' ', '\n', '\t']) {
        out.pop();
    }
    CleanText::from_normalized(out)
}

fn is_list_marker_line(line: &str) -> Option<&str> {
    let trimmed = line.trim_start();
    for marker in ['-', '•'] {
        if let Some(rest) = trimmed.strip_prefix(marker) {
            if marker == '•' || rest.is_empty() || rest.starts_with(char::is_whitespace) {
                return Some(rest.trim_start());
            }
        }
    }
    if trimmed.starts_with('#') {
        let rest = trimmed.trim_start_matches('#');
        if rest.is_empty() || rest.starts_with(char::is_whitespace) {
            return Some(rest.trim_start());
        }
    }
    None
}

/// Output-side markdown removal: emphasis markers and code spans are
/// dropped keeping their content, leading list and heading markers are
/// removed per line, everything else keeps its order. Arabic letters and
/// digits are never touched; underscores survive because they double as
/// blank markers.
pub fn strip_markdown(raw: &str) -> CleanText {
    let mut lines = Vec::new();
    for line in raw.replace("\r\n", "\n").split('\n') {
        // emphasis and code-span characters, anywhere in the line
        let mut line: String = line.chars().filter(|c| *c != '*' && *c != '`').collect();
        while let Some(rest) = is_list_marker_line(&line) {
            if rest == line {
                break;
            }
            line = rest.to_string();
        }
        lines.push(collapse_inline_spaces(line.trim()));
    }
    let mut text = lines.join("\n");
    while text.starts_with('\n') {
        text.remove(0);
    }
    while text.ends_with('\n') {
        text.pop();
    }
    CleanText::from_normalized(text)
}

fn collapse_inline_spaces(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut in_gap = false;
    for c in line.chars() {
        if c == ' ' || c == '\t' {
            in_gap = true;
            continue;
        }
        if in_gap && !out.is_empty() {
            out.push(' ');
        }
        in_gap = false;
        out.push(c);
    }
    out
}

/// Composite output cleaning: markdown removal then input standardization.
pub fn clean(raw: &str) -> CleanText {
    standardize_input(strip_markdown(raw).as_str())
}

/// Result of [`split_blanks`]: always exactly the expected number of parts,
/// with any padding recorded as warnings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlankSplit {
    pub parts: Vec<CleanText>,
    pub warnings: Vec<String>,
}

/// Split a fill-in-the-blank answer into `expected` parts on Arabic or
/// Latin commas. Surplus parts are merged into the last answer; missing
/// parts are padded with empty strings and recorded as warnings.
pub fn split_blanks(raw: &str, expected: usize) -> BlankSplit {
    let mut warnings = Vec::new();
    if expected == 0 {
        return BlankSplit {
            parts: Vec::new(),
            warnings: vec!["expected zero blanks; nothing to split".to_string()],
        };
    }
    let mut parts: Vec<CleanText> = raw
        .splitn(expected, [',', '،'])
        .map(|part| CleanText::from_normalized(collapse_inline_spaces(part.trim())))
        .collect();
    if parts.len() < expected {
        warnings.push(format!(
            "expected {expected} answers, found {}; padded with empty strings",
            parts.len()
        ));
        parts.resize(expected, CleanText::empty());
    }
    BlankSplit { parts, warnings }
}

/// Join blank answers with the canonical separator `، `.
pub fn join_blanks(parts: &[CleanText]) -> CleanText {
    let joined = parts
        .iter()
        .map(CleanText::as_str)
        .collect::<Vec<_>>()
        .join("، ");
    CleanText::from_normalized(joined.trim().to_string())
}
