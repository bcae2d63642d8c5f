//! Prompt templates and rendering.
//!
//! Templates live in versioned asset files with a small front-matter header
//! (`name:`, `slots:`, optional `note:`) followed by the literal body;
//! few-shot pairs are delimited by `===in===` / `===out===` markers. The
//! body may reference declared slots as `{slot}` plus the reserved
//! `{examples}` placeholder, which expands to the few-shot block.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::McqItem;

const ASSETS: [&str; 7] = [
    include_str!("../assets/templates/afs.tmpl"),
    include_str!("../assets/templates/azs.tmpl"),
    include_str!("../assets/templates/eta_translate.tmpl"),
    include_str!("../assets/templates/eta_answer.tmpl"),
    include_str!("../assets/templates/rfa_refine.tmpl"),
    include_str!("../assets/templates/rfa_answer.tmpl"),
    include_str!("../assets/templates/gen_unified.tmpl"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    Afs,
    Azs,
    EtaTranslate,
    EtaAnswer,
    RfaRefine,
    RfaAnswer,
    GenUnified,
}

impl TemplateName {
    pub const ALL: [TemplateName; 7] = [
        TemplateName::Afs,
        TemplateName::Azs,
        TemplateName::EtaTranslate,
        TemplateName::EtaAnswer,
        TemplateName::RfaRefine,
        TemplateName::RfaAnswer,
        TemplateName::GenUnified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::Afs => "afs",
            TemplateName::Azs => "azs",
            TemplateName::EtaTranslate => "eta_translate",
            TemplateName::EtaAnswer => "eta_answer",
            TemplateName::RfaRefine => "rfa_refine",
            TemplateName::RfaAnswer => "rfa_answer",
            TemplateName::GenUnified => "gen_unified",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|n| n.as_str() == s)
    }

    /// Templates rendered through [`render_free`] (single `content` slot).
    pub fn is_free_form(self) -> bool {
        matches!(
            self,
            TemplateName::EtaTranslate
                | TemplateName::EtaAnswer
                | TemplateName::RfaRefine
                | TemplateName::RfaAnswer
                | TemplateName::GenUnified
        )
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template}: item cannot fill slot {slot:?}")]
    MissingSlot {
        template: TemplateName,
        slot: String,
    },
    #[error("template {template} is not a free-form template")]
    NotFreeForm { template: TemplateName },
    #[error("template asset {name:?}: {reason}")]
    BadAsset { name: String, reason: String },
    #[error("template {template}: unresolved placeholder {placeholder:?}")]
    Unresolved {
        template: TemplateName,
        placeholder: String,
    },
}

/// A named instruction with optional few-shot examples and declared slots.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub instruction: String,
    pub fewshot: Vec<(String, String)>,
    pub slots: BTreeSet<String>,
    pub note: Option<String>,
}

impl PromptTemplate {
    /// Parse one template asset.
    pub fn parse_asset(text: &str) -> Result<Self, PromptError> {
        let bad = |reason: &str| PromptError::BadAsset {
            name: first_name(text).unwrap_or_default(),
            reason: reason.to_string(),
        };

        let (header, rest) = text
            .split_once("\n---\n")
            .ok_or_else(|| bad("missing `---` front-matter terminator"))?;

        let mut name = None;
        let mut slots = BTreeSet::new();
        let mut note = None;
        for line in header.lines() {
            let Some((key, value)) = line.split_once(':') else {
                return Err(bad(&format!("bad front-matter line {line:?}")));
            };
            match key.trim() {
                "name" => name = TemplateName::parse(value.trim()),
                "slots" => {
                    slots = value
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect();
                }
                "note" => note = Some(value.trim().to_string()),
                other => return Err(bad(&format!("unknown front-matter key {other:?}"))),
            }
        }
        let name = name.ok_or_else(|| bad("missing or unknown template name"))?;

        let (body, fewshot_text) = match rest.find("===in===") {
            Some(pos) => (&rest[..pos], Some(&rest[pos..])),
            None => (rest, None),
        };
        let instruction = body.trim_end().trim_start_matches('\n').to_string();

        let mut fewshot = Vec::new();
        if let Some(pairs) = fewshot_text {
            for chunk in pairs.split("===in===").skip(1) {
                let (input, output) = chunk
                    .split_once("===out===")
                    .ok_or_else(|| bad("few-shot input without ===out=== block"))?;
                fewshot.push((input.trim().to_string(), output.trim().to_string()));
            }
        }

        let template = PromptTemplate {
            name,
            instruction,
            fewshot,
            slots,
            note,
        };
        template.validate()?;
        Ok(template)
    }

    fn validate(&self) -> Result<(), PromptError> {
        let bad = |reason: String| PromptError::BadAsset {
            name: self.name.as_str().to_string(),
            reason,
        };
        for placeholder in placeholders(&self.instruction) {
            if placeholder != "examples" && !self.slots.contains(&placeholder) {
                return Err(bad(format!("undeclared placeholder {placeholder:?}")));
            }
        }
        let n = self.fewshot.len();
        match self.name {
            TemplateName::Afs if n != 6 => Err(bad(format!("afs needs 6 examples, has {n}"))),
            TemplateName::Azs if n != 0 => Err(bad(format!("azs must be zero-shot, has {n}"))),
            TemplateName::GenUnified if n < 4 => {
                Err(bad(format!("gen_unified needs at least 4 examples, has {n}")))
            }
            _ => Ok(()),
        }
    }

    /// The rendered few-shot block: `input\noutput` pairs separated by
    /// blank lines. Empty for zero-shot templates.
    pub fn examples_block(&self) -> String {
        self.fewshot
            .iter()
            .map(|(input, output)| format!("{input}\n{output}"))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

fn first_name(text: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix("name:"))
        .map(|v| v.trim().to_string())
}

/// All `{ident}` placeholders appearing in `text`.
fn placeholders(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > start && j < bytes.len() && bytes[j] == b'}' {
                out.push(text[start..j].to_string());
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// A fully assembled prompt; `final_text` contains no unresolved
/// placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_name: TemplateName,
    pub final_text: String,
    pub item_id: String,
}

/// The bundled, immutable template set.
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> &'static TemplateSet {
        static BUILTIN: OnceLock<TemplateSet> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            let templates = ASSETS
                .iter()
                .map(|text| PromptTemplate::parse_asset(text).expect("bundled template parses"))
                .collect();
            TemplateSet { templates }
        })
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        self.templates
            .iter()
            .find(|t| t.name == name)
            .expect("all template names are bundled")
    }
}

/// Render an item's options one per line as `<letter>. <text>` in
/// canonical order.
pub fn option_lines(item: &McqItem) -> String {
    item.options
        .iter()
        .map(|(label, text)| format!("{label}. {text}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The full textual form of an MCQ item: stem plus option lines. This is
/// what the translation and refinement stages receive.
pub fn mcq_block(item: &McqItem) -> String {
    format!("{}\n{}", item.stem, option_lines(item))
}

fn finalize(
    template: &PromptTemplate,
    text: String,
    item_id: &str,
) -> Result<RenderedPrompt, PromptError> {
    // collapse the blank hole a zero-shot {examples} leaves behind
    let mut out = String::with_capacity(text.len());
    let mut newlines = 0;
    for c in text.chars() {
        if c == '\n' {
            newlines += 1;
            if newlines > 2 {
                continue;
            }
        } else {
            newlines = 0;
        }
        out.push(c);
    }
    let out = out.trim().to_string();
    if let Some(placeholder) = placeholders(&out).into_iter().next() {
        return Err(PromptError::Unresolved {
            template: template.name,
            placeholder,
        });
    }
    Ok(RenderedPrompt {
        template_name: template.name,
        final_text: out,
        item_id: item_id.to_string(),
    })
}

/// Render an MCQ template (`afs` or `azs`): few-shot block first, then the
/// item with options in canonical order and the single-letter directive.
pub fn render_mcq(template: &PromptTemplate, item: &McqItem) -> Result<RenderedPrompt, PromptError> {
    for slot in &template.slots {
        if slot != "stem" && slot != "options" {
            return Err(PromptError::MissingSlot {
                template: template.name,
                slot: slot.clone(),
            });
        }
    }
    let text = template
        .instruction
        .replace("{examples}", &template.examples_block())
        .replace("{stem}", &item.stem)
        .replace("{options}", &option_lines(item));
    finalize(template, text, &item.id)
}

/// Render a free-form template by substituting its single `content` slot.
pub fn render_free(
    template: &PromptTemplate,
    content: &str,
    item_id: &str,
) -> Result<RenderedPrompt, PromptError> {
    if !template.name.is_free_form() {
        return Err(PromptError::NotFreeForm {
            template: template.name,
        });
    }
    for slot in &template.slots {
        if slot != "content" {
            return Err(PromptError::MissingSlot {
                template: template.name,
                slot: slot.clone(),
            });
        }
    }
    let text = template
        .instruction
        .replace("{examples}", &template.examples_block())
        .replace("{content}", content);
    finalize(template, text, item_id)
}
