//! Rendering of the evolution-information extraction prompt and the final
//! prediction prompt.
//!
//! Both prompts come from templates carried by the [`DatasetProfile`]; the
//! built-in templates live in `templates/`. Images are referenced in prompt
//! text by dense `<imageN>` placeholders, and every rendered prompt carries
//! the ordered list of images bound to them.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DatasetProfile, MemeRecord};
use crate::template::{Context, Template, TemplateError};

/// Largest neighbor list accepted by the extraction prompt.
pub const MAX_NEIGHBORS: usize = 16;
/// Word budget for custom definition text.
pub const WORD_BUDGET: usize = 30;
/// Inserted in place of an empty caption.
pub const EMPTY_CAPTION: &str = "[no caption]";

const EIE_VARIABLES: &[&str] = &["inputs", "amplifier", "pos", "neg"];
const EIE_SECTIONS: &[&str] = &["cra"];
const FINAL_VARIABLES: &[&str] = &["ocr", "pos", "neg", "k", "info", "captions", "amplifier"];
const FINAL_SECTIONS: &[&str] = &["cra", "evolution", "neighbors"];

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<image(\d+)>").unwrap());

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("extraction prompt needs at least one neighbor")]
    NoNeighbors,
    #[error("extraction prompt accepts at most {MAX_NEIGHBORS} neighbors, got {0}")]
    TooManyNeighbors(usize),
    #[error("evolution info and raw neighbor captions are mutually exclusive")]
    ConflictingEvidence,
    #[error("raw neighbor list is empty")]
    EmptyRawNeighbors,
    #[error("template error: {0}")]
    Template(#[from] TemplateError),
    #[error("rendered prompt has image placeholders {found:?}, expected <image0>..<image{}>", .expected.saturating_sub(1))]
    SlotMismatch { found: Vec<usize>, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Eie,
    Final,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Eie => "eie",
            Stage::Final => "final",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSlot {
    pub placeholder: String,
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub slots: Vec<ImageSlot>,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EieOptions {
    /// Include the amplifier rules block.
    pub include_rules: bool,
    /// Attach neighbor images; when false only captions are listed.
    pub include_images: bool,
}

impl Default for EieOptions {
    fn default() -> Self {
        EieOptions {
            include_rules: true,
            include_images: true,
        }
    }
}

/// Extracted evolution information and the number of memes it summarizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvolutionInfo<'a> {
    pub text: &'a str,
    pub source_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetWarning {
    pub field: String,
    pub words: usize,
}

/// Neutralizes `<imageN>` sequences in free text so they cannot be read as
/// image placeholders.
pub fn escape_placeholders(text: &str) -> String {
    PLACEHOLDER.replace_all(text, "[image$1]").into_owned()
}

fn caption(text: &str) -> String {
    if text.trim().is_empty() {
        EMPTY_CAPTION.to_string()
    } else {
        escape_placeholders(text)
    }
}

/// Ordinals of the placeholders in order of appearance.
pub fn placeholder_ordinals(text: &str) -> Vec<usize> {
    PLACEHOLDER
        .captures_iter(text)
        .map(|c| c[1].parse().unwrap_or(usize::MAX))
        .collect()
}

fn bind_slots(text: &str, images: &[&str]) -> Result<Vec<ImageSlot>, PromptError> {
    let found = placeholder_ordinals(text);
    let dense = found.len() == images.len() && {
        let mut sorted = found.clone();
        sorted.sort_unstable();
        sorted.iter().enumerate().all(|(i, &n)| i == n)
    };
    if !dense {
        return Err(PromptError::SlotMismatch {
            found,
            expected: images.len(),
        });
    }
    Ok(images
        .iter()
        .enumerate()
        .map(|(i, r)| ImageSlot {
            placeholder: format!("<image{i}>"),
            image_ref: r.to_string(),
        })
        .collect())
}

pub(crate) fn validate_templates(profile: &DatasetProfile) -> Result<(), TemplateError> {
    Template::parse(&profile.eie_instruction)?.check_names(EIE_VARIABLES, EIE_SECTIONS, &["inputs"])?;
    Template::parse(&profile.final_instruction)?.check_names(FINAL_VARIABLES, FINAL_SECTIONS, &["ocr"])?;
    Ok(())
}

/// Renders the extraction prompt over `neighbors` in retrieval order; slot
/// `i` binds neighbor `i`'s image.
pub fn build_eie_prompt(
    profile: &DatasetProfile,
    neighbors: &[&MemeRecord],
    options: EieOptions,
) -> Result<RenderedPrompt, PromptError> {
    if neighbors.is_empty() {
        return Err(PromptError::NoNeighbors);
    }
    if neighbors.len() > MAX_NEIGHBORS {
        return Err(PromptError::TooManyNeighbors(neighbors.len()));
    }
    let inputs = neighbors
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let cap = caption(&rec.ocr_text);
            if options.include_images {
                format!("image {i} : <image{i}>, caption {i} : {cap}")
            } else {
                format!("caption {i} : {cap}")
            }
        })
        .collect::<Vec<_>>()
        .join(", ");
    let amplifier = escape_placeholders(&profile.amplifier_text);
    let ctx = Context::default()
        .var("inputs", &inputs)
        .var("amplifier", &amplifier)
        .var("pos", &profile.positive_word)
        .var("neg", &profile.negative_word)
        .flag("cra", options.include_rules);
    let text = Template::parse(&profile.eie_instruction)?.render(&ctx)?;
    let images: Vec<&str> = if options.include_images {
        neighbors.iter().map(|r| r.image_ref.as_str()).collect()
    } else {
        Vec::new()
    };
    let slots = bind_slots(&text, &images)?;
    Ok(RenderedPrompt {
        text,
        slots,
        stage: Stage::Eie,
    })
}

/// Renders the final prediction prompt for `target`.
///
/// `info` adds the evolution analysis; `raw_neighbors` instead lists the
/// neighbor captions verbatim. Supplying both is an error.
pub fn build_final_prompt(
    profile: &DatasetProfile,
    target: &MemeRecord,
    info: Option<EvolutionInfo<'_>>,
    raw_neighbors: Option<&[&MemeRecord]>,
    include_amplifier: bool,
) -> Result<RenderedPrompt, PromptError> {
    if info.is_some() && raw_neighbors.is_some() {
        return Err(PromptError::ConflictingEvidence);
    }
    if raw_neighbors.is_some_and(|n| n.is_empty()) {
        return Err(PromptError::EmptyRawNeighbors);
    }
    let ocr = caption(&target.ocr_text);
    let info_text = info.map(|i| escape_placeholders(i.text)).unwrap_or_default();
    let captions = raw_neighbors
        .map(|ns| {
            let items: Vec<String> = ns
                .iter()
                .enumerate()
                .map(|(i, r)| format!("caption {i} : {}", caption(&r.ocr_text)))
                .collect();
            format!("[{}]", items.join(", "))
        })
        .unwrap_or_default();
    let k = info
        .map(|i| i.source_count)
        .or(raw_neighbors.map(<[_]>::len))
        .unwrap_or(0)
        .to_string();
    let amplifier = escape_placeholders(&profile.amplifier_text);
    let ctx = Context::default()
        .var("ocr", &ocr)
        .var("pos", &profile.positive_word)
        .var("neg", &profile.negative_word)
        .var("k", &k)
        .var("info", &info_text)
        .var("captions", &captions)
        .var("amplifier", &amplifier)
        .flag("evolution", info.is_some())
        .flag("neighbors", raw_neighbors.is_some())
        .flag("cra", include_amplifier);
    let text = Template::parse(&profile.final_instruction)?.render(&ctx)?;
    let slots = bind_slots(&text, &[target.image_ref.as_str()])?;
    Ok(RenderedPrompt {
        text,
        slots,
        stage: Stage::Final,
    })
}

/// Warns about custom definition text longer than [`WORD_BUDGET`] words.
/// Built-in profiles are exempt.
pub fn check_instruction_budget(profile: &DatasetProfile) -> Vec<BudgetWarning> {
    if profile.is_builtin() {
        return Vec::new();
    }
    let words = profile.amplifier_text.split_whitespace().count();
    if words > WORD_BUDGET {
        vec![BudgetWarning {
            field: "amplifier_text".into(),
            words,
        }]
    } else {
        Vec::new()
    }
}
