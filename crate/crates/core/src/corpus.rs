//! Meme corpora and dataset profiles.
//!
//! A corpus file holds one JSON object per line:
//!
//! ```text
//! {"id": "42", "img": "img/42.png", "text": "caption", "label": 1, "split": "test"}
//! ```
//!
//! `label` may be `null`. Only `pool` records are indexed for retrieval;
//! `test` records are the classification targets.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt;
use crate::template::template_body;

/// Names of the built-in profiles, in display order.
pub const BUILTIN_PROFILES: [&str; 3] = ["FHM", "MAMI", "HarM"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot open corpus file {path}: {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: empty record id")]
    EmptyId { line: usize },
    #[error("line {line}: duplicate id {id:?} (first seen on line {first_line})")]
    DuplicateId {
        id: String,
        first_line: usize,
        line: usize,
    },
    #[error("line {line}: unknown split {value:?} (expected \"pool\" or \"test\")")]
    UnknownSplit { line: usize, value: String },
    #[error("line {line}: label must be 0, 1 or null, got {value}")]
    BadLabel { line: usize, value: String },
    #[error("unknown profile {name:?}; available profiles: {}", BUILTIN_PROFILES.join(", "))]
    UnknownProfile { name: String },
    #[error("invalid profile {name:?}: {reason}")]
    InvalidProfile { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pool,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pool => "pool",
            Split::Test => "test",
        })
    }
}

/// One image and its embedded caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemeRecord {
    pub id: String,
    #[serde(rename = "img")]
    pub image_ref: String,
    #[serde(rename = "text")]
    pub ocr_text: String,
    /// 1 = positive (hateful/misogynous/harmful), 0 = negative.
    pub label: Option<u8>,
    pub split: Split,
}

impl MemeRecord {
    pub fn new(id: impl Into<String>, image_ref: impl Into<String>, ocr_text: impl Into<String>) -> Self {
        MemeRecord {
            id: id.into(),
            image_ref: image_ref.into(),
            ocr_text: ocr_text.into(),
            label: None,
            split: Split::Pool,
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Per-dataset configuration: label vocabulary, hatefulness definition and
/// the two prompt templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub positive_word: String,
    pub negative_word: String,
    /// The dataset's hatefulness definition, injected by the amplifier.
    pub amplifier_text: String,
    pub eie_instruction: String,
    pub final_instruction: String,
}

impl DatasetProfile {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: String| CorpusError::InvalidProfile {
            name: self.name.clone(),
            reason,
        };
        if self.amplifier_text.trim().is_empty() {
            return Err(invalid("amplifier_text is empty".into()));
        }
        let pos = self.positive_word.to_lowercase();
        let neg = self.negative_word.to_lowercase();
        if pos.trim().is_empty() || neg.trim().is_empty() {
            return Err(invalid("label words must be nonempty".into()));
        }
        if pos == neg {
            return Err(invalid("positive and negative words are identical".into()));
        }
        // the label parser checks the negative word first, so it must either
        // end with the positive word or share no substring relation with it
        let suffix = neg.ends_with(&pos);
        let disjoint = !neg.contains(&pos) && !pos.contains(&neg);
        if !(suffix || disjoint) {
            return Err(invalid(format!(
                "negative word {:?} must end with positive word {:?} or be disjoint from it",
                self.negative_word, self.positive_word
            )));
        }
        prompt::validate_templates(self).map_err(|e| invalid(e.to_string()))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| CorpusError::Open {
            path: path.display().to_string(),
            source,
        })?;
        let profile: DatasetProfile =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| CorpusError::Malformed {
                line: e.line(),
                message: e.to_string(),
            })?;
        profile.validate()?;
        Ok(profile)
    }

    /// True when this profile is identical to the built-in profile of the
    /// same name.
    pub fn is_builtin(&self) -> bool {
        builtin_profile(&self.name).is_ok_and(|p| &p == self)
    }
}

const FHM_DEFINITION: &str = "A direct or indirect attack on people based on characteristics, including ethnicity, race, nationality, immigration status, religion, caste, sex, gender identity, sexual orientation, and disability or disease. We define attack as violent or dehumanizing (comparing people to non-human things, e.g. animals) speech, statements of inferiority, and calls for exclusion or segregation. Mocking hate crime is also considered hate speech.";

const MAMI_DEFINITION: &str = "meme is misogynous if it conceptually describes an offensive, sexist, or hateful scene (weak or strong, implicitly or explicitly) having as target a woman or a group of women. Misogyny can be expressed in the form of shaming, stereotype, objectification, and/or violence.";

const HARM_DEFINITION: &str = "Multi-modal unit consisting of an image and an embedded text that has the potential to cause harm to an individual, an organization, a community, or society";

/// Looks up a built-in profile (`FHM`, `MAMI` or `HarM`, case-insensitive).
pub fn builtin_profile(name: &str) -> Result<DatasetProfile, CorpusError> {
    let (canonical, pos, neg, def, eie, fin) = match name.to_ascii_lowercase().as_str() {
        "fhm" => (
            "FHM",
            "hateful",
            "not hateful",
            FHM_DEFINITION,
            include_str!("../templates/fhm_eie.txt"),
            include_str!("../templates/fhm_final.txt"),
        ),
        "mami" => (
            "MAMI",
            "misogynous",
            "not misogynous",
            MAMI_DEFINITION,
            include_str!("../templates/mami_eie.txt"),
            include_str!("../templates/mami_final.txt"),
        ),
        "harm" => (
            "HarM",
            "harmful",
            "not harmful",
            HARM_DEFINITION,
            include_str!("../templates/harm_eie.txt"),
            include_str!("../templates/harm_final.txt"),
        ),
        _ => {
            return Err(CorpusError::UnknownProfile {
                name: name.to_string(),
            })
        }
    };
    Ok(DatasetProfile {
        name: canonical.to_string(),
        positive_word: pos.to_string(),
        negative_word: neg.to_string(),
        amplifier_text: def.to_string(),
        eie_instruction: template_body(eie).to_string(),
        final_instruction: template_body(fin).to_string(),
    })
}

/// A loaded corpus. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    pub records: Vec<MemeRecord>,
    pub profile: DatasetProfile,
    by_id: HashMap<String, usize>,
}

impl LabeledCorpus {
    /// Builds a corpus from in-memory records, enforcing id rules.
    pub fn new(records: Vec<MemeRecord>, profile: DatasetProfile) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            if rec.id.is_empty() {
                return Err(CorpusError::EmptyId { line: i + 1 });
            }
            if let Some(&first) = by_id.get(&rec.id) {
                return Err(CorpusError::DuplicateId {
                    id: rec.id.clone(),
                    first_line: first + 1,
                    line: i + 1,
                });
            }
            by_id.insert(rec.id.clone(), i);
        }
        Ok(LabeledCorpus {
            records,
            profile,
            by_id,
        })
    }

    pub fn get(&self, id: &str) -> Option<&MemeRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn pool(&self) -> impl Iterator<Item = &MemeRecord> {
        self.records.iter().filter(|r| r.split == Split::Pool)
    }

    pub fn test(&self) -> impl Iterator<Item = &MemeRecord> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the records back out in corpus-file form.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut out = BufWriter::new(File::create(path)?);
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

// Loose line shape so that split and label errors carry line numbers.
#[derive(Deserialize)]
struct RawRecord {
    id: String,
    img: String,
    text: String,
    label: Option<serde_json::Value>,
    split: String,
}

/// Resolves a built-in profile name, or else a path to a profile JSON file.
pub fn resolve_profile(name_or_path: &str) -> Result<DatasetProfile, CorpusError> {
    match builtin_profile(name_or_path) {
        Err(CorpusError::UnknownProfile { .. }) if Path::new(name_or_path).is_file() => {
            DatasetProfile::from_json_file(name_or_path)
        }
        other => other,
    }
}

/// Loads a corpus file with a profile given by built-in name or file path.
pub fn load_corpus(path: impl AsRef<Path>, profile: &str) -> Result<LabeledCorpus, CorpusError> {
    load_corpus_with_profile(path, resolve_profile(profile)?)
}

pub fn load_corpus_with_profile(
    path: impl AsRef<Path>,
    profile: DatasetProfile,
) -> Result<LabeledCorpus, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Open {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.id.is_empty() {
            return Err(CorpusError::EmptyId { line: line_no });
        }
        if let Some(&first) = first_line.get(&raw.id) {
            return Err(CorpusError::DuplicateId {
                id: raw.id,
                first_line: first,
                line: line_no,
            });
        }
        let split = match raw.split.as_str() {
            "pool" => Split::Pool,
            "test" => Split::Test,
            other => {
                return Err(CorpusError::UnknownSplit {
                    line: line_no,
                    value: other.to_string(),
                })
            }
        };
        let label = match raw.label {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => match v.as_u64() {
                Some(l @ (0 | 1)) => Some(l as u8),
                _ => {
                    return Err(CorpusError::BadLabel {
                        line: line_no,
                        value: v.to_string(),
                    })
                }
            },
        };
        first_line.insert(raw.id.clone(), line_no);
        records.push(MemeRecord {
            id: raw.id,
            image_ref: raw.img,
            ocr_text: raw.text,
            label,
            split,
        });
    }
    LabeledCorpus::new(records, profile)
}
