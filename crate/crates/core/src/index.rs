//! Embedding fusion and exact top-K cosine retrieval over the meme pool.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledCorpus;

/// Number of neighbors retrieved when none is configured.
pub const DEFAULT_K: usize = 5;
/// Embedding width of the reference encoder.
pub const DEFAULT_DIM: usize = 768;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding has no entries")]
    Empty,
    #[error("embedding entry {position} is not finite")]
    NonFinite { position: usize },
    #[error("zero-norm vector{}", .id.as_ref().map(|i| format!(" for id {i:?}")).unwrap_or_default())]
    ZeroNorm { id: Option<String> },
    #[error("missing {modality} embedding for pool id {id:?}")]
    MissingEmbedding { id: String, modality: &'static str },
    #[error("duplicate id {0:?} in index")]
    DuplicateId(String),
    #[error("invalid fusion weights {text}:{image} (must be nonnegative with positive sum)")]
    InvalidFusion { text: f32, image: f32 },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("not an embedding index file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("inconsistent file: {0}")]
    Inconsistent(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for IndexError {
    fn from(e: std::io::Error) -> Self {
        IndexError::Io(e.to_string())
    }
}

/// A dense float32 embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, IndexError> {
        if values.is_empty() {
            return Err(IndexError::Empty);
        }
        if let Some(position) = values.iter().position(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite { position });
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = IndexError;

    fn try_from(values: Vec<f32>) -> Result<Self, Self::Error> {
        EmbeddingVector::new(values)
    }
}

/// Text/image mixing weights. Weights are rescaled to sum to one before use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub text_weight: f32,
    pub image_weight: f32,
    pub normalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            text_weight: 4.0,
            image_weight: 1.0,
            normalize: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), IndexError> {
        let (t, i) = (self.text_weight, self.image_weight);
        if !(t.is_finite() && i.is_finite()) || t < 0.0 || i < 0.0 || t + i <= 0.0 {
            return Err(IndexError::InvalidFusion { text: t, image: i });
        }
        Ok(())
    }

    /// Parses a `text:image` ratio such as `4:1`.
    pub fn parse_ratio(ratio: &str) -> Option<(f32, f32)> {
        let (t, i) = ratio.split_once(':')?;
        Some((t.trim().parse().ok()?, i.trim().parse().ok()?))
    }

    fn unit_weights(&self) -> (f64, f64) {
        let t = self.text_weight as f64;
        let i = self.image_weight as f64;
        (t / (t + i), i / (t + i))
    }
}

fn norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Weighted mean of a text and an image embedding, optionally L2-normalized.
pub fn fuse(
    text: &EmbeddingVector,
    image: &EmbeddingVector,
    config: &FusionConfig,
) -> Result<EmbeddingVector, IndexError> {
    config.validate()?;
    if text.dim() != image.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: text.dim(),
            got: image.dim(),
        });
    }
    let (wt, wi) = config.unit_weights();
    let mixed: Vec<f64> = text
        .values
        .iter()
        .zip(&image.values)
        .map(|(&t, &i)| wt * t as f64 + wi * i as f64)
        .collect();
    let scale = if config.normalize {
        let n = mixed.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(IndexError::ZeroNorm { id: None });
        }
        1.0 / n
    } else {
        1.0
    };
    Ok(EmbeddingVector {
        values: mixed.into_iter().map(|v| (v * scale) as f32).collect(),
    })
}

/// Cosine similarity of two nonzero vectors of equal length.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroNorm { id: None });
    }
    Ok((dot(&a.values, &b.values) / (na * nb)).clamp(-1.0, 1.0))
}

/// One retrieval hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
}

/// Fused pool embeddings, one row per pool record, in corpus order.
#[derive(Debug, Clone)]
pub struct FusedIndex {
    ids: Vec<String>,
    matrix: Vec<f32>,
    dim: usize,
    fusion: FusionConfig,
    norms: Vec<f64>,
    positions: HashMap<String, usize>,
}

impl PartialEq for FusedIndex {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids
            && self.dim == other.dim
            && self.fusion.text_weight.to_bits() == other.fusion.text_weight.to_bits()
            && self.fusion.image_weight.to_bits() == other.fusion.image_weight.to_bits()
            && self.fusion.normalize == other.fusion.normalize
            && self.matrix.len() == other.matrix.len()
            && self
                .matrix
                .iter()
                .zip(&other.matrix)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl FusedIndex {
    /// Assembles an index from already-fused rows (row-major `matrix`).
    pub fn from_rows(
        ids: Vec<String>,
        matrix: Vec<f32>,
        dim: usize,
        fusion: FusionConfig,
    ) -> Result<Self, IndexError> {
        fusion.validate()?;
        if dim == 0 {
            return Err(IndexError::Empty);
        }
        if matrix.len() != ids.len() * dim {
            return Err(IndexError::Inconsistent(format!(
                "{} ids but {} floats for dim {dim}",
                ids.len(),
                matrix.len()
            )));
        }
        if let Some(position) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite { position });
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(IndexError::DuplicateId(id.clone()));
            }
        }
        let norms: Vec<f64> = matrix.chunks_exact(dim).map(norm).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(IndexError::ZeroNorm {
                id: Some(ids[i].clone()),
            });
        }
        Ok(FusedIndex {
            ids,
            matrix,
            dim,
            fusion,
            norms,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fusion(&self) -> FusionConfig {
        self.fusion
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// All rows, row-major.
    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    /// The `k` rows most cosine-similar to `query`, best first. Equal
    /// similarities keep index order. `exclude_id` is never returned.
    pub fn top_k(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude_id: Option<&str>,
    ) -> Result<Vec<Neighbor>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(IndexError::ZeroNorm { id: None });
        }
        let skip = exclude_id.and_then(|id| self.position(id));
        let mut scored: Vec<(f64, usize)> = self
            .matrix
            .chunks_exact(self.dim)
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(i, row)| (dot(row, query.as_slice()) / (qn * self.norms[i]), i))
            .collect();
        let rank = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
        };
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank);
        Ok(scored
            .into_iter()
            .map(|(s, i)| Neighbor {
                id: self.ids[i].clone(),
                similarity: s.clamp(-1.0, 1.0),
            })
            .collect())
    }
}

/// Fuses the text and image embeddings of every pool record, in corpus order.
pub fn build_index(
    corpus: &LabeledCorpus,
    text_embs: &HashMap<String, EmbeddingVector>,
    image_embs: &HashMap<String, EmbeddingVector>,
    config: &FusionConfig,
) -> Result<FusedIndex, IndexError> {
    config.validate()?;
    let mut ids = Vec::new();
    let mut matrix = Vec::new();
    let mut dim = None;
    for rec in corpus.pool() {
        let text = text_embs
            .get(&rec.id)
            .ok_or_else(|| IndexError::MissingEmbedding {
                id: rec.id.clone(),
                modality: "text",
            })?;
        let image = image_embs
            .get(&rec.id)
            .ok_or_else(|| IndexError::MissingEmbedding {
                id: rec.id.clone(),
                modality: "image",
            })?;
        let expected = *dim.get_or_insert(text.dim());
        for got in [text.dim(), image.dim()] {
            if got != expected {
                return Err(IndexError::DimensionMismatch { expected, got });
            }
        }
        let fused = fuse(text, image, config).map_err(|e| match e {
            IndexError::ZeroNorm { .. } => IndexError::ZeroNorm {
                id: Some(rec.id.clone()),
            },
            other => other,
        })?;
        if !config.normalize && fused.norm() == 0.0 {
            return Err(IndexError::ZeroNorm {
                id: Some(rec.id.clone()),
            });
        }
        ids.push(rec.id.clone());
        matrix.extend_from_slice(fused.as_slice());
    }
    let dim = dim.ok_or(IndexError::EmptyIndex)?;
    FusedIndex::from_rows(ids, matrix, dim, *config)
}
