//! Image-text alignment: cosine similarity against every class prompt
//! followed by a temperature-scaled softmax over classes.

use std::fmt;

use crate::embedding::{EmbeddingRecord, TextEmbeddingMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Whole image, softmax-normalized.
    Global,
    /// One snippet, softmax-normalized.
    Local,
    /// Fused snippet scores.
    Aggregate,
    /// Average of global and aggregate; the initial pseudo label.
    Final,
}

impl ScoreKind {
    pub fn is_normalized(self) -> bool {
        matches!(self, ScoreKind::Global | ScoreKind::Local)
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Global => "global",
            ScoreKind::Local => "local",
            ScoreKind::Aggregate => "aggregate",
            ScoreKind::Final => "final",
        })
    }
}

/// Per-class scores for one image or one snippet of it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    pub scores: Vec<f64>,
    pub kind: ScoreKind,
    pub image_id: String,
    pub snippet: Option<usize>,
}

impl SimilarityVector {
    pub fn num_classes(&self) -> usize {
        self.scores.len()
    }

    pub fn argmax(&self) -> usize {
        self.scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &s)| if s > best.1 { (i, s) } else { best })
            .0
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity, accumulated in f64.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "cosine operands",
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Softmax of `raw / tau`, max-subtracted.
pub fn class_softmax(raw: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Invalid(format!("temperature must be > 0, got {tau}")));
    }
    if raw.is_empty() {
        return Err(Error::Invalid("softmax over zero classes".into()));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("non-finite similarity score".into()));
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn class_scores(embedding: &[f32], text: &TextEmbeddingMatrix, tau: f64) -> Result<Vec<f64>> {
    if embedding.len() != text.dim() {
        return Err(Error::Dimension {
            what: "image vs text embedding width",
            expected: text.dim(),
            got: embedding.len(),
        });
    }
    let raw = text
        .rows()
        .map(|w| cosine(embedding, w))
        .collect::<Result<Vec<_>>>()?;
    class_softmax(&raw, tau)
}

pub fn global_similarity(
    record: &EmbeddingRecord,
    text: &TextEmbeddingMatrix,
    tau: f64,
) -> Result<SimilarityVector> {
    Ok(SimilarityVector {
        scores: class_scores(&record.global, text, tau)?,
        kind: ScoreKind::Global,
        image_id: record.image_id.clone(),
        snippet: None,
    })
}

/// One vector per snippet, row-major.
pub fn local_similarities(
    record: &EmbeddingRecord,
    text: &TextEmbeddingMatrix,
    tau: f64,
) -> Result<Vec<SimilarityVector>> {
    if record.snippet_count() == 0 {
        return Err(Error::Invalid(format!("{} has no snippets", record.image_id)));
    }
    record
        .snippet_embeddings()
        .enumerate()
        .map(|(j, g)| {
            Ok(SimilarityVector {
                scores: class_scores(g, text, tau)?,
                kind: ScoreKind::Local,
                image_id: record.image_id.clone(),
                snippet: Some(j),
            })
        })
        .collect()
}
