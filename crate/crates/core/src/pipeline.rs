//! Batch glue: encode a dataset into a cache, and turn a cache into
//! per-image similarity and pseudo-label vectors.

use image::RgbImage;
use rayon::prelude::*;

use crate::aggregate::{self, AggregationConfig};
use crate::alignment::{self, SimilarityVector};
use crate::embedding::{self, EmbeddingCache, EmbeddingRecord, Encoder};
use crate::error::Result;
use crate::pseudo::ScoreTable;
use crate::snippet::GridShape;

/// Encodes every image and snippet, in parallel across images.
pub fn encode_images<F>(encoder: &dyn Encoder, ids: &[String], load: F, grid: GridShape) -> Result<Vec<EmbeddingRecord>>
where
    F: Fn(usize) -> Result<RgbImage> + Sync,
{
    ids.par_iter()
        .enumerate()
        .map(|(m, id)| embedding::encode_record(encoder, id, &load(m)?, grid))
        .collect()
}

pub fn build_cache<F>(
    encoder: &dyn Encoder,
    ids: &[String],
    load: F,
    grid: GridShape,
    vocabulary: &[String],
    template: &str,
) -> Result<EmbeddingCache>
where
    F: Fn(usize) -> Result<RgbImage> + Sync,
{
    let text = embedding::encode_class_prompts(encoder, vocabulary, template)?;
    let records = encode_images(encoder, ids, load, grid)?;
    Ok(EmbeddingCache {
        encoder_id: encoder.identity().to_string(),
        tau: encoder.temperature(),
        records,
        text,
    })
}

/// Global vector and row-major snippet vectors of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub global: SimilarityVector,
    pub locals: Vec<SimilarityVector>,
}

pub fn align_all(cache: &EmbeddingCache) -> Result<Vec<ImageScores>> {
    cache
        .records
        .par_iter()
        .map(|r| {
            Ok(ImageScores {
                global: alignment::global_similarity(r, &cache.text, cache.tau)?,
                locals: alignment::local_similarities(r, &cache.text, cache.tau)?,
            })
        })
        .collect()
}

/// Per-image pseudo-label vectors under `config`.
pub fn pseudo_label_vectors(scores: &[ImageScores], config: &AggregationConfig) -> Result<Vec<SimilarityVector>> {
    scores
        .par_iter()
        .map(|s| aggregate::pseudo_label_scores(&s.global, &s.locals, config))
        .collect()
}

/// Similarity dump: per image the global vector followed by every snippet
/// vector.
pub fn similarity_table(cache: &EmbeddingCache, scores: &[ImageScores]) -> ScoreTable {
    let per = 1 + scores.first().map_or(0, |s| s.locals.len());
    let values = scores
        .iter()
        .flat_map(|s| std::iter::once(&s.global).chain(&s.locals))
        .flat_map(|v| v.scores.iter().map(|&x| x as f32))
        .collect();
    ScoreTable {
        label: "similarities".into(),
        class_names: cache.text.class_names.clone(),
        image_ids: scores.iter().map(|s| s.global.image_id.clone()).collect(),
        vectors_per_image: per,
        scores: values,
    }
}
