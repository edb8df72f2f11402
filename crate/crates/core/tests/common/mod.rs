//! Brute-force oracles and planted-dataset fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softlabel::alignment::{ScoreKind, SimilarityVector};
use softlabel::embedding::{EmbeddingCache, DEFAULT_TEMPLATE};
use softlabel::eval::GroundTruthSet;
use softlabel::pipeline;
use softlabel::planted::{self, PlantedConfig, PlantedEncoder, Scene, SceneConfig};
use softlabel::snippet::GridShape;

/// Per class: sort the snippet column, take the top if it clears `zeta`,
/// else the bottom.
pub fn minmax_oracle(locals: &[Vec<f64>], zeta: f64) -> Vec<f64> {
    let c = locals[0].len();
    (0..c)
        .map(|i| {
            let mut col: Vec<f64> = locals.iter().map(|v| v[i]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (lo, hi) = (col[0], col[col.len() - 1]);
            if hi >= zeta {
                hi
            } else {
                lo
            }
        })
        .collect()
}

/// Mean over snippets then global, summed left to right.
pub fn avg_oracle(locals: &[Vec<f64>], global: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(global.len());
    for i in 0..global.len() {
        let mut sum = 0.0;
        for v in locals {
            sum += v[i];
        }
        sum += global[i];
        out.push(sum / (locals.len() + 1) as f64);
    }
    out
}

pub fn max_oracle(locals: &[Vec<f64>], global: &[f64]) -> Vec<f64> {
    (0..global.len())
        .map(|i| {
            let mut best = global[i];
            for v in locals {
                if v[i] > best {
                    best = v[i];
                }
            }
            best
        })
        .collect()
}

/// AP by explicit rank enumeration: an item's rank counts every item with a
/// strictly higher score plus tied items listed before it.
pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let rank = |i: usize| {
        1 + (0..scores.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let r = rank(i);
            let hits = positives.iter().filter(|&&j| rank(j) <= r).count();
            hits as f64 / r as f64
        })
        .sum();
    Some(total / positives.len() as f64)
}

/// Bernoulli KL summed directly from its definition, averaged over classes.
pub fn kl_oracle(y_p: &[f64], y_u: &[f64]) -> f64 {
    let mut total = 0.0;
    for (p, u) in y_p.iter().zip(y_u) {
        total += u * (u / p).ln() + (1.0 - u) * ((1.0 - u) / (1.0 - p)).ln();
    }
    total / y_p.len() as f64
}

/// Central finite difference of `f` in coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Random softmax-like vector: positive entries summing to one.
pub fn random_simplex(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>().powi(3) + 1e-9).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

pub fn vector(scores: Vec<f64>, kind: ScoreKind, snippet: Option<usize>) -> SimilarityVector {
    SimilarityVector {
        scores,
        kind,
        image_id: "img".into(),
        snippet,
    }
}

/// A seeded planted dataset held in memory.
pub struct PlantedRun {
    pub vocab: Vec<String>,
    pub encoder: PlantedEncoder,
    pub scenes: Vec<Scene>,
    pub cache: EmbeddingCache,
    pub truth: GroundTruthSet,
}

impl PlantedRun {
    pub fn new(classes: usize, count: usize, encoder_seed: u64, scene_seed: u64, id_prefix: &str) -> Self {
        let vocab = planted::class_vocabulary(classes);
        let encoder = PlantedEncoder::new(
            &vocab,
            PlantedConfig {
                seed: encoder_seed,
                ..PlantedConfig::default()
            },
        )
        .unwrap();
        let scenes = planted::generate_scenes(
            &encoder,
            &SceneConfig {
                count,
                seed: scene_seed,
                ..SceneConfig::default()
            },
        );
        let ids: Vec<String> = scenes.iter().map(|s| format!("{id_prefix}{}", s.id)).collect();
        let cache = pipeline::build_cache(
            &encoder,
            &ids,
            |m| Ok(scenes[m].image.clone()),
            GridShape::default(),
            &vocab,
            DEFAULT_TEMPLATE,
        )
        .unwrap();
        let truth = GroundTruthSet {
            class_names: vocab.clone(),
            image_ids: ids,
            labels: scenes.iter().flat_map(|s| s.labels.clone()).collect(),
        };
        PlantedRun {
            vocab,
            encoder,
            scenes,
            cache,
            truth,
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
