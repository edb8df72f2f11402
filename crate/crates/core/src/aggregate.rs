//! Fusion of snippet-level scores into one per-image vector, and the final
//! pseudo-label vector.
//!
//! `minmax` keeps, per class, the best snippet score when it clears the
//! threshold and the worst snippet score otherwise. `avg` and `max` pool the
//! global vector together with the snippets and serve as baselines.

use std::fmt;
use std::str::FromStr;

use crate::alignment::{ScoreKind, SimilarityVector};
use crate::error::{Error, Result};

pub const DEFAULT_ZETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Global vector only; no snippets.
    Global,
    Avg,
    Max,
    /// Thresholded min-max over snippets, then averaged with the global vector.
    MinMax,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Global, Strategy::Avg, Strategy::Max, Strategy::MinMax];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Global => "global",
            Strategy::Avg => "avg",
            Strategy::Max => "max",
            Strategy::MinMax => "minmax",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Strategy::Global),
            "avg" => Ok(Strategy::Avg),
            "max" => Ok(Strategy::Max),
            "minmax" => Ok(Strategy::MinMax),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected global, avg, max or minmax)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationConfig {
    pub zeta: f64,
    pub strategy: Strategy,
}

impl AggregationConfig {
    pub fn new(zeta: f64, strategy: Strategy) -> Result<Self> {
        if !(0.0..=1.0).contains(&zeta) {
            return Err(Error::Config(format!("zeta must lie in [0, 1], got {zeta}")));
        }
        Ok(AggregationConfig { zeta, strategy })
    }
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            zeta: DEFAULT_ZETA,
            strategy: Strategy::MinMax,
        }
    }
}

fn check_pool<'a>(
    vectors: impl IntoIterator<Item = &'a SimilarityVector>,
) -> Result<(usize, &'a str)> {
    let mut iter = vectors.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Invalid("cannot aggregate an empty list of vectors".into()))?;
    let c = first.num_classes();
    for v in iter {
        if v.num_classes() != c {
            return Err(Error::Dimension {
                what: "class count in aggregation",
                expected: c,
                got: v.num_classes(),
            });
        }
    }
    Ok((c, &first.image_id))
}

fn aggregate_vector(image_id: &str, scores: Vec<f64>) -> SimilarityVector {
    SimilarityVector {
        scores,
        kind: ScoreKind::Aggregate,
        image_id: image_id.to_string(),
        snippet: None,
    }
}

/// Thresholded min-max over the snippet vectors.
pub fn aggregate_minmax(locals: &[SimilarityVector], zeta: f64) -> Result<SimilarityVector> {
    let (c, id) = check_pool(locals)?;
    let scores = (0..c)
        .map(|i| {
            let (lo, hi) = locals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v.scores[i]), hi.max(v.scores[i]))
            });
            if hi >= zeta {
                hi
            } else {
                lo
            }
        })
        .collect();
    Ok(aggregate_vector(id, scores))
}

/// Elementwise mean over the snippet vectors and the global vector.
pub fn aggregate_avg(locals: &[SimilarityVector], global: &SimilarityVector) -> Result<SimilarityVector> {
    let pool: Vec<&SimilarityVector> = locals.iter().chain(std::iter::once(global)).collect();
    let (c, _) = check_pool(pool.iter().copied())?;
    let n = pool.len() as f64;
    let scores = (0..c)
        .map(|i| pool.iter().map(|v| v.scores[i]).sum::<f64>() / n)
        .collect();
    Ok(aggregate_vector(&global.image_id, scores))
}

/// Elementwise max over the snippet vectors and the global vector.
pub fn aggregate_max(locals: &[SimilarityVector], global: &SimilarityVector) -> Result<SimilarityVector> {
    let pool: Vec<&SimilarityVector> = locals.iter().chain(std::iter::once(global)).collect();
    let (c, _) = check_pool(pool.iter().copied())?;
    let scores = (0..c)
        .map(|i| pool.iter().map(|v| v.scores[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(aggregate_vector(&global.image_id, scores))
}

/// Elementwise mean of the global and aggregate vectors.
pub fn final_pseudo_labels(
    global: &SimilarityVector,
    aggregate: &SimilarityVector,
) -> Result<SimilarityVector> {
    if global.kind != ScoreKind::Global || aggregate.kind != ScoreKind::Aggregate {
        return Err(Error::Invalid(format!(
            "final labels need (global, aggregate) vectors, got ({}, {})",
            global.kind, aggregate.kind
        )));
    }
    if global.num_classes() != aggregate.num_classes() {
        return Err(Error::Dimension {
            what: "class count",
            expected: global.num_classes(),
            got: aggregate.num_classes(),
        });
    }
    let scores = global
        .scores
        .iter()
        .zip(&aggregate.scores)
        .map(|(g, a)| 0.5 * (g + a))
        .collect();
    Ok(SimilarityVector {
        scores,
        kind: ScoreKind::Final,
        image_id: global.image_id.clone(),
        snippet: None,
    })
}

/// Per-image pseudo-label scores under `config.strategy`.
///
/// `MinMax` yields the averaged final vector; the baselines and `Global`
/// are returned as-is, relabelled as final.
pub fn pseudo_label_scores(
    global: &SimilarityVector,
    locals: &[SimilarityVector],
    config: &AggregationConfig,
) -> Result<SimilarityVector> {
    let mut out = match config.strategy {
        Strategy::MinMax => {
            let agg = aggregate_minmax(locals, config.zeta)?;
            return final_pseudo_labels(global, &agg);
        }
        Strategy::Global => global.clone(),
        Strategy::Avg => aggregate_avg(locals, global)?,
        Strategy::Max => aggregate_max(locals, global)?,
    };
    out.kind = ScoreKind::Final;
    out.snippet = None;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn local(scores: &[f64]) -> SimilarityVector {
        SimilarityVector {
            scores: scores.to_vec(),
            kind: ScoreKind::Local,
            image_id: "img".into(),
            snippet: Some(0),
        }
    }

    fn global(scores: &[f64]) -> SimilarityVector {
        SimilarityVector {
            kind: ScoreKind::Global,
            snippet: None,
            ..local(scores)
        }
    }

    #[test]
    fn minmax_takes_max_above_threshold() {
        let locals = [local(&[0.7]), local(&[0.1]), local(&[0.2])];
        assert_eq!(aggregate_minmax(&locals, 0.5).unwrap().scores, vec![0.7]);
    }

    #[test]
    fn minmax_takes_min_below_threshold() {
        let locals = [local(&[0.3]), local(&[0.1]), local(&[0.2])];
        assert_eq!(aggregate_minmax(&locals, 0.5).unwrap().scores, vec![0.1]);
    }

    #[test]
    fn minmax_threshold_is_inclusive() {
        let locals = [local(&[0.5]), local(&[0.1])];
        assert_eq!(aggregate_minmax(&locals, 0.5).unwrap().scores, vec![0.5]);
    }

    #[test]
    fn empty_pool_is_an_error() {
        assert!(aggregate_minmax(&[], 0.5).is_err());
    }

    #[test]
    fn avg_and_max_include_global() {
        let g = global(&[0.6, 0.4]);
        let locals = [local(&[0.2, 0.8])];
        let avg = aggregate_avg(&locals, &g).unwrap().scores;
        assert!((avg[0] - 0.4).abs() < 1e-15 && (avg[1] - 0.6).abs() < 1e-15);
        assert_eq!(aggregate_max(&locals, &g).unwrap().scores, vec![0.6, 0.8]);
        let same = [local(&[0.6, 0.4])];
        assert_eq!(aggregate_avg(&same, &g).unwrap().scores, g.scores);
    }

    #[test]
    fn final_is_the_mean() {
        let g = global(&[0.6, 0.4]);
        let mut agg = aggregate_minmax(&[local(&[0.8, 0.0])], 0.5).unwrap();
        let f = final_pseudo_labels(&g, &agg).unwrap();
        assert!((f.scores[0] - 0.7).abs() < 1e-15 && (f.scores[1] - 0.2).abs() < 1e-15);
        agg.scores = g.scores.clone();
        assert_eq!(final_pseudo_labels(&g, &agg).unwrap().scores, g.scores);
        assert!(final_pseudo_labels(&agg, &g).is_err());
    }

    #[test]
    fn zeta_outside_unit_interval_is_rejected() {
        assert!(AggregationConfig::new(1.5, Strategy::MinMax).is_err());
        assert!(AggregationConfig::new(-0.1, Strategy::MinMax).is_err());
    }
}
