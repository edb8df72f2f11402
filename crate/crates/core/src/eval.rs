//! Ranking metrics for multi-label scores: per-class AP, mAP and score
//! histograms.
//!
//! AP is the mean, over positives, of the precision at each positive's rank.
//! Scores are ranked in descending order with a stable sort, so tied scores
//! keep their input order.

use std::fmt::Write as _;

use serde::Serialize;

use crate::aggregate::{self, AggregationConfig, Strategy};
use crate::alignment::SimilarityVector;
use crate::embedding::EmbeddingCache;
use crate::error::{Error, Result};
use crate::pipeline::{self, ImageScores};
use crate::pseudo::PseudoLabelSet;

/// Binary ground truth, one row per image. Only ever read for evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthSet {
    pub class_names: Vec<String>,
    pub image_ids: Vec<String>,
    /// Row-major `image_ids.len() x class_names.len()`, entries 0 or 1.
    pub labels: Vec<u8>,
}

impl GroundTruthSet {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn row(&self, m: usize) -> &[u8] {
        let c = self.num_classes();
        &self.labels[m * c..(m + 1) * c]
    }

    pub fn column(&self, class: usize) -> Vec<bool> {
        (0..self.len())
            .map(|m| self.labels[m * self.num_classes() + class] == 1)
            .collect()
    }

    /// Reorders rows to follow `ids`; every id must be present.
    pub fn aligned_to(&self, ids: &[String]) -> Result<GroundTruthSet> {
        let index: std::collections::HashMap<&str, usize> = self
            .image_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut labels = Vec::with_capacity(ids.len() * self.num_classes());
        for id in ids {
            let m = *index
                .get(id.as_str())
                .ok_or_else(|| Error::Invalid(format!("no annotation for image {id:?}")))?;
            labels.extend_from_slice(self.row(m));
        }
        Ok(GroundTruthSet {
            class_names: self.class_names.clone(),
            image_ids: ids.to_vec(),
            labels,
        })
    }
}

/// Average precision of one class, or `None` when it has no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            what: "scores vs labels",
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / positives as f64))
}

/// Mean over the classes that have an AP.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    let included: Vec<f64> = aps.iter().flatten().copied().collect();
    if included.is_empty() {
        None
    } else {
        Some(included.iter().sum::<f64>() / included.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Counts over `bins` uniform bins on [0, 1]; 1.0 lands in the last bin and
/// out-of-range values in the nearest end bin.
pub fn score_histogram(scores: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let edges = (0..=bins).map(|b| b as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for &s in scores {
        if s.is_nan() {
            return Err(Error::Invalid("NaN score".into()));
        }
        let b = ((s * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassResult {
    pub class: String,
    /// `None` when the class has no positives in the evaluated split.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub label: String,
    pub classes: Vec<ClassResult>,
    pub map: Option<f64>,
    pub excluded: Vec<String>,
}

impl EvaluationReport {
    pub fn aps(&self) -> Vec<Option<f64>> {
        self.classes.iter().map(|c| c.ap).collect()
    }

    pub fn render_table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.class.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        writeln!(out, "# {}", self.label).unwrap();
        writeln!(out, "{:<width$}  {:>7}", "class", "AP").unwrap();
        for c in &self.classes {
            let ap = c.ap.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
            writeln!(out, "{:<width$}  {:>7}", c.class, ap).unwrap();
        }
        let map = self.map.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        writeln!(out, "{:<width$}  {:>7}", "mAP", map).unwrap();
        if !self.excluded.is_empty() {
            writeln!(out, "excluded (no positives): {}", self.excluded.join(", ")).unwrap();
        }
        out
    }
}

/// Scores every class column of `scores` (row-major `M x C`, rows aligned
/// with `truth`) against the ground truth.
pub fn evaluate_scores(label: &str, scores: &[f64], truth: &GroundTruthSet) -> Result<EvaluationReport> {
    let c = truth.num_classes();
    if scores.len() != truth.len() * c {
        return Err(Error::Dimension {
            what: "score matrix",
            expected: truth.len() * c,
            got: scores.len(),
        });
    }
    let mut classes = Vec::with_capacity(c);
    let mut excluded = Vec::new();
    for (i, name) in truth.class_names.iter().enumerate() {
        let column: Vec<f64> = (0..truth.len()).map(|m| scores[m * c + i]).collect();
        let ap = average_precision(&column, &truth.column(i))?;
        if ap.is_none() {
            excluded.push(name.clone());
        }
        classes.push(ClassResult {
            class: name.clone(),
            ap,
        });
    }
    let map = mean_ap(&classes.iter().map(|c| c.ap).collect::<Vec<_>>());
    Ok(EvaluationReport {
        label: label.to_string(),
        classes,
        map,
        excluded,
    })
}

/// Treats pseudo-label scores as rankings and measures them against the
/// ground truth. `vectors` need not be in ground-truth order.
pub fn pseudo_label_quality(label: &str, vectors: &[SimilarityVector], truth: &GroundTruthSet) -> Result<EvaluationReport> {
    let ids: Vec<String> = vectors.iter().map(|v| v.image_id.clone()).collect();
    let truth = truth.aligned_to(&ids)?;
    let scores: Vec<f64> = vectors.iter().flat_map(|v| v.scores.iter().copied()).collect();
    evaluate_scores(label, &scores, &truth)
}

/// Same as [`pseudo_label_quality`] for a latent pseudo-label set.
pub fn pseudo_set_quality(label: &str, set: &PseudoLabelSet, truth: &GroundTruthSet) -> Result<EvaluationReport> {
    let truth = truth.aligned_to(set.ids())?;
    evaluate_scores(label, &set.prob_matrix(), &truth)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: String,
    pub map: Option<f64>,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub zeta: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, strategy: Strategy) -> Option<&AblationRow> {
        let name = strategy.to_string();
        self.rows.iter().find(|r| r.strategy == name)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<10}  {:>7}", "strategy", "mAP").unwrap();
        for r in &self.rows {
            let map = r.map.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
            writeln!(out, "{:<10}  {:>7}", r.strategy, map).unwrap();
        }
        writeln!(out, "zeta = {}", self.zeta).unwrap();
        out
    }
}

/// Pseudo-label mAP for each aggregation strategy over one cache.
pub fn ablation_report(
    cache: &EmbeddingCache,
    truth: &GroundTruthSet,
    strategies: &[Strategy],
    zeta: f64,
) -> Result<AblationTable> {
    let scores = pipeline::align_all(cache)?;
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let config = AggregationConfig::new(zeta, strategy)?;
        let vectors = pipeline::pseudo_label_vectors(&scores, &config)?;
        let report = pseudo_label_quality(&strategy.to_string(), &vectors, truth)?;
        rows.push(AblationRow {
            strategy: strategy.to_string(),
            map: report.map,
            report,
        });
    }
    Ok(AblationTable { zeta, rows })
}

/// Histogram of one class's per-image scores, tagged with its source.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassHistogram {
    pub class: String,
    pub source: String,
    pub histogram: Histogram,
}

/// Per-class histograms of whole-image scores and of fused snippet scores.
pub fn score_histograms(scores: &[ImageScores], class_names: &[String], zeta: f64, bins: usize) -> Result<Vec<ClassHistogram>> {
    let aggregates = scores
        .iter()
        .map(|s| aggregate::aggregate_minmax(&s.locals, zeta))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(2 * class_names.len());
    for (i, name) in class_names.iter().enumerate() {
        let global: Vec<f64> = scores.iter().map(|s| s.global.scores[i]).collect();
        let local: Vec<f64> = aggregates.iter().map(|a| a.scores[i]).collect();
        out.push(ClassHistogram {
            class: name.clone(),
            source: "global".into(),
            histogram: score_histogram(&global, bins)?,
        });
        out.push(ClassHistogram {
            class: name.clone(),
            source: "local".into(),
            histogram: score_histogram(&local, bins)?,
        });
    }
    Ok(out)
}

/// Tab-separated `class source bin_lo bin_hi count` records.
pub fn render_histograms(histograms: &[ClassHistogram]) -> String {
    let mut out = String::from("class\tsource\tbin_lo\tbin_hi\tcount\n");
    for h in histograms {
        for (b, count) in h.histogram.counts.iter().enumerate() {
            writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.4}\t{}",
                h.class,
                h.source,
                h.histogram.edges[b],
                h.histogram.edges[b + 1],
                count
            )
            .unwrap();
        }
    }
    out
}
