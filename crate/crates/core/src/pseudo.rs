//! Soft pseudo labels held as pre-sigmoid latents.
//!
//! Latents are the source of truth: probabilities are always recomputed
//! through the sigmoid, so they stay strictly inside (0, 1) whatever the
//! update history.

use std::collections::HashSet;
use std::path::Path;

use crate::alignment::SimilarityVector;
use crate::envelope::{self, Blob, Manifest};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Latent magnitude bound. `sigmoid(±30)` is still strictly inside (0, 1)
/// in f64; beyond roughly 36.7 it rounds to exactly 1.
pub const MAX_LATENT: f64 = 30.0;

const SNAPSHOT_KIND: &str = "latent-snapshot";
const SCORE_KIND: &str = "score-table";

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    ids: Vec<String>,
    num_classes: usize,
    /// Row-major `ids.len() x num_classes`.
    latents: Vec<f64>,
    pub epoch: u64,
}

impl PseudoLabelSet {
    pub fn from_latents(ids: Vec<String>, num_classes: usize, latents: Vec<f64>, epoch: u64) -> Result<Self> {
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Invalid(format!("duplicate image id {dup:?}")));
        }
        if latents.len() != ids.len() * num_classes {
            return Err(Error::Dimension {
                what: "latent matrix",
                expected: ids.len() * num_classes,
                got: latents.len(),
            });
        }
        if latents.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("non-finite latent".into()));
        }
        Ok(PseudoLabelSet {
            ids,
            num_classes,
            latents,
            epoch,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn latents(&self) -> &[f64] {
        &self.latents
    }

    pub fn latent_row(&self, m: usize) -> &[f64] {
        &self.latents[m * self.num_classes..(m + 1) * self.num_classes]
    }

    pub(crate) fn latent_row_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.latents[m * self.num_classes..(m + 1) * self.num_classes]
    }

    /// Probabilities for image `m`, derived from its latents.
    pub fn probs(&self, m: usize) -> Vec<f64> {
        self.latent_row(m).iter().map(|&z| sigmoid(z)).collect()
    }

    /// All probabilities, row-major.
    pub fn prob_matrix(&self) -> Vec<f64> {
        self.latents.iter().map(|&z| sigmoid(z)).collect()
    }

    /// Probability column for one class across all images.
    pub fn class_column(&self, class: usize) -> Vec<f64> {
        (0..self.len())
            .map(|m| sigmoid(self.latents[m * self.num_classes + class]))
            .collect()
    }

    /// Writes latents (f64, bit-exact) and the epoch counter.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        let mut m = Manifest::new(SNAPSHOT_KIND);
        m.push("C", self.num_classes)
            .push("count", self.len())
            .push("epoch", self.epoch);
        for id in &self.ids {
            m.push("image", id);
        }
        envelope::write(dir, &m, &Blob::F64(self.latents.clone()))
    }

    pub fn restore(dir: &Path) -> Result<Self> {
        let (m, blob, path) = envelope::read_kind(dir, SNAPSHOT_KIND)?;
        let c: usize = m.require_parsed("C", &path)?;
        let count: usize = m.require_parsed("count", &path)?;
        let epoch: u64 = m.require_parsed("epoch", &path)?;
        let ids: Vec<String> = m.get_all("image").into_iter().map(String::from).collect();
        if ids.len() != count {
            return Err(Error::format(&path, "image list disagrees with count"));
        }
        PseudoLabelSet::from_latents(ids, c, blob.into_f64(&path)?, epoch)
    }

    /// Restores a snapshot and checks it covers exactly `expected_ids`, in order.
    pub fn restore_for(dir: &Path, expected_ids: &[String]) -> Result<Self> {
        let set = Self::restore(dir)?;
        if set.ids != expected_ids {
            let have: HashSet<&str> = set.ids.iter().map(String::as_str).collect();
            let want: HashSet<&str> = expected_ids.iter().map(String::as_str).collect();
            let missing = want.difference(&have).count();
            let extra = have.difference(&want).count();
            return Err(Error::Invalid(format!(
                "snapshot does not match the dataset: {missing} missing, {extra} extra ids{}",
                if missing + extra == 0 { " (order differs)" } else { "" }
            )));
        }
        Ok(set)
    }
}

/// Seeds pseudo labels from per-image final scores, clamped to
/// `[epsilon, 1 - epsilon]` before taking the logit.
pub fn init_from_scores(finals: &[SimilarityVector], epsilon: f64) -> Result<PseudoLabelSet> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::Config(format!("epsilon must lie in (0, 0.5), got {epsilon}")));
    }
    let c = finals.first().map_or(0, |v| v.num_classes());
    let mut latents = Vec::with_capacity(finals.len() * c);
    for v in finals {
        if v.num_classes() != c {
            return Err(Error::Dimension {
                what: "class count",
                expected: c,
                got: v.num_classes(),
            });
        }
        for &s in &v.scores {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Invalid(format!(
                    "{}: score {s} outside [0, 1]",
                    v.image_id
                )));
            }
            latents.push(logit(s.clamp(epsilon, 1.0 - epsilon)));
        }
    }
    let ids = finals.iter().map(|v| v.image_id.clone()).collect();
    PseudoLabelSet::from_latents(ids, c, latents, 0)
}

/// Hard-label ablation: scores at or above `threshold` become 1, the rest 0.
pub fn binarize(finals: &[SimilarityVector], threshold: f64) -> Vec<SimilarityVector> {
    finals
        .iter()
        .map(|v| SimilarityVector {
            scores: v
                .scores
                .iter()
                .map(|&s| if s >= threshold { 1.0 } else { 0.0 })
                .collect(),
            ..v.clone()
        })
        .collect()
}

/// Per-image score vectors with their ids and class names, stored as f32.
///
/// Used for pseudo-label files and similarity dumps. `vectors_per_image`
/// lets a dump hold several C-vectors per image (global, then snippets).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub label: String,
    pub class_names: Vec<String>,
    pub image_ids: Vec<String>,
    pub vectors_per_image: usize,
    pub scores: Vec<f32>,
}

impl ScoreTable {
    pub fn from_vectors(label: &str, class_names: &[String], vectors: &[SimilarityVector]) -> Result<Self> {
        let c = class_names.len();
        let mut scores = Vec::with_capacity(vectors.len() * c);
        for v in vectors {
            if v.num_classes() != c {
                return Err(Error::Dimension {
                    what: "class count",
                    expected: c,
                    got: v.num_classes(),
                });
            }
            scores.extend(v.scores.iter().map(|&s| s as f32));
        }
        Ok(ScoreTable {
            label: label.to_string(),
            class_names: class_names.to_vec(),
            image_ids: vectors.iter().map(|v| v.image_id.clone()).collect(),
            vectors_per_image: 1,
            scores,
        })
    }

    pub fn row(&self, m: usize) -> &[f32] {
        let w = self.class_names.len() * self.vectors_per_image;
        &self.scores[m * w..(m + 1) * w]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut m = Manifest::new(SCORE_KIND);
        m.push("label", &self.label)
            .push("C", self.class_names.len())
            .push("count", self.image_ids.len())
            .push("vectors_per_image", self.vectors_per_image);
        for id in &self.image_ids {
            m.push("image", id);
        }
        for c in &self.class_names {
            m.push("class", c);
        }
        envelope::write(dir, &m, &Blob::F32(self.scores.clone()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let (m, blob, path) = envelope::read_kind(dir, SCORE_KIND)?;
        let c: usize = m.require_parsed("C", &path)?;
        let count: usize = m.require_parsed("count", &path)?;
        let per: usize = m.require_parsed("vectors_per_image", &path)?;
        let table = ScoreTable {
            label: m.require("label", &path)?.to_string(),
            class_names: m.get_all("class").into_iter().map(String::from).collect(),
            image_ids: m.get_all("image").into_iter().map(String::from).collect(),
            vectors_per_image: per,
            scores: blob.into_f32(&path)?,
        };
        if table.class_names.len() != c
            || table.image_ids.len() != count
            || table.scores.len() != count * c * per
        {
            return Err(Error::format(&path, "score table sizes disagree with manifest"));
        }
        Ok(table)
    }

    /// Final-score vectors, one per image (requires `vectors_per_image == 1`).
    pub fn to_final_vectors(&self) -> Result<Vec<SimilarityVector>> {
        if self.vectors_per_image != 1 {
            return Err(Error::Invalid("score table holds several vectors per image".into()));
        }
        Ok(self
            .image_ids
            .iter()
            .enumerate()
            .map(|(m, id)| SimilarityVector {
                scores: self.row(m).iter().map(|&s| s as f64).collect(),
                kind: crate::alignment::ScoreKind::Final,
                image_id: id.clone(),
                snippet: None,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::ScoreKind;
    use proptest::prelude::*;

    fn finals(rows: &[&[f64]]) -> Vec<SimilarityVector> {
        rows.iter()
            .enumerate()
            .map(|(i, s)| SimilarityVector {
                scores: s.to_vec(),
                kind: ScoreKind::Final,
                image_id: format!("img{i}"),
                snippet: None,
            })
            .collect()
    }

    #[test]
    fn half_maps_to_zero_latent() {
        let set = init_from_scores(&finals(&[&[0.5]]), DEFAULT_EPSILON).unwrap();
        assert_eq!(set.latents(), &[0.0]);
        assert_eq!(set.epoch, 0);
    }

    #[test]
    fn certain_score_is_clamped() {
        let set = init_from_scores(&finals(&[&[1.0, 0.0]]), 1e-6).unwrap();
        let expected = ((1.0 - 1e-6) / 1e-6f64).ln();
        assert!((set.latents()[0] - expected).abs() < 1e-9);
        assert!((set.latents()[0] - 13.8155).abs() < 1e-4);
        assert!((set.latents()[1] + expected).abs() < 1e-9);
    }

    #[test]
    fn init_rejects_out_of_range_scores_and_bad_epsilon() {
        assert!(init_from_scores(&finals(&[&[1.2]]), 1e-6).is_err());
        assert!(init_from_scores(&finals(&[&[0.2]]), 0.5).is_err());
        assert!(init_from_scores(&finals(&[&[0.2]]), 0.0).is_err());
    }

    #[test]
    fn init_is_idempotent() {
        let f = finals(&[&[0.1, 0.9], &[0.3, 0.0]]);
        assert_eq!(init_from_scores(&f, 1e-6).unwrap(), init_from_scores(&f, 1e-6).unwrap());
    }

    #[test]
    fn sigmoid_logit_round_trip_on_grid() {
        let eps = DEFAULT_EPSILON;
        for i in 0..=1000 {
            let y = eps + (1.0 - 2.0 * eps) * i as f64 / 1000.0;
            assert!((sigmoid(logit(y)) - y).abs() < 1e-9, "y = {y}");
        }
    }

    #[test]
    fn snapshot_round_trip_keeps_epoch_and_bits() {
        let mut set = init_from_scores(&finals(&[&[0.1, 0.9], &[0.3, 0.7]]), 1e-6).unwrap();
        set.latent_row_mut(1)[0] = 0.1 + 0.2;
        set.epoch = 7;
        let dir = tempfile::tempdir().unwrap();
        set.snapshot(dir.path()).unwrap();
        let back = PseudoLabelSet::restore_for(dir.path(), set.ids()).unwrap();
        assert_eq!(back.epoch, 7);
        assert!(back.latents().iter().zip(set.latents()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn restore_with_wrong_ids_fails() {
        let set = init_from_scores(&finals(&[&[0.1], &[0.3]]), 1e-6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.snapshot(dir.path()).unwrap();
        let extra = vec!["img0".to_string(), "img1".into(), "img2".into()];
        let missing = vec!["img0".to_string()];
        assert!(PseudoLabelSet::restore_for(dir.path(), &extra).is_err());
        assert!(PseudoLabelSet::restore_for(dir.path(), &missing).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(PseudoLabelSet::from_latents(vec!["a".into(), "a".into()], 1, vec![0.0, 0.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn probabilities_stay_interior(latents in prop::collection::vec(-MAX_LATENT..MAX_LATENT, 1..50)) {
            let n = latents.len();
            let set = PseudoLabelSet::from_latents(vec!["a".into()], n, latents, 0).unwrap();
            for p in set.probs(0) {
                prop_assert!(p > 0.0 && p < 1.0);
            }
        }

        #[test]
        fn score_table_round_trip(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 0..10)) {
            let vectors: Vec<SimilarityVector> = rows.iter().enumerate().map(|(i, s)| SimilarityVector {
                scores: s.clone(), kind: ScoreKind::Final, image_id: format!("i{i}"), snippet: None,
            }).collect();
            let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
            let table = ScoreTable::from_vectors("final", &names, &vectors).unwrap();
            let dir = tempfile::tempdir().unwrap();
            table.write(dir.path()).unwrap();
            prop_assert_eq!(ScoreTable::read(dir.path()).unwrap(), table);
        }
    }
}
