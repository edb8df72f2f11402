//! Alternating optimisation of a classifier and its soft pseudo labels.
//!
//! Each round trains the classifier for one epoch under a Bernoulli KL loss
//! with the pseudo labels held fixed, then holds the epoch's predictions
//! fixed and moves the pseudo-label latents against the gradient of the same
//! loss taken with respect to the pseudo labels. The latent step is weighted
//! per entry by a Gaussian centred at 0.5, so uncertain labels move fastest.

use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embedding::{self, EmbeddingRecord, Encoder};
use crate::envelope::{self, Blob, Manifest};
use crate::error::{Error, Result};
use crate::pseudo::{sigmoid, PseudoLabelSet, MAX_LATENT};

/// Gaussian width that puts the modulation peak at exactly 1.
pub const DEFAULT_SIGMA_G: f64 = 0.398_942_280_401_432_7;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

const HEAD_KIND: &str = "linear-head";

fn check_interior(v: &[f64], what: &str) -> Result<()> {
    if let Some(x) = v.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::Invalid(format!("{what} value {x} is not strictly inside (0, 1)")));
    }
    Ok(())
}

fn check_pair(y_p: &[f64], y_u: &[f64]) -> Result<()> {
    if y_p.len() != y_u.len() || y_p.is_empty() {
        return Err(Error::Dimension {
            what: "prediction vs pseudo-label length",
            expected: y_u.len(),
            got: y_p.len(),
        });
    }
    check_interior(y_p, "prediction")?;
    check_interior(y_u, "pseudo-label")
}

fn bernoulli_kl(target: f64, model: f64) -> f64 {
    target * (target / model).ln() + (1.0 - target) * ((1.0 - target) / (1.0 - model)).ln()
}

/// Mean over classes of `KL(Bernoulli(y_u) || Bernoulli(y_p))`.
///
/// The pseudo labels are the target distribution. Swapping the arguments
/// gives the loss seen from the other side of the alternation.
pub fn kl_loss(y_p: &[f64], y_u: &[f64]) -> Result<f64> {
    check_pair(y_p, y_u)?;
    let c = y_u.len() as f64;
    Ok(y_u.iter().zip(y_p).map(|(&u, &p)| bernoulli_kl(u, p)).sum::<f64>() / c)
}

/// Gradient of [`kl_loss`] with respect to the pseudo labels `y_u`.
pub fn grad_wrt_pseudo(y_p: &[f64], y_u: &[f64]) -> Result<Vec<f64>> {
    check_pair(y_p, y_u)?;
    let c = y_u.len() as f64;
    Ok(y_u
        .iter()
        .zip(y_p)
        .map(|(&u, &p)| ((u / p).ln() - ((1.0 - u) / (1.0 - p)).ln()) / c)
        .collect())
}

/// Gaussian density at `y` with mean 0.5 and width `sigma_g`.
pub fn psi(y: f64, sigma_g: f64) -> f64 {
    let z = (y - 0.5) / sigma_g;
    (-0.5 * z * z).exp() / (sigma_g * (2.0 * std::f64::consts::PI).sqrt())
}

pub fn gaussian_modulation(y_u: &[f64], sigma_g: f64) -> Result<Vec<f64>> {
    if !(sigma_g > 0.0 && sigma_g.is_finite()) {
        return Err(Error::Config(format!("gaussian width must be > 0, got {sigma_g}")));
    }
    Ok(y_u.iter().map(|&y| psi(y, sigma_g)).collect())
}

/// How the latent update uses the pseudo-label gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Gradient taken with respect to the probabilities, applied to the
    /// latents unchanged.
    #[default]
    Literal,
    /// Gradient chained through the sigmoid into latent space.
    Chained,
}

impl std::str::FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(GradientMode::Literal),
            "chained" => Ok(GradientMode::Chained),
            other => Err(Error::Config(format!("unknown gradient mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for GradientMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradientMode::Literal => "literal",
            GradientMode::Chained => "chained",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    pub sigma_g: f64,
    pub eta: f64,
    pub mode: GradientMode,
    /// When false the Gaussian weight is replaced by 1.
    pub modulation: bool,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            sigma_g: DEFAULT_SIGMA_G,
            eta: 1.0,
            mode: GradientMode::Literal,
            modulation: true,
        }
    }
}

/// One latent step per entry, with predictions held fixed.
///
/// `predictions[m]` are the classifier probabilities for image `m` of `set`.
/// Returns the mean absolute change in pseudo-label probability.
pub fn refine_pseudo_labels(
    set: &mut PseudoLabelSet,
    predictions: &[Vec<f64>],
    params: &RefineParams,
) -> Result<f64> {
    if predictions.len() != set.len() {
        return Err(Error::Invalid(format!(
            "predictions cover {} images, pseudo-label set has {}",
            predictions.len(),
            set.len()
        )));
    }
    if !(params.eta > 0.0 && params.eta.is_finite()) {
        return Err(Error::Config(format!("latent step scale must be > 0, got {}", params.eta)));
    }
    let mut drift = 0.0;
    for (m, y_p) in predictions.iter().enumerate() {
        let y_u = set.probs(m);
        let grad = grad_wrt_pseudo(y_p, &y_u)?;
        let weight = if params.modulation {
            gaussian_modulation(&y_u, params.sigma_g)?
        } else {
            vec![1.0; y_u.len()]
        };
        let row = set.latent_row_mut(m);
        for i in 0..row.len() {
            let g = match params.mode {
                GradientMode::Literal => grad[i],
                GradientMode::Chained => grad[i] * y_u[i] * (1.0 - y_u[i]),
            };
            let step = params.eta * weight[i] * g;
            if step != 0.0 {
                row[i] = (row[i] - step).clamp(-MAX_LATENT, MAX_LATENT);
            }
            drift += (sigmoid(row[i]) - y_u[i]).abs();
        }
    }
    set.epoch += 1;
    let entries = (set.len() * set.num_classes()).max(1) as f64;
    Ok(drift / entries)
}

/// A multi-label scoring network with a flat parameter vector.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn logits(&self, features: &[f64]) -> Vec<f64>;
    /// Adds `d loss / d params` for one sample, given `d loss / d logits`.
    fn accumulate_grad(&self, features: &[f64], dlogits: &[f64], grad: &mut [f64]);
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Sigmoid scores, logits bounded so every score is strictly inside (0, 1).
    fn predict(&self, features: &[f64]) -> Vec<f64> {
        self.logits(features)
            .into_iter()
            .map(|z| sigmoid(z.clamp(-MAX_LATENT, MAX_LATENT)))
            .collect()
    }
}

/// Linear head `W x + b` over image features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    classes: usize,
    dim: usize,
    /// `classes x dim` weights followed by `classes` biases.
    params: Vec<f64>,
}

impl LinearHead {
    /// Small Gaussian weights, zero biases.
    pub fn seeded(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).unwrap();
        let mut params: Vec<f64> = (0..classes * dim).map(|_| normal.sample(&mut rng)).collect();
        params.extend(std::iter::repeat_n(0.0, classes));
        LinearHead { classes, dim, params }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut m = Manifest::new(HEAD_KIND);
        m.push("C", self.classes).push("K", self.dim);
        envelope::write(dir, &m, &Blob::F64(self.params.clone()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, blob, path) = envelope::read_kind(dir, HEAD_KIND)?;
        let classes: usize = m.require_parsed("C", &path)?;
        let dim: usize = m.require_parsed("K", &path)?;
        let params = blob.into_f64(&path)?;
        if params.len() != classes * (dim + 1) {
            return Err(Error::format(&path, "parameter count disagrees with C and K"));
        }
        Ok(LinearHead { classes, dim, params })
    }
}

impl Classifier for LinearHead {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let bias = &self.params[self.classes * self.dim..];
        self.params[..self.classes * self.dim]
            .chunks_exact(self.dim)
            .zip(bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect()
    }

    fn accumulate_grad(&self, x: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        let (gw, gb) = grad.split_at_mut(self.classes * self.dim);
        for (i, &d) in dlogits.iter().enumerate() {
            for (g, &xv) in gw[i * self.dim..(i + 1) * self.dim].iter_mut().zip(x) {
                *g += d * xv;
            }
            gb[i] += d;
        }
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

/// Adam over a flat parameter vector. State persists across alternation
/// rounds.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let update = self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
            params[i] -= update;
        }
    }
}

/// L2-normalised whole-image embedding, the classifier's input.
pub fn image_features(global: &[f32]) -> Vec<f64> {
    let norm = global.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    global.iter().map(|&x| x as f64 / norm).collect()
}

pub fn features_from_records(records: &[EmbeddingRecord]) -> Vec<Vec<f64>> {
    records.iter().map(|r| image_features(&r.global)).collect()
}

/// Scores a whole image, without splitting it.
pub fn predict_image(classifier: &dyn Classifier, encoder: &dyn Encoder, image: &RgbImage) -> Result<Vec<f64>> {
    let global = embedding::encode_image(encoder, image)?;
    if global.len() != classifier.input_dim() {
        return Err(Error::Dimension {
            what: "classifier input width",
            expected: classifier.input_dim(),
            got: global.len(),
        });
    }
    Ok(classifier.predict(&image_features(&global)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub refine: RefineParams,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.01,
            refine: RefineParams::default(),
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(self.refine.sigma_g > 0.0) || !(self.refine.eta > 0.0) {
            return Err(Error::Config("gaussian width and latent step must be > 0".into()));
        }
        Ok(())
    }
}

/// Output of one training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTrace {
    pub batch_losses: Vec<f64>,
    /// Sample-weighted mean of the batch losses.
    pub mean_loss: f64,
    /// Per-image probabilities from this epoch's forward passes, in dataset order.
    pub predictions: Vec<Vec<f64>>,
}

/// One pass of minibatch descent on the KL loss with pseudo labels fixed.
pub fn train_epoch(
    classifier: &mut dyn Classifier,
    optimizer: &mut Adam,
    features: &[Vec<f64>],
    set: &PseudoLabelSet,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochTrace> {
    if features.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    if features.len() != set.len() {
        return Err(Error::Invalid(format!(
            "{} feature rows for {} pseudo labels",
            features.len(),
            set.len()
        )));
    }
    if set.num_classes() != classifier.num_classes() {
        return Err(Error::Dimension {
            what: "classifier classes",
            expected: set.num_classes(),
            got: classifier.num_classes(),
        });
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let c = set.num_classes() as f64;
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(rng);

    let mut predictions = vec![Vec::new(); features.len()];
    let mut batch_losses = Vec::with_capacity(order.len().div_ceil(batch_size));
    let mut total = 0.0;
    let mut grad = vec![0.0; classifier.params().len()];
    for batch in order.chunks(batch_size) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let b = batch.len() as f64;
        let mut loss = 0.0;
        for &m in batch {
            let y_u = set.probs(m);
            let y_p = classifier.predict(&features[m]);
            loss += kl_loss(&y_p, &y_u)?;
            let dlogits: Vec<f64> = y_p.iter().zip(&y_u).map(|(p, u)| (p - u) / (c * b)).collect();
            classifier.accumulate_grad(&features[m], &dlogits, &mut grad);
            predictions[m] = y_p;
        }
        optimizer.step(classifier.params_mut(), &grad);
        total += loss;
        batch_losses.push(loss / b);
    }
    Ok(EpochTrace {
        batch_losses,
        mean_loss: total / features.len() as f64,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub drift_l1: f64,
    pub eval_map: Option<f64>,
}

impl EpochRecord {
    /// Tab-separated history line.
    pub fn to_line(&self) -> String {
        let eval = self.eval_map.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        format!("{}\t{:.9}\t{:.9}\t{}", self.epoch, self.mean_loss, self.drift_l1, eval)
    }
}

pub const HISTORY_HEADER: &str = "epoch\tmean_loss\tdrift_l1\teval_map";

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub history: Vec<EpochRecord>,
    pub converged: bool,
}

/// Per-epoch observer: receives the classifier and the refined labels.
pub type EpochProbe<'a> = &'a mut dyn FnMut(&dyn Classifier, &PseudoLabelSet) -> f64;

/// Alternates training epochs with pseudo-label refinement until the epoch
/// budget is spent or the relative loss change falls below the tolerance.
///
/// `evaluate`, when given, is called after each refinement and its value is
/// stored in the history; it never influences training.
pub fn alternate(
    classifier: &mut dyn Classifier,
    features: &[Vec<f64>],
    set: &mut PseudoLabelSet,
    config: &TrainConfig,
    mut evaluate: Option<EpochProbe<'_>>,
) -> Result<Outcome> {
    config.validate()?;
    let mut history = Vec::new();
    if config.epochs == 0 {
        return Ok(Outcome {
            history,
            converged: false,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adam::new(config.learning_rate, classifier.params().len());
    let mut previous: Option<f64> = None;
    let mut converged = false;
    for epoch in 1..=config.epochs {
        let trace = train_epoch(classifier, &mut optimizer, features, set, config.batch_size, &mut rng)?;
        let drift_l1 = refine_pseudo_labels(set, &trace.predictions, &config.refine)?;
        let eval_map = evaluate.as_mut().map(|f| f(&*classifier, set));
        history.push(EpochRecord {
            epoch,
            mean_loss: trace.mean_loss,
            drift_l1,
            eval_map,
        });
        if let Some(prev) = previous {
            let change = (prev - trace.mean_loss).abs() / prev.abs().max(f64::MIN_POSITIVE);
            if change < config.tolerance {
                converged = true;
                break;
            }
        }
        previous = Some(trace.mean_loss);
    }
    Ok(Outcome { history, converged })
}
