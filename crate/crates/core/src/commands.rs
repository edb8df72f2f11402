//! The batch commands behind the CLI. Each takes a validated [`RunConfig`],
//! writes its artifacts under `config.out`, and returns a short summary.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregate::Strategy;
use crate::alignment::SimilarityVector;
use crate::config::{EncoderChoice, RunConfig};
use crate::embedding::{EmbeddingCache, Encoder};
use crate::envelope::MANIFEST_FILE;
use crate::error::{Error, Result};
use crate::eval::{self, EvaluationReport, GroundTruthSet};
use crate::ingest::{self, AnnotationSource, DatasetManifest, ImageEntry, VocObject};
use crate::pipeline;
use crate::planted::{self, PlantedConfig, PlantedEncoder, SceneConfig};
use crate::pseudo::{self, PseudoLabelSet, ScoreTable};
use crate::trainer::{self, Classifier, LinearHead, HISTORY_HEADER};

pub const PSEUDO_LABELS_DIR: &str = "pseudo_labels";
pub const SIMILARITIES_DIR: &str = "similarities";
pub const INITIAL_STATE_DIR: &str = "initial_pseudo_labels";
pub const REFINED_STATE_DIR: &str = "refined_pseudo_labels";
pub const CLASSIFIER_DIR: &str = "classifier";
pub const HISTORY_FILE: &str = "history.tsv";
pub const PREDICTIONS_DIR: &str = "predictions";

/// Score threshold of the hard-label ablation.
pub const HARD_LABEL_THRESHOLD: f64 = 0.5;

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn load_dataset(config: &RunConfig) -> Result<DatasetManifest> {
    let dataset = DatasetManifest::load(&config.dataset)?;
    if dataset.images.is_empty() {
        return Err(Error::ingest(&config.dataset, "dataset lists no images"));
    }
    Ok(dataset)
}

fn require_truth(config: &RunConfig, dataset: &DatasetManifest) -> Result<GroundTruthSet> {
    dataset
        .ground_truth()?
        .ok_or_else(|| Error::ingest(&config.dataset, "this command needs an annotations= entry"))
}

/// Identity the configured encoder will report, when knowable offline.
fn expected_identity(config: &RunConfig, classes: &[String]) -> Result<Option<String>> {
    match config.encoder {
        EncoderChoice::Planted { .. } => Ok(Some(config.make_encoder(classes)?.identity().to_string())),
        EncoderChoice::Remote { .. } => Ok(None),
    }
}

fn check_cache(config: &RunConfig, dataset: &DatasetManifest, cache: &EmbeddingCache) -> Result<()> {
    let stale = |what: String| {
        Error::Config(format!(
            "cache {} does not match this run ({what}); point `cache` elsewhere or delete it",
            config.cache.display()
        ))
    };
    if cache.image_ids() != dataset.ids() {
        return Err(stale("image ids".into()));
    }
    if cache.text.class_names != dataset.classes {
        return Err(stale("class vocabulary".into()));
    }
    if cache.text.template != config.template {
        return Err(stale(format!("template {:?}", cache.text.template)));
    }
    if cache.grid() != Some(config.grid) {
        return Err(stale("snippet grid".into()));
    }
    if let Some(id) = expected_identity(config, &dataset.classes)? {
        if id != cache.encoder_id {
            return Err(stale(format!("encoder {:?}", cache.encoder_id)));
        }
    }
    Ok(())
}

/// Loads the embedding cache, encoding the dataset first if it is missing.
/// Returns the cache and whether it was freshly built.
pub fn ensure_cache(config: &RunConfig, dataset: &DatasetManifest) -> Result<(EmbeddingCache, bool)> {
    if config.cache.join(MANIFEST_FILE).exists() {
        let cache = EmbeddingCache::read(&config.cache)?;
        check_cache(config, dataset, &cache)?;
        return Ok((cache, false));
    }
    let encoder = config.make_encoder(&dataset.classes)?;
    let cache = pipeline::build_cache(
        encoder.as_ref(),
        &dataset.ids(),
        |m| ingest::load_image(&dataset.images[m].path),
        config.grid,
        &dataset.classes,
        &config.template,
    )?;
    cache.write(&config.cache)?;
    Ok((cache, true))
}

fn write_report(out: &Path, stem: &str, report: &EvaluationReport) -> Result<()> {
    write_text(&out.join(format!("{stem}.txt")), &report.render_table())?;
    write_json(&out.join(format!("{stem}.json")), report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSummary {
    pub images: usize,
    pub classes: usize,
    pub cache_built: bool,
    /// Pseudo-label mAP, when the dataset carries annotations.
    pub map: Option<f64>,
}

/// Encodes (or replays) the dataset, aligns, aggregates and writes the
/// pseudo-label table, the raw similarity dump and, if annotations exist, a
/// quality report.
pub fn build_pseudo_labels(config: &RunConfig) -> Result<PseudoLabelSummary> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let (cache, cache_built) = ensure_cache(config, &dataset)?;
    let scores = pipeline::align_all(&cache)?;
    let finals = pipeline::pseudo_label_vectors(&scores, &config.aggregation())?;

    config.save_to_out()?;
    ScoreTable::from_vectors(PSEUDO_LABELS_DIR, &dataset.classes, &finals)?
        .write(&config.out.join(PSEUDO_LABELS_DIR))?;
    pipeline::similarity_table(&cache, &scores).write(&config.out.join(SIMILARITIES_DIR))?;

    let map = match dataset.ground_truth()? {
        Some(truth) => {
            let report = eval::pseudo_label_quality("pseudo labels", &finals, &truth)?;
            write_report(&config.out, "pseudo_label_quality", &report)?;
            report.map
        }
        None => None,
    };
    Ok(PseudoLabelSummary {
        images: finals.len(),
        classes: dataset.classes.len(),
        cache_built,
        map,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub converged: bool,
    pub final_loss: Option<f64>,
}

fn read_history(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().skip(1).map(String::from).collect())
}

/// Trains the classifier against the pseudo-label table, refining the
/// labels after every epoch. Reads the embedding cache for features and
/// never touches annotation files.
pub fn train(config: &RunConfig) -> Result<TrainSummary> {
    config.validate()?;
    let cache = EmbeddingCache::read(&config.cache)?;
    let table = ScoreTable::read(&config.pseudo_labels_path())?;
    if table.class_names != cache.text.class_names {
        return Err(Error::Invalid("pseudo-label classes differ from the cache's".into()));
    }
    if table.image_ids.iter().map(String::as_str).ne(cache.image_ids()) {
        return Err(Error::Invalid("pseudo-label images differ from the cache's".into()));
    }
    let features = trainer::features_from_records(&cache.records);
    let c = table.class_names.len();

    let (mut classifier, mut set, mut history) = match &config.resume {
        Some(dir) => {
            let set = PseudoLabelSet::restore_for(&dir.join(REFINED_STATE_DIR), &table.image_ids)?;
            let head = LinearHead::load(&dir.join(CLASSIFIER_DIR))?;
            let history = read_history(&dir.join(HISTORY_FILE))?;
            (head, set, history)
        }
        None => {
            let mut finals = table.to_final_vectors()?;
            if config.hard_labels {
                finals = pseudo::binarize(&finals, HARD_LABEL_THRESHOLD);
            }
            let set = pseudo::init_from_scores(&finals, config.epsilon)?;
            (LinearHead::seeded(c, cache.dim(), config.seed), set, Vec::new())
        }
    };
    if classifier.num_classes() != c || classifier.input_dim() != cache.dim() {
        return Err(Error::Dimension {
            what: "checkpoint shape",
            expected: c * cache.dim(),
            got: classifier.num_classes() * classifier.input_dim(),
        });
    }

    config.save_to_out()?;
    if config.resume.is_none() {
        set.snapshot(&config.out.join(INITIAL_STATE_DIR))?;
    }

    let start = set.epoch;
    let mut train_config = config.train_config();
    // A resumed run continues the shuffle stream from a fresh, epoch-keyed seed.
    train_config.seed = config.seed.wrapping_add(start);
    let outcome = trainer::alternate(&mut classifier, &features, &mut set, &train_config, None)?;
    history.extend(outcome.history.iter().map(|r| {
        let mut r = r.clone();
        r.epoch += start as usize;
        r.to_line()
    }));

    classifier.save(&config.out.join(CLASSIFIER_DIR))?;
    set.snapshot(&config.out.join(REFINED_STATE_DIR))?;
    let mut text = String::from(HISTORY_HEADER);
    text.push('\n');
    for line in &history {
        text.push_str(line);
        text.push('\n');
    }
    write_text(&config.out.join(HISTORY_FILE), &text)?;

    Ok(TrainSummary {
        epochs_run: outcome.history.len(),
        converged: outcome.converged,
        final_loss: outcome.history.last().map(|r| r.mean_loss),
    })
}

/// Scores every dataset image with a trained classifier and reports per-class
/// AP against the dataset's annotations.
pub fn evaluate(config: &RunConfig) -> Result<EvaluationReport> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let truth = require_truth(config, &dataset)?;
    let classifier = LinearHead::load(&config.checkpoint_path())?;
    if classifier.num_classes() != dataset.classes.len() {
        return Err(Error::Dimension {
            what: "checkpoint classes",
            expected: dataset.classes.len(),
            got: classifier.num_classes(),
        });
    }
    let encoder = config.make_encoder(&dataset.classes)?;
    let predictions = predict_dataset(&classifier, encoder.as_ref(), &dataset.images)?;

    let vectors: Vec<SimilarityVector> = dataset
        .images
        .iter()
        .zip(&predictions)
        .map(|(e, p)| SimilarityVector {
            scores: p.clone(),
            kind: crate::alignment::ScoreKind::Final,
            image_id: e.id.clone(),
            snippet: None,
        })
        .collect();
    let flat: Vec<f64> = predictions.concat();
    let report = eval::evaluate_scores("classifier", &flat, &truth)?;

    config.save_to_out()?;
    ScoreTable::from_vectors(PREDICTIONS_DIR, &dataset.classes, &vectors)?
        .write(&config.out.join(PREDICTIONS_DIR))?;
    write_report(&config.out, "evaluation", &report)?;
    Ok(report)
}

pub fn predict_dataset(
    classifier: &(dyn Classifier + Sync),
    encoder: &dyn Encoder,
    images: &[ImageEntry],
) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|e| trainer::predict_image(classifier, encoder, &ingest::load_image(&e.path)?))
        .collect()
}

/// Pseudo-label mAP of every aggregation strategy.
pub fn ablate_aggregators(config: &RunConfig) -> Result<eval::AblationTable> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let truth = require_truth(config, &dataset)?;
    let (cache, _) = ensure_cache(config, &dataset)?;
    let table = eval::ablation_report(&cache, &truth, &Strategy::ALL, config.zeta)?;
    config.save_to_out()?;
    write_text(&config.out.join("ablation.txt"), &table.render_table())?;
    write_json(&config.out.join("ablation.json"), &table)?;
    Ok(table)
}

/// Per-class histograms of whole-image and fused-snippet scores.
pub fn plot_histograms(config: &RunConfig) -> Result<Vec<eval::ClassHistogram>> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let (cache, _) = ensure_cache(config, &dataset)?;
    let scores = pipeline::align_all(&cache)?;
    let histograms = eval::score_histograms(&scores, &dataset.classes, config.zeta, config.bins)?;
    config.save_to_out()?;
    write_text(&config.out.join("histograms.tsv"), &eval::render_histograms(&histograms))?;
    write_json(&config.out.join("histograms.json"), &histograms)?;
    Ok(histograms)
}

/// Settings for [`make_planted`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDataset {
    pub dir: PathBuf,
    pub classes: usize,
    pub scenes: SceneConfig,
    pub encoder: PlantedConfig,
}

pub const PLANTED_MANIFEST: &str = "dataset.manifest";

/// Renders a planted dataset: PNG scenes, one VOC annotation per scene and
/// a dataset manifest. Returns the manifest path.
pub fn make_planted(spec: &PlantedDataset) -> Result<PathBuf> {
    let vocab = planted::class_vocabulary(spec.classes);
    let encoder = PlantedEncoder::new(&vocab, spec.encoder.clone())?;
    let scenes = planted::generate_scenes(&encoder, &spec.scenes);
    let images_dir = spec.dir.join("images");
    let ann_dir = spec.dir.join("Annotations");
    for d in [&images_dir, &ann_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut images = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let file = format!("{}.png", scene.id);
        let path = images_dir.join(&file);
        scene
            .image
            .save(&path)
            .map_err(|e| Error::Encoder(format!("{}: {e}", path.display())))?;
        let objects: Vec<VocObject> = scene
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            // Scene labels are image-level; boxes span the whole image.
            .map(|(i, _)| (vocab[i].clone(), (1, 1, scene.image.width(), scene.image.height())))
            .collect();
        let xml = ingest::voc_xml(&file, scene.image.width(), scene.image.height(), &objects);
        write_text(&ann_dir.join(format!("{}.xml", scene.id)), &xml)?;
        images.push(ImageEntry {
            id: scene.id.clone(),
            path,
        });
    }
    let manifest = DatasetManifest {
        split: "train".into(),
        classes: vocab,
        images,
        annotations: Some(AnnotationSource::Voc(ann_dir)),
    };
    let path = spec.dir.join(PLANTED_MANIFEST);
    manifest.save(&path)?;
    Ok(path)
}

/// Flips a fraction of pseudo-label entries `y -> 1 - y`, for robustness
/// experiments.
pub fn corrupt_scores(finals: &[SimilarityVector], fraction: f64, seed: u64) -> Vec<SimilarityVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    finals
        .iter()
        .map(|v| SimilarityVector {
            scores: v
                .scores
                .iter()
                .map(|&s| if rng.random_bool(fraction) { 1.0 - s } else { s })
                .collect(),
            ..v.clone()
        })
        .collect()
}
