//! Batch commands end to end on a small planted dataset on disk.

use std::fs;
use std::path::{Path, PathBuf};

use softlabel::commands::{self, PlantedDataset};
use softlabel::config::{RunConfig, CONFIG_FILE};
use softlabel::embedding::EmbeddingCache;
use softlabel::planted::{PlantedConfig, SceneConfig};
use softlabel::pseudo::{PseudoLabelSet, ScoreTable};
use softlabel::Error;
use tempfile::TempDir;

fn make_dataset(root: &Path, count: usize) -> PathBuf {
    commands::make_planted(&PlantedDataset {
        dir: root.join("data"),
        classes: 5,
        scenes: SceneConfig {
            count,
            width: 36,
            height: 36,
            seed: 9,
            ..SceneConfig::default()
        },
        encoder: PlantedConfig::default(),
    })
    .unwrap()
}

fn config(root: &Path, dataset: &Path, out: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset = dataset.to_path_buf();
    cfg.cache = root.join("cache");
    cfg.out = root.join(out);
    cfg.epochs = 6;
    cfg
}

fn bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let dataset = make_dataset(tmp.path(), 24);
    let cfg = config(tmp.path(), &dataset, "run");

    let built = commands::build_pseudo_labels(&cfg).unwrap();
    assert!(built.cache_built);
    assert_eq!((built.images, built.classes), (24, 5));
    assert!(built.map.unwrap() > 0.5);

    let trained = commands::train(&cfg).unwrap();
    assert_eq!(trained.epochs_run, 6);
    let report = commands::evaluate(&cfg).unwrap();
    assert!(report.map.is_some());
    let table = commands::ablate_aggregators(&cfg).unwrap();
    assert_eq!(table.rows.len(), 4);
    let hist = commands::plot_histograms(&cfg).unwrap();
    assert_eq!(hist.len(), 10);

    for name in [
        "config.txt",
        "pseudo_labels/manifest.txt",
        "similarities/data.bin",
        "pseudo_label_quality.txt",
        "pseudo_label_quality.json",
        "initial_pseudo_labels/data.bin",
        "refined_pseudo_labels/data.bin",
        "classifier/data.bin",
        "history.tsv",
        "evaluation.txt",
        "evaluation.json",
        "predictions/data.bin",
        "ablation.txt",
        "ablation.json",
        "histograms.tsv",
        "histograms.json",
    ] {
        assert!(cfg.out.join(name).exists(), "missing {name}");
    }
    let history = fs::read_to_string(cfg.out.join("history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 7);

    // The similarity dump holds the global vector plus nine snippets per image.
    let sims = ScoreTable::read(&cfg.out.join("similarities")).unwrap();
    assert_eq!(sims.vectors_per_image, 10);

    // The written config reproduces the run settings.
    assert_eq!(RunConfig::load(&cfg.out.join(CONFIG_FILE)).unwrap(), cfg);
}

#[test]
fn reruns_are_byte_identical_and_cache_replays() {
    let tmp = TempDir::new().unwrap();
    let dataset = make_dataset(tmp.path(), 16);
    let a = config(tmp.path(), &dataset, "a");
    let b = config(tmp.path(), &dataset, "b");

    assert!(commands::build_pseudo_labels(&a).unwrap().cache_built);
    assert!(!commands::build_pseudo_labels(&b).unwrap().cache_built);
    commands::train(&a).unwrap();
    commands::train(&b).unwrap();
    for f in [
        "pseudo_labels/data.bin",
        "pseudo_labels/manifest.txt",
        "similarities/data.bin",
        "history.tsv",
        "classifier/data.bin",
        "refined_pseudo_labels/data.bin",
    ] {
        assert_eq!(bytes(&a.out.join(f)), bytes(&b.out.join(f)), "{f} differs");
    }

    // A freshly encoded cache equals the replayed one.
    let mut fresh = a.clone();
    fresh.cache = tmp.path().join("cache2");
    fresh.out = tmp.path().join("c");
    assert!(commands::build_pseudo_labels(&fresh).unwrap().cache_built);
    assert_eq!(
        EmbeddingCache::read(&fresh.cache).unwrap(),
        EmbeddingCache::read(&a.cache).unwrap()
    );
    assert_eq!(bytes(&fresh.cache.join("data.bin")), bytes(&a.cache.join("data.bin")));
}

#[test]
fn training_never_reads_annotations() {
    let tmp = TempDir::new().unwrap();
    let dataset = make_dataset(tmp.path(), 16);
    let a = config(tmp.path(), &dataset, "a");
    commands::build_pseudo_labels(&a).unwrap();
    commands::train(&a).unwrap();

    // Corrupt every annotation, then remove them: training output is unchanged.
    let ann = dataset.parent().unwrap().join("Annotations");
    for entry in fs::read_dir(&ann).unwrap() {
        fs::write(entry.unwrap().path(), "<annotation><object><name>class00").unwrap();
    }
    let mut b = a.clone();
    b.out = tmp.path().join("b");
    b.pseudo_labels = Some(a.out.join("pseudo_labels"));
    commands::train(&b).unwrap();
    fs::remove_dir_all(&ann).unwrap();
    let mut c = b.clone();
    c.out = tmp.path().join("c");
    commands::train(&c).unwrap();
    for f in ["history.tsv", "classifier/data.bin", "refined_pseudo_labels/data.bin"] {
        assert_eq!(bytes(&a.out.join(f)), bytes(&b.out.join(f)));
        assert_eq!(bytes(&a.out.join(f)), bytes(&c.out.join(f)));
    }
}

#[test]
fn zero_epochs_writes_initial_state_only() {
    let tmp = TempDir::new().unwrap();
    let dataset = make_dataset(tmp.path(), 8);
    let mut cfg = config(tmp.path(), &dataset, "run");
    commands::build_pseudo_labels(&cfg).unwrap();
    cfg.epochs = 0;
    let s = commands::train(&cfg).unwrap();
    assert_eq!(s.epochs_run, 0);
    let initial = PseudoLabelSet::restore(&cfg.out.join("initial_pseudo_labels")).unwrap();
    let refined = PseudoLabelSet::restore(&cfg.out.join("refined_pseudo_labels")).unwrap();
    assert_eq!(initial, refined);
    assert_eq!(fs::read_to_string(cfg.out.join("history.tsv")).unwrap().lines().count(), 1);
}

#[test]
fn resume_continues_epoch_numbering() {
    let tmp = TempDir::new().unwrap();
    let dataset = make_dataset(tmp.path(), 8);
    let first = config(tmp.path(), &dataset, "first");
    commands::build_pseudo_labels(&first).unwrap();
    commands::train(&first).unwrap();

    let mut second = first.clone();
    second.out = tmp.path().join("second");
    second.pseudo_labels = Some(first.out.join("pseudo_labels"));
    second.resume = Some(first.out.clone());
    commands::train(&second).unwrap();
    let history = fs::read_to_string(second.out.join("history.tsv")).unwrap();
    let epochs: Vec<&str> = history.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(epochs, (1..=12).map(|e| e.to_string()).collect::<Vec<_>>());
    let set = PseudoLabelSet::restore(&second.out.join("refined_pseudo_labels")).unwrap();
    assert_eq!(set.epoch, 12);
}

#[test]
fn hard_labels_start_at_the_clamped_extremes() {
    let tmp = TempDir::new().unwrap();
    let dataset = make_dataset(tmp.path(), 8);
    let mut cfg = config(tmp.path(), &dataset, "run");
    commands::build_pseudo_labels(&cfg).unwrap();
    cfg.hard_labels = true;
    cfg.epochs = 0;
    commands::train(&cfg).unwrap();
    let set = PseudoLabelSet::restore(&cfg.out.join("initial_pseudo_labels")).unwrap();
    for p in set.prob_matrix() {
        assert!((p - 1e-6).abs() < 1e-12 || (p - (1.0 - 1e-6)).abs() < 1e-12, "{p}");
    }
}

#[test]
fn stale_cache_and_missing_annotations_are_reported() {
    let tmp = TempDir::new().unwrap();
    let dataset = make_dataset(tmp.path(), 8);
    let cfg = config(tmp.path(), &dataset, "run");
    commands::build_pseudo_labels(&cfg).unwrap();

    let mut other = cfg.clone();
    other.template = "a picture of a [class]".into();
    assert!(matches!(commands::build_pseudo_labels(&other), Err(Error::Config(_))));
    other = cfg.clone();
    other.encoder = softlabel::config::EncoderChoice::Planted { dim: 64, seed: 3 };
    assert!(matches!(commands::build_pseudo_labels(&other), Err(Error::Config(_))));

    // Same images without an annotations entry.
    let text = fs::read_to_string(&dataset).unwrap();
    let bare = dataset.with_file_name("bare.manifest");
    fs::write(&bare, text.lines().filter(|l| !l.starts_with("annotations=")).collect::<Vec<_>>().join("\n")).unwrap();
    let mut unlabeled = cfg.clone();
    unlabeled.dataset = bare;
    unlabeled.out = tmp.path().join("bare");
    assert_eq!(commands::build_pseudo_labels(&unlabeled).unwrap().map, None);
    assert!(!unlabeled.out.join("pseudo_label_quality.txt").exists());
    assert!(matches!(commands::ablate_aggregators(&unlabeled), Err(Error::Ingest { .. })));
}

#[test]
fn cli_reports_failures_with_nonzero_exit() {
    let tmp = TempDir::new().unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_softlabel"))
        .args(["train", "--cache"])
        .arg(tmp.path().join("missing"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: ") && stderr.lines().count() == 1, "{stderr}");

    let out = std::process::Command::new(env!("CARGO_BIN_EXE_softlabel"))
        .args(["ablate-aggregators", "--zeta", "2"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn cli_runs_the_pipeline() {
    let tmp = TempDir::new().unwrap();
    let bin = env!("CARGO_BIN_EXE_softlabel");
    let data = tmp.path().join("data");
    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin).args(args).current_dir(tmp.path()).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["make-planted", "--out", data.to_str().unwrap(), "--count", "12", "--classes", "4"]);
    let common = ["--dataset", "data/dataset.manifest", "--cache", "cache", "--out", "run"];
    let built = run(&[&["build-pseudo-labels"], &common[..]].concat());
    assert!(built.contains("12 images x 4 classes"), "{built}");
    run(&[&["train", "--epochs", "3", "--set", "gradient=chained"], &common[..]].concat());
    let cfg = RunConfig::load(&tmp.path().join("run/config.txt")).unwrap();
    assert_eq!(cfg.epochs, 3);
    assert_eq!(cfg.gradient.to_string(), "chained");
    let eval = run(&[&["evaluate"], &common[..]].concat());
    assert!(eval.contains("mAP"), "{eval}");
}
