use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use softlabel::commands::{self, PlantedDataset};
use softlabel::config::RunConfig;
use softlabel::planted::{PlantedConfig, SceneConfig};
use softlabel::Result;

#[derive(Parser)]
#[command(name = "softlabel", version, about = "Annotation-free multi-label pseudo labels from a vision-language encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode the dataset (or replay its cache) and write pseudo labels.
    BuildPseudoLabels(RunArgs),
    /// Train the classifier on pseudo labels, refining them each epoch.
    Train(RunArgs),
    /// Score the dataset with a trained classifier and report per-class AP.
    Evaluate(RunArgs),
    /// Pseudo-label mAP for every aggregation strategy.
    AblateAggregators(RunArgs),
    /// Per-class histograms of whole-image and fused snippet scores.
    PlotHistograms(RunArgs),
    /// Render a synthetic dataset with planted labels.
    MakePlanted(PlantedArgs),
}

/// Run settings. `--config` loads a key=value file; individual flags and
/// `--set key=value` override it, in that order.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    cache: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// `planted` or the base URL of an embedding server.
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    template: Option<String>,
    /// Snippet grid, e.g. `3x3`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    zeta: Option<String>,
    /// global | avg | max | minmax
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    hard_labels: bool,
    #[arg(long)]
    sigma_g: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    /// literal | chained
    #[arg(long)]
    gradient: Option<String>,
    /// Disable the Gaussian modulation of pseudo-label updates.
    #[arg(long)]
    no_modulation: bool,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    tolerance: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    bins: Option<String>,
    #[arg(long)]
    pseudo_labels: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    resume: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("dataset", &self.dataset),
            ("cache", &self.cache),
            ("out", &self.out),
            ("encoder", &self.encoder),
            ("template", &self.template),
            ("grid", &self.grid),
            ("zeta", &self.zeta),
            ("strategy", &self.strategy),
            ("epsilon", &self.epsilon),
            ("sigma_g", &self.sigma_g),
            ("eta", &self.eta),
            ("gradient", &self.gradient),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("learning_rate", &self.learning_rate),
            ("tolerance", &self.tolerance),
            ("seed", &self.seed),
            ("bins", &self.bins),
            ("pseudo_labels", &self.pseudo_labels),
            ("checkpoint", &self.checkpoint),
            ("resume", &self.resume),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if self.hard_labels {
            cfg.hard_labels = true;
        }
        if self.no_modulation {
            cfg.modulation = false;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| softlabel::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PlantedArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 48)]
    size: u32,
    /// Scene layout seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Embedding width; must match `planted_dim` of later runs.
    #[arg(long, default_value_t = 64)]
    dim: usize,
}

fn run(cli: Cli) -> Result<String> {
    Ok(match cli.command {
        Command::BuildPseudoLabels(args) => {
            let cfg = args.resolve()?;
            let s = commands::build_pseudo_labels(&cfg)?;
            let map = s.map.map_or_else(String::new, |m| format!(", pseudo-label mAP {:.2}", 100.0 * m));
            format!(
                "{} images x {} classes{}{map} -> {}",
                s.images,
                s.classes,
                if s.cache_built { " (cache built)" } else { " (cache replayed)" },
                cfg.out.display()
            )
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let s = commands::train(&cfg)?;
            format!(
                "{} epochs{}, final loss {} -> {}",
                s.epochs_run,
                if s.converged { " (converged)" } else { "" },
                s.final_loss.map_or_else(|| "-".into(), |l| format!("{l:.6}")),
                cfg.out.display()
            )
        }
        Command::Evaluate(args) => {
            let cfg = args.resolve()?;
            commands::evaluate(&cfg)?.render_table().trim_end().to_string()
        }
        Command::AblateAggregators(args) => {
            let cfg = args.resolve()?;
            commands::ablate_aggregators(&cfg)?.render_table().trim_end().to_string()
        }
        Command::PlotHistograms(args) => {
            let cfg = args.resolve()?;
            let h = commands::plot_histograms(&cfg)?;
            format!("{} histograms -> {}", h.len(), cfg.out.join("histograms.tsv").display())
        }
        Command::MakePlanted(args) => {
            let spec = PlantedDataset {
                dir: args.out,
                classes: args.classes,
                scenes: SceneConfig {
                    count: args.count,
                    width: args.size,
                    height: args.size,
                    seed: args.seed,
                    ..SceneConfig::default()
                },
                encoder: PlantedConfig {
                    dim: args.dim,
                    ..PlantedConfig::default()
                },
            };
            let path = commands::make_planted(&spec)?;
            format!("{} scenes -> {}", spec.scenes.count, path.display())
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
