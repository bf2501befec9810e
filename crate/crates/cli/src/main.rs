mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use biovista_core::metrics::{GroupKey, ReportFormat};
use clap::{Parser, Subcommand};

use crate::commands::{EvaluateArgs, ExtractArgs};
use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "biovista", version, about = "Paired orthophoto/ALS plot datasets and multi-modal fusion")]
struct Cli {
    /// Pipeline TOML config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-sample work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed applied to every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a miniature synthetic dataset tree.
    Synth {
        /// Synthetic layout TOML; defaults to the built-in 36 x 36 layout.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// HNV raster to manifest.csv and patches.geojson.
    BuildDataset {
        /// Nature-value GeoTIFF (index 8-10 high, 1-3 low).
        #[arg(long)]
        hnv: Option<PathBuf>,
        /// Smallest patch kept, in hectares.
        #[arg(long, allow_negative_numbers = true)]
        min_area_ha: Option<f64>,
        /// Morphological opening radius in metres.
        #[arg(long, allow_negative_numbers = true)]
        opening_radius_m: Option<f64>,
    },
    /// Masked orthophoto patches and normalized point clouds per sample.
    Extract {
        /// Sample manifest CSV.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory of <year>*.tif orthophotos.
        #[arg(long)]
        orthos: Option<PathBuf>,
        /// Directory of LAS tiles.
        #[arg(long)]
        tiles: Option<PathBuf>,
        /// Points kept per cloud.
        #[arg(long)]
        subsample: Option<usize>,
        /// Write augmented previews for the first N samples.
        #[arg(long)]
        augment_previews: Option<usize>,
    },
    /// Train the feature-fusion MLP on concatenated embeddings.
    TrainFusion {
        /// BVEM embedding store.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Sample manifest CSV.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Adam learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Mini-batch size.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Label smoothing in [0, 0.5).
        #[arg(long)]
        label_smoothing: Option<f64>,
        /// Backbone run whose embeddings are fused.
        #[arg(long)]
        instance: Option<u8>,
    },
    /// Choose late-fusion weights on validation and predict the test split.
    Ensemble {
        /// BVEM embedding store with class probabilities.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Sample manifest CSV.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Intervals in the 2D weight grid.
        #[arg(long)]
        grid_steps: Option<usize>,
    },
    /// Accuracy tables from prediction CSVs.
    Evaluate {
        /// One or more prediction CSVs.
        #[arg(long, num_args = 1.., required = true)]
        predictions: Vec<PathBuf>,
        /// Sample manifest CSV.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Sidecar CSV mapping sample_id to region.
        #[arg(long)]
        regions: Option<PathBuf>,
        /// Report format: md or csv.
        #[arg(long, default_value = "md")]
        format: ReportFormat,
        /// Extra breakdowns: year, region or patch.
        #[arg(long, value_delimiter = ',')]
        group_by: Vec<GroupKey>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_seed();
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let out = commands::out_dir(cli.out, &cfg);

    match cli.command {
        Command::Synth { spec } => commands::synth(spec, cli.seed.or(cfg.seed), &out),
        Command::BuildDataset { hnv, min_area_ha, opening_radius_m } => {
            if let Some(v) = min_area_ha {
                cfg.dataset.min_area_ha = v;
            }
            if let Some(v) = opening_radius_m {
                cfg.dataset.opening_radius_m = v;
            }
            cfg.validate()?;
            commands::build_dataset_cmd(&cfg, hnv, &out)
        }
        Command::Extract { manifest, orthos, tiles, subsample, augment_previews } => {
            cfg.validate()?;
            commands::extract(&cfg, ExtractArgs { manifest, orthos, tiles, subsample, augment_previews }, &out)
        }
        Command::TrainFusion { embeddings, manifest, epochs, lr, batch_size, label_smoothing, instance } => {
            let t = &mut cfg.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.lr = lr.unwrap_or(t.lr);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.label_smoothing = label_smoothing.unwrap_or(t.label_smoothing);
            t.instance = instance.unwrap_or(t.instance);
            cfg.validate()?;
            commands::train_fusion_cmd(&cfg, embeddings, manifest, &out)
        }
        Command::Ensemble { embeddings, manifest, grid_steps } => {
            cfg.ensemble.grid_steps = grid_steps.unwrap_or(cfg.ensemble.grid_steps);
            cfg.validate()?;
            commands::ensemble_cmd(&cfg, embeddings, manifest, &out)
        }
        Command::Evaluate { predictions, manifest, regions, format, group_by } => {
            commands::evaluate(&cfg, EvaluateArgs { predictions, manifest, regions, format, group_by }, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
