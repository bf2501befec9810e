use std::path::{Path, PathBuf};

use biovista_core::augment::{AugmentConfig2D, AugmentConfig3D};
use biovista_core::dataset::BuildConfig;
use biovista_core::fusion::{TrainConfig, GRID_STEPS};
use biovista_core::las::DEFAULT_SUBSAMPLE;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub hnv: Option<PathBuf>,
    pub tiles: Option<PathBuf>,
    pub orthos: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// Points kept per cloud.
    pub subsample: usize,
    /// Augmented previews written for the first N samples.
    pub augment_previews: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { subsample: DEFAULT_SUBSAMPLE, augment_previews: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Number of intervals in the 2D weight grid.
    pub grid_steps: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { grid_steps: GRID_STEPS }
    }
}

/// Shared settings for every subcommand; relative paths resolve against the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Overrides every per-section seed when set.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub dataset: BuildConfig,
    pub augment_2d: AugmentConfig2D,
    pub augment_3d: AugmentConfig3D,
    pub extract: ExtractConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CliError::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg: PipelineConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.rebase(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.apply_seed();
    }

    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.dataset.split.seed = s;
            self.augment_2d.seed = s;
            self.augment_3d.seed = s;
            self.train.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.augment_2d.validate()?;
        self.augment_3d.validate()?;
        self.train.validate()?;
        if self.extract.subsample == 0 {
            return Err(CliError::Config("extract.subsample must be at least 1".into()));
        }
        if self.ensemble.grid_steps == 0 {
            return Err(CliError::Config("ensemble.grid_steps must be at least 1".into()));
        }
        Ok(())
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.hnv,
            &mut self.tiles,
            &mut self.orthos,
            &mut self.embeddings,
            &mut self.manifest,
            &mut self.regions,
            &mut self.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Path given on the command line, else from the config, else an error naming `what`.
pub fn pick(flag: Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| cfg.clone()).ok_or_else(|| CliError::Config(format!("no {what} path given (flag or [paths] entry)")))
}

/// Like [`pick`], and the path must exist.
pub fn existing(flag: Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = pick(flag, cfg, what)?;
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::MissingInput(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_seed() {
        let mut cfg = PipelineConfig::default();
        cfg.paths.hnv = Some("hnv.tif".into());
        cfg.set_seed(9);
        let text = cfg.to_toml().unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.seed, 9);
        assert!(toml::from_str::<PipelineConfig>("bogus = 1").is_err());
    }
}
