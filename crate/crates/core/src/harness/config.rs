use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::arch::{build_cifar_with, NetworkSpec, ShortcutOption};
use crate::data::{self, BlobConfig, Dataset, MeanMode, ShapesConfig};
use crate::error::{Error, Result};
use crate::nn::BnConfig;
use crate::optim::OptHyper;

pub const CONFIG_VERSION: u32 = 1;

/// A CIFAR-style 6n+2 network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Total weighted depth, `6n + 2`.
    pub depth: usize,
    pub residual: bool,
    #[serde(default)]
    pub option: ShortcutOption,
    pub widths: [usize; 3],
}

impl ArchConfig {
    pub fn blocks_per_stage(&self) -> Result<usize> {
        if self.depth < 8 || !(self.depth - 2).is_multiple_of(6) {
            return Err(Error::InvalidArgument(format!("depth {} is not of the form 6n+2", self.depth)));
        }
        Ok((self.depth - 2) / 6)
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        build_cifar_with(self.blocks_per_stage()?, self.residual, self.widths, self.option)
    }

    pub fn label(&self) -> String {
        format!("{}-{}", if self.residual { "resnet" } else { "plain" }, self.depth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    /// CIFAR-10 binary files.
    Cifar {
        dir: PathBuf,
        /// Use only the first `n` of a seeded shuffle of the training set.
        #[serde(default)]
        train_subset: Option<usize>,
    },
    /// Textured-ellipse stand-in with CIFAR geometry.
    Shapes(ShapesConfig),
    /// Gaussian class blobs; `test_per_class` extra samples form the test set.
    Blobs { blobs: BlobConfig, test_per_class: usize },
}

impl DataSource {
    /// Train and test sets, mean-subtracted with the training mean.
    pub fn load(&self, seed: u64, mean_mode: MeanMode) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = match self {
            DataSource::Cifar { dir, train_subset } => {
                let (train, test) = data::load_cifar_dir(dir)?;
                let train = match train_subset {
                    Some(n) if *n < train.len() => data::split_holdout(&train, train.len() - n, seed)?.0,
                    _ => train,
                };
                (train, test)
            }
            DataSource::Shapes(cfg) => data::shapes_dataset(cfg)?,
            DataSource::Blobs { blobs, test_per_class } => {
                let all = data::blob_dataset(&BlobConfig {
                    per_class: blobs.per_class + test_per_class,
                    ..*blobs
                })?;
                // Labels cycle through classes, so a prefix stays balanced.
                let m = blobs.classes * blobs.per_class;
                let train: Vec<usize> = (0..m).collect();
                let test: Vec<usize> = (m..all.len()).collect();
                if test.is_empty() {
                    return Err(Error::InvalidArgument("blob data source needs test_per_class > 0".into()));
                }
                (all.subset(&train)?, all.subset(&test)?)
            }
        };
        data::normalize_pair(&mut train, &mut test, mean_mode)?;
        Ok((train, test))
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub version: u32,
    pub arch: ArchConfig,
    pub opt: OptHyper,
    pub batch_size: usize,
    pub total_iters: u64,
    pub seed: u64,
    /// Log (and evaluate the test set) every this many iterations.
    pub eval_every: u64,
    /// Window of the running mean behind the logged training error.
    #[serde(default = "default_window")]
    pub log_window: usize,
    pub data: DataSource,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub mean_mode: MeanMode,
    #[serde(default)]
    pub bn: BnConfig,
    /// Batches prepared ahead on a helper thread; 0 assembles inline.
    #[serde(default)]
    pub prefetch: usize,
    /// Write a checkpoint every this many iterations (CLI only).
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

fn default_window() -> usize {
    100
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// The CIFAR-10 recipe: batch 128, 64k iterations, lr 0.1 divided at 32k
    /// and 48k, momentum 0.9, decay 1e-4, widths 16/32/64.
    pub fn cifar_recipe(depth: usize, residual: bool, dir: PathBuf) -> Self {
        let mut opt = OptHyper::cifar();
        if depth >= 110 {
            opt = OptHyper::cifar_with_warmup();
        }
        TrainConfig {
            version: CONFIG_VERSION,
            arch: ArchConfig {
                depth,
                residual,
                option: ShortcutOption::A,
                widths: [16, 32, 64],
            },
            opt,
            batch_size: 128,
            total_iters: 64_000,
            seed: 0,
            eval_every: 1_000,
            log_window: 100,
            data: DataSource::Cifar { dir, train_subset: None },
            augment: true,
            mean_mode: MeanMode::PerPixel,
            bn: BnConfig::default(),
            prefetch: 0,
            checkpoint_every: Some(8_000),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidArgument(format!(
                "config version {} not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.total_iters == 0 || self.batch_size < 2 || self.eval_every == 0 || self.log_window == 0 {
            return Err(Error::InvalidArgument(
                "total_iters, eval_every and log_window must be positive and batch_size at least 2".into(),
            ));
        }
        self.arch.blocks_per_stage()?;
        self.opt.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut cfg = TrainConfig::cifar_recipe(110, true, "/data/cifar".into());
        cfg.data = DataSource::Shapes(ShapesConfig::default());
        let back = TrainConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.opt.warmup.is_some());
    }

    #[test]
    fn depth_must_be_6n_plus_2() {
        let mut cfg = TrainConfig::cifar_recipe(20, false, "x".into());
        cfg.arch.depth = 21;
        assert!(cfg.validate().is_err());
        cfg.arch.depth = 56;
        assert_eq!(cfg.arch.blocks_per_stage().unwrap(), 9);
    }

    #[test]
    fn wrong_version_rejected() {
        let mut cfg = TrainConfig::cifar_recipe(20, true, "x".into());
        cfg.version = 99;
        assert!(TrainConfig::from_json(&cfg.to_json().unwrap()).is_err());
    }
}
