//! Plain versus residual networks across depths and seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{ArchConfig, DataSource, TrainConfig, CONFIG_VERSION};
use super::evaluate::evaluate;
use super::respstd::{layer_response_std, median};
use super::train::{TrainLog, Trainer};
use crate::arch::{count_params, ShortcutOption};
use crate::data::{Dataset, MeanMode, ShapesConfig};
use crate::error::{Error, Result};
use crate::nn::{BnConfig, Mode};
use crate::optim::OptHyper;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 250;
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub depths: Vec<usize>,
    pub widths: [usize; 3],
    pub option: ShortcutOption,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub total_iters: u64,
    pub milestones: Vec<u64>,
    pub base_lr: f64,
    pub eval_every: u64,
    pub data: DataSource,
    /// Seed of the data split, shared by every cell.
    pub data_seed: u64,
    /// Leading test images used for response statistics.
    pub respstd_sample: usize,
    pub prefetch: usize,
}

impl DegradationConfig {
    /// Desk scale: half-width 20/56-layer nets, 8k training images, 4k
    /// iterations with the rate divided at 2k and 3k, three seeds. Uses
    /// CIFAR-10 from `data_dir` when given, the synthetic shapes set otherwise.
    pub fn desk(data_dir: Option<PathBuf>) -> Self {
        let data = match data_dir {
            Some(dir) => DataSource::Cifar {
                dir,
                train_subset: Some(8_000),
            },
            None => DataSource::Shapes(ShapesConfig {
                train: 8_000,
                test: 2_000,
                noise: 0.3,
                styles: 10,
                ..ShapesConfig::default()
            }),
        };
        DegradationConfig {
            depths: vec![20, 56],
            widths: [8, 16, 32],
            option: ShortcutOption::A,
            seeds: vec![0, 1, 2],
            batch_size: DESK_BATCH,
            total_iters: 4_000,
            milestones: vec![2_000, 3_000],
            base_lr: 0.1,
            eval_every: 500,
            data,
            data_seed: 0,
            respstd_sample: 500,
            prefetch: 0,
        }
    }

    /// The full CIFAR-10 recipe over depths 20 to 56.
    pub fn full(data_dir: PathBuf) -> Self {
        DegradationConfig {
            depths: vec![20, 32, 44, 56],
            widths: [16, 32, 64],
            option: ShortcutOption::A,
            seeds: vec![0, 1, 2],
            batch_size: 128,
            total_iters: 64_000,
            milestones: vec![32_000, 48_000],
            base_lr: 0.1,
            eval_every: 1_000,
            data: DataSource::Cifar {
                dir: data_dir,
                train_subset: None,
            },
            data_seed: 0,
            respstd_sample: 1_000,
            prefetch: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.len() < 2 {
            return Err(Error::InvalidArgument("the depth study needs at least two depths".into()));
        }
        if self.seeds.is_empty() || self.respstd_sample == 0 {
            return Err(Error::InvalidArgument("need at least one seed and a response sample".into()));
        }
        for &d in &self.depths {
            for residual in [false, true] {
                self.train_config(d, residual, 0).validate()?;
            }
        }
        Ok(())
    }

    pub fn train_config(&self, depth: usize, residual: bool, seed: u64) -> TrainConfig {
        TrainConfig {
            version: CONFIG_VERSION,
            arch: ArchConfig {
                depth,
                residual,
                option: self.option,
                widths: self.widths,
            },
            opt: OptHyper {
                base_lr: self.base_lr,
                milestones: self.milestones.clone(),
                ..OptHyper::cifar()
            },
            batch_size: self.batch_size,
            total_iters: self.total_iters,
            seed,
            eval_every: self.eval_every,
            log_window: 100,
            data: self.data.clone(),
            augment: true,
            mean_mode: MeanMode::PerPixel,
            bn: BnConfig::default(),
            prefetch: self.prefetch,
            checkpoint_every: None,
        }
    }
}

/// Desk-preset minibatch size; see the README for the compute trade-off.
pub const DESK_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub depth: usize,
    pub residual: bool,
    pub seed: u64,
    pub params: usize,
    /// Windowed minibatch training error at the last iteration.
    pub final_train_error: f64,
    pub final_train_loss: f64,
    /// Error on the unaugmented training set, BN in inference mode.
    pub clean_train_error: f64,
    pub test_error: f64,
    pub response_stds: Vec<f64>,
    pub response_median: f64,
    pub log: TrainLog,
}

impl CellResult {
    pub fn label(&self) -> String {
        format!("{}-{}", if self.residual { "resnet" } else { "plain" }, self.depth)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub depth: usize,
    pub residual: bool,
    pub params: usize,
    pub runs: usize,
    pub mean_train_error: f64,
    pub mean_clean_train_error: f64,
    pub mean_test_error: f64,
    pub mean_response_median: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub cells: Vec<CellResult>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl DegradationReport {
    /// One summary per (depth, residual), depth-major, plain before residual.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut keys: Vec<(usize, bool)> = self.cells.iter().map(|c| (c.depth, c.residual)).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter()
            .map(|(depth, residual)| {
                let runs: Vec<&CellResult> = self.cells.iter().filter(|c| c.depth == depth && c.residual == residual).collect();
                CellSummary {
                    depth,
                    residual,
                    params: runs[0].params,
                    runs: runs.len(),
                    mean_train_error: mean(runs.iter().map(|c| c.final_train_error)),
                    mean_clean_train_error: mean(runs.iter().map(|c| c.clean_train_error)),
                    mean_test_error: mean(runs.iter().map(|c| c.test_error)),
                    mean_response_median: mean(runs.iter().map(|c| c.response_median)),
                }
            })
            .collect()
    }

    pub fn find(&self, depth: usize, residual: bool) -> Option<CellSummary> {
        self.summary().into_iter().find(|s| s.depth == depth && s.residual == residual)
    }

    /// Deepest plain net has higher mean final training error than the shallowest.
    pub fn plain_degrades(&self) -> Option<bool> {
        let (lo, hi) = self.depth_range()?;
        Some(self.find(hi, false)?.mean_train_error > self.find(lo, false)?.mean_train_error)
    }

    /// Deepest residual net's mean test error is within `tol` of the shallowest's, or better.
    pub fn residual_keeps_up(&self, tol: f64) -> Option<bool> {
        let (lo, hi) = self.depth_range()?;
        Some(self.find(hi, true)?.mean_test_error <= self.find(lo, true)?.mean_test_error + tol)
    }

    fn depth_range(&self) -> Option<(usize, usize)> {
        let lo = self.cells.iter().map(|c| c.depth).min()?;
        let hi = self.cells.iter().map(|c| c.depth).max()?;
        (lo != hi).then_some((lo, hi))
    }

    /// Reads the `report.json` that [`run_degradation`] leaves in its output directory.
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(REPORT_FILE))?)?)
    }

    pub fn to_csv(&self) -> String {
        let summary = self.summary();
        let mut s = String::from("# degradation v1\n# params");
        for c in &summary {
            let _ = write!(s, " {}-{}={}", if c.residual { "resnet" } else { "plain" }, c.depth, c.params);
        }
        s.push_str("\nnet,depth,seed,params,final_train_error,final_train_loss,clean_train_error,test_error,response_median\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.label(),
                c.depth,
                c.seed,
                c.params,
                c.final_train_error,
                c.final_train_loss,
                c.clean_train_error,
                c.test_error,
                c.response_median
            );
        }
        for c in &summary {
            let _ = writeln!(
                s,
                "{}-{},{},mean,{},{},,{},{},{}",
                if c.residual { "resnet" } else { "plain" },
                c.depth,
                c.depth,
                c.params,
                c.mean_train_error,
                c.mean_clean_train_error,
                c.mean_test_error,
                c.mean_response_median
            );
        }
        s
    }
}

/// Train one cell on already-loaded data and measure it.
pub fn run_cell(cfg: TrainConfig, train: &Dataset, test: &Dataset, respstd_sample: usize, out: Option<&Path>) -> Result<CellResult> {
    let (depth, residual, seed) = (cfg.arch.depth, cfg.arch.residual, cfg.seed);
    let params = count_params(&cfg.arch.spec()?);
    let mut t = Trainer::new(cfg)?;
    t.run(train, Some(test))?;
    let last = *t.log.last().ok_or_else(|| Error::Graph("training produced no log rows".into()))?;
    let clean_train_error = evaluate(&mut t.net, train, EVAL_BATCH)?;
    let n = respstd_sample.min(test.len());
    let per = test.images.numel() / test.len();
    let [c, h, w] = test.image_shape();
    let sample = Tensor::new(&[n, c, h, w], test.images.data()[..n * per].to_vec())?;
    let stats = layer_response_std(&mut t.net, &sample, Mode::Infer, EVAL_BATCH)?;
    let cell = CellResult {
        depth,
        residual,
        seed,
        params,
        final_train_error: last.train_error,
        final_train_loss: last.train_loss,
        clean_train_error,
        test_error: last.test_error.unwrap_or(f64::NAN),
        response_median: median(&stats.layer_order),
        response_stds: stats.layer_order.clone(),
        log: t.log.clone(),
    };
    if let Some(dir) = out {
        let d = dir.join(format!("{}-s{seed}", cell.label()));
        std::fs::create_dir_all(&d)?;
        std::fs::write(d.join("log.csv"), t.log.to_csv())?;
        std::fs::write(d.join("respstd.csv"), stats.to_csv())?;
        save_checkpoint(&d.join("final.ckpt"), &t.checkpoint()?)?;
    }
    Ok(cell)
}

/// Every (seed, depth, plain/residual) cell in that order, so a partial run
/// covers all nets. `progress` sees each finished cell; with `out` set,
/// per-cell logs, response tables and checkpoints plus `degradation.csv` and
/// `report.json` are written there.
pub fn run_degradation(cfg: &DegradationConfig, out: Option<&Path>, progress: &mut dyn FnMut(&CellResult)) -> Result<DegradationReport> {
    cfg.validate()?;
    let (train, test) = cfg.data.load(cfg.data_seed, MeanMode::PerPixel)?;
    let mut report = DegradationReport::default();
    for &seed in &cfg.seeds {
        for &depth in &cfg.depths {
            for residual in [false, true] {
                let cell = run_cell(cfg.train_config(depth, residual, seed), &train, &test, cfg.respstd_sample, out)?;
                progress(&cell);
                report.cells.push(cell);
                if let Some(dir) = out {
                    std::fs::write(dir.join("degradation.csv"), report.to_csv())?;
                    std::fs::write(dir.join(REPORT_FILE), serde_json::to_string(&report)?)?;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BlobConfig;

    fn cell(depth: usize, residual: bool, seed: u64, train: f64, test: f64) -> CellResult {
        CellResult {
            depth,
            residual,
            seed,
            params: depth * 10,
            final_train_error: train,
            final_train_loss: 1.0,
            clean_train_error: train,
            test_error: test,
            response_stds: vec![1.0],
            response_median: 1.0,
            log: TrainLog::new(100),
        }
    }

    #[test]
    fn summary_and_orderings() {
        let r = DegradationReport {
            cells: vec![
                cell(20, false, 0, 0.10, 0.20),
                cell(20, false, 1, 0.20, 0.30),
                cell(56, false, 0, 0.30, 0.40),
                cell(20, true, 0, 0.05, 0.15),
                cell(56, true, 0, 0.03, 0.152),
            ],
        };
        let s = r.summary();
        assert_eq!(s.len(), 4);
        assert!((s[0].mean_train_error - 0.15).abs() < 1e-12);
        assert_eq!(r.plain_degrades(), Some(true));
        assert_eq!(r.residual_keeps_up(0.005), Some(true));
        assert_eq!(r.residual_keeps_up(0.001), Some(false));
        let csv = r.to_csv();
        assert!(csv.lines().nth(1).unwrap().contains("plain-20=200"));
        assert_eq!(csv.lines().count(), 3 + 5 + 4);
    }

    #[test]
    fn presets_validate() {
        DegradationConfig::desk(None).validate().unwrap();
        DegradationConfig::full("/data".into()).validate().unwrap();
    }

    #[test]
    fn tiny_study_runs() {
        let mut cfg = DegradationConfig::desk(None);
        cfg.depths = vec![8, 14];
        cfg.widths = [2, 4, 4];
        cfg.seeds = vec![0];
        cfg.batch_size = 4;
        cfg.total_iters = 3;
        cfg.milestones = vec![2];
        cfg.eval_every = 3;
        cfg.respstd_sample = 4;
        cfg.data = DataSource::Blobs {
            blobs: BlobConfig {
                classes: 2,
                per_class: 4,
                channels: 3,
                side: 32,
                noise: 1.0,
                seed: 0,
            },
            test_per_class: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let mut seen = 0;
        let r = run_degradation(&cfg, Some(dir.path()), &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 4);
        assert_eq!(r.cells.len(), 4);
        let plain = r.find(8, false).unwrap();
        let res = r.find(8, true).unwrap();
        assert_eq!(plain.params, res.params);
        assert!(dir.path().join("plain-8-s0/log.csv").exists());
        assert!(dir.path().join("degradation.csv").exists());
        assert_eq!(r.cells[0].response_stds.len(), 7);
        assert_eq!(DegradationReport::load(dir.path()).unwrap(), r);
    }
}
