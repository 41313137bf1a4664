//! The training loop, its log and resumable state.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Stored, TensorData};
use super::config::TrainConfig;
use super::evaluate::{count_errors, evaluate};
use crate::autodiff::Tape;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::{Entry, EntryMut, Mode, Module};
use crate::optim::{lr_at, step_module, OptState, RunningMean, WarmupMonitor};
use crate::tensor::{Element, Tensor};

pub const LOG_VERSION: u32 = 1;
const EVAL_BATCH: usize = 250;

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Permutation = 2,
    Augment = 3,
    Sample = 4,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    /// Iterations completed.
    pub iter: u64,
    pub lr: f64,
    /// Running mean of minibatch error over the log window.
    pub train_error: f64,
    pub train_loss: f64,
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub window: usize,
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn new(window: usize) -> Self {
        TrainLog { window, rows: Vec::new() }
    }

    pub fn last(&self) -> Option<&TrainLogRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# train-log v{LOG_VERSION}\n# window={}\niter,lr,train_error,train_loss,test_error\n", self.window);
        for r in &self.rows {
            let test = r.test_error.map(|e| e.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", r.iter, r.lr, r.train_error, r.train_loss, test);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(format!("train log: {msg}"));
        let mut lines = text.lines();
        let version = lines.next().and_then(|l| l.strip_prefix("# train-log v"));
        if version != Some(&LOG_VERSION.to_string()) {
            return Err(bad("missing or unsupported version header".into()));
        }
        let window = lines
            .next()
            .and_then(|l| l.strip_prefix("# window="))
            .and_then(|w| w.parse().ok())
            .ok_or_else(|| bad("missing window header".into()))?;
        if lines.next() != Some("iter,lr,train_error,train_loss,test_error") {
            return Err(bad("missing column header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("row {i} has {} fields", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("row {i}: {e}")));
            rows.push(TrainLogRow {
                iter: f[0].parse().map_err(|e| bad(format!("row {i}: {e}")))?,
                lr: num(f[1])?,
                train_error: num(f[2])?,
                train_loss: num(f[3])?,
                test_error: if f[4].is_empty() { None } else { Some(num(f[4])?) },
            });
        }
        Ok(TrainLog { window, rows })
    }
}

/// Deterministic minibatch sequence: epoch `e` visits a permutation drawn from
/// its own stream, iteration `i` augments with its own stream, so any
/// iteration's batch is reproducible without replaying earlier ones.
pub struct BatchSource<'a> {
    data: &'a Dataset,
    seed: u64,
    batch_size: usize,
    augment: bool,
    perm: Option<(u64, Vec<usize>)>,
}

impl<'a> BatchSource<'a> {
    pub fn new(data: &'a Dataset, seed: u64, batch_size: usize, augment: bool) -> Result<Self> {
        if batch_size == 0 || batch_size > data.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} does not fit {} training examples",
                data.len()
            )));
        }
        Ok(BatchSource {
            data,
            seed,
            batch_size,
            augment,
            perm: None,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.data.len() / self.batch_size) as u64
    }

    /// Example indices of the batch for iteration `iter` (0-based).
    pub fn indices(&mut self, iter: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (iter / spe, (iter % spe) as usize);
        if self.perm.as_ref().map(|p| p.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.data.len()).collect();
            perm.shuffle(&mut stream_rng(self.seed, Stream::Permutation, epoch));
            self.perm = Some((epoch, perm));
        }
        let perm = &self.perm.as_ref().expect("permutation just set").1;
        perm[k * self.batch_size..(k + 1) * self.batch_size].to_vec()
    }

    pub fn batch(&mut self, iter: u64) -> Result<(Tensor<f32>, Vec<usize>)> {
        let idx = self.indices(iter);
        if !self.augment {
            return self.data.batch(&idx, None);
        }
        let mut rng = stream_rng(self.seed, Stream::Augment, iter);
        let shape = self.data.image_shape();
        let mut aug = |src: &[f32], dst: &mut [f32]| data::augment_random(src, shape, &mut rng, dst);
        self.data.batch(&idx, Some(&mut aug))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub error: f64,
    pub lr: f64,
}

/// Mutable state of one run: network, optimizer, counters, smoothing windows, log.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Network<f32>,
    pub opt: OptState<f32>,
    /// Iterations completed.
    pub iter: u64,
    pub warmup: WarmupMonitor,
    pub errors: RunningMean,
    pub losses: RunningMean,
    pub log: TrainLog,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.arch.spec()?;
        let net = Network::new(&spec, cfg.bn, &mut stream_rng(cfg.seed, Stream::Init, 0))?;
        Ok(Trainer {
            warmup: WarmupMonitor::new(cfg.opt.warmup),
            errors: RunningMean::new(cfg.log_window),
            losses: RunningMean::new(cfg.log_window),
            log: TrainLog::new(cfg.log_window),
            opt: OptState::default(),
            iter: 0,
            net,
            cfg,
        })
    }

    pub fn fingerprint(&self) -> u64 {
        self.net.spec.fingerprint()
    }

    pub fn done(&self) -> bool {
        self.iter >= self.cfg.total_iters
    }

    /// One SGD step on a prepared batch.
    pub fn step(&mut self, x: Tensor<f32>, labels: &[usize]) -> Result<StepStats> {
        let lr = lr_at(&self.cfg.opt, self.iter, self.warmup.active());
        let mut tape = Tape::new();
        let xv = tape.input(x, false);
        let fwd = self.net.forward(&mut tape, xv, Mode::Train)?;
        let loss_var = tape.softmax_cross_entropy(fwd.logits, labels)?;
        let loss = tape.value(loss_var).item()?.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at iteration {} (lr {lr}, windowed error {:?}, windowed loss {:?})",
                self.iter,
                self.errors.mean(),
                self.losses.mean()
            )));
        }
        let wrong = count_errors(tape.value(fwd.logits), labels)?;
        let grads = tape.backward(loss_var)?;
        step_module(&mut self.net, &grads, &mut self.opt, &self.cfg.opt, lr)?;
        let error = wrong as f64 / labels.len() as f64;
        self.errors.push(error);
        self.losses.push(loss);
        self.warmup.update(self.errors.mean().unwrap_or(1.0));
        self.iter += 1;
        Ok(StepStats { loss, error, lr })
    }

    fn log_row(&mut self, lr: f64, test: Option<&Dataset>) -> Result<()> {
        let test_error = match test {
            Some(t) => Some(evaluate(&mut self.net, t, EVAL_BATCH)?),
            None => None,
        };
        self.log.rows.push(TrainLogRow {
            iter: self.iter,
            lr,
            train_error: self.errors.mean().unwrap_or(f64::NAN),
            train_loss: self.losses.mean().unwrap_or(f64::NAN),
            test_error,
        });
        Ok(())
    }

    fn after_step(&mut self, stats: StepStats, test: Option<&Dataset>, hook: &mut dyn FnMut(&Trainer) -> Result<()>) -> Result<()> {
        if self.iter.is_multiple_of(self.cfg.eval_every) || self.iter == self.cfg.total_iters {
            self.log_row(stats.lr, test)?;
        }
        hook(self)
    }

    /// Train until `until` iterations are complete (capped at `total_iters`),
    /// logging every `eval_every` iterations and at the end. `hook` runs
    /// after every step.
    pub fn run_until(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        until: u64,
        hook: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.cfg.total_iters);
        if self.iter >= until {
            return Ok(());
        }
        let (seed, bs, aug) = (self.cfg.seed, self.cfg.batch_size, self.cfg.augment);
        let start = self.iter;
        if self.cfg.prefetch == 0 {
            let mut src = BatchSource::new(train, seed, bs, aug)?;
            while self.iter < until {
                let (x, y) = src.batch(self.iter)?;
                let stats = self.step(x, &y)?;
                self.after_step(stats, test, hook)?;
            }
            return Ok(());
        }
        let mut src = BatchSource::new(train, seed, bs, aug)?;
        data::prefetch(
            self.cfg.prefetch,
            (until - start) as usize,
            move |i| src.batch(start + i as u64),
            |_, (x, y)| {
                let stats = self.step(x, &y)?;
                self.after_step(stats, test, hook)
            },
        )
    }

    pub fn run(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<()> {
        self.run_until(train, test, self.cfg.total_iters, &mut |_| Ok(()))
    }

    /// Everything needed to continue bitwise-identically.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        let mut pi = 0;
        let velocity = &self.opt.velocity;
        self.net.visit("", &mut |name, e| match e {
            Entry::Param(p) => {
                tensors.push((format!("param.{name}"), f32::wrap(p.value.clone())));
                if let Some(v) = velocity.get(pi) {
                    tensors.push((format!("velocity.{name}"), f32::wrap(v.clone())));
                }
                pi += 1;
            }
            Entry::Buffer(b) => tensors.push((format!("buffer.{name}"), f32::wrap(b.clone()))),
        });
        for (name, w) in [("state.errors", &self.errors), ("state.losses", &self.losses)] {
            let v: Vec<f64> = w.values().collect();
            tensors.push((name.into(), TensorData::F64(Tensor::new(&[v.len()], v)?)));
        }
        let meta = serde_json::json!({
            "config": self.cfg,
            "warmup_active": self.warmup.active(),
            "log": self.log,
        });
        Ok(Checkpoint {
            fingerprint: self.fingerprint(),
            iter: self.iter,
            meta,
            tensors,
        })
    }

    /// Rebuild a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        let meta = &ckpt.meta;
        let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| corrupt(format!("config: {e}")))?;
        let mut t = Trainer::new(cfg)?;
        if t.fingerprint() != ckpt.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: t.fingerprint(),
                found: ckpt.fingerprint,
            });
        }
        let active = meta["warmup_active"].as_bool().ok_or_else(|| corrupt("warmup_active missing".into()))?;
        t.warmup = WarmupMonitor::with_state(t.cfg.opt.warmup, active);
        t.log = serde_json::from_value(meta["log"].clone()).map_err(|e| corrupt(format!("log: {e}")))?;
        t.iter = ckpt.iter;

        let mut velocity = Vec::new();
        let mut failure = None;
        let fetch = |key: String, like: &Tensor<f32>| -> Result<Tensor<f32>> {
            let d = ckpt.get(&key).ok_or_else(|| corrupt(format!("missing tensor {key}")))?;
            let v = f32::unwrap(d).ok_or_else(|| corrupt(format!("tensor {key} has dtype {:?}", d.dtype())))?;
            if v.shape() != like.shape() {
                return Err(corrupt(format!("tensor {key} has shape {:?}, expected {:?}", v.shape(), like.shape())));
            }
            Ok(v.clone())
        };
        t.net.visit_mut("", &mut |name, e| {
            if failure.is_some() {
                return;
            }
            let r = match e {
                EntryMut::Param(p) => fetch(format!("param.{name}"), &p.value).map(|v| {
                    if ckpt.get(&format!("velocity.{name}")).is_some() {
                        velocity.push(fetch(format!("velocity.{name}"), &v));
                    }
                    p.value = v;
                }),
                EntryMut::Buffer(b) => fetch(format!("buffer.{name}"), b).map(|v| *b = v),
            };
            if let Err(e) = r {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        t.opt.velocity = velocity.into_iter().collect::<Result<_>>()?;
        for (name, w) in [("state.errors", &mut t.errors), ("state.losses", &mut t.losses)] {
            let d = ckpt.get(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            let v = f64::unwrap(d).ok_or_else(|| corrupt(format!("tensor {name} is not f64")))?;
            for &x in v.data() {
                w.push(x);
            }
        }
        Ok(t)
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub train: Dataset,
    pub test: Dataset,
}

/// Load data, train from scratch for `cfg.total_iters` iterations.
pub fn train(cfg: TrainConfig) -> Result<TrainOutcome> {
    let (train, test) = cfg.data.load(cfg.seed, cfg.mean_mode)?;
    let mut trainer = Trainer::new(cfg)?;
    trainer.run(&train, Some(&test))?;
    Ok(TrainOutcome { trainer, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ShortcutOption;
    use crate::data::BlobConfig;
    use crate::harness::config::{ArchConfig, DataSource, CONFIG_VERSION};
    use crate::optim::OptHyper;

    fn tiny() -> TrainConfig {
        TrainConfig {
            version: CONFIG_VERSION,
            arch: ArchConfig {
                depth: 8,
                residual: true,
                option: ShortcutOption::A,
                widths: [4, 8, 8],
            },
            opt: OptHyper {
                milestones: vec![30],
                ..OptHyper::cifar()
            },
            batch_size: 8,
            total_iters: 12,
            seed: 3,
            eval_every: 5,
            log_window: 4,
            data: DataSource::Blobs {
                blobs: BlobConfig {
                    classes: 3,
                    per_class: 8,
                    channels: 3,
                    side: 32,
                    noise: 0.5,
                    seed: 1,
                },
                test_per_class: 2,
            },
            augment: true,
            mean_mode: Default::default(),
            bn: Default::default(),
            prefetch: 0,
            checkpoint_every: None,
        }
    }

    #[test]
    fn log_csv_round_trip() {
        let log = TrainLog {
            window: 100,
            rows: vec![
                TrainLogRow {
                    iter: 1,
                    lr: 0.1,
                    train_error: 0.1 + 0.2,
                    train_loss: std::f64::consts::LN_10,
                    test_error: None,
                },
                TrainLogRow {
                    iter: 2,
                    lr: 1e-3,
                    train_error: 0.0,
                    train_loss: 1.0 / 3.0,
                    test_error: Some(0.875),
                },
            ],
        };
        assert_eq!(TrainLog::from_csv(&log.to_csv()).unwrap(), log);
        assert!(TrainLog::from_csv("iter,lr\n").is_err());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let ds = crate::data::synthetic_dataset(2, 10, 0).unwrap();
        let mut src = BatchSource::new(&ds, 5, 4, false).unwrap();
        assert_eq!(src.steps_per_epoch(), 5);
        let mut seen: Vec<usize> = (0..5).flat_map(|i| src.indices(i)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        assert_ne!(src.indices(0), src.indices(5));
        assert_eq!(src.indices(7), BatchSource::new(&ds, 5, 4, false).unwrap().indices(7));
    }

    #[test]
    fn identical_runs_and_resume_agree() {
        let cfg = tiny();
        let (train, test) = cfg.data.load(cfg.seed, cfg.mean_mode).unwrap();
        let mut a = Trainer::new(cfg.clone()).unwrap();
        a.run(&train, Some(&test)).unwrap();
        let mut b = Trainer::new(cfg.clone()).unwrap();
        b.run_until(&train, Some(&test), 7, &mut |_| Ok(())).unwrap();
        let bytes = super::super::checkpoint::encode(&b.checkpoint().unwrap()).unwrap();
        let ck = super::super::checkpoint::decode(&bytes, Some(b.fingerprint())).unwrap();
        let mut c = Trainer::resume(&ck).unwrap();
        c.run(&train, Some(&test)).unwrap();
        assert_eq!(a.log.to_csv(), c.log.to_csv());
        assert_eq!(a.log.rows.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![5, 10, 12]);
        assert!(a.checkpoint().unwrap() == c.checkpoint().unwrap());
    }

    #[test]
    fn prefetch_matches_inline() {
        let cfg = tiny();
        let (train, _) = cfg.data.load(cfg.seed, cfg.mean_mode).unwrap();
        let mut a = Trainer::new(cfg.clone()).unwrap();
        a.run(&train, None).unwrap();
        let mut b = Trainer::new(TrainConfig { prefetch: 2, ..cfg }).unwrap();
        b.run(&train, None).unwrap();
        assert_eq!(a.log, b.log);
        assert!(a.checkpoint().unwrap().tensors == b.checkpoint().unwrap().tensors);
    }

    #[test]
    fn divergence_aborts() {
        let mut cfg = tiny();
        cfg.opt.base_lr = 1e30;
        let (train, _) = cfg.data.load(cfg.seed, cfg.mean_mode).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let err = t.run(&train, None).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }
}
