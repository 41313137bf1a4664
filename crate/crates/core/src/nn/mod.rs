//! Layer vocabulary: convolution, batch normalization, linear, plus He
//! initialization and the parameter-visiting machinery shared by blocks and
//! networks.

pub mod functional;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// How batch normalization treats its statistics on a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages updated.
    Train,
    /// Running statistics; nothing updated.
    Infer,
    /// Batch statistics without touching the running averages.
    BatchStats,
}

/// Either kind of named state a module exposes.
pub enum Entry<'a, T: Element> {
    Param(&'a Param<T>),
    Buffer(&'a Tensor<T>),
}

pub enum EntryMut<'a, T: Element> {
    Param(&'a mut Param<T>),
    Buffer(&'a mut Tensor<T>),
}

/// Anything holding trainable parameters and non-trainable buffers.
///
/// Visiting order is deterministic and names are unique within a network.
pub trait Module<T: Element> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>));

    /// Number of trainable scalars.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, e| {
            if let Entry::Param(p) = e {
                n += p.value.numel()
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn sample_normal<T: Element, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Tensor<T>> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Tensor::from_fn(shape, |_| T::of(normal.sample(rng)))
}

/// He-normal convolution weights `[C_out, C_in, k, k]`: std `sqrt(2 / (k*k*C_in))`.
pub fn he_init<T: Element, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    if shape.len() != 4 {
        return Err(Error::Rank {
            op: "he_init",
            expected: 4,
            got: shape.to_vec(),
        });
    }
    let fan_in: usize = shape[1..].iter().product();
    sample_normal(shape, he_std(fan_in), rng)
}

/// He-normal linear weights `[C_in, C_out]` with fan-in `C_in`.
pub fn he_init_linear<T: Element, R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Result<Tensor<T>> {
    sample_normal(&[c_in, c_out], he_std(c_in), rng)
}

pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Bias-free convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Element> {
    pub weight: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> ConvParams<T> {
    /// He-initialized `k x k` convolution with "same" padding `(k-1)/2`.
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Result<Self> {
        if !matches!(k, 1 | 3 | 7) || !matches!(stride, 1 | 2) {
            return Err(Error::InvalidArgument(format!("unsupported conv k={k} stride={stride}")));
        }
        Ok(ConvParams {
            weight: Param::new(he_init(&[c_out, c_in, k, k], rng)?),
            stride,
            pad: (k - 1) / 2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.bind(&self.weight);
        tape.conv2d(x, w, self.stride, self.pad)
    }
}

impl<T: Element> Module<T> for ConvParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "weight"), Entry::Param(&self.weight));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(&join(prefix, "weight"), EntryMut::Param(&mut self.weight));
    }
}

/// Batch-norm constants. `momentum` weights the old running value:
/// `running <- momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig { eps: 1e-5, momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Element> BnParams<T> {
    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn new(channels: usize, cfg: BnConfig) -> Result<Self> {
        Ok(BnParams {
            gamma: Param::new(Tensor::ones(&[channels])?),
            beta: Param::new(Tensor::zeros(&[channels])?),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            eps: cfg.eps,
            momentum: cfg.momentum,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.bind(&self.gamma);
        let beta = tape.bind(&self.beta);
        match mode {
            Mode::Infer => tape.batchnorm_infer(x, gamma, beta, &self.running_mean, &self.running_var, self.eps),
            Mode::BatchStats => Ok(tape.batchnorm_train(x, gamma, beta, self.eps)?.0),
            Mode::Train => {
                let (y, stats) = tape.batchnorm_train(x, gamma, beta, self.eps)?;
                let m = T::of(self.momentum);
                let keep = T::one() - m;
                for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = m * *r + keep * b;
                }
                for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = m * *r + keep * b;
                }
                Ok(y)
            }
        }
    }
}

impl<T: Element> Module<T> for BnParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "gamma"), Entry::Param(&self.gamma));
        f(&join(prefix, "beta"), Entry::Param(&self.beta));
        f(&join(prefix, "running_mean"), Entry::Buffer(&self.running_mean));
        f(&join(prefix, "running_var"), Entry::Buffer(&self.running_var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(&join(prefix, "gamma"), EntryMut::Param(&mut self.gamma));
        f(&join(prefix, "beta"), EntryMut::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), EntryMut::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), EntryMut::Buffer(&mut self.running_var));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T: Element> {
    /// `[C_in, C_out]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> LinearParams<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Ok(LinearParams {
            weight: Param::new(he_init_linear(c_in, c_out, rng)?),
            bias: Param::new(Tensor::zeros(&[c_out])?),
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.bind(&self.weight);
        let b = tape.bind(&self.bias);
        tape.linear(x, w, b)
    }
}

impl<T: Element> Module<T> for LinearParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "weight"), Entry::Param(&self.weight));
        f(&join(prefix, "bias"), Entry::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(&join(prefix, "weight"), EntryMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), EntryMut::Param(&mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_std_formula() {
        assert!((he_std(3 * 3 * 16) - 0.117_851_13).abs() < 1e-7);
    }

    #[test]
    fn he_init_is_seeded() {
        let a: Tensor<f32> = he_init(&[4, 3, 3, 3], &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b: Tensor<f32> = he_init(&[4, 3, 3, 3], &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let c: Tensor<f32> = he_init(&[4, 3, 3, 3], &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn running_stats_update_only_in_train() {
        let mut bn = BnParams::<f64>::new(1, BnConfig::default()).unwrap();
        let x = Tensor::new(&[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        for mode in [Mode::Infer, Mode::BatchStats] {
            let mut tape = Tape::new();
            let v = tape.input(x.clone(), false);
            bn.forward(&mut tape, v, mode).unwrap();
            assert_eq!(bn.running_mean.data(), &[0.0]);
            assert_eq!(bn.running_var.data(), &[1.0]);
        }
        let mut tape = Tape::new();
        let v = tape.input(x, false);
        bn.forward(&mut tape, v, Mode::Train).unwrap();
        // batch mean 3, biased variance 3.5
        assert!((bn.running_mean.data()[0] - 0.3).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.35)).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_unsupported_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ConvParams::<f32>::new(3, 4, 5, 1, &mut rng).is_err());
        assert!(ConvParams::<f32>::new(3, 4, 3, 3, &mut rng).is_err());
        let c = ConvParams::<f32>::new(3, 4, 7, 2, &mut rng).unwrap();
        assert_eq!((c.pad, c.kernel()), (3, 7));
    }
}
