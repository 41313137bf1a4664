//! Brute-force loop oracles shared by the oracle tests and the acceptance run.
//! Each sweep returns the number of shapes checked or the first mismatch.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resnet_core::nn::functional as f;
use resnet_core::tensor::out_extent;
use resnet_core::Tensor;

pub const REL_TOL: f64 = 1e-12;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

pub fn close(a: &[f64], b: &[f64], rel: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("length {} vs {}", a.len(), b.len()));
    }
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if (x - y).abs() > rel * x.abs().max(y.abs()).max(1.0) {
            return Err(format!("element {i}: {x} vs {y}"));
        }
    }
    Ok(())
}

pub struct Conv {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl Conv {
    fn out(&self) -> (usize, usize) {
        (out_extent(self.h, self.k, self.s, self.p).unwrap(), out_extent(self.w, self.k, self.s, self.p).unwrap())
    }

    /// Visits every (output, input, weight) index triple that contributes.
    fn each(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out();
        for b in 0..self.n {
            for o in 0..self.co {
                for y in 0..ho {
                    for x in 0..wo {
                        let oi = ((b * self.co + o) * ho + y) * wo + x;
                        for ci in 0..self.c {
                            for ky in 0..self.k {
                                for kx in 0..self.k {
                                    let iy = (y * self.s + ky) as isize - self.p as isize;
                                    let ix = (x * self.s + kx) as isize - self.p as isize;
                                    if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                                        continue;
                                    }
                                    let ii = ((b * self.c + ci) * self.h + iy as usize) * self.w + ix as usize;
                                    let wi = ((o * self.c + ci) * self.k + ky) * self.k + kx;
                                    visit(oi, ii, wi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Forward, input gradient and weight gradient against the loops.
    pub fn check(&self, rng: &mut ChaCha8Rng) -> Result<(), String> {
        let x = random(&[self.n, self.c, self.h, self.w], rng);
        let w = random(&[self.co, self.c, self.k, self.k], rng);
        let (ho, wo) = self.out();
        let dy = random(&[self.n, self.co, ho, wo], rng);
        let mut y = vec![0.0; self.n * self.co * ho * wo];
        let mut dx = vec![0.0; x.numel()];
        let mut dw = vec![0.0; w.numel()];
        self.each(|oi, ii, wi| {
            y[oi] += x.data()[ii] * w.data()[wi];
            dx[ii] += dy.data()[oi] * w.data()[wi];
            dw[wi] += dy.data()[oi] * x.data()[ii];
        });
        let got = f::conv2d(&x, &w, self.s, self.p).map_err(|e| e.to_string())?;
        if got.shape() != [self.n, self.co, ho, wo] {
            return Err(format!("output shape {:?}", got.shape()));
        }
        close(got.data(), &y, REL_TOL).map_err(|e| format!("forward {e}"))?;
        let (gdx, gdw) = f::conv2d_backward(&x, &w, &dy, self.s, self.p, true).map_err(|e| e.to_string())?;
        close(gdx.unwrap().data(), &dx, REL_TOL).map_err(|e| format!("dx {e}"))?;
        close(gdw.data(), &dw, REL_TOL).map_err(|e| format!("dw {e}"))
    }
}

/// Every extent 1..=6, kernels 1/2/3/5, strides 1..=3, pads below the kernel.
pub fn conv_sweep() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    for h in 1..=6 {
        for w in 1..=6 {
            for k in [1, 2, 3, 5] {
                for s in 1..=3 {
                    for p in 0..k.min(3) {
                        if h + 2 * p < k || w + 2 * p < k {
                            continue;
                        }
                        let conv = Conv { n: 2, c: 2, h, w, co: 3, k, s, p };
                        conv.check(&mut rng).map_err(|e| format!("conv h{h} w{w} k{k} s{s} p{p}: {e}"))?;
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(cases)
}

pub fn matmul_sweep() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cases = 0;
    for m in 1..=6 {
        for k in 1..=6 {
            for n in 1..=6 {
                let a = random(&[m, k], &mut rng);
                let b = random(&[k, n], &mut rng);
                let mut want = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        for l in 0..k {
                            want[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
                        }
                    }
                }
                let got = a.matmul(&b).map_err(|e| e.to_string())?;
                close(got.data(), &want, REL_TOL).map_err(|e| format!("matmul {m}x{k}x{n}: {e}"))?;
                cases += 1;
            }
        }
    }
    Ok(cases)
}

/// Max pooling forward and argmax routing of the backward pass.
pub fn maxpool_sweep() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases = 0;
    for h in 1..=6 {
        for w in 1..=6 {
            for (k, s, p) in [(3, 2, 1), (2, 2, 0), (3, 1, 1), (1, 1, 0), (2, 1, 1), (3, 3, 0)] {
                if h + 2 * p < k || w + 2 * p < k {
                    continue;
                }
                let tag = format!("maxpool h{h} w{w} k{k} s{s} p{p}");
                let x = random(&[2, 3, h, w], &mut rng);
                let (ho, wo) = (out_extent(h, k, s, p).unwrap(), out_extent(w, k, s, p).unwrap());
                let (y, arg) = f::maxpool(&x, k, s, p).map_err(|e| e.to_string())?;
                if y.shape() != [2, 3, ho, wo] {
                    return Err(format!("{tag}: shape {:?}", y.shape()));
                }
                let mut want = Vec::new();
                let mut want_arg = Vec::new();
                for plane in 0..6 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let (mut best, mut at) = (f64::NEG_INFINITY, usize::MAX);
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        let i = (plane * h + iy as usize) * w + ix as usize;
                                        if at == usize::MAX || x.data()[i] > best {
                                            (best, at) = (x.data()[i], i);
                                        }
                                    }
                                }
                            }
                            want.push(best);
                            want_arg.push(at);
                        }
                    }
                }
                close(y.data(), &want, REL_TOL).map_err(|e| format!("{tag}: {e}"))?;
                if arg != want_arg {
                    return Err(format!("{tag}: argmax differs"));
                }
                let dy = random(y.shape(), &mut rng);
                let dx = f::maxpool_backward(x.shape(), &arg, &dy).map_err(|e| e.to_string())?;
                let mut want_dx = vec![0.0; x.numel()];
                for (o, &i) in want_arg.iter().enumerate() {
                    want_dx[i] += dy.data()[o];
                }
                close(dx.data(), &want_dx, REL_TOL).map_err(|e| format!("{tag} backward: {e}"))?;
                cases += 1;
            }
        }
    }
    Ok(cases)
}

/// Softmax and mean cross-entropy from the textbook formulas, for 1..=6 rows
/// and classes, including logits large enough to overflow a naive exp.
pub fn softmax_sweep() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = 0;
    for n in 1..=6 {
        for k in 1..=6 {
            for scale in [1.0, 30.0, 800.0] {
                let logits = Tensor::from_fn(&[n, k], |_| rng.random_range(-scale..scale)).unwrap();
                let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % k).collect();
                let (loss, probs) = f::softmax_cross_entropy(&logits, &labels).map_err(|e| e.to_string())?;
                let mut want = Vec::with_capacity(n * k);
                let mut want_loss = 0.0;
                for (i, row) in logits.data().chunks(k).enumerate() {
                    let mut m = f64::NEG_INFINITY;
                    for &v in row {
                        m = m.max(v);
                    }
                    let mut total = 0.0;
                    for &v in row {
                        total += (v - m).exp();
                    }
                    for &v in row {
                        want.push((v - m).exp() / total);
                    }
                    want_loss += m + total.ln() - row[labels[i]];
                }
                want_loss /= n as f64;
                let tag = format!("softmax n{n} k{k} scale {scale}");
                close(probs.data(), &want, REL_TOL).map_err(|e| format!("{tag}: {e}"))?;
                let plain = f::softmax(&logits).map_err(|e| e.to_string())?;
                close(plain.data(), &want, REL_TOL).map_err(|e| format!("{tag}: {e}"))?;
                close(&[loss], &[want_loss], REL_TOL).map_err(|e| format!("{tag} loss: {e}"))?;
                cases += 1;
            }
        }
    }
    Ok(cases)
}
