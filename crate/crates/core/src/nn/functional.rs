//! Forward and backward kernels for each layer, on plain tensors.
//!
//! The autodiff tape calls these; they are also usable directly for
//! inference-only code and for the loop oracles in tests.

use crate::error::{Error, Result};
use crate::tensor::direct;
use crate::tensor::lowering::{col2im_t_add, gemm, im2col_t, MatRef, Window};
use crate::tensor::{Element, Tensor};

fn conv_geometry<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, usize, Window)> {
    let (n, c_in, h, wd) = x.dims4("conv2d")?;
    let (c_out, wc, kh, kw) = w.dims4("conv2d weight")?;
    if wc != c_in || kh != kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    Ok((n, c_out, Window::new(c_in, h, wd, kh, stride, pad)?))
}

/// Cross-correlation of `x [N,C_in,H,W]` with `w [C_out,C_in,k,k]`; no bias.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (n, c_out, g) = conv_geometry(x, w, stride, pad)?;
    let (ckk, hw_out) = (g.patch_len(), g.out_len());
    let img_len = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); n * c_out * hw_out];
    if let Some(plan) = direct::Plan::new(&g, c_out) {
        direct::forward(&plan, w.data(), x.data(), &mut out);
        return Tensor::new(&[n, c_out, g.out_h, g.out_w], out);
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * hw_out] };
    let weight = MatRef::row_major(w.data(), c_out, ckk);
    for (img, dst) in x.data().chunks(img_len).zip(out.chunks_mut(c_out * hw_out)) {
        let b = if g.is_pointwise() {
            MatRef::row_major(img, ckk, hw_out)
        } else {
            im2col_t(img, &g, &mut cols);
            MatRef::row_major(&cols, ckk, hw_out)
        };
        gemm(T::one(), weight, b, T::zero(), dst);
    }
    Tensor::new(&[n, c_out, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to the input (when `need_dx`) and the weight.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let (n, c_out, g) = conv_geometry(x, w, stride, pad)?;
    let (ckk, hw_out) = (g.patch_len(), g.out_len());
    if dy.shape() != [n, c_out, g.out_h, g.out_w] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: dy.shape().to_vec(),
            rhs: vec![n, c_out, g.out_h, g.out_w],
        });
    }
    let img_len = g.channels * g.height * g.width;
    let mut dw = vec![T::zero(); c_out * ckk];
    let mut dx = if need_dx { vec![T::zero(); x.numel()] } else { Vec::new() };
    if let Some(plan) = direct::Plan::new(&g, c_out) {
        direct::backward(&plan, w.data(), x.data(), dy.data(), &mut dw, need_dx.then_some(&mut dx[..]));
        let dx = if need_dx { Some(Tensor::new(x.shape(), dx)?) } else { None };
        return Ok((dx, Tensor::new(w.shape(), dw)?));
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * hw_out] };
    let mut dcols = if need_dx && !g.is_pointwise() { vec![T::zero(); ckk * hw_out] } else { Vec::new() };
    let weight = MatRef::row_major(w.data(), c_out, ckk);
    for (i, (img, dy_n)) in x.data().chunks(img_len).zip(dy.data().chunks(c_out * hw_out)).enumerate() {
        let dy_mat = MatRef::row_major(dy_n, c_out, hw_out);
        let b = if g.is_pointwise() {
            MatRef::row_major(img, ckk, hw_out)
        } else {
            im2col_t(img, &g, &mut cols);
            MatRef::row_major(&cols, ckk, hw_out)
        };
        gemm(T::one(), dy_mat, b.t(), T::one(), &mut dw);
        if need_dx {
            let dx_n = &mut dx[i * img_len..(i + 1) * img_len];
            if g.is_pointwise() {
                gemm(T::one(), weight.t(), dy_mat, T::zero(), dx_n);
            } else {
                gemm(T::one(), weight.t(), dy_mat, T::zero(), &mut dcols);
                col2im_t_add(&dcols, &g, dx_n);
            }
        }
    }
    let dx = if need_dx { Some(Tensor::new(x.shape(), dx)?) } else { None };
    Ok((dx, Tensor::new(w.shape(), dw)?))
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T: Element> {
    pub mean: Vec<T>,
    /// Biased (1/M) batch variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn channel_view<T: Element>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4(op)?;
    Ok((n, c, h * w))
}

fn check_affine<T: Element>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm affine",
            lhs: gamma.shape().to_vec(),
            rhs: vec![c],
        });
    }
    Ok(())
}

/// Training-mode batch normalization over `(N, H, W)` for each channel.
pub fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (n, c, hw) = channel_view(x, "batchnorm")?;
    check_affine(c, gamma, beta)?;
    let m = n * hw;
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "training-mode batchnorm needs at least 2 values per channel, got {m}"
        )));
    }
    let data = x.data();
    let mut stats = BatchStats {
        mean: Vec::with_capacity(c),
        var: Vec::with_capacity(c),
        inv_std: Vec::with_capacity(c),
    };
    let mut out = vec![T::zero(); data.len()];
    for ch in 0..c {
        let planes = || (0..n).map(move |i| &data[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
        let sum: f64 = planes().flat_map(|p| p.iter()).map(|v| v.as_f64()).sum();
        let mean = sum / m as f64;
        let sq: f64 = planes()
            .flat_map(|p| p.iter())
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum();
        let var = sq / m as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        let scale = T::of(gamma.data()[ch].as_f64() * inv_std);
        let (mean_t, shift) = (T::of(mean), beta.data()[ch]);
        for i in 0..n {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for (o, &v) in out[range.clone()].iter_mut().zip(&data[range]) {
                *o = (v - mean_t) * scale + shift;
            }
        }
        stats.mean.push(mean_t);
        stats.var.push(T::of(var));
        stats.inv_std.push(T::of(inv_std));
    }
    Ok((Tensor::new(x.shape(), out)?, stats))
}

/// Backward of [`batchnorm_train`]: returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchStats<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, hw) = channel_view(x, "batchnorm_backward")?;
    let m = (n * hw) as f64;
    let (xd, dyd) = (x.data(), dy.data());
    let mut dx = vec![T::zero(); xd.len()];
    let mut dgamma = Vec::with_capacity(c);
    let mut dbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let (mean, inv_std) = (stats.mean[ch].as_f64(), stats.inv_std[ch].as_f64());
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for i in 0..n {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for (&v, &g) in xd[range.clone()].iter().zip(&dyd[range]) {
                let g = g.as_f64();
                sum_dy += g;
                sum_dy_xhat += g * (v.as_f64() - mean) * inv_std;
            }
        }
        let k = gamma.data()[ch].as_f64() * inv_std / m;
        for i in 0..n {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for ((o, &v), &g) in dx[range.clone()].iter_mut().zip(&xd[range.clone()]).zip(&dyd[range]) {
                let xhat = (v.as_f64() - mean) * inv_std;
                *o = T::of(k * (m * g.as_f64() - sum_dy - xhat * sum_dy_xhat));
            }
        }
        dgamma.push(T::of(sum_dy_xhat));
        dbeta.push(T::of(sum_dy));
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

/// Per-channel `(scale, shift)` that inference-mode batch norm applies.
pub fn batchnorm_infer_affine<T: Element>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let mut scale = Vec::with_capacity(gamma.numel());
    let mut shift = Vec::with_capacity(gamma.numel());
    for ch in 0..gamma.numel() {
        let s = gamma.data()[ch].as_f64() / (running_var.data()[ch].as_f64() + eps).sqrt();
        scale.push(T::of(s));
        shift.push(T::of(beta.data()[ch].as_f64() - running_mean.data()[ch].as_f64() * s));
    }
    (scale, shift)
}

/// Inference-mode batch normalization: a fixed per-channel affine map.
pub fn batchnorm_infer<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, c, hw) = channel_view(x, "batchnorm")?;
    check_affine(c, gamma, beta)?;
    check_affine(c, running_mean, running_var)?;
    let (scale, shift) = batchnorm_infer_affine(gamma, beta, running_mean, running_var, eps);
    let mut out = x.data().to_vec();
    for (i, plane) in out.chunks_mut(hw).enumerate() {
        let ch = i % c;
        for v in plane {
            *v = *v * scale[ch] + shift[ch];
        }
    }
    Tensor::new(x.shape(), out)
}

/// Backward of [`batchnorm_infer`]: returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_infer_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (_, c, hw) = channel_view(x, "batchnorm_backward")?;
    let inv: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (i, ((o, xs), gs)) in dx.chunks_mut(hw).zip(x.data().chunks(hw)).zip(dy.data().chunks(hw)).enumerate() {
        let ch = i % c;
        let s = gamma.data()[ch].as_f64() * inv[ch];
        let mean = running_mean.data()[ch].as_f64();
        for ((o, &v), &g) in o.iter_mut().zip(xs).zip(gs) {
            let g = g.as_f64();
            *o = T::of(g * s);
            dgamma[ch] += g * (v.as_f64() - mean) * inv[ch];
            dbeta[ch] += g;
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(&[c], dgamma.into_iter().map(T::of).collect())?,
        Tensor::new(&[c], dbeta.into_iter().map(T::of).collect())?,
    ))
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `dy` where the input was strictly positive; the subgradient at 0 is 0.
pub fn relu_backward<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data).expect("relu_backward shape")
}

/// Windowed max with implicit `-inf` padding. Returns the output and, for
/// every output element, the flat input index it was taken from (first
/// row-major maximum on ties).
pub fn maxpool<T: Element>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("maxpool")?;
    if pad >= k {
        return Err(Error::InvalidArgument(format!("maxpool pad {pad} must be below kernel {k}")));
    }
    let g = Window::new(c, h, w, k, stride, pad)?;
    let mut out = Vec::with_capacity(n * c * g.out_len());
    let mut argmax = Vec::with_capacity(n * c * g.out_len());
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        let base = p * h * w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..k {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = ih as usize * w + iw as usize;
                        if best_idx == usize::MAX || plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(base + best_idx);
            }
        }
    }
    Ok((Tensor::new(&[n, c, g.out_h, g.out_w], out)?, argmax))
}

pub fn maxpool_backward<T: Element>(x_shape: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(x_shape)?;
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// Mean over H and W: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let area = T::of((h * w) as f64);
    let data = x.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / area).collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Element>(x_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let hw: usize = x_shape[2..].iter().product();
    let area = T::of(hw as f64);
    let mut data = Vec::with_capacity(dy.numel() * hw);
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g / area, hw));
    }
    Tensor::new(x_shape, data)
}

/// `x [N,C_in] . w [C_in,C_out] + bias [C_out]`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    x.matmul(w)?.add(bias)
}

/// Row-wise softmax of `[N,K]` logits with max subtraction.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let k = match *logits.shape() {
        [_, k] => k,
        _ => {
            return Err(Error::Rank {
                op: "softmax",
                expected: 2,
                got: logits.shape().to_vec(),
            })
        }
    };
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(logits.shape(), out)
}

/// Mean negative log-likelihood of `labels` under softmax(logits).
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => {
            return Err(Error::Rank {
                op: "softmax_cross_entropy",
                expected: 2,
                got: logits.shape().to_vec(),
            })
        }
    };
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let probs = softmax(logits)?;
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[label];
    }
    Ok((loss / T::of(n as f64), probs))
}

/// Gradient of the mean cross-entropy: `(softmax - onehot) / N`, scaled by `dloss`.
pub fn softmax_cross_entropy_backward<T: Element>(probs: &Tensor<T>, labels: &[usize], dloss: T) -> Tensor<T> {
    let k = probs.shape()[1];
    let n = T::of(labels.len() as f64);
    let mut g = probs.data().to_vec();
    for (row, &label) in g.chunks_mut(k).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v = *v * dloss / n;
        }
    }
    Tensor::new(probs.shape(), g).expect("softmax backward shape")
}

/// Option-A shortcut: keep pixels `0, stride, 2*stride, ...` along H and W
/// and append zero channels up to `out_channels`.
pub fn shortcut_pad<T: Element>(x: &Tensor<T>, out_channels: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("shortcut_pad")?;
    if out_channels < c || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "zero-pad shortcut cannot map {c} channels to {out_channels} with stride {stride}"
        )));
    }
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = vec![T::zero(); n * out_channels * oh * ow];
    let src = x.data();
    for i in 0..n {
        for ch in 0..c {
            let plane = &src[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let dst = &mut out[(i * out_channels + ch) * oh * ow..(i * out_channels + ch + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = plane[y * stride * w + xx * stride];
                }
            }
        }
    }
    Tensor::new(&[n, out_channels, oh, ow], out)
}

pub fn shortcut_pad_backward<T: Element>(x_shape: &[usize], dy: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, out_c, oh, ow) = dy.dims4("shortcut_pad_backward")?;
    let mut dx = vec![T::zero(); n * c * h * w];
    let g = dy.data();
    for i in 0..n {
        for ch in 0..c {
            let src = &g[(i * out_c + ch) * oh * ow..(i * out_c + ch + 1) * oh * ow];
            let plane = &mut dx[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    plane[y * stride * w + xx * stride] += src[y * ow + xx];
                }
            }
        }
    }
    Tensor::new(x_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_conv_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |i| i as f64 - 4.0).unwrap();
        let w = Tensor::<f64>::ones(&[1, 1, 1, 1]).unwrap();
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap(), x);
    }

    #[test]
    fn stem_conv_shape() {
        let x = Tensor::<f32>::zeros(&[1, 3, 224, 224]).unwrap();
        let w = Tensor::<f32>::zeros(&[4, 3, 7, 7]).unwrap();
        assert_eq!(conv2d(&x, &w, 2, 3).unwrap().shape(), &[1, 4, 112, 112]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]).unwrap();
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]).unwrap();
        assert!(conv2d(&x, &w, 1, 1).is_err());
    }

    #[test]
    fn batchnorm_two_values() {
        let x = Tensor::<f64>::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let g = Tensor::ones(&[1]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let (y, stats) = batchnorm_train(&x, &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn batchnorm_constant_input_is_zero() {
        let x = Tensor::<f32>::full(&[2, 3, 2, 2], 4.5).unwrap();
        let (y, _) = batchnorm_train(&x, &Tensor::ones(&[3]).unwrap(), &Tensor::zeros(&[3]).unwrap(), 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn batchnorm_needs_two_values() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]).unwrap();
        let err = batchnorm_train(&x, &Tensor::ones(&[2]).unwrap(), &Tensor::zeros(&[2]).unwrap(), 1e-5);
        assert!(err.is_err());
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::<f32>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&y), y);
    }

    #[test]
    fn maxpool_stem_shape_and_constant() {
        let x = Tensor::<f32>::full(&[1, 2, 112, 112], 3.0).unwrap();
        let (y, _) = maxpool(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 56, 56]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0).unwrap();
        let (_, arg) = maxpool(&x, 3, 2, 1).unwrap();
        assert_eq!(arg, vec![0]);
        let dx = maxpool_backward(x.shape(), &arg, &Tensor::<f64>::ones(&[1, 1, 1, 1]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_constant() {
        let x = Tensor::<f32>::full(&[1, 1, 7, 7], 2.0).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn linear_identity_and_zero() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64).unwrap();
        let eye = Tensor::<f64>::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        let zb = Tensor::zeros(&[3]).unwrap();
        assert_eq!(linear(&x, &eye, &zb).unwrap(), x);
        let b = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = linear(&x, &Tensor::zeros(&[3, 3]).unwrap(), &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let logits = Tensor::<f64>::zeros(&[4, 10]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 9, 5]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        let mut l = Tensor::<f64>::zeros(&[1, 10]).unwrap();
        l.data_mut()[7] = 1e4;
        let (loss, _) = softmax_cross_entropy(&l, &[7]).unwrap();
        assert!(loss <= 1e-6);
        assert!(matches!(
            softmax_cross_entropy(&l, &[10]),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn zero_pad_shortcut_shape() {
        let x = Tensor::<f32>::from_fn(&[1, 16, 32, 32], |i| i as f32).unwrap();
        let y = shortcut_pad(&x, 32, 2).unwrap();
        assert_eq!(y.shape(), &[1, 32, 16, 16]);
        for ch in 16..32 {
            for p in 0..256 {
                assert_eq!(y.data()[ch * 256 + p], 0.0);
            }
        }
        assert_eq!(y.get(&[0, 3, 5, 7]), x.get(&[0, 3, 10, 14]));
    }
}
