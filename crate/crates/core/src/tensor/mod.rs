//! Dense row-major tensors and the numeric kernels the layers are lowered onto.
//!
//! Activations are rank-4 `(batch, channel, height, width)`. Broadcasting is
//! limited to two forms: equal shapes, or a rank-1 right operand whose length
//! matches axis 1 of the left operand (a per-channel vector).

mod element;
pub(crate) mod direct;
pub(crate) mod lowering;

pub use element::{DType, Element};
pub use lowering::out_extent;

use crate::error::{Error, Result};
use lowering::{gemm, im2col_t, MatRef, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

impl BinaryOp {
    #[inline]
    pub fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// `b` has length `channels`; `inner` is the product of the extents after axis 1.
    PerChannel { channels: usize, inner: usize },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("dtype", &T::DTYPE).field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.finish()
    }
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "at least one dimension is required".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "every extent must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = validate_shape(shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Tensor of the given shape with every element equal to `fill`.
    pub fn full(shape: &[usize], fill: T) -> Result<Self> {
        let numel = validate_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; numel],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let numel = validate_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "item() needs exactly one element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of range for extent {d}");
            acc * d + i
        })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel = validate_shape(shape)?;
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Largest absolute elementwise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Rank {
                op,
                expected: 4,
                got: self.shape.clone(),
            }),
        }
    }

    pub(crate) fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if b.len() == 1 && a.len() >= 2 && a[1] == b[0] {
            return Ok(Broadcast::PerChannel {
                channels: a[1],
                inner: a[2..].iter().product(),
            });
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }

    /// Elementwise `op(a, b)`; `b` may be a per-channel vector.
    pub fn zip(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let data = match Self::broadcast_kind("zip", &a.shape, &b.shape)? {
            Broadcast::Same => a.data.iter().zip(&b.data).map(|(&x, &y)| op.apply(x, y)).collect(),
            Broadcast::PerChannel { channels, inner } => {
                let mut out = Vec::with_capacity(a.data.len());
                for (i, chunk) in a.data.chunks(inner).enumerate() {
                    let y = b.data[i % channels];
                    out.extend(chunk.iter().map(|&x| op.apply(x, y)));
                }
                out
            }
        };
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        Self::zip(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        Self::zip(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        Self::zip(BinaryOp::Mul, self, other)
    }

    pub fn maximum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        Self::zip(BinaryOp::Max, self, other)
    }

    /// In-place `self += alpha * other` for equal shapes.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "axpy",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += alpha * y;
        }
        Ok(())
    }

    /// Rank-2 matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = match *self.shape.as_slice() {
            [m, k] => (m, k),
            _ => {
                return Err(Error::Rank {
                    op: "matmul",
                    expected: 2,
                    got: self.shape.clone(),
                })
            }
        };
        let (k2, n) = match *other.shape.as_slice() {
            [k2, n] => (k2, n),
            _ => {
                return Err(Error::Rank {
                    op: "matmul",
                    expected: 2,
                    got: other.shape.clone(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::row_major(&self.data, m, k),
            MatRef::row_major(&other.data, k, n),
            T::zero(),
            &mut out,
        );
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Reduce over `axes`, removing them. Reducing every axis yields shape `[1]`.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Tensor<T>> {
        let plan = ReducePlan::new(&self.shape, axes)?;
        let mut out = vec![
            match op {
                ReduceOp::Max => T::neg_infinity(),
                _ => T::zero(),
            };
            plan.out_numel
        ];
        for (i, &v) in self.data.iter().enumerate() {
            let o = plan.out_index(i);
            match op {
                ReduceOp::Sum | ReduceOp::Mean => out[o] += v,
                ReduceOp::Max => {
                    if v > out[o] {
                        out[o] = v
                    }
                }
            }
        }
        if op == ReduceOp::Mean {
            let count = T::of(plan.group as f64);
            for v in &mut out {
                *v = *v / count;
            }
        }
        Ok(Tensor {
            shape: plan.out_shape,
            data: out,
        })
    }

    /// Grow H and W of a rank-4 tensor by `pad` on each side, filling with `value`.
    pub fn pad_spatial(&self, pad: usize, value: T) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4("pad_spatial")?;
        if pad == 0 {
            return Ok(self.clone());
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![value; n * c * ph * pw];
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ph * pw..(plane + 1) * ph * pw];
            for y in 0..h {
                let row = (y + pad) * pw + pad;
                dst[row..row + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        Ok(Tensor {
            shape: vec![n, c, ph, pw],
            data: out,
        })
    }

    /// Remove `crop` pixels from each side of H and W; inverse of [`Self::pad_spatial`].
    pub fn crop_spatial(&self, crop: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4("crop_spatial")?;
        if 2 * crop >= h || 2 * crop >= w {
            return Err(Error::InvalidArgument(format!("cannot crop {crop} from {h}x{w}")));
        }
        let (oh, ow) = (h - 2 * crop, w - 2 * crop);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                let row = (y + crop) * w + crop;
                out.extend_from_slice(&src[row..row + ow]);
            }
        }
        Ok(Tensor {
            shape: vec![n, c, oh, ow],
            data: out,
        })
    }

    /// Receptive-field matrix `[N*H_out*W_out, C*k*k]`: one row per output
    /// position, channel-major within the row.
    pub fn im2col(&self, k: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4("im2col")?;
        let g = Window::new(c, h, w, k, stride, pad)?;
        let (rows, cols) = (g.out_len(), g.patch_len());
        let mut colt = vec![T::zero(); rows * cols];
        let mut out = Vec::with_capacity(n * rows * cols);
        for img in self.data.chunks(c * h * w) {
            im2col_t(img, &g, &mut colt);
            for r in 0..rows {
                out.extend((0..cols).map(|q| colt[q * rows + r]));
            }
        }
        Ok(Tensor {
            shape: vec![n * rows, cols],
            data: out,
        })
    }
}

/// Index bookkeeping for reductions: maps a flat input index to its output slot.
pub(crate) struct ReducePlan {
    pub out_shape: Vec<usize>,
    pub out_numel: usize,
    /// Number of input elements folded into each output element.
    pub group: usize,
    in_strides: Vec<usize>,
    in_shape: Vec<usize>,
    /// Output stride for each input axis, 0 for reduced axes.
    out_strides: Vec<usize>,
}

impl ReducePlan {
    pub fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank || reduced[a] {
                return Err(Error::InvalidAxes {
                    axes: axes.to_vec(),
                    rank,
                });
            }
            reduced[a] = true;
        }
        let kept: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).collect();
        let out_shape: Vec<usize> = if kept.is_empty() {
            vec![1]
        } else {
            kept.iter().map(|&a| shape[a]).collect()
        };
        let mut out_strides = vec![0; rank];
        let mut s = 1;
        for &a in kept.iter().rev() {
            out_strides[a] = s;
            s *= shape[a];
        }
        let mut in_strides = vec![0; rank];
        let mut s = 1;
        for a in (0..rank).rev() {
            in_strides[a] = s;
            s *= shape[a];
        }
        let group = axes.iter().map(|&a| shape[a]).product();
        Ok(ReducePlan {
            out_numel: out_shape.iter().product(),
            out_shape,
            group,
            in_strides,
            in_shape: shape.to_vec(),
            out_strides,
        })
    }

    #[inline]
    pub fn out_index(&self, flat: usize) -> usize {
        let mut o = 0;
        for a in 0..self.in_shape.len() {
            let i = (flat / self.in_strides[a]) % self.in_shape[a];
            o += i * self.out_strides[a];
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_fills_and_validates() {
        let t = Tensor::<f32>::full(&[2, 2], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::<f32>::full(&[3], 1.5).unwrap();
        assert_eq!(t.data(), &[1.5, 1.5, 1.5]);
        let t = Tensor::<f32>::zeros(&[1, 2, 2, 2]).unwrap();
        assert_eq!((t.rank(), t.numel()), (4, 8));
        assert!(Tensor::<f32>::full(&[], 0.0).is_err());
        assert!(Tensor::<f32>::full(&[2, 0], 0.0).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn row_major_offsets() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64).unwrap();
        assert_eq!(t.offset(&[1, 2, 3]), (3 + 2) * 4 + 3);
        assert_eq!(t.get(&[1, 0, 2]), 14.0);
    }

    #[test]
    fn zip_add_and_identity() {
        let a = Tensor::<f32>::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::new(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.add(&a.zeros_like()).unwrap(), a);
    }

    #[test]
    fn zip_per_channel_broadcast() {
        let a = Tensor::<f32>::ones(&[2, 3, 2, 2]).unwrap();
        let b = Tensor::<f32>::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = a.mul(&b).unwrap();
        for n in 0..2 {
            for ch in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        assert_eq!(c.get(&[n, ch, y, x]), (ch + 1) as f32);
                    }
                }
            }
        }
        let bad = Tensor::<f32>::ones(&[4]).unwrap();
        assert!(a.add(&bad).is_err());
        assert!(a.add(&Tensor::ones(&[2, 3]).unwrap()).is_err());
    }

    #[test]
    fn zip_max_and_sub() {
        let a = Tensor::<f64>::new(&[3], vec![-1.0, 5.0, 2.0]).unwrap();
        let b = Tensor::<f64>::new(&[3], vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(a.maximum(&b).unwrap().data(), &[0.0, 5.0, 2.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-1.0, 4.0, 0.0]);
    }

    #[test]
    fn matmul_errors() {
        let a = Tensor::<f64>::ones(&[2, 3]).unwrap();
        assert!(a.matmul(&Tensor::ones(&[2, 3]).unwrap()).is_err());
        assert!(a.matmul(&Tensor::ones(&[3]).unwrap()).is_err());
        let z = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let m = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64).unwrap();
        assert_eq!(z.matmul(&m).unwrap(), Tensor::zeros(&[2, 4]).unwrap());
    }

    #[test]
    fn reduce_basics() {
        let t = Tensor::<f64>::new(&[2], vec![1.0, 3.0]).unwrap();
        assert_eq!(t.reduce(ReduceOp::Mean, &[0]).unwrap().data(), &[2.0]);
        let o = Tensor::<f64>::ones(&[2, 3]).unwrap();
        let s = o.reduce(ReduceOp::Sum, &[0, 1]).unwrap();
        assert_eq!((s.shape(), s.data()), (&[1usize][..], &[6.0][..]));
        assert!(o.reduce(ReduceOp::Sum, &[1, 1]).is_err());
        assert!(o.reduce(ReduceOp::Sum, &[2]).is_err());
        let r = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64).unwrap();
        let m = r.reduce(ReduceOp::Sum, &[1]).unwrap();
        assert_eq!(m.shape(), &[2, 4]);
        assert_eq!(m.get(&[1, 2]), 14.0 + 18.0 + 22.0);
    }

    #[test]
    fn pad_and_crop() {
        let t = Tensor::<f32>::ones(&[1, 3, 32, 32]).unwrap();
        assert_eq!(t.pad_spatial(4, 0.0).unwrap().shape(), &[1, 3, 40, 40]);
        assert_eq!(t.pad_spatial(0, 0.0).unwrap(), t);
        let one = Tensor::<f32>::full(&[1, 1, 1, 1], 7.0).unwrap();
        let p = one.pad_spatial(1, 0.0).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 0.0, 7.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(Tensor::<f32>::ones(&[3, 3]).unwrap().pad_spatial(1, 0.0).is_err());
    }

    #[test]
    fn im2col_unit_kernel_and_shapes() {
        let t = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = t.im2col(1, 1, 0).unwrap();
        assert_eq!(c.shape(), &[4, 1]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0]);
        let t = Tensor::<f32>::ones(&[1, 1, 4, 4]).unwrap();
        assert_eq!(t.im2col(3, 2, 1).unwrap().shape(), &[4, 9]);
        assert!(Tensor::<f32>::ones(&[1, 1, 2, 2]).unwrap().im2col(3, 1, 0).is_err());
    }
}
