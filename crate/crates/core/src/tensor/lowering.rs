//! Convolution lowering: output-extent arithmetic, im2col/col2im on single
//! images, and a bounds-checked wrapper around the strided GEMM kernel.

use super::Element;
use crate::error::{Error, Result};

/// Spatial output extent of a `k x k` window sliding with `stride` over an
/// input of `input` pixels padded by `pad` on both sides.
///
/// Uses floor division, so a stride-2 window over an odd padded span drops the
/// last partial position (224 -> 112 for the 7x7 stem, 32 -> 16 for 3x3).
pub fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = input + 2 * pad;
    if stride == 0 || k == 0 || span < k {
        return Err(Error::NonIntegralExtent {
            input,
            kernel: k,
            stride,
            pad,
        });
    }
    Ok((span - k) / stride + 1)
}

/// Borrowed strided matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = alpha * a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm<T: Element>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    a.check();
    b.check();
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: views are bounds-checked above and `c` is a distinct &mut slice.
    unsafe {
        T::gemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Geometry of one convolution window sweep over a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(channels: usize, height: usize, width: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Window {
            channels,
            height,
            width,
            k,
            stride,
            pad,
            out_h: out_extent(height, k, stride, pad)?,
            out_w: out_extent(width, k, stride, pad)?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when the window is a plain per-pixel channel mix (1x1, stride 1,
    /// no padding): the image itself is already its column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Transposed im2col of one `C x H x W` image: `cols[(c*k + ki)*k + kj][oh*out_w + ow]`.
pub(crate) fn im2col_t<T: Element>(image: &[T], g: &Window, cols: &mut [T]) {
    let hw_out = g.out_len();
    debug_assert_eq!(image.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), g.patch_len() * hw_out);
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.width as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_t`]: scatter-add column gradients back into the image.
pub(crate) fn col2im_t_add<T: Element>(cols: &[T], g: &Window, image: &mut [T]) {
    let hw_out = g.out_len();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, &v) in src[oh * g.out_w..(oh + 1) * g.out_w].iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_uses_floor_division() {
        assert_eq!(out_extent(224, 7, 2, 3).unwrap(), 112);
        assert_eq!(out_extent(112, 3, 2, 1).unwrap(), 56);
        assert_eq!(out_extent(32, 3, 2, 1).unwrap(), 16);
        assert_eq!(out_extent(32, 3, 1, 1).unwrap(), 32);
        assert_eq!(out_extent(4, 3, 2, 1).unwrap(), 2);
        assert!(out_extent(1, 3, 1, 0).is_err());
        assert!(out_extent(4, 3, 0, 1).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Window::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.channels * g.height * g.width).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col_t(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_t_add(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }
}
