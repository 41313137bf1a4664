//! Standard deviation of every 3x3 layer's post-BN, pre-nonlinearity response.

use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::Mode;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseStats {
    /// One population std per 3x3 layer, in network order.
    pub layer_order: Vec<f64>,
}

impl ResponseStats {
    pub fn descending(&self) -> Vec<f64> {
        let mut v = self.layer_order.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    pub fn median(&self) -> f64 {
        median(&self.layer_order)
    }

    /// `layer,std,sorted_std`: row `i` holds layer `i`'s std and the `i`-th largest std.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("# respstd v1\nlayer,std,sorted_std\n");
        for (i, (a, b)) in self.layer_order.iter().zip(self.descending()).enumerate() {
            let _ = writeln!(s, "{},{},{}", i + 1, a, b);
        }
        s
    }
}

/// Median of a non-empty list (mean of the two middle values for even length);
/// NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Response std of every 3x3 layer over `images` `[M, C, H, W]`, fed in
/// chunks of `batch`. In [`Mode::BatchStats`] each chunk is normalized by its
/// own statistics; [`Mode::Train`] is refused because it would move the
/// running averages.
pub fn layer_response_std<T: Element>(net: &mut Network<T>, images: &Tensor<T>, mode: Mode, batch: usize) -> Result<ResponseStats> {
    if mode == Mode::Train {
        return Err(Error::InvalidArgument("response statistics must not update BN running averages".into()));
    }
    let (m, c, h, w) = images.dims4("layer_response_std")?;
    if m == 0 {
        return Err(Error::Data("no images to measure responses on".into()));
    }
    let per = c * h * w;
    let mut sums: Vec<(f64, f64, usize)> = Vec::new();
    for start in (0..m).step_by(batch.max(1)) {
        let n = batch.max(1).min(m - start);
        let x = Tensor::new(&[n, c, h, w], images.data()[start * per..(start + n) * per].to_vec())?;
        let mut tape = Tape::new();
        let xv = tape.input(x, false);
        let fwd = net.forward(&mut tape, xv, mode)?;
        if sums.is_empty() {
            sums = vec![(0.0, 0.0, 0); fwd.responses.len()];
        }
        for (acc, &r) in sums.iter_mut().zip(&fwd.responses) {
            for &v in tape.value(r).data() {
                let v = v.as_f64();
                acc.0 += v;
                acc.1 += v * v;
            }
            acc.2 += tape.value(r).numel();
        }
    }
    let layer_order = sums
        .into_iter()
        .map(|(s, ss, n)| {
            let mean = s / n as f64;
            (ss / n as f64 - mean * mean).max(0.0).sqrt()
        })
        .collect();
    Ok(ResponseStats { layer_order })
}
