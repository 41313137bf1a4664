use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::Mode;
use crate::tensor::{Element, Tensor};

/// Number of rows of `logits` `[N, K]` whose argmax differs from the label.
/// Ties resolve to the lowest class index.
pub fn count_errors<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "count_errors",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let k = logits.shape()[1];
    Ok(logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best != y
        })
        .count())
}

/// Top-1 error on the unaugmented images, BN in inference mode.
pub fn evaluate(net: &mut Network<f32>, ds: &Dataset, batch: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let shape = ds.image_shape();
    if shape != net.spec.input {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: shape.to_vec(),
            rhs: net.spec.input.to_vec(),
        });
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut wrong = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = ds.batch(chunk, None)?;
        wrong += count_errors(&net.logits(&x, Mode::Infer)?, &y)?;
    }
    Ok(wrong as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_argmax_mismatches() {
        let logits = Tensor::new(&[3, 3], vec![0.0f32, 2.0, 1.0, 5.0, 5.0, 0.0, -1.0, -2.0, -0.5]).unwrap();
        assert_eq!(count_errors(&logits, &[1, 0, 2]).unwrap(), 0);
        assert_eq!(count_errors(&logits, &[0, 1, 0]).unwrap(), 3);
        assert!(count_errors(&logits, &[0]).is_err());
    }
}
