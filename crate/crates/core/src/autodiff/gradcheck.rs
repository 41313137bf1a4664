use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over all parameter elements of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_err: f64,
    /// `(parameter index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compare tape gradients against central differences.
///
/// `build` receives a fresh tape and one input variable per entry of
/// `params`, and must return a one-element loss. It is rerun twice per
/// parameter element, so it has to be a pure function of the parameters.
pub fn grad_check<F>(build: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss {v} during finite differences")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.input(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("input gradient");
        if !analytic.all_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of parameter {pi}")));
        }
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, e);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_eps_out_of_range() {
        let p = vec![Tensor::scalar(1.0)];
        let build = |t: &mut Tape<f64>, v: &[Var]| t.sum(v[0]);
        assert!(grad_check(build, &p, 1e-2).is_err());
        assert!(grad_check(build, &p, 1e-9).is_err());
    }

    #[test]
    fn quadratic_passes() {
        let p = vec![Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap()];
        let build = |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        };
        let r = grad_check(build, &p, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.checked, 3);
    }
}
