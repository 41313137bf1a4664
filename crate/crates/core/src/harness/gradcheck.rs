//! Finite-difference gradient checks over every layer type and over whole
//! residual blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check, GradCheckReport, Tape, Var};
use crate::blocks::{BasicBlockParams, Block, BottleneckParams, ShortcutKind};
use crate::error::Result;
use crate::nn::{BnConfig, BnParams, Entry, EntryMut, Mode, Module};
use crate::tensor::Tensor;

/// Worst relative error tolerated by [`run_suite`] callers.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err <= TOLERANCE
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal)).expect("valid shape")
}

/// Values bounded away from zero by at least `gap`, so kinks stay out of
/// reach of the finite-difference step.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        v.signum() * (v.abs() + gap)
    })
    .expect("valid shape")
}

/// Weighted sum `sum(y * r)` so every output element gets a distinct weight.
fn project(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    tape.sum(p)
}

fn with_projection<F>(out_shape: &[usize], seed: u64, f: F) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let r = randn(out_shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37));
    move |t: &mut Tape<f64>, v: &[Var]| {
        let y = f(t, v)?;
        project(t, y, &r)
    }
}

pub type ModuleForward<M> = dyn Fn(&mut M, &mut Tape<f64>, Var) -> Result<Var>;

/// Central-difference check of a module's parameters and its input.
///
/// The module runs in [`Mode::BatchStats`] so nothing is mutated between
/// evaluations.
pub fn grad_check_module<M>(module: &mut M, x: &Tensor<f64>, r: &Tensor<f64>, eps: f64, forward: &ModuleForward<M>) -> Result<GradCheckReport>
where
    M: Module<f64>,
{
    let loss_of = |m: &mut M, x: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone(), false);
        let y = forward(m, &mut tape, xv)?;
        let l = project(&mut tape, y, r)?;
        tape.value(l).item()
    };

    let mut tape = Tape::new();
    let xv = tape.input(x.clone(), true);
    let y = forward(module, &mut tape, xv)?;
    let l = project(&mut tape, y, r)?;
    let grads = tape.backward(l)?;
    let mut analytic = vec![grads.get(xv).cloned().unwrap_or_else(|| x.zeros_like())];
    module.visit_mut("", &mut |_, e| {
        if let EntryMut::Param(p) = e {
            analytic.push(grads.param(p));
        }
    });

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut record = |pi: usize, e: usize, a: f64, numeric: f64| {
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (pi, e);
        }
    };

    let mut xw = x.clone();
    for e in 0..x.numel() {
        let orig = x.data()[e];
        xw.data_mut()[e] = orig + eps;
        let plus = loss_of(module, &xw)?;
        xw.data_mut()[e] = orig - eps;
        let minus = loss_of(module, &xw)?;
        xw.data_mut()[e] = orig;
        record(0, e, analytic[0].data()[e], (plus - minus) / (2.0 * eps));
    }

    for (pi, grad) in analytic.iter().enumerate().skip(1) {
        for e in 0..grad.numel() {
            let orig = get_param(module, pi, e);
            set_param(module, pi, e, orig + eps);
            let plus = loss_of(module, x)?;
            set_param(module, pi, e, orig - eps);
            let minus = loss_of(module, x)?;
            set_param(module, pi, e, orig);
            record(pi, e, grad.data()[e], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

fn get_param<M: Module<f64>>(m: &M, index: usize, element: usize) -> f64 {
    let (mut k, mut out) = (0, 0.0);
    m.visit("", &mut |_, e| {
        if let Entry::Param(p) = e {
            k += 1;
            if k == index {
                out = p.value.data()[element];
            }
        }
    });
    out
}

/// Parameters are numbered from 1 in visiting order; 0 is the input.
fn set_param<M: Module<f64>>(m: &mut M, index: usize, element: usize, value: f64) {
    let mut k = 0;
    m.visit_mut("", &mut |_, e| {
        if let EntryMut::Param(p) = e {
            k += 1;
            if k == index {
                p.value.data_mut()[element] = value;
            }
        }
    });
}

fn layer_cases(eps: f64) -> Result<Vec<GradCheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(GradCheckCase {
            name: name.to_string(),
            report,
        })
    };

    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (3, 1, 0)] {
        let x = randn(&[2, 3, 5, 5], &mut rng);
        let w = randn(&[4, 3, k, k], &mut rng);
        let o = (5 + 2 * pad - k) / stride + 1;
        let f = with_projection(&[2, 4, o, o], 1, move |t, v| t.conv2d(v[0], v[1], stride, pad));
        push(&format!("conv2d k{k} s{stride} p{pad}"), grad_check(f, &[x, w], eps)?);
    }

    let (x, g, b) = (randn(&[3, 2, 3, 3], &mut rng), randn(&[2], &mut rng), randn(&[2], &mut rng));
    let f = with_projection(&[3, 2, 3, 3], 2, |t, v| Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0));
    push("batchnorm train", grad_check(f, &[x.clone(), g.clone(), b.clone()], eps)?);

    let mean = randn(&[2], &mut rng);
    let var = Tensor::from_fn(&[2], |i| 0.5 + i as f64).expect("shape");
    let f = with_projection(&[3, 2, 3, 3], 3, move |t, v| t.batchnorm_infer(v[0], v[1], v[2], &mean, &var, 1e-5));
    push("batchnorm infer", grad_check(f, &[x, g, b], eps)?);

    let x = away_from_zero(&[2, 3, 4, 4], 1e-2, &mut rng);
    let f = with_projection(&[2, 3, 4, 4], 4, |t, v| t.relu(v[0]));
    push("relu", grad_check(f, &[x], eps)?);

    // Distinct values keep every window's maximum unique.
    let x = Tensor::from_fn(&[1, 2, 5, 5], |i| ((i * 37) % 50) as f64 * 0.1 + rng.random::<f64>() * 0.01).expect("shape");
    let f = with_projection(&[1, 2, 3, 3], 5, |t, v| t.maxpool(v[0], 3, 2, 1));
    push("maxpool k3 s2 p1", grad_check(f, &[x], eps)?);

    let x = randn(&[2, 3, 4, 4], &mut rng);
    let f = with_projection(&[2, 3], 6, |t, v| t.global_avg_pool(v[0]));
    push("global average pool", grad_check(f, &[x], eps)?);

    let (x, w, b) = (randn(&[3, 4], &mut rng), randn(&[4, 5], &mut rng), randn(&[5], &mut rng));
    let f = with_projection(&[3, 5], 7, |t, v| t.linear(v[0], v[1], v[2]));
    push("linear", grad_check(f, &[x, w, b], eps)?);

    let logits = randn(&[4, 5], &mut rng);
    let f = |t: &mut Tape<f64>, v: &[Var]| t.softmax_cross_entropy(v[0], &[0, 3, 4, 3]);
    push("softmax cross-entropy", grad_check(f, &[logits], eps)?);

    let x = randn(&[2, 2, 4, 4], &mut rng);
    let f = with_projection(&[2, 4, 2, 2], 8, |t, v| t.shortcut_pad(v[0], 4, 2));
    push("zero-pad shortcut", grad_check(f, &[x], eps)?);

    let (a, b) = (randn(&[2, 3], &mut rng), randn(&[2, 3], &mut rng));
    let f = with_projection(&[2, 3], 9, |t, v| t.add(v[0], v[1]));
    push("add", grad_check(f, &[a.clone(), b.clone()], eps)?);
    let f = with_projection(&[2, 3], 10, |t, v| t.mul(v[0], v[1]));
    push("mul", grad_check(f, &[a, b], eps)?);

    let x = randn(&[2, 2, 4, 4], &mut rng);
    let w = randn(&[3, 2, 3, 3], &mut rng);
    let g = Tensor::from_fn(&[3], |i| 1.0 + 0.25 * i as f64).expect("shape");
    let b = Tensor::from_fn(&[3], |i| 0.1 - 0.05 * i as f64).expect("shape");
    let f = with_projection(&[2, 3, 4, 4], 12, |t, v| {
        let h = t.conv2d(v[0], v[1], 1, 1)?;
        let (h, _) = t.batchnorm_train(h, v[2], v[3], 1e-5)?;
        t.relu(h)
    });
    push("conv+bn+relu stack", grad_check(f, &[x, w, g, b], eps)?);
    Ok(out)
}

fn jitter_bn<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng) {
    m.visit_mut("", &mut |name, e| {
        if let EntryMut::Param(p) = e {
            if name.ends_with("gamma") || name.ends_with("beta") {
                for v in p.value.data_mut() {
                    *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    });
}

fn block_cases(eps: f64) -> Result<Vec<GradCheckCase>> {
    let bn = BnConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut out = Vec::new();
    let fwd = |b: &mut Block<f64>, t: &mut Tape<f64>, x: Var| b.forward(t, x, Mode::BatchStats, &mut Vec::new());
    let specs: Vec<(&str, Block<f64>, [usize; 4])> = vec![
        (
            "basic block identity",
            Block::Basic(BasicBlockParams::new(3, 3, 1, Some(ShortcutKind::IdentitySame), bn, &mut rng)?),
            [2, 3, 4, 4],
        ),
        (
            "basic block option A",
            Block::Basic(BasicBlockParams::new(2, 4, 2, Some(ShortcutKind::ZeroPadA), bn, &mut rng)?),
            [2, 2, 4, 4],
        ),
        (
            "basic block option B",
            Block::Basic(BasicBlockParams::new(2, 4, 2, Some(ShortcutKind::ProjectionB), bn, &mut rng)?),
            [2, 2, 4, 4],
        ),
        (
            "basic block plain",
            Block::Basic(BasicBlockParams::new(2, 3, 1, None, bn, &mut rng)?),
            [2, 2, 4, 4],
        ),
        (
            "bottleneck identity",
            Block::Bottleneck(BottleneckParams::new(8, 2, 1, Some(ShortcutKind::IdentitySame), bn, &mut rng)?),
            [2, 8, 3, 3],
        ),
        (
            "bottleneck option A",
            Block::Bottleneck(BottleneckParams::new(4, 2, 2, Some(ShortcutKind::ZeroPadA), bn, &mut rng)?),
            [2, 4, 4, 4],
        ),
        (
            "bottleneck option B",
            Block::Bottleneck(BottleneckParams::new(3, 2, 2, Some(ShortcutKind::ProjectionB), bn, &mut rng)?),
            [2, 3, 4, 4],
        ),
    ];
    for (name, mut block, xs) in specs {
        jitter_bn(&mut block, &mut rng);
        let x = randn(&xs, &mut rng);
        let y = block.apply(&x, Mode::BatchStats)?;
        let r = randn(y.shape(), &mut rng);
        let report = grad_check_module(&mut block, &x, &r, eps, &fwd)?;
        out.push(GradCheckCase {
            name: name.to_string(),
            report,
        });
    }

    let mut bnp = BnParams::<f64>::new(3, bn)?;
    jitter_bn(&mut bnp, &mut rng);
    let x = randn(&[4, 3, 2, 2], &mut rng);
    let r = randn(&[4, 3, 2, 2], &mut rng);
    let report = grad_check_module(&mut bnp, &x, &r, eps, &|m, t, x| m.forward(t, x, Mode::BatchStats))?;
    out.push(GradCheckCase {
        name: "batchnorm module".into(),
        report,
    });
    Ok(out)
}

/// Every case, layers first, then blocks.
pub fn run_suite(eps: f64) -> Result<Vec<GradCheckCase>> {
    let mut cases = layer_cases(eps)?;
    cases.extend(block_cases(eps)?);
    Ok(cases)
}
