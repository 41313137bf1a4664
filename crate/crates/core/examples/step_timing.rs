//! Wall-clock cost of one training step for CIFAR networks of several depths.
//!
//! `cargo run --release -p resnet-core --example step_timing -- [batch] [widths]`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resnet_core::arch::build_cifar;
use resnet_core::autodiff::Tape;
use resnet_core::model::Network;
use resnet_core::nn::{BnConfig, Mode};
use resnet_core::optim::{step_module, OptHyper, OptState};
use resnet_core::Tensor;

fn main() -> resnet_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let batch: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(128);
    let base: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let widths = [base, 2 * base, 4 * base];
    let x = Tensor::from_fn(&[batch, 3, 32, 32], |i| ((i * 7919) % 255) as f32 / 255.0)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    let h = OptHyper::cifar();
    for n in [3, 9] {
        for residual in [false, true] {
            let spec = build_cifar(n, residual, widths)?;
            let mut net = Network::<f32>::new(&spec, BnConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
            let mut state = OptState::default();
            let reps = 5;
            let start = Instant::now();
            for _ in 0..reps {
                let mut tape = Tape::new();
                let xv = tape.input(x.clone(), false);
                let fwd = net.forward(&mut tape, xv, Mode::Train)?;
                let loss = tape.softmax_cross_entropy(fwd.logits, &labels)?;
                let grads = tape.backward(loss)?;
                step_module(&mut net, &grads, &mut state, &h, 0.1)?;
            }
            let per = start.elapsed().as_secs_f64() / reps as f64;
            println!(
                "{}-{} widths {:?} batch {batch}: {:.1} ms/step",
                if residual { "resnet" } else { "plain" },
                6 * n + 2,
                widths,
                per * 1e3
            );
        }
    }
    Ok(())
}
