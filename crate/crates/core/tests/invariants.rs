//! Property tests over randomly drawn shapes and values.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resnet_core::data::{augment_with, encode_cifar_batch, load_cifar_batch, AUGMENT_PAD};
use resnet_core::harness::checkpoint::{decode, encode, Checkpoint, TensorData};
use resnet_core::harness::evaluate::count_errors;
use resnet_core::nn::functional as f;
use resnet_core::optim::{lr_at, OptHyper, RunningMean, Warmup, WarmupMonitor};
use resnet_core::tensor::out_extent;
use resnet_core::Tensor;

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&shape, |_| rng.random_range(-2.0..2.0)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_geometry() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, usize)> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..10, 1usize..10, prop_oneof![Just(1usize), Just(3), Just(5)], 1usize..3)
        .prop_flat_map(|(n, c, co, h, w, k, s)| (Just(n), Just(c), Just(co), Just(h), Just(w), Just(k), Just(s), 0..=k / 2))
        .prop_filter("window fits", |&(_, _, _, h, w, k, _, p)| h + 2 * p >= k && w + 2 * p >= k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn extent_counts_window_positions(input in 1usize..40, k in 1usize..8, stride in 1usize..4, pad in 0usize..4) {
        prop_assume!(input + 2 * pad >= k);
        let positions = (0..).map(|i| i * stride).take_while(|&o| o + k <= input + 2 * pad).count();
        prop_assert_eq!(out_extent(input, k, stride, pad).unwrap(), positions);
    }

    /// The backward pass is the adjoint of the forward map in both arguments.
    #[test]
    fn conv_backward_is_adjoint((n, c, co, h, w, k, s, p) in conv_geometry(), seed in any::<u64>()) {
        let x = tensor(vec![n, c, h, w], seed);
        let wt = tensor(vec![co, c, k, k], seed ^ 1);
        let y = f::conv2d(&x, &wt, s, p).unwrap();
        let dy = tensor(y.shape().to_vec(), seed ^ 2);
        let (dx, dw) = f::conv2d_backward(&x, &wt, &dy, s, p, true).unwrap();
        let lhs = dot(y.data(), dy.data());
        let tol = 1e-10 * (1.0 + lhs.abs());
        prop_assert!((lhs - dot(x.data(), dx.unwrap().data())).abs() < tol);
        prop_assert!((lhs - dot(wt.data(), dw.data())).abs() < tol);
    }

    #[test]
    fn conv_is_linear_in_input((n, c, co, h, w, k, s, p) in conv_geometry(), seed in any::<u64>(), a in -3.0f64..3.0) {
        let x = tensor(vec![n, c, h, w], seed);
        let z = tensor(vec![n, c, h, w], seed ^ 3);
        let wt = tensor(vec![co, c, k, k], seed ^ 1);
        let mix = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + z.data()[i]).unwrap();
        let lhs = f::conv2d(&mix, &wt, s, p).unwrap();
        let (yx, yz) = (f::conv2d(&x, &wt, s, p).unwrap(), f::conv2d(&z, &wt, s, p).unwrap());
        for i in 0..lhs.numel() {
            let want = a * yx.data()[i] + yz.data()[i];
            prop_assert!((lhs.data()[i] - want).abs() < 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn batchnorm_train_standardizes(n in 1usize..5, c in 1usize..4, hw in 1usize..5, seed in any::<u64>()) {
        prop_assume!(n * hw * hw >= 2);
        let x = tensor(vec![n, c, hw, hw], seed);
        let ones = Tensor::from_fn(&[c], |_| 1.0).unwrap();
        let zeros = Tensor::zeros(&[c]).unwrap();
        let (y, stats) = f::batchnorm_train(&x, &ones, &zeros, 1e-5).unwrap();
        let m = (n * hw * hw) as f64;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|b| {
                let start = (b * c + ch) * hw * hw;
                y.data()[start..start + hw * hw].to_vec()
            }).collect();
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            prop_assert!(mean.abs() < 1e-9);
            let want = stats.var[ch] / (stats.var[ch] + 1e-5);
            prop_assert!((var - want).abs() < 1e-9, "{} vs {}", var, want);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized(n in 1usize..5, k in 1usize..12, seed in any::<u64>(), shift in -500.0f64..500.0) {
        let x = tensor(vec![n, k], seed);
        let moved = Tensor::from_fn(x.shape(), |i| x.data()[i] + shift).unwrap();
        let (a, b) = (f::softmax(&x).unwrap(), f::softmax(&moved).unwrap());
        for row in a.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn shortcut_pad_backward_is_adjoint(n in 1usize..3, c in 1usize..4, extra in 0usize..4, hw in 1usize..9, stride in 1usize..3, seed in any::<u64>()) {
        let x = tensor(vec![n, c, hw, hw], seed);
        let y = f::shortcut_pad(&x, c + extra, stride).unwrap();
        let dy = tensor(y.shape().to_vec(), seed ^ 5);
        let dx = f::shortcut_pad_backward(x.shape(), &dy, stride).unwrap();
        prop_assert!((dot(y.data(), dy.data()) - dot(x.data(), dx.data())).abs() < 1e-10);
    }

    #[test]
    fn maxpool_output_is_a_window_member(n in 1usize..3, c in 1usize..3, hw in 1usize..10, seed in any::<u64>()) {
        let x = tensor(vec![n, c, hw, hw], seed);
        let (y, arg) = f::maxpool(&x, 3, 2, 1).unwrap();
        for (o, &i) in arg.iter().enumerate() {
            prop_assert_eq!(x.data()[i], y.data()[o]);
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..5), 0..5),
        iter in any::<u64>(),
        fingerprint in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let tensors: Vec<(String, TensorData)> = shapes.into_iter().enumerate().map(|(i, s)| {
            let t = tensor(s, seed.wrapping_add(i as u64));
            let data = if i % 2 == 0 {
                TensorData::F64(t)
            } else {
                TensorData::F32(Tensor::new(t.shape(), t.data().iter().map(|&v| v as f32).collect()).unwrap())
            };
            (format!("param.layer{i}.weight"), data)
        }).collect();
        let ckpt = Checkpoint { fingerprint, iter, meta: serde_json::json!({"lr": 0.1, "iter": iter}), tensors };
        let bytes = encode(&ckpt).unwrap();
        let back = decode(&bytes, Some(fingerprint)).unwrap();
        prop_assert!(back == ckpt);
        prop_assert!(encode(&back).unwrap() == bytes);
        if fingerprint != 0 {
            prop_assert!(decode(&bytes, Some(!fingerprint)).is_err());
        }
    }

    #[test]
    fn checkpoint_rejects_truncation(cut in 1usize..64, seed in any::<u64>()) {
        let ckpt = Checkpoint {
            fingerprint: 7,
            iter: 3,
            meta: serde_json::json!({}),
            tensors: vec![("param.w".into(), TensorData::F64(tensor(vec![3, 4], seed)))],
        };
        let bytes = encode(&ckpt).unwrap();
        prop_assert!(decode(&bytes[..bytes.len().saturating_sub(cut)], None).is_err());
    }

    #[test]
    fn cifar_records_round_trip(m in 1usize..4, labels_seed in any::<u64>(), bytes_seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(bytes_seed);
        let pixels: Vec<f32> = (0..m * 3072).map(|_| rng.random_range(0u8..=255) as f32 / 255.0).collect();
        let images = Tensor::new(&[m, 3, 32, 32], pixels).unwrap();
        let labels: Vec<usize> = (0..m).map(|i| ((labels_seed >> (4 * i)) % 10) as usize).collect();
        let bytes = encode_cifar_batch(&images, &labels).unwrap();
        prop_assert_eq!(bytes.len(), m * 3073);
        let (back, back_labels) = load_cifar_batch(&bytes).unwrap();
        prop_assert_eq!(back_labels, labels);
        prop_assert_eq!(back, images);
    }

    #[test]
    fn centre_crop_without_flip_is_identity(hw in 1usize..12, seed in any::<u64>()) {
        let x = tensor(vec![3, hw, hw], seed);
        let src: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();
        let mut dst = vec![0f32; src.len()];
        augment_with(&src, [3, hw, hw], AUGMENT_PAD, AUGMENT_PAD, false, &mut dst);
        prop_assert_eq!(&dst, &src);
        let mut flipped = vec![0f32; src.len()];
        augment_with(&src, [3, hw, hw], AUGMENT_PAD, AUGMENT_PAD, true, &mut flipped);
        let mut twice = vec![0f32; src.len()];
        augment_with(&flipped, [3, hw, hw], AUGMENT_PAD, AUGMENT_PAD, true, &mut twice);
        prop_assert_eq!(twice, src);
    }

    #[test]
    fn crops_shift_content(hw in 1usize..10, dy in 0usize..=2 * AUGMENT_PAD, dx in 0usize..=2 * AUGMENT_PAD, seed in any::<u64>()) {
        let x = tensor(vec![1, hw, hw], seed);
        let src: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();
        let mut dst = vec![0f32; src.len()];
        augment_with(&src, [1, hw, hw], dy, dx, false, &mut dst);
        for y in 0..hw {
            for xx in 0..hw {
                let (sy, sx) = ((y + dy) as isize - AUGMENT_PAD as isize, (xx + dx) as isize - AUGMENT_PAD as isize);
                let want = if sy >= 0 && sx >= 0 && (sy as usize) < hw && (sx as usize) < hw { src[sy as usize * hw + sx as usize] } else { 0.0 };
                prop_assert_eq!(dst[y * hw + xx], want);
            }
        }
    }

    #[test]
    fn lr_never_increases_without_warmup(milestones in prop::collection::btree_set(1u64..1000, 0..4), a in 0u64..1200, b in 0u64..1200) {
        let h = OptHyper { milestones: milestones.into_iter().collect(), ..OptHyper::cifar() };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(&h, hi, false) <= lr_at(&h, lo, false));
        prop_assert!(lr_at(&h, lo, false) <= h.base_lr);
    }

    #[test]
    fn running_mean_covers_last_window(values in prop::collection::vec(0.0f64..1.0, 1..60), cap in 1usize..20) {
        let mut rm = RunningMean::new(cap);
        for &v in &values {
            rm.push(v);
        }
        let tail = &values[values.len().saturating_sub(cap)..];
        let want = tail.iter().sum::<f64>() / tail.len() as f64;
        prop_assert!((rm.mean().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn warmup_latches_off(errors in prop::collection::vec(0.0f64..1.0, 1..50)) {
        let mut w = WarmupMonitor::new(Some(Warmup { lr: 0.01, exit_train_error: 0.8 }));
        let mut seen_exit = false;
        for &e in &errors {
            seen_exit |= e < 0.8;
            prop_assert_eq!(w.update(e), !seen_exit);
        }
    }

    #[test]
    fn error_count_matches_argmax(n in 1usize..8, k in 2usize..6, seed in any::<u64>()) {
        let logits = tensor(vec![n, k], seed);
        let labels: Vec<usize> = (0..n).map(|i| (seed as usize).wrapping_add(i) % k).collect();
        let mut want = 0;
        for (row, &l) in logits.data().chunks(k).zip(&labels) {
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            want += usize::from(best != l);
        }
        prop_assert_eq!(count_errors(&logits, &labels).unwrap(), want);
    }
}
