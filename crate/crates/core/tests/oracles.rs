//! Layer kernels against naive loop implementations.

mod common;

use common::{close, random, Conv};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resnet_core::nn::functional as f;
use resnet_core::Tensor;

#[test]
fn conv_matches_loops_over_all_small_geometries() {
    let cases = common::conv_sweep().unwrap();
    assert!(cases > 500, "{cases}");
}

#[test]
fn conv_matches_loops_at_network_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (c, hw, co, k, s, p) in [(3, 32, 16, 3, 1, 1), (16, 16, 32, 3, 2, 1), (16, 16, 32, 1, 2, 0), (8, 12, 8, 3, 1, 1), (4, 15, 6, 7, 2, 3)] {
        let conv = Conv { n: 3, c, h: hw, w: hw, co, k, s, p };
        conv.check(&mut rng).unwrap_or_else(|e| panic!("c{c} hw{hw} k{k} s{s}: {e}"));
    }
}

#[test]
fn single_precision_conv_tracks_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (c, hw, co, s) in [(16, 32, 16, 1), (5, 9, 7, 1), (16, 16, 32, 2)] {
        let x = random(&[4, c, hw, hw], &mut rng);
        let w = random(&[co, c, 3, 3], &mut rng);
        let y = f::conv2d(&x, &w, s, 1).unwrap();
        let dy = random(y.shape(), &mut rng);
        let (dx, dw) = f::conv2d_backward(&x, &w, &dy, s, 1, true).unwrap();
        let single = |t: &Tensor<f64>| Tensor::new(t.shape(), t.data().iter().map(|&v| v as f32).collect()).unwrap();
        let widen = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let (x32, w32, dy32) = (single(&x), single(&w), single(&dy));
        let y32 = f::conv2d(&x32, &w32, s, 1).unwrap();
        let (dx32, dw32) = f::conv2d_backward(&x32, &w32, &dy32, s, 1, true).unwrap();
        close(&widen(&y32), y.data(), 1e-4).unwrap();
        close(&widen(&dx32.unwrap()), dx.unwrap().data(), 1e-4).unwrap();
        close(&widen(&dw32), dw.data(), 1e-4).unwrap();
    }
}

#[test]
fn matmul_matches_loops() {
    assert_eq!(common::matmul_sweep().unwrap(), 216);
}

#[test]
fn matmul_matches_loops_past_kernel_tiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (m, k, n) in [(17, 33, 9), (64, 5, 130), (1, 200, 1)] {
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
        close(a.matmul(&b).unwrap().data(), &want, 1e-12).unwrap();
    }
}

#[test]
fn maxpool_matches_loops() {
    assert!(common::maxpool_sweep().unwrap() > 150);
}

#[test]
fn softmax_and_cross_entropy_match_definition() {
    assert_eq!(common::softmax_sweep().unwrap(), 108);
}

#[test]
fn global_pool_and_linear_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[3, 4, 5, 6], &mut rng);
    let g = f::global_avg_pool(&x).unwrap();
    assert_eq!(g.shape(), [3, 4]);
    for (i, plane) in x.data().chunks(30).enumerate() {
        assert!((g.data()[i] - plane.iter().sum::<f64>() / 30.0).abs() < 1e-12);
    }
    let w = random(&[4, 10], &mut rng);
    let b = random(&[10], &mut rng);
    let y = f::linear(&g, &w, &b).unwrap();
    for i in 0..3 {
        for j in 0..10 {
            let want = b.data()[j] + (0..4).map(|l| g.data()[i * 4 + l] * w.data()[l * 10 + j]).sum::<f64>();
            assert!((y.data()[i * 10 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_pad_shortcut_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for hw in 1..=6 {
        let x = random(&[2, 3, hw, hw], &mut rng);
        let y = f::shortcut_pad(&x, 5, 2).unwrap();
        let o = hw.div_ceil(2);
        assert_eq!(y.shape(), [2, 5, o, o]);
        for b in 0..2 {
            for c in 0..5 {
                for i in 0..o {
                    for j in 0..o {
                        let got = y.data()[((b * 5 + c) * o + i) * o + j];
                        let want = if c < 3 { x.data()[((b * 3 + c) * hw + 2 * i) * hw + 2 * j] } else { 0.0 };
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }
}
