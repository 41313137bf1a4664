//! End-to-end training, evaluation and data loading on small inputs.

use resnet_core::arch::ShortcutOption;
use resnet_core::data::{self, BlobConfig, MeanMode, TEST_FILE, TRAIN_FILES};
use resnet_core::harness::config::{ArchConfig, DataSource, TrainConfig, CONFIG_VERSION};
use resnet_core::harness::evaluate::{count_errors, evaluate};
use resnet_core::harness::train::{train, Trainer};
use resnet_core::nn::Mode;
use resnet_core::optim::{OptHyper, Warmup};
use resnet_core::Tensor;

fn blobs(classes: usize, per_class: usize, noise: f64) -> DataSource {
    DataSource::Blobs {
        blobs: BlobConfig {
            classes,
            per_class,
            channels: 3,
            side: 32,
            noise,
            seed: 5,
        },
        test_per_class: 8,
    }
}

fn config(depth: usize, widths: [usize; 3], data: DataSource, iters: u64) -> TrainConfig {
    TrainConfig {
        version: CONFIG_VERSION,
        arch: ArchConfig {
            depth,
            residual: true,
            option: ShortcutOption::A,
            widths,
        },
        opt: OptHyper {
            milestones: vec![iters / 2, 3 * iters / 4],
            ..OptHyper::cifar()
        },
        batch_size: 16,
        total_iters: iters,
        seed: 1,
        eval_every: 50,
        log_window: 20,
        data,
        augment: false,
        mean_mode: MeanMode::PerPixel,
        bn: Default::default(),
        prefetch: 0,
        checkpoint_every: None,
    }
}

#[test]
fn separable_classes_are_fit_exactly() {
    let out = train(config(8, [4, 8, 8], blobs(2, 32, 0.3), 200)).unwrap();
    let last = out.trainer.log.last().unwrap();
    assert_eq!(last.iter, 200);
    assert_eq!(last.train_error, 0.0, "{last:?}");
    let mut net = out.trainer.net;
    assert_eq!(evaluate(&mut net, &out.train, 16).unwrap(), 0.0);
    assert_eq!(last.test_error, Some(0.0));
}

#[test]
fn warmup_holds_the_low_rate_until_error_drops() {
    let mut cfg = config(110, [2, 2, 2], blobs(10, 8, 0.2), 60);
    cfg.opt.warmup = Some(Warmup {
        lr: 0.01,
        exit_train_error: 0.8,
    });
    cfg.log_window = 5;
    cfg.eval_every = 1;
    cfg.opt.milestones = vec![1_000];
    let (train_set, _) = cfg.data.load(cfg.seed, cfg.mean_mode).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    t.run(&train_set, None).unwrap();
    let lrs: Vec<f64> = t.log.rows.iter().map(|r| r.lr).collect();
    assert_eq!(lrs[0], 0.01);
    let switch = lrs.iter().position(|&lr| lr == 0.1).expect("warmup never ended");
    assert!(lrs[..switch].iter().all(|&lr| lr == 0.01));
    assert!(lrs[switch..].iter().all(|&lr| lr == 0.1), "warmup re-entered: {lrs:?}");
    // The latch flips on the step whose windowed error first drops below 80%.
    assert!(t.log.rows[switch - 1].train_error < 0.8);
    assert!(t.log.rows[..switch - 1].iter().all(|r| r.train_error >= 0.8));
}

#[test]
fn evaluation_is_repeatable_and_matches_a_manual_count() {
    let cfg = config(8, [4, 8, 8], blobs(4, 16, 1.5), 20);
    let out = train(cfg).unwrap();
    let mut net = out.trainer.net;
    let before = net.clone();
    let a = evaluate(&mut net, &out.test, 7).unwrap();
    let b = evaluate(&mut net, &out.test, 32).unwrap();
    assert_eq!(a, b);
    assert!(net == before, "evaluation changed the network");
    let idx: Vec<usize> = (0..out.test.len()).collect();
    let (x, y) = out.test.batch(&idx, None).unwrap();
    let logits = net.logits(&x, Mode::Infer).unwrap();
    let k = logits.shape()[1];
    let mut wrong = 0;
    for (row, &label) in logits.data().chunks(k).zip(&y) {
        let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        wrong += usize::from(best != label);
    }
    assert_eq!(count_errors(&logits, &y).unwrap(), wrong);
    assert_eq!(a, wrong as f64 / out.test.len() as f64);
}

#[test]
fn logs_follow_the_schedule() {
    let mut cfg = config(8, [4, 8, 8], blobs(3, 8, 0.5), 40);
    cfg.eval_every = 15;
    cfg.opt.milestones = vec![10, 30];
    let out = train(cfg).unwrap();
    let rows = &out.trainer.log.rows;
    assert_eq!(rows.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![15, 30, 40]);
    // Each row reports the rate used by the last step it covers.
    assert_eq!(rows.iter().map(|r| r.lr).collect::<Vec<_>>(), vec![0.01, 0.01, 0.001]);
    assert!(rows.iter().all(|r| r.test_error.is_some()));
}

#[test]
fn cifar_directory_loads_with_train_mean_subtracted() {
    let dir = tempfile::tempdir().unwrap();
    let per_file = 4;
    let mut all_labels = Vec::new();
    for (f, name) in TRAIN_FILES.iter().chain([&TEST_FILE]).enumerate() {
        let imgs = Tensor::from_fn(&[per_file, 3, 32, 32], |i| ((i * 7 + f * 31) % 256) as f32 / 255.0).unwrap();
        let labels: Vec<usize> = (0..per_file).map(|i| (i + f) % 10).collect();
        if f < TRAIN_FILES.len() {
            all_labels.extend(labels.iter().copied());
        }
        std::fs::write(dir.path().join(name), data::encode_cifar_batch(&imgs, &labels).unwrap()).unwrap();
    }
    let (raw_train, raw_test) = data::load_cifar_dir(dir.path()).unwrap();
    assert_eq!((raw_train.len(), raw_test.len()), (5 * per_file, per_file));
    assert_eq!(raw_train.labels, all_labels);

    let source = DataSource::Cifar {
        dir: dir.path().to_path_buf(),
        train_subset: None,
    };
    let (train, test) = source.load(0, MeanMode::PerPixel).unwrap();
    let mean = data::compute_mean(&raw_train.images, MeanMode::PerPixel).unwrap();
    for (i, (&v, &raw)) in train.images.data().iter().zip(raw_train.images.data()).enumerate() {
        assert_eq!(v, raw - mean.data()[i % 3072]);
    }
    for (i, (&v, &raw)) in test.images.data().iter().zip(raw_test.images.data()).enumerate() {
        assert_eq!(v, raw - mean.data()[i % 3072]);
    }
    let avg: f64 = train.images.data().iter().map(|&v| v as f64).sum::<f64>() / train.images.numel() as f64;
    assert!(avg.abs() < 1e-6);

    let subset = DataSource::Cifar {
        dir: dir.path().to_path_buf(),
        train_subset: Some(8),
    };
    let (small, _) = subset.load(3, MeanMode::PerChannel).unwrap();
    assert_eq!(small.len(), 8);

    std::fs::remove_file(dir.path().join(TEST_FILE)).unwrap();
    let err = data::load_cifar_dir(dir.path()).unwrap_err();
    assert!(err.to_string().contains("test_batch.bin"), "{err}");
}

#[test]
fn config_json_round_trips() {
    let cfg = config(20, [16, 32, 64], blobs(2, 4, 1.0), 100);
    let back = TrainConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert!(TrainConfig::from_json("{\"version\": 1}").is_err());
}
