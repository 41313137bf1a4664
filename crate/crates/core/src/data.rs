//! CIFAR-10 binary ingestion, mean subtraction, pad-crop-flip augmentation,
//! train/val splitting and synthetic stand-in datasets.

use std::path::Path;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const RECORD_LEN: usize = 1 + CIFAR_PIXELS;
/// Zero padding on each side before random cropping.
pub const AUGMENT_PAD: usize = 4;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Rewrites one source image into a destination buffer of the same size.
pub type ImageMap<'a> = &'a mut dyn FnMut(&[f32], &mut [f32]);

/// Images `[M, C, H, W]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Mean image subtracted from `images`, if any.
    pub mean: Option<Tensor<f32>>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (m, _, _, _) = images.dims4("dataset")?;
        if m != labels.len() {
            return Err(Error::Data(format!("{m} images but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            mean: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// New dataset holding the given examples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("empty subset".into()));
        }
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("index {i} out of range for {} examples", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        Ok(Dataset {
            images: Tensor::new(&[indices.len(), c, h, w], data)?,
            labels,
            classes: self.classes,
            mean: self.mean.clone(),
        })
    }

    /// Stack the selected images into a batch, optionally augmented.
    pub fn batch(&self, indices: &[usize], augment: Option<ImageMap<'_>>) -> Result<(Tensor<f32>, Vec<usize>)> {
        let n = self.image_len();
        let mut data = vec![0f32; indices.len() * n];
        let mut labels = Vec::with_capacity(indices.len());
        let mut aug = augment;
        for (slot, &i) in data.chunks_exact_mut(n).zip(indices) {
            if i >= self.len() {
                return Err(Error::Data(format!("index {i} out of range for {} examples", self.len())));
            }
            match aug.as_mut() {
                Some(f) => f(self.image(i), slot),
                None => slot.copy_from_slice(self.image(i)),
            }
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }
}

/// Decode CIFAR-10 binary records: one label byte, then the R, G and B planes
/// row-major, scaled to [0, 1].
pub fn load_cifar_batch(bytes: &[u8]) -> Result<(Tensor<f32>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::Data(format!(
            "{} bytes is not a positive multiple of the {RECORD_LEN}-byte record",
            bytes.len()
        )));
    }
    let m = bytes.len() / RECORD_LEN;
    let mut data = Vec::with_capacity(m * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(m);
    for rec in bytes.chunks_exact(RECORD_LEN) {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::LabelOutOfRange {
                label,
                classes: CIFAR_CLASSES,
            });
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor::new(&[m, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels))
}

/// Inverse of [`load_cifar_batch`]; pixel values are rounded to the nearest byte.
pub fn encode_cifar_batch(images: &Tensor<f32>, labels: &[usize]) -> Result<Vec<u8>> {
    let (m, c, h, w) = images.dims4("encode_cifar_batch")?;
    if (c, h, w) != (3, CIFAR_SIDE, CIFAR_SIDE) || m != labels.len() {
        return Err(Error::Data(format!(
            "expected [{}, 3, 32, 32] images, got {:?}",
            labels.len(),
            images.shape()
        )));
    }
    let mut out = Vec::with_capacity(m * RECORD_LEN);
    for (img, &label) in images.data().chunks_exact(CIFAR_PIXELS).zip(labels) {
        if label >= CIFAR_CLASSES {
            return Err(Error::LabelOutOfRange {
                label,
                classes: CIFAR_CLASSES,
            });
        }
        out.push(label as u8);
        out.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

fn concat(parts: Vec<(Tensor<f32>, Vec<usize>)>) -> Result<Dataset> {
    let m: usize = parts.iter().map(|p| p.1.len()).sum();
    let mut data = Vec::with_capacity(m * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(m);
    for (t, l) in parts {
        data.extend(t.into_data());
        labels.extend(l);
    }
    Dataset::new(
        Tensor::new(&[m, 3, CIFAR_SIDE, CIFAR_SIDE], data)?,
        labels,
        CIFAR_CLASSES,
    )
}

/// Load the five training files and the test file from `dir`.
pub fn load_cifar_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let read = |name: &str| -> Result<(Tensor<f32>, Vec<usize>)> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| {
            Error::Data(format!(
                "cannot read {} ({e}); download the CIFAR-10 binary version \
                 (cifar-10-binary.tar.gz from https://www.cs.toronto.edu/~kriz/cifar.html) \
                 and pass the extracted cifar-10-batches-bin directory",
                path.display()
            ))
        })?;
        load_cifar_batch(&bytes)
    };
    let train = TRAIN_FILES.iter().map(|f| read(f)).collect::<Result<Vec<_>>>()?;
    let test = read(TEST_FILE)?;
    Ok((concat(train)?, concat(vec![test])?))
}

/// Shuffle with `seed` and split off the last `val` examples.
pub fn split_holdout(ds: &Dataset, val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if val == 0 || val >= ds.len() {
        return Err(Error::Data(format!("cannot hold out {val} of {} examples", ds.len())));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = idx.split_at(ds.len() - val);
    Ok((ds.subset(a)?, ds.subset(b)?))
}

/// The 45k/5k split of the 50k CIFAR-10 training images.
pub fn split_train_val(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.len() != 50_000 {
        return Err(Error::Data(format!("expected 50000 training examples, got {}", ds.len())));
    }
    split_holdout(ds, 5_000, seed)
}

/// Crop a `[C, H, W]` window at offset `(dy, dx)` out of the image zero-padded
/// by [`AUGMENT_PAD`], mirrored horizontally afterwards if `flip`.
pub fn augment_with(src: &[f32], shape: [usize; 3], dy: usize, dx: usize, flip: bool, dst: &mut [f32]) {
    let [c, h, w] = shape;
    debug_assert!(dy <= 2 * AUGMENT_PAD && dx <= 2 * AUGMENT_PAD);
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - AUGMENT_PAD as isize;
            let row = &mut dst[(ch * h + y) * w..(ch * h + y + 1) * w];
            if sy < 0 || sy >= h as isize {
                row.fill(0.0);
                continue;
            }
            let srow = &src[(ch * h + sy as usize) * w..(ch * h + sy as usize + 1) * w];
            for (x, out) in row.iter_mut().enumerate() {
                let ox = if flip { w - 1 - x } else { x };
                let sx = (ox + dx) as isize - AUGMENT_PAD as isize;
                *out = if sx < 0 || sx >= w as isize { 0.0 } else { srow[sx as usize] };
            }
        }
    }
}

/// Random pad-and-crop plus horizontal flip with probability 0.5.
pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
    if image.rank() != 3 {
        return Err(Error::Rank {
            op: "augment",
            expected: 3,
            got: image.shape().to_vec(),
        });
    }
    let s = image.shape();
    let mut out = image.zeros_like();
    augment_random(image.data(), [s[0], s[1], s[2]], rng, out.data_mut());
    Ok(out)
}

pub(crate) fn augment_random<R: Rng + ?Sized>(src: &[f32], shape: [usize; 3], rng: &mut R, dst: &mut [f32]) {
    let dy = rng.random_range(0..=2 * AUGMENT_PAD);
    let dx = rng.random_range(0..=2 * AUGMENT_PAD);
    let flip = rng.random_bool(0.5);
    augment_with(src, shape, dy, dx, flip, dst);
}

pub fn hflip(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if image.rank() != 3 {
        return Err(Error::Rank {
            op: "hflip",
            expected: 3,
            got: image.shape().to_vec(),
        });
    }
    let w = image.shape()[2];
    let mut out = image.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanMode {
    /// One mean per pixel and channel, `[C, H, W]`.
    #[default]
    PerPixel,
    /// One mean per channel, broadcast over the image.
    PerChannel,
}

/// Mean image of `[M, C, H, W]` images, accumulated in f64.
pub fn compute_mean(images: &Tensor<f32>, mode: MeanMode) -> Result<Tensor<f32>> {
    let (m, c, h, w) = images.dims4("compute_mean")?;
    let n = c * h * w;
    let mut acc = vec![0f64; n];
    for img in images.data().chunks_exact(n) {
        for (a, &v) in acc.iter_mut().zip(img) {
            *a += v as f64;
        }
    }
    if mode == MeanMode::PerChannel {
        for ch in acc.chunks_exact_mut(h * w) {
            let s = ch.iter().sum::<f64>() / (h * w) as f64;
            ch.fill(s);
        }
    }
    Tensor::new(&[c, h, w], acc.into_iter().map(|a| (a / m as f64) as f32).collect())
}

/// Subtract `mean` from every image of `ds` and record it.
pub fn subtract_mean(ds: &mut Dataset, mean: &Tensor<f32>) -> Result<()> {
    if mean.shape() != ds.image_shape() {
        return Err(Error::ShapeMismatch {
            op: "subtract_mean",
            lhs: ds.images.shape().to_vec(),
            rhs: mean.shape().to_vec(),
        });
    }
    for img in ds.images.data_mut().chunks_exact_mut(mean.numel()) {
        for (v, &mu) in img.iter_mut().zip(mean.data()) {
            *v -= mu;
        }
    }
    ds.mean = Some(mean.clone());
    Ok(())
}

/// Compute the mean on `train` and subtract it from both sets.
pub fn normalize_pair(train: &mut Dataset, test: &mut Dataset, mode: MeanMode) -> Result<Tensor<f32>> {
    let mean = compute_mean(&train.images, mode)?;
    subtract_mean(train, &mean)?;
    subtract_mean(test, &mean)?;
    Ok(mean)
}

/// Parameters of the Gaussian class-blob dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub side: usize,
    /// Standard deviation of per-image noise around each class prototype.
    pub noise: f64,
    pub seed: u64,
}

/// Each class is a random prototype image; samples add isotropic Gaussian
/// noise. Labels cycle through the classes.
pub fn blob_dataset(cfg: &BlobConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.per_class == 0 || cfg.channels == 0 || cfg.side == 0 {
        return Err(Error::InvalidArgument(format!("bad blob dataset config {cfg:?}")));
    }
    let n = cfg.channels * cfg.side * cfg.side;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    let protos: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..n).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let m = cfg.classes * cfg.per_class;
    let mut data = Vec::with_capacity(m * n);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let label = i % cfg.classes;
        labels.push(label);
        data.extend(protos[label].iter().map(|&p| (p + cfg.noise * unit.sample(&mut rng)) as f32));
    }
    Dataset::new(Tensor::new(&[m, cfg.channels, cfg.side, cfg.side], data)?, labels, cfg.classes)
}

/// CIFAR-shaped `[M, 3, 32, 32]` Gaussian blobs at noise 1.
pub fn synthetic_dataset(classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    blob_dataset(&BlobConfig {
        classes,
        per_class,
        channels: 3,
        side: CIFAR_SIDE,
        noise: 1.0,
        seed,
    })
}

/// Parameters of the textured shape dataset used when CIFAR-10 is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub train: usize,
    pub test: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Fraction of training labels replaced by a uniformly random class.
    pub label_noise: f64,
    /// Distinct texture pairs per class; each image uses one at random.
    #[serde(default = "one")]
    pub styles: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            train: 8_000,
            test: 2_000,
            noise: 0.15,
            label_noise: 0.0,
            styles: 1,
            seed: 0,
        }
    }
}

struct Palette {
    freq: [f64; 2],
    phase: f64,
    color: [f64; 3],
}

/// Ten-class `[3, 32, 32]` images in [0, 1]. A class owns `styles` pairs of
/// grating textures with colours; each image picks one and draws a random ellipse
/// (position, radii), filled with the class's foreground texture over its
/// background texture, with jittered colours and pixel noise.
pub fn shapes_dataset(cfg: &ShapesConfig) -> Result<(Dataset, Dataset)> {
    if cfg.train == 0 || cfg.test == 0 || cfg.styles == 0 || !(0.0..=1.0).contains(&cfg.label_noise) {
        return Err(Error::InvalidArgument(format!("bad shapes dataset config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes = CIFAR_CLASSES;
    let palettes: Vec<[Palette; 2]> = (0..classes * cfg.styles)
        .map(|_| {
            let mut pal = || {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let f = rng.random_range(0.15..0.9);
                Palette {
                    freq: [f * angle.cos(), f * angle.sin()],
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    color: [rng.random(), rng.random(), rng.random()],
                }
            };
            [pal(), pal()]
        })
        .collect();
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    let side = CIFAR_SIDE as f64;
    let make = |m: usize, label_noise: f64, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut data = Vec::with_capacity(m * CIFAR_PIXELS);
        let mut labels = Vec::with_capacity(m);
        for i in 0..m {
            let class = i % classes;
            let [fg, bg] = &palettes[class * cfg.styles + rng.random_range(0..cfg.styles)];
            let (cy, cx) = (rng.random_range(6.0..side - 6.0), rng.random_range(6.0..side - 6.0));
            let (ry, rx) = (rng.random_range(4.0..11.0), rng.random_range(4.0..11.0));
            let jitter: [f64; 3] = std::array::from_fn(|_| 0.15 * unit.sample(rng));
            let shift = rng.random_range(0.0..std::f64::consts::TAU);
            let start = data.len();
            data.resize(start + CIFAR_PIXELS, 0.0);
            let img = &mut data[start..];
            for y in 0..CIFAR_SIDE {
                for x in 0..CIFAR_SIDE {
                    let (fy, fx) = (y as f64, x as f64);
                    let inside = ((fy - cy) / ry).powi(2) + ((fx - cx) / rx).powi(2) <= 1.0;
                    let p = if inside { fg } else { bg };
                    let t = 0.5 + 0.5 * (p.freq[0] * fy + p.freq[1] * fx + p.phase + shift).sin();
                    for ch in 0..3 {
                        let v = p.color[ch] * t + jitter[ch] + cfg.noise * unit.sample(rng);
                        img[(ch * CIFAR_SIDE + y) * CIFAR_SIDE + x] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            let label = if label_noise > 0.0 && rng.random_bool(label_noise) {
                rng.random_range(0..classes)
            } else {
                class
            };
            labels.push(label);
        }
        Dataset::new(Tensor::new(&[m, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels, classes)
    };
    let train = make(cfg.train, cfg.label_noise, &mut rng)?;
    let test = make(cfg.test, 0.0, &mut rng)?;
    Ok((train, test))
}

/// Run `produce` on a helper thread, handing items over through a FIFO
/// queue holding at most `depth` prepared items, and feed each to `consume`
/// in order. Stops at the first error from either side.
pub fn prefetch<I, P, C>(depth: usize, count: usize, mut produce: P, mut consume: C) -> Result<()>
where
    I: Send,
    P: FnMut(usize) -> Result<I> + Send,
    C: FnMut(usize, I) -> Result<()>,
{
    let (tx, rx) = mpsc::sync_channel::<Result<I>>(depth.max(1));
    std::thread::scope(|s| {
        s.spawn(move || {
            for i in 0..count {
                let item = produce(i);
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });
        for i in 0..count {
            let item = rx
                .recv()
                .map_err(|_| Error::Data("prefetch producer stopped early".into()))??;
            consume(i, item)?;
        }
        Ok(())
    })
}
