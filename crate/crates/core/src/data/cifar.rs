//! CIFAR-10 binary batches, patch tokenization and flip/crop augmentation.
//!
//! Record layout: 1 label byte, then 1024 red, 1024 green and 1024 blue
//! bytes, each plane row-major over a 32×32 image.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const RECORD: usize = 1 + SIDE * SIDE * CHANNELS;
pub const CLASSES: usize = 10;
pub const TRAIN_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_BATCH: &str = "test_batch.bin";

/// Images are `[32, 32, 3]` tensors (height, width, channel) in `[0, 1]`.
#[derive(Clone, Debug, Default)]
pub struct CifarSet {
    pub images: Vec<Tensor<f64>>,
    pub labels: Vec<usize>,
}

impl CifarSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn decode_cifar10(bytes: &[u8]) -> Result<CifarSet> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 batch of {} bytes is not a multiple of {RECORD}",
            bytes.len()
        )));
    }
    let plane = SIDE * SIDE;
    let mut set = CifarSet::default();
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Format(format!("record {i}: label {label} out of range")));
        }
        let px = &rec[1..];
        let mut hwc = Vec::with_capacity(plane * CHANNELS);
        for p in 0..plane {
            for c in 0..CHANNELS {
                hwc.push(px[c * plane + p] as f64 / 255.0);
            }
        }
        set.images.push(Tensor::new(vec![SIDE, SIDE, CHANNELS], hwc)?);
        set.labels.push(label);
    }
    Ok(set)
}

pub fn read_cifar10(path: impl AsRef<Path>) -> Result<CifarSet> {
    decode_cifar10(&fs::read(path)?)
}

/// Reads every training batch present in `dir`, in file order; at least the
/// first batch must exist.
pub fn read_training_dir(dir: impl AsRef<Path>) -> Result<CifarSet> {
    let dir = dir.as_ref();
    let mut all = read_cifar10(dir.join(TRAIN_BATCHES[0]))?;
    for name in &TRAIN_BATCHES[1..] {
        let path = dir.join(name);
        if path.exists() {
            let more = read_cifar10(path)?;
            all.images.extend(more.images);
            all.labels.extend(more.labels);
        }
    }
    Ok(all)
}

/// Non-overlapping `patch × patch` tiles in row-major order, each flattened
/// as `(dy, dx, channel)`.
pub fn extract_patches(image: &Tensor<f64>, patch: usize) -> Result<Tensor<f64>> {
    let (h, w, c) = hwc(image)?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(param_err(format!("{h}×{w} image is not divisible into {patch}-pixel patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let len = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(ph * pw * len);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                let row = (py * patch + dy) * w + px * patch;
                out.extend_from_slice(&src[row * c..(row + patch) * c]);
            }
        }
    }
    Tensor::new(vec![ph * pw, len], out)
}

/// Inverse of [`extract_patches`].
pub fn assemble_patches(patches: &Tensor<f64>, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor<f64>> {
    let pw = w / patch;
    let mut out = vec![0.0; h * w * c];
    for (k, tile) in patches.data().chunks_exact(patch * patch * c).enumerate() {
        let (py, px) = (k / pw, k % pw);
        for dy in 0..patch {
            let row = (py * patch + dy) * w + px * patch;
            out[row * c..(row + patch) * c].copy_from_slice(&tile[dy * patch * c..(dy + 1) * patch * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

fn hwc(image: &Tensor<f64>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::Dimension {
            op: "image",
            left: s.to_vec(),
            right: vec![SIDE, SIDE, CHANNELS],
        }),
    }
}

pub const CROP_PAD: usize = 4;

/// Flip and crop offsets drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub dy: usize,
    pub dx: usize,
}

impl AugmentDraw {
    pub fn sample(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        Self {
            flip: rng.gen_bool(0.5),
            dy: rng.gen_range(0..=2 * CROP_PAD),
            dx: rng.gen_range(0..=2 * CROP_PAD),
        }
    }
}

pub fn flip_horizontal(image: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (h, w, c) = hwc(image)?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let at = (y * w + x) * c;
            out.extend_from_slice(&src[at..at + c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Zero-pads by [`CROP_PAD`] and crops back to the original extent at
/// offset `(dy, dx)` into the padded image.
pub fn pad_crop(image: &Tensor<f64>, dy: usize, dx: usize) -> Result<Tensor<f64>> {
    let (h, w, c) = hwc(image)?;
    let src = image.data();
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let sy = (y + dy) as isize - CROP_PAD as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = (x + dx) as isize - CROP_PAD as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let from = (sy as usize * w + sx as usize) * c;
            out[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Training-time augmentation, deterministic in `(seed, index)`.
pub fn augment(image: &Tensor<f64>, seed: u64, index: u64) -> Result<Tensor<f64>> {
    let d = AugmentDraw::sample(seed, index);
    let img = if d.flip { flip_horizontal(image)? } else { image.clone() };
    pad_crop(&img, d.dy, d.dx)
}
