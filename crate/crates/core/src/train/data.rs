//! CIFAR binary batches: parsing, normalization, augmentation and a
//! synthetic generator in the same byte format.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * SIDE * SIDE;

pub const MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordFormat {
    /// `label, pixels` (3073 bytes).
    Cifar10,
    /// `coarse, fine, pixels` (3074 bytes); the fine label is used.
    Cifar100,
}

impl RecordFormat {
    pub fn record_len(self) -> usize {
        match self {
            RecordFormat::Cifar10 => PIXELS + 1,
            RecordFormat::Cifar100 => PIXELS + 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            RecordFormat::Cifar10 => 10,
            RecordFormat::Cifar100 => 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    /// CIFAR-100 superclass.
    pub coarse: Option<u8>,
    /// Channel-major `3 × 32 × 32`.
    pub pixels: Vec<u8>,
}

pub fn parse_records(bytes: &[u8], format: RecordFormat) -> Result<Vec<CifarRecord>> {
    let len = format.record_len();
    if !bytes.len().is_multiple_of(len) {
        return Err(Error::Format(format!("{} bytes is not a whole number of {len}-byte records", bytes.len())));
    }
    bytes
        .chunks_exact(len)
        .enumerate()
        .map(|(i, r)| {
            let (coarse, label, pixels) = match format {
                RecordFormat::Cifar10 => (None, r[0], &r[1..]),
                RecordFormat::Cifar100 => (Some(r[0]), r[1], &r[2..]),
            };
            if label as usize >= format.num_classes() || coarse.is_some_and(|c| c >= 20) {
                return Err(Error::Format(format!("record {i}: label {label} out of range")));
            }
            Ok(CifarRecord { label, coarse, pixels: pixels.to_vec() })
        })
        .collect()
}

pub fn serialize_records(records: &[CifarRecord], format: RecordFormat) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * format.record_len());
    for r in records {
        if format == RecordFormat::Cifar100 {
            out.push(r.coarse.unwrap_or(0));
        }
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

/// Reads one batch file, or every `*.bin` in a directory in name order,
/// skipping `test_batch.bin` unless it is the only file.
pub fn load_cifar(path: &Path, format: RecordFormat) -> Result<Vec<CifarRecord>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        files.sort();
        let train: Vec<PathBuf> = files.iter().filter(|p| !p.ends_with("test_batch.bin") && !p.ends_with("test.bin")).cloned().collect();
        if train.is_empty() {
            files
        } else {
            train
        }
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Format(format!("no .bin batch files under {}", path.display())));
    }
    let mut out = Vec::new();
    for f in files {
        out.extend(parse_records(&std::fs::read(&f)?, format)?);
    }
    Ok(out)
}

pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    Ok(Dataset::from_records(&load_cifar(path, RecordFormat::Cifar10)?, 10))
}

/// Normalized images in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `len × 3 × 32 × 32`, per-channel standardized.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn from_records(records: &[CifarRecord], num_classes: usize) -> Self {
        let mut images = Vec::with_capacity(records.len() * PIXELS);
        for r in records {
            for (i, &p) in r.pixels.iter().enumerate() {
                let c = i / (SIDE * SIDE);
                images.push((p as f32 / 255.0 - MEAN[c]) / STD[c]);
            }
        }
        Dataset { images, labels: records.iter().map(|r| r.label as usize).collect(), num_classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset { images: self.images[..n * PIXELS].to_vec(), labels: self.labels[..n].to_vec(), num_classes: self.num_classes }
    }

    /// `[B, 3, 32, 32]` batch of the given samples, optionally augmented.
    pub fn batch<T: Scalar>(&self, indices: &[usize], mut augment: Option<&mut ChaCha8Rng>) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            let img = self.image(i);
            match augment.as_deref_mut() {
                Some(rng) => {
                    let flip = rng.random_bool(0.5);
                    let dy = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
                    let dx = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
                    data.extend(shift_flip(img, dy, dx, flip).into_iter().map(|v| T::of(v as f64)));
                }
                None => data.extend(img.iter().map(|&v| T::of(v as f64))),
            }
        }
        let t = Tensor::new(&[indices.len(), CHANNELS, SIDE, SIDE], data).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

const PAD: usize = 4;

/// Pad-by-4 random crop expressed as a shift by `(dy, dx)` with zero fill
/// (the channel mean after normalization), then optional horizontal flip.
fn shift_flip(img: &[f32], dy: isize, dx: isize, flip: bool) -> Vec<f32> {
    let mut out = vec![0.0; PIXELS];
    let s = SIDE as isize;
    for c in 0..CHANNELS {
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = (y + dy, x + dx);
                if sy < 0 || sy >= s || sx < 0 || sx >= s {
                    continue;
                }
                let ox = if flip { s - 1 - x } else { x };
                out[c * SIDE * SIDE + (y * s + ox) as usize] = img[c * SIDE * SIDE + (sy * s + sx) as usize];
            }
        }
    }
    out
}

/// Class-structured CIFAR-format records for tests and demos: each class has
/// its own colour and stripe orientation/frequency, plus per-pixel noise.
pub fn synthetic_records(n: usize, num_classes: usize, seed: u64) -> Vec<CifarRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<([f32; 3], f32, f32)> = (0..num_classes)
        .map(|_| {
            let colour = [rng.random_range(40.0..215.0), rng.random_range(40.0..215.0), rng.random_range(40.0..215.0)];
            (colour, rng.random_range(0.0..std::f32::consts::PI), rng.random_range(0.3..1.2))
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|label| {
            let (colour, angle, freq) = protos[label];
            let (dir_y, dir_x) = angle.sin_cos();
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let mut pixels = Vec::with_capacity(PIXELS);
            for tint in colour {
                for y in 0..SIDE {
                    for x in 0..SIDE {
                        let wave = (freq * (y as f32 * dir_y + x as f32 * dir_x) + phase).sin();
                        let v = tint + 40.0 * wave + rng.random_range(-30.0..30.0);
                        pixels.push(v.clamp(0.0, 255.0) as u8);
                    }
                }
            }
            CifarRecord { label: label as u8, coarse: None, pixels }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_records_parse() {
        let recs = synthetic_records(5, 10, 0);
        let bytes = serialize_records(&recs, RecordFormat::Cifar10);
        assert_eq!(bytes.len(), 5 * 3073);
        let back = parse_records(&bytes, RecordFormat::Cifar10).unwrap();
        assert_eq!(back, recs);
        assert_eq!(Dataset::from_records(&back, 10).len(), 5);
    }

    #[test]
    fn truncated_and_bad_label_rejected() {
        let bytes = serialize_records(&synthetic_records(2, 10, 0), RecordFormat::Cifar10);
        assert!(parse_records(&bytes[..bytes.len() - 1], RecordFormat::Cifar10).is_err());
        let mut bad = bytes.clone();
        bad[0] = 10;
        assert!(parse_records(&bad, RecordFormat::Cifar10).is_err());
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut bytes = vec![3u8, 42];
        bytes.extend(vec![0u8; PIXELS]);
        let r = parse_records(&bytes, RecordFormat::Cifar100).unwrap();
        assert_eq!((r[0].label, r[0].coarse), (42, Some(3)));
        assert_eq!(serialize_records(&r, RecordFormat::Cifar100), bytes);
    }

    #[test]
    fn zero_pixels_normalize_to_minus_mean_over_std() {
        let rec = CifarRecord { label: 0, coarse: None, pixels: vec![0; PIXELS] };
        let d = Dataset::from_records(&[rec], 10);
        for c in 0..3 {
            assert_eq!(d.image(0)[c * 1024], -MEAN[c] / STD[c]);
        }
    }

    #[test]
    fn zero_shift_without_flip_is_identity() {
        let d = Dataset::from_records(&synthetic_records(1, 10, 1), 10);
        assert_eq!(shift_flip(d.image(0), 0, 0, false), d.image(0));
        let twice = shift_flip(&shift_flip(d.image(0), 0, 0, true), 0, 0, true);
        assert_eq!(twice, d.image(0));
    }
}
