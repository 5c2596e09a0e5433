//! Dataset ingestion: the CIFAR-10 binary format, a deterministic synthetic
//! corpus for fast tests, per-channel normalization, batching, and the
//! standard crop/flip augmentation.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 32;
const PIXELS_PER_IMAGE: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
const RECORD_BYTES: usize = 1 + PIXELS_PER_IMAGE;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel normalization constants, computed from a training split and
/// carried in checkpoints so eval does not depend on the data at hand.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    /// (N, 3, 32, 32); values in [0,1] until `apply_norm` is called.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Set once normalization has been applied.
    pub norm: Option<NormStats>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// First `n` instances (deterministic subset for desk-scale runs).
    pub fn take(&self, n: usize) -> Result<Dataset<T>> {
        if n > self.len() {
            return Err(Error::DataExhausted { requested: n, available: self.len() });
        }
        let per = self.images.numel() / self.len().max(1);
        Ok(Dataset {
            images: Tensor::new(
                vec![n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE],
                self.images.data()[..n * per].to_vec(),
            )?,
            labels: self.labels[..n].to_vec(),
            class_names: self.class_names.clone(),
            norm: self.norm,
        })
    }

    /// Channel means and standard deviations of the current pixel values.
    pub fn compute_norm(&self) -> NormStats {
        let n = self.len();
        let hw = IMAGE_SIDE * IMAGE_SIDE;
        let mut mean = [0.0f64; 3];
        let mut var = [0.0f64; 3];
        let count = (n * hw) as f64;
        for i in 0..n {
            for c in 0..IMAGE_CHANNELS {
                let base = (i * IMAGE_CHANNELS + c) * hw;
                for k in 0..hw {
                    mean[c] += Scalar::to_f64(self.images.data()[base + k]);
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for i in 0..n {
            for c in 0..IMAGE_CHANNELS {
                let base = (i * IMAGE_CHANNELS + c) * hw;
                for k in 0..hw {
                    let d = Scalar::to_f64(self.images.data()[base + k]) - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let mut std = [0.0f64; 3];
        for c in 0..3 {
            std[c] = (var[c] / count).sqrt().max(1e-8);
        }
        NormStats { mean, std }
    }

    /// Shift and scale every channel in place: x -> (x - mean) / std.
    pub fn apply_norm(&mut self, stats: &NormStats) {
        let n = self.len();
        let hw = IMAGE_SIDE * IMAGE_SIDE;
        let data = self.images.data_mut();
        for i in 0..n {
            for c in 0..IMAGE_CHANNELS {
                let m = T::from_f64(stats.mean[c]);
                let inv = T::from_f64(1.0 / stats.std[c]);
                let base = (i * IMAGE_CHANNELS + c) * hw;
                for v in &mut data[base..base + hw] {
                    *v = (*v - m) * inv;
                }
            }
        }
        self.norm = Some(*stats);
    }

    /// Gather the given instances into a batch tensor plus label slice.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::new(vec![indices.len(), IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?,
            labels,
        ))
    }
}

fn cifar_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Load the standard CIFAR-10 binary batches from a directory. Values are
/// scaled to [0,1]; call `apply_norm` afterwards.
pub fn load_cifar10<T: Scalar>(dir: &Path, split: Split) -> Result<Dataset<T>> {
    load_cifar10_files(&cifar_files(dir, split))
}

/// Load specific CIFAR-10 binary files in order.
pub fn load_cifar10_files<T: Scalar>(paths: &[PathBuf]) -> Result<Dataset<T>> {
    let mut data: Vec<T> = Vec::new();
    let mut labels = Vec::new();
    let scale = T::from_f64(1.0 / 255.0);
    for path in paths {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() % RECORD_BYTES != 0 {
            return Err(Error::TruncatedRecord {
                path: path.clone(),
                offset: ((bytes.len() / RECORD_BYTES) * RECORD_BYTES) as u64,
                record: bytes.len() / RECORD_BYTES,
            });
        }
        for (r, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
            let label = rec[0];
            if label > 9 {
                return Err(Error::InvalidLabelByte { path: path.clone(), label, record: r });
            }
            labels.push(label as usize);
            data.extend(rec[1..].iter().map(|&b| T::from_f64(b as f64) * scale));
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::new(vec![n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels,
        class_names: CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        norm: None,
    })
}

/// Write instances out in the CIFAR-10 binary layout. Pixel values are taken
/// as already in [0,1] and quantized back to bytes.
pub fn save_cifar10_bin<T: Scalar>(path: &Path, ds: &Dataset<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(ds.len() * RECORD_BYTES);
    for i in 0..ds.len() {
        bytes.push(ds.labels[i] as u8);
        let base = i * PIXELS_PER_IMAGE;
        for &v in &ds.images.data()[base..base + PIXELS_PER_IMAGE] {
            let x = Scalar::to_f64(v).clamp(0.0, 1.0);
            bytes.push((x * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Deterministic synthetic corpus: class k is an oriented grating with a
/// class-specific orientation and spatial frequency, plus mild per-instance
/// jitter and noise. Classes are separable by a shallow net by construction.
pub fn make_synthetic<T: Scalar>(classes: usize, n: usize, seed: u64) -> Result<Dataset<T>> {
    if classes == 0 || classes > 10 {
        return Err(Error::Config {
            field: "classes".into(),
            reason: format!("synthetic corpus supports 1..=10 classes, got {classes}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * PIXELS_PER_IMAGE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        let theta = std::f64::consts::PI * (k as f64) / (classes as f64) + rng.random_range(-0.06..0.06);
        let freq = 0.35 + 0.22 * k as f64 + rng.random_range(-0.02..0.02);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (st, ct) = theta.sin_cos();
        for c in 0..IMAGE_CHANNELS {
            let gain = 0.35 + 0.05 * c as f64;
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let u = ct * x as f64 + st * y as f64;
                    let v = 0.5 + gain * (freq * u + phase).sin() + rng.random_range(-0.02..0.02);
                    data.push(T::from_f64(v.clamp(0.0, 1.0)));
                }
            }
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels,
        class_names: (0..classes).map(|k| format!("pattern_{k}")).collect(),
        norm: None,
    })
}

/// Pad-4 random crop plus horizontal flip, applied per instance. `x` is a
/// gathered batch; returns a new tensor of the same shape.
pub fn augment_batch<T: Scalar>(x: &Tensor<T>, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let pad = 4usize;
    let mut out = vec![T::zero(); x.numel()];
    for i in 0..n {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_range(0..2) == 1;
        for ci in 0..c {
            let base = (i * c + ci) * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let sx = if flip { w - 1 - xx } else { xx };
                    let sy = y as isize + dy;
                    let sxx = sx as isize + dx;
                    let v = if sy >= 0 && sy < h as isize && sxx >= 0 && sxx < w as isize {
                        x.data()[base + sy as usize * w + sxx as usize]
                    } else {
                        T::zero()
                    };
                    out[base + y * w + xx] = v;
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Deterministic epoch shuffle order.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_layout_round_trips_through_bytes() {
        let mut data = vec![0.0f64; 2 * PIXELS_PER_IMAGE];
        data[..PIXELS_PER_IMAGE].iter_mut().for_each(|v| *v = 1.0);
        let ds = Dataset {
            images: Tensor::new(vec![2, 3, 32, 32], data).unwrap(),
            labels: vec![3, 7],
            class_names: CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
            norm: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        save_cifar10_bin(&path, &ds).unwrap();
        let back = load_cifar10_files::<f64>(&[path]).unwrap();
        assert_eq!(back.labels, vec![3, 7]);
        // label 3, all pixels 255 -> pre-normalization values exactly 1.0
        assert!(back.images.data()[..PIXELS_PER_IMAGE].iter().all(|&v| v == 1.0));
        assert!(back.images.data()[PIXELS_PER_IMAGE..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; RECORD_BYTES + 100]).unwrap();
        let err = load_cifar10_files::<f64>(&[path]).unwrap_err();
        match err {
            Error::TruncatedRecord { offset, record, .. } => {
                assert_eq!(offset, RECORD_BYTES as u64);
                assert_eq!(record, 1);
            }
            other => panic!("expected truncation error, got {other}"),
        }
    }

    #[test]
    fn label_byte_over_nine_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad_label.bin");
        let mut bytes = vec![0u8; RECORD_BYTES];
        bytes[0] = 11;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_cifar10_files::<f64>(&[path]).unwrap_err(),
            Error::InvalidLabelByte { label: 11, .. }
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_sized() {
        let a = make_synthetic::<f64>(4, 12, 9).unwrap();
        let b = make_synthetic::<f64>(4, 12, 9).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.len(), 12);
        let c = make_synthetic::<f64>(4, 12, 10).unwrap();
        assert_ne!(a.images.data(), c.images.data());
        let empty = make_synthetic::<f64>(3, 0, 0).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn norm_zeroes_mean_and_unitizes_std() {
        let mut ds = make_synthetic::<f64>(3, 30, 1).unwrap();
        let stats = ds.compute_norm();
        ds.apply_norm(&stats);
        let after = ds.compute_norm();
        for c in 0..3 {
            assert!(after.mean[c].abs() < 1e-10);
            assert!((after.std[c] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gather_preserves_instances() {
        let ds = make_synthetic::<f64>(2, 6, 3).unwrap();
        let (batch, labels) = ds.gather(&[4, 1]).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 32, 32]);
        assert_eq!(labels, vec![ds.labels[4], ds.labels[1]]);
        assert_eq!(
            &batch.data()[..PIXELS_PER_IMAGE],
            &ds.images.data()[4 * PIXELS_PER_IMAGE..5 * PIXELS_PER_IMAGE]
        );
        assert!(ds.gather(&[6]).is_err());
    }

    #[test]
    fn augmentation_preserves_shape_and_is_seeded() {
        let ds = make_synthetic::<f64>(2, 4, 5).unwrap();
        let (batch, _) = ds.gather(&[0, 1, 2, 3]).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = augment_batch(&batch, &mut r1).unwrap();
        let b = augment_batch(&batch, &mut r2).unwrap();
        assert_eq!(a.shape(), batch.shape());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_shift_unflipped_crop_is_identity() {
        // With a fixed rng we cannot force dy=dx=0, so check directly that the
        // shift logic is a pure translation: shifting by (0,0) without flip
        // must reproduce the input. Emulate by scanning seeds for that draw.
        let ds = make_synthetic::<f64>(1, 1, 2).unwrap();
        let (batch, _) = ds.gather(&[0]).unwrap();
        for seed in 0..5000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dy = rng.random_range(0..=8) as isize - 4;
            let dx = rng.random_range(0..=8) as isize - 4;
            let flip = rng.random_range(0..2) == 1;
            if dy == 0 && dx == 0 && !flip {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let out = augment_batch(&batch, &mut rng).unwrap();
                assert_eq!(out.data(), batch.data());
                return;
            }
        }
        panic!("no identity-draw seed found in 5000 tries");
    }

    #[test]
    fn take_subsets_and_shuffle_is_deterministic() {
        let ds = make_synthetic::<f64>(3, 9, 4).unwrap();
        let sub = ds.take(4).unwrap();
        assert_eq!(sub.len(), 4);
        assert_eq!(sub.labels, &ds.labels[..4]);
        assert!(ds.take(10).is_err());

        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(shuffled_indices(9, &mut r1), shuffled_indices(9, &mut r2));
    }
}
