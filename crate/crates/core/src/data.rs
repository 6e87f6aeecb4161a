//! Labeled image sets: a procedural generator and a CIFAR-10 binary reader.
//!
//! Images are kept as `u8` planes (R, G, B, row-major) and converted to
//! normalized float tensors per batch.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RESOLUTION: usize = 32;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_RESOLUTION * CIFAR_RESOLUTION;
const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub fn cifar10() -> Self {
        Self {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }

    pub fn centered() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Dataset("normalization std must be > 0 and mean finite".into()));
        }
        Ok(())
    }
}

fn default_noise() -> f32 {
    0.2
}

fn default_distractor() -> f32 {
    0.5
}

/// Procedural classes. Each class pairs one of `T` oriented-grating textures
/// with one of `T` patch placements, `T = ceil(K / 2)`, so that every texture
/// and every placement is shared by two classes and only the combination
/// identifies the class. Class prototypes do not depend on `seed`; the seed
/// drives per-sample phase, jitter, tint, distractor and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub resolution: usize,
    /// Std of additive pixel noise, in `[0, 1]` intensity units.
    #[serde(default = "default_noise")]
    pub noise: f32,
    /// Contrast of the random-orientation background grating relative to the
    /// class patch.
    #[serde(default = "default_distractor")]
    pub distractor: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// A single record file, or a directory holding the standard batch files.
    Cifar10Binary { path: PathBuf, split: Split },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        let mut ds = match &self.source {
            DataSource::Synthetic(s) => synth_dataset(s)?,
            DataSource::Cifar10Binary { path, split } => load_cifar10_binary(path, *split)?,
        };
        if let Some(n) = &self.normalization {
            n.validate()?;
            ds.normalization = n.clone();
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<usize>,
    pub resolution: usize,
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<usize>, resolution: usize, num_classes: usize, normalization: Normalization) -> Result<Self> {
        let per = CHANNELS * resolution * resolution;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::Dataset(format!(
                "{} pixel bytes do not hold {} images of {per} bytes",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} outside [0, {num_classes})")));
        }
        normalization.validate()?;
        Ok(Self {
            pixels,
            labels,
            resolution,
            num_classes,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn image_bytes(&self) -> usize {
        CHANNELS * self.resolution * self.resolution
    }

    /// Raw bytes of image `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.image_bytes();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Normalized `(len, 3, R, R)` tensor of the selected images.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        let per = self.image_bytes();
        let plane = self.resolution * self.resolution;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("index {i} out of range for {} images", self.len())));
            }
            for (c, chunk) in self.image(i).chunks(plane).enumerate() {
                let (m, s) = (self.normalization.mean[c], self.normalization.std[c]);
                data.extend(chunk.iter().map(|&b| (b as f32 / 255.0 - m) / s));
            }
        }
        Tensor::new(vec![indices.len(), CHANNELS, self.resolution, self.resolution], data)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.images(indices)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn all_images(&self) -> Result<Tensor> {
        self.images(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Samples whose index is in `keep`, in that order.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(keep.len() * self.image_bytes());
        for &i in keep {
            if i >= self.len() {
                return Err(Error::Dataset(format!("index {i} out of range")));
            }
            pixels.extend_from_slice(self.image(i));
        }
        Self::new(
            pixels,
            keep.iter().map(|&i| self.labels[i]).collect(),
            self.resolution,
            self.num_classes,
            self.normalization.clone(),
        )
    }

    /// Label byte followed by the R, G and B planes, one record per image.
    pub fn to_records(&self) -> Result<Vec<u8>> {
        if self.num_classes > 256 {
            return Err(Error::Dataset("labels do not fit in one byte".into()));
        }
        let mut out = Vec::with_capacity(self.len() * (1 + self.image_bytes()));
        for i in 0..self.len() {
            out.push(self.labels[i] as u8);
            out.extend_from_slice(self.image(i));
        }
        Ok(out)
    }

    pub fn write_records(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_records()?)?;
        Ok(())
    }
}

/// Parses fixed-size records of one label byte plus `3·R²` pixel bytes.
pub fn parse_records(bytes: &[u8], resolution: usize, num_classes: usize) -> Result<Dataset> {
    let record = 1 + CHANNELS * resolution * resolution;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Dataset(format!(
            "file length {} is not a positive multiple of the {record}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (record - 1));
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[0] as usize;
        if label >= num_classes {
            return Err(Error::Dataset(format!("record {i}: label byte {label} exceeds {}", num_classes - 1)));
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::new(pixels, labels, resolution, num_classes, Normalization::cifar10())
}

/// Reads CIFAR-10 binary data. A file path is read as-is; a directory is
/// searched for `data_batch_{1..5}.bin` or `test_batch.bin` by split.
pub fn load_cifar10_binary(path: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        match split {
            Split::Train => (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect(),
            Split::Test => vec![path.join("test_batch.bin")],
        }
    } else {
        vec![path.to_path_buf()]
    };
    let mut bytes = Vec::new();
    for f in &files {
        let chunk = fs::read(f).map_err(|e| Error::Dataset(format!("{}: {e}", f.display())))?;
        if chunk.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::Dataset(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD_BYTES}",
                f.display(),
                chunk.len()
            )));
        }
        bytes.extend(chunk);
    }
    parse_records(&bytes, CIFAR_RESOLUTION, 10)
}

struct ClassPrototype {
    orientation: f32,
    center: (f32, f32),
}

fn textures(num_classes: usize) -> usize {
    num_classes.div_ceil(2).max(2)
}

fn prototype(class: usize, num_classes: usize, resolution: usize) -> ClassPrototype {
    let t = textures(num_classes);
    let (q, r) = (class / t, class % t);
    let layout = (r + q) % t;
    let orientation = PI * r as f32 / t as f32;
    let angle = 2.0 * PI * layout as f32 / t as f32 - PI / 2.0;
    let res = resolution as f32;
    let ring = 0.25 * res;
    ClassPrototype {
        orientation,
        center: (res / 2.0 + ring * angle.cos(), res / 2.0 + ring * angle.sin()),
    }
}

/// Texture and layout indices of a class.
pub fn class_factors(class: usize, num_classes: usize) -> (usize, usize) {
    let t = textures(num_classes);
    let (q, r) = (class / t, class % t);
    (r, (r + q) % t)
}

pub fn synth_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(Error::Dataset("synthetic data needs at least 2 classes".into()));
    }
    if spec.samples_per_class == 0 {
        return Err(Error::Dataset("samples_per_class must be >= 1".into()));
    }
    if spec.resolution < 8 {
        return Err(Error::Dataset("synthetic resolution must be >= 8".into()));
    }
    if !(spec.noise >= 0.0) || !(spec.distractor >= 0.0) {
        return Err(Error::Dataset("noise and distractor must be >= 0".into()));
    }
    let res = spec.resolution;
    let rf = res as f32;
    let period = (rf / 10.0).max(3.0);
    let radius = 0.22 * rf;
    let jitter = rf / 16.0;
    let noise = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("noise std");
    let protos: Vec<ClassPrototype> = (0..spec.num_classes).map(|c| prototype(c, spec.num_classes, res)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_classes * spec.samples_per_class;
    let plane = res * res;
    let mut pixels = Vec::with_capacity(n * CHANNELS * plane);
    let mut labels = Vec::with_capacity(n);
    let mut base = vec![0.0f32; plane];
    for i in 0..n {
        let class = i % spec.num_classes;
        let p = &protos[class];
        let phase = rng.gen_range(0.0..2.0 * PI);
        let (cx, cy) = (p.center.0 + rng.gen_range(-jitter..=jitter), p.center.1 + rng.gen_range(-jitter..=jitter));
        let d_orient = rng.gen_range(0.0..PI);
        let d_phase = rng.gen_range(0.0..2.0 * PI);
        let tint: [f32; 3] = [rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0)];
        let (ps, pc) = p.orientation.sin_cos();
        let (ds, dc) = d_orient.sin_cos();
        for y in 0..res {
            for x in 0..res {
                let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
                let inside = (xf - cx).powi(2) + (yf - cy).powi(2) <= radius * radius;
                base[y * res + x] = if inside {
                    (2.0 * PI * (xf * pc + yf * ps) / period + phase).sin()
                } else {
                    spec.distractor * (2.0 * PI * (xf * dc + yf * ds) / period + d_phase).sin()
                };
            }
        }
        for gain in tint {
            for &b in &base {
                let v = 0.5 + 0.4 * gain * b + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        labels.push(class);
    }
    Dataset::new(pixels, labels, res, spec.num_classes, Normalization::centered())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            num_classes: 10,
            samples_per_class: 3,
            resolution: 32,
            noise: 0.2,
            distractor: 0.5,
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_dataset(&spec(4)).unwrap();
        let b = synth_dataset(&spec(4)).unwrap();
        let c = synth_dataset(&spec(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.to_records().unwrap(), c.to_records().unwrap());
        for k in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&l| l == k).count(), 3);
        }
    }

    #[test]
    fn factors_pair_uniquely() {
        let mut seen = std::collections::BTreeSet::new();
        for c in 0..10 {
            assert!(seen.insert(class_factors(c, 10)));
        }
        for f in 0..5 {
            assert_eq!(seen.iter().filter(|p| p.0 == f).count(), 2);
            assert_eq!(seen.iter().filter(|p| p.1 == f).count(), 2);
        }
    }

    #[test]
    fn records_round_trip() {
        let a = synth_dataset(&spec(1)).unwrap();
        let bytes = a.to_records().unwrap();
        assert_eq!(bytes.len(), 30 * CIFAR_RECORD_BYTES);
        let b = parse_records(&bytes, 32, 10).unwrap();
        assert_eq!(b.labels(), a.labels());
        assert_eq!(b.image(7), a.image(7));
        assert!(parse_records(&bytes[..bytes.len() - 1], 32, 10).is_err());
        let mut bad = bytes.clone();
        bad[0] = 10;
        assert!(parse_records(&bad, 32, 10).is_err());
    }

    #[test]
    fn normalization_applies_per_channel() {
        let ds = Dataset::new(vec![255, 0, 51], vec![0], 1, 1, Normalization { mean: [0.5, 0.0, 0.2], std: [0.5, 1.0, 0.1] }).unwrap();
        let t = ds.images(&[0]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 1]);
        let want = [1.0, 0.0, 0.0];
        for (g, w) in t.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-6);
        }
    }
}
