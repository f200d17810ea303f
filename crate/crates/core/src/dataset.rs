//! Labeled image datasets: an on-disk directory format (JSON manifest +
//! raw little-endian f64 image blob + byte label blob), a reader for the
//! big-endian IDX format, and a seeded synthetic glyph generator for
//! desk-scale experiments.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{file}: expected {expected} bytes, found {got}")]
    BlobSize {
        file: String,
        expected: usize,
        got: usize,
    },
    #[error("{file}: bad magic {got:#010x} (expected {expected:#010x})")]
    BadMagic {
        file: String,
        expected: u32,
        got: u32,
    },
    #[error("label {label} outside [0, {classes})")]
    LabelRange { label: u8, classes: usize },
    #[error("empty dataset")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    fn check(self) -> Result<Self, DataError> {
        if self.images.is_empty() || self.images.len() != self.labels.len() {
            return Err(DataError::Empty);
        }
        for &l in &self.labels {
            if (l as usize) >= self.class_count {
                return Err(DataError::LabelRange {
                    label: l,
                    classes: self.class_count,
                });
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    count: usize,
    shape: Vec<usize>,
    class_count: usize,
}

/// Write `manifest.json`, `images.bin` (f64 LE) and `labels.bin`.
pub fn save_dir(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        version: 1,
        count: ds.len(),
        shape: ds.shape().to_vec(),
        class_count: ds.class_count,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serialises"),
    )?;
    let mut blob = Vec::with_capacity(ds.len() * ds.images[0].len() * 8);
    for img in &ds.images {
        for v in img.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("images.bin"), blob)?;
    fs::write(dir.join("labels.bin"), &ds.labels)?;
    Ok(())
}

pub fn load_dir(dir: &Path) -> Result<Dataset, DataError> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.version != 1 {
        return Err(DataError::Manifest(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    let per_image: usize = manifest.shape.iter().product();
    let blob = fs::read(dir.join("images.bin"))?;
    let expected = manifest.count * per_image * 8;
    if blob.len() != expected {
        return Err(DataError::BlobSize {
            file: "images.bin".into(),
            expected,
            got: blob.len(),
        });
    }
    let labels = fs::read(dir.join("labels.bin"))?;
    if labels.len() != manifest.count {
        return Err(DataError::BlobSize {
            file: "labels.bin".into(),
            expected: manifest.count,
            got: labels.len(),
        });
    }
    let mut images = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let start = i * per_image * 8;
        let data: Vec<f64> = blob[start..start + per_image * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        images.push(
            Tensor::new(manifest.shape.clone(), data)
                .map_err(|e| DataError::Manifest(e.to_string()))?,
        );
    }
    Dataset {
        images,
        labels,
        class_count: manifest.class_count,
    }
    .check()
}

fn read_be_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::BlobSize {
            file: file.into(),
            expected: offset + 4,
            got: bytes.len(),
        })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// IDX u8 image file (big-endian header), pixels normalised to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<Vec<Tensor>, DataError> {
    let name = path.display().to_string();
    let bytes = fs::read(path)?;
    let magic = read_be_u32(&bytes, 0, &name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            file: name,
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let count = read_be_u32(&bytes, 4, &name)? as usize;
    let rows = read_be_u32(&bytes, 8, &name)? as usize;
    let cols = read_be_u32(&bytes, 12, &name)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::BlobSize {
            file: name,
            expected,
            got: bytes.len(),
        });
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let data: Vec<f64> = bytes[start..start + rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        images.push(Tensor::new(vec![1, rows, cols], data).expect("idx image shape"));
    }
    Ok(images)
}

/// IDX u8 label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let name = path.display().to_string();
    let bytes = fs::read(path)?;
    let magic = read_be_u32(&bytes, 0, &name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            file: name,
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let count = read_be_u32(&bytes, 4, &name)? as usize;
    if bytes.len() < 8 + count {
        return Err(DataError::BlobSize {
            file: name,
            expected: 8 + count,
            got: bytes.len(),
        });
    }
    Ok(bytes[8..8 + count].to_vec())
}

/// Paired IDX image/label files as one dataset.
pub fn load_idx_pair(
    images: &Path,
    labels: &Path,
    class_count: usize,
) -> Result<Dataset, DataError> {
    Dataset {
        images: load_idx_images(images)?,
        labels: load_idx_labels(labels)?,
        class_count,
    }
    .check()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapesSpec {
    pub count: usize,
    pub size: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        ShapesSpec {
            count: 4000,
            size: 28,
            classes: 10,
            noise: 0.12,
            seed: 7,
        }
    }
}

const GLYPH_KINDS: usize = 10;

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Balanced dataset of noisy glyph images (one glyph family per class) with
/// jittered position, scale and intensity.
pub fn generate_shapes(spec: &ShapesSpec) -> Result<Dataset, DataError> {
    if spec.count == 0 || spec.classes < 2 || spec.classes > GLYPH_KINDS || spec.size < 12 {
        return Err(DataError::Manifest(format!(
            "shapes spec out of range: count {}, classes {}, size {}",
            spec.count, spec.classes, spec.size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.size;
    let mut images = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let class = (i % spec.classes) as u8;
        let half = s as f64 / 2.0;
        let cx = half + rng.random_range(-0.12..0.12) * s as f64;
        let cy = half + rng.random_range(-0.12..0.12) * s as f64;
        let r = half * rng.random_range(0.52..0.8);
        let intensity = rng.random_range(0.7..1.0);
        let t = (r * 0.32).max(1.2);
        let mut data = vec![0.0f64; s * s];
        for y in 0..s {
            for x in 0..s {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let d = (dx * dx + dy * dy).sqrt();
                let inside = match class {
                    // filled disk
                    0 => d <= r,
                    // square outline
                    1 => {
                        let m = dx.abs().max(dy.abs());
                        m <= r && m >= r - t
                    }
                    // filled upward triangle
                    2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
                    // plus
                    3 => (dx.abs() <= t * 0.75 || dy.abs() <= t * 0.75) && d <= r * 1.1,
                    // saltire
                    4 => ((dx - dy).abs() <= t || (dx + dy).abs() <= t) && dx.abs().max(dy.abs()) <= r,
                    // horizontal bars
                    5 => dx.abs() <= r && ((dy / (t * 1.5)).rem_euclid(2.0) < 1.0) && dy.abs() <= r,
                    // vertical bars
                    6 => dy.abs() <= r && ((dx / (t * 1.5)).rem_euclid(2.0) < 1.0) && dx.abs() <= r,
                    // ring
                    7 => (d - r).abs() <= t * 0.75,
                    // checkerboard
                    8 => {
                        dx.abs() <= r
                            && dy.abs() <= r
                            && (((dx / (t * 1.6)).floor() + (dy / (t * 1.6)).floor()).rem_euclid(2.0)
                                < 1.0)
                    }
                    // diamond outline
                    _ => {
                        let m = dx.abs() + dy.abs();
                        m <= r * 1.2 && m >= r * 1.2 - t * 1.4
                    }
                };
                if inside {
                    data[y * s + x] = intensity;
                }
            }
        }
        if spec.noise > 0.0 {
            for v in &mut data {
                *v = (*v + spec.noise * standard_normal(&mut rng)).clamp(0.0, 1.0);
            }
        }
        images.push(Tensor::new(vec![1, s, s], data).expect("glyph shape"));
        labels.push(class);
    }
    Dataset {
        images,
        labels,
        class_count: spec.classes,
    }
    .check()
}
