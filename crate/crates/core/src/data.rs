//! Dataset ingestion and batch construction.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{io_err, Container, ContainerError};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const DATASET_MAGIC: [u8; 4] = *b"GLDS";
pub const MAX_SYNTHETIC_CLASSES: usize = 256;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{0}")]
    DimMismatch(String),
    #[error("{path}: length {len} is not a multiple of the {record}-byte record size")]
    RecordLength {
        path: String,
        len: usize,
        record: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("batch of {size} with distinct labels needs at least {size} populated classes, dataset has {available}")]
    BatchTooLarge { size: usize, available: usize },
    #[error("anchor index {anchor} out of range for {len} samples")]
    AnchorOutOfRange { anchor: usize, len: usize },
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Images `[M, C, H, W]` with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `(C, H, W)`
    pub shape: [usize; 3],
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    name: String,
    shape: [usize; 3],
    num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.pixels_per_image();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.images.len() != self.len() * self.pixels_per_image() {
            return Err(DataError::DimMismatch(format!(
                "{} pixels for {} images of shape {:?}",
                self.images.len(),
                self.len(),
                self.shape
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(DataError::InvalidParameter(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if self.images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::InvalidParameter("pixel outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Stacks the given samples into a `[N, C, H, W]` tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Sample indices grouped by class.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            members[y].push(i);
        }
        members
    }

    pub fn to_container(&self) -> Container {
        let header = DatasetHeader {
            name: self.name.clone(),
            shape: self.shape,
            num_classes: self.num_classes,
        };
        let mut c = Container::new(
            DATASET_MAGIC,
            serde_json::to_vec(&header).expect("header serializes"),
        );
        let [ch, h, w] = self.shape;
        c.push("images", vec![self.len(), ch, h, w], self.images.clone());
        c.push(
            "labels",
            vec![self.len()],
            self.labels.iter().map(|&y| y as f32).collect(),
        );
        c
    }

    pub fn save(&self, path: &Path) -> Result<Vec<u8>, DataError> {
        Ok(self.to_container().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let c = Container::read(path, DATASET_MAGIC)?;
        let header: DatasetHeader =
            serde_json::from_slice(&c.header).map_err(ContainerError::from)?;
        let missing =
            |n: &str| DataError::DimMismatch(format!("{}: missing `{n}` array", path.display()));
        let images = c.array("images").ok_or_else(|| missing("images"))?;
        let labels = c.array("labels").ok_or_else(|| missing("labels"))?;
        let ds = Dataset {
            name: header.name,
            shape: header.shape,
            images: images.data.clone(),
            labels: labels.data.iter().map(|&y| y as usize).collect(),
            num_classes: header.num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_idx(path: &Path, magic: u32, ndim: usize) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let p = path.display().to_string();
    let found =
        be_u32(&bytes, 0).ok_or_else(|| DataError::DimMismatch(format!("{p}: file too short")))?;
    if found != magic {
        return Err(DataError::BadMagic {
            path: p,
            found,
            expected: magic,
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let v = be_u32(&bytes, 4 + 4 * d)
            .ok_or_else(|| DataError::DimMismatch(format!("{p}: truncated header")))?;
        dims.push(v as usize);
    }
    let start = 4 + 4 * ndim;
    let want: usize = dims.iter().product();
    if bytes.len() - start.min(bytes.len()) != want {
        return Err(DataError::DimMismatch(format!(
            "{p}: header declares {want} bytes of data, file has {}",
            bytes.len().saturating_sub(start)
        )));
    }
    Ok((dims, bytes[start..].to_vec()))
}

/// Loads an IDX image file (`0x00000803`, `u8` pixels) and its label file
/// (`0x00000801`). Pixels are divided by 255.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let (idims, pixels) = read_idx(images, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, raw_labels) = read_idx(labels, IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(DataError::DimMismatch(format!(
            "{} images but {} labels",
            idims[0], ldims[0]
        )));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&y| y as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = images
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Ok(Dataset {
        name,
        shape: [1, idims[1], idims[2]],
        images: pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        labels,
        num_classes,
    })
}

/// Loads CIFAR-10 binary batches: records of one label byte followed by
/// 3072 channel-major pixel bytes.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset, DataError> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::RecordLength {
                path: path.display().to_string(),
                len: bytes.len(),
                record: CIFAR_RECORD,
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] >= 10 {
                return Err(DataError::InvalidParameter(format!(
                    "{}: label {} out of range",
                    path.display(),
                    rec[0]
                )));
            }
            labels.push(rec[0] as usize);
            images.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    Ok(Dataset {
        name: "cifar10".into(),
        shape: [3, 32, 32],
        images,
        labels,
        num_classes: 10,
    })
}

/// Orientation, spatial frequency (cycles per image) and phase of a class's
/// grating.
pub fn grating_params(class: usize) -> (f64, f64, f64) {
    let orientation = PI * (class % 16) as f64 / 16.0;
    let rest = class / 16;
    let freq = 1.5 + 0.75 * (rest % 8) as f64;
    let phase = (rest / 8) as f64 * PI / 2.0;
    (orientation, freq, phase)
}

/// The noise-free grating of `class` at `size x size`.
pub fn grating(class: usize, size: usize) -> Vec<f32> {
    let (theta, freq, phase) = grating_params(class);
    let (c, s) = (theta.cos(), theta.sin());
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 * c + y as f64 * s) / size as f64;
            img.push((0.5 + 0.35 * (2.0 * PI * freq * u + phase).sin()) as f32);
        }
    }
    img
}

pub const SYNTHETIC_NOISE: f32 = 0.1;

/// `per_class` single-channel images per class: the class grating plus
/// uniform noise in `[-0.1, 0.1]`, clipped to `[0, 1]`. Samples are ordered
/// class-major.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_classes == 0 || num_classes > MAX_SYNTHETIC_CLASSES {
        return Err(DataError::InvalidParameter(format!(
            "class count {num_classes} outside 1..={MAX_SYNTHETIC_CLASSES}"
        )));
    }
    if per_class == 0 || size < 4 {
        return Err(DataError::InvalidParameter(format!(
            "need per_class >= 1 and size >= 4, got {per_class} and {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(num_classes * per_class * size * size);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let base = grating(class, size);
        for _ in 0..per_class {
            images.extend(
                base.iter().map(|&v| {
                    (v + rng.gen_range(-SYNTHETIC_NOISE..=SYNTHETIC_NOISE)).clamp(0.0, 1.0)
                }),
            );
            labels.push(class);
        }
    }
    Ok(Dataset {
        name: format!("synthetic-k{num_classes}"),
        shape: [1, size, size],
        images,
        labels,
        num_classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub size: usize,
    pub anchor: Option<usize>,
    pub distinct_labels: bool,
    pub seed: u64,
}

impl BatchSpec {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            size,
            anchor: None,
            distinct_labels: true,
            seed,
        }
    }

    pub fn with_anchor(mut self, anchor: usize) -> Self {
        self.anchor = Some(anchor);
        self
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Draws a batch, optionally containing `anchor`, with pairwise-distinct
/// labels when requested. Deterministic in `spec.seed`.
pub fn sample_batch(ds: &Dataset, spec: &BatchSpec) -> Result<Batch, DataError> {
    if spec.size == 0 {
        return Err(DataError::InvalidParameter(
            "batch size must be positive".into(),
        ));
    }
    if let Some(a) = spec.anchor {
        if a >= ds.len() {
            return Err(DataError::AnchorOutOfRange {
                anchor: a,
                len: ds.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut indices = Vec::with_capacity(spec.size);
    if spec.distinct_labels {
        let members = ds.class_members();
        let anchor_class = spec.anchor.map(|a| ds.labels[a]);
        let mut classes: Vec<usize> = (0..ds.num_classes)
            .filter(|&c| !members[c].is_empty() && Some(c) != anchor_class)
            .collect();
        let available = classes.len() + usize::from(anchor_class.is_some());
        if spec.size > available {
            return Err(DataError::BatchTooLarge {
                size: spec.size,
                available,
            });
        }
        indices.extend(spec.anchor);
        let need = spec.size - indices.len();
        let (picked, _) = classes.partial_shuffle(&mut rng, need);
        for &c in picked.iter() {
            indices.push(*members[c].choose(&mut rng).expect("non-empty class"));
        }
    } else {
        if spec.size > ds.len() {
            return Err(DataError::InvalidParameter(format!(
                "batch of {} from {} samples",
                spec.size,
                ds.len()
            )));
        }
        let mut pool: Vec<usize> = (0..ds.len()).filter(|&i| Some(i) != spec.anchor).collect();
        indices.extend(spec.anchor);
        let need = spec.size - indices.len();
        let (picked, _) = pool.partial_shuffle(&mut rng, need);
        indices.extend_from_slice(picked);
    }
    indices.shuffle(&mut rng);
    let (images, labels) = ds.gather(&indices);
    Ok(Batch {
        indices,
        images,
        labels,
    })
}
