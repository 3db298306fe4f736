//! Datasets, checkpoints, gradient dumps and result files.
//!
//! Every file written here goes through [`atomic_write`]: the bytes land in a
//! temporary sibling first and are renamed into place, so an interrupted run
//! never leaves a partial output behind.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::GradSample;
use crate::model::MlpModel;
use crate::rng::{self, Stream};
use crate::scalar::Real;
use crate::space::{LayerLayout, ParamSpace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Row-major inputs with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    inputs: Array2<T>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl<T: Real> Dataset<T> {
    pub fn new(
        inputs: Array2<T>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn inputs(&self) -> &Array2<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(ndarray::Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// The first `limit` examples.
    pub fn take(&self, limit: usize) -> Self {
        let n = limit.min(self.len());
        Self {
            inputs: self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            detail: "truncated header".into(),
        })
}

/// Decodes the IDX image and label files of MNIST. Pixels are scaled to
/// [0, 1]; `limit` keeps the first examples only.
pub fn load_mnist_idx<T: Real>(
    images: &Path,
    labels: &Path,
    limit: Option<usize>,
    split: Split,
) -> Result<Dataset<T>> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;
    parse_mnist_idx(&img, &lab, limit, split)
}

pub fn parse_mnist_idx<T: Real>(
    img: &[u8],
    lab: &[u8],
    limit: Option<usize>,
    split: Split,
) -> Result<Dataset<T>> {
    let magic = be_u32(img, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(img, 4)? as usize;
    let rows = be_u32(img, 8)? as usize;
    let cols = be_u32(img, 12)? as usize;
    let pixels = rows * cols;
    let need = 16 + n * pixels;
    if img.len() < need {
        return Err(Error::Format {
            offset: img.len() as u64,
            detail: format!("image payload truncated, expected {need} bytes"),
        });
    }

    let lmagic = be_u32(lab, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let ln = be_u32(lab, 4)? as usize;
    if ln != n {
        return Err(Error::Format {
            offset: 4,
            detail: format!("{ln} labels for {n} images"),
        });
    }
    if lab.len() < 8 + n {
        return Err(Error::Format {
            offset: lab.len() as u64,
            detail: format!("label payload truncated, expected {} bytes", 8 + n),
        });
    }

    let keep = limit.map_or(n, |l| l.min(n));
    let scale = T::of(1.0 / 255.0);
    let inputs = Array2::from_shape_fn((keep, pixels), |(i, j)| {
        T::of_usize(img[16 + i * pixels + j] as usize) * scale
    });
    let labels: Vec<usize> = lab[8..8 + keep].iter().map(|&b| b as usize).collect();
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(Error::Format {
            offset: (8 + pos) as u64,
            detail: format!("label {} outside 0..10", labels[pos]),
        });
    }
    Dataset::new(inputs, labels, 10, split)
}

/// Encodes images (one byte per pixel) in the IDX layout.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Class-conditional unit Gaussians; class `k` is centred at
/// `k * separation` along the first axis, so consecutive means are
/// `separation` apart. Deterministic in `seed`.
pub fn synth_gaussian_classes<T: Real>(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset<T>> {
    if separation.is_nan() || separation <= 0.0 {
        return Err(Error::Config(format!(
            "separation {separation} must be > 0"
        )));
    }
    if dim == 0 || classes == 0 {
        return Err(Error::Config("need dim >= 1 and classes >= 1".into()));
    }
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let n = classes * per_class;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for k in 0..classes {
        for _ in 0..per_class {
            let mut x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            x[0] += k as f64 * separation;
            rows.push((x, k));
        }
    }
    rows.shuffle(&mut rng);
    let inputs = Array2::from_shape_fn((n, dim), |(i, j)| T::of(rows[i].0[j]));
    let labels = rows.iter().map(|r| r.1).collect();
    Dataset::new(inputs, labels, classes, split)
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".{}.tmp", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    pub epoch: usize,
    pub dim: usize,
    /// File name of the weight payload, relative to the header.
    pub payload: String,
}

const CHECKPOINT_FORMAT: &str = "woodprune-checkpoint";

/// Sidecar path holding the raw weights: `model.json` -> `model.bin`.
pub fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

pub fn encode_f64_le<T: Real>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

fn decode_f64_le<T: Real>(bytes: &[u8], base_offset: u64) -> Result<Vec<T>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format {
            offset: base_offset + bytes.len() as u64,
            detail: "payload is not a whole number of f64 values".into(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect())
}

/// Writes the JSON header at `path` and the little-endian f64 weights next
/// to it.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &MlpModel<T>,
    seed: u64,
    epoch: usize,
) -> Result<()> {
    let bin = payload_path(path);
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        layer_sizes: model.layer_sizes().to_vec(),
        seed,
        epoch,
        dim: model.space().dim(),
        payload: bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    atomic_write(&bin, &encode_f64_le(model.space().values()))?;
    let mut json = serde_json::to_vec_pretty(&header)?;
    json.push(b'\n');
    atomic_write(path, &json)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(MlpModel<T>, CheckpointHeader)> {
    let header: CheckpointHeader = serde_json::from_slice(&read_file(path)?)?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let bin = path.parent().map_or_else(
        || PathBuf::from(&header.payload),
        |d| d.join(&header.payload),
    );
    let values: Vec<T> = decode_f64_le(&read_file(&bin)?, 0)?;
    let layout = LayerLayout::mlp(&header.layer_sizes)?;
    if values.len() != header.dim || header.dim != layout.dim() {
        return Err(Error::Format {
            offset: (values.len() * 8) as u64,
            detail: format!(
                "payload has {} values, header says {}, layout needs {}",
                values.len(),
                header.dim,
                layout.dim()
            ),
        });
    }
    let model = MlpModel::from_space(ParamSpace::new(values, layout)?, &header.layer_sizes)?;
    Ok((model, header))
}

const GRAD_DUMP_MAGIC: &[u8; 4] = b"WFGD";
const GRAD_DUMP_VERSION: u32 = 1;
const GRAD_DUMP_HEADER: usize = 4 + 4 + 8 + 8 + 4;

/// `WFGD` | version u32 | d u64 | m u64 | minibatch u32 | m x d f64, all
/// little-endian.
pub fn encode_grad_dump<T: Real>(samples: &[GradSample<T>], minibatch: u32) -> Result<Vec<u8>> {
    let d = samples.first().map_or(0, |s| s.grad.len());
    if samples.iter().any(|s| s.grad.len() != d) {
        return Err(Error::Structural(
            "gradient samples differ in length".into(),
        ));
    }
    let mut out = Vec::with_capacity(GRAD_DUMP_HEADER + samples.len() * d * 8);
    out.extend_from_slice(GRAD_DUMP_MAGIC);
    out.extend_from_slice(&GRAD_DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    out.extend_from_slice(&minibatch.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&encode_f64_le(&s.grad));
    }
    Ok(out)
}

/// Returns the samples (each weighted by `minibatch`) and the minibatch size.
pub fn decode_grad_dump<T: Real>(bytes: &[u8]) -> Result<(Vec<GradSample<T>>, u32)> {
    if bytes.len() < GRAD_DUMP_HEADER {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: "truncated gradient dump header".into(),
        });
    }
    if &bytes[..4] != GRAD_DUMP_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad gradient dump magic".into(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != GRAD_DUMP_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported gradient dump version {version}"),
        });
    }
    let d = u64_at(8) as usize;
    let m = u64_at(16) as usize;
    let minibatch = u32_at(24);
    let need = GRAD_DUMP_HEADER + m * d * 8;
    if bytes.len() != need {
        return Err(Error::Format {
            offset: bytes.len().min(need) as u64,
            detail: format!("gradient dump has {} bytes, expected {need}", bytes.len()),
        });
    }
    let values: Vec<T> = decode_f64_le(&bytes[GRAD_DUMP_HEADER..], GRAD_DUMP_HEADER as u64)?;
    let weight = minibatch.max(1) as usize;
    let samples = values
        .chunks(d.max(1))
        .take(m)
        .map(|g| GradSample {
            grad: if d == 0 { Vec::new() } else { g.to_vec() },
            weight,
        })
        .collect();
    Ok((samples, minibatch))
}

pub fn write_grad_dump<T: Real>(
    path: &Path,
    samples: &[GradSample<T>],
    minibatch: u32,
) -> Result<()> {
    atomic_write(path, &encode_grad_dump(samples, minibatch)?)
}

pub fn read_grad_dump<T: Real>(path: &Path) -> Result<(Vec<GradSample<T>>, u32)> {
    decode_grad_dump(&read_file(path)?)
}
