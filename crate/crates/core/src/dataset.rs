//! Embedding datasets: the EMB1 container, incremental task streams and
//! synthetic stand-ins for frozen encoder outputs.
//!
//! EMB1 layout (little-endian throughout):
//!
//! ```text
//! "EMB1" | version u32 = 1 | d u32 | num_classes u32
//! per class:  name_len u32 | name (UTF-8) | d × f32 text embedding
//! num_records u64
//! per record: label u32 | d × f32 image embedding
//! ```
//!
//! A paired set (probe or retrieval file) is an EMB1 file read as
//! `(record embedding, text embedding of the record's class)`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    pub name: String,
    pub text_embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub label: u32,
    pub embedding: Vec<f32>,
}

/// Frozen image embeddings with labels, plus one text anchor per class.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    classes: Vec<ClassEntry>,
    records: Vec<Record>,
}

/// A record converted to working precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub embedding: Vec<f64>,
    pub label: u32,
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

impl EmbeddingDataset {
    /// Builds a dataset, enforcing every structural invariant.
    pub fn new(dim: usize, classes: Vec<ClassEntry>, records: Vec<Record>) -> Result<Self, DataError> {
        let ds = Self { dim, classes, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |m: String| Err(DataError::Validation(m));
        if self.dim == 0 {
            return invalid("embedding dimension must be positive".into());
        }
        let mut names = HashSet::new();
        for (i, c) in self.classes.iter().enumerate() {
            if c.name.is_empty() {
                return invalid(format!("class {i} has an empty name"));
            }
            if !names.insert(c.name.as_str()) {
                return invalid(format!("duplicate class name {:?}", c.name));
            }
            if c.text_embedding.len() != self.dim {
                return invalid(format!(
                    "class {i} text embedding has length {}, expected {}",
                    c.text_embedding.len(),
                    self.dim
                ));
            }
            if c.text_embedding.iter().any(|v| !v.is_finite()) {
                return invalid(format!("class {i} text embedding has non-finite entries"));
            }
            if c.text_embedding.iter().all(|&v| v == 0.0) {
                return invalid(format!("class {i} text embedding has zero norm"));
            }
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.label as usize >= self.classes.len() {
                return invalid(format!(
                    "record {i} has label {} but only {} classes exist",
                    r.label,
                    self.classes.len()
                ));
            }
            if r.embedding.len() != self.dim {
                return invalid(format!(
                    "record {i} embedding has length {}, expected {}",
                    r.embedding.len(),
                    self.dim
                ));
            }
            if r.embedding.iter().any(|v| !v.is_finite()) {
                return invalid(format!("record {i} embedding has non-finite entries"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn text_anchor(&self, class: u32) -> Vec<f64> {
        to_f64(&self.classes[class as usize].text_embedding)
    }

    /// Indices of the records labelled `class`, in file order.
    pub fn class_indices(&self, class: u32) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sample(&self, index: usize) -> Sample {
        let r = &self.records[index];
        Sample {
            embedding: to_f64(&r.embedding),
            label: r.label,
        }
    }

    /// Every record whose label is in `classes`, in file order.
    pub fn samples_of(&self, classes: &[u32]) -> Vec<Sample> {
        let wanted: HashSet<u32> = classes.iter().copied().collect();
        (0..self.records.len())
            .filter(|&i| wanted.contains(&self.records[i].label))
            .map(|i| self.sample(i))
            .collect()
    }

    /// `(image embedding, text embedding of its class)` for every record.
    pub fn pairs(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.records
            .iter()
            .map(|r| (to_f64(&r.embedding), self.text_anchor(r.label)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim;
        let mut out = Vec::with_capacity(16 + self.records.len() * (4 + 4 * d));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&(c.name.len() as u32).to_le_bytes());
            out.extend_from_slice(c.name.as_bytes());
            c.text_embedding
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.label.to_le_bytes());
            r.embedding
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4).map_err(|_| DataError::Format("file shorter than magic".into()))?;
        if magic != MAGIC {
            return Err(DataError::Format(format!("bad magic {magic:?}, expected \"EMB1\"")));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(DataError::Format(format!("unsupported version {version}")));
        }
        let dim = cur.u32()? as usize;
        let num_classes = cur.u32()? as usize;
        let mut classes = Vec::with_capacity(num_classes.min(1 << 16));
        for _ in 0..num_classes {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|e| DataError::Corrupt(format!("class name is not UTF-8: {e}")))?
                .to_owned();
            let text_embedding = cur.f32s(dim)?;
            classes.push(ClassEntry { name, text_embedding });
        }
        let num_records = cur.u64()?;
        let per_record = 4 + 4 * dim as u64;
        let remaining = (bytes.len() - cur.pos) as u64;
        if num_records.checked_mul(per_record) != Some(remaining) {
            return Err(DataError::Corrupt(format!(
                "{num_records} records need {} payload bytes, found {remaining}",
                num_records.saturating_mul(per_record)
            )));
        }
        let mut records = Vec::with_capacity(num_records as usize);
        for _ in 0..num_records {
            let label = cur.u32()?;
            let embedding = cur.f32s(dim)?;
            records.push(Record { label, embedding });
        }
        Self::new(dim, classes, records)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DataError::Corrupt(format!("truncated payload: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, DataError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| DataError::Corrupt("dimension overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset, DataError> {
    EmbeddingDataset::from_bytes(&fs::read(path)?)
}

/// Validates, then writes. Nothing is written for an invalid dataset.
pub fn write_dataset(dataset: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    dataset.validate()?;
    fs::write(path, dataset.to_bytes())?;
    Ok(())
}

/// Optional sidecar describing where an embedding file came from. The
/// engine never interprets it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

/// Base-x / Inc-y split of the classes into disjoint tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub class_order: Vec<u32>,
    pub base: usize,
    pub inc: usize,
    pub tasks: Vec<Vec<u32>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskView {
    /// Indices into the dataset's records whose label is in this task.
    pub train: Vec<usize>,
    /// Classes of tasks `1..=b`, in stream order.
    pub seen: Vec<u32>,
    /// Classes of tasks `b+1..=B`, in stream order.
    pub unseen: Vec<u32>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// View of task `b` (1-based).
    pub fn view(&self, dataset: &EmbeddingDataset, b: usize) -> Result<TaskView, DataError> {
        if b == 0 || b > self.tasks.len() {
            return Err(DataError::Argument(format!(
                "task {b} out of range 1..={}",
                self.tasks.len()
            )));
        }
        if dataset.num_classes() != self.class_order.len() {
            return Err(DataError::Argument(format!(
                "stream covers {} classes but dataset has {}",
                self.class_order.len(),
                dataset.num_classes()
            )));
        }
        let current: HashSet<u32> = self.tasks[b - 1].iter().copied().collect();
        let train = dataset
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| current.contains(&r.label))
            .map(|(i, _)| i)
            .collect();
        Ok(TaskView {
            train,
            seen: self.tasks[..b].concat(),
            unseen: self.tasks[b..].concat(),
        })
    }
}

/// Shuffles the class indices with the seeded Fisher–Yates shuffle and cuts
/// them into Base-`base` / Inc-`inc` tasks.
pub fn make_task_stream(num_classes: usize, base: usize, inc: usize, seed: u64) -> Result<TaskStream, DataError> {
    if inc == 0 {
        return Err(DataError::Argument("increment must be positive".into()));
    }
    if base + inc > num_classes {
        return Err(DataError::Argument(format!(
            "base {base} + increment {inc} exceeds {num_classes} classes"
        )));
    }
    if (num_classes - base) % inc != 0 {
        return Err(DataError::Argument(format!(
            "{} classes after the base task are not divisible by increment {inc}",
            num_classes - base
        )));
    }
    let mut class_order: Vec<u32> = (0..num_classes as u32).collect();
    rng::shuffle(&mut class_order, &mut rng::seeded(seed));
    let mut tasks = Vec::new();
    let mut rest = &class_order[..];
    if base > 0 {
        tasks.push(rest[..base].to_vec());
        rest = &rest[base..];
    }
    tasks.extend(rest.chunks(inc).map(<[u32]>::to_vec));
    Ok(TaskStream {
        class_order,
        base,
        inc,
        tasks,
        seed,
    })
}

pub fn task_view(stream: &TaskStream, dataset: &EmbeddingDataset, b: usize) -> Result<TaskView, DataError> {
    stream.view(dataset, b)
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub seed: u64,
    /// Per-coordinate image noise has standard deviation `1 / separation`.
    pub separation: f64,
    /// Strength of the shared linear distortion `I + text_gap * G` applied to
    /// every image anchor before it becomes a text anchor (`G` has entries
    /// drawn from N(0, 1/d)).
    #[serde(default)]
    pub text_gap: f64,
    /// Approximate norm of the per-class perturbation added on top of the
    /// shared distortion.
    pub text_noise: f64,
}

pub const DEFAULT_TEXT_GAP: f64 = 0.9;
pub const DEFAULT_TEXT_NOISE: f64 = 0.2;

impl SynthConfig {
    pub fn new(num_classes: usize, per_class: usize, dim: usize, seed: u64, separation: f64) -> Self {
        Self {
            num_classes,
            per_class,
            test_per_class: 0,
            dim,
            seed,
            separation,
            text_gap: DEFAULT_TEXT_GAP,
            text_noise: DEFAULT_TEXT_NOISE,
        }
    }

    pub fn with_text_gap(mut self, text_gap: f64) -> Self {
        self.text_gap = text_gap;
        self
    }

    pub fn with_test(mut self, test_per_class: usize) -> Self {
        self.test_per_class = test_per_class;
        self
    }

    pub fn with_text_noise(mut self, text_noise: f64) -> Self {
        self.text_noise = text_noise;
        self
    }
}

fn gaussian(r: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = crate::tensor::norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn perturbed(r: &mut impl Rng, anchor: &[f64], scale: f64) -> Vec<f32> {
    if scale == 0.0 {
        return anchor.iter().map(|&x| x as f32).collect();
    }
    let noise = gaussian(r, anchor.len());
    let v = anchor.iter().zip(noise).map(|(a, n)| a + scale * n).collect();
    unit(v).into_iter().map(|x| x as f32).collect()
}

/// Generates a train split and (if `test_per_class > 0`) a test split that
/// share class anchors. The train split does not depend on
/// `test_per_class`.
pub fn synth_split(cfg: &SynthConfig) -> Result<(EmbeddingDataset, EmbeddingDataset), DataError> {
    if cfg.dim < 2 {
        return Err(DataError::Argument(format!("dimension {} < 2", cfg.dim)));
    }
    if cfg.num_classes < 2 {
        return Err(DataError::Argument(format!("{} classes < 2", cfg.num_classes)));
    }
    if cfg.separation.is_nan() || cfg.separation <= 0.0 {
        return Err(DataError::Argument(format!("separation {} must be positive", cfg.separation)));
    }
    if !(cfg.text_noise >= 0.0 && cfg.text_noise.is_finite()) {
        return Err(DataError::Argument(format!("text noise {} must be non-negative", cfg.text_noise)));
    }
    let d = cfg.dim;
    let mut anchor_rng = rng::derived(cfg.seed, &[0]);
    let anchors: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| unit(gaussian(&mut anchor_rng, d)))
        .collect();
    if !(cfg.text_gap >= 0.0 && cfg.text_gap.is_finite()) {
        return Err(DataError::Argument(format!("text gap {} must be non-negative", cfg.text_gap)));
    }
    let gapped: Vec<Vec<f64>> = if cfg.text_gap == 0.0 {
        anchors.clone()
    } else {
        let mut gap_rng = rng::derived(cfg.seed, &[4]);
        let g = crate::tensor::Mat::from_fn(d, d, |_, _| {
            cfg.text_gap * gap_rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()
        });
        anchors
            .iter()
            .map(|a| {
                let mut t = g.matvec(a);
                crate::tensor::add_assign(&mut t, a);
                unit(t)
            })
            .collect()
    };
    let mut text_rng = rng::derived(cfg.seed, &[1]);
    let text_scale = cfg.text_noise / (d as f64).sqrt();
    let width = cfg.num_classes.to_string().len().max(3);
    let classes: Vec<ClassEntry> = gapped
        .iter()
        .enumerate()
        .map(|(k, a)| ClassEntry {
            name: format!("class_{k:0width$}"),
            text_embedding: perturbed(&mut text_rng, a, text_scale),
        })
        .collect();
    let noise = 1.0 / cfg.separation;
    let records = |tag: u64, n: usize| -> Vec<Record> {
        let mut r = rng::derived(cfg.seed, &[tag]);
        anchors
            .iter()
            .enumerate()
            .flat_map(|(k, a)| {
                (0..n)
                    .map(|_| Record {
                        label: k as u32,
                        embedding: perturbed(&mut r, a, noise),
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let train = EmbeddingDataset::new(d, classes.clone(), records(2, cfg.per_class))?;
    let test = EmbeddingDataset::new(d, classes, records(3, cfg.test_per_class))?;
    Ok((train, test))
}

/// Synthetic dataset: unit class anchors, image embeddings scattered around
/// them, text anchors perturbed away from them.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    d: usize,
    seed: u64,
    separation: f64,
) -> Result<EmbeddingDataset, DataError> {
    Ok(synth_split(&SynthConfig::new(num_classes, per_class, d, seed, separation))?.0)
}
