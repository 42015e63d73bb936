//! Binary model checkpoints.
//!
//! ```text
//! "PRCK" | version u32 = 1 | d u32 | mode u8 | heads u8 | logit_scale f64 | prompt_len u32
//! image stack:  depth u32, per layer: frozen u8, mat
//! text stack:   depth u32, per layer: frozen u8, mat
//! fusion:       Wq mat, Wk mat, Wv mat
//! prompts:      count u32, per block: frozen u8, mat
//! seen classes: count u32, per class: id u32, name_len u32, name, d × f64 prototype, d × f64 anchor
//! mat:          rows u32 | cols u32 | rows·cols × f64
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::dataset::EmbeddingDataset;
use crate::model::{Heads, ModelState, ProjectionMode, ProjectionStack, PromptBank, SeenClass};
use crate::tensor::{AttentionWeights, Mat};

pub const MAGIC: &[u8; 4] = b"PRCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("dimension mismatch: checkpoint has d={checkpoint}, dataset has d={dataset}")]
    DimMismatch { checkpoint: usize, dataset: usize },
    #[error("class mismatch: {0}")]
    ClassMismatch(String),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn mat(&mut self, m: &Mat) {
        self.u32(m.rows());
        self.u32(m.cols());
        self.f64s(m.data());
    }
    fn stack(&mut self, s: &ProjectionStack) {
        self.u32(s.depth());
        for (m, &f) in s.layers().iter().zip(s.frozen_flags()) {
            self.u8(f as u8);
            self.mat(m);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(format!("truncated at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn flag(&mut self) -> Result<bool, CheckpointError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(bad(format!("invalid frozen flag {v}"))),
        }
    }
    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat, CheckpointError> {
        let (r, c) = (self.u32()?, self.u32()?);
        if (r, c) != (rows, cols) {
            return Err(bad(format!("matrix is {r}x{c}, expected {rows}x{cols}")));
        }
        let data = self.f64s(r * c)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(Mat::from_vec(r, c, data).expect("sized above"))
    }
    fn stack(&mut self, mode: ProjectionMode, d: usize) -> Result<ProjectionStack, CheckpointError> {
        let depth = self.u32()?;
        let mut layers = Vec::new();
        let mut frozen = Vec::new();
        for _ in 0..depth {
            frozen.push(self.flag()?);
            layers.push(self.mat(d, d)?);
        }
        Ok(ProjectionStack::from_parts(mode, layers, frozen))
    }
}

impl ModelState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.u32(self.dim);
        w.u8(match self.mode() {
            ProjectionMode::Plain => 0,
            ProjectionMode::Residual => 1,
        });
        w.u8(match self.heads {
            Heads::Full => 0,
            Heads::Projection => 1,
        });
        w.f64s(&[self.logit_scale]);
        w.u32(self.prompts.length());
        w.stack(&self.img);
        w.stack(&self.txt);
        for m in [&self.fusion.wq, &self.fusion.wk, &self.fusion.wv] {
            w.mat(m);
        }
        w.u32(self.prompts.blocks().len());
        for (m, &f) in self.prompts.blocks().iter().zip(self.prompts.frozen_flags()) {
            w.u8(f as u8);
            w.mat(m);
        }
        w.u32(self.seen.len());
        for ((c, p), a) in self.seen.iter().zip(&self.prototypes).zip(&self.anchors) {
            w.u32(c.id as usize);
            w.u32(c.name.len());
            w.0.extend_from_slice(c.name.as_bytes());
            w.f64s(p);
            w.f64s(a);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| bad("file shorter than magic"))? != MAGIC {
            return Err(bad("bad magic, expected \"PRCK\""));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        let d = r.u32()?;
        if d == 0 {
            return Err(bad("zero dimension"));
        }
        let mode = match r.u8()? {
            0 => ProjectionMode::Plain,
            1 => ProjectionMode::Residual,
            v => return Err(bad(format!("unknown projection mode {v}"))),
        };
        let heads = match r.u8()? {
            0 => Heads::Full,
            1 => Heads::Projection,
            v => return Err(bad(format!("unknown head set {v}"))),
        };
        let logit_scale = r.f64()?;
        if !(logit_scale > 0.0 && logit_scale.is_finite()) {
            return Err(bad(format!("invalid logit scale {logit_scale}")));
        }
        let prompt_len = r.u32()?;
        let img = r.stack(mode, d)?;
        let txt = r.stack(mode, d)?;
        if img.depth() != txt.depth() {
            return Err(bad("image and text stacks differ in depth"));
        }
        let fusion = AttentionWeights {
            wq: r.mat(d, d)?,
            wk: r.mat(d, d)?,
            wv: r.mat(d, d)?,
        };
        let blocks = r.u32()?;
        let mut prompts = Vec::new();
        let mut frozen = Vec::new();
        for _ in 0..blocks {
            frozen.push(r.flag()?);
            prompts.push(r.mat(prompt_len, d)?);
        }
        let count = r.u32()?;
        let mut seen = Vec::new();
        let mut prototypes = Vec::new();
        let mut anchors = Vec::new();
        for _ in 0..count {
            let id = r.u32()? as u32;
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| bad(format!("class name is not UTF-8: {e}")))?
                .to_owned();
            seen.push(SeenClass { id, name });
            prototypes.push(r.f64s(d)?);
            anchors.push(r.f64s(d)?);
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ModelState {
            dim: d,
            heads,
            logit_scale,
            img,
            txt,
            fusion,
            prompts: PromptBank::from_parts(prompt_len, prompts, frozen),
            prototypes,
            anchors,
            seen,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Checks that `dataset` can be evaluated with this model: same
    /// dimension, and every seen class exists in it under the same name.
    pub fn check_dataset(&self, dataset: &EmbeddingDataset) -> Result<(), CheckpointError> {
        if dataset.dim() != self.dim {
            return Err(CheckpointError::DimMismatch {
                checkpoint: self.dim,
                dataset: dataset.dim(),
            });
        }
        for c in &self.seen {
            match dataset.classes().get(c.id as usize) {
                Some(entry) if entry.name == c.name => {}
                Some(entry) => {
                    return Err(CheckpointError::ClassMismatch(format!(
                        "class {} is {:?} in the checkpoint but {:?} in the dataset",
                        c.id, c.name, entry.name
                    )))
                }
                None => {
                    return Err(CheckpointError::ClassMismatch(format!(
                        "class {} ({:?}) is missing from the dataset",
                        c.id, c.name
                    )))
                }
            }
        }
        Ok(())
    }
}
