//! Model state and its forward/backward passes.
//!
//! A query image embedding `z` is scored three ways against every seen
//! class `j`:
//!
//! * projected matching: `s · cos(P_i(z), P_t(w_j))`
//! * visual matching:    `s · cos(P̃_i(z), P̃_i(p_j))`
//! * textual matching:   `s · cos(P̃_i(z), P̃_t(w_j))`
//!
//! where `P_i`/`P_t` sum the per-task projection layers, and the tilde
//! marks outputs of one self-attention pass over
//! `[P_i(z); P_i(p_1..K); P_t(w_1..K); prompt rows]`. Prediction is the
//! argmax of the summed logits.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::uniform_sym;
use crate::tensor::{self, add_assign, AttentionWeights, Mat, TensorError};

pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("projection stack is empty")]
    EmptyStack,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("class {0} has not been learned")]
    UnseenLabel(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    /// `Σ_m W_m x`
    Plain,
    /// `Σ_m (W_m x + x)`, with new layers starting at zero.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heads {
    /// Projected, visual and textual matching with cross-modal fusion and
    /// context prompts.
    Full,
    /// Projected matching only; no fusion weights, no prompts.
    Projection,
}

/// Per-task linear projections whose outputs are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    mode: ProjectionMode,
    layers: Vec<Mat>,
    frozen: Vec<bool>,
}

impl ProjectionStack {
    pub fn new(mode: ProjectionMode) -> Self {
        Self {
            mode,
            layers: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub(crate) fn from_parts(mode: ProjectionMode, layers: Vec<Mat>, frozen: Vec<bool>) -> Self {
        Self { mode, layers, frozen }
    }

    pub fn mode(&self) -> ProjectionMode {
        self.mode
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Mat] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Mat] {
        &mut self.layers
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn frozen_flags(&self) -> &[bool] {
        &self.frozen
    }

    pub fn aggregate(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let first = self.layers.first().ok_or(ModelError::EmptyStack)?;
        if first.cols() != x.len() {
            return Err(TensorError::Shape {
                expected: first.cols().to_string(),
                actual: x.len().to_string(),
            }
            .into());
        }
        let mut out = vec![0.0; first.rows()];
        for w in &self.layers {
            add_assign(&mut out, &w.matvec(x));
            if self.mode == ProjectionMode::Residual {
                add_assign(&mut out, x);
            }
        }
        Ok(out)
    }

    /// Freezes every existing layer and appends a fresh trainable one.
    pub fn expand(&mut self, d: usize, rng: &mut impl Rng) {
        self.frozen.iter_mut().for_each(|f| *f = true);
        let layer = match self.mode {
            ProjectionMode::Plain => uniform_mat(rng, d, d),
            ProjectionMode::Residual => Mat::zeros(d, d),
        };
        self.layers.push(layer);
        self.frozen.push(false);
    }

    pub fn current_mut(&mut self) -> Option<&mut Mat> {
        self.layers.last_mut()
    }
}

/// Expandable bank of `c × d` context prompt blocks, one per task.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    length: usize,
    prompts: Vec<Mat>,
    frozen: Vec<bool>,
}

impl PromptBank {
    pub fn new(length: usize) -> Self {
        Self {
            length,
            prompts: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub(crate) fn from_parts(length: usize, prompts: Vec<Mat>, frozen: Vec<bool>) -> Self {
        Self { length, prompts, frozen }
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn blocks(&self) -> &[Mat] {
        &self.prompts
    }

    pub fn blocks_mut(&mut self) -> &mut [Mat] {
        &mut self.prompts
    }

    pub fn frozen_flags(&self) -> &[bool] {
        &self.frozen
    }

    /// All prompt rows, block by block in task order.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.prompts.iter().flat_map(Mat::row_iter)
    }

    fn expand(&mut self, d: usize, rng: &mut impl Rng) {
        self.frozen.iter_mut().for_each(|f| *f = true);
        self.prompts.push(uniform_mat(rng, self.length, d));
        self.frozen.push(false);
    }
}

fn uniform_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (cols as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| uniform_sym(rng, bound))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeenClass {
    pub id: u32,
    pub name: String,
}

/// A class being added by [`ModelState::expand_task`].
#[derive(Debug, Clone)]
pub struct NewClass {
    pub id: u32,
    pub name: String,
    pub prototype: Vec<f64>,
    pub anchor: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub mode: ProjectionMode,
    pub heads: Heads,
    pub prompt_length: usize,
    pub logit_scale: f64,
}

impl ModelConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            mode: ProjectionMode::Plain,
            heads: Heads::Full,
            prompt_length: 3,
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub(crate) dim: usize,
    pub(crate) heads: Heads,
    pub(crate) logit_scale: f64,
    pub img: ProjectionStack,
    pub txt: ProjectionStack,
    pub fusion: AttentionWeights,
    pub prompts: PromptBank,
    pub(crate) prototypes: Vec<Vec<f64>>,
    pub(crate) anchors: Vec<Vec<f64>>,
    pub(crate) seen: Vec<SeenClass>,
}

/// Pre-attention context: projected prototypes, projected text anchors and
/// prompt rows, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub protos: Vec<Vec<f64>>,
    pub texts: Vec<Vec<f64>>,
    pub prompts: Vec<Vec<f64>>,
}

impl Context {
    pub fn len(&self) -> usize {
        self.protos.len() + self.texts.len() + self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The attention set with `query` in front.
    fn set_with(&self, query: Vec<f64>) -> Vec<Vec<f64>> {
        let mut set = Vec::with_capacity(1 + self.len());
        set.push(query);
        set.extend(self.protos.iter().cloned());
        set.extend(self.texts.iter().cloned());
        set.extend(self.prompts.iter().cloned());
        set
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub query: Vec<f64>,
    pub protos: Vec<Vec<f64>>,
    pub texts: Vec<Vec<f64>>,
}

/// Logits of each head over the seen classes, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLogits {
    pub pm: Vec<f64>,
    pub vm: Option<Vec<f64>>,
    pub tm: Option<Vec<f64>>,
}

impl HeadLogits {
    pub fn combined(&self) -> Vec<f64> {
        let mut out = self.pm.clone();
        for head in [&self.vm, &self.tm].into_iter().flatten() {
            add_assign(&mut out, head);
        }
        out
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Gradients of the trainable blocks, in [`ModelState::trainable`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub blocks: Vec<Mat>,
}

impl Grads {
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|m| m.data().iter().copied()).collect()
    }
}

struct ExampleGrad {
    loss: f64,
    z_outer: Vec<f64>,
    d_protos: Vec<Vec<f64>>,
    d_texts: Vec<Vec<f64>>,
    fusion: Option<[Mat; 3]>,
    d_prompt: Vec<Vec<f64>>,
}

impl ModelState {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        if cfg.dim == 0 {
            return Err(ModelError::Argument("dimension must be positive".into()));
        }
        if !(cfg.logit_scale > 0.0 && cfg.logit_scale.is_finite()) {
            return Err(ModelError::Argument(format!("logit scale {} must be positive", cfg.logit_scale)));
        }
        let d = cfg.dim;
        let (fusion, prompt_length) = match cfg.heads {
            Heads::Full => (
                AttentionWeights {
                    wq: uniform_mat(rng, d, d),
                    wk: uniform_mat(rng, d, d),
                    wv: uniform_mat(rng, d, d),
                },
                cfg.prompt_length,
            ),
            Heads::Projection => (AttentionWeights::zeros(d), 0),
        };
        Ok(Self {
            dim: d,
            heads: cfg.heads,
            logit_scale: cfg.logit_scale,
            img: ProjectionStack::new(cfg.mode),
            txt: ProjectionStack::new(cfg.mode),
            fusion,
            prompts: PromptBank::new(prompt_length),
            prototypes: Vec::new(),
            anchors: Vec::new(),
            seen: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> Heads {
        self.heads
    }

    pub fn mode(&self) -> ProjectionMode {
        self.img.mode()
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn tasks_learned(&self) -> usize {
        self.img.depth()
    }

    pub fn seen(&self) -> &[SeenClass] {
        &self.seen
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    /// Registry position of every seen class id.
    pub fn positions(&self) -> HashMap<u32, usize> {
        self.seen.iter().enumerate().map(|(i, c)| (c.id, i)).collect()
    }

    /// Freezes all current projections and prompts, appends a fresh layer to
    /// both stacks and a fresh prompt block, and registers the new classes.
    pub fn expand_task(&mut self, classes: Vec<NewClass>, rng: &mut impl Rng) -> Result<(), ModelError> {
        let known = self.positions();
        let mut fresh = std::collections::HashSet::new();
        for c in &classes {
            if known.contains_key(&c.id) || !fresh.insert(c.id) {
                return Err(ModelError::Argument(format!("class {} is already registered", c.id)));
            }
            if c.prototype.len() != self.dim || c.anchor.len() != self.dim {
                return Err(ModelError::Argument(format!("class {} has wrong embedding dimension", c.id)));
            }
        }
        self.img.expand(self.dim, rng);
        self.txt.expand(self.dim, rng);
        if self.uses_prompts() {
            self.prompts.expand(self.dim, rng);
        }
        for c in classes {
            self.seen.push(SeenClass { id: c.id, name: c.name });
            self.prototypes.push(c.prototype);
            self.anchors.push(c.anchor);
        }
        Ok(())
    }

    /// Rearranges the class registry so that position `j` holds the class
    /// previously at `order[j]`. Weights are untouched.
    pub fn reorder_classes(&mut self, order: &[usize]) {
        let n = self.seen.len();
        let mut check: Vec<usize> = order.to_vec();
        check.sort_unstable();
        assert!(check.iter().copied().eq(0..n), "order must be a permutation of 0..{n}");
        self.seen = order.iter().map(|&i| self.seen[i].clone()).collect();
        self.prototypes = order.iter().map(|&i| self.prototypes[i].clone()).collect();
        self.anchors = order.iter().map(|&i| self.anchors[i].clone()).collect();
    }

    fn uses_prompts(&self) -> bool {
        self.heads == Heads::Full && self.prompts.length() > 0
    }

    /// Trainable parameter blocks: current image layer, current text layer,
    /// then (full heads) `Wq`, `Wk`, `Wv` and the current prompt block.
    pub fn trainable(&self) -> Vec<&Mat> {
        let mut out = Vec::new();
        out.extend(self.img.layers.last());
        out.extend(self.txt.layers.last());
        if self.heads == Heads::Full {
            out.extend([&self.fusion.wq, &self.fusion.wk, &self.fusion.wv]);
            if self.uses_prompts() {
                out.extend(self.prompts.prompts.last());
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Mat> {
        let uses_prompts = self.uses_prompts();
        let mut out = Vec::new();
        out.extend(self.img.layers.last_mut());
        out.extend(self.txt.layers.last_mut());
        if self.heads == Heads::Full {
            out.extend([&mut self.fusion.wq, &mut self.fusion.wk, &mut self.fusion.wv]);
            if uses_prompts {
                out.extend(self.prompts.prompts.last_mut());
            }
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.trainable().iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for m in self.trainable_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "parameter vector length mismatch");
    }

    pub fn build_context(&self) -> Result<Context, ModelError> {
        let protos = self
            .prototypes
            .iter()
            .map(|p| self.img.aggregate(p))
            .collect::<Result<_, _>>()?;
        let texts = self
            .anchors
            .iter()
            .map(|w| self.txt.aggregate(w))
            .collect::<Result<_, _>>()?;
        let prompts = if self.uses_prompts() {
            self.prompts.rows().map(<[f64]>::to_vec).collect()
        } else {
            Vec::new()
        };
        Ok(Context { protos, texts, prompts })
    }

    pub fn pm_logits(&self, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        let q = self.img.aggregate(z)?;
        let texts: Vec<Vec<f64>> = self
            .anchors
            .iter()
            .map(|w| self.txt.aggregate(w))
            .collect::<Result<_, _>>()?;
        self.scaled_cosines(&q, &texts)
    }

    fn scaled_cosines(&self, q: &[f64], targets: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        targets
            .iter()
            .map(|t| Ok(self.logit_scale * tensor::cosine(q, t)?))
            .collect()
    }

    pub fn fuse(&self, z: &[f64]) -> Result<Fused, ModelError> {
        self.fuse_with(&self.build_context()?, z)
    }

    /// Runs the attention pass for one query; adapted prompt rows are
    /// dropped.
    pub fn fuse_with(&self, ctx: &Context, z: &[f64]) -> Result<Fused, ModelError> {
        let set = ctx.set_with(self.img.aggregate(z)?);
        let mut out = tensor::attention_fwd(&set, &self.fusion)?.into_iter();
        let query = out.next().expect("query element");
        let k = ctx.protos.len();
        let protos: Vec<Vec<f64>> = out.by_ref().take(k).collect();
        let texts: Vec<Vec<f64>> = out.take(ctx.texts.len()).collect();
        Ok(Fused { query, protos, texts })
    }

    pub fn vm_tm_logits(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let fused = self.fuse(z)?;
        Ok((
            self.scaled_cosines(&fused.query, &fused.protos)?,
            self.scaled_cosines(&fused.query, &fused.texts)?,
        ))
    }

    pub fn forward(&self, z: &[f64]) -> Result<HeadLogits, ModelError> {
        self.forward_with(&self.build_context()?, z)
    }

    pub fn forward_with(&self, ctx: &Context, z: &[f64]) -> Result<HeadLogits, ModelError> {
        let q = self.img.aggregate(z)?;
        let pm = self.scaled_cosines(&q, &ctx.texts)?;
        if self.heads == Heads::Projection {
            return Ok(HeadLogits { pm, vm: None, tm: None });
        }
        let fused = self.fuse_with(ctx, z)?;
        Ok(HeadLogits {
            pm,
            vm: Some(self.scaled_cosines(&fused.query, &fused.protos)?),
            tm: Some(self.scaled_cosines(&fused.query, &fused.texts)?),
        })
    }

    /// Predicted class id.
    pub fn predict(&self, z: &[f64]) -> Result<u32, ModelError> {
        self.predict_with(&self.build_context()?, z)
    }

    pub fn predict_with(&self, ctx: &Context, z: &[f64]) -> Result<u32, ModelError> {
        if self.seen.is_empty() {
            return Err(ModelError::Argument("no classes learned".into()));
        }
        let logits = self.forward_with(ctx, z)?.combined();
        Ok(self.seen[argmax(&logits)].id)
    }

    /// Mean three-head cross-entropy over `batch` and its gradient with
    /// respect to [`Self::trainable`].
    pub fn loss_and_grads(&self, batch: &[(&[f64], u32)]) -> Result<(f64, Grads), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Argument("empty batch".into()));
        }
        let positions = self.positions();
        let targets = batch
            .iter()
            .map(|(_, y)| positions.get(y).copied().ok_or(ModelError::UnseenLabel(*y)))
            .collect::<Result<Vec<_>, _>>()?;
        let ctx = self.build_context()?;
        let per_example = batch
            .par_iter()
            .zip(targets.par_iter())
            .map(|((z, _), &t)| self.example_grad(&ctx, z, t))
            .collect::<Result<Vec<_>, _>>()?;

        let d = self.dim;
        let k = self.seen.len();
        let mut loss = 0.0;
        let mut img = Mat::zeros(d, d);
        let mut d_protos = vec![vec![0.0; d]; k];
        let mut d_texts = vec![vec![0.0; d]; k];
        let mut fusion = [Mat::zeros(d, d), Mat::zeros(d, d), Mat::zeros(d, d)];
        let mut prompt = Mat::zeros(self.prompts.length(), d);
        for ((z, _), g) in batch.iter().zip(&per_example) {
            loss += g.loss;
            img.add_outer(1.0, &g.z_outer, z);
            for j in 0..k {
                add_assign(&mut d_protos[j], &g.d_protos[j]);
                add_assign(&mut d_texts[j], &g.d_texts[j]);
            }
            if let Some(f) = &g.fusion {
                for (acc, m) in fusion.iter_mut().zip(f) {
                    acc.add_scaled(1.0, m);
                }
            }
            for (r, row) in g.d_prompt.iter().enumerate() {
                add_assign(prompt.row_mut(r), row);
            }
        }
        let mut txt = Mat::zeros(d, d);
        for j in 0..k {
            img.add_outer(1.0, &d_protos[j], &self.prototypes[j]);
            txt.add_outer(1.0, &d_texts[j], &self.anchors[j]);
        }

        let mut blocks = vec![img, txt];
        if self.heads == Heads::Full {
            blocks.extend(fusion);
            if self.uses_prompts() {
                blocks.push(prompt);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        blocks.iter_mut().for_each(|m| m.scale(inv));
        Ok((loss * inv, Grads { blocks }))
    }

    /// Loss only; the objective whose gradient [`Self::loss_and_grads`]
    /// returns.
    pub fn loss(&self, batch: &[(&[f64], u32)]) -> Result<f64, ModelError> {
        let positions = self.positions();
        let ctx = self.build_context()?;
        let mut total = 0.0;
        for (z, y) in batch {
            let t = *positions.get(y).ok_or(ModelError::UnseenLabel(*y))?;
            let logits = self.forward_with(&ctx, z)?;
            for head in [Some(&logits.pm), logits.vm.as_ref(), logits.tm.as_ref()].into_iter().flatten() {
                total += tensor::softmax_ce(head, t)?.0;
            }
        }
        Ok(total / batch.len() as f64)
    }

    fn example_grad(&self, ctx: &Context, z: &[f64], target: usize) -> Result<ExampleGrad, ModelError> {
        let d = self.dim;
        let k = self.seen.len();
        let s = self.logit_scale;
        let q = self.img.aggregate(z)?;

        let pm = self.scaled_cosines(&q, &ctx.texts)?;
        let (mut loss, g_pm) = tensor::softmax_ce(&pm, target)?;
        let mut dq = vec![0.0; d];
        let mut d_texts = vec![vec![0.0; d]; k];
        for j in 0..k {
            let (du, dv) = tensor::cosine_bwd(&q, &ctx.texts[j], s * g_pm[j])?;
            add_assign(&mut dq, &du);
            add_assign(&mut d_texts[j], &dv);
        }
        if self.heads == Heads::Projection {
            return Ok(ExampleGrad {
                loss,
                z_outer: dq,
                d_protos: vec![vec![0.0; d]; k],
                d_texts,
                fusion: None,
                d_prompt: Vec::new(),
            });
        }

        let set = ctx.set_with(q);
        let out = tensor::attention_fwd(&set, &self.fusion)?;
        let mut d_out = vec![vec![0.0; d]; set.len()];
        for offset in [1, 1 + k] {
            let targets = &out[offset..offset + k];
            let logits = self.scaled_cosines(&out[0], targets)?;
            let (l, g) = tensor::softmax_ce(&logits, target)?;
            loss += l;
            for j in 0..k {
                let (du, dv) = tensor::cosine_bwd(&out[0], &targets[j], s * g[j])?;
                add_assign(&mut d_out[0], &du);
                add_assign(&mut d_out[offset + j], &dv);
            }
        }
        let ag = tensor::attention_bwd(&set, &self.fusion, &d_out)?;
        let mut dset = ag.dset.into_iter();
        add_assign(&mut dq, &dset.next().expect("query gradient"));
        let d_protos: Vec<Vec<f64>> = dset.by_ref().take(k).collect();
        for (acc, g) in d_texts.iter_mut().zip(dset.by_ref().take(k)) {
            add_assign(acc, &g);
        }
        let c = self.prompts.length();
        let d_prompt: Vec<Vec<f64>> = if self.uses_prompts() {
            let earlier = (self.prompts.blocks().len() - 1) * c;
            dset.skip(earlier).take(c).collect()
        } else {
            Vec::new()
        };
        Ok(ExampleGrad {
            loss,
            z_outer: dq,
            d_protos,
            d_texts,
            fusion: Some([ag.dwq, ag.dwk, ag.dwv]),
            d_prompt,
        })
    }
}
