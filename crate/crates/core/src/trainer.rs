//! Incremental training: prototypes, herding-based exemplar memory,
//! momentum SGD under a cosine schedule, the stage loop, and the
//! projection-only contrastive retrieval variant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DataError, EmbeddingDataset, Sample, TaskStream};
use crate::eval::{self, EvalError, RecallScores, RetrievalStage, RunReport, StageReport};
use crate::model::{Grads, Heads, ModelConfig, ModelError, ModelState, NewClass, ProjectionMode};
use crate::rng;
use crate::tensor::{self, add_assign, Mat, TensorError};

const SHUFFLE_TAG: u64 = 1;
const INIT_TAG: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Exemplar memory policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExemplarPolicy {
    /// At most `K` exemplars in total, split evenly over the seen classes.
    FixedBudget(usize),
    /// `k` exemplars per class, kept forever.
    PerClass(usize),
}

impl fmt::Display for ExemplarPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FixedBudget(k) => write!(f, "fixed:{k}"),
            Self::PerClass(k) => write!(f, "perclass:{k}"),
        }
    }
}

impl FromStr for ExemplarPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, n) = s
            .split_once(':')
            .ok_or_else(|| format!("expected fixed:K or perclass:k, got {s:?}"))?;
        let n: usize = n.trim().parse().map_err(|e| format!("bad exemplar count {n:?}: {e}"))?;
        match kind.trim() {
            "fixed" => Ok(Self::FixedBudget(n)),
            "perclass" => Ok(Self::PerClass(n)),
            other => Err(format!("unknown exemplar policy {other:?}")),
        }
    }
}

impl Serialize for ExemplarPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExemplarPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub seed: u64,
    pub prompt_length: usize,
    pub logit_scale: f64,
    pub mode: ProjectionMode,
    pub heads: Heads,
    pub policy: ExemplarPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr0: 0.001,
            momentum: 0.9,
            seed: 1993,
            prompt_length: 3,
            logit_scale: crate::model::DEFAULT_LOGIT_SCALE,
            mode: ProjectionMode::Plain,
            heads: Heads::Full,
            policy: ExemplarPolicy::PerClass(20),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Argument(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("learning rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return bad("logit scale must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            dim,
            mode: self.mode,
            heads: self.heads,
            prompt_length: self.prompt_length,
            logit_scale: self.logit_scale,
        }
    }
}

/// Class mean of the raw embeddings.
pub fn compute_prototype(embeddings: &[Vec<f64>]) -> Result<Vec<f64>, TrainError> {
    let first = embeddings
        .first()
        .ok_or_else(|| TrainError::Argument("cannot compute the prototype of an empty class".into()))?;
    let mut mean = vec![0.0; first.len()];
    for e in embeddings {
        add_assign(&mut mean, e);
    }
    let n = embeddings.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    Ok(mean)
}

fn cosine_or_floor(a: &[f64], b: &[f64]) -> f64 {
    tensor::cosine(a, b).unwrap_or(f64::NEG_INFINITY)
}

/// Greedy herding over normalized embeddings. Step `t` picks the unused
/// index whose addition brings the running mean closest (by cosine) to the
/// class mean; ties go to the lowest index. Returns indices in selection
/// order, so every prefix is the herding choice for a smaller budget.
pub fn herding_select(embeddings: &[Vec<f64>], m: usize) -> Result<Vec<usize>, TrainError> {
    let n = embeddings.len();
    if m > n {
        return Err(TrainError::Argument(format!("cannot select {m} exemplars from {n} records")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let unit = embeddings
        .iter()
        .map(|e| tensor::normalized(e))
        .collect::<Result<Vec<_>, _>>()?;
    let d = unit[0].len();
    let target = compute_prototype(&unit)?;
    let mut running = vec![0.0; d];
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(m);
    for step in 0..m {
        let denom = (step + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, x) in unit.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let mean: Vec<f64> = running.iter().zip(x).map(|(s, v)| (s + v) / denom).collect();
            let score = cosine_or_floor(&target, &mean);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        let (i, _) = best.expect("an unused index remains");
        taken[i] = true;
        add_assign(&mut running, &unit[i]);
        order.push(i);
    }
    Ok(order)
}

/// Replay memory. Each class keeps its exemplars in herding order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarStore {
    policy: ExemplarPolicy,
    classes: Vec<(u32, Vec<Vec<f64>>)>,
}

impl ExemplarStore {
    pub fn new(policy: ExemplarPolicy) -> Self {
        Self {
            policy,
            classes: Vec::new(),
        }
    }

    pub fn policy(&self) -> ExemplarPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|(_, e)| e.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_counts(&self) -> Vec<(u32, usize)> {
        self.classes.iter().map(|(c, e)| (*c, e.len())).collect()
    }

    pub fn exemplars_of(&self, class: u32) -> Option<&[Vec<f64>]> {
        self.classes.iter().find(|(c, _)| *c == class).map(|(_, e)| e.as_slice())
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.classes
            .iter()
            .flat_map(|(c, es)| {
                es.iter().map(move |e| Sample {
                    embedding: e.clone(),
                    label: *c,
                })
            })
            .collect()
    }

    /// Adds exemplars for `new_classes` (each given with all of its
    /// training embeddings) once `seen_classes` classes are known in
    /// total. Under a fixed budget, existing lists shrink to the new
    /// per-class quota by keeping their herding prefix.
    pub fn update(&mut self, new_classes: &[(u32, Vec<Vec<f64>>)], seen_classes: usize) -> Result<(), TrainError> {
        let quota = match self.policy {
            ExemplarPolicy::FixedBudget(k) => {
                if seen_classes == 0 {
                    return Err(TrainError::Argument("no seen classes".into()));
                }
                let q = k / seen_classes;
                for (_, es) in &mut self.classes {
                    es.truncate(q);
                }
                q
            }
            ExemplarPolicy::PerClass(k) => k,
        };
        for (class, embeddings) in new_classes {
            if self.classes.iter().any(|(c, _)| c == class) {
                return Err(TrainError::Argument(format!("class {class} already has exemplars")));
            }
            let picks = herding_select(embeddings, quota.min(embeddings.len()))?;
            let chosen = picks.into_iter().map(|i| embeddings[i].clone()).collect();
            self.classes.push((*class, chosen));
        }
        Ok(())
    }
}

pub fn update_exemplars(
    mut store: ExemplarStore,
    new_classes: &[(u32, Vec<Vec<f64>>)],
    seen_classes: usize,
) -> Result<ExemplarStore, TrainError> {
    store.update(new_classes, seen_classes)?;
    Ok(store)
}

/// `lr0 · ½(1 + cos(π t / T))`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// SGD with heavy-ball momentum: `v ← μv + g; θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    momentum: f64,
    velocity: Vec<Mat>,
}

impl MomentumSgd {
    pub fn new(momentum: f64, params: &[&Mat]) -> Self {
        Self {
            momentum,
            velocity: params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Mat>, grads: &Grads, lr: f64) {
        assert_eq!(params.len(), self.velocity.len(), "parameter blocks changed");
        for ((p, v), g) in params.into_iter().zip(&mut self.velocity).zip(&grads.blocks) {
            v.scale(self.momentum);
            v.add_scaled(1.0, g);
            p.add_scaled(-lr, v);
        }
    }
}

/// Mean training loss of each epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskLog {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

fn sgd_loop<F>(
    state: &mut ModelState,
    n: usize,
    min_batch: usize,
    cfg: &TrainConfig,
    task: usize,
    mut batch_grad: F,
) -> Result<TaskLog, TrainError>
where
    F: FnMut(&ModelState, &[usize]) -> Result<(f64, Grads), TrainError>,
{
    cfg.validate()?;
    let mut log = TaskLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if n == 0 {
        return Err(TrainError::Argument("empty training set".into()));
    }
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut opt = MomentumSgd::new(cfg.momentum, &state.trainable());
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        rng::shuffle(&mut order, &mut rng::derived(cfg.seed, &[SHUFFLE_TAG, task as u64, epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(cfg.lr0, step, total);
            step += 1;
            if batch.len() < min_batch {
                continue;
            }
            let (loss, grads) = batch_grad(state, batch)?;
            opt.step(state.trainable_mut(), &grads, lr);
            epoch_loss += loss;
            batches += 1;
        }
        log.epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    log.steps = step;
    Ok(log)
}

/// Trains the unfrozen parameters on `data` (current task plus exemplars)
/// for `cfg.epochs` epochs. `task` seeds the epoch shuffles.
pub fn train_task(state: &mut ModelState, data: &[Sample], cfg: &TrainConfig, task: usize) -> Result<TaskLog, TrainError> {
    sgd_loop(state, data.len(), 1, cfg, task, |st, idx| {
        let batch: Vec<(&[f64], u32)> = idx.iter().map(|&i| (data[i].embedding.as_slice(), data[i].label)).collect();
        Ok(st.loss_and_grads(&batch)?)
    })
}

/// What to measure after each stage beyond seen-class accuracy.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Also score classes of future tasks (A_U, A_HM).
    pub zero_shot: bool,
    /// Image–text pairs for the probe score.
    pub probe: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

#[derive(Debug, Clone)]
pub struct IncrementalRun {
    pub states: Vec<ModelState>,
    pub report: RunReport,
    pub store: ExemplarStore,
    pub logs: Vec<TaskLog>,
}

fn class_embeddings(dataset: &EmbeddingDataset, class: u32) -> Vec<Vec<f64>> {
    dataset
        .class_indices(class)
        .into_iter()
        .map(|i| dataset.sample(i).embedding)
        .collect()
}

fn anchors_of(dataset: &EmbeddingDataset, classes: &[u32]) -> Vec<(u32, Vec<f64>)> {
    classes.iter().map(|&c| (c, dataset.text_anchor(c))).collect()
}

/// The full class-incremental protocol: for each task, extract prototypes,
/// expand, train on task data plus exemplars, refresh the exemplar memory,
/// then evaluate on the seen classes of `test`.
pub fn run_incremental(
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
    stream: &TaskStream,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<IncrementalRun, TrainError> {
    cfg.validate()?;
    if test.dim() != train.dim() || test.classes() != train.classes() {
        return Err(TrainError::Argument("train and test splits must share dimension and classes".into()));
    }
    let mut state = ModelState::new(cfg.model_config(train.dim()), &mut rng::derived(cfg.seed, &[INIT_TAG, 0]))?;
    let mut store = ExemplarStore::new(cfg.policy);
    let mut run = IncrementalRun {
        states: Vec::new(),
        report: RunReport::default(),
        store: store.clone(),
        logs: Vec::new(),
    };
    for b in 1..=stream.num_tasks() {
        let view = stream.view(train, b)?;
        let current = &stream.tasks[b - 1];
        let per_class: Vec<(u32, Vec<Vec<f64>>)> =
            current.iter().map(|&c| (c, class_embeddings(train, c))).collect();
        let new_classes = per_class
            .iter()
            .map(|(c, es)| {
                Ok(NewClass {
                    id: *c,
                    name: train.classes()[*c as usize].name.clone(),
                    prototype: compute_prototype(es)?,
                    anchor: train.text_anchor(*c),
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        state.expand_task(new_classes, &mut rng::derived(cfg.seed, &[INIT_TAG, b as u64]))?;

        let mut data: Vec<Sample> = view.train.iter().map(|&i| train.sample(i)).collect();
        data.extend(store.samples());
        run.logs.push(train_task(&mut state, &data, cfg, b)?);
        store.update(&per_class, view.seen.len())?;

        run.report.stages.push(evaluate_stage(&state, test, &view.seen, &view.unseen, b, store.len(), opts)?);
        run.states.push(state.clone());
    }
    run.store = store;
    Ok(run)
}

/// Metrics for one trained state against the test split.
pub fn evaluate_stage(
    state: &ModelState,
    test: &EmbeddingDataset,
    seen: &[u32],
    unseen: &[u32],
    stage: usize,
    exemplars: usize,
    opts: &RunOptions,
) -> Result<StageReport, TrainError> {
    let samples = test.samples_of(seen);
    let accuracy = eval::top1(state, &samples, seen)?;
    let prototypes: Vec<(u32, Vec<f64>)> = state
        .seen()
        .iter()
        .zip(state.prototypes())
        .map(|(c, p)| (c.id, p.clone()))
        .collect();
    let mut report = StageReport {
        stage,
        classes_seen: seen.len(),
        accuracy,
        pm_accuracy: eval::pm_top1(state, &samples)?,
        zs_accuracy: eval::baseline_zs(&anchors_of(test, seen), &samples)?,
        simplecil_accuracy: eval::baseline_simplecil(&prototypes, &samples)?,
        unseen_accuracy: None,
        harmonic_mean: None,
        probe_score: None,
        exemplars,
    };
    if opts.zero_shot && !unseen.is_empty() {
        let unseen_samples = test.samples_of(unseen);
        let zs = eval::zero_shot_eval(state, &samples, &unseen_samples, &anchors_of(test, unseen))?;
        report.unseen_accuracy = zs.unseen;
        report.harmonic_mean = zs.harmonic;
    }
    if let Some(probe) = &opts.probe {
        report.probe_score = Some(eval::probe_score(state, probe)?);
    }
    Ok(report)
}

/// Symmetric in-batch contrastive loss over projected pairs: row `i` of
/// the scaled cosine matrix is classified against column `i` and vice
/// versa. Gradients cover the current layer of both stacks.
pub fn contrastive_loss_and_grads(
    state: &ModelState,
    pairs: &[(&[f64], &[f64])],
) -> Result<(f64, Grads), TrainError> {
    let n = pairs.len();
    if n < 2 {
        return Err(TrainError::Argument(format!("contrastive loss needs at least 2 pairs, got {n}")));
    }
    let s = state.logit_scale();
    let imgs = pairs.iter().map(|(z, _)| state.img.aggregate(z)).collect::<Result<Vec<_>, _>>()?;
    let txts = pairs.iter().map(|(_, w)| state.txt.aggregate(w)).collect::<Result<Vec<_>, _>>()?;
    let mut sim = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sim.set(i, j, s * tensor::cosine(&imgs[i], &txts[j])?);
        }
    }
    let sim_t = eval::transpose(&sim);
    let scale = 1.0 / (2 * n) as f64;
    let mut loss = 0.0;
    let mut dsim = Mat::zeros(n, n);
    for i in 0..n {
        let (l, g) = tensor::softmax_ce(sim.row(i), i)?;
        loss += l;
        axpy_row(&mut dsim, i, &g);
        let (l, g) = tensor::softmax_ce(sim_t.row(i), i)?;
        loss += l;
        for (j, gj) in g.iter().enumerate() {
            dsim.set(j, i, dsim.get(j, i) + gj);
        }
    }
    let d = state.dim();
    let mut img = Mat::zeros(d, d);
    let mut txt = Mat::zeros(d, d);
    let mut d_txts = vec![vec![0.0; d]; n];
    for i in 0..n {
        let mut d_img = vec![0.0; d];
        for j in 0..n {
            let (du, dv) = tensor::cosine_bwd(&imgs[i], &txts[j], s * scale * dsim.get(i, j))?;
            add_assign(&mut d_img, &du);
            add_assign(&mut d_txts[j], &dv);
        }
        img.add_outer(1.0, &d_img, pairs[i].0);
    }
    for (j, g) in d_txts.iter().enumerate() {
        txt.add_outer(1.0, g, pairs[j].1);
    }
    Ok((loss * scale, Grads { blocks: vec![img, txt] }))
}

fn axpy_row(m: &mut Mat, r: usize, g: &[f64]) {
    add_assign(m.row_mut(r), g);
}

/// R@k in both directions over `pairs`, through the projection stacks.
pub fn retrieval_recall(state: &ModelState, pairs: &[&(Vec<f64>, Vec<f64>)]) -> Result<RecallScores, TrainError> {
    let imgs = pairs.iter().map(|(z, _)| state.img.aggregate(z)).collect::<Result<Vec<_>, _>>()?;
    let txts = pairs.iter().map(|(_, w)| state.txt.aggregate(w)).collect::<Result<Vec<_>, _>>()?;
    Ok(eval::recall_scores(&imgs, &txts)?)
}

#[derive(Debug, Clone)]
pub struct RetrievalRun {
    pub state: ModelState,
    pub stages: Vec<RetrievalStage>,
    pub logs: Vec<TaskLog>,
}

/// Retrieval variant: per task, expand both projection stacks (no fusion,
/// no prompts) and train them with the symmetric contrastive loss on the
/// task's pairs plus replayed pairs; then report R@k over all pairs seen so
/// far. `tasks` holds indices into `pairs`. Replay treats each task as one
/// group under `cfg.policy`, herding over the image side.
pub fn train_retrieval(
    pairs: &[(Vec<f64>, Vec<f64>)],
    tasks: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<RetrievalRun, TrainError> {
    if cfg.batch_size < 2 {
        return Err(TrainError::Argument("contrastive training needs batch size >= 2".into()));
    }
    let dim = pairs
        .first()
        .map(|(z, _)| z.len())
        .ok_or_else(|| TrainError::Argument("no pairs".into()))?;
    let mut mcfg = cfg.model_config(dim);
    mcfg.heads = Heads::Projection;
    mcfg.prompt_length = 0;
    let mut state = ModelState::new(mcfg, &mut rng::derived(cfg.seed, &[INIT_TAG, 0]))?;
    let mut stages = Vec::new();
    let mut logs = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    let mut memory: Vec<Vec<usize>> = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let b = t + 1;
        if let Some(&bad) = task.iter().find(|&&i| i >= pairs.len()) {
            return Err(TrainError::Argument(format!("pair index {bad} out of range")));
        }
        state.expand_task(Vec::new(), &mut rng::derived(cfg.seed, &[INIT_TAG, b as u64]))?;
        let mut data: Vec<usize> = task.clone();
        data.extend(memory.iter().flatten());
        let log = sgd_loop(&mut state, data.len(), 2, cfg, b, |st, idx| {
            let batch: Vec<(&[f64], &[f64])> = idx
                .iter()
                .map(|&i| {
                    let (z, w) = &pairs[data[i]];
                    (z.as_slice(), w.as_slice())
                })
                .collect();
            contrastive_loss_and_grads(st, &batch)
        })?;
        logs.push(log);
        let quota = match cfg.policy {
            ExemplarPolicy::FixedBudget(k) => k / b,
            ExemplarPolicy::PerClass(k) => k,
        };
        memory.iter_mut().for_each(|m| m.truncate(quota));
        if !task.is_empty() {
            let images: Vec<Vec<f64>> = task.iter().map(|&i| pairs[i].0.clone()).collect();
            let picks = herding_select(&images, quota.min(task.len()))?;
            memory.push(picks.into_iter().map(|i| task[i]).collect());
        }
        seen.extend(task);
        let seen_pairs: Vec<&(Vec<f64>, Vec<f64>)> = seen.iter().map(|&i| &pairs[i]).collect();
        stages.push(RetrievalStage {
            stage: b,
            pairs: seen.len(),
            recall: retrieval_recall(&state, &seen_pairs)?,
        });
    }
    Ok(RetrievalRun { state, stages, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_task_stream, synth_split, SynthConfig};

    fn rand_vecs(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng::uniform_sym(&mut r, 1.0)).collect())
            .collect()
    }

    #[test]
    fn prototype_cases() {
        let u = vec![0.5, -1.0, 2.0];
        assert_eq!(compute_prototype(std::slice::from_ref(&u)).unwrap(), u);
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert_eq!(compute_prototype(&[u, neg]).unwrap(), vec![0.0; 3]);
        assert!(compute_prototype(&[]).is_err());
    }

    #[test]
    fn herding_first_pick_and_full_order() {
        let xs = rand_vecs(1, 9, 4);
        let unit: Vec<Vec<f64>> = xs.iter().map(|x| tensor::normalized(x).unwrap()).collect();
        let mu = compute_prototype(&unit).unwrap();
        let best = (0..9)
            .max_by(|&a, &b| {
                let ca = tensor::cosine(&mu, &unit[a]).unwrap();
                let cb = tensor::cosine(&mu, &unit[b]).unwrap();
                ca.partial_cmp(&cb).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        assert_eq!(herding_select(&xs, 1).unwrap(), vec![best]);
        let mut all = herding_select(&xs, 9).unwrap();
        assert_eq!(all[0], best);
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert!(herding_select(&xs, 10).is_err());
    }

    #[test]
    fn herding_prefix_property() {
        let xs = rand_vecs(2, 12, 5);
        let full = herding_select(&xs, 12).unwrap();
        for m in 0..12 {
            assert_eq!(herding_select(&xs, m).unwrap(), full[..m]);
        }
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("fixed:2000".parse::<ExemplarPolicy>().unwrap(), ExemplarPolicy::FixedBudget(2000));
        assert_eq!("perclass:20".parse::<ExemplarPolicy>().unwrap(), ExemplarPolicy::PerClass(20));
        assert!("ring:3".parse::<ExemplarPolicy>().is_err());
        assert!("fixed".parse::<ExemplarPolicy>().is_err());
        assert_eq!(ExemplarPolicy::FixedBudget(7).to_string(), "fixed:7");
    }

    #[test]
    fn fixed_budget_truncates_to_herding_prefix() {
        let mut store = ExemplarStore::new(ExemplarPolicy::FixedBudget(12));
        let first: Vec<(u32, Vec<Vec<f64>>)> = (0..2).map(|c| (c, rand_vecs(10 + c as u64, 8, 3))).collect();
        store.update(&first, 2).unwrap();
        assert_eq!(store.class_counts(), vec![(0, 6), (1, 6)]);
        let before = store.exemplars_of(0).unwrap().to_vec();
        let second: Vec<(u32, Vec<Vec<f64>>)> = (2..4).map(|c| (c, rand_vecs(10 + c as u64, 8, 3))).collect();
        store.update(&second, 4).unwrap();
        assert_eq!(store.class_counts(), vec![(0, 3), (1, 3), (2, 3), (3, 3)]);
        assert_eq!(store.exemplars_of(0).unwrap(), &before[..3]);
        assert!(store.len() <= 12);
    }

    #[test]
    fn per_class_policy_counts() {
        let mut store = ExemplarStore::new(ExemplarPolicy::PerClass(20));
        for t in 0..4u32 {
            let classes: Vec<(u32, Vec<Vec<f64>>)> =
                (0..10).map(|c| (10 * t + c, rand_vecs((10 * t + c) as u64, 25, 3))).collect();
            store.update(&classes, 10 * (t as usize + 1)).unwrap();
        }
        assert_eq!(store.len(), 800);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.001, 0, 100), 0.001);
        assert!(cosine_lr(0.001, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(0.001, 50, 100) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn momentum_step_matches_closed_form() {
        let mut p = Mat::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        let mut opt = MomentumSgd::new(0.9, &[&p]);
        let g = Grads {
            blocks: vec![Mat::from_vec(1, 2, vec![0.5, 1.0]).unwrap()],
        };
        opt.step(vec![&mut p], &g, 0.1);
        // v = g; θ = θ - 0.1 v
        assert_eq!(p.data(), &[0.95, -2.1]);
        opt.step(vec![&mut p], &g, 0.1);
        // v = 0.9·g + g = 1.9 g
        assert!((p.data()[0] - (0.95 - 0.1 * 0.95)).abs() < 1e-15);
        assert!((p.data()[1] - (-2.1 - 0.1 * 1.9)).abs() < 1e-15);
    }

    fn toy() -> (EmbeddingDataset, EmbeddingDataset) {
        synth_split(&SynthConfig::new(6, 20, 8, 3, 4.0).with_test(10)).unwrap()
    }

    #[test]
    fn zero_epochs_leaves_state_unchanged() {
        let (train, _) = toy();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let mut st = ModelState::new(cfg.model_config(8), &mut rng::seeded(0)).unwrap();
        st.expand_task(Vec::new(), &mut rng::seeded(1)).unwrap();
        let before = st.clone();
        let data: Vec<Sample> = (0..10).map(|i| train.sample(i)).collect();
        train_task(&mut st, &data, &cfg, 1).unwrap();
        assert_eq!(st, before);
        let cfg = TrainConfig::default();
        assert!(train_task(&mut st, &[], &cfg, 1).is_err());
    }

    #[test]
    fn batch_loss_decreases_during_training() {
        let (train, _) = toy();
        let stream = make_task_stream(6, 0, 6, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr0: 0.01,
            ..TrainConfig::default()
        };
        let mut st = ModelState::new(cfg.model_config(8), &mut rng::seeded(0)).unwrap();
        let classes = stream.tasks[0]
            .iter()
            .map(|&c| NewClass {
                id: c,
                name: format!("c{c}"),
                prototype: compute_prototype(&class_embeddings(&train, c)).unwrap(),
                anchor: train.text_anchor(c),
            })
            .collect();
        st.expand_task(classes, &mut rng::seeded(1)).unwrap();
        let data: Vec<Sample> = (0..train.records().len()).map(|i| train.sample(i)).collect();
        let fixed: Vec<(&[f64], u32)> = data.iter().take(16).map(|s| (s.embedding.as_slice(), s.label)).collect();
        let before = st.loss(&fixed).unwrap();
        train_task(&mut st, &data, &cfg, 1).unwrap();
        let after = st.loss(&fixed).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut cfg = ModelConfig::new(4);
        cfg.heads = Heads::Projection;
        cfg.logit_scale = 3.0;
        let mut r = rng::seeded(40);
        let mut st = ModelState::new(cfg, &mut r).unwrap();
        st.expand_task(Vec::new(), &mut r).unwrap();
        st.expand_task(Vec::new(), &mut r).unwrap();
        let zs = rand_vecs(41, 4, 4);
        let ws = rand_vecs(42, 4, 4);
        let batch: Vec<(&[f64], &[f64])> = zs.iter().zip(&ws).map(|(z, w)| (z.as_slice(), w.as_slice())).collect();
        let (_, grads) = contrastive_loss_and_grads(&st, &batch).unwrap();
        let mut probe = st.clone();
        let err = tensor::grad_check(
            |x| {
                probe.set_flat_params(x);
                contrastive_loss_and_grads(&probe, &batch).unwrap().0
            },
            &st.flat_params(),
            &grads.flatten(),
            1e-5,
        );
        assert!(err < 1e-5, "{err}");
        assert!(contrastive_loss_and_grads(&st, &batch[..1]).is_err());
    }

    #[test]
    fn identity_projections_retrieve_identical_pairs() {
        let mut cfg = ModelConfig::new(6);
        cfg.heads = Heads::Projection;
        let mut st = ModelState::new(cfg, &mut rng::seeded(0)).unwrap();
        st.expand_task(Vec::new(), &mut rng::seeded(0)).unwrap();
        st.img.layers_mut()[0] = Mat::identity(6);
        st.txt.layers_mut()[0] = Mat::identity(6);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = rand_vecs(5, 30, 6).into_iter().map(|v| (v.clone(), v)).collect();
        let refs: Vec<_> = pairs.iter().collect();
        let r = retrieval_recall(&st, &refs).unwrap();
        assert_eq!(r.image_to_text[0], 100.0);
        assert_eq!(r.text_to_image[0], 100.0);
    }

    #[test]
    fn single_task_run_has_equal_average_and_last() {
        let (train, test) = toy();
        let stream = make_task_stream(6, 0, 6, 1993).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let run = run_incremental(&train, &test, &stream, &cfg, &RunOptions::default()).unwrap();
        assert_eq!(run.report.stages.len(), 1);
        assert_eq!(run.report.average_accuracy(), run.report.last_accuracy());
    }
}
