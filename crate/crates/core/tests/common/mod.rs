#![allow(dead_code)]

use proof_core::model::{Heads, ModelConfig, ModelState, NewClass, ProjectionMode};
use proof_core::rng::{self, uniform_sym};
use rand::Rng;

pub fn rand_vec(r: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| uniform_sym(r, 1.0)).collect()
}

pub fn new_classes(r: &mut impl Rng, ids: std::ops::Range<u32>, d: usize) -> Vec<NewClass> {
    ids.map(|id| NewClass {
        id,
        name: format!("c{id}"),
        prototype: rand_vec(r, d),
        anchor: rand_vec(r, d),
    })
    .collect()
}

pub struct StateSpec {
    pub dim: usize,
    pub mode: ProjectionMode,
    pub heads: Heads,
    pub prompt_length: usize,
    pub logit_scale: f64,
    /// Classes added by each task.
    pub tasks: Vec<usize>,
}

/// A state after `spec.tasks.len()` expansions, with random prototypes and
/// anchors, and every trainable block redrawn from uniform(-0.5, 0.5) so
/// that Residual layers are not all zero.
pub fn random_state(spec: &StateSpec, seed: u64) -> ModelState {
    let mut r = rng::seeded(seed);
    let cfg = ModelConfig {
        dim: spec.dim,
        mode: spec.mode,
        heads: spec.heads,
        prompt_length: spec.prompt_length,
        logit_scale: spec.logit_scale,
    };
    let mut st = ModelState::new(cfg, &mut r).unwrap();
    let mut next = 0u32;
    for &k in &spec.tasks {
        let classes = new_classes(&mut r, next..next + k as u32, spec.dim);
        next += k as u32;
        st.expand_task(classes, &mut r).unwrap();
        let n = st.flat_params().len();
        let params: Vec<f64> = (0..n).map(|_| uniform_sym(&mut r, 0.5)).collect();
        st.set_flat_params(&params);
    }
    st
}

/// Random small instance within d ≤ 8, ≤ 5 classes, ≤ 3 tasks, c ≤ 3.
pub fn random_spec(r: &mut impl Rng, logit_scale: f64) -> StateSpec {
    let dim = r.random_range(2..=8);
    let b = r.random_range(1..=3);
    let total = r.random_range(b..=5);
    let mut tasks = vec![1; b];
    for _ in b..total {
        let i = r.random_range(0..b);
        tasks[i] += 1;
    }
    StateSpec {
        dim,
        mode: if r.random_bool(0.5) { ProjectionMode::Plain } else { ProjectionMode::Residual },
        heads: if r.random_bool(0.8) { Heads::Full } else { Heads::Projection },
        prompt_length: r.random_range(0..=3),
        logit_scale,
        tasks,
    }
}
