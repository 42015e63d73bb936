//! Performance measures and reference classifiers.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::model::{argmax, ModelError, ModelState};
use crate::tensor::{cosine, Mat, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation set")]
    Empty,
    #[error("k={k} exceeds {n} candidates")]
    KTooLarge { k: usize, n: usize },
    #[error("similarity matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("class {0} is not a candidate")]
    UnknownClass(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Rounds half-up to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5).floor() / 100.0
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// Top-1 accuracy (percent) of the model's summed-head prediction, with
/// candidates restricted to `label_set`.
pub fn top1(state: &ModelState, samples: &[Sample], label_set: &[u32]) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let positions = state.positions();
    let mut candidates = label_set
        .iter()
        .map(|c| positions.get(c).copied().ok_or(EvalError::UnknownClass(*c)))
        .collect::<Result<Vec<_>, _>>()?;
    if candidates.is_empty() {
        return Err(EvalError::Empty);
    }
    candidates.sort_unstable();
    let ctx = state.build_context()?;
    let seen = state.seen();
    let correct = samples
        .par_iter()
        .map(|s| -> Result<bool, EvalError> {
            let logits = state.forward_with(&ctx, &s.embedding)?.combined();
            let restricted: Vec<f64> = candidates.iter().map(|&p| logits[p]).collect();
            Ok(seen[candidates[argmax(&restricted)]].id == s.label)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(percent(correct.iter().filter(|&&c| c).count(), samples.len()))
}

/// Accuracy of projected matching alone over all seen classes.
pub fn pm_top1(state: &ModelState, samples: &[Sample]) -> Result<f64, EvalError> {
    let texts: Vec<(u32, Vec<f64>)> = state
        .seen()
        .iter()
        .zip(state.anchors())
        .map(|(c, w)| Ok((c.id, state.txt.aggregate(w)?)))
        .collect::<Result<_, ModelError>>()?;
    projected_accuracy(state, samples, &texts)
}

fn projected_accuracy(state: &ModelState, samples: &[Sample], texts: &[(u32, Vec<f64>)]) -> Result<f64, EvalError> {
    let projected = samples
        .iter()
        .map(|s| {
            Ok(Sample {
                embedding: state.img.aggregate(&s.embedding)?,
                label: s.label,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    cosine_classifier(texts, &projected)
}

/// Top-1 accuracy of `argmax_j cos(z, candidate_j)`; ties go to the
/// earliest candidate.
pub fn cosine_classifier(candidates: &[(u32, Vec<f64>)], samples: &[Sample]) -> Result<f64, EvalError> {
    if samples.is_empty() || candidates.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = samples
        .par_iter()
        .map(|s| -> Result<bool, EvalError> {
            let scores = candidates
                .iter()
                .map(|(_, c)| cosine(&s.embedding, c))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(candidates[argmax(&scores)].0 == s.label)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(percent(correct.iter().filter(|&&c| c).count(), samples.len()))
}

/// Zero-shot matching of raw embeddings against class text anchors.
pub fn baseline_zs(anchors: &[(u32, Vec<f64>)], samples: &[Sample]) -> Result<f64, EvalError> {
    cosine_classifier(anchors, samples)
}

/// Cosine classifier over class-mean prototypes of the raw embeddings.
pub fn baseline_simplecil(prototypes: &[(u32, Vec<f64>)], samples: &[Sample]) -> Result<f64, EvalError> {
    cosine_classifier(prototypes, samples)
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotScores {
    pub seen: f64,
    pub unseen: Option<f64>,
    pub harmonic: Option<f64>,
}

/// Seen accuracy through the full model; unseen accuracy through the
/// projection stacks only, matched against the unseen classes' anchors.
pub fn zero_shot_eval(
    state: &ModelState,
    seen_samples: &[Sample],
    unseen_samples: &[Sample],
    unseen_anchors: &[(u32, Vec<f64>)],
) -> Result<ZeroShotScores, EvalError> {
    let seen_ids: Vec<u32> = state.seen().iter().map(|c| c.id).collect();
    let seen = top1(state, seen_samples, &seen_ids)?;
    if unseen_samples.is_empty() || unseen_anchors.is_empty() {
        return Ok(ZeroShotScores {
            seen,
            unseen: None,
            harmonic: None,
        });
    }
    let texts = unseen_anchors
        .iter()
        .map(|(id, w)| Ok((*id, state.txt.aggregate(w)?)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    let unseen = projected_accuracy(state, unseen_samples, &texts)?;
    Ok(ZeroShotScores {
        seen,
        unseen: Some(unseen),
        harmonic: Some(harmonic_mean(seen, unseen)),
    })
}

/// Mean image–text cosine of the projected probe pairs.
pub fn probe_score(state: &ModelState, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for (z, w) in pairs {
        total += cosine(&state.img.aggregate(z)?, &state.txt.aggregate(w)?)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Percentage of rows whose diagonal entry ranks in the row's top `k`.
/// Among equal scores, lower column indices rank first.
pub fn recall_at_k(sim: &Mat, k: usize) -> Result<f64, EvalError> {
    let n = sim.rows();
    if sim.cols() != n {
        return Err(EvalError::NotSquare(n, sim.cols()));
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    if k > n {
        return Err(EvalError::KTooLarge { k, n });
    }
    let hits = (0..n)
        .filter(|&i| {
            let row = sim.row(i);
            let target = row[i];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > target || (v == target && j < i))
                .count();
            ahead < k
        })
        .count();
    Ok(percent(hits, n))
}

/// `sim[i][j] = cos(images[i], texts[j])`.
pub fn similarity_matrix(images: &[Vec<f64>], texts: &[Vec<f64>]) -> Result<Mat, EvalError> {
    let rows = images
        .par_iter()
        .map(|a| texts.iter().map(|b| cosine(a, b)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Mat::from_vec(images.len(), texts.len(), rows.concat())?)
}

pub fn transpose(m: &Mat) -> Mat {
    Mat::from_fn(m.cols(), m.rows(), |r, c| m.get(c, r))
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// R@{1,5,10} in both directions; `k` is clipped to the number of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallScores {
    pub image_to_text: [f64; 3],
    pub text_to_image: [f64; 3],
}

pub fn recall_scores(images: &[Vec<f64>], texts: &[Vec<f64>]) -> Result<RecallScores, EvalError> {
    let sim = similarity_matrix(images, texts)?;
    let sim_t = transpose(&sim);
    let n = sim.rows();
    let mut out = RecallScores {
        image_to_text: [0.0; 3],
        text_to_image: [0.0; 3],
    };
    for (i, &k) in RECALL_KS.iter().enumerate() {
        out.image_to_text[i] = recall_at_k(&sim, k.min(n))?;
        out.text_to_image[i] = recall_at_k(&sim_t, k.min(n))?;
    }
    Ok(out)
}

/// Metrics recorded after one incremental stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub classes_seen: usize,
    /// Top-1 accuracy over all seen classes.
    pub accuracy: f64,
    pub pm_accuracy: f64,
    pub zs_accuracy: f64,
    pub simplecil_accuracy: f64,
    pub unseen_accuracy: Option<f64>,
    pub harmonic_mean: Option<f64>,
    pub probe_score: Option<f64>,
    pub exemplars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStage {
    pub stage: usize,
    pub pairs: usize,
    pub recall: RecallScores,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
    pub retrieval: Vec<RetrievalStage>,
}

pub const CSV_HEADER: &str = "stage,classes_seen,accuracy,pm_accuracy,zs_accuracy,simplecil_accuracy,seen_accuracy,unseen_accuracy,harmonic_mean,probe_score,exemplars";

pub const RETRIEVAL_CSV_HEADER: &str = "stage,pairs,i2t_r1,i2t_r5,i2t_r10,t2i_r1,t2i_r5,t2i_r10";

fn opt2(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", round2(x))).unwrap_or_default()
}

/// Mean of the per-stage accuracies.
pub fn average(accs: &[f64]) -> Option<f64> {
    if accs.is_empty() {
        None
    } else {
        Some(accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

impl RunReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.accuracy).collect()
    }

    /// Average accuracy over stages.
    pub fn average_accuracy(&self) -> Option<f64> {
        average(&self.accuracies())
    }

    /// Accuracy after the last stage.
    pub fn last_accuracy(&self) -> Option<f64> {
        self.stages.last().map(|s| s.accuracy)
    }

    /// Average and last-stage R@k for each direction, as
    /// `(avg i2t, last i2t, avg t2i, last t2i)`.
    pub fn retrieval_summary(&self) -> Option<([f64; 3], [f64; 3], [f64; 3], [f64; 3])> {
        let last = self.retrieval.last()?;
        let n = self.retrieval.len() as f64;
        let mut avg_i = [0.0; 3];
        let mut avg_t = [0.0; 3];
        for s in &self.retrieval {
            for k in 0..3 {
                avg_i[k] += s.recall.image_to_text[k] / n;
                avg_t[k] += s.recall.text_to_image[k] / n;
            }
        }
        Some((avg_i, last.recall.image_to_text, avg_t, last.recall.text_to_image))
    }

    /// One row per stage; see [`CSV_HEADER`] for the columns. Accuracies are
    /// percentages rounded half-up to two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{},{},{:.2},{:.2},{:.2},{:.2},{},{},{},{},{}",
                s.stage,
                s.classes_seen,
                round2(s.accuracy),
                round2(s.pm_accuracy),
                round2(s.zs_accuracy),
                round2(s.simplecil_accuracy),
                opt2(s.unseen_accuracy.map(|_| s.accuracy)),
                opt2(s.unseen_accuracy),
                opt2(s.harmonic_mean),
                s.probe_score.map(|p| format!("{p:.6}")).unwrap_or_default(),
                s.exemplars,
            );
        }
        out
    }

    pub fn retrieval_csv(&self) -> String {
        let mut out = String::from(RETRIEVAL_CSV_HEADER);
        out.push('\n');
        for s in &self.retrieval {
            let [a, b, c] = s.recall.image_to_text.map(round2);
            let [d, e, f] = s.recall.text_to_image.map(round2);
            let _ = writeln!(out, "{},{},{a:.2},{b:.2},{c:.2},{d:.2},{e:.2},{f:.2}", s.stage, s.pairs);
        }
        out
    }

    pub fn to_json(&self) -> String {
        let summary = serde_json::json!({
            "average_accuracy": self.average_accuracy().map(round2),
            "last_accuracy": self.last_accuracy().map(round2),
            "stages": self.stages,
            "retrieval": self.retrieval,
        });
        serde_json::to_string_pretty(&summary).expect("report serializes")
    }
}
