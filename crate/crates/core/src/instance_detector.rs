//! Stage 1: which vocabulary classes are both audible and visible.
//!
//! Projected audio and visual tokens are mean-pooled, concatenated and fused
//! into a single `D`-dim vector, which is scored against every text
//! embedding by cosine similarity. Scores become probabilities through a
//! learnable inverse temperature and a sigmoid; training uses multi-label
//! binary cross-entropy.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder_hub::PatchTokenSet;
use crate::ops;
use crate::{Result, Scalar, TvslError};

/// Default probability threshold for inference-time class selection.
pub const DETECTION_THRESHOLD: f64 = 0.5;

/// Token projectors `P_a`, `P_v` (`D × D`) and fusion projector `P_f` (`D × 2D`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorSet<T> {
    pub audio: Array2<T>,
    pub visual: Array2<T>,
    pub fusion: Array2<T>,
}

impl<T: Scalar> ProjectorSet<T> {
    /// `P_a = P_v = I`; `P_f = [I/2 | I/2]` so the fused vector starts as
    /// the average of the pooled audio and visual features.
    pub fn identity(dim: usize) -> Self {
        let half = Array2::<T>::eye(dim) * T::of(0.5);
        Self {
            audio: Array2::eye(dim),
            visual: Array2::eye(dim),
            // standard layout, so dot products sum in the same order as
            // after a checkpoint round trip
            fusion: concatenate![Axis(1), half, half].as_standard_layout().into_owned(),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            audio: Array2::zeros((dim, dim)),
            visual: Array2::zeros((dim, dim)),
            fusion: Array2::zeros((dim, 2 * dim)),
        }
    }

    pub fn perturb(&mut self, std: f64, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("finite std");
        for m in [&mut self.audio, &mut self.visual, &mut self.fusion] {
            m.mapv_inplace(|w| w + T::of(dist.sample(rng)));
        }
    }

    pub fn dim(&self) -> usize {
        self.audio.nrows()
    }
}

/// `A' = P_a(Ê_a(a))`, `V' = P_v(Ê_v(v))`.
pub fn project_tokens<T: Scalar>(
    raw_audio: &PatchTokenSet<T>,
    raw_visual: &PatchTokenSet<T>,
    proj: &ProjectorSet<T>,
) -> Result<(PatchTokenSet<T>, PatchTokenSet<T>)> {
    let d = proj.dim();
    if raw_audio.dim() != d || raw_visual.dim() != d {
        return Err(TvslError::Shape(format!(
            "tokens of dim {}/{} for projectors of dim {d}",
            raw_audio.dim(),
            raw_visual.dim()
        )));
    }
    let a = raw_audio.with_tokens(ops::linear_rows(&proj.audio, raw_audio.tokens().view()));
    let v = raw_visual.with_tokens(ops::linear_rows(&proj.visual, raw_visual.tokens().view()));
    Ok((a, v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult<T> {
    /// `cos(T_i, F_av)` for every class.
    pub scores: Array1<T>,
    /// `τ_det · scores`.
    pub logits: Array1<T>,
    /// `sigmoid(logits)`.
    pub probabilities: Array1<T>,
    /// Classes whose probability exceeds the threshold.
    pub selected: Vec<usize>,
    /// `X' = [Mean(A') ⊕ Mean(V')]`.
    pub pooled: Array1<T>,
    /// `F_av = P_f(X')`.
    pub fused: Array1<T>,
}

/// Cosine of every bank row with `query`, warning on degenerate norms.
pub(crate) fn bank_scores<T: Scalar>(bank: &Array2<T>, query: &Array1<T>) -> Array1<T> {
    if ops::norm(query.view()) == T::zero() {
        log::warn!("zero-norm query vector; similarities set to 0");
    } else if bank.rows().into_iter().any(|r| ops::norm(r) == T::zero()) {
        log::warn!("zero-norm text embedding; its similarity is set to 0");
    }
    ops::row_cosines(bank.view(), query.view())
}

pub fn detect<T: Scalar>(
    audio: &PatchTokenSet<T>,
    visual: &PatchTokenSet<T>,
    bank: &Array2<T>,
    proj: &ProjectorSet<T>,
    tau_det: T,
    threshold: f64,
) -> Result<DetectionResult<T>> {
    if bank.nrows() == 0 {
        return Err(TvslError::Input("empty text bank".into()));
    }
    if bank.ncols() != proj.dim() {
        return Err(TvslError::Shape("bank dim differs from projector dim".into()));
    }
    let pooled = concatenate![
        Axis(0),
        ops::mean_rows(audio.tokens().view()),
        ops::mean_rows(visual.tokens().view())
    ];
    let fused = ops::linear(&proj.fusion, pooled.view());
    let scores = bank_scores(bank, &fused);
    let logits = &scores * tau_det;
    let probabilities = logits.mapv(ops::sigmoid);
    let thr = T::of(threshold);
    let selected = probabilities
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > thr)
        .map(|(i, _)| i)
        .collect();
    Ok(DetectionResult { scores, logits, probabilities, selected, pooled, fused })
}

/// `Σ_i BCE(y_i, sigmoid(τ_det · score_i))`.
pub fn detection_loss<T: Scalar>(result: &DetectionResult<T>, labels: &[bool]) -> Result<T> {
    if labels.len() != result.logits.len() {
        return Err(TvslError::Shape(format!(
            "{} labels for {} classes",
            labels.len(),
            result.logits.len()
        )));
    }
    Ok(ops::bce_with_logits(result.logits.view(), labels).0)
}

/// Gradients flowing out of the detection loss.
#[derive(Debug, Clone)]
pub struct DetectionBackward<T> {
    pub d_audio_tokens: Array2<T>,
    pub d_visual_tokens: Array2<T>,
    pub d_bank: Array2<T>,
    pub d_tau: T,
}

/// Backward of `scale · detection_loss`; accumulates into `d_fusion`.
#[allow(clippy::too_many_arguments)]
pub fn detection_backward<T: Scalar>(
    audio: &PatchTokenSet<T>,
    visual: &PatchTokenSet<T>,
    bank: &Array2<T>,
    proj: &ProjectorSet<T>,
    tau_det: T,
    result: &DetectionResult<T>,
    labels: &[bool],
    scale: T,
    d_fusion: &mut Array2<T>,
) -> DetectionBackward<T> {
    let d = proj.dim();
    let (_, d_logits) = ops::bce_with_logits(result.logits.view(), labels);
    let d_logits = d_logits * scale;
    let d_tau = d_logits.dot(&result.scores);
    let d_scores = &d_logits * tau_det;
    let mut d_bank = Array2::zeros(bank.raw_dim());
    let d_fused = ops::row_cosines_backward(bank.view(), result.fused.view(), d_scores.view(), &mut d_bank);
    let d_pooled = ops::linear_backward(&proj.fusion, result.pooled.view(), d_fused.view(), d_fusion);
    let mut d_audio_tokens = Array2::zeros(audio.tokens().raw_dim());
    let mut d_visual_tokens = Array2::zeros(visual.tokens().raw_dim());
    ops::mean_rows_backward(d_pooled.slice(s![..d]), &mut d_audio_tokens);
    ops::mean_rows_backward(d_pooled.slice(s![d..]), &mut d_visual_tokens);
    DetectionBackward { d_audio_tokens, d_visual_tokens, d_bank, d_tau }
}
