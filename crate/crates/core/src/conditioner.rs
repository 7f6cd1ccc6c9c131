//! Stage 2: text-conditioned disentanglement of mixture tokens.
//!
//! For each source class `k`, its text embedding gates the projected tokens
//! of both modalities through the cosine gate `φ(X, e_k, X)`; the gated
//! tokens are mean-pooled and projected. The class conditioning loss asks
//! each pooled feature to classify as its own class against the full bank.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder_hub::PatchTokenSet;
use crate::instance_detector::bank_scores;
use crate::ops;
use crate::{Result, Scalar, TvslError};

/// `P_vc` and `P_ac`, both `D × D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningProjectors<T> {
    pub visual: Array2<T>,
    pub audio: Array2<T>,
}

impl<T: Scalar> ConditioningProjectors<T> {
    pub fn identity(dim: usize) -> Self {
        Self { visual: Array2::eye(dim), audio: Array2::eye(dim) }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { visual: Array2::zeros((dim, dim)), audio: Array2::zeros((dim, dim)) }
    }

    pub fn perturb(&mut self, std: f64, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("finite std");
        for m in [&mut self.visual, &mut self.audio] {
            m.mapv_inplace(|w| w + T::of(dist.sample(rng)));
        }
    }
}

/// `φ(A, b, C)`: row `j` of the result is `cos(A_j, b) · C_j`.
///
/// Rows of `A` with zero norm get a zero gate.
pub fn cosine_gate<T: Scalar>(a: &Array2<T>, b: &Array1<T>, c: &Array2<T>) -> Result<Array2<T>> {
    if a.dim() != c.dim() || a.ncols() != b.len() {
        return Err(TvslError::Shape(format!(
            "gate operands {:?}, {}, {:?}",
            a.dim(),
            b.len(),
            c.dim()
        )));
    }
    Ok(ops::cosine_gate(a.view(), b.view(), c.view(), false).0)
}

/// Per-source outputs of one modality branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedBranch<T> {
    /// Gated tokens (`Ṽ_k` or `Ã_k`), layout preserved.
    pub tokens: PatchTokenSet<T>,
    pub gates: Array1<T>,
    /// `Mean(gated tokens)`.
    pub pooled: Array1<T>,
    /// Projector applied to `pooled`.
    pub projected: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedSource<T> {
    pub class_index: usize,
    pub visual: ConditionedBranch<T>,
    pub audio: ConditionedBranch<T>,
}

/// One entry per source, in the order the sources were given.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedFeatures<T> {
    pub sources: Vec<ConditionedSource<T>>,
}

impl<T: Scalar> ConditionedFeatures<T> {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn class_indices(&self) -> Vec<usize> {
        self.sources.iter().map(|s| s.class_index).collect()
    }
}

fn condition_branch<T: Scalar>(
    tokens: &PatchTokenSet<T>,
    text: &Array1<T>,
    projector: &Array2<T>,
    clamp_gate_at_zero: bool,
) -> ConditionedBranch<T> {
    let x = tokens.tokens().view();
    let (gated, gates) = ops::cosine_gate(x, text.view(), x, clamp_gate_at_zero);
    let pooled = ops::mean_rows(gated.view());
    let projected = ops::linear(projector, pooled.view());
    ConditionedBranch { tokens: tokens.with_tokens(gated), gates, pooled, projected }
}

/// `Ṽ_k = φ(V', e_k, V')`, `f̃^v_k = P_vc(Mean(Ṽ_k))`.
pub fn condition_visual<T: Scalar>(
    visual: &PatchTokenSet<T>,
    text: &Array1<T>,
    proj: &ConditioningProjectors<T>,
    clamp_gate_at_zero: bool,
) -> ConditionedBranch<T> {
    condition_branch(visual, text, &proj.visual, clamp_gate_at_zero)
}

/// `Ã_k = φ(A', e_k, A')`, `f̃^a_k = P_ac(Mean(Ã_k))`.
pub fn condition_audio<T: Scalar>(
    audio: &PatchTokenSet<T>,
    text: &Array1<T>,
    proj: &ConditioningProjectors<T>,
    clamp_gate_at_zero: bool,
) -> ConditionedBranch<T> {
    condition_branch(audio, text, &proj.audio, clamp_gate_at_zero)
}

/// Conditions both modalities on every `(class_index, text embedding)` source.
pub fn condition_sources<T: Scalar>(
    audio: &PatchTokenSet<T>,
    visual: &PatchTokenSet<T>,
    sources: &[(usize, Array1<T>)],
    proj: &ConditioningProjectors<T>,
    clamp_gate_at_zero: bool,
) -> Result<ConditionedFeatures<T>> {
    if sources.is_empty() {
        return Err(TvslError::EmptySelection);
    }
    let sources = sources
        .iter()
        .map(|(k, e)| ConditionedSource {
            class_index: *k,
            visual: condition_visual(visual, e, proj, clamp_gate_at_zero),
            audio: condition_audio(audio, e, proj, clamp_gate_at_zero),
        })
        .collect();
    Ok(ConditionedFeatures { sources })
}

/// `Σ_k CE(τ_cls·cos(𝒯, f̃^v_k), h_k) + CE(τ_cls·cos(𝒯, f̃^a_k), h_k)`, with
/// `h_k` the one-hot of `true_classes[k]`.
pub fn class_conditioning_loss<T: Scalar>(
    feats: &ConditionedFeatures<T>,
    bank: &Array2<T>,
    true_classes: &[usize],
    tau_cls: T,
) -> Result<T> {
    check_classes(feats, bank, true_classes)?;
    let mut loss = T::zero();
    for (src, &c) in feats.sources.iter().zip(true_classes) {
        for f in [&src.visual.projected, &src.audio.projected] {
            let logits = bank_scores(bank, f) * tau_cls;
            loss += ops::softmax_cross_entropy(logits.view(), c).0;
        }
    }
    Ok(loss)
}

fn check_classes<T: Scalar>(
    feats: &ConditionedFeatures<T>,
    bank: &Array2<T>,
    true_classes: &[usize],
) -> Result<()> {
    if feats.is_empty() {
        return Err(TvslError::EmptySelection);
    }
    if true_classes.len() != feats.len() {
        return Err(TvslError::Shape(format!(
            "{} class labels for {} sources",
            true_classes.len(),
            feats.len()
        )));
    }
    if let Some(&bad) = true_classes.iter().find(|&&c| c >= bank.nrows()) {
        return Err(TvslError::ClassIndex { index: bad, len: bank.nrows() });
    }
    Ok(())
}

/// Gradients of `scale · L_cls` w.r.t. each source's projected features,
/// the bank and `τ_cls`.
#[derive(Debug, Clone)]
pub struct ClassLossBackward<T> {
    pub d_visual: Vec<Array1<T>>,
    pub d_audio: Vec<Array1<T>>,
    pub d_bank: Array2<T>,
    pub d_tau: T,
}

pub fn class_conditioning_backward<T: Scalar>(
    feats: &ConditionedFeatures<T>,
    bank: &Array2<T>,
    true_classes: &[usize],
    tau_cls: T,
    scale: T,
) -> Result<ClassLossBackward<T>> {
    check_classes(feats, bank, true_classes)?;
    let mut d_bank = Array2::zeros(bank.raw_dim());
    let mut d_tau = T::zero();
    let mut d_visual = Vec::with_capacity(feats.len());
    let mut d_audio = Vec::with_capacity(feats.len());
    for (src, &c) in feats.sources.iter().zip(true_classes) {
        for (f, out) in [
            (&src.visual.projected, &mut d_visual),
            (&src.audio.projected, &mut d_audio),
        ] {
            let scores = ops::row_cosines(bank.view(), f.view());
            let logits = &scores * tau_cls;
            let (_, d_logits) = ops::softmax_cross_entropy(logits.view(), c);
            let d_logits = d_logits * scale;
            d_tau += d_logits.dot(&scores);
            let d_scores = d_logits * tau_cls;
            out.push(ops::row_cosines_backward(bank.view(), f.view(), d_scores.view(), &mut d_bank));
        }
    }
    Ok(ClassLossBackward { d_visual, d_audio, d_bank, d_tau })
}

/// Backward through one branch: from gradients on the projected feature,
/// on the pooled feature and on the gated tokens back to the input tokens
/// and the text embedding. Accumulates the projector gradient.
#[allow(clippy::too_many_arguments)]
pub fn branch_backward<T: Scalar>(
    input: &PatchTokenSet<T>,
    text: &Array1<T>,
    projector: &Array2<T>,
    branch: &ConditionedBranch<T>,
    d_projected: &Array1<T>,
    d_pooled_extra: Option<&Array1<T>>,
    d_gated_extra: Option<&Array2<T>>,
    clamp_gate_at_zero: bool,
    d_projector: &mut Array2<T>,
) -> (Array2<T>, Array1<T>) {
    let mut d_pooled =
        ops::linear_backward(projector, branch.pooled.view(), d_projected.view(), d_projector);
    if let Some(extra) = d_pooled_extra {
        d_pooled += extra;
    }
    let mut d_gated = match d_gated_extra {
        Some(g) => g.clone(),
        None => Array2::zeros(input.tokens().raw_dim()),
    };
    ops::mean_rows_backward(d_pooled.view(), &mut d_gated);
    let x = input.tokens().view();
    let (d_a, d_text, d_c) = ops::cosine_gate_backward(
        x,
        text.view(),
        x,
        branch.gates.view(),
        d_gated.view(),
        clamp_gate_at_zero,
    );
    (d_a + d_c, d_text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder_hub::{Grid, Modality};
    use ndarray::array;

    fn set(x: Array2<f64>, m: Modality) -> PatchTokenSet<f64> {
        let n = x.nrows();
        PatchTokenSet::new(x, Grid::new(1, n), m).unwrap()
    }

    #[test]
    fn parallel_rows_pass_through() {
        let b = array![1.0f64, 2.0];
        let a = array![[2.0f64, 4.0], [0.5, 1.0], [3.0, 6.0]];
        let c = array![[1.0f64, -1.0], [7.0, 0.0], [0.0, 2.0]];
        let out = cosine_gate(&a, &b, &c).unwrap();
        assert!((&out - &c).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn orthogonal_rows_are_zeroed() {
        let b = array![1.0, 0.0];
        let a = array![[0.0, 3.0], [0.0, -1.0]];
        let c = array![[5.0, 5.0], [1.0, 2.0]];
        let out = cosine_gate(&a, &b, &c).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_values_match_loop_oracle() {
        let a = array![[1.0f64, 2.0], [-3.0, 1.0], [0.5, -0.5]];
        let b = array![2.0f64, 1.0];
        let c = array![[1.0f64, 1.0], [2.0, -1.0], [4.0, 3.0]];
        let out = cosine_gate(&a, &b, &c).unwrap();
        for j in 0..3 {
            let dot = a[[j, 0]] * b[0] + a[[j, 1]] * b[1];
            let na = (a[[j, 0]].powi(2) + a[[j, 1]].powi(2)).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            for d in 0..2 {
                assert!((out[[j, d]] - dot / (na * nb) * c[[j, d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn condition_visual_trivial_cases() {
        let e = array![0.0, 1.0, 0.0];
        let v = set(array![[0.0, 2.0, 0.0], [0.0, 4.0, 0.0]], Modality::Visual);
        let proj = ConditioningProjectors::identity(3);
        let out = condition_visual(&v, &e, &proj, false);
        assert_eq!(out.projected.to_vec(), vec![0.0, 3.0, 0.0]);
        assert_eq!(out.tokens.grid(), v.grid());

        let ortho = set(array![[1.0, 0.0, 0.0], [0.0, 0.0, 2.0]], Modality::Visual);
        let out = condition_visual(&ortho, &e, &proj, false);
        assert!(out.projected.iter().all(|&x| x == 0.0));

        let zero = set(Array2::zeros((4, 3)), Modality::Audio);
        let out = condition_audio(&zero, &e, &proj, false);
        assert!(out.projected.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_similarities_give_ln_n_per_term() {
        // zero projected features: every similarity is 0
        let bank = Array2::<f64>::eye(4);
        let zero = set(Array2::zeros((2, 4)), Modality::Audio);
        let zv = set(Array2::zeros((2, 4)), Modality::Visual);
        let sources = vec![(0, bank.row(0).to_owned()), (2, bank.row(2).to_owned())];
        let feats =
            condition_sources(&zero, &zv, &sources, &ConditioningProjectors::identity(4), false)
                .unwrap();
        let loss = class_conditioning_loss(&feats, &bank, &[0, 2], 14.0).unwrap();
        assert!((loss - 4.0 * 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            class_conditioning_loss(&feats, &bank, &[0, 9], 14.0),
            Err(TvslError::ClassIndex { index: 9, len: 4 })
        ));
    }

    #[test]
    fn saturated_softmax_drives_loss_to_zero() {
        let bank = Array2::<f64>::eye(3);
        let e = bank.row(1).to_owned();
        let a = set(array![[0.0, 1.0, 0.0]], Modality::Audio);
        let v = set(array![[0.0, 1.0, 0.0]], Modality::Visual);
        let feats = condition_sources(&a, &v, &[(1, e)], &ConditioningProjectors::identity(3), false)
            .unwrap();
        let loss = class_conditioning_loss(&feats, &bank, &[1], 1e3).unwrap();
        assert!(loss < 1e-12, "{loss}");
    }
}
