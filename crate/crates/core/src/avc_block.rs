//! Stage 3: audio-visual correspondence per source.
//!
//! The pooled conditioned audio, projected by `P_av`, queries the
//! conditioned visual tokens through the same cosine gate. The gated visual
//! tokens are pooled and projected by `P_va`; a symmetric in-batch InfoNCE
//! pulls each source's visual and audio embeddings together.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conditioner::ConditionedFeatures;
use crate::encoder_hub::PatchTokenSet;
use crate::ops;
use crate::{Result, Scalar, TvslError};

/// `P_av` (audio side) and `P_va` (visual side), both `D × D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceProjectors<T> {
    pub audio: Array2<T>,
    pub visual: Array2<T>,
}

impl<T: Scalar> CorrespondenceProjectors<T> {
    pub fn identity(dim: usize) -> Self {
        Self { audio: Array2::eye(dim), visual: Array2::eye(dim) }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { audio: Array2::zeros((dim, dim)), visual: Array2::zeros((dim, dim)) }
    }

    pub fn perturb(&mut self, std: f64, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("finite std");
        for m in [&mut self.audio, &mut self.visual] {
            m.mapv_inplace(|w| w + T::of(dist.sample(rng)));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSource<T> {
    pub class_index: usize,
    /// `V̂_k`, on the visual grid.
    pub visual_tokens: PatchTokenSet<T>,
    pub gates: Array1<T>,
    /// `ĝ^a_k = P_av(Mean(Ã_k))`.
    pub audio_query: Array1<T>,
    /// `g^v_k = Mean(V̂_k)`.
    pub pooled_visual: Array1<T>,
    /// `ĝ^v_k = P_va(g^v_k)`.
    pub visual_embedding: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFeatures<T> {
    pub sources: Vec<AlignedSource<T>>,
}

impl<T: Scalar> AlignedFeatures<T> {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

pub fn align<T: Scalar>(
    feats: &ConditionedFeatures<T>,
    proj: &CorrespondenceProjectors<T>,
    clamp_gate_at_zero: bool,
) -> AlignedFeatures<T> {
    let sources = feats
        .sources
        .iter()
        .map(|src| {
            let audio_query = ops::linear(&proj.audio, src.audio.pooled.view());
            let v = src.visual.tokens.tokens().view();
            let (aligned, gates) = ops::cosine_gate(v, audio_query.view(), v, clamp_gate_at_zero);
            let pooled_visual = ops::mean_rows(aligned.view());
            let visual_embedding = ops::linear(&proj.visual, pooled_visual.view());
            AlignedSource {
                class_index: src.class_index,
                visual_tokens: src.visual.tokens.with_tokens(aligned),
                gates,
                audio_query,
                pooled_visual,
                visual_embedding,
            }
        })
        .collect();
    AlignedFeatures { sources }
}

/// Options for the in-batch contrastive loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveOptions {
    /// Drop negatives that share the anchor's class.
    pub class_collision_mask: bool,
}

/// One `(ĝ^v, ĝ^a)` pair of the batch.
#[derive(Debug, Clone, Copy)]
pub struct ContrastivePair<'a, T> {
    pub visual: &'a Array1<T>,
    pub audio: &'a Array1<T>,
    pub class_index: usize,
}

pub fn pairs_of<T: Scalar>(batch: &[AlignedFeatures<T>]) -> Vec<ContrastivePair<'_, T>> {
    batch
        .iter()
        .flat_map(|f| f.sources.iter())
        .map(|s| ContrastivePair {
            visual: &s.visual_embedding,
            audio: &s.audio_query,
            class_index: s.class_index,
        })
        .collect()
}

/// Result of the contrastive loss with gradients per pair.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput<T> {
    pub loss: T,
    pub d_visual: Vec<Array1<T>>,
    pub d_audio: Vec<Array1<T>>,
    pub d_tau: T,
}

/// Symmetric InfoNCE over all pairs: logits are `cos(ĝ^v_p, ĝ^a_q) / τ_av`,
/// each visual anchor's positive is its own audio and vice versa; the two
/// directions are averaged, each as a mean over anchors.
///
/// Returns `None` (with a warning) when fewer than two pairs are present.
pub fn contrastive_loss_and_grad<T: Scalar>(
    pairs: &[ContrastivePair<'_, T>],
    tau_av: T,
    options: ContrastiveOptions,
) -> Option<ContrastiveOutput<T>> {
    let p = pairs.len();
    if p < 2 {
        log::warn!("contrastive loss needs at least two pairs, got {p}; skipping");
        return None;
    }
    let mut sim = Array2::<T>::zeros((p, p));
    for (i, a) in pairs.iter().enumerate() {
        for (j, b) in pairs.iter().enumerate() {
            sim[[i, j]] = ops::cosine(a.visual.view(), b.audio.view());
        }
    }
    let allowed = |i: usize, j: usize| {
        i == j || !options.class_collision_mask || pairs[i].class_index != pairs[j].class_index
    };
    let inv_tau = T::one() / tau_av;
    let mut loss = T::zero();
    let mut d_sim = Array2::<T>::zeros((p, p));
    let half_mean = T::one() / T::from_usize(2 * p).unwrap();
    // direction 0: visual anchors over audio candidates (rows); 1: columns
    for dir in 0..2 {
        for anchor in 0..p {
            let idx: Vec<usize> = (0..p)
                .filter(|&c| if dir == 0 { allowed(anchor, c) } else { allowed(c, anchor) })
                .collect();
            let logits: Array1<T> = idx
                .iter()
                .map(|&c| {
                    let s = if dir == 0 { sim[[anchor, c]] } else { sim[[c, anchor]] };
                    s * inv_tau
                })
                .collect();
            let target = idx.iter().position(|&c| c == anchor).unwrap();
            let (l, g) = ops::softmax_cross_entropy(logits.view(), target);
            loss += l * half_mean;
            for (pos, &c) in idx.iter().enumerate() {
                let (r, q) = if dir == 0 { (anchor, c) } else { (c, anchor) };
                d_sim[[r, q]] += g[pos] * half_mean * inv_tau;
            }
        }
    }
    // logits = sim / τ  ⇒  dL/dτ = -Σ dL/dlogit · sim / τ, with dL/dlogit = d_sim · τ
    let d_tau = -(&d_sim * &sim).sum() * inv_tau;
    let dim = pairs[0].visual.len();
    let mut d_visual = vec![Array1::zeros(dim); p];
    let mut d_audio = vec![Array1::zeros(dim); p];
    for i in 0..p {
        for j in 0..p {
            let g = d_sim[[i, j]];
            if g == T::zero() {
                continue;
            }
            let (dv, da) = ops::cosine_backward(pairs[i].visual.view(), pairs[j].audio.view(), g);
            d_visual[i] += &dv;
            d_audio[j] += &da;
        }
    }
    Some(ContrastiveOutput { loss, d_visual, d_audio, d_tau })
}

/// `L_av` over every source of every sample in the batch.
pub fn correspondence_loss<T: Scalar>(
    batch: &[AlignedFeatures<T>],
    tau_av: T,
    options: ContrastiveOptions,
) -> Option<T> {
    contrastive_loss_and_grad(&pairs_of(batch), tau_av, options).map(|o| o.loss)
}

/// Backward of [`align`] for one source. Returns the gradients w.r.t. the
/// conditioned visual tokens `Ṽ_k` and the pooled conditioned audio `f^a_k`;
/// accumulates projector gradients.
#[allow(clippy::too_many_arguments)]
pub fn align_backward<T: Scalar>(
    conditioned_visual: &PatchTokenSet<T>,
    pooled_audio: &Array1<T>,
    aligned: &AlignedSource<T>,
    d_visual_embedding: &Array1<T>,
    d_audio_query: &Array1<T>,
    proj: &CorrespondenceProjectors<T>,
    clamp_gate_at_zero: bool,
    d_proj: &mut CorrespondenceProjectors<T>,
) -> (Array2<T>, Array1<T>) {
    let d_pooled = ops::linear_backward(
        &proj.visual,
        aligned.pooled_visual.view(),
        d_visual_embedding.view(),
        &mut d_proj.visual,
    );
    let v = conditioned_visual.tokens().view();
    let mut d_aligned = Array2::zeros(v.raw_dim());
    ops::mean_rows_backward(d_pooled.view(), &mut d_aligned);
    let (d_a, d_query, d_c) = ops::cosine_gate_backward(
        v,
        aligned.audio_query.view(),
        v,
        aligned.gates.view(),
        d_aligned.view(),
        clamp_gate_at_zero,
    );
    let d_query = d_query + d_audio_query;
    let d_pooled_audio =
        ops::linear_backward(&proj.audio, pooled_audio.view(), d_query.view(), &mut d_proj.audio);
    (d_a + d_c, d_pooled_audio)
}

/// Optional per-term weights of the total loss; all 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub av: f64,
    pub cls: f64,
    pub mcid: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { av: 1.0, cls: 1.0, mcid: 1.0 }
    }
}

/// `w_av·L_av + w_cls·L_cls + w_mcid·L_mcid`; rejects non-finite terms.
pub fn total_loss<T: Scalar>(l_av: T, l_cls: T, l_mcid: T, weights: LossWeights) -> Result<T> {
    for (v, name) in [(l_av, "correspondence"), (l_cls, "class conditioning"), (l_mcid, "detection")] {
        if !v.is_finite() {
            return Err(TvslError::NonFinite(name));
        }
    }
    Ok(T::of(weights.av) * l_av + T::of(weights.cls) * l_cls + T::of(weights.mcid) * l_mcid)
}
