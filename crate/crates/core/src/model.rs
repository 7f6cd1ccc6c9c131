//! The full model: trainable parameters, per-sample forward pass, batch
//! loss with its analytic gradient, and heatmap inference.
//!
//! Batch objective: `w_av·L_av + mean_b(w_cls·L_cls_b + w_mcid·L_mcid_b)`,
//! where `L_av` is one in-batch contrastive loss over every source of every
//! sample.

use std::ops::Range;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::avc_block::{
    align, align_backward, contrastive_loss_and_grad, AlignedFeatures, ContrastiveOptions,
    ContrastivePair, CorrespondenceProjectors, LossWeights,
};
use crate::conditioner::{
    branch_backward, class_conditioning_backward, class_conditioning_loss, condition_sources,
    ConditionedFeatures, ConditioningProjectors,
};
use crate::encoder_hub::{EncoderHub, PatchTokenSet};
use crate::instance_detector::{
    detect, detection_backward, detection_loss, project_tokens, DetectionResult, ProjectorSet,
    DETECTION_THRESHOLD,
};
use crate::localization::{heatmaps, Heatmap};
use crate::mixture_data::EncodedSample;
use crate::text_guidance::{apply_prompt, apply_prompt_backward, encode_class_names, ClassVocabulary};
use crate::{ops, Result, Scalar, TvslError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    /// Learnable prompt context rows; 0 disables prompting.
    pub prompt_length: usize,
    /// Skip instance detection and condition on every class.
    pub single_stage: bool,
    pub clamp_gate_at_zero: bool,
    pub weights: LossWeights,
    pub contrastive: ContrastiveOptions,
    /// Class-name template; `{}` is replaced by the name.
    pub template: String,
    pub detection_threshold: f64,
    /// Std of the Gaussian perturbation added to identity projectors.
    pub init_noise: f64,
    pub prompt_init_std: f64,
    pub tau_det: f64,
    pub tau_cls: f64,
    pub tau_av: f64,
    /// Temperatures are clamped into this range after every update.
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            prompt_length: 0,
            single_stage: false,
            clamp_gate_at_zero: false,
            weights: LossWeights::default(),
            contrastive: ContrastiveOptions::default(),
            template: "{}".into(),
            detection_threshold: DETECTION_THRESHOLD,
            init_noise: 0.01,
            prompt_init_std: 0.02,
            tau_det: 10.0,
            tau_cls: 1.0 / 0.07,
            tau_av: 0.07,
            tau_min: 0.01,
            tau_max: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(TvslError::Config("dim must be positive".into()));
        }
        if !(self.tau_min > 0.0 && self.tau_min < self.tau_max) {
            return Err(TvslError::Config("temperature bounds must satisfy 0 < min < max".into()));
        }
        for t in [self.tau_det, self.tau_cls, self.tau_av] {
            if !(t >= self.tau_min && t <= self.tau_max) {
                return Err(TvslError::Config(format!("initial temperature {t} outside bounds")));
            }
        }
        if !self.template.contains("{}") {
            return Err(TvslError::Config("template needs a {} placeholder".into()));
        }
        Ok(())
    }
}

/// Everything that training updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Parameters<T> {
    pub detector: ProjectorSet<T>,
    pub conditioning: ConditioningProjectors<T>,
    pub correspondence: CorrespondenceProjectors<T>,
    /// `L × D` prompt context.
    pub prompt: Array2<T>,
    pub tau_det: T,
    pub tau_cls: T,
    pub tau_av: T,
}

const MATRIX_NAMES: [&str; 8] = [
    "detector.audio",
    "detector.visual",
    "detector.fusion",
    "conditioning.visual",
    "conditioning.audio",
    "correspondence.audio",
    "correspondence.visual",
    "prompt",
];

impl<T: Scalar> Parameters<T> {
    pub fn zeros(dim: usize, prompt_length: usize) -> Self {
        Self {
            detector: ProjectorSet::zeros(dim),
            conditioning: ConditioningProjectors::zeros(dim),
            correspondence: CorrespondenceProjectors::zeros(dim),
            prompt: Array2::zeros((prompt_length, dim)),
            tau_det: T::zero(),
            tau_cls: T::zero(),
            tau_av: T::zero(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.prompt.nrows())
    }

    /// Identity projectors plus small Gaussian noise.
    pub fn identity_init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = config.dim;
        let mut detector = ProjectorSet::identity(d);
        let mut conditioning = ConditioningProjectors::identity(d);
        let mut correspondence = CorrespondenceProjectors::identity(d);
        if config.init_noise > 0.0 {
            detector.perturb(config.init_noise, rng);
            conditioning.perturb(config.init_noise, rng);
            correspondence.perturb(config.init_noise, rng);
        }
        let prompt = gaussian((config.prompt_length, d), config.prompt_init_std, rng);
        Self::assemble(config, detector, conditioning, correspondence, prompt)
    }

    /// Dense Gaussian projectors with variance `1 / fan_in`: a model that
    /// has not learned anything about the encoders' geometry.
    pub fn random_init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = config.dim;
        let s = 1.0 / (d as f64).sqrt();
        let detector = ProjectorSet {
            audio: gaussian((d, d), s, rng),
            visual: gaussian((d, d), s, rng),
            fusion: gaussian((d, 2 * d), s / 2f64.sqrt(), rng),
        };
        let conditioning = ConditioningProjectors {
            visual: gaussian((d, d), s, rng),
            audio: gaussian((d, d), s, rng),
        };
        let correspondence = CorrespondenceProjectors {
            audio: gaussian((d, d), s, rng),
            visual: gaussian((d, d), s, rng),
        };
        let prompt = gaussian((config.prompt_length, d), config.prompt_init_std, rng);
        Self::assemble(config, detector, conditioning, correspondence, prompt)
    }

    fn assemble(
        config: &ModelConfig,
        detector: ProjectorSet<T>,
        conditioning: ConditioningProjectors<T>,
        correspondence: CorrespondenceProjectors<T>,
        prompt: Array2<T>,
    ) -> Self {
        Self {
            detector,
            conditioning,
            correspondence,
            prompt,
            tau_det: T::of(config.tau_det),
            tau_cls: T::of(config.tau_cls),
            tau_av: T::of(config.tau_av),
        }
    }

    pub fn dim(&self) -> usize {
        self.detector.dim()
    }

    pub fn prompt_length(&self) -> usize {
        self.prompt.nrows()
    }

    fn matrices(&self) -> [&Array2<T>; 8] {
        [
            &self.detector.audio,
            &self.detector.visual,
            &self.detector.fusion,
            &self.conditioning.visual,
            &self.conditioning.audio,
            &self.correspondence.audio,
            &self.correspondence.visual,
            &self.prompt,
        ]
    }

    fn matrices_mut(&mut self) -> [&mut Array2<T>; 8] {
        [
            &mut self.detector.audio,
            &mut self.detector.visual,
            &mut self.detector.fusion,
            &mut self.conditioning.visual,
            &mut self.conditioning.audio,
            &mut self.correspondence.audio,
            &mut self.correspondence.visual,
            &mut self.prompt,
        ]
    }

    /// Named ranges of [`Self::to_flat`].
    pub fn segments(&self) -> Vec<(&'static str, Range<usize>)> {
        let mut out = Vec::new();
        let mut start = 0;
        for (name, m) in MATRIX_NAMES.iter().zip(self.matrices()) {
            out.push((*name, start..start + m.len()));
            start += m.len();
        }
        for name in ["tau_det", "tau_cls", "tau_av"] {
            out.push((name, start..start + 1));
            start += 1;
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum::<usize>() + 3
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_values());
        for m in self.matrices() {
            out.extend(m.iter().copied());
        }
        out.extend([self.tau_det, self.tau_cls, self.tau_av]);
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(TvslError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_values()
            )));
        }
        let mut it = flat.iter().copied();
        for m in self.matrices_mut() {
            for v in m.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        self.tau_det = it.next().unwrap();
        self.tau_cls = it.next().unwrap();
        self.tau_av = it.next().unwrap();
        Ok(())
    }

    pub fn clamp_temperatures(&mut self, lo: f64, hi: f64) {
        let (lo, hi) = (T::of(lo), T::of(hi));
        for t in [&mut self.tau_det, &mut self.tau_cls, &mut self.tau_av] {
            *t = t.max(lo).min(hi);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

fn gaussian<T: Scalar>(shape: (usize, usize), std: f64, rng: &mut impl Rng) -> Array2<T> {
    if std == 0.0 {
        return Array2::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || T::of(dist.sample(rng)))
}

/// Intermediate values of one sample's training forward pass.
#[derive(Debug, Clone)]
pub struct SampleForward<T> {
    /// `A'`, `V'`.
    pub audio: PatchTokenSet<T>,
    pub visual: PatchTokenSet<T>,
    pub detection: Option<DetectionResult<T>>,
    /// `(class, e_k)` for every conditioned source.
    pub sources: Vec<(usize, Array1<T>)>,
    pub conditioned: ConditionedFeatures<T>,
    pub aligned: AlignedFeatures<T>,
    pub l_mcid: T,
    pub l_cls: T,
}

impl<T: Scalar> SampleForward<T> {
    fn classes(&self) -> Vec<usize> {
        self.sources.iter().map(|(c, _)| *c).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub av: T,
    /// Batch mean of the per-sample class conditioning loss.
    pub cls: T,
    /// Batch mean of the per-sample detection loss.
    pub mcid: T,
}

/// Inference outputs for one sample.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub detection: Option<DetectionResult<T>>,
    pub heatmap: Heatmap<T>,
}

/// Trainable parameters together with the frozen text embeddings of the
/// current vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TvslModel<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
    vocab: ClassVocabulary,
    /// Class-name embeddings before prompting, `N × D`.
    base_bank: Array2<T>,
}

impl<T: Scalar> TvslModel<T> {
    pub fn new(
        config: ModelConfig,
        params: Parameters<T>,
        hub: &EncoderHub<T>,
        vocab: ClassVocabulary,
    ) -> Result<Self> {
        config.validate()?;
        if params.dim() != config.dim || hub.dim() != config.dim {
            return Err(TvslError::Shape(format!(
                "config dim {}, parameter dim {}, encoder dim {}",
                config.dim,
                params.dim(),
                hub.dim()
            )));
        }
        if params.prompt_length() != config.prompt_length {
            return Err(TvslError::Shape("prompt length differs from the config".into()));
        }
        let base_bank = encode_class_names(&hub.text, &vocab, &config.template)?;
        Ok(Self { config, params, vocab, base_bank })
    }

    pub fn vocab(&self) -> &ClassVocabulary {
        &self.vocab
    }

    /// Same parameters over a different vocabulary, without any parameter
    /// change. Refused when a prompt context is in use.
    pub fn with_vocabulary(&self, hub: &EncoderHub<T>, vocab: ClassVocabulary) -> Result<Self> {
        if self.config.prompt_length > 0 {
            return Err(TvslError::PromptInZeroShot);
        }
        Self::new(self.config.clone(), self.params.clone(), hub, vocab)
    }

    /// Text bank `𝒯` with the prompt context applied.
    pub fn bank(&self) -> Array2<T> {
        apply_prompt(&self.base_bank, &self.params.prompt)
    }

    pub fn base_bank(&self) -> &Array2<T> {
        &self.base_bank
    }

    fn check_sample(&self, s: &EncodedSample<T>) -> Result<()> {
        if s.labels.len() != self.vocab.len() {
            return Err(TvslError::Shape(format!(
                "sample {} has {} labels, vocabulary has {} classes",
                s.id,
                s.labels.len(),
                self.vocab.len()
            )));
        }
        Ok(())
    }

    /// Training forward pass of one sample against `bank`.
    pub fn forward(&self, s: &EncodedSample<T>, bank: &Array2<T>) -> Result<SampleForward<T>> {
        self.check_sample(s)?;
        let p = &self.params;
        let clamp = self.config.clamp_gate_at_zero;
        let (audio, visual) = project_tokens(&s.audio, &s.visual, &p.detector)?;
        let (detection, l_mcid, classes) = if self.config.single_stage {
            (None, T::zero(), (0..self.vocab.len()).collect())
        } else {
            let det = detect(&audio, &visual, bank, &p.detector, p.tau_det, self.config.detection_threshold)?;
            let l = detection_loss(&det, &s.labels)?;
            (Some(det), l, s.classes())
        };
        if classes.is_empty() {
            return Err(TvslError::EmptySelection);
        }
        let sources: Vec<(usize, Array1<T>)> =
            classes.iter().map(|&c| (c, bank.row(c).to_owned())).collect();
        let conditioned = condition_sources(&audio, &visual, &sources, &p.conditioning, clamp)?;
        let l_cls = class_conditioning_loss(&conditioned, bank, &classes, p.tau_cls)?;
        let aligned = align(&conditioned, &p.correspondence, clamp);
        Ok(SampleForward { audio, visual, detection, sources, conditioned, aligned, l_mcid, l_cls })
    }

    fn combine(&self, forwards: &[SampleForward<T>], l_av: T) -> Result<LossBreakdown<T>> {
        let b = T::from_usize(forwards.len()).unwrap();
        let cls = forwards.iter().fold(T::zero(), |acc, f| acc + f.l_cls) / b;
        let mcid = forwards.iter().fold(T::zero(), |acc, f| acc + f.l_mcid) / b;
        let total = crate::avc_block::total_loss(l_av, cls, mcid, self.config.weights)?;
        Ok(LossBreakdown { total, av: l_av, cls, mcid })
    }

    fn pairs<'a>(forwards: &'a [SampleForward<T>]) -> Vec<ContrastivePair<'a, T>> {
        forwards
            .iter()
            .flat_map(|f| f.aligned.sources.iter())
            .map(|s| ContrastivePair {
                visual: &s.visual_embedding,
                audio: &s.audio_query,
                class_index: s.class_index,
            })
            .collect()
    }

    /// Batch loss without gradients.
    pub fn loss(&self, batch: &[&EncodedSample<T>]) -> Result<LossBreakdown<T>> {
        if batch.is_empty() {
            return Err(TvslError::Input("empty batch".into()));
        }
        let bank = self.bank();
        let forwards = batch
            .iter()
            .map(|s| self.forward(s, &bank))
            .collect::<Result<Vec<_>>>()?;
        let l_av = contrastive_loss_and_grad(&Self::pairs(&forwards), self.params.tau_av, self.config.contrastive)
            .map_or(T::zero(), |o| o.loss);
        self.combine(&forwards, l_av)
    }

    /// Batch loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[&EncodedSample<T>]) -> Result<(LossBreakdown<T>, Parameters<T>)> {
        if batch.is_empty() {
            return Err(TvslError::Input("empty batch".into()));
        }
        let p = &self.params;
        let clamp = self.config.clamp_gate_at_zero;
        let w = self.config.weights;
        let bank = self.bank();
        let forwards = batch
            .iter()
            .map(|s| self.forward(s, &bank))
            .collect::<Result<Vec<_>>>()?;
        let contrast = contrastive_loss_and_grad(&Self::pairs(&forwards), p.tau_av, self.config.contrastive);
        let l_av = contrast.as_ref().map_or(T::zero(), |o| o.loss);
        let losses = self.combine(&forwards, l_av)?;

        let b = T::from_usize(batch.len()).unwrap();
        let w_av = T::of(w.av);
        let scale_cls = T::of(w.cls) / b;
        let scale_mcid = T::of(w.mcid) / b;
        let mut g = p.zeros_like();
        let mut d_bank = Array2::<T>::zeros(bank.raw_dim());
        let zero = Array1::<T>::zeros(p.dim());
        let mut pair = 0;

        for (s, f) in batch.iter().zip(&forwards) {
            let mut d_a = Array2::<T>::zeros(f.audio.tokens().raw_dim());
            let mut d_v = Array2::<T>::zeros(f.visual.tokens().raw_dim());
            let cls = class_conditioning_backward(&f.conditioned, &bank, &f.classes(), p.tau_cls, scale_cls)?;
            d_bank += &cls.d_bank;
            g.tau_cls += cls.d_tau;

            for (k, ((c, e), (cond, al))) in f
                .sources
                .iter()
                .zip(f.conditioned.sources.iter().zip(&f.aligned.sources))
                .enumerate()
            {
                let (d_gv, d_ga) = match &contrast {
                    Some(o) => (&o.d_visual[pair] * w_av, &o.d_audio[pair] * w_av),
                    None => (zero.clone(), zero.clone()),
                };
                pair += 1;
                let (d_gated_v, d_pooled_a) = align_backward(
                    &cond.visual.tokens,
                    &cond.audio.pooled,
                    al,
                    &d_gv,
                    &d_ga,
                    &p.correspondence,
                    clamp,
                    &mut g.correspondence,
                );
                let (dv, de_v) = branch_backward(
                    &f.visual,
                    e,
                    &p.conditioning.visual,
                    &cond.visual,
                    &cls.d_visual[k],
                    None,
                    Some(&d_gated_v),
                    clamp,
                    &mut g.conditioning.visual,
                );
                let (da, de_a) = branch_backward(
                    &f.audio,
                    e,
                    &p.conditioning.audio,
                    &cond.audio,
                    &cls.d_audio[k],
                    Some(&d_pooled_a),
                    None,
                    clamp,
                    &mut g.conditioning.audio,
                );
                d_v += &dv;
                d_a += &da;
                let mut row = d_bank.row_mut(*c);
                row += &de_v;
                row += &de_a;
            }

            if let Some(det) = &f.detection {
                let db = detection_backward(
                    &f.audio,
                    &f.visual,
                    &bank,
                    &p.detector,
                    p.tau_det,
                    det,
                    &s.labels,
                    scale_mcid,
                    &mut g.detector.fusion,
                );
                d_a += &db.d_audio_tokens;
                d_v += &db.d_visual_tokens;
                d_bank += &db.d_bank;
                g.tau_det += db.d_tau;
            }
            ops::linear_rows_backward(&p.detector.audio, s.audio.tokens().view(), d_a.view(), &mut g.detector.audio);
            ops::linear_rows_backward(&p.detector.visual, s.visual.tokens().view(), d_v.view(), &mut g.detector.visual);
        }
        if let Some(o) = &contrast {
            g.tau_av = o.d_tau * w_av;
        }
        g.prompt = apply_prompt_backward(&d_bank, p.prompt_length());
        Ok((losses, g))
    }

    /// Heatmaps for `classes`, or for the detected classes when `None`
    /// (every class for a single-stage model).
    pub fn infer(&self, s: &EncodedSample<T>, classes: Option<&[usize]>) -> Result<Inference<T>> {
        let p = &self.params;
        let clamp = self.config.clamp_gate_at_zero;
        let bank = self.bank();
        let (audio, visual) = project_tokens(&s.audio, &s.visual, &p.detector)?;
        let detection = if self.config.single_stage {
            None
        } else {
            Some(detect(&audio, &visual, &bank, &p.detector, p.tau_det, self.config.detection_threshold)?)
        };
        let chosen: Vec<usize> = match (classes, &detection) {
            (Some(c), _) => c.to_vec(),
            (None, Some(d)) => d.selected.clone(),
            (None, None) => (0..self.vocab.len()).collect(),
        };
        if chosen.is_empty() {
            return Err(TvslError::EmptySelection);
        }
        if let Some(&bad) = chosen.iter().find(|&&c| c >= self.vocab.len()) {
            return Err(TvslError::ClassIndex { index: bad, len: self.vocab.len() });
        }
        let sources: Vec<(usize, Array1<T>)> = chosen.iter().map(|&c| (c, bank.row(c).to_owned())).collect();
        let conditioned = condition_sources(&audio, &visual, &sources, &p.conditioning, clamp)?;
        let aligned = align(&conditioned, &p.correspondence, clamp);
        let heatmap = heatmaps(&aligned, s.frame_size)?;
        Ok(Inference { detection, heatmap })
    }
}
