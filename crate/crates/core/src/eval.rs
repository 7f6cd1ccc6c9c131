//! Class-aware evaluation: heatmaps for the ground-truth classes of each
//! sample, binarized and scored against the ground-truth regions, plus a
//! shuffled-heatmap chance baseline.
//!
//! The chance baseline re-assigns every predicted map to a random
//! `(sample, class)` target of the whole split (a uniform permutation over
//! all maps) and rescores; the reported value is the mean over
//! permutations. Shuffling only within a sample would leave half of the
//! two-source assignments untouched, so the pool-wide permutation is used.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::localization::{binarize, Heatmap, ThresholdPolicy};
use crate::metrics_eval::{
    ChanceBaseline, GroundTruthRegion, MaskIntegral, MetricsReport, SampleScore, SourceScore,
};
use crate::mixture_data::EncodedSample;
use crate::model::TvslModel;
use crate::seeding::rng_for;
use crate::text_guidance::ClassVocabulary;
use crate::{Result, Scalar, TvslError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub policy: ThresholdPolicy,
    /// IoU / CIoU success threshold; `None` picks 0.5 for single-source
    /// splits and 0.3 otherwise.
    pub threshold: Option<f64>,
    /// 0 disables the chance baseline.
    pub chance_permutations: usize,
    pub chance_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { policy: ThresholdPolicy::default(), threshold: None, chance_permutations: 100, chance_seed: 0 }
    }
}

impl EvalOptions {
    pub fn threshold_for(&self, sources: usize) -> f64 {
        self.threshold.unwrap_or(if sources == 1 { 0.5 } else { 0.3 })
    }
}

/// One heatmap set to score.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub id: String,
    pub heatmap: Heatmap<T>,
    pub regions: BTreeMap<usize, GroundTruthRegion>,
}

/// A binarized map kept for the chance baseline.
struct KeptMask {
    mask: Array2<bool>,
    count: usize,
}

impl KeptMask {
    fn iou(&self, gt: &GroundTruthRegion) -> f64 {
        let (h, w) = self.mask.dim();
        let inter = match gt {
            GroundTruthRegion::Box { x0, y0, x1, y1 } if *x1 <= w && *y1 <= h => {
                self.mask.slice(s![*y0..*y1, *x0..*x1]).iter().filter(|&&b| b).count()
            }
            GroundTruthRegion::Box { .. } => return 0.0,
            GroundTruthRegion::Mask(m) if m.dim() == (h, w) => {
                m.iter().zip(self.mask.iter()).filter(|(&a, &b)| a && b).count()
            }
            GroundTruthRegion::Mask(_) => return 0.0,
        };
        let union = self.count + gt.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Scores predictions one at a time so only binary masks are retained.
pub fn evaluate_predictions<T: Scalar>(
    predictions: impl IntoIterator<Item = Result<Prediction<T>>>,
    vocab: &ClassVocabulary,
    options: &EvalOptions,
) -> Result<MetricsReport> {
    let keep_masks = options.chance_permutations > 0;
    let mut samples = Vec::new();
    let mut masks: Vec<KeptMask> = Vec::new();
    let mut targets: Vec<Vec<GroundTruthRegion>> = Vec::new();
    let mut sources = None;
    for pred in predictions {
        let pred = pred?;
        let k = pred.heatmap.len();
        if k == 0 {
            return Err(TvslError::EmptySelection);
        }
        match sources {
            None => sources = Some(k),
            Some(s) if s != k => {
                return Err(TvslError::Input(format!(
                    "mixed source counts in one evaluation ({s} and {k})"
                )))
            }
            _ => {}
        }
        let (h, w) = pred.heatmap.size();
        let bin = binarize(&pred.heatmap, options.policy);
        let mut scores = Vec::with_capacity(k);
        let mut sample_targets = Vec::with_capacity(k);
        for (i, &c) in bin.class_indices.iter().enumerate() {
            let mask = bin.mask(i);
            let iou = match pred.regions.get(&c) {
                Some(gt) => {
                    gt.validate(h, w)?;
                    sample_targets.push(gt.clone());
                    MaskIntegral::new(mask).iou(gt)
                }
                None => {
                    log::warn!("sample {}: no ground truth for class {c}; scored 0", pred.id);
                    0.0
                }
            };
            if keep_masks {
                masks.push(KeptMask { count: mask.iter().filter(|&&b| b).count(), mask: mask.to_owned() });
            }
            scores.push(SourceScore {
                class_index: c,
                class_name: vocab.names().get(c).cloned().unwrap_or_default(),
                iou,
                confidence: pred.heatmap.confidence(i).as_f64(),
            });
        }
        let value = scores.iter().map(|s| s.iou).sum::<f64>() / k as f64;
        samples.push(SampleScore { sample_id: pred.id, value, sources: scores });
        targets.push(sample_targets);
    }
    let sources = sources.ok_or_else(|| TvslError::Input("nothing to evaluate".into()))?;
    let threshold = options.threshold_for(sources);
    let mut report = MetricsReport::from_samples(samples, sources, options.policy.id(), threshold)?;
    if keep_masks {
        report.chance = Some(chance_baseline(&masks, &targets, sources, threshold, options)?);
    }
    Ok(report)
}

fn chance_baseline(
    masks: &[KeptMask],
    targets: &[Vec<GroundTruthRegion>],
    sources: usize,
    threshold: f64,
    options: &EvalOptions,
) -> Result<ChanceBaseline> {
    if masks.iter().any(|m| m.mask.dim() != masks[0].mask.dim()) {
        return Err(TvslError::Input("chance baseline needs equal frame sizes".into()));
    }
    let mut rng = rng_for(options.chance_seed, "chance baseline", 0);
    let mut order: Vec<usize> = (0..masks.len()).collect();
    let mut total_rate = 0.0;
    let mut total_value = 0.0;
    for _ in 0..options.chance_permutations {
        order.shuffle(&mut rng);
        let mut next = order.iter();
        let mut successes = 0usize;
        let mut value_sum = 0.0;
        for sample_targets in targets {
            // targets without ground truth still consume a map and score 0
            let mut sum = 0.0;
            for gt in sample_targets {
                sum += masks[*next.next().unwrap()].iou(gt);
            }
            for _ in sample_targets.len()..sources {
                next.next();
            }
            let v = sum / sources as f64;
            value_sum += v;
            successes += (v >= threshold) as usize;
        }
        total_rate += 100.0 * successes as f64 / targets.len() as f64;
        total_value += value_sum / targets.len() as f64;
    }
    let p = options.chance_permutations as f64;
    Ok(ChanceBaseline {
        permutations: options.chance_permutations,
        seed: options.chance_seed,
        success_rate: total_rate / p,
        mean_value: total_value / p,
    })
}

/// Heatmaps of `sample` for its ground-truth classes.
pub fn predict<T: Scalar>(model: &TvslModel<T>, sample: &EncodedSample<T>) -> Result<Prediction<T>> {
    let classes = sample.classes();
    let inf = model.infer(sample, Some(&classes))?;
    Ok(Prediction { id: sample.id.clone(), heatmap: inf.heatmap, regions: sample.regions.clone() })
}

/// Class-aware evaluation of `model` on `samples`.
pub fn evaluate<T: Scalar>(
    model: &TvslModel<T>,
    samples: &[EncodedSample<T>],
    options: &EvalOptions,
) -> Result<MetricsReport> {
    evaluate_predictions(samples.iter().map(|s| predict(model, s)), model.vocab(), options)
}

/// Heatmaps equal to the ground-truth masks, for checking the metric
/// ceiling.
pub fn oracle_prediction<T: Scalar>(sample: &EncodedSample<T>) -> Result<Prediction<T>> {
    let (h, w) = sample.frame_size;
    let classes = sample.classes();
    let mut maps = ndarray::Array3::<T>::zeros((classes.len(), h, w));
    for (k, c) in classes.iter().enumerate() {
        let gt = sample
            .regions
            .get(c)
            .ok_or_else(|| TvslError::Input(format!("sample {} lacks a region for class {c}", sample.id)))?;
        maps.index_axis_mut(Axis(0), k)
            .assign(&gt.to_mask(h, w).mapv(|b| if b { T::one() } else { T::zero() }));
    }
    Ok(Prediction {
        id: sample.id.clone(),
        heatmap: Heatmap { maps, class_indices: classes, grid: sample.visual.grid() },
        regions: sample.regions.clone(),
    })
}
