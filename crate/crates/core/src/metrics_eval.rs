//! Localization metrics: IoU, class-aware IoU, success rates, AUC and
//! (class-aware) average precision.
//!
//! Conventions, versioned as [`METRICS_PROTOCOL`]:
//!
//! * IoU of two empty regions is 0.
//! * Success at threshold `τ` means `value ≥ τ`.
//! * AUC integrates the success-rate curve over thresholds `0.00, 0.05, …,
//!   1.00` with the trapezoid rule. On this curve a value of exactly 0 never
//!   counts as a success, so all-zero inputs score 0 and all-one inputs 100.
//! * AP ranks predictions by confidence (peak heatmap value), treats
//!   predictions with equal confidence as one block, and integrates the
//!   monotone precision envelope over recall ("continuous" interpolation).
//!   The recall denominator is the number of successful predictions; with no
//!   successes AP is 0.
//! * CAP is the mean over classes of AP restricted to class-matched maps.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Result, TvslError};

pub const METRICS_PROTOCOL: &str = "tvsl-metrics-v1";

/// Threshold grid of the AUC curve.
pub fn auc_thresholds() -> Vec<f64> {
    // i/20 rounds to the nearest double of each decimal threshold
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Ground-truth region of one class in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthRegion {
    /// Pixel box `[x0, x1) × [y0, y1)`.
    Box { x0: usize, y0: usize, x1: usize, y1: usize },
    Mask(Array2<bool>),
}

impl GroundTruthRegion {
    pub fn bbox(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        GroundTruthRegion::Box { x0, y0, x1, y1 }
    }

    /// Checks non-emptiness and that the region fits an `h × w` frame.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        match self {
            GroundTruthRegion::Box { x0, y0, x1, y1 } => {
                if x1 <= x0 || y1 <= y0 {
                    return Err(TvslError::Input("empty ground-truth box".into()));
                }
                if *x1 > w || *y1 > h {
                    return Err(TvslError::Input(format!(
                        "box ({x0},{y0},{x1},{y1}) exceeds a {w}x{h} frame"
                    )));
                }
            }
            GroundTruthRegion::Mask(m) => {
                if m.dim() != (h, w) {
                    return Err(TvslError::Shape(format!(
                        "mask {:?} for a {h}x{w} frame",
                        m.dim()
                    )));
                }
                if !m.iter().any(|&b| b) {
                    return Err(TvslError::Input("empty ground-truth mask".into()));
                }
            }
        }
        Ok(())
    }

    /// Shifts the region right by `dx` pixels (frame concatenation).
    pub fn offset_x(&self, dx: usize, new_width: usize) -> Self {
        match self {
            GroundTruthRegion::Box { x0, y0, x1, y1 } => {
                GroundTruthRegion::Box { x0: x0 + dx, y0: *y0, x1: x1 + dx, y1: *y1 }
            }
            GroundTruthRegion::Mask(m) => {
                let (h, w) = m.dim();
                let mut out = Array2::from_elem((h, new_width), false);
                out.slice_mut(ndarray::s![.., dx..dx + w]).assign(m);
                GroundTruthRegion::Mask(out)
            }
        }
    }

    pub fn to_mask(&self, h: usize, w: usize) -> Array2<bool> {
        match self {
            GroundTruthRegion::Box { x0, y0, x1, y1 } => {
                Array2::from_shape_fn((h, w), |(y, x)| y >= *y0 && y < *y1 && x >= *x0 && x < *x1)
            }
            GroundTruthRegion::Mask(m) => m.clone(),
        }
    }

    pub fn area(&self) -> usize {
        match self {
            GroundTruthRegion::Box { x0, y0, x1, y1 } => (x1 - x0) * (y1 - y0),
            GroundTruthRegion::Mask(m) => m.iter().filter(|&&b| b).count(),
        }
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 0 when the union is empty.
pub fn iou(pred: ArrayView2<bool>, gt: &GroundTruthRegion) -> Result<f64> {
    let (h, w) = pred.dim();
    match gt {
        GroundTruthRegion::Mask(m) if m.dim() != (h, w) => {
            return Err(TvslError::Shape(format!(
                "prediction {h}x{w} vs ground truth {:?}",
                m.dim()
            )))
        }
        GroundTruthRegion::Box { x1, y1, .. } if *x1 > w || *y1 > h => {
            return Err(TvslError::Shape(format!("box exceeds the {w}x{h} prediction")))
        }
        _ => {}
    }
    Ok(MaskIntegral::new(pred).iou(gt))
}

/// Summed-area table of a mask for O(1) box intersections.
#[derive(Debug, Clone)]
pub struct MaskIntegral {
    sums: Array2<u32>,
    total: u32,
    mask: Array2<bool>,
}

impl MaskIntegral {
    pub fn new(mask: ArrayView2<bool>) -> Self {
        let (h, w) = mask.dim();
        let mut sums = Array2::<u32>::zeros((h + 1, w + 1));
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += mask[[y, x]] as u32;
                sums[[y + 1, x + 1]] = sums[[y, x + 1]] + row;
            }
        }
        let total = sums[[h, w]];
        Self { sums, total, mask: mask.to_owned() }
    }

    pub fn count(&self) -> usize {
        self.total as usize
    }

    fn count_in(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u32 {
        self.sums[[y1, x1]] + self.sums[[y0, x0]] - self.sums[[y0, x1]] - self.sums[[y1, x0]]
    }

    pub fn iou(&self, gt: &GroundTruthRegion) -> f64 {
        let (inter, gt_area) = match gt {
            GroundTruthRegion::Box { x0, y0, x1, y1 } => {
                (self.count_in(*x0, *y0, *x1, *y1) as usize, gt.area())
            }
            GroundTruthRegion::Mask(m) => {
                let inter = m.iter().zip(self.mask.iter()).filter(|(&a, &b)| a && b).count();
                (inter, gt.area())
            }
        };
        let union = self.total as usize + gt_area - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Class-aware IoU: mean over predicted maps of IoU against the region of
/// the map's own class. A class without ground truth scores 0.
pub fn ciou(
    preds: &[(usize, ArrayView2<bool>)],
    gts: &BTreeMap<usize, GroundTruthRegion>,
) -> Result<f64> {
    if preds.is_empty() {
        return Err(TvslError::Input("no predicted maps".into()));
    }
    let mut total = 0.0;
    for (class, mask) in preds {
        match gts.get(class) {
            Some(gt) => total += iou(*mask, gt)?,
            None => log::warn!("no ground truth for class {class}; scored 0"),
        }
    }
    Ok(total / preds.len() as f64)
}

/// Percentage of values `≥ tau`; 0 for an empty list.
pub fn success_rate_at(values: &[f64], tau: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    100.0 * values.iter().filter(|&&v| v >= tau).count() as f64 / values.len() as f64
}

/// Trapezoidal area under the success-rate curve, in percent.
pub fn auc(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let curve: Vec<f64> = auc_thresholds()
        .iter()
        .map(|&t| values.iter().filter(|&&v| v > 0.0 && v >= t).count() as f64 / n)
        .collect();
    let ts = auc_thresholds();
    let area: f64 = curve
        .windows(2)
        .zip(ts.windows(2))
        .map(|(c, t)| 0.5 * (c[0] + c[1]) * (t[1] - t[0]))
        .sum();
    100.0 * area
}

/// Average precision in percent of predictions ranked by `confidences`,
/// with `successes[i]` marking a correct localization.
pub fn average_precision(confidences: &[f64], successes: &[bool]) -> Result<f64> {
    if confidences.len() != successes.len() {
        return Err(TvslError::Shape("confidences and successes differ in length".into()));
    }
    let positives = successes.iter().filter(|&&s| s).count();
    if positives == 0 {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));

    // (recall, precision) at the end of every block of tied confidences
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let c = confidences[order[i]];
        while i < order.len() && confidences[order[i]] == c {
            tp += successes[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / seen as f64));
    }
    // monotone envelope from the right, then area over recall steps
    let mut envelope = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for (j, &(_, p)) in points.iter().enumerate().rev() {
        best = best.max(p);
        envelope[j] = best;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (j, &(r, _)) in points.iter().enumerate() {
        area += (r - prev_recall) * envelope[j];
        prev_recall = r;
    }
    Ok(100.0 * area)
}

/// One class-matched prediction for CAP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassPrediction {
    pub class_index: usize,
    pub confidence: f64,
    pub success: bool,
}

/// Mean over classes of per-class AP, in percent.
pub fn class_average_precision(preds: &[ClassPrediction]) -> Result<f64> {
    let mut by_class: BTreeMap<usize, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for p in preds {
        let e = by_class.entry(p.class_index).or_default();
        e.0.push(p.confidence);
        e.1.push(p.success);
    }
    if by_class.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (conf, succ) in by_class.values() {
        total += average_precision(conf, succ)?;
    }
    Ok(total / by_class.len() as f64)
}

/// Score of one predicted map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceScore {
    pub class_index: usize,
    pub class_name: String,
    pub iou: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    /// IoU for single-source samples, CIoU otherwise.
    pub value: f64,
    pub sources: Vec<SourceScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceBaseline {
    pub permutations: usize,
    pub seed: u64,
    /// Mean success rate at the report threshold over all permutations.
    pub success_rate: f64,
    /// Mean per-sample IoU / CIoU over all permutations.
    pub mean_value: f64,
}

/// Aggregate and per-sample localization metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    /// `1` for single-source evaluation, otherwise sources per sample.
    pub sources: usize,
    pub policy: String,
    pub threshold: f64,
    /// AP for single-source, CAP for multi-source.
    pub precision: f64,
    /// IoU@τ or CIoU@τ success rate.
    pub success_rate: f64,
    pub auc: f64,
    pub samples: Vec<SampleScore>,
    pub chance: Option<ChanceBaseline>,
}

impl MetricsReport {
    /// Builds a report from per-sample scores.
    pub fn from_samples(
        samples: Vec<SampleScore>,
        sources: usize,
        policy: String,
        threshold: f64,
    ) -> Result<Self> {
        let values: Vec<f64> = samples.iter().map(|s| s.value).collect();
        let precision = if sources == 1 {
            let conf: Vec<f64> = samples.iter().map(|s| s.sources[0].confidence).collect();
            let succ: Vec<bool> = samples.iter().map(|s| s.sources[0].iou >= threshold).collect();
            average_precision(&conf, &succ)?
        } else {
            let preds: Vec<ClassPrediction> = samples
                .iter()
                .flat_map(|s| s.sources.iter())
                .map(|src| ClassPrediction {
                    class_index: src.class_index,
                    confidence: src.confidence,
                    success: src.iou >= threshold,
                })
                .collect();
            class_average_precision(&preds)?
        };
        Ok(Self {
            protocol: METRICS_PROTOCOL.to_string(),
            sources,
            policy,
            threshold,
            precision,
            success_rate: success_rate_at(&values, threshold),
            auc: auc(&values),
            samples,
            chance: None,
        })
    }

    pub fn precision_label(&self) -> &'static str {
        if self.sources == 1 {
            "AP"
        } else {
            "CAP"
        }
    }

    pub fn success_label(&self) -> String {
        let name = if self.sources == 1 { "IoU" } else { "CIoU" };
        format!("{name}@{}", self.threshold)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per predicted map.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,sample_value,class_index,class_name,iou,confidence\n");
        for s in &self.samples {
            for src in &s.sources {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    csv_field(&s.sample_id),
                    s.value,
                    src.class_index,
                    csv_field(&src.class_name),
                    src.iou,
                    src.confidence
                ));
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
