//! Heatmap inference and binarization.
//!
//! Each source's map is the cosine similarity between its audio query and
//! every aligned visual token, laid out on the visual grid and upsampled to
//! frame resolution with bilinear interpolation (`align_corners = false`,
//! source coordinates clamped at the border as in PyTorch).

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::avc_block::AlignedFeatures;
use crate::encoder_hub::Grid;
use crate::{io, ops, Result, Scalar, TvslError};

/// `K × H × W` similarity maps with the class of each map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap<T> {
    pub maps: Array3<T>,
    pub class_indices: Vec<usize>,
    pub grid: Grid,
}

impl<T: Scalar> Heatmap<T> {
    pub fn len(&self) -> usize {
        self.class_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_indices.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }

    pub fn map(&self, k: usize) -> ArrayView2<'_, T> {
        self.maps.index_axis(Axis(0), k)
    }

    /// Peak similarity of map `k`, used as the prediction confidence.
    pub fn confidence(&self, k: usize) -> T {
        self.map(k).fold(T::neg_infinity(), |m, &v| m.max(v))
    }

    /// Writes `<stem>_<k>.png` (8-bit, `[-1, 1]` mapped to `0..=255`) and
    /// `<stem>.f32` (raw float array) into `dir`. Returns the written paths.
    pub fn export(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        let mut written = Vec::with_capacity(self.len() + 1);
        for k in 0..self.len() {
            let path = dir.join(format!("{stem}_{k}.png"));
            io::write_gray_png(&path, self.map(k), -1.0, 1.0)?;
            written.push(path);
        }
        let raw = dir.join(format!("{stem}.f32"));
        io::write_raw(&raw, self.maps.view())?;
        written.push(raw);
        Ok(written)
    }
}

/// Bilinear upsampling of a grid to `(out_h, out_w)`, `align_corners = false`.
pub fn bilinear_upsample<T: Scalar>(grid: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (in_h, in_w) = grid.dim();
    let ys = axis_weights(in_h, out_h);
    let xs = axis_weights(in_w, out_w);
    let mut out = Array2::zeros((out_h, out_w));
    for (y, &(y0, y1, ly)) in ys.iter().enumerate() {
        for (x, &(x0, x1, lx)) in xs.iter().enumerate() {
            let top = grid[[y0, x0]] * (T::one() - lx) + grid[[y0, x1]] * lx;
            let bottom = grid[[y1, x0]] * (T::one() - lx) + grid[[y1, x1]] * lx;
            out[[y, x]] = top * (T::one() - ly) + bottom * ly;
        }
    }
    out
}

fn axis_weights<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, T::of(lambda))
        })
        .collect()
}

/// Per-source heatmaps at `out_size = (H, W)`.
pub fn heatmaps<T: Scalar>(aligned: &AlignedFeatures<T>, out_size: (usize, usize)) -> Result<Heatmap<T>> {
    let first = aligned
        .sources
        .first()
        .ok_or_else(|| TvslError::Input("no sources to localize".into()))?;
    let grid = first.visual_tokens.grid();
    let (out_h, out_w) = out_size;
    let mut maps = Array3::zeros((aligned.len(), out_h, out_w));
    for (k, src) in aligned.sources.iter().enumerate() {
        if src.visual_tokens.grid() != grid {
            return Err(TvslError::Shape("sources disagree on the visual grid".into()));
        }
        let cells = ops::row_cosines(src.visual_tokens.tokens().view(), src.audio_query.view());
        let cells = cells.into_shape_with_order((grid.rows, grid.cols)).unwrap();
        maps.slice_mut(s![k, .., ..])
            .assign(&bilinear_upsample(cells.view(), out_h, out_w));
    }
    Ok(Heatmap {
        maps,
        class_indices: aligned.sources.iter().map(|s| s.class_index).collect(),
        grid,
    })
}

/// How a similarity map becomes a region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Normalize each map to `[0, 1]` by its own min and max, keep `≥ threshold`.
    MinMax { threshold: f64 },
    /// Keep raw similarity `≥ threshold`.
    Absolute { threshold: f64 },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::MinMax { threshold: 0.5 }
    }
}

impl ThresholdPolicy {
    /// Stable identifier recorded in metric reports.
    pub fn id(&self) -> String {
        match self {
            ThresholdPolicy::MinMax { threshold } => format!("minmax@{threshold}"),
            ThresholdPolicy::Absolute { threshold } => format!("absolute@{threshold}"),
        }
    }
}

/// `K × H × W` boolean masks with the policy that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedMap {
    pub masks: Array3<bool>,
    pub class_indices: Vec<usize>,
    pub policy: ThresholdPolicy,
}

impl BinarizedMap {
    pub fn mask(&self, k: usize) -> ArrayView2<'_, bool> {
        self.masks.index_axis(Axis(0), k)
    }

    pub fn len(&self) -> usize {
        self.class_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_indices.is_empty()
    }
}

/// Binarizes one map. A constant map under min-max yields an empty mask.
pub fn binarize_map<T: Scalar>(map: ArrayView2<T>, policy: ThresholdPolicy) -> Array2<bool> {
    match policy {
        ThresholdPolicy::MinMax { threshold } => {
            let lo = map.fold(T::infinity(), |m, &v| m.min(v));
            let hi = map.fold(T::neg_infinity(), |m, &v| m.max(v));
            let range = hi - lo;
            if !(range > T::zero()) {
                log::warn!("constant heatmap; min-max normalization is degenerate, mask left empty");
                return Array2::from_elem(map.raw_dim(), false);
            }
            let thr = T::of(threshold);
            map.mapv(|v| (v - lo) / range >= thr)
        }
        ThresholdPolicy::Absolute { threshold } => {
            let thr = T::of(threshold);
            map.mapv(|v| v >= thr)
        }
    }
}

pub fn binarize<T: Scalar>(h: &Heatmap<T>, policy: ThresholdPolicy) -> BinarizedMap {
    let (k, hh, ww) = h.maps.dim();
    let mut masks = Array3::from_elem((k, hh, ww), false);
    for i in 0..k {
        masks
            .index_axis_mut(Axis(0), i)
            .assign(&binarize_map(h.map(i), policy));
    }
    BinarizedMap { masks, class_indices: h.class_indices.clone(), policy }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_grid_upsamples_to_constant() {
        let g = Array2::from_elem((7, 7), 0.3f64);
        let up = bilinear_upsample(g.view(), 224, 224);
        assert!(up.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn two_by_two_golden_values() {
        let g = array![[1.0f64, 0.0], [0.0, 1.0]];
        let up = bilinear_upsample(g.view(), 4, 4);
        // per-axis weights on the first input index: 1, 0.75, 0.25, 0
        let w = [1.0, 0.75, 0.25, 0.0];
        for y in 0..4 {
            for x in 0..4 {
                let expected = w[y] * w[x] + (1.0 - w[y]) * (1.0 - w[x]);
                assert_eq!(up[[y, x]], expected, "({y},{x})");
            }
        }
    }

    #[test]
    fn bimodal_map_splits_on_high_region() {
        let mut m = Array2::from_elem((4, 4), 0.2f64);
        m.slice_mut(s![0..2, 0..2]).fill(0.9);
        let mask = binarize_map(m.view(), ThresholdPolicy::default());
        assert_eq!(mask.iter().filter(|&&b| b).count(), 4);
        assert!(mask[[0, 0]] && mask[[1, 1]] && !mask[[2, 2]]);
    }

    #[test]
    fn constant_map_gives_empty_mask() {
        let m = Array2::from_elem((3, 3), 0.7f64);
        assert!(binarize_map(m.view(), ThresholdPolicy::default()).iter().all(|&b| !b));
    }

    #[test]
    fn policy_ids() {
        assert_eq!(ThresholdPolicy::default().id(), "minmax@0.5");
        assert_eq!(ThresholdPolicy::Absolute { threshold: 0.25 }.id(), "absolute@0.25");
    }
}
