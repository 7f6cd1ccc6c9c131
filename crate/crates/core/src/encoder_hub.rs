//! Frozen tri-modal encoders that emit patch tokens instead of pooled vectors.
//!
//! The encoders here are linear patch projectors: the input is average-pooled
//! onto a fine grid, each output cell gathers its `sub_rows × sub_cols × C`
//! fine values into a feature vector, and a fixed weight matrix maps that
//! feature to a `D`-dim token. This is the "last spatial stage without the
//! final pooling" shape of a convolutional backbone, reduced to one layer.
//!
//! Visual encoders use a fixed stride, so the grid grows with the frame
//! (224×224 → 7×7, 448×224 → 7×14). Audio encoders pool adaptively onto a
//! fixed time-frequency grid (10×6 by default), so any spectrogram length
//! is accepted.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::text_guidance::PromptContext;
use crate::{io, Result, Scalar, TvslError};

/// Context limit of the text encoder, in tokens (CLIP's limit).
pub const TEXT_CONTEXT_LIMIT: usize = 77;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `n × D` tokens laid out row-major on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchTokenSet<T> {
    tokens: Array2<T>,
    grid: Grid,
    modality: Modality,
}

impl<T: Scalar> PatchTokenSet<T> {
    pub fn new(tokens: Array2<T>, grid: Grid, modality: Modality) -> Result<Self> {
        if tokens.nrows() != grid.len() || grid.is_empty() {
            return Err(TvslError::Shape(format!(
                "{} tokens do not fill a {}x{} grid",
                tokens.nrows(),
                grid.rows,
                grid.cols
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(TvslError::Input("non-finite token value".into()));
        }
        Ok(Self { tokens, grid, modality })
    }

    pub fn tokens(&self) -> &Array2<T> {
        &self.tokens
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// Replaces the token values, keeping layout metadata.
    pub fn with_tokens(&self, tokens: Array2<T>) -> Self {
        assert_eq!(tokens.dim(), self.tokens.dim());
        Self { tokens, grid: self.grid, modality: self.modality }
    }
}

/// Log-power spectrogram, frequency bins × time frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioInput<T> {
    spectrogram: Array2<T>,
}

impl<T: Scalar> AudioInput<T> {
    pub fn new(spectrogram: Array2<T>) -> Result<Self> {
        let (m, f) = spectrogram.dim();
        if m == 0 || f == 0 {
            return Err(TvslError::Input("empty spectrogram".into()));
        }
        if spectrogram.iter().any(|v| !v.is_finite()) {
            return Err(TvslError::Input("non-finite spectrogram entry".into()));
        }
        Ok(Self { spectrogram })
    }

    /// All-zero (silent) spectrogram.
    pub fn silence(bins: usize, frames: usize) -> Self {
        Self { spectrogram: Array2::zeros((bins, frames)) }
    }

    pub fn spectrogram(&self) -> &Array2<T> {
        &self.spectrogram
    }

    pub fn into_inner(self) -> Array2<T> {
        self.spectrogram
    }
}

/// `C × H × W` frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput<T> {
    pixels: Array3<T>,
}

impl<T: Scalar> ImageInput<T> {
    pub fn new(pixels: Array3<T>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 1 && c != 3 {
            return Err(TvslError::Input(format!("images need 1 or 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(TvslError::Input("empty image".into()));
        }
        if pixels.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(TvslError::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array3<T> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn into_inner(self) -> Array3<T> {
        self.pixels
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextInput {
    text: String,
}

impl TextInput {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(TvslError::Input("empty text".into()));
        }
        let t = Self { text };
        if t.token_length() > TEXT_CONTEXT_LIMIT {
            return Err(TvslError::Input(format!(
                "text has {} tokens, limit is {TEXT_CONTEXT_LIMIT}",
                t.token_length()
            )));
        }
        Ok(t)
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Whitespace tokenization.
    pub fn token_length(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

/// How an encoder lays its output grid over the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridRule {
    /// One token per `cell_rows × cell_cols` block; input must divide evenly.
    Stride { cell_rows: usize, cell_cols: usize },
    /// Adaptive pooling onto a fixed grid.
    Fixed(Grid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEncoderConfig {
    pub modality: Modality,
    pub channels: usize,
    pub grid: GridRule,
    pub sub_rows: usize,
    pub sub_cols: usize,
    /// Required input height (frequency bins for audio), if fixed.
    pub input_rows: Option<usize>,
    /// Subtracted from every pooled value before projection.
    pub offset: f64,
}

impl PatchEncoderConfig {
    pub fn feature_len(&self) -> usize {
        self.channels * self.sub_rows * self.sub_cols
    }

    /// Default visual layout: stride 32, 4×4 sub-pooling of RGB (48 features).
    pub fn visual_default() -> Self {
        Self {
            modality: Modality::Visual,
            channels: 3,
            grid: GridRule::Stride { cell_rows: 32, cell_cols: 32 },
            sub_rows: 4,
            sub_cols: 4,
            input_rows: None,
            offset: 0.5,
        }
    }

    /// Default audio layout: 80 bins pooled onto a 10×6 grid, 8×2 sub-pooling.
    pub fn audio_default() -> Self {
        Self {
            modality: Modality::Audio,
            channels: 1,
            grid: GridRule::Fixed(Grid::new(10, 6)),
            sub_rows: 8,
            sub_cols: 2,
            input_rows: Some(80),
            offset: 0.0,
        }
    }
}

/// Start/end (exclusive) of adaptive-pooling bin `i` of `bins` over `len`.
pub fn adaptive_bin(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

/// Frozen linear patch encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPatchEncoder<T> {
    config: PatchEncoderConfig,
    /// `D × feature_len`.
    weight: Array2<T>,
}

impl<T: Scalar> LinearPatchEncoder<T> {
    pub fn new(config: PatchEncoderConfig, weight: Array2<T>) -> Result<Self> {
        if weight.ncols() != config.feature_len() {
            return Err(TvslError::Config(format!(
                "encoder weight has {} input columns, layout needs {}",
                weight.ncols(),
                config.feature_len()
            )));
        }
        if let GridRule::Stride { cell_rows, cell_cols } = config.grid {
            if cell_rows % config.sub_rows != 0 || cell_cols % config.sub_cols != 0 {
                return Err(TvslError::Config("sub-pooling must divide the stride".into()));
            }
        }
        Ok(Self { config, weight })
    }

    pub fn zeros(config: PatchEncoderConfig, dim: usize) -> Self {
        let f = config.feature_len();
        Self { config, weight: Array2::zeros((dim, f)) }
    }

    /// Adapter for exported backbone weights: a raw float file of shape
    /// `1 × D × feature_len` (see [`crate::io`]).
    pub fn load_weights(config: PatchEncoderConfig, path: impl AsRef<Path>) -> Result<Self> {
        let raw = io::read_raw::<T>(path)?;
        if raw.dim().0 != 1 {
            return Err(TvslError::Format("encoder weights must have K = 1".into()));
        }
        Self::new(config, raw.index_axis_move(Axis(0), 0))
    }

    pub fn config(&self) -> &PatchEncoderConfig {
        &self.config
    }

    pub fn weight(&self) -> &Array2<T> {
        &self.weight
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn grid_for(&self, rows: usize, cols: usize) -> Result<Grid> {
        if let Some(expected) = self.config.input_rows {
            if rows != expected {
                return Err(TvslError::Config(format!(
                    "encoder expects {expected} input rows, got {rows}"
                )));
            }
        }
        match self.config.grid {
            GridRule::Stride { cell_rows, cell_cols } => {
                if rows % cell_rows != 0 || cols % cell_cols != 0 {
                    return Err(TvslError::Config(format!(
                        "{rows}x{cols} input is not divisible by stride {cell_rows}x{cell_cols}"
                    )));
                }
                Ok(Grid::new(rows / cell_rows, cols / cell_cols))
            }
            GridRule::Fixed(grid) => {
                let fine_r = grid.rows * self.config.sub_rows;
                let fine_c = grid.cols * self.config.sub_cols;
                if rows < fine_r || cols < fine_c {
                    return Err(TvslError::Config(format!(
                        "{rows}x{cols} input is smaller than the {fine_r}x{fine_c} pooling grid"
                    )));
                }
                Ok(grid)
            }
        }
    }

    /// Pooled feature vectors, one row per grid cell, offset already removed.
    pub fn features(&self, input: ArrayView3<T>) -> Result<(Array2<T>, Grid)> {
        let (c, h, w) = input.dim();
        if c != self.config.channels {
            return Err(TvslError::Config(format!(
                "encoder expects {} channels, got {c}",
                self.config.channels
            )));
        }
        let grid = self.grid_for(h, w)?;
        let (sr, sc) = (self.config.sub_rows, self.config.sub_cols);
        let (fine_r, fine_c) = (grid.rows * sr, grid.cols * sc);
        let offset = T::of(self.config.offset);
        let mut pooled = Array3::<T>::zeros((c, fine_r, fine_c));
        for i in 0..fine_r {
            let (y0, y1) = adaptive_bin(i, fine_r, h);
            for j in 0..fine_c {
                let (x0, x1) = adaptive_bin(j, fine_c, w);
                let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                for ch in 0..c {
                    let block = input.slice(s![ch, y0..y1, x0..x1]);
                    pooled[[ch, i, j]] = block.sum() / count - offset;
                }
            }
        }
        let f = self.config.feature_len();
        let mut feats = Array2::zeros((grid.len(), f));
        for r in 0..grid.rows {
            for q in 0..grid.cols {
                let mut row = feats.row_mut(r * grid.cols + q);
                let mut idx = 0;
                for ch in 0..c {
                    for a in 0..sr {
                        for b in 0..sc {
                            row[idx] = pooled[[ch, r * sr + a, q * sc + b]];
                            idx += 1;
                        }
                    }
                }
            }
        }
        Ok((feats, grid))
    }

    pub fn encode(&self, input: ArrayView3<T>) -> Result<PatchTokenSet<T>> {
        let (feats, grid) = self.features(input)?;
        let tokens = feats.dot(&self.weight.t());
        PatchTokenSet::new(tokens, grid, self.config.modality)
    }

    fn hash_into(&self, hasher: &mut Sha256) {
        hasher.update(serde_json::to_vec(&self.config).unwrap());
        for &v in self.weight.iter() {
            hasher.update(v.hash_bytes());
        }
    }
}

/// Text encoder backed by a lookup table of grounded class embeddings.
///
/// Known strings return their table entry; unknown strings fall back to a
/// unit vector seeded by a hash of the string, so free text still encodes
/// deterministically. A prompt context adds the mean of its rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTextEncoder<T> {
    dim: usize,
    seed: u64,
    table: BTreeMap<String, Array1<T>>,
}

impl<T: Scalar> SyntheticTextEncoder<T> {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed, table: BTreeMap::new() }
    }

    pub fn with_entry(mut self, text: impl Into<String>, embedding: Array1<T>) -> Self {
        assert_eq!(embedding.len(), self.dim);
        self.table.insert(text.into(), embedding);
        self
    }

    pub fn insert(&mut self, text: impl Into<String>, embedding: Array1<T>) {
        assert_eq!(embedding.len(), self.dim);
        self.table.insert(text.into(), embedding);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knows(&self, text: &str) -> bool {
        self.table.contains_key(text)
    }

    /// Embedding of the text alone.
    pub fn base_embedding(&self, text: &TextInput) -> Array1<T> {
        if let Some(e) = self.table.get(text.as_str()) {
            return e.clone();
        }
        hashed_unit_vector(self.seed, text.as_str(), self.dim)
    }

    pub fn encode(
        &self,
        text: &TextInput,
        prompt: Option<&PromptContext<T>>,
        zero_shot: bool,
    ) -> Result<Array1<T>> {
        let mut e = self.base_embedding(text);
        if let Some(p) = prompt.filter(|p| p.len() > 0) {
            if zero_shot {
                return Err(TvslError::PromptInZeroShot);
            }
            if p.width() != self.dim {
                return Err(TvslError::Shape(format!(
                    "prompt width {} does not match text dim {}",
                    p.width(),
                    self.dim
                )));
            }
            if text.token_length() + p.len() > TEXT_CONTEXT_LIMIT {
                return Err(TvslError::Input("prompt plus text exceed the context limit".into()));
            }
            e += &p.mean_token();
        }
        Ok(e)
    }

    fn hash_into(&self, hasher: &mut Sha256) {
        hasher.update(self.seed.to_le_bytes());
        for (k, v) in &self.table {
            hasher.update(k.as_bytes());
            for &x in v.iter() {
                hasher.update(x.hash_bytes());
            }
        }
    }
}

/// Deterministic unit vector derived from `(seed, text)`.
pub fn hashed_unit_vector<T: Scalar>(seed: u64, text: &str, dim: usize) -> Array1<T> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.dot(&v).sqrt();
    v.mapv(|x| T::of(x / n))
}

/// The frozen encoder trio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderHub<T> {
    pub audio: LinearPatchEncoder<T>,
    pub visual: LinearPatchEncoder<T>,
    pub text: SyntheticTextEncoder<T>,
}

impl<T: Scalar> EncoderHub<T> {
    pub fn new(
        audio: LinearPatchEncoder<T>,
        visual: LinearPatchEncoder<T>,
        text: SyntheticTextEncoder<T>,
    ) -> Result<Self> {
        if audio.config().modality != Modality::Audio || visual.config().modality != Modality::Visual {
            return Err(TvslError::Config("encoder modalities are swapped".into()));
        }
        if audio.dim() != visual.dim() || visual.dim() != text.dim() {
            return Err(TvslError::Config("encoders disagree on the embedding dim".into()));
        }
        Ok(Self { audio, visual, text })
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn encode_audio_tokens(&self, a: &AudioInput<T>) -> Result<PatchTokenSet<T>> {
        let view = a.spectrogram().view().insert_axis(Axis(0));
        self.audio.encode(view)
    }

    pub fn encode_image_tokens(&self, v: &ImageInput<T>) -> Result<PatchTokenSet<T>> {
        self.visual.encode(v.pixels().view())
    }

    pub fn encode_text(
        &self,
        t: &TextInput,
        prompt: Option<&PromptContext<T>>,
        zero_shot: bool,
    ) -> Result<Array1<T>> {
        self.text.encode(t, prompt, zero_shot)
    }

    /// SHA-256 over every frozen parameter, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        self.audio.hash_into(&mut hasher);
        self.visual.hash_into(&mut hasher);
        self.text.hash_into(&mut hasher);
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn pooling_encoder() -> LinearPatchEncoder<f64> {
        let config = PatchEncoderConfig {
            modality: Modality::Audio,
            channels: 1,
            grid: GridRule::Fixed(Grid::new(2, 2)),
            sub_rows: 1,
            sub_cols: 1,
            input_rows: None,
            offset: 0.0,
        };
        LinearPatchEncoder::new(config, Array2::eye(1)).unwrap()
    }

    #[test]
    fn identity_pooling_encoder_returns_block_means() {
        let spec = array![
            [1.0, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [9.0, 10.0, 11.0, 12.0],
            [13.0, 14.0, 15.0, 16.0]
        ];
        let enc = pooling_encoder();
        let out = enc.encode(spec.view().insert_axis(Axis(0))).unwrap();
        assert_eq!(out.grid(), Grid::new(2, 2));
        // hand-computed 2x2 block means
        let expected = [3.5, 5.5, 11.5, 13.5];
        for (j, e) in expected.iter().enumerate() {
            assert_eq!(out.tokens()[[j, 0]], *e);
        }
    }

    #[test]
    fn zero_weights_give_zero_tokens() {
        let enc = LinearPatchEncoder::<f64>::zeros(PatchEncoderConfig::audio_default(), 16);
        let spec = Array2::from_elem((80, 224), 0.0);
        let out = enc.encode(spec.view().insert_axis(Axis(0))).unwrap();
        assert_eq!(out.len(), 60);
        assert!(out.tokens().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_audio_grid_is_ten_by_six() {
        let enc = LinearPatchEncoder::<f64>::zeros(PatchEncoderConfig::audio_default(), 8);
        let spec = Array2::from_elem((80, 224), 1.0);
        let out = enc.encode(spec.view().insert_axis(Axis(0))).unwrap();
        assert_eq!(out.grid(), Grid::new(10, 6));
        assert_eq!(out.tokens().dim(), (60, 8));
    }

    #[test]
    fn visual_grid_follows_stride() {
        let enc = LinearPatchEncoder::<f64>::zeros(PatchEncoderConfig::visual_default(), 4);
        assert_eq!(enc.grid_for(224, 224).unwrap(), Grid::new(7, 7));
        assert_eq!(enc.grid_for(224, 448).unwrap(), Grid::new(7, 14));
        assert_eq!(enc.grid_for(224, 896).unwrap(), Grid::new(7, 28));
        assert!(matches!(enc.grid_for(224, 230), Err(TvslError::Config(_))));
    }

    #[test]
    fn wrong_bin_count_is_a_config_error() {
        let enc = LinearPatchEncoder::<f64>::zeros(PatchEncoderConfig::audio_default(), 8);
        let spec = Array2::from_elem((64, 224), 1.0);
        let err = enc.encode(spec.view().insert_axis(Axis(0))).unwrap_err();
        assert!(matches!(err, TvslError::Config(_)));
    }

    #[test]
    fn adaptive_bins_cover_input() {
        let mut covered = vec![false; 224];
        for i in 0..12 {
            let (a, b) = adaptive_bin(i, 12, 224);
            assert!(b > a);
            for c in covered.iter_mut().take(b).skip(a) {
                *c = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn image_validation() {
        assert!(ImageInput::new(Array3::<f64>::zeros((2, 4, 4))).is_err());
        assert!(ImageInput::new(Array3::<f64>::from_elem((3, 4, 4), 1.5)).is_err());
        assert!(ImageInput::new(Array3::<f64>::from_elem((1, 4, 4), 0.25)).is_ok());
    }

    #[test]
    fn text_validation() {
        assert!(TextInput::new("  ").is_err());
        assert_eq!(TextInput::new("dog barking").unwrap().token_length(), 2);
        let long = vec!["w"; 80].join(" ");
        assert!(TextInput::new(long).is_err());
    }

    #[test]
    fn hashed_text_is_repeatable_and_distinct() {
        let enc = SyntheticTextEncoder::<f64>::new(32, 3);
        let dog = TextInput::new("dog barking").unwrap();
        let cat = TextInput::new("cat meowing").unwrap();
        let a = enc.encode(&dog, None, false).unwrap();
        let b = enc.encode(&dog, None, false).unwrap();
        assert_eq!(a, b);
        let c = enc.encode(&cat, None, false).unwrap();
        let cos = crate::ops::cosine(a.view(), c.view());
        assert!(cos < 0.99, "cos = {cos}");
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let a = LinearPatchEncoder::<f64>::zeros(PatchEncoderConfig::audio_default(), 4);
        let v = LinearPatchEncoder::<f64>::zeros(PatchEncoderConfig::visual_default(), 4);
        let t = SyntheticTextEncoder::new(4, 0);
        let hub = EncoderHub::new(a, v.clone(), t.clone()).unwrap();
        let mut other = hub.clone();
        other.audio.weight[[0, 0]] = 1e-12;
        assert_ne!(hub.fingerprint(), other.fingerprint());
        assert_eq!(hub.fingerprint(), hub.clone().fingerprint());
    }
}
