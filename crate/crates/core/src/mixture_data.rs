//! Samples, mixtures, manifests and the synthetic tri-modal world.
//!
//! Multi-source samples are built from solos: frames are concatenated
//! side by side and spectrograms are summed in linear power
//! (`log1p(Σ expm1(s_i))`), so a silent (all-zero) spectrogram is the
//! identity of mixing.
//!
//! The synthetic world gives every class a unit prototype in `D` dims plus
//! a visual texture code and an audio spectral code. Its encoders are
//! linear patch encoders built so that a clean blob cell, or a clean active
//! audio cell, encodes to the class prototype; the text encoder maps each
//! class name to the same prototype.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder_hub::{
    adaptive_bin, AudioInput, EncoderHub, GridRule, ImageInput, LinearPatchEncoder,
    PatchEncoderConfig, PatchTokenSet, SyntheticTextEncoder,
};
use crate::metrics_eval::GroundTruthRegion;
use crate::seeding::rng_for;
use crate::text_guidance::ClassVocabulary;
use crate::{io, Result, Scalar, TvslError};

/// One (possibly mixed) training or evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample<T> {
    pub id: String,
    pub frame: ImageInput<T>,
    pub audio: AudioInput<T>,
    /// Multi-hot class labels over the vocabulary.
    pub labels: Vec<bool>,
    /// Ground-truth region per positive class, in frame pixels.
    pub regions: BTreeMap<usize, GroundTruthRegion>,
}

impl<T: Scalar> MixtureSample<T> {
    pub fn source_count(&self) -> usize {
        self.labels.iter().filter(|&&y| y).count()
    }

    pub fn classes(&self) -> Vec<usize> {
        positives(&self.labels)
    }

    /// Frame size as `(height, width)`.
    pub fn frame_size(&self) -> (usize, usize) {
        (self.frame.height(), self.frame.width())
    }
}

fn positives(labels: &[bool]) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, &y)| y).map(|(i, _)| i).collect()
}

/// Two solos side by side; the second one's regions move right by the
/// first frame's width.
pub fn synthesize_duet<T: Scalar>(
    s1: &MixtureSample<T>,
    s2: &MixtureSample<T>,
) -> Result<MixtureSample<T>> {
    mix_k_sources(&[s1, s2])
}

/// K-way horizontal frame concatenation with power-domain audio mixing.
pub fn mix_k_sources<T: Scalar>(samples: &[&MixtureSample<T>]) -> Result<MixtureSample<T>> {
    if samples.len() < 2 {
        return Err(TvslError::Mixture(format!("need at least 2 samples, got {}", samples.len())));
    }
    let first = samples[0];
    let n = first.labels.len();
    let h = first.frame.height();
    let spec_dim = first.audio.spectrogram().dim();
    let mut seen = BTreeSet::new();
    for s in samples {
        if s.labels.len() != n {
            return Err(TvslError::Mixture("samples use different vocabularies".into()));
        }
        if s.frame.height() != h {
            return Err(TvslError::Mixture("frames differ in height".into()));
        }
        if s.audio.spectrogram().dim() != spec_dim {
            return Err(TvslError::Mixture("spectrograms differ in shape".into()));
        }
        if s.frame.pixels().dim().0 != first.frame.pixels().dim().0 {
            return Err(TvslError::Mixture("frames differ in channel count".into()));
        }
        for c in s.classes() {
            if !seen.insert(c) {
                return Err(TvslError::Mixture(format!("class {c} appears in more than one source")));
            }
        }
    }

    let views: Vec<_> = samples.iter().map(|s| s.frame.pixels().view()).collect();
    let pixels = concatenate(Axis(2), &views).expect("checked shapes");
    let width = pixels.dim().2;

    let mut power = Array2::<f64>::zeros(spec_dim);
    for s in samples {
        power.zip_mut_with(s.audio.spectrogram(), |p, &v| *p += v.as_f64().exp_m1());
    }
    let spectrogram = power.mapv(|p| T::of(p.ln_1p()));

    let mut labels = vec![false; n];
    let mut regions = BTreeMap::new();
    let mut offset = 0;
    for s in samples {
        for c in s.classes() {
            labels[c] = true;
        }
        for (&c, r) in &s.regions {
            regions.insert(c, r.offset_x(offset, width));
        }
        offset += s.frame.width();
    }
    let id = samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join("+");
    Ok(MixtureSample {
        id,
        frame: ImageInput::new(pixels)?,
        audio: AudioInput::new(spectrogram)?,
        labels,
        regions,
    })
}

/// Frozen raw tokens of one sample, kept instead of pixels during training.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample<T> {
    pub id: String,
    pub audio: PatchTokenSet<T>,
    pub visual: PatchTokenSet<T>,
    pub labels: Vec<bool>,
    pub regions: BTreeMap<usize, GroundTruthRegion>,
    /// `(height, width)` of the frame the regions refer to.
    pub frame_size: (usize, usize),
}

impl<T: Scalar> EncodedSample<T> {
    pub fn classes(&self) -> Vec<usize> {
        positives(&self.labels)
    }

    /// Re-indexes labels and regions onto the sub-vocabulary `subset`
    /// (indices into the current vocabulary). Fails if a positive class is
    /// outside the subset.
    pub fn restrict(&self, subset: &[usize]) -> Result<Self> {
        let mut labels = vec![false; subset.len()];
        let mut regions = BTreeMap::new();
        for c in self.classes() {
            let j = subset.iter().position(|&s| s == c).ok_or_else(|| {
                TvslError::Input(format!("sample {} has class {c} outside the subset", self.id))
            })?;
            labels[j] = true;
            if let Some(r) = self.regions.get(&c) {
                regions.insert(j, r.clone());
            }
        }
        Ok(Self { labels, regions, ..self.clone() })
    }
}

pub fn encode_sample<T: Scalar>(hub: &EncoderHub<T>, sample: &MixtureSample<T>) -> Result<EncodedSample<T>> {
    Ok(EncodedSample {
        id: sample.id.clone(),
        audio: hub.encode_audio_tokens(&sample.audio)?,
        visual: hub.encode_image_tokens(&sample.frame)?,
        labels: sample.labels.clone(),
        regions: sample.regions.clone(),
        frame_size: sample.frame_size(),
    })
}

// ---------------------------------------------------------------------------
// Manifests

/// Box annotation of one class in a manifest record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub class: String,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// PNG path, relative to the data root.
    pub frame: String,
    /// Raw float spectrogram path, relative to the data root.
    pub audio: String,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regions: Vec<RegionRecord>,
    pub split: String,
}

/// Seen/unseen class partition for zero-shot evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroShotSplit {
    pub seed: u64,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub vocabulary: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<SyntheticWorldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_shot: Option<ZeroShotSplit>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ManifestHeader,
}

/// Newline-delimited JSON: an optional `{"header": …}` line, then one
/// [`ManifestRecord`] per line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub header: Option<ManifestHeader>,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut manifest = DatasetManifest::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if n == 0 && line.starts_with("{\"header\"") {
                let h: HeaderLine = serde_json::from_str(line)?;
                manifest.header = Some(h.header);
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| TvslError::Format(format!("manifest line {}: {e}", n + 1)))?;
            manifest.records.push(rec);
        }
        manifest.check_split_hygiene()?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        if let Some(h) = &self.header {
            out.push_str(&serde_json::to_string(&HeaderLine { header: h.clone() })?);
            out.push('\n');
        }
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn split(&self, name: &str) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == name).collect()
    }

    /// Sample ids are unique, so no id can sit in two splits.
    pub fn check_split_hygiene(&self) -> Result<()> {
        let mut ids: BTreeMap<&str, &str> = BTreeMap::new();
        for r in &self.records {
            if let Some(prev) = ids.insert(&r.id, &r.split) {
                return Err(TvslError::Format(format!(
                    "sample id {} appears in splits {prev} and {}",
                    r.id, r.split
                )));
            }
        }
        Ok(())
    }

    /// Fails if any id of `self` is also in `other`.
    pub fn check_disjoint(&self, other: &DatasetManifest) -> Result<()> {
        let ids: BTreeSet<&str> = self.records.iter().map(|r| r.id.as_str()).collect();
        if let Some(r) = other.records.iter().find(|r| ids.contains(r.id.as_str())) {
            return Err(TvslError::Format(format!("sample id {} is in both manifests", r.id)));
        }
        Ok(())
    }

    pub fn validate(&self, vocab: &ClassVocabulary) -> Result<()> {
        for r in &self.records {
            for c in r.classes.iter().chain(r.regions.iter().map(|g| &g.class)) {
                vocab.resolve(c)?;
            }
        }
        Ok(())
    }

    /// Reads the frame and spectrogram of `record` below `root`.
    pub fn load_sample<T: Scalar>(
        record: &ManifestRecord,
        root: &Path,
        vocab: &ClassVocabulary,
    ) -> Result<MixtureSample<T>> {
        let frame = ImageInput::new(io::read_image_png(root.join(&record.frame))?)?;
        let raw = io::read_raw::<T>(root.join(&record.audio))?;
        if raw.dim().0 != 1 {
            return Err(TvslError::Format(format!("{}: audio file must hold one spectrogram", record.audio)));
        }
        let audio = AudioInput::new(raw.index_axis_move(Axis(0), 0))?;
        let mut labels = vec![false; vocab.len()];
        for c in &record.classes {
            labels[vocab.resolve(c)?] = true;
        }
        let mut regions = BTreeMap::new();
        for g in &record.regions {
            let c = vocab.resolve(&g.class)?;
            let region = GroundTruthRegion::bbox(g.x0, g.y0, g.x1, g.y1);
            region.validate(frame.height(), frame.width())?;
            regions.insert(c, region);
        }
        Ok(MixtureSample { id: record.id.clone(), frame, audio, labels, regions })
    }
}

/// Writes `frames/<id>.png` and `audio/<id>.f32` under `root` and returns
/// the manifest record.
pub fn write_sample<T: Scalar>(
    sample: &MixtureSample<T>,
    root: &Path,
    split: &str,
    vocab: &ClassVocabulary,
) -> Result<ManifestRecord> {
    let frame_rel = format!("frames/{}.png", sample.id);
    let audio_rel = format!("audio/{}.f32", sample.id);
    fs::create_dir_all(root.join("frames"))?;
    fs::create_dir_all(root.join("audio"))?;
    io::write_image_png(root.join(&frame_rel), sample.frame.pixels().view())?;
    let spec = sample.audio.spectrogram().view().insert_axis(Axis(0));
    io::write_raw(root.join(&audio_rel), spec)?;
    let regions = sample
        .regions
        .iter()
        .map(|(&c, r)| match r {
            GroundTruthRegion::Box { x0, y0, x1, y1 } => Ok(RegionRecord {
                class: vocab.name(c).to_string(),
                x0: *x0,
                y0: *y0,
                x1: *x1,
                y1: *y1,
            }),
            GroundTruthRegion::Mask(_) => Err(TvslError::Format("only box regions can be written".into())),
        })
        .collect::<Result<_>>()?;
    Ok(ManifestRecord {
        id: sample.id.clone(),
        frame: frame_rel,
        audio: audio_rel,
        classes: sample.classes().iter().map(|&c| vocab.name(c).to_string()).collect(),
        regions,
        split: split.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Synthetic world

const CLASS_NAMES: [&str; 16] = [
    "accordion", "acoustic guitar", "bagpipe", "cello", "clarinet", "drum", "erhu", "flute",
    "piano", "saxophone", "trumpet", "tuba", "violin", "xylophone", "harp", "banjo",
];

/// Visual stride and texture cell of the synthetic frames, in pixels.
const VISUAL_STRIDE: usize = 32;
const TEXTURE_CELL: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorldSpec {
    pub classes: usize,
    pub dim: usize,
    pub train: usize,
    pub test: usize,
    /// Sources per training sample (1 = solos).
    pub train_sources: usize,
    /// Sources per test sample.
    pub test_sources: usize,
    /// Side of a solo frame in pixels; a multiple of 32.
    pub frame_size: usize,
    /// Spectrogram length; a multiple of 12 so time pooling cells do not overlap.
    pub audio_frames: usize,
    /// Blob box side range in pixels, inclusive.
    pub box_min: usize,
    pub box_max: usize,
    /// Texture amplitude around the 0.5 gray background.
    pub visual_amplitude: f64,
    pub visual_noise: f64,
    pub audio_amplitude: f64,
    pub audio_noise: f64,
    /// Range of active audio time columns per solo, inclusive.
    pub min_active: usize,
    pub max_active: usize,
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            dim: 64,
            train: 500,
            test: 100,
            train_sources: 2,
            test_sources: 2,
            frame_size: 224,
            audio_frames: 192,
            box_min: 80,
            box_max: 112,
            visual_amplitude: 0.35,
            visual_noise: 0.1,
            audio_amplitude: 0.5,
            audio_noise: 0.05,
            min_active: 2,
            max_active: 4,
            seed: 7,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TvslError::Config(m.to_string()));
        let audio = PatchEncoderConfig::audio_default();
        if self.classes < 2 {
            return bad("the world needs at least 2 classes");
        }
        if self.classes >= audio.feature_len() {
            return bad("too many classes for the audio code space");
        }
        if self.dim < 2 {
            return bad("embedding dim must be at least 2");
        }
        if self.frame_size == 0 || self.frame_size % VISUAL_STRIDE != 0 {
            return bad("frame size must be a positive multiple of 32");
        }
        if self.box_min == 0 || self.box_min > self.box_max || self.box_max > self.frame_size / 2 {
            return bad("box sizes must satisfy 0 < min <= max <= frame_size / 2");
        }
        let cols = match audio.grid {
            GridRule::Fixed(g) => g.cols,
            GridRule::Stride { .. } => unreachable!(),
        };
        if self.audio_frames == 0 || self.audio_frames % (cols * audio.sub_cols) != 0 {
            return bad("audio frames must be a positive multiple of the 12 fine audio columns");
        }
        if self.min_active == 0 || self.min_active > self.max_active || self.max_active > cols {
            return bad("active audio columns must satisfy 0 < min <= max <= 6");
        }
        if self.train_sources == 0 || self.test_sources == 0 {
            return bad("samples need at least one source");
        }
        if self.train_sources > self.classes || self.test_sources > self.classes {
            return bad("more sources per sample than classes");
        }
        if !(self.visual_amplitude > 0.0 && self.visual_amplitude < 0.5) {
            return bad("visual amplitude must lie in (0, 0.5)");
        }
        if !(self.audio_amplitude > 0.0) || self.visual_noise < 0.0 || self.audio_noise < 0.0 {
            return bad("amplitudes must be positive and noise non-negative");
        }
        Ok(())
    }
}

/// How one solo is rendered; everything else follows from the world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoloRecord {
    pub id: String,
    pub class_index: usize,
    /// Blob box `(x0, y0, x1, y1)`.
    pub bbox: (usize, usize, usize, usize),
    /// Which audio time columns the class sounds in.
    pub active: Vec<bool>,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub id: String,
    pub sources: Vec<SoloRecord>,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: SyntheticWorldSpec,
    pub vocab: ClassVocabulary,
    /// `N × D` unit prototypes.
    pub prototypes: Array2<f64>,
    /// `N × 48` visual texture codes (orthonormal, zero-mean).
    pub visual_codes: Array2<f64>,
    /// `N × 16` audio spectral codes (orthonormal, zero-mean).
    pub audio_codes: Array2<f64>,
    visual_weight: Array2<f64>,
    audio_weight: Array2<f64>,
}

fn class_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match CLASS_NAMES.get(i) {
            Some(name) => name.to_string(),
            None => format!("class {i}"),
        })
        .collect()
}

fn unit_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.dot(&v).sqrt();
    v / n
}

/// Unit prototypes with pairwise `|cos| < max_cos`, by rejection.
fn sample_prototypes(n: usize, dim: usize, max_cos: f64, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let mut rows: Vec<Array1<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while rows.len() < n {
        attempts += 1;
        if attempts > 100_000 {
            return Err(TvslError::Config(format!(
                "could not place {n} prototypes in {dim} dims with |cos| < {max_cos}"
            )));
        }
        let v = unit_gaussian(dim, rng);
        if rows.iter().all(|r| r.dot(&v).abs() < max_cos) {
            rows.push(v);
        }
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).unwrap())
}

/// Gram–Schmidt basis of `R^f` starting from the normalized constant
/// vector; returns `(codes, complement)` with `codes` the next `n` vectors.
fn code_basis(n: usize, f: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let mut basis: Vec<Array1<f64>> = vec![Array1::from_elem(f, 1.0 / (f as f64).sqrt())];
    while basis.len() < f {
        let mut v: Array1<f64> = (0..f).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = v.dot(b);
                v.scaled_add(-p, b);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.push(v / norm);
        }
    }
    let views: Vec<_> = basis.iter().map(|r| r.view()).collect();
    let all = ndarray::stack(Axis(0), &views).unwrap();
    (
        all.slice(ndarray::s![1..=n, ..]).to_owned(),
        all.slice(ndarray::s![n + 1.., ..]).to_owned(),
    )
}

fn max_abs(v: ndarray::ArrayView1<f64>) -> f64 {
    v.fold(0.0, |m, &x| m.max(x.abs()))
}

/// `W = Σ_c (1/a_c) p_c q_cᵀ + Σ_r g_r u_rᵀ`: code `q_c` at amplitude `a_c`
/// maps to `p_c`, the constant vector maps to 0, and the complement maps
/// to random directions.
fn encoder_weight(
    prototypes: &Array2<f64>,
    codes: &Array2<f64>,
    amplitudes: &[f64],
    complement: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let (d, f) = (prototypes.ncols(), codes.ncols());
    let mut w = Array2::<f64>::zeros((d, f));
    for (c, &amp) in amplitudes.iter().enumerate() {
        let p = prototypes.row(c).insert_axis(Axis(1));
        let q = codes.row(c).insert_axis(Axis(0));
        w += &(p.dot(&q) / amp);
    }
    let g_std = 1.0 / (d as f64).sqrt();
    for u in complement.rows() {
        let g: Array1<f64> = (0..d).map(|_| { let z: f64 = StandardNormal.sample(rng); g_std * z }).collect();
        w += &g.insert_axis(Axis(1)).dot(&u.insert_axis(Axis(0)));
    }
    w
}

impl SyntheticWorld {
    pub fn new(spec: SyntheticWorldSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.classes;
        let vocab = ClassVocabulary::new(class_names(n))?;
        let prototypes = sample_prototypes(n, spec.dim, 0.5, &mut rng_for(spec.seed, "prototypes", 0))?;

        let visual_cfg = PatchEncoderConfig::visual_default();
        let audio_cfg = PatchEncoderConfig::audio_default();
        let mut rng = rng_for(spec.seed, "visual codes", 0);
        let (visual_codes, visual_comp) = code_basis(n, visual_cfg.feature_len(), &mut rng);
        let amps: Vec<f64> = visual_codes
            .rows()
            .into_iter()
            .map(|q| spec.visual_amplitude / max_abs(q))
            .collect();
        let visual_weight = encoder_weight(&prototypes, &visual_codes, &amps, &visual_comp, &mut rng);

        let mut rng = rng_for(spec.seed, "audio codes", 0);
        let (audio_codes, audio_comp) = code_basis(n, audio_cfg.feature_len(), &mut rng);
        let amps: Vec<f64> = audio_codes
            .rows()
            .into_iter()
            .map(|q| 0.9 * spec.audio_amplitude / max_abs(q))
            .collect();
        let audio_weight = encoder_weight(&prototypes, &audio_codes, &amps, &audio_comp, &mut rng);

        Ok(Self { spec, vocab, prototypes, visual_codes, audio_codes, visual_weight, audio_weight })
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// The frozen encoders of this world at scalar type `T`.
    pub fn encoders<T: Scalar>(&self) -> Result<EncoderHub<T>> {
        let cast = |a: &Array2<f64>| a.mapv(T::of);
        let audio = LinearPatchEncoder::new(PatchEncoderConfig::audio_default(), cast(&self.audio_weight))?;
        let visual = LinearPatchEncoder::new(PatchEncoderConfig::visual_default(), cast(&self.visual_weight))?;
        let mut text = SyntheticTextEncoder::new(self.spec.dim, self.spec.seed);
        for (c, name) in self.vocab.names().iter().enumerate() {
            text.insert(name.clone(), self.prototypes.row(c).mapv(T::of));
        }
        EncoderHub::new(audio, visual, text)
    }

    /// Draws one solo layout of class `class_index`.
    pub fn draw_solo(&self, id: String, class_index: usize, rng: &mut ChaCha8Rng) -> SoloRecord {
        let s = &self.spec;
        let half = s.frame_size / 2;
        let bw = rng.gen_range(s.box_min..=s.box_max);
        let bh = rng.gen_range(s.box_min..=s.box_max);
        let (qx, qy) = (rng.gen_range(0..2usize), rng.gen_range(0..2usize));
        let x0 = qx * half + rng.gen_range(0..=half - bw);
        let y0 = qy * half + rng.gen_range(0..=half - bh);
        let cols = self.audio_columns();
        let count = rng.gen_range(s.min_active..=s.max_active);
        let mut active = vec![false; cols];
        for c in rand::seq::index::sample(rng, cols, count) {
            active[c] = true;
        }
        SoloRecord {
            id,
            class_index,
            bbox: (x0, y0, x0 + bw, y0 + bh),
            active,
            noise_seed: rng.gen(),
        }
    }

    fn audio_columns(&self) -> usize {
        match PatchEncoderConfig::audio_default().grid {
            GridRule::Fixed(g) => g.cols,
            GridRule::Stride { .. } => unreachable!(),
        }
    }

    /// `count` samples of `sources` distinct classes each, drawn from
    /// `classes`. Classes are dealt from reshuffled decks so per-class
    /// counts stay within one deck of uniform.
    pub fn records(
        &self,
        tag: &str,
        count: usize,
        sources: usize,
        classes: &[usize],
    ) -> Result<Vec<MixtureRecord>> {
        if sources == 0 || sources > classes.len() {
            return Err(TvslError::Config(format!(
                "{sources} sources per sample from {} classes",
                classes.len()
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.classes()) {
            return Err(TvslError::ClassIndex { index: bad, len: self.classes() });
        }
        let mut rng = rng_for(self.spec.seed, tag, 0);
        let mut deck: Vec<usize> = Vec::new();
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mut picked: Vec<usize> = Vec::with_capacity(sources);
            while picked.len() < sources {
                if deck.is_empty() {
                    deck = classes.to_vec();
                    deck.shuffle(&mut rng);
                }
                let pos = deck.iter().position(|c| !picked.contains(c));
                match pos {
                    Some(p) => picked.push(deck.remove(p)),
                    None => deck.clear(),
                }
            }
            let id = format!("{tag}-{i:05}");
            let solos = picked
                .iter()
                .enumerate()
                .map(|(j, &c)| self.draw_solo(format!("{id}.{j}"), c, &mut rng))
                .collect();
            out.push(MixtureRecord { id, sources: solos });
        }
        Ok(out)
    }

    pub fn render_solo<T: Scalar>(&self, rec: &SoloRecord) -> Result<MixtureSample<T>> {
        let s = &self.spec;
        let n = self.classes();
        if rec.class_index >= n {
            return Err(TvslError::ClassIndex { index: rec.class_index, len: n });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rec.noise_seed);
        let size = s.frame_size;
        let (x0, y0, x1, y1) = rec.bbox;
        if x1 > size || y1 > size || x0 >= x1 || y0 >= y1 {
            return Err(TvslError::Input(format!("box {:?} outside a {size}px frame", rec.bbox)));
        }

        let code = self.visual_codes.row(rec.class_index);
        let scale = s.visual_amplitude / max_abs(code);
        let sub = VISUAL_STRIDE / TEXTURE_CELL;
        let mut px = Array3::<f64>::from_elem((3, size, size), 0.5);
        for ch in 0..3 {
            for y in y0..y1 {
                for x in x0..x1 {
                    let k = ch * sub * sub + ((y / TEXTURE_CELL) % sub) * sub + (x / TEXTURE_CELL) % sub;
                    px[[ch, y, x]] += scale * code[k];
                }
            }
        }
        if s.visual_noise > 0.0 {
            let noise = Normal::new(0.0, s.visual_noise).unwrap();
            px.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }

        let audio_cfg = PatchEncoderConfig::audio_default();
        let bins = audio_cfg.input_rows.unwrap_or(80);
        let (sr, sc) = (audio_cfg.sub_rows, audio_cfg.sub_cols);
        let cols = self.audio_columns();
        if rec.active.len() != cols {
            return Err(TvslError::Input(format!("{} activity flags for {cols} columns", rec.active.len())));
        }
        let q = self.audio_codes.row(rec.class_index);
        let qmax = max_abs(q);
        let mut spec = Array2::<f64>::zeros((bins, s.audio_frames));
        let fine_cols = cols * sc;
        for (t, _) in rec.active.iter().enumerate().filter(|(_, &a)| a) {
            for fc in t * sc..(t + 1) * sc {
                let (f0, f1) = adaptive_bin(fc, fine_cols, s.audio_frames);
                for bin in 0..bins {
                    let k = (bin % sr) * sc + fc % sc;
                    let v = s.audio_amplitude * (1.0 + 0.9 * q[k] / qmax);
                    for f in f0..f1 {
                        spec[[bin, f]] = v;
                    }
                }
            }
        }
        if s.audio_noise > 0.0 {
            let noise = Normal::new(0.0, s.audio_noise).unwrap();
            spec.mapv_inplace(|v| (v + noise.sample(&mut rng)).max(0.0));
        }

        let mut labels = vec![false; n];
        labels[rec.class_index] = true;
        let mut regions = BTreeMap::new();
        regions.insert(rec.class_index, GroundTruthRegion::bbox(x0, y0, x1, y1));
        Ok(MixtureSample {
            id: rec.id.clone(),
            frame: ImageInput::new(px.mapv(T::of))?,
            audio: AudioInput::new(spec.mapv(T::of))?,
            labels,
            regions,
        })
    }

    pub fn render<T: Scalar>(&self, rec: &MixtureRecord) -> Result<MixtureSample<T>> {
        let solos = rec
            .sources
            .iter()
            .map(|s| self.render_solo(s))
            .collect::<Result<Vec<MixtureSample<T>>>>()?;
        let mut sample = if solos.len() == 1 {
            solos.into_iter().next().unwrap()
        } else {
            let refs: Vec<_> = solos.iter().collect();
            mix_k_sources(&refs)?
        };
        sample.id = rec.id.clone();
        Ok(sample)
    }

    /// Renders and encodes records one at a time, keeping only tokens.
    pub fn encode_records<T: Scalar>(
        &self,
        hub: &EncoderHub<T>,
        records: &[MixtureRecord],
    ) -> Result<Vec<EncodedSample<T>>> {
        records
            .iter()
            .map(|r| encode_sample(hub, &self.render::<T>(r)?))
            .collect()
    }

    /// Seeded 50/50 partition of the classes into seen and unseen halves.
    pub fn zero_shot_split(&self, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.classes()).collect();
        idx.shuffle(&mut rng_for(seed, "zero-shot split", 0));
        let half = self.classes() / 2;
        let mut seen = idx[..half].to_vec();
        let mut unseen = idx[half..].to_vec();
        seen.sort_unstable();
        unseen.sort_unstable();
        (seen, unseen)
    }

    pub fn zero_shot_record(&self, seed: u64) -> ZeroShotSplit {
        let (seen, unseen) = self.zero_shot_split(seed);
        let names = |v: &[usize]| v.iter().map(|&c| self.vocab.name(c).to_string()).collect();
        ZeroShotSplit { seed, seen: names(&seen), unseen: names(&unseen) }
    }

    /// Renders `splits` below `root` and returns the manifest (not yet saved).
    pub fn write_dataset(
        &self,
        root: &Path,
        splits: &[(&str, &[MixtureRecord])],
        zero_shot: Option<ZeroShotSplit>,
    ) -> Result<DatasetManifest> {
        let mut records = Vec::new();
        for (split, recs) in splits {
            for r in recs.iter() {
                let sample = self.render::<f32>(r)?;
                records.push(write_sample(&sample, root, split, &self.vocab)?);
            }
        }
        let manifest = DatasetManifest {
            header: Some(ManifestHeader {
                vocabulary: self.vocab.names().to_vec(),
                world: Some(self.spec.clone()),
                zero_shot,
            }),
            records,
        };
        manifest.check_split_hygiene()?;
        Ok(manifest)
    }
}

/// A generated world with its train and test records.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub world: SyntheticWorld,
    pub train: Vec<MixtureRecord>,
    pub test: Vec<MixtureRecord>,
}

/// Builds the world and draws train/test records over all classes.
pub fn generate_synthetic_world(spec: SyntheticWorldSpec) -> Result<SyntheticDataset> {
    let world = SyntheticWorld::new(spec)?;
    let all: Vec<usize> = (0..world.classes()).collect();
    let s = &world.spec;
    let train = world.records("train", s.train, s.train_sources, &all)?;
    let test = world.records("test", s.test, s.test_sources, &all)?;
    Ok(SyntheticDataset { world, train, test })
}

/// Manifest-relative paths resolve against `root`.
pub fn data_root(manifest_path: &Path, override_root: Option<PathBuf>) -> PathBuf {
    override_root.unwrap_or_else(|| {
        manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticWorldSpec {
        SyntheticWorldSpec { train: 20, test: 10, ..Default::default() }
    }

    fn solo(world: &SyntheticWorld, class: usize, seed: u64) -> MixtureSample<f64> {
        let mut rng = rng_for(seed, "solo", 0);
        let rec = world.draw_solo(format!("s{class}"), class, &mut rng);
        world.render_solo(&rec).unwrap()
    }

    #[test]
    fn duet_shape_labels_and_offsets() {
        let world = SyntheticWorld::new(small_spec()).unwrap();
        let (a, b) = (solo(&world, 0, 1), solo(&world, 3, 2));
        let duet = synthesize_duet(&a, &b).unwrap();
        assert_eq!(duet.frame_size(), (224, 448));
        assert_eq!(duet.source_count(), 2);
        assert_eq!(duet.classes(), vec![0, 3]);
        let GroundTruthRegion::Box { x0, .. } = b.regions[&3] else { panic!() };
        let GroundTruthRegion::Box { x0: shifted, .. } = duet.regions[&3] else { panic!() };
        assert_eq!(shifted, x0 + 224);
    }

    #[test]
    fn same_class_pair_is_rejected() {
        let world = SyntheticWorld::new(small_spec()).unwrap();
        let (a, b) = (solo(&world, 1, 1), solo(&world, 1, 2));
        assert!(matches!(synthesize_duet(&a, &b), Err(TvslError::Mixture(_))));
    }

    #[test]
    fn silence_is_the_mixing_identity() {
        let world = SyntheticWorld::new(small_spec()).unwrap();
        let a = solo(&world, 0, 1);
        let mut b = solo(&world, 1, 2);
        b.audio = AudioInput::silence(80, 192);
        let duet = synthesize_duet(&b, &a).unwrap();
        let diff = (duet.audio.spectrogram() - a.audio.spectrogram()).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-12));
    }

    #[test]
    fn k_way_mixture_widths() {
        let world = SyntheticWorld::new(small_spec()).unwrap();
        let s: Vec<_> = (0..4).map(|c| solo(&world, c, c as u64)).collect();
        let three = mix_k_sources(&[&s[0], &s[1], &s[2]]).unwrap();
        assert_eq!(three.frame.width(), 672);
        assert_eq!(three.source_count(), 3);
        let hub = world.encoders::<f64>().unwrap();
        let four = mix_k_sources(&[&s[0], &s[1], &s[2], &s[3]]).unwrap();
        let tokens = hub.encode_image_tokens(&four.frame).unwrap();
        assert_eq!((tokens.grid().rows, tokens.grid().cols), (7, 28));
        assert_eq!(synthesize_duet(&s[0], &s[1]).unwrap(), mix_k_sources(&[&s[0], &s[1]]).unwrap());
    }

    #[test]
    fn prototypes_are_spread() {
        let world = SyntheticWorld::new(small_spec()).unwrap();
        let p = &world.prototypes;
        for i in 0..p.nrows() {
            assert!((p.row(i).dot(&p.row(i)) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(p.row(i).dot(&p.row(j)) < 0.5);
            }
        }
    }

    #[test]
    fn clean_blob_cells_encode_to_the_prototype() {
        let spec = SyntheticWorldSpec { visual_noise: 0.0, audio_noise: 0.0, ..small_spec() };
        let world = SyntheticWorld::new(spec).unwrap();
        let hub = world.encoders::<f64>().unwrap();
        let rec = SoloRecord {
            id: "clean".into(),
            class_index: 2,
            bbox: (0, 0, 96, 96),
            active: vec![true, false, true, false, false, false],
            noise_seed: 0,
        };
        let s = world.render_solo::<f64>(&rec).unwrap();
        let v = hub.encode_image_tokens(&s.frame).unwrap();
        let p = world.prototypes.row(2);
        for (r, q) in [(0, 0), (1, 2), (2, 1)] {
            let t = v.tokens().row(r * 7 + q);
            assert!((&t - &p).iter().all(|d| d.abs() < 1e-9), "cell ({r},{q})");
        }
        let background = v.tokens().row(6 * 7 + 6);
        assert!(background.iter().all(|d| d.abs() < 1e-9));
        let a = hub.encode_audio_tokens(&s.audio).unwrap();
        for row in 0..10 {
            let active = a.tokens().row(row * 6);
            assert!((&active - &p).iter().all(|d| d.abs() < 1e-9));
            assert!(a.tokens().row(row * 6 + 1).iter().all(|d| d.abs() < 1e-9));
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = SyntheticWorldSpec { train: 500, test: 100, train_sources: 1, ..Default::default() };
        let a = generate_synthetic_world(spec.clone()).unwrap();
        let b = generate_synthetic_world(spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let mut counts = [0usize; 8];
        for r in &a.train {
            counts[r.sources[0].class_index] += 1;
        }
        for c in counts {
            assert!((c as f64 - 62.5).abs() <= 0.2 * 62.5, "{counts:?}");
        }
    }

    #[test]
    fn zero_shot_split_halves_the_classes() {
        let world = SyntheticWorld::new(small_spec()).unwrap();
        let (seen, unseen) = world.zero_shot_split(3);
        assert_eq!(seen.len(), 4);
        assert_eq!(unseen.len(), 4);
        assert!(seen.iter().all(|c| !unseen.contains(c)));
        assert_eq!(world.zero_shot_split(3), (seen, unseen));
    }

    #[test]
    fn manifest_round_trip_and_hygiene() {
        let m = DatasetManifest {
            header: Some(ManifestHeader { vocabulary: vec!["a".into()], world: None, zero_shot: None }),
            records: vec![ManifestRecord {
                id: "x".into(),
                frame: "f.png".into(),
                audio: "a.f32".into(),
                classes: vec!["a".into()],
                regions: vec![],
                split: "train".into(),
            }],
        };
        assert_eq!(DatasetManifest::parse(&m.to_jsonl().unwrap()).unwrap(), m);
        let mut dup = m.clone();
        dup.records.push(ManifestRecord { split: "test".into(), ..m.records[0].clone() });
        assert!(dup.check_split_hygiene().is_err());
        assert!(m.check_disjoint(&m).is_err());
    }
}
