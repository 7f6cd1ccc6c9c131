#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tvsl_core::avc_block::LossWeights;
use tvsl_core::encoder_hub::{
    EncoderHub, Grid, LinearPatchEncoder, Modality, PatchEncoderConfig, PatchTokenSet,
    SyntheticTextEncoder,
};
use tvsl_core::mixture_data::EncodedSample;
use tvsl_core::model::{ModelConfig, Parameters, TvslModel};
use tvsl_core::text_guidance::ClassVocabulary;

pub fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Hub whose patch encoders are unused (tokens are injected directly) and
/// whose text table holds `n` random class embeddings.
pub fn random_hub(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (EncoderHub<f64>, ClassVocabulary) {
    let names: Vec<String> = (0..n).map(|i| format!("class{i}")).collect();
    let mut text = SyntheticTextEncoder::new(d, 0);
    for name in &names {
        text.insert(name.clone(), gaussian(rng, (1, d)).row(0).to_owned());
    }
    let hub = EncoderHub::new(
        LinearPatchEncoder::zeros(PatchEncoderConfig::audio_default(), d),
        LinearPatchEncoder::zeros(PatchEncoderConfig::visual_default(), d),
        text,
    )
    .unwrap();
    (hub, ClassVocabulary::new(names).unwrap())
}

/// A sample with random tokens on `n_a`/`n_v` grids and `k` random classes.
pub fn random_sample(
    rng: &mut ChaCha8Rng,
    id: usize,
    n: usize,
    k: usize,
    d: usize,
    audio_grid: Grid,
    visual_grid: Grid,
) -> EncodedSample<f64> {
    let mut labels = vec![false; n];
    for c in rand::seq::index::sample(rng, n, k) {
        labels[c] = true;
    }
    EncodedSample {
        id: format!("s{id}"),
        audio: PatchTokenSet::new(gaussian(rng, (audio_grid.len(), d)), audio_grid, Modality::Audio).unwrap(),
        visual: PatchTokenSet::new(gaussian(rng, (visual_grid.len(), d)), visual_grid, Modality::Visual)
            .unwrap(),
        labels,
        regions: Default::default(),
        frame_size: (visual_grid.rows * 4, visual_grid.cols * 4),
    }
}

/// Gradient-check instance: D=8, N=5, K=2, n_v=4, n_a=6, a batch of three
/// samples, a two-row prompt and non-saturated temperatures.
pub fn grad_instance(seed: u64, weights: LossWeights) -> (TvslModel<f64>, Vec<EncodedSample<f64>>) {
    let (d, n, k) = (8, 5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hub, vocab) = random_hub(&mut rng, n, d);
    let config = ModelConfig {
        dim: d,
        prompt_length: 2,
        weights,
        init_noise: 0.3,
        prompt_init_std: 0.3,
        tau_det: 2.0,
        tau_cls: 3.0,
        tau_av: 0.5,
        ..Default::default()
    };
    let params = Parameters::identity_init(&config, &mut rng);
    let model = TvslModel::new(config, params, &hub, vocab).unwrap();
    let batch = (0..3)
        .map(|i| random_sample(&mut rng, i, n, k, d, Grid::new(2, 3), Grid::new(2, 2)))
        .collect();
    (model, batch)
}

pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
}

/// Compares the analytic gradient of the batch loss with central
/// differences of step `h` on every parameter value.
pub fn check_gradients(model: &TvslModel<f64>, batch: &[EncodedSample<f64>], h: f64) -> GradReport {
    let refs: Vec<&EncodedSample<f64>> = batch.iter().collect();
    let (_, grad) = model.loss_and_grad(&refs).unwrap();
    let analytic = grad.to_flat();
    let base = model.params.to_flat();
    let segments = model.params.segments();
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + h;
        probe.params.set_flat(&x).unwrap();
        let plus = probe.loss(&refs).unwrap().total;
        x[i] = base[i] - h;
        probe.params.set_flat(&x).unwrap();
        let minus = probe.loss(&refs).unwrap().total;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if err > worst.0 {
            let name = segments.iter().find(|(_, r)| r.contains(&i)).unwrap().0;
            worst = (err, format!("{name}[{}]: analytic {a:e}, numeric {numeric:e}", i));
        }
    }
    GradReport { max_rel_err: worst.0, worst: worst.1 }
}
