use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tvsl_core::encoder_hub::EncoderHub;
use tvsl_core::eval::{evaluate, evaluate_predictions, oracle_prediction, EvalOptions};
use tvsl_core::io;
use tvsl_core::mixture_data::{generate_synthetic_world, EncodedSample, SyntheticWorld, SyntheticWorldSpec};
use tvsl_core::model::{ModelConfig, Parameters, TvslModel};
use tvsl_core::text_guidance::ClassVocabulary;
use tvsl_core::train::{TrainConfig, Trainer};
use tvsl_core::TvslError;

struct World {
    world: SyntheticWorld,
    hub: EncoderHub<f64>,
    train: Vec<EncodedSample<f64>>,
    test: Vec<EncodedSample<f64>>,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let ds = generate_synthetic_world(SyntheticWorldSpec::default()).unwrap();
        let hub = ds.world.encoders::<f64>().unwrap();
        let train = ds.world.encode_records(&hub, &ds.train).unwrap();
        let test = ds.world.encode_records(&hub, &ds.test).unwrap();
        World { world: ds.world, hub, train, test }
    })
}

fn model(cfg: ModelConfig) -> TvslModel<f64> {
    let w = world();
    let params = Parameters::identity_init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    TvslModel::new(cfg, params, &w.hub, w.world.vocab.clone()).unwrap()
}

#[test]
fn loss_falls_across_500_step_windows() {
    let w = world();
    let mut tr = Trainer::new(model(ModelConfig::default()), TrainConfig::default()).unwrap();
    tr.run(&w.train, |_, _| Ok(())).unwrap();
    let means: Vec<f64> = tr
        .history
        .chunks(500)
        .map(|c| c.iter().map(|h| h.total).sum::<f64>() / c.len() as f64)
        .collect();
    println!("window means {means:?}");
    assert_eq!(means.len(), 4);
    assert!(means.windows(2).all(|p| p[1] < p[0]), "{means:?}");
}

#[test]
fn zero_learning_rate_keeps_parameters_and_encoders() {
    let w = world();
    let before_hub = w.hub.fingerprint();
    let m = model(ModelConfig::default());
    let start = m.params.clone();
    let mut tr = Trainer::new(m, TrainConfig { steps: 5, lr: 0.0, ..Default::default() }).unwrap();
    tr.run(&w.train, |_, _| Ok(())).unwrap();
    assert_eq!(tr.model.params, start);
    assert_eq!(tr.history.len(), 5);

    let mut moving = Trainer::new(model(ModelConfig::default()), TrainConfig { steps: 3, ..Default::default() }).unwrap();
    moving.run(&w.train, |_, _| Ok(())).unwrap();
    assert_ne!(moving.model.params, start);
    assert_eq!(w.hub.fingerprint(), before_hub);
}

#[test]
fn evaluation_is_repeatable_and_oracle_maps_score_full_marks() {
    let w = world();
    let m = model(ModelConfig::default());
    let opts = EvalOptions::default();
    let a = evaluate(&m, &w.test, &opts).unwrap();
    let b = evaluate(&m, &w.test, &opts).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());

    let oracle = evaluate_predictions(w.test.iter().map(oracle_prediction), &w.world.vocab, &opts).unwrap();
    assert_eq!(oracle.success_rate, 100.0);
    assert!(oracle.chance.unwrap().success_rate < 100.0);
}

#[test]
fn enlarged_vocabulary_runs_without_retraining() {
    let w = world();
    let m = model(ModelConfig::default());
    let mut names = w.world.vocab.names().to_vec();
    names.push("theremin".to_string());
    let bigger = m.with_vocabulary(&w.hub, ClassVocabulary::new(names).unwrap()).unwrap();
    assert_eq!(bigger.params, m.params);
    assert_eq!(bigger.bank().nrows(), w.world.classes() + 1);
    let mut sample = w.test[0].clone();
    sample.labels.push(false);
    let inf = bigger.infer(&sample, None).unwrap();
    assert!(inf.detection.unwrap().probabilities.len() == w.world.classes() + 1);

    let prompted = model(ModelConfig { prompt_length: 8, ..Default::default() });
    assert!(matches!(
        prompted.with_vocabulary(&w.hub, w.world.vocab.clone()),
        Err(TvslError::PromptInZeroShot)
    ));
}

#[test]
fn exported_heatmaps_round_trip() {
    let w = world();
    let m = model(ModelConfig::default());
    let s = &w.test[0];
    let classes = s.classes();
    let hm = m.infer(s, Some(&classes)).unwrap().heatmap;
    let dir = tempfile::tempdir().unwrap();
    let written = hm.export(dir.path(), "sample").unwrap();
    assert_eq!(written.len(), classes.len() + 1);
    for k in 0..classes.len() {
        let png = io::read_gray_png(&written[k]).unwrap();
        let expected = hm.map(k).mapv(|v| io::quantize_u8(v, -1.0, 1.0));
        assert_eq!(png, expected);
    }
    // raw maps are stored as f32
    let raw = io::read_raw::<f32>(written.last().unwrap()).unwrap();
    assert_eq!(raw, hm.maps.mapv(|v| v as f32));
    let again = dir.path().join("again.f32");
    io::write_raw(&again, raw.view()).unwrap();
    assert_eq!(io::read_raw::<f32>(&again).unwrap(), raw);
}
