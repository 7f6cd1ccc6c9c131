mod common;

use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use ndarray::{array, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tvsl_core::avc_block::{align, contrastive_loss_and_grad, ContrastiveOptions, ContrastivePair, CorrespondenceProjectors};
use tvsl_core::conditioner::{
    class_conditioning_loss, condition_audio, ConditionedBranch, ConditionedFeatures, ConditionedSource,
    ConditioningProjectors,
};
use tvsl_core::encoder_hub::{Grid, ImageInput, Modality, PatchTokenSet};
use tvsl_core::instance_detector::{detect, detection_loss, DetectionResult, ProjectorSet};
use tvsl_core::localization::{binarize_map, ThresholdPolicy};
use tvsl_core::metrics_eval::{auc, ciou, iou, success_rate_at, GroundTruthRegion};
use tvsl_core::mixture_data::{
    mix_k_sources, synthesize_duet, SyntheticWorld, SyntheticWorldSpec,
};
use tvsl_core::model::{ModelConfig, Parameters, TvslModel};

fn set(rows: Array2<f64>, grid: Grid, m: Modality) -> PatchTokenSet<f64> {
    PatchTokenSet::new(rows, grid, m).unwrap()
}

fn softmax_ce(logits: &[f64], target: usize) -> f64 {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[target].exp() / z).ln()
}

fn branch(tokens: PatchTokenSet<f64>, projected: Array1<f64>) -> ConditionedBranch<f64> {
    let n = tokens.len();
    let pooled = tokens.tokens().mean_axis(ndarray::Axis(0)).unwrap();
    ConditionedBranch { tokens, gates: Array1::ones(n), pooled, projected }
}

#[test]
fn detection_scores_match_hand_cosines() {
    // one audio and one visual token; P_f averages them into F = (1, 1, 0, 1)
    let a = set(array![[2.0, 0.0, 0.0, 1.0]], Grid::new(1, 1), Modality::Audio);
    let v = set(array![[0.0, 2.0, 0.0, 1.0]], Grid::new(1, 1), Modality::Visual);
    let bank = array![[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 3.0, 0.0]];
    let det = detect(&a, &v, &bank, &ProjectorSet::identity(4), 10.0, 0.5).unwrap();
    let f_norm = 3f64.sqrt();
    let expected = [1.0 / f_norm, 3.0 / (2.0 * f_norm), 0.0];
    for i in 0..3 {
        assert_abs_diff_eq!(det.scores[i], expected[i], epsilon = 1e-10);
    }
    assert_eq!(det.selected, vec![0, 1]);

    let scaled = set(a.tokens() * 5.0, Grid::new(1, 1), Modality::Audio);
    let vs = set(v.tokens() * 5.0, Grid::new(1, 1), Modality::Visual);
    let again = detect(&scaled, &vs, &bank, &ProjectorSet::identity(4), 10.0, 0.5).unwrap();
    for i in 0..3 {
        assert_abs_diff_eq!(again.scores[i], det.scores[i], epsilon = 1e-12);
    }
}

fn detection_with_logits(logits: Array1<f64>) -> DetectionResult<f64> {
    let n = logits.len();
    DetectionResult {
        scores: logits.clone(),
        probabilities: logits.mapv(|z| 1.0 / (1.0 + (-z).exp())),
        logits,
        selected: vec![],
        pooled: Array1::zeros(2),
        fused: Array1::zeros(n),
    }
}

#[test]
fn detection_loss_cases() {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let labels = [true, false, true];
    let hand = detection_with_logits(array![logit(0.9), logit(0.2), logit(0.7)]);
    let expected = -(0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln());
    assert_abs_diff_eq!(detection_loss(&hand, &labels).unwrap(), expected, epsilon = 1e-12);

    let eps = 1e-6;
    let l = logit(1.0 - eps);
    let near = detection_with_logits(array![l, -l, l]);
    let bound = -3.0 * (1.0 - eps).ln();
    assert!(detection_loss(&near, &labels).unwrap() <= bound * (1.0 + 1e-9));
}

#[test]
fn class_loss_matches_softmax_oracle() {
    // bank = I₄, so cosines are the components of the unit projected vectors
    let bank = Array2::<f64>::eye(4);
    let rows = [
        (array![0.6, 0.8, 0.0, 0.0], array![0.0, 0.0, 1.0, 0.0]),
        (array![0.5, 0.5, 0.5, 0.5], array![0.0, 0.28, 0.0, 0.96]),
    ];
    let classes = [1, 3];
    let tau = 2.5;
    let tok = |m| set(Array2::ones((1, 4)), Grid::new(1, 1), m);
    let feats = ConditionedFeatures {
        sources: rows
            .iter()
            .zip(classes)
            .map(|((v, a), c)| ConditionedSource {
                class_index: c,
                visual: branch(tok(Modality::Visual), v.clone()),
                audio: branch(tok(Modality::Audio), a.clone()),
            })
            .collect(),
    };
    let mut expected = 0.0;
    for ((v, a), c) in rows.iter().zip(classes) {
        for f in [v, a] {
            let logits: Vec<f64> = f.iter().map(|x| tau * x).collect();
            expected += softmax_ce(&logits, c);
        }
    }
    let got = class_conditioning_loss(&feats, &bank, &classes, tau).unwrap();
    assert_abs_diff_eq!(got, expected, epsilon = 1e-8);
}

#[test]
fn infonce_matches_hand_similarity_matrix() {
    let v = [array![1.0, 0.0, 0.0], array![0.0, 1.0, 0.0], array![0.0, 0.0, 1.0]];
    let a = [array![0.8, 0.6, 0.0], array![0.0, 0.6, 0.8], array![0.6, 0.0, 0.8]];
    // sim[i][j] = cos(v_i, a_j) = a_j[i]
    let sim = |i: usize, j: usize| a[j][i];
    let mut expected = 0.0;
    for i in 0..3 {
        let row: Vec<f64> = (0..3).map(|j| sim(i, j)).collect();
        let col: Vec<f64> = (0..3).map(|j| sim(j, i)).collect();
        expected += (softmax_ce(&row, i) + softmax_ce(&col, i)) / 6.0;
    }
    let pairs: Vec<ContrastivePair<f64>> =
        (0..3).map(|i| ContrastivePair { visual: &v[i], audio: &a[i], class_index: i }).collect();
    let out = contrastive_loss_and_grad(&pairs, 1.0, ContrastiveOptions::default()).unwrap();
    assert_abs_diff_eq!(out.loss, expected, epsilon = 1e-8);
}

fn one_source(visual: Array2<f64>, pooled_audio: Array1<f64>) -> ConditionedFeatures<f64> {
    let n = visual.nrows();
    let audio = set(pooled_audio.clone().insert_axis(ndarray::Axis(0)), Grid::new(1, 1), Modality::Audio);
    let visual = set(visual, Grid::new(2, n / 2), Modality::Visual);
    ConditionedFeatures {
        sources: vec![ConditionedSource {
            class_index: 0,
            visual: branch(visual, Array1::zeros(4)),
            audio: ConditionedBranch { pooled: pooled_audio, ..branch(audio, Array1::zeros(4)) },
        }],
    }
}

#[test]
fn alignment_hand_cases() {
    let q = array![1.0, -2.0, 0.5, 3.0];
    let parallel = Array2::from_shape_fn((4, 4), |(i, j)| (i as f64 + 0.5) * q[j]);
    let out = align(&one_source(parallel.clone(), q.clone()), &CorrespondenceProjectors::identity(4), false);
    assert!(out.sources[0].visual_tokens.tokens().iter().zip(parallel.iter()).all(|(x, y)| (x - y).abs() < 1e-12));

    let silent = align(&one_source(parallel, Array1::zeros(4)), &CorrespondenceProjectors::identity(4), false);
    assert!(silent.sources[0].audio_query.iter().all(|&v| v == 0.0));
    assert!(silent.sources[0].visual_tokens.tokens().iter().all(|&v| v == 0.0));

    // D=4, n_v=4 against an explicit composition
    let v = array![[1.0, 0.0, 2.0, -1.0], [0.5, 1.5, 0.0, 0.0], [-1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 2.0]];
    let pa = array![[0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 2.0, 0.0], [0.0, 0.0, 1.0, 1.0]];
    let pv = array![[1.0, 1.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0], [0.0, 0.0, 1.0, 1.0], [1.0, 0.0, 0.0, 1.0]];
    let fa = array![0.5, 1.0, -1.0, 2.0];
    let proj = CorrespondenceProjectors { audio: pa.clone(), visual: pv.clone() };
    let got = &align(&one_source(v.clone(), fa.clone()), &proj, false).sources[0];
    let query: Vec<f64> = (0..4).map(|i| (0..4).map(|j| pa[[i, j]] * fa[j]).sum()).collect();
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut pooled = [0.0; 4];
    for r in 0..4 {
        let vn = (0..4).map(|j| v[[r, j]] * v[[r, j]]).sum::<f64>().sqrt();
        let g = (0..4).map(|j| v[[r, j]] * query[j]).sum::<f64>() / (vn * qn);
        for j in 0..4 {
            assert_abs_diff_eq!(got.visual_tokens.tokens()[[r, j]], g * v[[r, j]], epsilon = 1e-10);
            pooled[j] += g * v[[r, j]] / 4.0;
        }
    }
    for i in 0..4 {
        let e: f64 = (0..4).map(|j| pv[[i, j]] * pooled[j]).sum();
        assert_abs_diff_eq!(got.visual_embedding[i], e, epsilon = 1e-10);
        assert_abs_diff_eq!(got.audio_query[i], query[i], epsilon = 1e-10);
    }
}

#[test]
fn zero_audio_tokens_project_to_zero() {
    let zeros = set(Array2::zeros((6, 4)), Grid::new(2, 3), Modality::Audio);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let proj = ConditioningProjectors { visual: common::gaussian(&mut rng, (4, 4)), audio: common::gaussian(&mut rng, (4, 4)) };
    let b = condition_audio(&zeros, &array![1.0, 0.0, 0.0, 0.0], &proj, false);
    assert!(b.projected.iter().all(|&v| v == 0.0));
}

#[test]
fn binarize_small_map_matches_enumeration() {
    let map = array![[0.0, 0.1, 0.2, 0.3], [0.4, 0.5, 0.6, 0.7], [0.8, 0.9, 1.0, 0.05], [0.25, 0.24, 0.26, 0.5]];
    let mask = binarize_map(map.view(), ThresholdPolicy::MinMax { threshold: 0.25 });
    // min 0, max 1: the normalized map is the map itself
    for ((y, x), &m) in mask.indexed_iter() {
        assert_eq!(m, map[[y, x]] >= 0.25, "pixel ({y}, {x})");
    }
    assert_eq!(mask.iter().filter(|&&b| b).count(), 11);
}

#[test]
fn two_source_ciou_is_mean_of_ious() {
    let mut pred_a = Array2::from_elem((8, 8), false);
    pred_a.slice_mut(ndarray::s![0..4, 0..4]).fill(true);
    let mut pred_b = Array2::from_elem((8, 8), false);
    pred_b.slice_mut(ndarray::s![4..8, 2..8]).fill(true);
    let gts: BTreeMap<usize, GroundTruthRegion> =
        [(0, GroundTruthRegion::bbox(0, 0, 2, 4)), (5, GroundTruthRegion::bbox(4, 4, 8, 8))].into_iter().collect();
    // |∩| = 8, |∪| = 16; |∩| = 16, |∪| = 24
    let expected = (8.0 / 16.0 + 16.0 / 24.0) / 2.0;
    let got = ciou(&[(0, pred_a.view()), (5, pred_b.view())], &gts).unwrap();
    assert_abs_diff_eq!(got, expected, epsilon = 1e-15);
    assert_abs_diff_eq!(iou(pred_a.view(), &gts[&0]).unwrap(), 0.5, epsilon = 1e-15);
}

#[test]
fn success_rate_matches_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
    for tau in [0.0, 0.3, 0.5, 0.9] {
        let count = values.iter().filter(|&&v| v >= tau).count();
        assert_eq!(success_rate_at(&values, tau), count as f64);
    }
}

#[test]
fn auc_of_hand_values() {
    let values = [0.0, 0.05, 0.12, 0.3, 0.31, 0.5, 0.66, 0.8, 0.999, 1.0];
    // grid points cleared per value: 0, 2, 3, 7, 7, 11, 14, 17, 20, 21;
    // each covers 0.05·(m − ½) of the axis, or all of it at m = 21
    let covered = [0.0, 0.075, 0.125, 0.325, 0.325, 0.525, 0.675, 0.825, 0.975, 1.0];
    let expected = 100.0 * covered.iter().sum::<f64>() / 10.0;
    assert_abs_diff_eq!(auc(&values), expected, epsilon = 1e-9);
    assert_abs_diff_eq!(expected, 48.5, epsilon = 1e-12);
}

fn small_world(spec: SyntheticWorldSpec) -> SyntheticWorld {
    SyntheticWorld::new(spec).unwrap()
}

#[test]
fn constant_image_gives_identical_tokens() {
    let w = small_world(SyntheticWorldSpec::default());
    let hub = w.encoders::<f64>().unwrap();
    let tokens = hub.encode_image_tokens(&ImageInput::new(Array3::from_elem((3, 224, 224), 0.3)).unwrap()).unwrap();
    let first = tokens.tokens().row(0).to_owned();
    assert!(tokens.tokens().rows().into_iter().all(|r| r == first));
}

#[test]
fn k_way_mix_of_two_equals_duet() {
    let w = small_world(SyntheticWorldSpec::default());
    let recs = w.records("pair", 1, 2, &[0, 1, 2, 3]).unwrap();
    let a = w.render_solo::<f64>(&recs[0].sources[0]).unwrap();
    let b = w.render_solo::<f64>(&recs[0].sources[1]).unwrap();
    assert_eq!(mix_k_sources(&[&a, &b]).unwrap(), synthesize_duet(&a, &b).unwrap());
}

#[test]
fn generated_datasets_are_byte_identical() {
    let spec = SyntheticWorldSpec { train: 12, test: 4, ..Default::default() };
    let write = || {
        let ds = tvsl_core::mixture_data::generate_synthetic_world(spec.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = ds
            .world
            .write_dataset(dir.path(), &[("train", &ds.train), ("test", &ds.test)], Some(ds.world.zero_shot_record(0)))
            .unwrap();
        let first = std::fs::read(dir.path().join(&m.records[0].frame)).unwrap();
        (m.to_jsonl().unwrap(), first)
    };
    assert_eq!(write(), write());
}

/// Left-half source `c`, right-half source `c′`: gates against `e_c` are
/// larger on the left.
#[test]
fn duet_gates_favor_the_named_half() {
    let w = small_world(SyntheticWorldSpec::default());
    let hub = w.encoders::<f64>().unwrap();
    let all: Vec<usize> = (0..w.classes()).collect();
    let recs = w.records("gate-mc", 1000, 2, &all).unwrap();
    let mut gap = 0.0;
    for r in &recs {
        let sample = w.render::<f64>(r).unwrap();
        let tokens = hub.encode_image_tokens(&sample.frame).unwrap();
        let grid = tokens.grid();
        let e = w.prototypes.row(r.sources[0].class_index);
        let (mut left, mut right) = (0.0, 0.0);
        for (j, t) in tokens.tokens().rows().into_iter().enumerate() {
            let g = (t.dot(&e) / (t.dot(&t).sqrt() * e.dot(&e).sqrt())).abs();
            if j % grid.cols < grid.cols / 2 {
                left += g;
            } else {
                right += g;
            }
        }
        let half = (grid.len() / 2) as f64;
        gap += (left - right) / half;
    }
    let gap = gap / recs.len() as f64;
    println!("mean left-minus-right gate magnitude {gap:.3}");
    assert!(gap >= 0.1, "gap {gap}");
}

#[test]
fn untrained_heatmap_peaks_in_the_class_half() {
    let w = small_world(SyntheticWorldSpec::default());
    let hub = w.encoders::<f64>().unwrap();
    let cfg = ModelConfig { init_noise: 0.0, ..Default::default() };
    let params = Parameters::identity_init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let model = TvslModel::new(cfg, params, &hub, w.vocab.clone()).unwrap();
    let all: Vec<usize> = (0..w.classes()).collect();
    let recs = w.records("argmax-mc", 200, 2, &all).unwrap();
    let samples = w.encode_records(&hub, &recs).unwrap();
    let mut hits = 0;
    for (s, r) in samples.iter().zip(&recs) {
        let c = r.sources[0].class_index;
        let hm = model.infer(s, Some(&[c])).unwrap().heatmap;
        let ((_, x), _) = hm
            .map(0)
            .indexed_iter()
            .fold(((0, 0), f64::NEG_INFINITY), |best, (ix, &v)| if v > best.1 { (ix, v) } else { best });
        hits += (x < s.frame_size.1 / 2) as usize;
    }
    println!("argmax in the class half for {hits}/200 draws");
    assert!(hits >= 180);
}

#[test]
fn pure_audio_points_at_its_own_class() {
    let w = small_world(SyntheticWorldSpec::default());
    let hub = w.encoders::<f64>().unwrap();
    let all: Vec<usize> = (0..w.classes()).collect();
    let recs = w.records("solo-audio", 80, 1, &all).unwrap();
    let proj = ConditioningProjectors::identity(w.spec.dim);
    for r in &recs {
        let c = r.sources[0].class_index;
        let s = w.render::<f64>(r).unwrap();
        let tokens = hub.encode_audio_tokens(&s.audio).unwrap();
        let e = w.prototypes.row(c).to_owned();
        let f = condition_audio(&tokens, &e, &proj, false).projected;
        let cos = |k: usize| {
            let p = w.prototypes.row(k);
            f.dot(&p) / (f.dot(&f).sqrt() * p.dot(&p).sqrt())
        };
        let own = cos(c);
        for k in (0..w.classes()).filter(|&k| k != c) {
            assert!(own > cos(k), "{}: class {c} cos {own} vs class {k} cos {}", r.id, cos(k));
        }
    }
}
