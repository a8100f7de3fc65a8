use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gaf::FeatureSet;
use crate::nn::{Adadelta, Mode, Tensor4};
use crate::ohlc::PatternClass;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_examples(rng: &mut impl Rng, n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| Example {
            input: (0..4 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect(),
            class: PatternClass::ALL[i % 8],
            window_size: 5 + (i * 3) % 12,
        })
        .collect()
}

fn tiny(seed: u64) -> Detector {
    Detector::new(DetectorArchitecture::tiny(), FeatureSet::Culr, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn architecture_traces_to_one_by_one() {
    assert_eq!(DetectorArchitecture::default().spatial_trace(), vec![16, 8, 4, 2, 1, 1, 1]);
    let model = Detector::new(DetectorArchitecture::default(), FeatureSet::Ohlc, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let x = Tensor4::zeros([3, 4, 16, 16]);
    assert_eq!(model.infer(&x).unwrap().shape(), [3, OUTPUT_LEN, 1, 1]);
    assert!(matches!(model.infer(&Tensor4::zeros([1, 4, 8, 8])), Err(Error::Shape(_))));
    assert!(matches!(model.infer(&Tensor4::zeros([1, 3, 16, 16])), Err(Error::Shape(_))));
    assert_eq!("8,8,8,8,8,8".parse::<DetectorArchitecture>().unwrap().widths, [8; 6]);
    assert!("8,8".parse::<DetectorArchitecture>().is_err());
}

#[test]
fn outputs_are_probabilities_and_per_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = tiny(2);
    let ex = random_examples(&mut rng, 3);
    let dup = [&ex[0], &ex[1], &ex[0], &ex[2]];
    let outs = model.predict(&stack_examples(&dup).unwrap()).unwrap();
    assert_eq!(outs[0], outs[2]);
    for o in &outs {
        assert!((o.class_scores.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for (w, c) in o.pairs {
            assert!(w > 0.0 && w < 1.0 && c > 0.0 && c < 1.0);
        }
    }
    // the cached inference path and the stateless one agree
    let mut m2 = model.clone();
    let x = stack_examples(&dup).unwrap();
    assert_eq!(m2.forward(&x, Mode::Infer).unwrap(), model.infer(&x).unwrap());
}

#[test]
fn iou_examples() {
    assert_eq!(iou_1d(8.0, 8.0).unwrap(), 1.0);
    assert_eq!(iou_1d(4.0, 8.0).unwrap(), 0.5);
    assert_eq!(iou_1d(3.0, 7.0).unwrap(), iou_1d(7.0, 3.0).unwrap());
    assert!(matches!(iou_1d(0.0, 8.0), Err(Error::InvalidInput(_))));
    assert!(matches!(iou_1d(4.0, -1.0), Err(Error::InvalidInput(_))));
}

fn exact_output(class: PatternClass, w: usize) -> DetectorOutput {
    let mut scores = [0.0; 8];
    scores[class.index()] = 1.0;
    DetectorOutput {
        pairs: [(w as f64 / 16.0, 1.0), (0.2, 0.0)],
        class_scores: scores,
    }
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let t = loss_terms(&exact_output(PatternClass::ShootingStar, 9), PatternClass::ShootingStar, 9, LossWeights::default()).unwrap();
    assert_eq!(t.responsible, 0);
    assert!(t.coord.abs() <= 1e-15 && t.confidence.abs() <= 1e-15 && t.no_object == 0.0);
    assert!(t.class <= 1e-9);
}

#[test]
fn coordinate_weight_scales_only_its_term() {
    let out = DetectorOutput {
        pairs: [(0.4, 0.7), (0.9, 0.3)],
        class_scores: [0.3, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1],
    };
    let base = LossWeights::default();
    let doubled = LossWeights {
        coord: 2.0 * base.coord,
        ..base
    };
    let a = loss_terms(&out, PatternClass::MorningStar, 11, base).unwrap();
    let b = loss_terms(&out, PatternClass::MorningStar, 11, doubled).unwrap();
    assert!((b.coord - 2.0 * a.coord).abs() <= 1e-15);
    assert_eq!((a.confidence, a.no_object, a.class), (b.confidence, b.no_object, b.class));
}

#[test]
fn zero_weighted_term_has_zero_gradient() {
    let raw = [0.3, -0.2, 1.1, 0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let w = LossWeights {
        coord: 1.0,
        noobj: 0.0,
    };
    let (t, g) = detection_loss(&raw, PatternClass::BullishHarami, 10, w).unwrap();
    let other = 1 - t.responsible;
    assert_eq!(g[2 * other + 1], 0.0);
    assert_eq!(g[2 * other], 0.0);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let weights = LossWeights::default();
    let mut checked = 0;
    while checked < 200 {
        let raw: Vec<f64> = (0..OUTPUT_LEN).map(|_| rng.random_range(-3.0..3.0)).collect();
        let class = PatternClass::ALL[rng.random_range(0..8)];
        let w_true = rng.random_range(5..=16);
        let out = DetectorOutput::from_raw(&raw).unwrap();
        // skip points within the step of a kink: equal widths or a pair swap
        let d: Vec<f64> = out.pairs.iter().map(|p| (p.0 * 16.0 - w_true as f64).abs()).collect();
        if d.iter().any(|v| *v < 1e-2) || (d[0] - d[1]).abs() < 1e-2 {
            continue;
        }
        let (_, g) = detection_loss(&raw, class, w_true, weights).unwrap();
        let loss = |r: &[f64]| detection_loss(r, class, w_true, weights).unwrap().0.total();
        let eps = 1e-4;
        for i in 0..OUTPUT_LEN {
            let mut up = raw.clone();
            up[i] += eps;
            let mut dn = raw.clone();
            dn[i] -= eps;
            let num = (loss(&up) - loss(&dn)) / (2.0 * eps);
            assert!(rel_err(g[i], num) <= 1e-4, "output {i}: {} vs {num}", g[i]);
        }
        checked += 1;
    }
}

proptest! {
    #[test]
    fn loss_is_nonnegative(raw in prop::collection::vec(-8.0f64..8.0, OUTPUT_LEN), cls in 0usize..8, w in 5usize..=16) {
        let (t, g) = detection_loss(&raw, PatternClass::ALL[cls], w, LossWeights::default()).unwrap();
        prop_assert!(t.coord >= 0.0 && t.confidence >= 0.0 && t.no_object >= 0.0 && t.class >= 0.0);
        prop_assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn responsible_pair_is_scale_invariant(a in 0.01f64..1.0, b in 0.01f64..1.0, w in 5usize..=16, k in 0.1f64..0.9) {
        let out = |x: f64, y: f64| DetectorOutput { pairs: [(x, 0.5), (y, 0.5)], class_scores: [0.125; 8] };
        let wt = w as f64;
        prop_assume!(((a * 16.0).min(wt) / (a * 16.0).max(wt) - (b * 16.0).min(wt) / (b * 16.0).max(wt)).abs() > 1e-9);
        prop_assert_eq!(responsible_pair(&out(a, b), wt), responsible_pair(&out(a * k, b * k), wt * k));
    }
}

fn batch_loss(model: &mut Detector, x: &Tensor4, ex: &[Example]) -> f64 {
    let raw = model.forward(x, Mode::Train).unwrap();
    ex.iter()
        .enumerate()
        .map(|(s, e)| detection_loss(raw.sample(s), e.class, e.window_size, LossWeights::default()).unwrap().0.total())
        .sum::<f64>()
        / ex.len() as f64
}

#[test]
fn full_model_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = tiny(9);
    let ex = random_examples(&mut rng, 3);
    let refs: Vec<&Example> = ex.iter().collect();
    let x = stack_examples(&refs).unwrap();

    model.zero_grad();
    let raw = model.forward(&x, Mode::Train).unwrap();
    let mut d = Vec::new();
    for (s, e) in ex.iter().enumerate() {
        let (_, g) = detection_loss(raw.sample(s), e.class, e.window_size, LossWeights::default()).unwrap();
        d.extend(g.iter().map(|v| v / 3.0));
    }
    let dx = model.backward(&Tensor4::new(raw.shape(), d).unwrap()).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();

    let eps = 1e-4;
    let n_params = analytic.len();
    let mut worst: f64 = 0.0;
    for pi in 0..n_params {
        for i in 0..analytic[pi].len() {
            let orig = model.params_mut()[pi].value[i];
            model.params_mut()[pi].value[i] = orig + eps;
            let up = batch_loss(&mut model, &x, &ex);
            model.params_mut()[pi].value[i] = orig - eps;
            let dn = batch_loss(&mut model, &x, &ex);
            model.params_mut()[pi].value[i] = orig;
            let num = (up - dn) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[pi][i], num));
        }
    }
    assert!(worst <= 1e-4, "worst parameter relative error {worst}");

    let mut xp = x.clone();
    for i in (0..x.data().len()).step_by(37) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + eps;
        let up = batch_loss(&mut model, &xp, &ex);
        xp.data_mut()[i] = orig - eps;
        let dn = batch_loss(&mut model, &xp, &ex);
        xp.data_mut()[i] = orig;
        let num = (up - dn) / (2.0 * eps);
        assert!(rel_err(dx.data()[i], num) <= 1e-4, "input {i}");
    }
}

#[test]
fn checkpoint_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = tiny(1);
    let ex = random_examples(&mut rng, 4);
    let refs: Vec<&Example> = ex.iter().collect();
    // move the running statistics away from their defaults
    model.forward(&stack_examples(&refs).unwrap(), Mode::Train).unwrap();
    let ck = model.to_checkpoint();
    let loaded = Detector::from_checkpoint(&ck).unwrap();
    assert_eq!(loaded.to_checkpoint().to_bytes().unwrap(), ck.to_bytes().unwrap());
    assert_eq!(loaded.architecture(), model.architecture());
    assert_eq!(loaded.feature_set(), FeatureSet::Culr);
    let x = stack_examples(&refs).unwrap();
    let (a, b) = (model.infer(&x).unwrap(), loaded.infer(&x).unwrap());
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-4);
    }
    let mut broken = ck.clone();
    broken.tensors.pop();
    assert!(Detector::from_checkpoint(&broken).is_err());
}

#[test]
fn training_is_deterministic_and_validates() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let train_set = random_examples(&mut rng, 9);
    let val_set = random_examples(&mut rng, 4);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        optimizer: Adadelta {
            lr: 1.0,
            ..Adadelta::default()
        },
        ..TrainConfig::default()
    };
    let run = || train(DetectorArchitecture::tiny(), FeatureSet::Ohlc, &train_set, &val_set, &cfg, |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 3);
    let best = a.log.iter().map(|s| s.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.log[a.best_epoch - 1].val_loss, best);
    // validation metrics come from inference mode
    let m = evaluate_examples(&a.last, &val_set, cfg.loss).unwrap();
    assert_eq!(m.loss, a.log[2].val_loss);

    assert!(train(DetectorArchitecture::tiny(), FeatureSet::Ohlc, &train_set, &[], &cfg, |_| {}).is_err());
    assert!(train(DetectorArchitecture::tiny(), FeatureSet::Ohlc, &train_set[..1], &val_set, &cfg, |_| {}).is_err());
    let bad = TrainConfig {
        epochs: 0,
        ..cfg.clone()
    };
    assert!(matches!(bad.validate(), Err(Error::InvalidInput(_))));
}

#[test]
fn window_decoding_rounds_and_clamps() {
    assert_eq!(window_from_norm(1.0), 16);
    assert_eq!(window_from_norm(0.5), 8);
    assert_eq!(window_from_norm(0.0), 5);
    // 7.5 rounds away from zero
    assert_eq!(window_from_norm(7.5 / 16.0), 8);
    assert_eq!(window_from_norm(7.49 / 16.0), 7);
}
