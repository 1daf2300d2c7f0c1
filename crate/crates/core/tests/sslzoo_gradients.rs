//! Consistency-loss gradients against finite differences, and the limit
//! equivalences between method configurations.

use stac_core::seed::rng_from;
use stac_core::sslzoo::{
    compute_targets, loss_given_targets, softmax, unified_loss, ConsistencyConfig, FeatureAug, Method,
    TeacherState, ToyClassifier,
};

const EPS: f64 = 1e-5;

fn batch() -> Vec<Vec<f64>> {
    (0..6)
        .map(|i| {
            let t = i as f64;
            vec![(0.7 * t).sin(), (1.3 * t).cos() * 0.8, 0.25 * t - 0.6]
        })
        .collect()
}

fn state() -> TeacherState {
    TeacherState {
        frozen: Some(ToyClassifier::new(3, 5, 2, 101).unwrap()),
        ema: Some(ToyClassifier::new(3, 5, 2, 102).unwrap()),
        ensemble: vec![vec![0.3, 0.7]; 6],
    }
}

fn config(method: Method) -> ConsistencyConfig {
    let mut cfg = ConsistencyConfig::for_method(method);
    // every example above threshold on two classes
    if cfg.tau > 0.5 {
        cfg.tau = 0.5;
    }
    cfg
}

fn max_rel_error(method: Method) -> f64 {
    let cfg = config(method);
    let student = ToyClassifier::new(3, 5, 2, 7).unwrap();
    let targets = compute_targets(&cfg, &batch(), &student, &state(), &mut rng_from(3)).unwrap();
    assert!(targets.items.iter().any(|t| t.w > 0.0), "{method}: no active terms");
    let (_, analytic) = loss_given_targets(&cfg, &student, &targets);
    let mut probe = student.clone();
    let mut worst = 0.0f64;
    for j in 0..student.theta.len() {
        let orig = student.theta[j];
        probe.theta[j] = orig + EPS;
        let up = loss_given_targets(&cfg, &probe, &targets).0;
        probe.theta[j] = orig - EPS;
        let down = loss_given_targets(&cfg, &probe, &targets).0;
        probe.theta[j] = orig;
        let numeric = (up - down) / (2.0 * EPS);
        let rel = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn every_method_matches_finite_differences() {
    for method in Method::ALL {
        let err = max_rel_error(method);
        assert!(err < 1e-3, "{method}: max rel error {err}");
    }
}

#[test]
fn fixmatch_with_identity_views_is_pseudo_labeling() {
    let student = ToyClassifier::new(3, 5, 2, 11).unwrap();
    for tau in [0.0, 0.55, 0.7, 0.95] {
        let mut fm = ConsistencyConfig::for_method(Method::FixMatch);
        fm.weak_aug = FeatureAug::Identity;
        fm.strong_aug = FeatureAug::Identity;
        fm.tau = tau;
        let mut pl = ConsistencyConfig::for_method(Method::PseudoLabeling);
        pl.tau = tau;
        let a = unified_loss(&fm, &batch(), &student, &TeacherState::default(), &mut rng_from(1)).unwrap();
        let b = unified_loss(&pl, &batch(), &student, &TeacherState::default(), &mut rng_from(2)).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "tau {tau}");
        assert_eq!(a.grad, b.grad);
    }
}

#[test]
fn noisy_student_without_noise_is_bootstrapping_for_one_hot_teacher() {
    let mut teacher = ToyClassifier::new(3, 5, 2, 55).unwrap();
    // saturate the teacher so its soft predictions are exactly one-hot
    teacher.theta.iter_mut().for_each(|v| *v *= 1e6);
    let st = TeacherState {
        frozen: Some(teacher),
        ..TeacherState::default()
    };
    let student = ToyClassifier::new(3, 5, 2, 56).unwrap();
    let mut ns = ConsistencyConfig::for_method(Method::NoisyStudent);
    ns.strong_aug = FeatureAug::Identity;
    let bs = ConsistencyConfig::for_method(Method::Bootstrapping);
    let a = unified_loss(&ns, &batch(), &student, &st, &mut rng_from(1)).unwrap();
    let b = unified_loss(&bs, &batch(), &student, &st, &mut rng_from(1)).unwrap();
    assert_eq!(a.w, b.w);
    assert_eq!(a.q, b.q);
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
}

#[test]
fn uda_without_sharpening_or_threshold_is_soft_consistency() {
    let student = ToyClassifier::new(3, 5, 2, 21).unwrap();
    let mut cfg = ConsistencyConfig::for_method(Method::Uda);
    cfg.temperature = 1.0;
    cfg.tau = 0.0;
    let u = unified_loss(&cfg, &batch(), &student, &TeacherState::default(), &mut rng_from(9)).unwrap();

    // replay the same draws: weak view, then strong view, per example
    let mut rng = rng_from(9);
    let mut reference = 0.0;
    for x in batch() {
        let weak = cfg.weak_aug.apply(&x, &mut rng);
        let strong = cfg.strong_aug.apply(&x, &mut rng);
        let pw = student.probs(&weak);
        let ps = softmax(&student.logits(&strong));
        reference -= pw.iter().zip(&ps).map(|(a, b)| a * b.ln()).sum::<f64>();
    }
    reference /= batch().len() as f64;
    assert!((u.loss - reference).abs() < 1e-12, "{} vs {reference}", u.loss);
}

#[test]
fn every_target_is_a_distribution() {
    let student = ToyClassifier::new(3, 5, 2, 8).unwrap();
    for method in Method::ALL {
        for seed in 0..5 {
            let u = unified_loss(&config(method), &batch(), &student, &state(), &mut rng_from(seed)).unwrap();
            for q in &u.q {
                assert!(q.iter().all(|v| *v >= 0.0), "{method}");
                assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{method}: {q:?}");
            }
        }
    }
}

#[test]
fn vat_direction_beats_random_directions() {
    use stac_core::sslzoo::{kl_divergence, vat_perturbation};
    let model = ToyClassifier::new(3, 8, 2, 31).unwrap();
    let mut rng = rng_from(4);
    let (mut adv_total, mut rand_total) = (0.0, 0.0);
    for i in 0..100 {
        let x = vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 0.02 * i as f64 - 1.0];
        let p0 = model.probs(&x);
        let r = vat_perturbation(&model, &x, 0.3, 1e-6, 2, &mut rng);
        let xa: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a + b).collect();
        adv_total += kl_divergence(&p0, &model.probs(&xa));
        let d = vat_perturbation(&model, &x, 0.3, 1e-6, 0, &mut rng);
        let xr: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        rand_total += kl_divergence(&p0, &model.probs(&xr));
    }
    assert!(adv_total >= rand_total, "{adv_total} < {rand_total}");
}
