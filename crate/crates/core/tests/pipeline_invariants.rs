//! Training-loop invariants on small synthetic runs.

use stac_core::augment::{AugMode, ImageBuffer};
use stac_core::data::{gen_synthetic, AnnotatedImage, SynthConfig};
use stac_core::detector::{checkpoint, AssignConfig, DetectorConfig, DetectorModel};
use stac_core::geometry::{transform_box, AffineTransform, Detection};
use stac_core::pipeline::{
    evaluate_model, generate_pseudo_labels, run_stac, train_student, train_teacher, TrainConfig, UnlabeledTrace,
};
use stac_core::pseudolabel::PseudoLabelSet;

fn model_cfg() -> DetectorConfig {
    DetectorConfig {
        assign: AssignConfig {
            pos_iou: 0.5,
            neg_iou: 0.3,
        },
        ..DetectorConfig::default()
    }
}

fn data() -> (Vec<AnnotatedImage>, Vec<AnnotatedImage>) {
    let all = gen_synthetic(3, 12, &SynthConfig::default()).unwrap();
    let (lab, unl) = all.split_at(4);
    (lab.to_vec(), unl.to_vec())
}

fn cfg(steps: usize, mode: AugMode) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        aug_mode: mode,
        seed: 5,
        ..TrainConfig::default()
    }
}

/// Ground truth reused as pseudo labels, so every image has boxes to move.
fn oracle_pseudo(unl: &[AnnotatedImage]) -> Vec<PseudoLabelSet> {
    unl.iter()
        .map(|a| PseudoLabelSet {
            image_id: a.id,
            boxes: a.gt.iter().map(|g| Detection::new(g.bbox, g.class_id, 0.95)).collect(),
            teacher_tag: "gt".into(),
            tau: 0.9,
        })
        .collect()
}

#[test]
fn zero_unlabeled_weight_reproduces_supervised_training() {
    let (lab, unl) = data();
    let imgs: Vec<&ImageBuffer> = unl.iter().map(|a| &a.image).collect();
    for mode in [AugMode::None, AugMode::ColorGeoCutout] {
        let c = TrainConfig {
            lambda_u: 0.0,
            ..cfg(25, mode)
        };
        let (sup, sup_log) = train_teacher(&lab, &model_cfg(), &c).unwrap();
        let (stu, stu_log) = train_student(&lab, &imgs, &oracle_pseudo(&unl), &model_cfg(), &c, None).unwrap();
        assert_eq!(checkpoint::to_bytes(&sup, None), checkpoint::to_bytes(&stu, None), "{mode}");
        for (a, b) in sup_log.iter().zip(&stu_log) {
            assert_eq!(a.l_s.to_bits(), b.l_s.to_bits());
            assert_eq!(b.total.to_bits(), b.l_s.to_bits());
        }
    }
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let (lab, unl) = data();
    let imgs: Vec<&ImageBuffer> = unl.iter().map(|a| &a.image).collect();
    let c = TrainConfig {
        lambda_u: 1.7,
        ..cfg(30, AugMode::ColorGeoCutout)
    };
    let (_, log) = train_student(&lab, &imgs, &oracle_pseudo(&unl), &model_cfg(), &c, None).unwrap();
    assert_eq!(log.len(), 30);
    assert!(log.iter().any(|r| r.l_u > 0.0));
    for r in &log {
        assert!((r.total - (r.l_s + 1.7 * r.l_u)).abs() <= 1e-9, "step {}", r.step);
    }
}

#[test]
fn pseudo_boxes_follow_the_sampled_global_transform() {
    let (lab, unl) = data();
    let imgs: Vec<&ImageBuffer> = unl.iter().map(|a| &a.image).collect();
    let pseudo = oracle_pseudo(&unl);
    let mut checked = 0;
    let mut hook = |t: &UnlabeledTrace<'_>| {
        let (w, h) = (64.0, 64.0);
        let mut expect: Vec<_> = t.stored.iter().map(|d| (d.bbox, d.class_id)).collect();
        if t.augmented.flipped {
            let f = AffineTransform::horizontal_flip(w);
            expect = expect
                .into_iter()
                .filter_map(|(b, c)| transform_box(&f, &b, w, h).map(|nb| (nb, c)))
                .collect();
        }
        if let Some(g) = &t.augmented.global_transform {
            expect = expect
                .into_iter()
                .filter_map(|(b, c)| transform_box(g, &b, w, h).map(|nb| (nb, c)))
                .collect();
            checked += 1;
        }
        assert_eq!(t.augmented.boxes, expect, "step {}", t.step);
    };
    let c = cfg(40, AugMode::ColorGeoCutout);
    train_student(&lab, &imgs, &pseudo, &model_cfg(), &c, Some(&mut hook)).unwrap();
    assert!(checked > 5, "only {checked} global ops sampled");
}

#[test]
fn empty_pseudo_sets_are_allowed() {
    let (lab, unl) = data();
    let imgs: Vec<&ImageBuffer> = unl.iter().map(|a| &a.image).collect();
    let mut pseudo = oracle_pseudo(&unl);
    pseudo.iter_mut().for_each(|p| p.boxes.clear());
    let (_, log) = train_student(&lab, &imgs, &pseudo, &model_cfg(), &cfg(5, AugMode::None), None).unwrap();
    assert!(log.iter().all(|r| r.l_u.is_finite()));
}

#[test]
fn stac_leaves_teacher_untouched_and_is_deterministic() {
    let (lab, unl) = data();
    let imgs: Vec<&ImageBuffer> = unl.iter().map(|a| &a.image).collect();
    let (teacher, _) = train_teacher(&lab, &model_cfg(), &cfg(20, AugMode::None)).unwrap();
    let before = checkpoint::to_bytes(&teacher, None);
    let c = TrainConfig {
        tau: 0.0,
        ..cfg(10, AugMode::ColorGeoCutout)
    };
    let (a, _) = run_stac(&lab, &imgs, &teacher, &model_cfg(), &c).unwrap();
    let (b, _) = run_stac(&lab, &imgs, &teacher, &model_cfg(), &c).unwrap();
    assert_eq!(checkpoint::to_bytes(&teacher, None), before);
    assert_eq!(checkpoint::to_bytes(&a, None), checkpoint::to_bytes(&b, None));
    let ea = evaluate_model(&a, &unl, 0.5, 1).unwrap();
    let eb = evaluate_model(&b, &unl, 0.5, 2).unwrap();
    assert_eq!(ea.to_json(), eb.to_json());
}

#[test]
fn mismatched_teacher_is_rejected() {
    let (lab, unl) = data();
    let imgs: Vec<&ImageBuffer> = unl.iter().map(|a| &a.image).collect();
    let other = DetectorConfig {
        anchor_sizes: vec![10.0],
        ..model_cfg()
    };
    let teacher = DetectorModel::new(other, 1).unwrap();
    assert!(run_stac(&lab, &imgs, &teacher, &model_cfg(), &cfg(2, AugMode::None)).is_err());
}

#[test]
fn pseudo_label_generation_respects_tau_and_jobs() {
    let (lab, unl) = data();
    let (teacher, _) = train_teacher(&lab, &model_cfg(), &cfg(30, AugMode::None)).unwrap();
    let imgs: Vec<(u64, &ImageBuffer)> = unl.iter().map(|a| (a.id, &a.image)).collect();
    let one = generate_pseudo_labels(&teacher, &imgs, 0.2, 0.5, "t", 1).unwrap();
    let three = generate_pseudo_labels(&teacher, &imgs, 0.2, 0.5, "t", 3).unwrap();
    assert_eq!(one, three);
    assert!(one.iter().flat_map(|p| &p.boxes).all(|d| d.score >= 0.2));
    let strict = generate_pseudo_labels(&teacher, &imgs, 0.6, 0.5, "t", 1).unwrap();
    for (lo, hi) in one.iter().zip(&strict) {
        let kept: Vec<_> = lo.boxes.iter().filter(|d| d.score >= 0.6).copied().collect();
        assert_eq!(kept, hi.boxes);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (lab, _) = data();
    assert!(train_teacher(&lab, &model_cfg(), &cfg(0, AugMode::None)).is_err());
    let bad = TrainConfig {
        tau: 1.5,
        ..cfg(1, AugMode::None)
    };
    assert!(train_teacher(&lab, &model_cfg(), &bad).is_err());
    assert!(train_teacher(&[], &model_cfg(), &cfg(1, AugMode::None)).is_err());
}
