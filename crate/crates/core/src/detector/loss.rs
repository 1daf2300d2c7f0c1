use serde::{Deserialize, Serialize};

use super::anchors::{AnchorLabel, AnchorTargets};
use super::layers::sigmoid;
use super::Predictions;

/// Components of the anchor loss. `total = cls_loss + lambda * reg_loss`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub n_cls: usize,
    pub n_reg: usize,
}

/// Loss gradients with respect to the raw head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub obj: Vec<f64>,
    pub cls: Vec<f64>,
    pub reg: Vec<[f64; 4]>,
}

impl OutputGrads {
    pub fn zeros(n: usize, classes: usize) -> Self {
        Self {
            obj: vec![0.0; n],
            cls: vec![0.0; n * classes],
            reg: vec![[0.0; 4]; n],
        }
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn smooth_l1(d: f64) -> (f64, f64) {
    // transition at beta = 1
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Anchor loss with separately weighted terms, plus its output gradient.
///
/// Over the sampled anchors: binary cross-entropy on objectness, and K-way
/// cross-entropy on the class logits of positive anchors, both divided by
/// `N_cls` (the sample size). Smooth-L1 on the regression of positive
/// anchors, divided by `max(N_reg, 1)`.
pub fn weighted_loss_with_grad(
    preds: &Predictions,
    targets: &AnchorTargets,
    sampled: &[usize],
    cls_weight: f64,
    reg_weight: f64,
) -> (LossBreakdown, OutputGrads) {
    let k = preds.classes;
    let mut grads = OutputGrads::zeros(preds.len(), k);
    let n_cls = sampled.len();
    let n_reg = sampled
        .iter()
        .filter(|&&i| targets.labels[i].is_positive())
        .count();
    if n_cls == 0 {
        return (LossBreakdown::default(), grads);
    }
    let inv_cls = 1.0 / n_cls as f64;
    let inv_reg = 1.0 / n_reg.max(1) as f64;

    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    for &i in sampled {
        let o = preds.obj_logits[i];
        match targets.labels[i] {
            AnchorLabel::Negative => {
                cls_sum += softplus(o);
                grads.obj[i] = cls_weight * inv_cls * sigmoid(o);
            }
            AnchorLabel::Positive { class_id, t_star } => {
                cls_sum += softplus(-o);
                grads.obj[i] = cls_weight * inv_cls * (sigmoid(o) - 1.0);

                let logits = &preds.cls_logits[i * k..(i + 1) * k];
                let logp = log_softmax(logits);
                cls_sum -= logp[class_id];
                for (c, lp) in logp.iter().enumerate() {
                    let target = if c == class_id { 1.0 } else { 0.0 };
                    grads.cls[i * k + c] = cls_weight * inv_cls * (lp.exp() - target);
                }

                for j in 0..4 {
                    let (v, d) = smooth_l1(preds.reg[i][j] - t_star[j]);
                    reg_sum += v;
                    grads.reg[i][j] = reg_weight * inv_reg * d;
                }
            }
            AnchorLabel::Ignore => {}
        }
    }
    let cls_loss = cls_sum * inv_cls;
    let reg_loss = reg_sum * inv_reg;
    (
        LossBreakdown {
            cls_loss,
            reg_loss,
            total: cls_weight * cls_loss + reg_weight * reg_loss,
            n_cls,
            n_reg,
        },
        grads,
    )
}

pub fn supervised_loss(preds: &Predictions, targets: &AnchorTargets, sampled: &[usize], lambda: f64) -> LossBreakdown {
    weighted_loss_with_grad(preds, targets, sampled, 1.0, lambda).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(obj: Vec<f64>, cls: Vec<f64>, reg: Vec<[f64; 4]>, classes: usize) -> Predictions {
        Predictions {
            classes,
            obj_logits: obj,
            cls_logits: cls,
            reg,
        }
    }

    #[test]
    fn single_negative_at_half_is_ln2() {
        let p = preds(vec![0.0], vec![0.0, 0.0], vec![[0.0; 4]], 2);
        let t = AnchorTargets::all_negative(1);
        let l = supervised_loss(&p, &t, &[0], 1.0);
        assert!((l.cls_loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(l.reg_loss, 0.0);
        assert_eq!((l.n_cls, l.n_reg), (1, 0));
    }

    #[test]
    fn perfect_predictions_have_near_zero_loss() {
        let t_star = [0.1, -0.2, 0.3, 0.05];
        let targets = AnchorTargets {
            labels: vec![
                AnchorLabel::Positive { class_id: 1, t_star },
                AnchorLabel::Negative,
                AnchorLabel::Ignore,
            ],
            matched: vec![Some(0), None, None],
        };
        let p = preds(
            vec![30.0, -30.0, 0.0],
            vec![-30.0, 30.0, 0.0, 0.0, 0.0, 0.0],
            vec![t_star, [0.0; 4], [5.0; 4]],
            2,
        );
        let l = supervised_loss(&p, &targets, &[0, 1], 1.0);
        assert!(l.total < 1e-3, "{l:?}");
    }

    #[test]
    fn no_positives_means_no_regression() {
        let p = preds(vec![0.3, -0.1], vec![0.0; 6], vec![[9.0; 4]; 2], 3);
        let t = AnchorTargets::all_negative(2);
        let (l, g) = weighted_loss_with_grad(&p, &t, &[0, 1], 1.0, 1.0);
        assert_eq!(l.reg_loss, 0.0);
        assert_eq!(l.n_reg, 0);
        assert!(g.reg.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn total_is_cls_plus_lambda_reg() {
        let targets = AnchorTargets {
            labels: vec![AnchorLabel::Positive {
                class_id: 0,
                t_star: [0.5, 0.5, 0.0, 0.0],
            }],
            matched: vec![Some(0)],
        };
        let p = preds(vec![0.2], vec![0.1, 0.4], vec![[0.0; 4]], 2);
        let l = supervised_loss(&p, &targets, &[0], 2.5);
        assert!((l.total - (l.cls_loss + 2.5 * l.reg_loss)).abs() < 1e-15);
        assert!((l.reg_loss - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
