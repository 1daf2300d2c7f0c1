//! COCO-style detection metrics: greedy matching, 101-point interpolated AP,
//! and mAP over IoU thresholds 0.50:0.05:0.95.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{GtBox, CLASS_NAMES};
use crate::geometry::{iou, score_order, Detection};

pub const MAX_DETS_PER_IMAGE: usize = 100;
pub const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// TP/FP flag for every detection, aligned with the input order.
///
/// Detections are visited by descending score (ties by index). Each one
/// claims the unmatched same-class ground truth of highest IoU, provided that
/// IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_threshold: f64) -> Vec<bool> {
    let mut flags = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    for i in score_order(dets, |d| d.score) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            flags[i] = true;
        }
    }
    flags
}

/// 101-point interpolated AP from `(score, is_tp)` pairs.
///
/// Pairs are ranked by descending score (ties keep input order). Precision
/// is made non-increasing from the right, then sampled at recall
/// 0, 0.01, ..., 1; recall levels beyond the curve contribute 0. Returns 0
/// when `n_gt` is 0.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 || scored.is_empty() {
        return 0.0;
    }
    let order = score_order(scored, |s| s.0);
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while j < recall.len() && recall[j] < level {
            j += 1;
        }
        if j == recall.len() {
            break;
        }
        sum += precision[j];
    }
    sum / RECALL_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class_id: usize,
    pub n_gt: usize,
    /// AP at each of the ten IoU thresholds.
    pub ap: Vec<f64>,
}

impl ClassResult {
    pub fn map(&self) -> f64 {
        self.ap.iter().sum::<f64>() / self.ap.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassResult>,
    /// Mean over classes with ground truth and over IoU 0.50:0.95.
    pub map: f64,
    /// Mean over classes with ground truth at IoU 0.5.
    pub ap50: f64,
}

fn top_k(dets: &[Detection], k: usize) -> Vec<Detection> {
    score_order(dets, |d| d.score)
        .into_iter()
        .take(k)
        .map(|i| dets[i])
        .collect()
}

pub fn evaluate(dets_by_image: &[Vec<Detection>], gts_by_image: &[Vec<GtBox>], classes: usize) -> EvalResult {
    assert_eq!(dets_by_image.len(), gts_by_image.len(), "one detection list per image");
    let dets: Vec<Vec<Detection>> = dets_by_image
        .iter()
        .map(|d| top_k(d, MAX_DETS_PER_IMAGE))
        .collect();
    let thresholds = iou_thresholds();
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let n_gt: usize = gts_by_image
            .iter()
            .map(|g| g.iter().filter(|b| b.class_id == c).count())
            .sum();
        let ap = thresholds
            .iter()
            .map(|&thr| {
                let mut scored = Vec::new();
                for (d, g) in dets.iter().zip(gts_by_image) {
                    let dc: Vec<Detection> = d.iter().filter(|x| x.class_id == c).copied().collect();
                    let gc: Vec<GtBox> = g.iter().filter(|x| x.class_id == c).copied().collect();
                    let flags = match_detections(&dc, &gc, thr);
                    scored.extend(dc.iter().zip(flags).map(|(x, f)| (x.score, f)));
                }
                average_precision(&scored, n_gt)
            })
            .collect();
        per_class.push(ClassResult {
            class_id: c,
            n_gt,
            ap,
        });
    }
    let counted: Vec<&ClassResult> = per_class.iter().filter(|r| r.n_gt > 0).collect();
    let (map, ap50) = if counted.is_empty() {
        (0.0, 0.0)
    } else {
        let n = counted.len() as f64;
        (
            counted.iter().map(|r| r.map()).sum::<f64>() / n,
            counted.iter().map(|r| r.ap[0]).sum::<f64>() / n,
        )
    };
    EvalResult {
        per_class,
        map,
        ap50,
    }
}

fn class_name(c: usize) -> String {
    CLASS_NAMES
        .get(c)
        .map_or_else(|| format!("class{c}"), |s| (*s).to_string())
}

#[derive(Serialize)]
struct ClassJson {
    n_gt: usize,
    map: f64,
    ap50: f64,
    ap75: f64,
}

#[derive(Serialize)]
struct EvalJson {
    map: f64,
    ap50: f64,
    per_class: BTreeMap<String, ClassJson>,
}

impl EvalResult {
    pub fn to_json(&self) -> String {
        let doc = EvalJson {
            map: self.map,
            ap50: self.ap50,
            per_class: self
                .per_class
                .iter()
                .map(|r| {
                    (
                        class_name(r.class_id),
                        ClassJson {
                            n_gt: r.n_gt,
                            map: r.map(),
                            ap50: r.ap[0],
                            ap75: r.ap[5],
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("eval result serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>6} {:>8} {:>8} {:>8}", "class", "n_gt", "mAP", "AP50", "AP75");
        for r in &self.per_class {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>8.4} {:>8.4} {:>8.4}",
                class_name(r.class_id),
                r.n_gt,
                r.map(),
                r.ap[0],
                r.ap[5]
            );
        }
        let _ = writeln!(s, "{:<10} {:>6} {:>8.4} {:>8.4}", "all", "", self.map, self.ap50);
        s
    }
}
