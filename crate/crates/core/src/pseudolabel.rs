//! Teacher inference and pseudo-label construction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::ImageBuffer;
use crate::data::{CocoFile, GtBox, ImageRecord};
use crate::detector::{assign_anchors, decode_box, AnchorGrid, AnchorTargets, AssignConfig, DetectorModel};
use crate::error::{Error, Result};
use crate::eval::match_detections;
use crate::geometry::{nms, Detection};

/// Confident teacher detections for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub image_id: u64,
    pub boxes: Vec<Detection>,
    pub teacher_tag: String,
    pub tau: f64,
}

/// Test-time inference: decode every anchor, score each class as
/// objectness times class probability, drop scores below `score_floor`,
/// then per-class NMS. Output is sorted by descending score.
pub fn infer(model: &DetectorModel, img: &ImageBuffer, nms_threshold: f64, score_floor: f64) -> Result<Vec<Detection>> {
    let preds = model.forward(img)?;
    let (w, h) = (img.width() as f64, img.height() as f64);
    let mut cands = Vec::new();
    for (i, anchor) in model.grid().anchors.iter().enumerate() {
        let obj = preds.objectness(i);
        if obj <= 0.0 || obj < score_floor {
            continue;
        }
        let probs = preds.class_probs(i);
        let Some(bbox) = decode_box(anchor, &preds.reg[i])?.clip(w, h, 1.0) else {
            continue;
        };
        for (c, p) in probs.into_iter().enumerate() {
            let score = obj * p;
            if score > 0.0 && score >= score_floor {
                cands.push(Detection::new(bbox, c, score));
            }
        }
    }
    Ok(nms(&cands, nms_threshold))
}

/// Keep detections scoring at least `tau`.
pub fn filter_by_confidence(image_id: u64, teacher_tag: &str, dets: &[Detection], tau: f64) -> PseudoLabelSet {
    PseudoLabelSet {
        image_id,
        boxes: dets.iter().filter(|d| d.score >= tau).copied().collect(),
        teacher_tag: teacher_tag.to_string(),
        tau,
    }
}

/// Anchor targets against pseudo boxes. Anchors near no pseudo box are
/// background.
pub fn assign_pseudo(grid: &AnchorGrid, boxes: &[Detection], cfg: &AssignConfig) -> AnchorTargets {
    let tagged: Vec<_> = boxes.iter().map(|d| (d.bbox, d.class_id)).collect();
    assign_anchors(grid, &tagged, cfg)
}

/// Matched pseudo boxes, pseudo box count and ground-truth count, with
/// class-aware greedy matching at `iou_threshold`.
pub fn match_counts(pl: &[Detection], gt: &[GtBox], iou_threshold: f64) -> (usize, usize, usize) {
    let tp = match_detections(pl, gt, iou_threshold)
        .into_iter()
        .filter(|&f| f)
        .count();
    (tp, pl.len(), gt.len())
}

/// `(precision, recall)` of pseudo labels against ground truth. An empty
/// pseudo set has precision 1; an empty ground truth has recall 1.
pub fn pseudo_quality(pl: &[Detection], gt: &[GtBox], iou_threshold: f64) -> (f64, f64) {
    ratios(match_counts(pl, gt, iou_threshold))
}

fn ratios((tp, n_pl, n_gt): (usize, usize, usize)) -> (f64, f64) {
    let p = if n_pl == 0 { 1.0 } else { tp as f64 / n_pl as f64 };
    let r = if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 };
    (p, r)
}

/// Precision and recall pooled over many images.
pub fn pooled_quality<'a, I>(pairs: I, iou_threshold: f64) -> (f64, f64)
where
    I: IntoIterator<Item = (&'a [Detection], &'a [GtBox])>,
{
    let (mut tp, mut n_pl, mut n_gt) = (0, 0, 0);
    for (pl, gt) in pairs {
        let (a, b, c) = match_counts(pl, gt, iou_threshold);
        tp += a;
        n_pl += b;
        n_gt += c;
    }
    ratios((tp, n_pl, n_gt))
}

/// Write pseudo labels as COCO JSON with per-box scores. `images` gives the
/// file name and size of every set, in the same order.
pub fn write_pseudo_labels(
    path: &Path,
    sets: &[PseudoLabelSet],
    images: &[(String, usize, usize)],
    classes: usize,
) -> Result<()> {
    if sets.len() != images.len() {
        return Err(Error::Config("one image entry per pseudo-label set".into()));
    }
    let mut doc = CocoFile::from_rows(
        sets.iter().zip(images).map(|(s, (name, w, h))| {
            let boxes = s.boxes.iter().map(|d| (d.bbox, d.class_id, Some(d.score))).collect();
            (s.image_id, name.clone(), *w, *h, boxes)
        }),
        classes,
    );
    doc.tau = sets.first().map(|s| s.tau);
    doc.teacher_tag = sets.first().map(|s| s.teacher_tag.clone());
    doc.write(path)
}

/// Read a pseudo-label file back into image records plus per-image sets.
pub fn read_pseudo_labels(path: &Path) -> Result<(Vec<ImageRecord>, Vec<PseudoLabelSet>)> {
    let doc = CocoFile::read(path)?;
    let tau = doc
        .tau
        .ok_or_else(|| Error::Data(format!("{}: missing 'tau'", path.display())))?;
    let tag = doc.teacher_tag.clone().unwrap_or_default();
    let base = path.parent().unwrap_or(Path::new("."));
    let records = doc.records(base)?;
    let mut sets = Vec::with_capacity(records.len());
    for r in &records {
        let mut boxes = Vec::with_capacity(r.boxes.len());
        for b in &r.boxes {
            let score = b.score.ok_or_else(|| {
                Error::Data(format!("annotation id {}: pseudo label without score", b.annotation_id))
            })?;
            if score < tau {
                return Err(Error::Data(format!(
                    "annotation id {}: score {score} below tau {tau}",
                    b.annotation_id
                )));
            }
            boxes.push(Detection::new(b.bbox, b.class_id, score));
        }
        sets.push(PseudoLabelSet {
            image_id: r.id,
            boxes,
            teacher_tag: tag.clone(),
            tau,
        });
    }
    Ok((records, sets))
}
