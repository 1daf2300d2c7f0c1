use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::seed::Rng;

/// Largest allowed log-scale regression before decoding, ln(1000 / 16).
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// Anchors on a regular grid, ordered row-major over cells and then by size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub image_w: usize,
    pub image_h: usize,
    pub stride: usize,
    pub sizes: Vec<f64>,
    pub cols: usize,
    pub rows: usize,
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn per_cell(&self) -> usize {
        self.sizes.len()
    }
}

/// Square anchors of each size centered on every stride cell.
pub fn build_anchors(image_w: usize, image_h: usize, stride: usize, sizes: &[f64]) -> Result<AnchorGrid> {
    if sizes.is_empty() || sizes.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Config("anchor sizes must be non-empty and positive".into()));
    }
    if stride == 0 || image_w == 0 || image_h == 0 {
        return Err(Error::Config("stride and image size must be positive".into()));
    }
    let cols = image_w.div_ceil(stride);
    let rows = image_h.div_ceil(stride);
    let mut anchors = Vec::with_capacity(cols * rows * sizes.len());
    for r in 0..rows {
        for c in 0..cols {
            let cx = (c * stride) as f64 + 0.5 * stride as f64;
            let cy = (r * stride) as f64 + 0.5 * stride as f64;
            for &s in sizes {
                anchors.push(BBox::from_center(cx, cy, s, s)?);
            }
        }
    }
    Ok(AnchorGrid {
        image_w,
        image_h,
        stride,
        sizes: sizes.to_vec(),
        cols,
        rows,
        anchors,
    })
}

/// Center/size offsets of `gt` relative to `anchor`.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_box`]. Log-scales are clamped to keep the result finite.
pub fn decode_box(anchor: &BBox, t: &[f64; 4]) -> Result<BBox> {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + t[0] * aw;
    let cy = ay + t[1] * ah;
    let w = aw * t[2].min(MAX_LOG_SCALE).exp();
    let h = ah * t[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Negative,
    Ignore,
    Positive { class_id: usize, t_star: [f64; 4] },
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive { .. })
    }
}

/// Per-anchor training targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
    /// Index of the matched box for positive anchors.
    pub matched: Vec<Option<usize>>,
}

impl AnchorTargets {
    pub fn all_negative(n: usize) -> Self {
        Self {
            labels: vec![AnchorLabel::Negative; n],
            matched: vec![None; n],
        }
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_positive())
            .map(|(i, _)| i)
    }

    pub fn num_positive(&self) -> usize {
        self.positives().count()
    }

    pub fn num_negative(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Negative))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.7,
            neg_iou: 0.3,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::Config(format!(
                "anchor thresholds need 0 < neg_iou < pos_iou <= 1, got neg={} pos={}",
                self.neg_iou, self.pos_iou
            )));
        }
        Ok(())
    }
}

/// Label every anchor against `boxes` (box, class).
///
/// An anchor is positive when its best IoU reaches `pos_iou`, or when it is
/// the best anchor for some box; negative when its best IoU is at most
/// `neg_iou`; ignored otherwise. IoU uses anchors clipped to the image.
/// Ties go to the lowest box index and, for the per-box best anchor, the
/// lowest anchor index.
pub fn assign_anchors(grid: &AnchorGrid, boxes: &[(BBox, usize)], cfg: &AssignConfig) -> AnchorTargets {
    let n = grid.len();
    if boxes.is_empty() {
        return AnchorTargets::all_negative(n);
    }
    let (w, h) = (grid.image_w as f64, grid.image_h as f64);
    let clipped: Vec<Option<BBox>> = grid.anchors.iter().map(|a| a.clip(w, h, 1e-9)).collect();
    let ious: Vec<Vec<f64>> = clipped
        .iter()
        .map(|a| match a {
            Some(a) => boxes.iter().map(|(b, _)| iou(a, b)).collect(),
            None => vec![0.0; boxes.len()],
        })
        .collect();

    let mut labels = vec![AnchorLabel::Ignore; n];
    let mut matched = vec![None; n];
    let positive = |i: usize, g: usize| AnchorLabel::Positive {
        class_id: boxes[g].1,
        t_star: encode_box(&grid.anchors[i], &boxes[g].0),
    };

    for i in 0..n {
        let (best_g, best) = ious[i]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (g, &v)| if v > acc.1 { (g, v) } else { acc });
        if best >= cfg.pos_iou {
            labels[i] = positive(i, best_g);
            matched[i] = Some(best_g);
        } else if best <= cfg.neg_iou {
            labels[i] = AnchorLabel::Negative;
        }
    }

    for g in 0..boxes.len() {
        let (best_i, best) = (0..n)
            .map(|i| (i, ious[i][g]))
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        if best > 0.0 && !labels[best_i].is_positive() {
            labels[best_i] = positive(best_i, g);
            matched[best_i] = Some(g);
        }
    }
    AnchorTargets { labels, matched }
}

/// Anchor mini-batch: up to `cap` anchors, at most half positive, the rest
/// negative. Ignored anchors are never drawn. Returned indices are sorted.
pub fn sample_anchors(targets: &AnchorTargets, cap: usize, rng: &mut Rng) -> Vec<usize> {
    let mut pos: Vec<usize> = targets.positives().collect();
    let mut neg: Vec<usize> = targets
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, AnchorLabel::Negative))
        .map(|(i, _)| i)
        .collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(cap / 2);
    neg.truncate(cap.saturating_sub(pos.len()));
    let mut out = pos;
    out.extend(neg);
    out.sort_unstable();
    out
}
