//! Axis-aligned boxes, IoU, greedy per-class NMS and affine box mapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in absolute pixel coordinates.
///
/// Always satisfies `x1 < x2`, `y1 < y2` with finite coordinates; the
/// constructor rejects anything else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::Geometry(format!(
                "invalid box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// COCO `[x, y, w, h]` to corner form.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Geometry(format!(
                "non-positive box size w={w} h={h}"
            )));
        }
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x1, self.y1),
            (self.x2, self.y1),
            (self.x2, self.y2),
            (self.x1, self.y2),
        ]
    }

    /// True when `other` lies inside `self` (boundaries inclusive).
    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Clip to `[0, w] x [0, h]`; `None` when either side drops below `min_side`.
    pub fn clip(&self, image_w: f64, image_h: f64, min_side: f64) -> Option<BBox> {
        let x1 = self.x1.clamp(0.0, image_w);
        let y1 = self.y1.clamp(0.0, image_h);
        let x2 = self.x2.clamp(0.0, image_w);
        let y2 = self.y2.clamp(0.0, image_h);
        if x2 - x1 < min_side || y2 - y1 < min_side {
            return None;
        }
        BBox::new(x1, y1, x2, y2).ok()
    }
}

/// A scored, classed box produced by inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&score), "score {score} outside [0, 1]");
        Self {
            bbox,
            class_id,
            score,
        }
    }
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Stable descending-score order; equal scores keep input order.
pub(crate) fn score_order<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&i, &j| {
        score(&items[j])
            .partial_cmp(&score(&items[i]))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Greedy per-class non-maximum suppression.
///
/// Detections are visited by descending score (ties: lower input index
/// first). A detection is dropped when it overlaps an already kept detection
/// of the same class with IoU strictly greater than `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let order = score_order(dets, |d| d.score);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for idx in order {
        let cand = &dets[idx];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(&k.bbox, &cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

/// 2x3 affine map `[a b tx; c d ty]` acting on pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let t = Self { m };
        if !m.iter().flatten().all(|v| v.is_finite()) || t.det().abs() <= 1e-9 {
            return Err(Error::Geometry(format!("singular affine transform {m:?}")));
        }
        Ok(t)
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// Counter-clockwise rotation in image coordinates (y pointing down)
    /// about `(cx, cy)`.
    pub fn rotation_about(degrees: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let linear = Self {
            m: [[c, s, 0.0], [-s, c, 0.0]],
        };
        Self::about(linear, cx, cy)
    }

    /// `x' = x + tan(angle) * y` about `(cx, cy)`.
    pub fn shear_x_about(degrees: f64, cx: f64, cy: f64) -> Self {
        let k = degrees.to_radians().tan();
        Self::about(
            Self {
                m: [[1.0, k, 0.0], [0.0, 1.0, 0.0]],
            },
            cx,
            cy,
        )
    }

    /// `y' = y + tan(angle) * x` about `(cx, cy)`.
    pub fn shear_y_about(degrees: f64, cx: f64, cy: f64) -> Self {
        let k = degrees.to_radians().tan();
        Self::about(
            Self {
                m: [[1.0, 0.0, 0.0], [k, 1.0, 0.0]],
            },
            cx,
            cy,
        )
    }

    /// Mirror across the vertical line `x = width / 2`.
    pub fn horizontal_flip(width: f64) -> Self {
        Self {
            m: [[-1.0, 0.0, width], [0.0, 1.0, 0.0]],
        }
    }

    fn about(linear: Self, cx: f64, cy: f64) -> Self {
        Self::translation(cx, cy)
            .then_after(&linear)
            .then_after(&Self::translation(-cx, -cy))
    }

    /// `self ∘ inner`: apply `inner` first, then `self`.
    pub fn then_after(&self, inner: &Self) -> Self {
        let a = &self.m;
        let b = &inner.m;
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                let mut v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
                if c == 2 {
                    v += a[r][2];
                }
                m[r][c] = v;
            }
        }
        Self { m }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        self.m
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Self {
        let m = &self.m;
        let det = self.det();
        let a = m[1][1] / det;
        let b = -m[0][1] / det;
        let c = -m[1][0] / det;
        let d = m[0][0] / det;
        let tx = -(a * m[0][2] + b * m[1][2]);
        let ty = -(c * m[0][2] + d * m[1][2]);
        Self {
            m: [[a, b, tx], [c, d, ty]],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// Axis-aligned hull of the four mapped corners, before any clipping.
pub fn transform_hull(t: &AffineTransform, b: &BBox) -> BBox {
    let mut x1 = f64::INFINITY;
    let mut y1 = f64::INFINITY;
    let mut x2 = f64::NEG_INFINITY;
    let mut y2 = f64::NEG_INFINITY;
    for (x, y) in b.corners() {
        let (u, v) = t.apply(x, y);
        x1 = x1.min(u);
        y1 = y1.min(v);
        x2 = x2.max(u);
        y2 = y2.max(v);
    }
    // Non-singular transforms map a box of positive area to a hull of positive area.
    BBox { x1, y1, x2, y2 }
}

/// Map a box through `t`, take the corner hull and clip it to the image.
/// Returns `None` when the clipped hull is thinner than one pixel.
pub fn transform_box(t: &AffineTransform, b: &BBox, image_w: f64, image_h: f64) -> Option<BBox> {
    if t.is_identity() {
        return b.clip(image_w, image_h, 1.0);
    }
    transform_hull(t, b).clip(image_w, image_h, 1.0)
}
