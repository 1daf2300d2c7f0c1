//! Browser bindings for three interactive views: a strong-augmentation
//! preview, an NMS and confidence-threshold explorer, and temperature
//! sharpening. Each binding returns JSON; the plain functions underneath are
//! callable (and tested) natively.

use rand::Rng as _;
use serde::Serialize;
use stac_core::augment::{augment, AugMode, AugPolicy};
use stac_core::data::{gen_synthetic, SynthConfig};
use stac_core::geometry::{nms, BBox, Detection};
use stac_core::seed::{derive_seed, rng_from};
use stac_core::sslzoo::sharpen;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct BoxOut {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    class_id: usize,
}

fn box_out(b: &BBox, class_id: usize) -> BoxOut {
    BoxOut {
        x1: b.x1(),
        y1: b.y1(),
        x2: b.x2(),
        y2: b.y2(),
        class_id,
    }
}

#[derive(Serialize)]
struct Preview {
    width: usize,
    height: usize,
    original: Vec<u8>,
    augmented: Vec<u8>,
    boxes_before: Vec<BoxOut>,
    boxes_after: Vec<BoxOut>,
    flipped: bool,
    ops: Vec<String>,
}

/// One synthetic image and a strongly augmented view of it. Pixels are RGB.
pub fn preview(seed: u64, mode: &str) -> Result<String, String> {
    let mode: AugMode = mode.parse().map_err(|e: stac_core::Error| e.to_string())?;
    let item = gen_synthetic(seed, 1, &SynthConfig::default())
        .map_err(|e| e.to_string())?
        .remove(0);
    let boxes = item.tagged_boxes();
    let mut rng = rng_from(derive_seed(seed, "web.augment"));
    let aug = augment(&item.image, &boxes, mode, &AugPolicy::default(), &mut rng).map_err(|e| e.to_string())?;
    let out = Preview {
        width: item.image.width(),
        height: item.image.height(),
        original: item.image.pixels().to_vec(),
        augmented: aug.image.pixels().to_vec(),
        boxes_before: boxes.iter().map(|(b, c)| box_out(b, *c)).collect(),
        boxes_after: aug.boxes.iter().map(|(b, c)| box_out(b, *c)).collect(),
        flipped: aug.flipped,
        ops: aug
            .ops
            .iter()
            .map(|op| format!("{} {:.3}", op.op_name(), op.magnitude))
            .collect(),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Candidate {
    #[serde(flatten)]
    bbox: BoxOut,
    score: f64,
    kept: bool,
    confident: bool,
}

/// Noisy candidates around the objects of one synthetic image, marked with
/// whether NMS keeps them and whether they clear the confidence threshold.
pub fn explore_nms(seed: u64, per_object: usize, iou_threshold: f64, tau: f64) -> Result<String, String> {
    if !(0.0..=1.0).contains(&iou_threshold) || !(0.0..=1.0).contains(&tau) {
        return Err("thresholds must lie in [0, 1]".into());
    }
    let item = gen_synthetic(seed, 1, &SynthConfig::default())
        .map_err(|e| e.to_string())?
        .remove(0);
    let (w, h) = (item.image.width() as f64, item.image.height() as f64);
    let mut rng = rng_from(derive_seed(seed, "web.nms"));
    let mut cands = Vec::new();
    for g in &item.gt {
        for _ in 0..per_object {
            let s = 0.25 * g.bbox.width().min(g.bbox.height());
            let mut j = || rng.random_range(-s..=s);
            let moved = BBox::new(g.bbox.x1() + j(), g.bbox.y1() + j(), g.bbox.x2() + j(), g.bbox.y2() + j());
            let Some(b) = moved.ok().and_then(|b| b.clip(w, h, 1.0)) else {
                continue;
            };
            let class_id = if rng.random_bool(0.85) { g.class_id } else { rng.random_range(0..3) };
            cands.push(Detection::new(b, class_id, rng.random_range(0.05..1.0)));
        }
    }
    let kept = nms(&cands, iou_threshold);
    let out: Vec<Candidate> = cands
        .iter()
        .map(|d| Candidate {
            bbox: box_out(&d.bbox, d.class_id),
            score: d.score,
            kept: kept.contains(d),
            confident: d.score >= tau,
        })
        .collect();
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Temperature sharpening of a distribution; inputs are renormalized first.
pub fn sharpen_distribution(p: &[f64], temperature: f64) -> Result<Vec<f64>, String> {
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err("probabilities must be positive".into());
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err("temperature must be positive".into());
    }
    let z: f64 = p.iter().sum();
    let q: Vec<f64> = p.iter().map(|v| v / z).collect();
    Ok(sharpen(&q, temperature))
}

#[wasm_bindgen(js_name = augmentPreview)]
pub fn augment_preview_js(seed: u32, mode: &str) -> Result<String, JsValue> {
    preview(seed.into(), mode).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = exploreNms)]
pub fn explore_nms_js(seed: u32, per_object: u32, iou_threshold: f64, tau: f64) -> Result<String, JsValue> {
    explore_nms(seed.into(), per_object as usize, iou_threshold, tau).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = sharpen)]
pub fn sharpen_js(p: Vec<f64>, temperature: f64) -> Result<Vec<f64>, JsValue> {
    sharpen_distribution(&p, temperature).map_err(|e| JsValue::from_str(&e))
}
