//! Strong box-aware augmentation: one color op, then one global-geometric or
//! box-level op, then Cutout.
//!
//! Geometric warps use inverse mapping of pixel centers with nearest-neighbor
//! sampling and black fill. Only global geometric ops move target boxes; the
//! warp and the box mapping share one [`AffineTransform`].

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_box, AffineTransform, BBox};
use crate::seed::Rng;

/// Row-major 8-bit RGB image.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub const MIN_SIDE: usize = 8;

    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width < Self::MIN_SIDE || height < Self::MIN_SIDE {
            return Err(Error::Data(format!(
                "image {width}x{height} smaller than {0}x{0}",
                Self::MIN_SIDE
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }
    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    fn map_channels(&self, lut: &[[u8; 256]; 3]) -> ImageBuffer {
        let pixels = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| lut[i % 3][v as usize])
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpFamily {
    Color,
    GlobalGeo,
    BoxGeo,
    Cutout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorOp {
    Brightness,
    Contrast,
    Saturation,
    Solarize,
    Posterize,
    Equalize,
    Autocontrast,
}

impl ColorOp {
    pub const ALL: [ColorOp; 7] = [
        ColorOp::Brightness,
        ColorOp::Contrast,
        ColorOp::Saturation,
        ColorOp::Solarize,
        ColorOp::Posterize,
        ColorOp::Equalize,
        ColorOp::Autocontrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ColorOp::Brightness => "brightness",
            ColorOp::Contrast => "contrast",
            ColorOp::Saturation => "saturation",
            ColorOp::Solarize => "solarize",
            ColorOp::Posterize => "posterize",
            ColorOp::Equalize => "equalize",
            ColorOp::Autocontrast => "autocontrast",
        }
    }

    /// Magnitude ranges follow RandAugment: enhance factors in [0.1, 1.9]
    /// with 1.0 neutral, solarize threshold in [0, 256], posterize bits in
    /// [4, 8]. Equalize and autocontrast take no magnitude.
    pub fn default_range(self) -> (f64, f64) {
        match self {
            ColorOp::Brightness | ColorOp::Contrast | ColorOp::Saturation => (0.1, 1.9),
            ColorOp::Solarize => (0.0, 256.0),
            ColorOp::Posterize => (4.0, 8.0),
            ColorOp::Equalize | ColorOp::Autocontrast => (0.0, 0.0),
        }
    }
}

impl FromStr for ColorOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ColorOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown color op '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoOp {
    TranslateX,
    TranslateY,
    Rotate,
    ShearX,
    ShearY,
}

impl GeoOp {
    pub const ALL: [GeoOp; 5] = [
        GeoOp::TranslateX,
        GeoOp::TranslateY,
        GeoOp::Rotate,
        GeoOp::ShearX,
        GeoOp::ShearY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeoOp::TranslateX => "translate_x",
            GeoOp::TranslateY => "translate_y",
            GeoOp::Rotate => "rotate",
            GeoOp::ShearX => "shear_x",
            GeoOp::ShearY => "shear_y",
        }
    }

    fn is_translation(self) -> bool {
        matches!(self, GeoOp::TranslateX | GeoOp::TranslateY)
    }

    /// Affine map for this op. Translations are fractions of the reference
    /// width/height; rotation and shear are degrees about `(cx, cy)`.
    pub fn transform(self, magnitude: f64, ref_w: f64, ref_h: f64, cx: f64, cy: f64) -> AffineTransform {
        match self {
            GeoOp::TranslateX => AffineTransform::translation(magnitude * ref_w, 0.0),
            GeoOp::TranslateY => AffineTransform::translation(0.0, magnitude * ref_h),
            GeoOp::Rotate => AffineTransform::rotation_about(magnitude, cx, cy),
            GeoOp::ShearX => AffineTransform::shear_x_about(magnitude, cx, cy),
            GeoOp::ShearY => AffineTransform::shear_y_about(magnitude, cx, cy),
        }
    }
}

impl FromStr for GeoOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeoOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown geometric op '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "op", rename_all = "snake_case")]
pub enum OpKind {
    Color(ColorOp),
    GlobalGeo(GeoOp),
    BoxGeo(GeoOp),
    Cutout,
}

/// One sampled augmentation operation with its magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugOp {
    pub kind: OpKind,
    pub magnitude: f64,
}

impl AugOp {
    pub fn family(&self) -> OpFamily {
        match self.kind {
            OpKind::Color(_) => OpFamily::Color,
            OpKind::GlobalGeo(_) => OpFamily::GlobalGeo,
            OpKind::BoxGeo(_) => OpFamily::BoxGeo,
            OpKind::Cutout => OpFamily::Cutout,
        }
    }

    pub fn op_name(&self) -> &'static str {
        match self.kind {
            OpKind::Color(op) => op.name(),
            OpKind::GlobalGeo(op) | OpKind::BoxGeo(op) => op.name(),
            OpKind::Cutout => "cutout",
        }
    }
}

/// Sampling policy for the strong augmentation sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub color_ops: Vec<(ColorOp, (f64, f64))>,
    /// Magnitude ranges of the global geometric ops (translation as a
    /// fraction of image size, rotation/shear in degrees).
    pub global_translate: (f64, f64),
    pub global_rotate_shear: (f64, f64),
    pub box_translate: (f64, f64),
    pub box_rotate_shear: (f64, f64),
    /// Probability of drawing the second op from G rather than B.
    pub geo_mode_prob: f64,
    pub cutout_count_range: (usize, usize),
    /// Cutout side as a fraction of the image's short edge.
    pub cutout_size_range: (f64, f64),
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            color_ops: ColorOp::ALL
                .into_iter()
                .map(|op| (op, op.default_range()))
                .collect(),
            global_translate: (-0.10, 0.10),
            global_rotate_shear: (-30.0, 30.0),
            box_translate: (-0.05, 0.05),
            box_rotate_shear: (-10.0, 10.0),
            geo_mode_prob: 0.5,
            cutout_count_range: (1, 5),
            cutout_size_range: (0.0, 0.20),
        }
    }
}

impl AugPolicy {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            self.global_translate,
            self.global_rotate_shear,
            self.box_translate,
            self.box_rotate_shear,
            self.cutout_size_range,
        ];
        if self.color_ops.is_empty() {
            return Err(Error::Config("augmentation policy has no color ops".into()));
        }
        let bad_range = |(lo, hi): (f64, f64)| !(lo.is_finite() && hi.is_finite() && lo <= hi);
        if ranges.into_iter().any(bad_range) || self.color_ops.iter().any(|(_, r)| bad_range(*r)) {
            return Err(Error::Config("augmentation policy has an invalid range".into()));
        }
        if !(0.0..=1.0).contains(&self.geo_mode_prob) {
            return Err(Error::Config(format!(
                "geo_mode_prob {} outside [0, 1]",
                self.geo_mode_prob
            )));
        }
        let (lo, hi) = self.cutout_count_range;
        if lo > hi || self.cutout_size_range.0 < 0.0 || self.cutout_size_range.1 > 1.0 {
            return Err(Error::Config("invalid cutout ranges".into()));
        }
        Ok(())
    }

    fn geo_range(&self, op: GeoOp, box_level: bool) -> (f64, f64) {
        match (op.is_translation(), box_level) {
            (true, false) => self.global_translate,
            (false, false) => self.global_rotate_shear,
            (true, true) => self.box_translate,
            (false, true) => self.box_rotate_shear,
        }
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draw `[Color, GlobalGeo | BoxGeo, Cutout]`. The Cutout op's magnitude is
/// the number of regions.
pub fn sample_sequence(policy: &AugPolicy, rng: &mut Rng) -> [AugOp; 3] {
    let (cop, crange) = policy.color_ops[rng.random_range(0..policy.color_ops.len())];
    let color = AugOp {
        kind: OpKind::Color(cop),
        magnitude: uniform(rng, crange),
    };

    let use_global = rng.random::<f64>() < policy.geo_mode_prob;
    let gop = GeoOp::ALL[rng.random_range(0..GeoOp::ALL.len())];
    let magnitude = uniform(rng, policy.geo_range(gop, !use_global));
    let geo = AugOp {
        kind: if use_global {
            OpKind::GlobalGeo(gop)
        } else {
            OpKind::BoxGeo(gop)
        },
        magnitude,
    };

    let (lo, hi) = policy.cutout_count_range;
    let cutout = AugOp {
        kind: OpKind::Cutout,
        magnitude: rng.random_range(lo..=hi) as f64,
    };
    [color, geo, cutout]
}

fn luma(rgb: [u8; 3]) -> f64 {
    (299.0 * rgb[0] as f64 + 587.0 * rgb[1] as f64 + 114.0 * rgb[2] as f64) / 1000.0
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn blend(degenerate: f64, v: u8, factor: f64) -> u8 {
    to_u8(degenerate + factor * (v as f64 - degenerate))
}

fn equalize_lut(img: &ImageBuffer) -> [[u8; 256]; 3] {
    let mut lut = [[0u8; 256]; 3];
    for (c, table) in lut.iter_mut().enumerate() {
        let mut hist = [0usize; 256];
        for px in img.pixels.chunks_exact(3) {
            hist[px[c] as usize] += 1;
        }
        let last = hist.iter().rposition(|&h| h > 0).map_or(0, |i| hist[i]);
        let step = (hist.iter().sum::<usize>() - last) / 255;
        let mut n = step / 2;
        for (i, slot) in table.iter_mut().enumerate() {
            if step == 0 {
                *slot = i as u8;
            } else {
                *slot = (n / step).min(255) as u8;
                n += hist[i];
            }
        }
    }
    lut
}

fn autocontrast_lut(img: &ImageBuffer) -> [[u8; 256]; 3] {
    let mut lut = [[0u8; 256]; 3];
    for (c, table) in lut.iter_mut().enumerate() {
        let lo = img.pixels.chunks_exact(3).map(|p| p[c]).min().unwrap_or(0);
        let hi = img.pixels.chunks_exact(3).map(|p| p[c]).max().unwrap_or(255);
        for (i, slot) in table.iter_mut().enumerate() {
            *slot = if hi <= lo {
                i as u8
            } else {
                let scale = 255.0 / (hi - lo) as f64;
                to_u8((i as f64 - lo as f64) * scale)
            };
        }
    }
    lut
}

/// Apply one color op. Box annotations are never affected.
pub fn apply_color(img: &ImageBuffer, op: &AugOp) -> Result<ImageBuffer> {
    let OpKind::Color(cop) = op.kind else {
        return Err(Error::Config(format!(
            "'{}' is not a color op",
            op.op_name()
        )));
    };
    let m = op.magnitude;
    let out = match cop {
        ColorOp::Brightness => {
            let mut out = img.clone();
            out.pixels.iter_mut().for_each(|v| *v = blend(0.0, *v, m));
            out
        }
        ColorOp::Contrast => {
            let n = (img.width * img.height) as f64;
            let mean = img
                .pixels
                .chunks_exact(3)
                .map(|p| luma([p[0], p[1], p[2]]).trunc())
                .sum::<f64>()
                / n;
            let mean = (mean + 0.5).trunc();
            let mut out = img.clone();
            out.pixels.iter_mut().for_each(|v| *v = blend(mean, *v, m));
            out
        }
        ColorOp::Saturation => {
            let mut out = img.clone();
            for px in out.pixels.chunks_exact_mut(3) {
                let gray = luma([px[0], px[1], px[2]]);
                px.iter_mut().for_each(|v| *v = blend(gray, *v, m));
            }
            out
        }
        ColorOp::Solarize => {
            let mut out = img.clone();
            out.pixels.iter_mut().for_each(|v| {
                if (*v as f64) >= m {
                    *v = 255 - *v;
                }
            });
            out
        }
        ColorOp::Posterize => {
            let bits = m.round().clamp(1.0, 8.0) as u32;
            let mask: u8 = !((1u16 << (8 - bits)) - 1) as u8;
            let mut out = img.clone();
            out.pixels.iter_mut().for_each(|v| *v &= mask);
            out
        }
        ColorOp::Equalize => img.map_channels(&equalize_lut(img)),
        ColorOp::Autocontrast => img.map_channels(&autocontrast_lut(img)),
    };
    Ok(out)
}

/// Inverse-map every output pixel center through `t`; nearest-neighbor
/// sampling, black outside the source image.
pub fn warp_image(img: &ImageBuffer, t: &AffineTransform) -> ImageBuffer {
    if t.is_identity() {
        return img.clone();
    }
    let inv = t.inverse();
    let (w, h) = (img.width, img.height);
    let mut out = ImageBuffer {
        width: w,
        height: h,
        pixels: vec![0; w * h * 3],
    };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
            let (sx, sy) = (sx.floor(), sy.floor());
            if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
                out.set(x, y, img.get(sx as usize, sy as usize));
            }
        }
    }
    out
}

/// Global transform for a G op on a `width x height` image, centered on the image.
pub fn global_transform(op: &AugOp, width: usize, height: usize) -> Result<AffineTransform> {
    let OpKind::GlobalGeo(gop) = op.kind else {
        return Err(Error::Config(format!(
            "'{}' is not a global geometric op",
            op.op_name()
        )));
    };
    let (w, h) = (width as f64, height as f64);
    Ok(gop.transform(op.magnitude, w, h, 0.5 * w, 0.5 * h))
}

/// Warp the image and its boxes with one shared transform. Items carry an
/// arbitrary tag (class id, index) that survives with the box; boxes that
/// collapse after clipping are dropped. The transform is returned so callers
/// can check the box mapping against it.
pub fn apply_global_geometric_tagged<T: Copy>(
    img: &ImageBuffer,
    boxes: &[(BBox, T)],
    op: &AugOp,
) -> Result<(ImageBuffer, Vec<(BBox, T)>, AffineTransform)> {
    let t = global_transform(op, img.width, img.height)?;
    let (out, mapped) = warp_with_boxes(img, boxes, &t);
    Ok((out, mapped, t))
}

fn warp_with_boxes<T: Copy>(
    img: &ImageBuffer,
    boxes: &[(BBox, T)],
    t: &AffineTransform,
) -> (ImageBuffer, Vec<(BBox, T)>) {
    let out = warp_image(img, t);
    let (w, h) = (img.width as f64, img.height as f64);
    let mapped = boxes
        .iter()
        .filter_map(|(b, tag)| transform_box(t, b, w, h).map(|nb| (nb, *tag)))
        .collect();
    (out, mapped)
}

pub fn apply_global_geometric(
    img: &ImageBuffer,
    boxes: &[BBox],
    op: &AugOp,
) -> Result<(ImageBuffer, Vec<BBox>)> {
    let tagged: Vec<(BBox, ())> = boxes.iter().map(|b| (*b, ())).collect();
    let (out, mapped, _) = apply_global_geometric_tagged(img, &tagged, op)?;
    Ok((out, mapped.into_iter().map(|(b, _)| b).collect()))
}

/// Horizontal flip as an affine transform (shares the box-mapping path).
pub fn horizontal_flip<T: Copy>(img: &ImageBuffer, boxes: &[(BBox, T)]) -> (ImageBuffer, Vec<(BBox, T)>) {
    warp_with_boxes(img, boxes, &AffineTransform::horizontal_flip(img.width as f64))
}

/// Integer pixel range whose centers fall inside `[lo, hi)`.
fn pixel_span(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let a = (lo - 0.5).ceil().max(0.0) as usize;
    let b = ((hi - 0.5).ceil().max(0.0) as usize).min(limit);
    (a.min(limit), b)
}

/// Warp the content inside each box by a small affine map about the box
/// center; pixels outside every box are left untouched and box coordinates
/// do not change. Each box draws an independent sign for the magnitude.
/// Sources falling outside the box region are filled black.
pub fn apply_box_level(
    img: &ImageBuffer,
    boxes: &[BBox],
    op: &AugOp,
    rng: &mut Rng,
) -> Result<ImageBuffer> {
    let OpKind::BoxGeo(gop) = op.kind else {
        return Err(Error::Config(format!(
            "'{}' is not a box-level op",
            op.op_name()
        )));
    };
    let mut out = img.clone();
    let (w, h) = (img.width as f64, img.height as f64);
    for b in boxes {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let magnitude = sign * op.magnitude;
        if magnitude == 0.0 {
            continue;
        }
        let (cx, cy) = b.center();
        let inv = gop.transform(magnitude, w, h, cx, cy).inverse();
        let (x0, x1) = pixel_span(b.x1(), b.x2(), img.width);
        let (y0, y1) = pixel_span(b.y1(), b.y2(), img.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
                let (sx, sy) = (sx.floor(), sy.floor());
                let inside = sx >= x0 as f64 && sx < x1 as f64 && sy >= y0 as f64 && sy < y1 as f64;
                let rgb = if inside {
                    img.get(sx as usize, sy as usize)
                } else {
                    [0, 0, 0]
                };
                out.set(x, y, rgb);
            }
        }
    }
    Ok(out)
}

pub const CUTOUT_FILL: [u8; 3] = [127, 127, 127];

/// A square Cutout region given by its center and side length in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutoutRegion {
    pub cx: usize,
    pub cy: usize,
    pub side: usize,
}

pub fn sample_cutout_regions(
    width: usize,
    height: usize,
    count: usize,
    size_range: (f64, f64),
    rng: &mut Rng,
) -> Vec<CutoutRegion> {
    let short = width.min(height) as f64;
    (0..count)
        .map(|_| CutoutRegion {
            cx: rng.random_range(0..width),
            cy: rng.random_range(0..height),
            side: (uniform(rng, size_range) * short).round() as usize,
        })
        .collect()
}

pub fn fill_cutout_regions(img: &ImageBuffer, regions: &[CutoutRegion]) -> ImageBuffer {
    let mut out = img.clone();
    for r in regions {
        if r.side == 0 {
            continue;
        }
        let x0 = r.cx.saturating_sub(r.side / 2);
        let y0 = r.cy.saturating_sub(r.side / 2);
        let x1 = (r.cx + r.side - r.side / 2).min(img.width);
        let y1 = (r.cy + r.side - r.side / 2).min(img.height);
        for y in y0..y1 {
            for x in x0..x1 {
                out.set(x, y, CUTOUT_FILL);
            }
        }
    }
    out
}

/// Cutout with `count` regions whose sides are drawn from the policy range.
pub fn apply_cutout(img: &ImageBuffer, count: usize, policy: &AugPolicy, rng: &mut Rng) -> ImageBuffer {
    let regions = sample_cutout_regions(img.width, img.height, count, policy.cutout_size_range, rng);
    fill_cutout_regions(img, &regions)
}

/// Augmentation strength, cumulative as in the ablation over C, C+{G,B},
/// C+{G,B}+Cutout. Every mode starts with a random horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "c")]
    Color,
    #[serde(rename = "c+gb")]
    ColorGeo,
    #[serde(rename = "c+gb+cutout")]
    ColorGeoCutout,
}

impl AugMode {
    pub const ALL: [AugMode; 4] = [
        AugMode::None,
        AugMode::Color,
        AugMode::ColorGeo,
        AugMode::ColorGeoCutout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugMode::None => "none",
            AugMode::Color => "c",
            AugMode::ColorGeo => "c+gb",
            AugMode::ColorGeoCutout => "c+gb+cutout",
        }
    }

    pub fn is_strong(self) -> bool {
        self != AugMode::None
    }
}

impl fmt::Display for AugMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['{', '}', ',', ' '], "");
        match norm.as_str() {
            "none" => Ok(AugMode::None),
            "c" => Ok(AugMode::Color),
            "c+gb" | "c+bg" => Ok(AugMode::ColorGeo),
            "c+gb+cutout" | "c+bg+cutout" => Ok(AugMode::ColorGeoCutout),
            _ => Err(Error::Config(format!("unknown augmentation mode '{s}'"))),
        }
    }
}

/// Result of one full augmentation pass.
#[derive(Debug, Clone)]
pub struct Augmented<T> {
    pub image: ImageBuffer,
    pub boxes: Vec<(BBox, T)>,
    pub flipped: bool,
    pub ops: Vec<AugOp>,
    /// Transform applied to the boxes by the global geometric op, if any.
    pub global_transform: Option<AffineTransform>,
}

/// Flip with probability 0.5, then the strong sequence truncated to `mode`.
pub fn augment<T: Copy>(
    img: &ImageBuffer,
    boxes: &[(BBox, T)],
    mode: AugMode,
    policy: &AugPolicy,
    rng: &mut Rng,
) -> Result<Augmented<T>> {
    let flipped = rng.random::<bool>();
    let (mut image, mut boxes) = if flipped {
        horizontal_flip(img, boxes)
    } else {
        (img.clone(), boxes.to_vec())
    };
    let mut ops = Vec::new();
    let mut global = None;
    if mode.is_strong() {
        let [color, geo, cutout] = sample_sequence(policy, rng);
        image = apply_color(&image, &color)?;
        ops.push(color);
        if matches!(mode, AugMode::ColorGeo | AugMode::ColorGeoCutout) {
            match geo.family() {
                OpFamily::GlobalGeo => {
                    let (im, bx, t) = apply_global_geometric_tagged(&image, &boxes, &geo)?;
                    image = im;
                    boxes = bx;
                    global = Some(t);
                }
                _ => {
                    let plain: Vec<BBox> = boxes.iter().map(|(b, _)| *b).collect();
                    image = apply_box_level(&image, &plain, &geo, rng)?;
                }
            }
            ops.push(geo);
        }
        if mode == AugMode::ColorGeoCutout {
            image = apply_cutout(&image, cutout.magnitude as usize, policy, rng);
            ops.push(cutout);
        }
    }
    Ok(Augmented {
        image,
        boxes,
        flipped,
        ops,
        global_transform: global,
    })
}
