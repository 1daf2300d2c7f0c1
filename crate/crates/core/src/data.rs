//! Synthetic shapes benchmark, labeled-fraction splits and COCO-style
//! annotation files with binary PPM images.
//!
//! Category ids in the JSON files are `class_id + 1`; bounding boxes are
//! stored as `[x, y, w, h]` in pixels. A `file_name` is resolved relative to
//! the directory holding the JSON file unless it is absolute.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::ImageBuffer;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::seed::{derive_seed, rng_from};

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

/// Ground-truth box with its class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: u64,
    pub image: ImageBuffer,
    pub gt: Vec<GtBox>,
}

impl AnnotatedImage {
    pub fn tagged_boxes(&self) -> Vec<(BBox, usize)> {
        self.gt.iter().map(|g| (g.bbox, g.class_id)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub objects_per_image: (usize, usize),
    /// Shape side (or diameter) range in pixels.
    pub size_range: (usize, usize),
    /// Per-image exposure gain applied to every pixel.
    pub exposure_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            classes: 3,
            objects_per_image: (1, 4),
            size_range: (12, 26),
            exposure_range: (0.3, 1.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 32x32, got {}x{}",
                self.width, self.height
            )));
        }
        if self.classes == 0 || self.classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "classes must be in 1..={}, got {}",
                CLASS_NAMES.len(),
                self.classes
            )));
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Config("objects_per_image must satisfy 1 <= lo <= hi".into()));
        }
        let (elo, ehi) = self.exposure_range;
        if !(elo > 0.0 && elo <= ehi && ehi <= 1.0) {
            return Err(Error::Config("exposure_range must satisfy 0 < lo <= hi <= 1".into()));
        }
        let (slo, shi) = self.size_range;
        if slo < 4 || slo > shi || shi >= self.width.min(self.height) {
            return Err(Error::Config("invalid shape size range".into()));
        }
        Ok(())
    }
}

/// Pixel-center membership test for one shape inside its square frame.
fn shape_contains(class_id: usize, x0: f64, y0: f64, size: f64, px: f64, py: f64) -> bool {
    match class_id {
        0 => {
            let r = 0.5 * size;
            let (dx, dy) = (px - (x0 + r), py - (y0 + r));
            dx * dx + dy * dy <= r * r
        }
        1 => px >= x0 && px < x0 + size && py >= y0 && py < y0 + size,
        _ => {
            // Upright isosceles triangle: apex at top middle, base at bottom.
            let t = (py - y0) / size;
            if !(0.0..=1.0).contains(&t) {
                return false;
            }
            let half = 0.5 * size * t;
            let mid = x0 + 0.5 * size;
            px >= mid - half && px <= mid + half
        }
    }
}

fn draw_shape(
    img: &mut ImageBuffer,
    class_id: usize,
    x0: usize,
    y0: usize,
    size: usize,
    rgb: [u8; 3],
) -> Option<BBox> {
    let (mut minx, mut miny, mut maxx, mut maxy) = (usize::MAX, usize::MAX, 0, 0);
    for y in y0..(y0 + size).min(img.height()) {
        for x in x0..(x0 + size).min(img.width()) {
            if shape_contains(
                class_id,
                x0 as f64,
                y0 as f64,
                size as f64,
                x as f64 + 0.5,
                y as f64 + 0.5,
            ) {
                img.set(x, y, rgb);
                minx = minx.min(x);
                miny = miny.min(y);
                maxx = maxx.max(x);
                maxy = maxy.max(y);
            }
        }
    }
    if minx == usize::MAX {
        return None;
    }
    BBox::new(minx as f64, miny as f64, (maxx + 1) as f64, (maxy + 1) as f64).ok()
}

fn overlaps_with_margin(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x1() < b.x2() + margin
        && b.x1() < a.x2() + margin
        && a.y1() < b.y2() + margin
        && b.y1() < a.y2() + margin
}

/// Generate `n_images` images of non-overlapping filled shapes on a noisy
/// dark background. Shape color is independent of class. Deterministic in
/// `seed`; image ids run from 0.
pub fn gen_synthetic(seed: u64, n_images: usize, cfg: &SynthConfig) -> Result<Vec<AnnotatedImage>> {
    cfg.validate()?;
    let mut rng = rng_from(derive_seed(seed, "synthetic"));
    let mut out = Vec::with_capacity(n_images);
    for id in 0..n_images {
        let base: u8 = rng.random_range(15..=80);
        let mut pixels = Vec::with_capacity(cfg.width * cfg.height * 3);
        for _ in 0..cfg.width * cfg.height * 3 {
            let noise: i16 = rng.random_range(-15..=15);
            pixels.push((base as i16 + noise).clamp(0, 255) as u8);
        }
        let mut image = ImageBuffer::new(cfg.width, cfg.height, pixels)?;

        let n_obj = rng.random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
        let mut gt: Vec<GtBox> = Vec::with_capacity(n_obj);
        let mut attempts = 0;
        while gt.len() < n_obj && attempts < 200 {
            attempts += 1;
            let class_id = rng.random_range(0..cfg.classes);
            let size = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
            let x0 = rng.random_range(0..=cfg.width - size);
            let y0 = rng.random_range(0..=cfg.height - size);
            let frame = BBox::new(x0 as f64, y0 as f64, (x0 + size) as f64, (y0 + size) as f64)?;
            if gt.iter().any(|g| overlaps_with_margin(&g.bbox, &frame, 2.0)) {
                continue;
            }
            let rgb = [
                rng.random_range(110..=255u8),
                rng.random_range(110..=255u8),
                rng.random_range(110..=255u8),
            ];
            if let Some(bbox) = draw_shape(&mut image, class_id, x0, y0, size, rgb) {
                gt.push(GtBox { bbox, class_id });
            }
        }
        let (elo, ehi) = cfg.exposure_range;
        let gain = if elo < ehi { rng.random_range(elo..=ehi) } else { elo };
        for p in image.pixels_mut() {
            *p = (*p as f64 * gain).round() as u8;
        }
        out.push(AnnotatedImage {
            id: id as u64,
            image,
            gt,
        });
    }
    Ok(out)
}

/// Labeled / unlabeled partition of a training set.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labeled: Vec<AnnotatedImage>,
    /// Ground truth is kept for diagnostics only; training never reads it.
    pub unlabeled: Vec<AnnotatedImage>,
    pub fold_seed: u64,
    pub fraction: f64,
}

/// Indices of the labeled subset: the first `round(fraction * n)` entries of
/// one seeded permutation, so smaller fractions are nested in larger ones.
pub fn labeled_indices(n: usize, fraction: f64, fold_seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from(derive_seed(fold_seed, "split")));
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut chosen = perm[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn split_protocol(data: &[AnnotatedImage], fraction: f64, fold_seed: u64) -> Result<DatasetSplit> {
    let chosen = labeled_indices(data.len(), fraction, fold_seed)?;
    let mut is_labeled = vec![false; data.len()];
    chosen.iter().for_each(|&i| is_labeled[i] = true);
    let (labeled, unlabeled): (Vec<_>, Vec<_>) = data
        .iter()
        .cloned()
        .zip(is_labeled)
        .partition(|(_, l)| *l);
    Ok(DatasetSplit {
        labeled: labeled.into_iter().map(|(d, _)| d).collect(),
        unlabeled: unlabeled.into_iter().map(|(d, _)| d).collect(),
        fold_seed,
        fraction,
    })
}

// ---------------------------------------------------------------------------
// PPM

pub fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    buf.extend_from_slice(img.pixels());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes).map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("unsupported magic '{}'", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field '{s}'"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != w * h * 3 {
        return Err(format!("expected {} raster bytes, found {}", w * h * 3, raster.len()));
    }
    ImageBuffer::new(w, h, raster.to_vec()).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// COCO-style JSON

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: usize,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_tag: Option<String>,
}

/// One annotated box as read back from a file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordBox {
    pub annotation_id: u64,
    pub bbox: BBox,
    pub class_id: usize,
    pub score: Option<f64>,
}

/// Image metadata and boxes, without pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<RecordBox>,
}

impl ImageRecord {
    pub fn gt(&self) -> Vec<GtBox> {
        self.boxes
            .iter()
            .map(|b| GtBox {
                bbox: b.bbox,
                class_id: b.class_id,
            })
            .collect()
    }
}

pub fn categories(classes: usize) -> Vec<CocoCategory> {
    CLASS_NAMES
        .iter()
        .take(classes)
        .enumerate()
        .map(|(i, name)| CocoCategory {
            id: i + 1,
            name: (*name).to_string(),
        })
        .collect()
}

impl CocoFile {
    /// Build a document from `(image id, file_name, width, height, boxes)`
    /// rows. Annotation ids are assigned sequentially from 1.
    pub fn from_rows<I>(rows: I, classes: usize) -> Self
    where
        I: IntoIterator<Item = (u64, String, usize, usize, Vec<(BBox, usize, Option<f64>)>)>,
    {
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        for (id, file_name, width, height, boxes) in rows {
            images.push(CocoImage {
                id,
                file_name,
                width,
                height,
            });
            for (bbox, class_id, score) in boxes {
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id: id,
                    category_id: class_id + 1,
                    bbox: bbox.to_xywh(),
                    area: bbox.area(),
                    iscrowd: 0,
                    score,
                });
            }
        }
        Self {
            images,
            annotations,
            categories: categories(classes),
            tau: None,
            teacher_tag: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Validate and resolve into per-image records. `base_dir` anchors
    /// relative file names; every referenced image file must exist.
    pub fn records(&self, base_dir: &Path) -> Result<Vec<ImageRecord>> {
        let n_classes = self.categories.len();
        let mut records: Vec<ImageRecord> = Vec::with_capacity(self.images.len());
        let mut index = std::collections::HashMap::new();
        for img in &self.images {
            let path = base_dir.join(&img.file_name);
            if !path.is_file() {
                return Err(Error::Data(format!(
                    "image id {}: file '{}' missing",
                    img.id,
                    path.display()
                )));
            }
            if index.insert(img.id, records.len()).is_some() {
                return Err(Error::Data(format!("image id {}: duplicate id", img.id)));
            }
            records.push(ImageRecord {
                id: img.id,
                path,
                width: img.width,
                height: img.height,
                boxes: Vec::new(),
            });
        }
        for ann in &self.annotations {
            let [x, y, w, h] = ann.bbox;
            let bbox = BBox::from_xywh(x, y, w, h).map_err(|e| {
                Error::Data(format!("annotation id {}: invalid bbox {:?} ({e})", ann.id, ann.bbox))
            })?;
            if ann.category_id == 0 || ann.category_id > n_classes {
                return Err(Error::Data(format!(
                    "annotation id {}: unknown category_id {}",
                    ann.id, ann.category_id
                )));
            }
            if let Some(s) = ann.score {
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::Data(format!(
                        "annotation id {}: score {s} outside [0, 1]",
                        ann.id
                    )));
                }
            }
            let slot = *index.get(&ann.image_id).ok_or_else(|| {
                Error::Data(format!(
                    "annotation id {}: unknown image_id {}",
                    ann.id, ann.image_id
                ))
            })?;
            records[slot].boxes.push(RecordBox {
                annotation_id: ann.id,
                bbox,
                class_id: ann.category_id - 1,
                score: ann.score,
            });
        }
        Ok(records)
    }
}

fn image_file_name(id: u64) -> String {
    format!("images/{id:06}.ppm")
}

/// Write `annotations.json` plus `images/*.ppm` under `dir`.
pub fn save_annotations(data: &[AnnotatedImage], dir: &Path, classes: usize) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for item in data {
        write_ppm(&dir.join(image_file_name(item.id)), &item.image)?;
    }
    let doc = CocoFile::from_rows(
        data.iter().map(|d| {
            (
                d.id,
                image_file_name(d.id),
                d.image.width(),
                d.image.height(),
                d.gt.iter().map(|g| (g.bbox, g.class_id, None)).collect(),
            )
        }),
        classes,
    );
    let path = dir.join("annotations.json");
    doc.write(&path)?;
    Ok(path)
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Read and validate an annotation file (metadata only).
pub fn load_annotations(path: &Path) -> Result<Vec<ImageRecord>> {
    CocoFile::read(path)?.records(&base_dir(path))
}

/// Read an annotation file together with its images.
pub fn load_dataset(path: &Path) -> Result<Vec<AnnotatedImage>> {
    load_annotations(path)?
        .into_iter()
        .map(|rec| {
            let image = read_ppm(&rec.path)?;
            if image.width() != rec.width || image.height() != rec.height {
                return Err(Error::Data(format!(
                    "image id {}: size {}x{} does not match annotation {}x{}",
                    rec.id,
                    image.width(),
                    image.height(),
                    rec.width,
                    rec.height
                )));
            }
            Ok(AnnotatedImage {
                id: rec.id,
                image,
                gt: rec.gt(),
            })
        })
        .collect()
}

/// Write a subset of an existing dataset as a new annotation file whose
/// `file_name`s point at the already written images (absolute paths).
pub fn write_subset(data: &[AnnotatedImage], image_paths: &[PathBuf], out: &Path, classes: usize) -> Result<()> {
    let doc = CocoFile::from_rows(
        data.iter().zip(image_paths).map(|(d, p)| {
            (
                d.id,
                p.to_string_lossy().into_owned(),
                d.image.width(),
                d.image.height(),
                d.gt.iter().map(|g| (g.bbox, g.class_id, None)).collect(),
            )
        }),
        classes,
    );
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    doc.write(out)
}
