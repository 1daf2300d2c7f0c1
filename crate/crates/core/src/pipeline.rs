//! Teacher training, offline pseudo-labeling, student training on the joint
//! objective `l_s + lambda_u * l_u`, and the ablations built on top.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugMode, AugPolicy, Augmented, ImageBuffer};
use crate::data::AnnotatedImage;
use crate::detector::{assign_anchors, sample_anchors, DetectorConfig, DetectorModel, LossBreakdown, Params, Sgd};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::geometry::{BBox, Detection};
use crate::pseudolabel::{filter_by_confidence, infer, PseudoLabelSet};
use crate::seed::{derive_seed, stage_rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Images per step, per branch.
    pub batch_size: usize,
    /// Weight of the regression term in the detection loss.
    pub lambda: f64,
    pub lambda_u: f64,
    pub tau: f64,
    pub nms_threshold: f64,
    pub aug_mode: AugMode,
    /// Anchors sampled per image for the classification loss.
    pub sample_cap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 2000,
            batch_size: 1,
            lambda: 1.0,
            lambda_u: 2.0,
            tau: 0.9,
            nms_threshold: 0.5,
            aug_mode: AugMode::None,
            sample_cap: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) {
            return bad("weight_decay and lambda must be non-negative".into());
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return bad(format!("lambda_u must be non-negative, got {}", self.lambda_u));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return bad(format!("nms_threshold must be in [0, 1], got {}", self.nms_threshold));
        }
        if self.sample_cap == 0 {
            return bad("sample_cap must be at least 1".into());
        }
        Ok(())
    }

    /// Constant rate with one 10x decay at 80% of the steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step * 5 >= self.steps * 4 {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// One row of the loss log. `total = l_s + lambda_u * l_u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_s: f64,
    pub l_u: f64,
    pub total: f64,
}

pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,l_s,l_u,total\n");
    for r in log {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.l_s, r.l_u, r.total));
    }
    s
}

/// What the unsupervised branch saw at one step.
#[derive(Debug, Clone)]
pub struct UnlabeledTrace<'a> {
    pub step: usize,
    pub image_index: usize,
    /// Pseudo boxes as stored.
    pub stored: &'a [Detection],
    pub augmented: &'a Augmented<usize>,
}

pub type TraceHook<'h> = &'h mut dyn FnMut(&UnlabeledTrace<'_>);

/// Endless reshuffled pass over `0..n`.
struct Cycle {
    order: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Loss and gradient of one image under `mode`, plus the augmented view.
fn image_step(
    model: &DetectorModel,
    img: &ImageBuffer,
    boxes: &[(BBox, usize)],
    cfg: &TrainConfig,
    policy: &AugPolicy,
    rng: &mut Rng,
) -> Result<(LossBreakdown, Params, Augmented<usize>)> {
    let aug = augment(img, boxes, cfg.aug_mode, policy, rng)?;
    let targets = assign_anchors(model.grid(), &aug.boxes, &model.config.assign);
    let sampled = sample_anchors(&targets, cfg.sample_cap, rng);
    let (loss, grads) = model.loss_and_grad(&aug.image, &targets, &sampled, cfg.lambda)?;
    Ok((loss, grads, aug))
}

fn check_finite(step: usize, loss: f64, grads: &Params) -> Result<()> {
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Numeric(format!("non-finite loss or gradient at step {step}")));
    }
    Ok(())
}

/// Seed-derived initial model shared by every training entry point, so runs
/// with the same seed start from the same parameters.
pub fn init_model(config: &DetectorConfig, seed: u64) -> Result<DetectorModel> {
    DetectorModel::new(config.clone(), derive_seed(seed, "model.init"))
}

struct Branch<'d> {
    images: Vec<&'d ImageBuffer>,
    boxes: Vec<Vec<(BBox, usize)>>,
    cycle: Cycle,
    rng: Rng,
}

impl<'d> Branch<'d> {
    fn new(images: Vec<&'d ImageBuffer>, boxes: Vec<Vec<(BBox, usize)>>, seed: u64, label: &str) -> Self {
        Self {
            cycle: Cycle::new(images.len()),
            images,
            boxes,
            rng: stage_rng(seed, label),
        }
    }

    /// Mean loss and gradient over one batch.
    fn batch(
        &mut self,
        model: &DetectorModel,
        cfg: &TrainConfig,
        policy: &AugPolicy,
        mut on_image: impl FnMut(usize, &Augmented<usize>),
    ) -> Result<(f64, Params)> {
        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let i = self.cycle.next(&mut self.rng);
            let (l, g, aug) = image_step(model, self.images[i], &self.boxes[i], cfg, policy, &mut self.rng)?;
            on_image(i, &aug);
            loss += l.total;
            grads.add_scaled(&g, 1.0);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        grads.scale(inv);
        Ok((loss * inv, grads))
    }
}

fn labeled_branch<'d>(labeled: &'d [AnnotatedImage], seed: u64) -> Result<Branch<'d>> {
    if labeled.is_empty() {
        return Err(Error::Data("no labeled images".into()));
    }
    Ok(Branch::new(
        labeled.iter().map(|a| &a.image).collect(),
        labeled.iter().map(AnnotatedImage::tagged_boxes).collect(),
        seed,
        "stream.labeled",
    ))
}

/// Supervised training on labeled images. Mode `none` is the plain
/// supervised baseline (flip only); a strong mode gives the augmented one.
pub fn train_teacher(
    labeled: &[AnnotatedImage],
    model_cfg: &DetectorConfig,
    cfg: &TrainConfig,
) -> Result<(DetectorModel, Vec<LossRecord>)> {
    cfg.validate()?;
    let mut model = init_model(model_cfg, cfg.seed)?;
    let policy = AugPolicy::default();
    let mut branch = labeled_branch(labeled, cfg.seed)?;
    let mut opt = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (l_s, grads) = branch.batch(&model, cfg, &policy, |_, _| {})?;
        check_finite(step, l_s, &grads)?;
        opt.step(&mut model.params, &grads, cfg.lr_at(step));
        log.push(LossRecord {
            step,
            l_s,
            l_u: 0.0,
            total: l_s,
        });
    }
    Ok((model, log))
}

/// Teacher detections for every image, filtered at `tau`.
pub fn generate_pseudo_labels(
    teacher: &DetectorModel,
    images: &[(u64, &ImageBuffer)],
    tau: f64,
    nms_threshold: f64,
    teacher_tag: &str,
    jobs: usize,
) -> Result<Vec<PseudoLabelSet>> {
    // Suppression only ever comes from higher-scoring boxes, so flooring at
    // tau before NMS keeps exactly the boxes that thresholding after NMS would.
    let dets = par_map(images, jobs, |(_, img)| infer(teacher, img, nms_threshold, tau))?;
    Ok(images
        .iter()
        .zip(dets)
        .map(|((id, _), d)| filter_by_confidence(*id, teacher_tag, &d, tau))
        .collect())
}

/// Student training on labeled images plus pseudo-labeled images. Each step
/// draws `batch_size` images from both streams; the two streams own separate
/// random generators, so `lambda_u = 0` reproduces supervised training.
pub fn train_student(
    labeled: &[AnnotatedImage],
    unlabeled: &[&ImageBuffer],
    pseudo: &[PseudoLabelSet],
    model_cfg: &DetectorConfig,
    cfg: &TrainConfig,
    mut hook: Option<TraceHook<'_>>,
) -> Result<(DetectorModel, Vec<LossRecord>)> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::Data("no unlabeled images".into()));
    }
    if unlabeled.len() != pseudo.len() {
        return Err(Error::Data(format!(
            "{} unlabeled images but {} pseudo-label sets",
            unlabeled.len(),
            pseudo.len()
        )));
    }
    let mut model = init_model(model_cfg, cfg.seed)?;
    let policy = AugPolicy::default();
    let mut lab = labeled_branch(labeled, cfg.seed)?;
    let mut unl = Branch::new(
        unlabeled.to_vec(),
        pseudo
            .iter()
            .map(|p| p.boxes.iter().map(|d| (d.bbox, d.class_id)).collect())
            .collect(),
        cfg.seed,
        "stream.unlabeled",
    );
    let mut opt = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (l_s, mut grads) = lab.batch(&model, cfg, &policy, |_, _| {})?;
        let (l_u, g_u) = unl.batch(&model, cfg, &policy, |i, aug| {
            if let Some(h) = hook.as_mut() {
                h(&UnlabeledTrace {
                    step,
                    image_index: i,
                    stored: &pseudo[i].boxes,
                    augmented: aug,
                });
            }
        })?;
        let total = l_s + cfg.lambda_u * l_u;
        if cfg.lambda_u != 0.0 {
            grads.add_scaled(&g_u, cfg.lambda_u);
        }
        check_finite(step, total, &grads)?;
        opt.step(&mut model.params, &grads, cfg.lr_at(step));
        log.push(LossRecord { step, l_s, l_u, total });
    }
    Ok((model, log))
}

fn check_compatible(teacher: &DetectorModel, model_cfg: &DetectorConfig) -> Result<()> {
    if &teacher.config != model_cfg {
        return Err(Error::Config("teacher detector config differs from the student's".into()));
    }
    Ok(())
}

fn indexed<'a>(images: &[&'a ImageBuffer]) -> Vec<(u64, &'a ImageBuffer)> {
    images.iter().enumerate().map(|(i, im)| (i as u64, *im)).collect()
}

/// Pseudo-label `unlabeled` once with `teacher` at `cfg.tau`, then train a
/// student. Mode `none` is plain self-training.
pub fn run_stac(
    labeled: &[AnnotatedImage],
    unlabeled: &[&ImageBuffer],
    teacher: &DetectorModel,
    model_cfg: &DetectorConfig,
    cfg: &TrainConfig,
) -> Result<(DetectorModel, Vec<LossRecord>)> {
    cfg.validate()?;
    check_compatible(teacher, model_cfg)?;
    let pseudo = generate_pseudo_labels(teacher, &indexed(unlabeled), cfg.tau, cfg.nms_threshold, "teacher", 1)?;
    train_student(labeled, unlabeled, &pseudo, model_cfg, cfg, None)
}

/// Detections for each image, for evaluation.
pub fn predict_all(model: &DetectorModel, images: &[&ImageBuffer], nms_threshold: f64, jobs: usize) -> Result<Vec<Vec<Detection>>> {
    par_map(images, jobs, |img| infer(model, img, nms_threshold, 0.0))
}

pub fn evaluate_model(model: &DetectorModel, data: &[AnnotatedImage], nms_threshold: f64, jobs: usize) -> Result<EvalResult> {
    let images: Vec<&ImageBuffer> = data.iter().map(|a| &a.image).collect();
    let dets = predict_all(model, &images, nms_threshold, jobs)?;
    let gts: Vec<_> = data.iter().map(|a| a.gt.clone()).collect();
    Ok(evaluate(&dets, &gts, model.config.classes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda_u: f64,
    pub tau: f64,
    pub map: f64,
    pub ap50: f64,
}

/// One student per `(lambda_u, tau)` pair, evaluated on `eval_set`. Teacher
/// inference runs once; each tau filters the same detections.
pub fn ablate_grid(
    labeled: &[AnnotatedImage],
    unlabeled: &[&ImageBuffer],
    teacher: &DetectorModel,
    lambda_us: &[f64],
    taus: &[f64],
    cfg: &TrainConfig,
    eval_set: &[AnnotatedImage],
    jobs: usize,
) -> Result<Vec<GridCell>> {
    cfg.validate()?;
    let dets = predict_all(teacher, unlabeled, cfg.nms_threshold, jobs)?;
    let cells: Vec<(f64, f64)> = lambda_us
        .iter()
        .flat_map(|&l| taus.iter().map(move |&t| (l, t)))
        .collect();
    for &(l, t) in &cells {
        TrainConfig {
            lambda_u: l,
            tau: t,
            ..cfg.clone()
        }
        .validate()?;
    }
    par_map(&cells, jobs, |&(lambda_u, tau)| {
        let pseudo: Vec<PseudoLabelSet> = dets
            .iter()
            .enumerate()
            .map(|(i, d)| filter_by_confidence(i as u64, "teacher", d, tau))
            .collect();
        let run_cfg = TrainConfig {
            lambda_u,
            tau,
            ..cfg.clone()
        };
        let (student, _) = train_student(labeled, unlabeled, &pseudo, &teacher.config, &run_cfg, None)?;
        let r = evaluate_model(&student, eval_set, cfg.nms_threshold, 1)?;
        Ok(GridCell {
            lambda_u,
            tau,
            map: r.map,
            ap50: r.ap50,
        })
    })
}

/// Unlabeled pool size as a multiple of the labeled set, or the whole pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolSize {
    Times(usize),
    Full,
}

impl std::str::FromStr for PoolSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(PoolSize::Full),
            t => match t.parse::<usize>() {
                Ok(n) if n > 0 => Ok(PoolSize::Times(n)),
                _ => Err(Error::Config(format!("pool multiplier '{s}' is not a positive integer or 'full'"))),
            },
        }
    }
}

impl std::fmt::Display for PoolSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PoolSize::Times(n) => write!(f, "{n}"),
            PoolSize::Full => f.write_str("full"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolRow {
    pub multiplier: PoolSize,
    pub pool_size: usize,
    /// The requested size exceeded the pool and was clamped to it.
    pub clamped: bool,
    pub map: f64,
    pub ap50: f64,
}

/// Nested prefixes of one seeded permutation of the pool, so every smaller
/// subset is contained in every larger one.
pub fn nested_subsets(pool: usize, labeled: usize, sizes: &[PoolSize], seed: u64) -> (Vec<usize>, Vec<(usize, bool)>) {
    let mut order: Vec<usize> = (0..pool).collect();
    order.shuffle(&mut stage_rng(seed, "ablate.pool"));
    let lens = sizes
        .iter()
        .map(|s| match s {
            PoolSize::Full => (pool, false),
            PoolSize::Times(n) => {
                let want = n.saturating_mul(labeled);
                (want.min(pool), want > pool)
            }
        })
        .collect();
    (order, lens)
}

pub fn ablate_unlabeled_size(
    labeled: &[AnnotatedImage],
    unlabeled: &[&ImageBuffer],
    teacher: &DetectorModel,
    sizes: &[PoolSize],
    cfg: &TrainConfig,
    eval_set: &[AnnotatedImage],
    jobs: usize,
) -> Result<Vec<PoolRow>> {
    cfg.validate()?;
    let pseudo = generate_pseudo_labels(teacher, &indexed(unlabeled), cfg.tau, cfg.nms_threshold, "teacher", jobs)?;
    let (order, lens) = nested_subsets(unlabeled.len(), labeled.len(), sizes, cfg.seed);
    let rows: Vec<(PoolSize, usize, bool)> = sizes.iter().zip(lens).map(|(s, (n, c))| (*s, n, c)).collect();
    par_map(&rows, jobs, |&(multiplier, n, clamped)| {
        let imgs: Vec<&ImageBuffer> = order[..n].iter().map(|&i| unlabeled[i]).collect();
        let pl: Vec<PseudoLabelSet> = order[..n].iter().map(|&i| pseudo[i].clone()).collect();
        let (student, _) = train_student(labeled, &imgs, &pl, &teacher.config, cfg, None)?;
        let r = evaluate_model(&student, eval_set, cfg.nms_threshold, 1)?;
        Ok(PoolRow {
            multiplier,
            pool_size: n,
            clamped,
            map: r.map,
            ap50: r.ap50,
        })
    })
}

/// Map over `items` on up to `jobs` scoped threads, keeping input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};

    fn small() -> (Vec<AnnotatedImage>, DetectorConfig) {
        (gen_synthetic(3, 4, &SynthConfig::default()).unwrap(), DetectorConfig::default())
    }

    #[test]
    fn zero_steps_rejected() {
        let (data, mc) = small();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train_teacher(&data, &mc, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn lr_decays_once() {
        let cfg = TrainConfig {
            steps: 10,
            lr: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(7), 1.0);
        assert!((cfg.lr_at(8) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn teacher_is_deterministic() {
        let (data, mc) = small();
        let cfg = TrainConfig {
            steps: 3,
            aug_mode: AugMode::ColorGeoCutout,
            ..TrainConfig::default()
        };
        let (a, la) = train_teacher(&data, &mc, &cfg).unwrap();
        let (b, lb) = train_teacher(&data, &mc, &cfg).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
        assert_eq!(la, lb);
    }

    #[test]
    fn nested_pool_subsets() {
        let sizes = [PoolSize::Times(1), PoolSize::Times(2), PoolSize::Times(50), PoolSize::Full];
        let (order, lens) = nested_subsets(40, 5, &sizes, 9);
        assert_eq!(lens, vec![(5, false), (10, false), (40, true), (40, false)]);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<u32> = (0..17).collect();
        let out = par_map(&v, 4, |x| Ok(x * 2)).unwrap();
        assert_eq!(out, v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn csv_header() {
        let csv = loss_csv(&[LossRecord {
            step: 0,
            l_s: 1.0,
            l_u: 0.5,
            total: 2.0,
        }]);
        assert!(csv.starts_with("step,l_s,l_u,total\n0,"));
    }
}
