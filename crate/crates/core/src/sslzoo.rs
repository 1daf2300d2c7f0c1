//! Consistency-regularization losses of the form `sum w(x) * l(q(x), p(x))`
//! for eleven semi-supervised classification methods, on a toy classifier.
//!
//! Targets `q` are treated as constants (stop-gradient) except for entropy
//! minimization, where the gradient flows through both `q` and `p`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bootstrapping,
    EntropyMin,
    PseudoLabeling,
    TemporalEnsembling,
    MeanTeacher,
    Vat,
    Uda,
    FixMatch,
    NoisyStudent,
    MixMatch,
    ReMixMatch,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Bootstrapping,
        Method::EntropyMin,
        Method::PseudoLabeling,
        Method::TemporalEnsembling,
        Method::MeanTeacher,
        Method::Vat,
        Method::Uda,
        Method::FixMatch,
        Method::NoisyStudent,
        Method::MixMatch,
        Method::ReMixMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bootstrapping => "bootstrapping",
            Method::EntropyMin => "entropy_min",
            Method::PseudoLabeling => "pseudo_labeling",
            Method::TemporalEnsembling => "temporal_ensembling",
            Method::MeanTeacher => "mean_teacher",
            Method::Vat => "vat",
            Method::Uda => "uda",
            Method::FixMatch => "fixmatch",
            Method::NoisyStudent => "noisy_student",
            Method::MixMatch => "mixmatch",
            Method::ReMixMatch => "remixmatch",
        }
    }

    fn needs_frozen_teacher(self) -> bool {
        matches!(self, Method::Bootstrapping | Method::NoisyStudent)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm || m.name().replace('_', "") == norm.replace('_', ""))
            .ok_or_else(|| Error::Config(format!("unknown ssl method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    CrossEntropy,
    SquaredL2,
}

/// Input perturbation for feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureAug {
    Identity,
    /// Additive Gaussian noise.
    Gaussian { sigma: f64 },
    /// Zero each feature with probability `rate`, then add Gaussian noise.
    Dropout { rate: f64, sigma: f64 },
}

impl FeatureAug {
    pub fn apply(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        match *self {
            FeatureAug::Identity => x.to_vec(),
            FeatureAug::Gaussian { sigma } => x
                .iter()
                .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            FeatureAug::Dropout { rate, sigma } => x
                .iter()
                .map(|v| {
                    let keep = !rng.random_bool(rate);
                    let base = if keep { *v } else { 0.0 };
                    base + sigma * rng.sample::<f64, _>(StandardNormal)
                })
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            FeatureAug::Identity => true,
            FeatureAug::Gaussian { sigma } => sigma >= 0.0 && sigma.is_finite(),
            FeatureAug::Dropout { rate, sigma } => (0.0..=1.0).contains(&rate) && sigma >= 0.0 && sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid feature augmentation {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub method: Method,
    pub distance: Distance,
    pub tau: f64,
    pub temperature: f64,
    pub ema_alpha: f64,
    /// Symmetric Beta parameter for the MixUp coefficient.
    pub mixup_beta_param: f64,
    pub weak_aug: FeatureAug,
    pub strong_aug: FeatureAug,
    pub vat_epsilon: f64,
    pub vat_xi: f64,
    pub vat_power_iters: usize,
    /// Augmentation draws averaged by MixMatch and ReMixMatch.
    pub draws: usize,
}

impl ConsistencyConfig {
    /// Defaults for `method`: squared L2 for temporal ensembling and mean
    /// teacher, cross-entropy otherwise.
    pub fn for_method(method: Method) -> Self {
        let distance = match method {
            Method::TemporalEnsembling | Method::MeanTeacher => Distance::SquaredL2,
            _ => Distance::CrossEntropy,
        };
        let tau = match method {
            Method::Bootstrapping | Method::PseudoLabeling | Method::FixMatch | Method::NoisyStudent => 0.95,
            Method::Uda => 0.8,
            _ => 0.0,
        };
        let temperature = match method {
            Method::Uda => 0.4,
            Method::MixMatch | Method::ReMixMatch => 0.5,
            _ => 1.0,
        };
        Self {
            method,
            distance,
            tau,
            temperature,
            ema_alpha: if method == Method::TemporalEnsembling { 0.6 } else { 0.99 },
            mixup_beta_param: 0.75,
            weak_aug: FeatureAug::Gaussian { sigma: 0.05 },
            strong_aug: FeatureAug::Dropout { rate: 0.2, sigma: 0.3 },
            vat_epsilon: 0.5,
            vat_xi: 1e-6,
            vat_power_iters: 1,
            draws: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.method)));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must be in [0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad("ema_alpha must be in [0, 1]");
        }
        if matches!(self.method, Method::MixMatch | Method::ReMixMatch) {
            if !(self.mixup_beta_param > 0.0 && self.mixup_beta_param.is_finite()) {
                return bad("mixup_beta_param must be positive");
            }
            if self.draws == 0 {
                return bad("draws must be at least 1");
            }
        }
        if self.method == Method::Vat && !(self.vat_epsilon >= 0.0 && self.vat_xi > 0.0) {
            return bad("vat_epsilon must be non-negative and vat_xi positive");
        }
        self.weak_aug.validate()?;
        self.strong_aug.validate()
    }
}

/// `tanh` single-hidden-layer network mapping features to `K` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClassifier {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    /// `w1 (hidden x inputs)`, `b1`, `w2 (classes x hidden)`, `b2`.
    pub theta: Vec<f64>,
}

impl ToyClassifier {
    pub fn new(inputs: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        if inputs == 0 || hidden == 0 || classes < 2 {
            return Err(Error::Config("toy classifier needs inputs, hidden units and >= 2 classes".into()));
        }
        let mut model = Self {
            inputs,
            hidden,
            classes,
            theta: vec![0.0; hidden * inputs + hidden + classes * hidden + classes],
        };
        let mut rng = rng_from(seed);
        let n1 = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("valid std");
        let (w1, rest) = model.theta.split_at_mut(hidden * inputs);
        w1.iter_mut().for_each(|v| *v = n1.sample(&mut rng));
        rest[hidden..hidden + classes * hidden]
            .iter_mut()
            .for_each(|v| *v = n2.sample(&mut rng));
        Ok(model)
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.inputs;
        let w2 = b1 + self.hidden;
        (b1, w2, w2 + self.classes * self.hidden)
    }

    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        let (b1, _, _) = self.offsets();
        (0..self.hidden)
            .map(|j| {
                let row = &self.theta[j * self.inputs..(j + 1) * self.inputs];
                (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.theta[b1 + j]).tanh()
            })
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        let (_, w2, b2) = self.offsets();
        let h = self.hidden_act(x);
        (0..self.classes)
            .map(|c| {
                let row = &self.theta[w2 + c * self.hidden..w2 + (c + 1) * self.hidden];
                row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + self.theta[b2 + c]
            })
            .collect()
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Accumulate `d loss / d theta` into `grad` given `d loss / d logits`,
    /// and return `d loss / d x`.
    pub fn backward(&self, x: &[f64], dlogits: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (b1, w2, b2) = self.offsets();
        let h = self.hidden_act(x);
        let mut dh = vec![0.0; self.hidden];
        for (c, &dz) in dlogits.iter().enumerate() {
            grad[b2 + c] += dz;
            for j in 0..self.hidden {
                grad[w2 + c * self.hidden + j] += dz * h[j];
                dh[j] += dz * self.theta[w2 + c * self.hidden + j];
            }
        }
        let mut dx = vec![0.0; self.inputs];
        for j in 0..self.hidden {
            let da = dh[j] * (1.0 - h[j] * h[j]);
            grad[b1 + j] += da;
            for i in 0..self.inputs {
                grad[j * self.inputs + i] += da * x[i];
                dx[i] += da * self.theta[j * self.inputs + i];
            }
        }
        dx
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `q ∝ p^(1/T)`, computed in the log domain.
pub fn sharpen(p: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return p.to_vec();
    }
    let scaled: Vec<f64> = p.iter().map(|v| v.ln() / temperature).collect();
    softmax(&scaled)
}

pub fn one_hot_argmax(p: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    let mut q = vec![0.0; p.len()];
    q[best] = 1.0;
    q
}

fn max_prob(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &[f64], student: &[f64], alpha: f64) -> Vec<f64> {
    teacher
        .iter()
        .zip(student)
        .map(|(t, s)| alpha * t + (1.0 - alpha) * s)
        .collect()
}

pub fn temporal_ensemble_update(q_prev: &[f64], p_now: &[f64], alpha: f64) -> Vec<f64> {
    ema_update(q_prev, p_now, alpha)
}

/// Convex combination of two inputs and their targets with weight `beta` on
/// the first.
pub fn mixup(x1: &[f64], x2: &[f64], q1: &[f64], q2: &[f64], beta: f64) -> (Vec<f64>, Vec<f64>) {
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| beta * u + (1.0 - beta) * v).collect() };
    (mix(x1, x2), mix(q1, q2))
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.ln()))
        .sum()
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    kl(p, q)
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

/// Direction that most increases `KL(p(x) || p(x + r))`, found by power
/// iteration from a random unit vector, scaled to norm `epsilon`.
pub fn vat_perturbation(
    model: &ToyClassifier,
    x: &[f64],
    epsilon: f64,
    xi: f64,
    power_iters: usize,
    rng: &mut Rng,
) -> Vec<f64> {
    let mut d: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
    if !normalize(&mut d) {
        d = vec![0.0; x.len()];
        d[0] = 1.0;
    }
    let p0 = model.probs(x);
    let mut scratch = vec![0.0; model.theta.len()];
    for _ in 0..power_iters {
        let xr: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + xi * b).collect();
        let p1 = model.probs(&xr);
        let dz: Vec<f64> = p1.iter().zip(&p0).map(|(a, b)| a - b).collect();
        let mut g = model.backward(&xr, &dz, &mut scratch);
        if normalize(&mut g) {
            d = g;
        }
    }
    d.into_iter().map(|v| v * epsilon).collect()
}

/// State a method may read besides the student: the frozen teacher, the EMA
/// teacher and the temporal-ensemble memory (one vector per example).
#[derive(Debug, Clone, Default)]
pub struct TeacherState {
    pub frozen: Option<ToyClassifier>,
    pub ema: Option<ToyClassifier>,
    pub ensemble: Vec<Vec<f64>>,
}

/// One term of the loss: the student is evaluated at `input` and compared
/// with `q`, weighted by `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetItem {
    pub example: usize,
    pub input: Vec<f64>,
    pub q: Vec<f64>,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub items: Vec<TargetItem>,
    pub batch: usize,
    /// Updated temporal-ensemble memory, when the method keeps one.
    pub ensemble: Option<Vec<Vec<f64>>>,
}

fn require<'a>(m: &'a Option<ToyClassifier>, what: &str) -> Result<&'a ToyClassifier> {
    m.as_ref().ok_or_else(|| Error::Config(format!("method needs a {what} model")))
}

fn threshold(p: &[f64], tau: f64) -> f64 {
    if max_prob(p) >= tau {
        1.0
    } else {
        0.0
    }
}

/// Build `(w, q, input)` for every example. Randomness (augmentations, VAT
/// directions, MixUp partners and coefficients) is drawn from `rng` in batch
/// order; for each example the weak view is drawn before the strong view.
pub fn compute_targets(
    cfg: &ConsistencyConfig,
    batch: &[Vec<f64>],
    student: &ToyClassifier,
    teacher: &TeacherState,
    rng: &mut Rng,
) -> Result<Targets> {
    cfg.validate()?;
    if cfg.method.needs_frozen_teacher() {
        require(&teacher.frozen, "frozen teacher")?;
    }
    let k = student.classes;
    let mut items = Vec::with_capacity(batch.len());
    let mut ensemble = None;
    let item = |example: usize, input: Vec<f64>, q: Vec<f64>, w: f64| TargetItem { example, input, q, w };
    match cfg.method {
        Method::Bootstrapping | Method::NoisyStudent => {
            let t = require(&teacher.frozen, "frozen teacher")?;
            for (i, x) in batch.iter().enumerate() {
                let pt = t.probs(x);
                let w = threshold(&pt, cfg.tau);
                if cfg.method == Method::Bootstrapping {
                    items.push(item(i, x.clone(), pt, w));
                } else {
                    let input = cfg.strong_aug.apply(x, rng);
                    items.push(item(i, input, one_hot_argmax(&pt), w));
                }
            }
        }
        Method::EntropyMin => {
            for (i, x) in batch.iter().enumerate() {
                items.push(item(i, x.clone(), student.probs(x), 1.0));
            }
        }
        Method::PseudoLabeling => {
            for (i, x) in batch.iter().enumerate() {
                let p = student.probs(x);
                items.push(item(i, x.clone(), one_hot_argmax(&p), threshold(&p, cfg.tau)));
            }
        }
        Method::TemporalEnsembling => {
            let prev = if teacher.ensemble.is_empty() {
                vec![vec![1.0 / k as f64; k]; batch.len()]
            } else if teacher.ensemble.len() == batch.len() {
                teacher.ensemble.clone()
            } else {
                return Err(Error::Config("temporal ensemble memory does not match the batch".into()));
            };
            let mut next = Vec::with_capacity(batch.len());
            for (i, x) in batch.iter().enumerate() {
                let q = temporal_ensemble_update(&prev[i], &student.probs(x), cfg.ema_alpha);
                let input = cfg.weak_aug.apply(x, rng);
                items.push(item(i, input, q.clone(), 1.0));
                next.push(q);
            }
            ensemble = Some(next);
        }
        Method::MeanTeacher => {
            let t = require(&teacher.ema, "EMA teacher")?;
            for (i, x) in batch.iter().enumerate() {
                let input = cfg.weak_aug.apply(x, rng);
                items.push(item(i, input, t.probs(x), 1.0));
            }
        }
        Method::Vat => {
            for (i, x) in batch.iter().enumerate() {
                let r = vat_perturbation(student, x, cfg.vat_epsilon, cfg.vat_xi, cfg.vat_power_iters, rng);
                let input: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a + b).collect();
                items.push(item(i, input, student.probs(x), 1.0));
            }
        }
        Method::Uda | Method::FixMatch => {
            for (i, x) in batch.iter().enumerate() {
                let pw = student.probs(&cfg.weak_aug.apply(x, rng));
                let input = cfg.strong_aug.apply(x, rng);
                let q = if cfg.method == Method::Uda {
                    sharpen(&pw, cfg.temperature)
                } else {
                    one_hot_argmax(&pw)
                };
                items.push(item(i, input, q, threshold(&pw, cfg.tau)));
            }
        }
        Method::MixMatch | Method::ReMixMatch => {
            let n = batch.len();
            let mut partner: Vec<usize> = (0..n).collect();
            partner.shuffle(rng);
            let beta_dist = Beta::new(cfg.mixup_beta_param, cfg.mixup_beta_param)
                .map_err(|e| Error::Config(format!("mixup beta: {e}")))?;
            // guessed labels from weak views
            let mut weak_views = Vec::with_capacity(n);
            let mut guesses = Vec::with_capacity(n);
            for x in batch {
                let draws = if cfg.method == Method::MixMatch { cfg.draws } else { 1 };
                let mut views: Vec<Vec<f64>> = (0..draws).map(|_| cfg.weak_aug.apply(x, rng)).collect();
                let mut mean = vec![0.0; k];
                for v in &views {
                    for (m, p) in mean.iter_mut().zip(student.probs(v)) {
                        *m += p / draws as f64;
                    }
                }
                guesses.push(sharpen(&mean, cfg.temperature));
                weak_views.push(views.swap_remove(0));
            }
            for i in 0..n {
                let z = partner[i];
                let beta = beta_dist.sample(rng);
                let q = mixup(&[], &[], &guesses[i], &guesses[z], beta).1;
                if cfg.method == Method::MixMatch {
                    let input = mixup(&weak_views[i], &weak_views[z], &[], &[], beta).0;
                    items.push(item(i, input, q, 1.0));
                } else {
                    for _ in 0..cfg.draws {
                        let ax = cfg.strong_aug.apply(&batch[i], rng);
                        let az = cfg.strong_aug.apply(&batch[z], rng);
                        let input = mixup(&ax, &az, &[], &[], beta).0;
                        items.push(item(i, input, q.clone(), 1.0 / cfg.draws as f64));
                    }
                }
            }
        }
    }
    Ok(Targets {
        items,
        batch: batch.len(),
        ensemble,
    })
}

/// Per-item distance and its gradient with respect to the student logits,
/// holding `q` fixed.
fn distance_and_grad(distance: Distance, q: &[f64], logits: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    match distance {
        Distance::CrossEntropy => {
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let loss = q
                .iter()
                .zip(logits)
                .filter(|(qv, _)| **qv != 0.0)
                .map(|(qv, z)| -qv * (z - lse))
                .sum();
            let qsum: f64 = q.iter().sum();
            (loss, p.iter().zip(q).map(|(pv, qv)| qsum * pv - qv).collect())
        }
        Distance::SquaredL2 => {
            let g: Vec<f64> = p.iter().zip(q).map(|(pv, qv)| 2.0 * (pv - qv)).collect();
            let loss = p.iter().zip(q).map(|(pv, qv)| (pv - qv).powi(2)).sum();
            let dot: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
            (loss, p.iter().zip(&g).map(|(pv, gv)| pv * (gv - dot)).collect())
        }
    }
}

/// Entropy of `softmax(logits)` and its gradient, with the target tied to
/// the prediction.
fn entropy_and_grad(logits: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let logp: Vec<f64> = p.iter().map(|v| if *v > 0.0 { v.ln() } else { 0.0 }).collect();
    let h: f64 = -p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
    (h, p.iter().zip(&logp).map(|(pv, lp)| -pv * (lp + h)).collect())
}

/// `(1/batch) * sum w * l(q, p(input))` and its gradient with respect to
/// the student parameters. For entropy minimization `q` is recomputed from
/// the student, so the gradient also flows through it.
pub fn loss_given_targets(cfg: &ConsistencyConfig, student: &ToyClassifier, targets: &Targets) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; student.theta.len()];
    let mut loss = 0.0;
    let inv = 1.0 / targets.batch.max(1) as f64;
    for it in &targets.items {
        if it.w == 0.0 {
            continue;
        }
        let logits = student.logits(&it.input);
        let (l, g) = if cfg.method == Method::EntropyMin {
            entropy_and_grad(&logits)
        } else {
            distance_and_grad(cfg.distance, &it.q, &logits)
        };
        loss += inv * it.w * l;
        let dz: Vec<f64> = g.iter().map(|v| inv * it.w * v).collect();
        student.backward(&it.input, &dz, &mut grad);
    }
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct UnifiedLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Weight of every term, in target order.
    pub w: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub ensemble: Option<Vec<Vec<f64>>>,
}

pub fn unified_loss(
    cfg: &ConsistencyConfig,
    batch: &[Vec<f64>],
    student: &ToyClassifier,
    teacher: &TeacherState,
    rng: &mut Rng,
) -> Result<UnifiedLoss> {
    let targets = compute_targets(cfg, batch, student, teacher, rng)?;
    let (loss, grad) = loss_given_targets(cfg, student, &targets);
    Ok(UnifiedLoss {
        loss,
        grad,
        w: targets.items.iter().map(|t| t.w).collect(),
        q: targets.items.iter().map(|t| t.q.clone()).collect(),
        ensemble: targets.ensemble,
    })
}

/// Mean cross-entropy against hard labels, and its gradient.
pub fn supervised_ce(model: &ToyClassifier, xs: &[Vec<f64>], ys: &[usize]) -> (f64, Vec<f64>) {
    let targets = Targets {
        items: xs
            .iter()
            .zip(ys)
            .enumerate()
            .map(|(i, (x, &y))| {
                let mut q = vec![0.0; model.classes];
                q[y] = 1.0;
                TargetItem {
                    example: i,
                    input: x.clone(),
                    q,
                    w: 1.0,
                }
            })
            .collect(),
        batch: xs.len(),
        ensemble: None,
    };
    loss_given_targets(&ConsistencyConfig::for_method(Method::PseudoLabeling), model, &targets)
}

/// Gaussian blobs in the first two features plus unit-noise features.
pub fn toy_blobs(seed: u64, n: usize, inputs: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = rng_from(derive_seed(seed, "toy.blobs"));
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        let angle = std::f64::consts::TAU * y as f64 / classes as f64;
        let x: Vec<f64> = (0..inputs)
            .map(|d| {
                let centre = match d {
                    0 => 2.0 * angle.cos(),
                    1 => 2.0 * angle.sin(),
                    _ => 0.0,
                };
                centre + rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        xs.push(x);
        ys.push(y);
    }
    (xs, ys)
}

pub fn accuracy(model: &ToyClassifier, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    let hits = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| one_hot_argmax(&model.probs(x))[**y] == 1.0)
        .count();
    hits as f64 / xs.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub method: Method,
    pub supervised_accuracy: f64,
    pub ssl_accuracy: f64,
    pub final_unsup_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub steps: usize,
    pub lr: f64,
    pub lambda_u: f64,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            labeled: 12,
            unlabeled: 300,
            test: 300,
            steps: 400,
            lr: 0.2,
            lambda_u: 1.0,
            seed: 0,
        }
    }
}

/// Train a supervised baseline and a semi-supervised model on toy blobs and
/// report both test accuracies.
pub fn ssl_demo(cfg: &ConsistencyConfig, demo: &DemoConfig) -> Result<DemoReport> {
    cfg.validate()?;
    if demo.labeled == 0 || demo.unlabeled == 0 || demo.steps == 0 {
        return Err(Error::Config("ssl demo needs labeled and unlabeled examples and steps".into()));
    }
    let (inputs, hidden, classes) = (3, 16, 3);
    let (lx, ly) = toy_blobs(demo.seed, demo.labeled, inputs, classes);
    let (ux, _) = toy_blobs(derive_seed(demo.seed, "unlabeled"), demo.unlabeled, inputs, classes);
    let (tx, ty) = toy_blobs(derive_seed(demo.seed, "test"), demo.test, inputs, classes);
    let init = ToyClassifier::new(inputs, hidden, classes, derive_seed(demo.seed, "toy.init"))?;

    let mut sup = init.clone();
    for _ in 0..demo.steps {
        let (_, g) = supervised_ce(&sup, &lx, &ly);
        sup.theta.iter_mut().zip(&g).for_each(|(p, gv)| *p -= demo.lr * gv);
    }

    let mut model = init.clone();
    let mut state = TeacherState {
        frozen: Some(sup.clone()),
        ema: Some(init),
        ensemble: Vec::new(),
    };
    let mut rng = rng_from(derive_seed(demo.seed, "ssl.demo"));
    let mut last = 0.0;
    for _ in 0..demo.steps {
        let (_, mut g) = supervised_ce(&model, &lx, &ly);
        let u = unified_loss(cfg, &ux, &model, &state, &mut rng)?;
        if !u.loss.is_finite() {
            return Err(Error::Numeric(format!("{}: non-finite unsupervised loss", cfg.method)));
        }
        last = u.loss;
        g.iter_mut().zip(&u.grad).for_each(|(a, b)| *a += demo.lambda_u * b);
        model.theta.iter_mut().zip(&g).for_each(|(p, gv)| *p -= demo.lr * gv);
        if let Some(e) = state.ema.as_mut() {
            e.theta = ema_update(&e.theta, &model.theta, cfg.ema_alpha);
        }
        if let Some(next) = u.ensemble {
            state.ensemble = next;
        }
    }
    Ok(DemoReport {
        method: cfg.method,
        supervised_accuracy: accuracy(&sup, &tx, &ty),
        ssl_accuracy: accuracy(&model, &tx, &ty),
        final_unsup_loss: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn sharpen_cases() {
        assert_eq!(sharpen(&[0.8, 0.2], 1.0), vec![0.8, 0.2]);
        let s = sharpen(&[0.8, 0.2], 0.5);
        assert!(close(&s, &[0.64 / 0.68, 0.04 / 0.68], 1e-12));
        let s = sharpen(&[0.8, 0.2], 0.01);
        assert!(s[0] > 1.0 - 1e-12);
    }

    #[test]
    fn ema_and_temporal_endpoints() {
        assert_eq!(ema_update(&[1.0, -2.0], &[0.0, 5.0], 1.0), vec![1.0, -2.0]);
        assert_eq!(ema_update(&[1.0, -2.0], &[0.0, 5.0], 0.0), vec![0.0, 5.0]);
        assert!((ema_update(&[1.0], &[0.0], 0.9)[0] - 0.9).abs() < 1e-15);
        assert!(close(&temporal_ensemble_update(&[0.2, 0.8], &[0.6, 0.4], 0.5), &[0.4, 0.6], 1e-15));
        assert_eq!(temporal_ensemble_update(&[0.2, 0.8], &[0.6, 0.4], 0.0), vec![0.6, 0.4]);
        assert_eq!(temporal_ensemble_update(&[0.2, 0.8], &[0.6, 0.4], 1.0), vec![0.2, 0.8]);
    }

    #[test]
    fn mixup_cases() {
        let (x, q) = mixup(&[1.0, 2.0], &[3.0, 4.0], &[1.0, 0.0], &[0.0, 1.0], 1.0);
        assert_eq!((x, q), (vec![1.0, 2.0], vec![1.0, 0.0]));
        let (x, q) = mixup(&[1.0, 2.0], &[3.0, 4.0], &[1.0, 0.0], &[0.0, 1.0], 0.5);
        assert_eq!((x, q.clone()), (vec![2.0, 3.0], vec![0.5, 0.5]));
        for b in [0.0, 0.13, 0.77] {
            let (_, q) = mixup(&[0.0], &[0.0], &[0.2, 0.8], &[0.9, 0.1], b);
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_labeling_below_threshold_is_zero() {
        let m = ToyClassifier::new(3, 4, 2, 1).unwrap();
        let mut cfg = ConsistencyConfig::for_method(Method::PseudoLabeling);
        cfg.tau = 1.0;
        let batch = vec![vec![0.1, 0.2, 0.3], vec![-0.5, 0.0, 0.5]];
        let u = unified_loss(&cfg, &batch, &m, &TeacherState::default(), &mut rng_from(0)).unwrap();
        assert_eq!(u.loss, 0.0);
        assert!(u.w.iter().all(|w| *w == 0.0));
    }

    #[test]
    fn entropy_of_uniform_is_ln_k() {
        let mut m = ToyClassifier::new(3, 4, 3, 1).unwrap();
        m.theta.iter_mut().for_each(|v| *v = 0.0);
        let cfg = ConsistencyConfig::for_method(Method::EntropyMin);
        let batch = vec![vec![1.0, 2.0, 3.0]; 4];
        let u = unified_loss(&cfg, &batch, &m, &TeacherState::default(), &mut rng_from(0)).unwrap();
        assert!((u.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn vat_scaling() {
        let m = ToyClassifier::new(3, 5, 2, 4).unwrap();
        let mut rng = rng_from(1);
        let r = vat_perturbation(&m, &[0.3, -0.2, 0.5], 0.0, 1e-6, 1, &mut rng);
        assert!(r.iter().all(|v| *v == 0.0));
        let r = vat_perturbation(&m, &[0.3, -0.2, 0.5], 0.7, 1e-6, 2, &mut rng);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 0.7).abs() < 1e-9);
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("FixMatch".parse::<Method>().unwrap(), Method::FixMatch);
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ConsistencyConfig::for_method(Method::Uda);
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = ConsistencyConfig::for_method(Method::MeanTeacher);
        c.ema_alpha = 1.5;
        assert!(c.validate().is_err());
        let m = ToyClassifier::new(3, 4, 2, 1).unwrap();
        let cfg = ConsistencyConfig::for_method(Method::Bootstrapping);
        assert!(compute_targets(&cfg, &[vec![0.0; 3]], &m, &TeacherState::default(), &mut rng_from(0)).is_err());
    }

    #[test]
    fn demo_runs() {
        let demo = DemoConfig {
            steps: 30,
            unlabeled: 40,
            test: 40,
            ..DemoConfig::default()
        };
        for m in Method::ALL {
            let r = ssl_demo(&ConsistencyConfig::for_method(m), &demo).unwrap();
            assert!((0.0..=1.0).contains(&r.ssl_accuracy), "{m}");
        }
    }
}
