//! Tiny single-stage anchor detector with hand-written backpropagation.
//!
//! Backbone: 3x3 conv (SiLU) at full resolution, 2x2 average pool, 3x3 conv
//! (SiLU), `stride/2` average pool. A 3x3 head conv on the stride grid emits,
//! per anchor, one objectness logit, `K` class logits and 4 box offsets.

mod anchors;
pub mod checkpoint;
mod layers;
mod loss;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::ImageBuffer;
use crate::error::{Error, Result};
use crate::seed::rng_from;

pub use anchors::{
    assign_anchors, build_anchors, decode_box, encode_box, sample_anchors, AnchorGrid, AnchorLabel, AnchorTargets,
    AssignConfig,
};
pub use layers::FeatureMap;
pub use loss::{supervised_loss, weighted_loss_with_grad, LossBreakdown, OutputGrads};

use layers::{
    avgpool_backward, avgpool_forward, conv3x3_backward, conv3x3_forward, sigmoid, silu_backward, silu_forward,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_w: usize,
    pub image_h: usize,
    /// Anchor stride; must be even and at least 4.
    pub stride: usize,
    pub anchor_sizes: Vec<f64>,
    pub classes: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub assign: AssignConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_w: 64,
            image_h: 64,
            stride: 8,
            anchor_sizes: vec![14.0, 24.0],
            classes: 3,
            conv1_channels: 8,
            conv2_channels: 16,
            assign: AssignConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 4 || !self.stride.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "stride must be even and >= 4, got {}",
                self.stride
            )));
        }
        if self.classes == 0 || self.conv1_channels == 0 || self.conv2_channels == 0 {
            return Err(Error::Config("classes and channel widths must be positive".into()));
        }
        if self.image_w < ImageBuffer::MIN_SIDE || self.image_h < ImageBuffer::MIN_SIDE {
            return Err(Error::Config("image too small for the detector".into()));
        }
        self.assign.validate()?;
        build_anchors(self.image_w, self.image_h, self.stride, &self.anchor_sizes).map(|_| ())
    }

    pub fn head_channels(&self) -> usize {
        self.anchor_sizes.len() * (5 + self.classes)
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All trainable parameters, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const HEAD_W: usize = 4;
const HEAD_B: usize = 5;

impl Params {
    fn shapes(cfg: &DetectorConfig) -> Vec<(&'static str, Vec<usize>)> {
        let (c1, c2, ch) = (cfg.conv1_channels, cfg.conv2_channels, cfg.head_channels());
        vec![
            ("conv1.weight", vec![c1, 3, 3, 3]),
            ("conv1.bias", vec![c1]),
            ("conv2.weight", vec![c2, c1, 3, 3]),
            ("conv2.bias", vec![c2]),
            ("head.weight", vec![ch, c2, 3, 3]),
            ("head.bias", vec![ch]),
        ]
    }

    pub fn zeros(cfg: &DetectorConfig) -> Self {
        Self {
            tensors: Self::shapes(cfg)
                .into_iter()
                .map(|(name, shape)| Tensor {
                    name: name.to_string(),
                    data: vec![0.0; shape.iter().product()],
                    shape,
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Raw per-anchor head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub classes: usize,
    pub obj_logits: Vec<f64>,
    /// Row-major `[anchor][class]`.
    pub cls_logits: Vec<f64>,
    pub reg: Vec<[f64; 4]>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.obj_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obj_logits.is_empty()
    }

    pub fn objectness(&self, i: usize) -> f64 {
        sigmoid(self.obj_logits[i])
    }

    pub fn class_probs(&self, i: usize) -> Vec<f64> {
        let k = self.classes;
        loss::log_softmax(&self.cls_logits[i * k..(i + 1) * k])
            .into_iter()
            .map(f64::exp)
            .collect()
    }
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: FeatureMap,
    pre1: FeatureMap,
    pool1: FeatureMap,
    pre2: FeatureMap,
    pool2: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub params: Params,
    grid: AnchorGrid,
}

/// Prior probability used to initialize the objectness bias.
const OBJECTNESS_PRIOR: f64 = 0.1;

impl DetectorModel {
    /// All-zero parameters.
    pub fn zeros(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let grid = build_anchors(config.image_w, config.image_h, config.stride, &config.anchor_sizes)?;
        Ok(Self {
            params: Params::zeros(&config),
            config,
            grid,
        })
    }

    pub fn from_params(config: DetectorConfig, params: Params) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let expected = Params::zeros(&model.config);
        let compatible = expected.tensors.len() == params.tensors.len()
            && expected
                .tensors
                .iter()
                .zip(&params.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && b.data.len() == a.data.len());
        if !compatible {
            return Err(Error::Config("parameter shapes do not match detector config".into()));
        }
        model.params = params;
        Ok(model)
    }

    /// He-normal convolution weights, small head weights, objectness bias at
    /// a 0.1 prior.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = rng_from(seed);
        let c1 = model.config.conv1_channels as f64;
        let c2 = model.config.conv2_channels as f64;
        let stds = [(CONV1_W, (2.0 / 27.0f64).sqrt()), (CONV2_W, (2.0 / (9.0 * c1)).sqrt()), (HEAD_W, (1.0 / (9.0 * c2)).sqrt() * 0.1)];
        for (idx, std) in stds {
            let normal = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
            for v in model.params.tensors[idx].data.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        let per = 5 + model.config.classes;
        let bias = -((1.0 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR).ln();
        for a in 0..model.config.anchor_sizes.len() {
            model.params.tensors[HEAD_B].data[a * per] = bias;
        }
        Ok(model)
    }

    pub fn grid(&self) -> &AnchorGrid {
        &self.grid
    }

    pub fn num_anchors(&self) -> usize {
        self.grid.len()
    }

    fn input_map(&self, img: &ImageBuffer) -> Result<FeatureMap> {
        if img.width() != self.config.image_w || img.height() != self.config.image_h {
            return Err(Error::Config(format!(
                "image {}x{} does not match detector input {}x{}",
                img.width(),
                img.height(),
                self.config.image_w,
                self.config.image_h
            )));
        }
        let (w, h) = (img.width(), img.height());
        let mut map = FeatureMap::zeros(3, h, w);
        for (p, px) in img.pixels().chunks_exact(3).enumerate() {
            for c in 0..3 {
                map.data[c * w * h + p] = px[c] as f64 / 255.0 - 0.5;
            }
        }
        Ok(map)
    }

    pub fn forward(&self, img: &ImageBuffer) -> Result<Predictions> {
        self.forward_train(img).map(|(p, _)| p)
    }

    pub fn forward_train(&self, img: &ImageBuffer) -> Result<(Predictions, ForwardCache)> {
        let input = self.input_map(img)?;
        let t = &self.params.tensors;
        let cfg = &self.config;
        let pre1 = conv3x3_forward(&input, &t[CONV1_W].data, &t[CONV1_B].data, cfg.conv1_channels);
        let pool1 = avgpool_forward(&silu_forward(&pre1), 2);
        let pre2 = conv3x3_forward(&pool1, &t[CONV2_W].data, &t[CONV2_B].data, cfg.conv2_channels);
        let pool2 = avgpool_forward(&silu_forward(&pre2), cfg.stride / 2);
        debug_assert_eq!((pool2.h, pool2.w), (self.grid.rows, self.grid.cols));
        let head = conv3x3_forward(&pool2, &t[HEAD_W].data, &t[HEAD_B].data, cfg.head_channels());
        let preds = self.unpack_head(&head);
        Ok((
            preds,
            ForwardCache {
                input,
                pre1,
                pool1,
                pre2,
                pool2,
            },
        ))
    }

    fn unpack_head(&self, head: &FeatureMap) -> Predictions {
        let k = self.config.classes;
        let per = 5 + k;
        let a_count = self.config.anchor_sizes.len();
        let cells = head.h * head.w;
        let n = cells * a_count;
        let mut preds = Predictions {
            classes: k,
            obj_logits: vec![0.0; n],
            cls_logits: vec![0.0; n * k],
            reg: vec![[0.0; 4]; n],
        };
        for cell in 0..cells {
            for a in 0..a_count {
                let i = cell * a_count + a;
                let at = |j: usize| head.data[(a * per + j) * cells + cell];
                preds.obj_logits[i] = at(0);
                for c in 0..k {
                    preds.cls_logits[i * k + c] = at(1 + c);
                }
                for j in 0..4 {
                    preds.reg[i][j] = at(1 + k + j);
                }
            }
        }
        preds
    }

    fn pack_head_grad(&self, g: &OutputGrads) -> FeatureMap {
        let k = self.config.classes;
        let per = 5 + k;
        let a_count = self.config.anchor_sizes.len();
        let (rows, cols) = (self.grid.rows, self.grid.cols);
        let cells = rows * cols;
        let mut map = FeatureMap::zeros(a_count * per, rows, cols);
        for cell in 0..cells {
            for a in 0..a_count {
                let i = cell * a_count + a;
                let mut put = |j: usize, v: f64| map.data[(a * per + j) * cells + cell] = v;
                put(0, g.obj[i]);
                for c in 0..k {
                    put(1 + c, g.cls[i * k + c]);
                }
                for j in 0..4 {
                    put(1 + k + j, g.reg[i][j]);
                }
            }
        }
        map
    }

    /// Parameter gradients given gradients at the head outputs.
    pub fn backward(&self, cache: &ForwardCache, grads: &OutputGrads) -> Params {
        let t = &self.params.tensors;
        let mut out = self.params.zeros_like();
        let g_head = self.pack_head_grad(grads);
        let (gw, rest) = out.tensors.split_at_mut(HEAD_B);
        let g_pool2 = conv3x3_backward(
            &cache.pool2,
            &t[HEAD_W].data,
            &g_head,
            &mut gw[HEAD_W].data,
            &mut rest[0].data,
            true,
        )
        .expect("input gradient requested");
        let g_act2 = avgpool_backward(&g_pool2, self.config.stride / 2, cache.pre2.h, cache.pre2.w);
        let g_pre2 = silu_backward(&cache.pre2, &g_act2);
        let (lo, hi) = out.tensors.split_at_mut(CONV2_B);
        let g_pool1 = conv3x3_backward(
            &cache.pool1,
            &t[CONV2_W].data,
            &g_pre2,
            &mut lo[CONV2_W].data,
            &mut hi[0].data,
            true,
        )
        .expect("input gradient requested");
        let g_act1 = avgpool_backward(&g_pool1, 2, cache.pre1.h, cache.pre1.w);
        let g_pre1 = silu_backward(&cache.pre1, &g_act1);
        let (lo, hi) = out.tensors.split_at_mut(CONV1_B);
        conv3x3_backward(
            &cache.input,
            &t[CONV1_W].data,
            &g_pre1,
            &mut lo[CONV1_W].data,
            &mut hi[0].data,
            false,
        );
        out
    }

    /// Anchor loss of one image and its gradient with respect to all parameters.
    pub fn loss_and_grad(
        &self,
        img: &ImageBuffer,
        targets: &AnchorTargets,
        sampled: &[usize],
        lambda: f64,
    ) -> Result<(LossBreakdown, Params)> {
        let (preds, cache) = self.forward_train(img)?;
        let (loss, og) = weighted_loss_with_grad(&preds, targets, sampled, 1.0, lambda);
        Ok((loss, self.backward(&cache, &og)))
    }

    pub fn param_checksum(&self) -> u64 {
        self.params
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3))
    }
}

/// SGD with classical momentum: `v = mu * v + g; theta -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Params,
}

impl Sgd {
    pub fn new(params: &Params, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(self.velocity.iter_mut()) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DetectorConfig {
        DetectorConfig {
            image_w: 32,
            image_h: 32,
            stride: 8,
            anchor_sizes: vec![8.0, 16.0],
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn zero_weights_give_neutral_outputs() {
        let model = DetectorModel::zeros(tiny_config()).unwrap();
        let img = ImageBuffer::filled(32, 32, [200, 10, 90]).unwrap();
        let p = model.forward(&img).unwrap();
        assert_eq!(p.len(), model.num_anchors());
        assert_eq!(p.len(), 4 * 4 * 2);
        for i in 0..p.len() {
            assert_eq!(p.objectness(i), 0.5);
            for q in p.class_probs(i) {
                assert!((q - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn extreme_pixels_give_finite_outputs() {
        let model = DetectorModel::new(tiny_config(), 4).unwrap();
        for v in [0u8, 255] {
            let p = model.forward(&ImageBuffer::filled(32, 32, [v, v, v]).unwrap()).unwrap();
            assert!(p.obj_logits.iter().chain(&p.cls_logits).all(|x| x.is_finite()));
        }
    }

    #[test]
    fn wrong_image_size_rejected() {
        let model = DetectorModel::zeros(tiny_config()).unwrap();
        assert!(model.forward(&ImageBuffer::filled(40, 32, [0; 3]).unwrap()).is_err());
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut model = DetectorModel::new(tiny_config(), 1).unwrap();
        let before = model.params.clone();
        let mut grads = model.params.zeros_like();
        grads.iter_mut().for_each(|g| *g = 1.0);
        let mut opt = Sgd::new(&model.params, 0.9, 0.0);
        opt.step(&mut model.params, &grads, 0.0);
        assert_eq!(model.params, before);
    }

    #[test]
    fn odd_stride_rejected() {
        let cfg = DetectorConfig {
            stride: 6 + 1,
            ..tiny_config()
        };
        assert!(DetectorModel::zeros(cfg).is_err());
    }
}
