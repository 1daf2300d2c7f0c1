//! Flat `key = value` configuration merged with command-line overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use stac_core::augment::AugMode;
use stac_core::detector::{AssignConfig, DetectorConfig};
use stac_core::pipeline::TrainConfig;
use stac_core::{Error, Result};

/// Every key any subcommand understands.
pub const KNOWN_KEYS: &[&str] = &[
    // gen-data
    "n",
    "width",
    "height",
    "classes",
    "min_objects",
    "max_objects",
    "min_size",
    "max_size",
    "exposure_min",
    "exposure_max",
    // split
    "fraction",
    "fold",
    // training
    "seed",
    "lr",
    "momentum",
    "weight_decay",
    "steps",
    "batch_size",
    "lambda",
    "lambda_u",
    "tau",
    "nms_threshold",
    "aug_mode",
    "sample_cap",
    // detector
    "stride",
    "anchor_sizes",
    "conv1_channels",
    "conv2_channels",
    "pos_iou",
    "neg_iou",
    // ablate
    "kind",
    "taus",
    "lambda_us",
    "pool",
    "modes",
    // ssl-demo
    "method",
    "labeled",
    "unlabeled",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn check_key(key: &str) -> Result<()> {
    if KNOWN_KEYS.contains(&key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown config key '{key}'")))
    }
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            check_key(k)?;
            if values.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("config line {}: duplicate key '{k}'", n + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config '{}': {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    /// Apply `key=value` overrides, then any typed flags that were given.
    pub fn override_with(&mut self, sets: &[String], flags: &[(&str, Option<String>)]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{s}'")))?;
            check_key(k.trim())?;
            self.values.insert(k.trim().to_string(), v.trim().to_string());
        }
        for (k, v) in flags {
            check_key(k)?;
            if let Some(v) = v {
                self.values.insert((*k).to_string(), v.clone());
            }
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for key '{key}'"))),
        }
    }

    pub fn get_list<T: FromStr + Clone>(&self, key: &str, default: &[T]) -> Result<Vec<T>> {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid list item '{s}' for key '{key}'")))
                })
                .collect(),
        }
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let mode: AugMode = match self.values.get("aug_mode") {
            Some(v) => v.parse()?,
            None => d.aug_mode,
        };
        let cfg = TrainConfig {
            lr: self.get("lr", d.lr)?,
            momentum: self.get("momentum", d.momentum)?,
            weight_decay: self.get("weight_decay", d.weight_decay)?,
            steps: self.get("steps", d.steps)?,
            batch_size: self.get("batch_size", d.batch_size)?,
            lambda: self.get("lambda", d.lambda)?,
            lambda_u: self.get("lambda_u", d.lambda_u)?,
            tau: self.get("tau", d.tau)?,
            nms_threshold: self.get("nms_threshold", d.nms_threshold)?,
            aug_mode: mode,
            sample_cap: self.get("sample_cap", d.sample_cap)?,
            seed: self.get("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn detector_config(&self, image_w: usize, image_h: usize, classes: usize) -> Result<DetectorConfig> {
        let d = DetectorConfig::default();
        let cfg = DetectorConfig {
            image_w,
            image_h,
            classes,
            stride: self.get("stride", d.stride)?,
            anchor_sizes: self.get_list("anchor_sizes", &d.anchor_sizes)?,
            conv1_channels: self.get("conv1_channels", d.conv1_channels)?,
            conv2_channels: self.get("conv2_channels", d.conv2_channels)?,
            assign: AssignConfig {
                pos_iou: self.get("pos_iou", d.assign.pos_iou)?,
                neg_iou: self.get("neg_iou", d.assign.neg_iou)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
