//! Small 2D encoder-decoder with skip connections.
//!
//! Each level is two 3x3 convolutions with ReLU. The encoder halves the
//! resolution with 2x2 max pooling and doubles the width; the decoder
//! upsamples by nearest neighbour, concatenates the matching encoder
//! features and convolves back down. A 1x1 convolution produces raw
//! per-class logits.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, RngState};
pub use optim::{poly_lr, Adam};
pub use train::{infer, predict_images, train_step, ImagePrediction, Objective, StepLog, TrainConfig, Trainer};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_DEPTH: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Number of downsamplings.
    pub depth: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { in_channels: 1, num_classes: 2, base_width: 8, depth: 2, seed: 0 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::InvalidInput("in_channels and base_width must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidInput(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            return Err(Error::InvalidInput(format!("depth must lie in 1..={MAX_DEPTH}, got {}", self.depth)));
        }
        Ok(())
    }

    /// Feature width at level `i`; level `depth` is the bottleneck.
    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Every parameter as `(name, shape)` in forward order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = self.in_channels;
        for level in 0..=self.depth {
            let c = self.width(level);
            let tag = if level == self.depth { "mid".to_string() } else { format!("enc{level}") };
            conv(format!("{tag}.conv1"), cin, c, 3);
            conv(format!("{tag}.conv2"), c, c, 3);
            cin = c;
        }
        for level in (0..self.depth).rev() {
            let c = self.width(level);
            conv(format!("dec{level}.conv1"), self.width(level + 1) + c, c, 3);
            conv(format!("dec{level}.conv2"), c, c, 3);
        }
        conv("head".into(), self.width(0), self.num_classes, 1);
        out
    }
}

/// Closed form: a `k x k` conv from `a` to `b` channels holds `k^2 a b + b`
/// values.
pub fn param_count(config: &BackboneConfig) -> usize {
    let conv = |a: usize, b: usize, k: usize| k * k * a * b + b;
    let w = |l: usize| config.base_width << l;
    let mut total = conv(config.in_channels, w(0), 3) + conv(w(0), w(0), 3);
    for l in 1..=config.depth {
        total += conv(w(l - 1), w(l), 3) + conv(w(l), w(l), 3);
    }
    for l in 0..config.depth {
        total += conv(w(l + 1) + w(l), w(l), 3) + conv(w(l), w(l), 3);
    }
    total + conv(w(0), config.num_classes, 1)
}

/// How raw logits are read at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Evidential,
    Softmax,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: BackboneConfig,
    pub head: Head,
    pub params: BTreeMap<String, Tensor>,
    /// Optimiser steps taken so far.
    pub step: u64,
}

impl ModelState {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::InvalidInput(format!("model has no parameter {name:?}")))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.params.values().for_each(Tensor::zero_grad);
    }

    /// Checks names, shapes and finiteness against the config layout.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layout = self.config.layout();
        if layout.len() != self.params.len() {
            return Err(Error::InvalidInput(format!("expected {} parameters, found {}", layout.len(), self.params.len())));
        }
        for (name, shape) in layout {
            let p = self.param(&name)?;
            if p.shape() != shape.as_slice() {
                return Err(Error::shape("ModelState", format!("{name}: {:?}, expected {shape:?}", p.shape())));
            }
            if p.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}

/// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
pub fn init(config: &BackboneConfig, head: Head) -> Result<ModelState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = BTreeMap::new();
    for (name, shape) in config.layout() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            let std = (2.0 / shape[1..].iter().product::<usize>() as f64).sqrt();
            (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        params.insert(name, Tensor::param(&shape, data)?);
    }
    Ok(ModelState { config: config.clone(), head, params, step: 0 })
}

fn conv_block(x: &Tensor, state: &ModelState, tag: &str) -> Result<Tensor> {
    let conv = |x: &Tensor, name: &str| -> Result<Tensor> {
        let w = state.param(&format!("{tag}.{name}.weight"))?;
        let b = state.param(&format!("{tag}.{name}.bias"))?;
        Ok(x.conv2d(w, Some(b), 1)?.relu())
    };
    conv(&conv(x, "conv1")?, "conv2")
}

/// Raw logits `[B, C, H, W]` for input `[B, in_channels, H, W]`.
pub fn forward(x: &Tensor, state: &ModelState) -> Result<Tensor> {
    let cfg = &state.config;
    let s = x.shape();
    let factor = 1 << cfg.depth;
    if s.len() != 4 || s[1] != cfg.in_channels {
        return Err(Error::shape("forward", format!("expected [B, {}, H, W], got {s:?}", cfg.in_channels)));
    }
    if s[2] % factor != 0 || s[3] % factor != 0 {
        return Err(Error::shape("forward", format!("spatial dims {}x{} not divisible by {factor}", s[2], s[3])));
    }
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut h = x.clone();
    for level in 0..cfg.depth {
        let f = conv_block(&h, state, &format!("enc{level}"))?;
        h = f.max_pool2d(2)?;
        skips.push(f);
    }
    h = conv_block(&h, state, "mid")?;
    for level in (0..cfg.depth).rev() {
        let up = h.upsample_nearest(2)?;
        let cat = Tensor::concat(&[&up, &skips[level]], 1)?;
        h = conv_block(&cat, state, &format!("dec{level}"))?;
    }
    h.conv2d(state.param("head.weight")?, Some(state.param("head.bias")?), 0)
}
