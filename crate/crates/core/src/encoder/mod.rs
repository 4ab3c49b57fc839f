//! The shared embedding network.
//!
//! A network is an ordered list of [`Layer`]s applied to a single-channel
//! square patch. Parameters are stored as `f32`; activations, gradients and
//! all reductions use `f64`.

mod checkpoint;
mod network;

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{backward, embed, forward, Embeddings, ImageBatch, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    FullyConnected {
        out_dim: usize,
    },
}

/// Activation shape (channels, height, width). Fully connected outputs are
/// `(dim, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub input_side: usize,
    pub layers: Vec<Layer>,
}

impl Default for LayerSpec {
    /// Two conv/pool stages and two fully connected layers for 32x32 input.
    fn default() -> Self {
        Self {
            input_side: 32,
            layers: vec![
                Layer::Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                Layer::Relu,
                Layer::MaxPool {
                    kernel: 2,
                    stride: 2,
                },
                Layer::Conv {
                    out_channels: 32,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                Layer::Relu,
                Layer::MaxPool {
                    kernel: 2,
                    stride: 2,
                },
                Layer::FullyConnected { out_dim: 256 },
                Layer::Relu,
                Layer::FullyConnected { out_dim: 64 },
            ],
        }
    }
}

impl LayerSpec {
    /// Input shape followed by the output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input_side == 0 {
            return Err(Error::Shape("input_side must be positive".into()));
        }
        let mut shapes = vec![Shape {
            c: 1,
            h: self.input_side,
            w: self.input_side,
        }];
        for (i, layer) in self.layers.iter().enumerate() {
            let s = *shapes.last().unwrap();
            let bad = |m: &str| Err(Error::Shape(format!("layer {i} ({layer:?}): {m}")));
            let next = match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return bad("channels, kernel and stride must be positive");
                    }
                    if s.h + 2 * pad < kernel || s.w + 2 * pad < kernel {
                        return bad("kernel larger than padded input");
                    }
                    Shape {
                        c: out_channels,
                        h: (s.h + 2 * pad - kernel) / stride + 1,
                        w: (s.w + 2 * pad - kernel) / stride + 1,
                    }
                }
                Layer::Relu => s,
                Layer::MaxPool { kernel, stride } => {
                    if kernel == 0 || stride == 0 {
                        return bad("kernel and stride must be positive");
                    }
                    if s.h < kernel || s.w < kernel {
                        return bad("pool window larger than input");
                    }
                    Shape {
                        c: s.c,
                        h: (s.h - kernel) / stride + 1,
                        w: (s.w - kernel) / stride + 1,
                    }
                }
                Layer::FullyConnected { out_dim } => {
                    if out_dim == 0 {
                        return bad("out_dim must be positive");
                    }
                    Shape {
                        c: out_dim,
                        h: 1,
                        w: 1,
                    }
                }
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn embed_dim(&self) -> Result<usize> {
        Ok(self.shapes()?.last().unwrap().len())
    }

    /// Stable 64-bit digest of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("layer spec serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    fn slots(&self) -> Result<(Vec<Option<ParamSlot>>, usize)> {
        let shapes = self.shapes()?;
        let mut offset = 0;
        let mut slots = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = shapes[i];
            let (fan_in, outputs) = match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    ..
                } => (input.c * kernel * kernel, out_channels),
                Layer::FullyConnected { out_dim } => (input.len(), out_dim),
                _ => {
                    slots.push(None);
                    continue;
                }
            };
            let weight = offset..offset + fan_in * outputs;
            let bias = weight.end..weight.end + outputs;
            offset = bias.end;
            slots.push(Some(ParamSlot {
                weight,
                bias,
                fan_in,
            }));
        }
        Ok((slots, offset))
    }
}

/// Location of one layer's weights and biases in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    pub fan_in: usize,
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// All trainable weights of the network, flattened layer by layer
/// (weights, then biases).
#[derive(Debug, Clone)]
pub struct EncoderParams {
    spec: LayerSpec,
    values: Vec<f32>,
    slots: Vec<Option<ParamSlot>>,
    embed_dim: usize,
    /// Changes on every mutation; tapes record it to detect staleness.
    generation: u64,
}

impl PartialEq for EncoderParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EncoderParams {
    pub fn from_values(spec: LayerSpec, values: Vec<f32>) -> Result<Self> {
        let (slots, len) = spec.slots()?;
        if values.len() != len {
            return Err(Error::Shape(format!(
                "spec needs {len} parameters, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("parameter {i} is not finite")));
        }
        let embed_dim = spec.embed_dim()?;
        Ok(Self {
            spec,
            values,
            slots,
            embed_dim,
            generation: next_generation(),
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access; invalidates outstanding tapes.
    pub fn values_mut(&mut self) -> &mut [f32] {
        self.generation = next_generation();
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn slots(&self) -> &[Option<ParamSlot>] {
        &self.slots
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// True for weight entries, false for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for slot in self.slots.iter().flatten() {
            mask[slot.weight.clone()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    /// `sum(w^2)` over weights (biases excluded), accumulated in f64.
    pub fn weight_sq_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|s| self.values[s.weight.clone()].iter())
            .map(|&w| (w as f64) * (w as f64))
            .sum()
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
pub fn init_params(spec: &LayerSpec, seed: u64) -> Result<EncoderParams> {
    let (slots, len) = spec.slots()?;
    let mut values = vec![0.0f32; len];
    let mut rng = rng::seeded(seed);
    for slot in slots.iter().flatten() {
        let std = (2.0 / slot.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in &mut values[slot.weight.clone()] {
            *w = normal.sample(&mut rng) as f32;
        }
    }
    EncoderParams::from_values(spec.clone(), values)
}

/// Parameter gradients, aligned with [`EncoderParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }
}

/// Plain SGD with weight decay on weights only:
/// `w <- w - lr * (g + weight_decay * w)`, `b <- b - lr * g`.
///
/// Nothing is written if any gradient is non-finite.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &Gradients,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    check_step(params, grads, lr, weight_decay)?;
    let mask = params.weight_mask();
    for ((w, &g), &is_weight) in params.values_mut().iter_mut().zip(&grads.values).zip(&mask) {
        let w64 = *w as f64;
        let decay = if is_weight { weight_decay * w64 } else { 0.0 };
        *w = (w64 - lr * (g + decay)) as f32;
    }
    Ok(())
}

/// SGD with classical momentum: `v <- m v + (g + wd w)`, `w <- w - lr v`.
pub fn sgd_momentum_step(
    params: &mut EncoderParams,
    grads: &Gradients,
    velocity: &mut Vec<f64>,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
) -> Result<()> {
    check_step(params, grads, lr, weight_decay)?;
    if velocity.len() != params.len() {
        *velocity = vec![0.0; params.len()];
    }
    let mask = params.weight_mask();
    for (((w, &g), &is_weight), v) in params
        .values_mut()
        .iter_mut()
        .zip(&grads.values)
        .zip(&mask)
        .zip(velocity.iter_mut())
    {
        let w64 = *w as f64;
        let decay = if is_weight { weight_decay * w64 } else { 0.0 };
        *v = momentum * *v + g + decay;
        *w = (w64 - lr * *v) as f32;
    }
    Ok(())
}

fn check_step(params: &EncoderParams, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
    if grads.values.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.values.len(),
            params.len()
        )));
    }
    if !(lr >= 0.0) || !(weight_decay >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need lr >= 0 and weight_decay >= 0, got {lr} and {weight_decay}"
        )));
    }
    if let Some(i) = grads.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    Ok(())
}
