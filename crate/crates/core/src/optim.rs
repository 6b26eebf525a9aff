// SPDX-License-Identifier: MIT OR Apache-2.0

//! AdamW with decoupled weight decay, linear warmup and epoch batching.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Model, Scalar};
use crate::vocab::TokenSequence;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_steps: 2000,
            grad_clip: None,
        }
    }
}

impl AdamWConfig {
    /// Linear ramp from 0 to `lr` over `warmup_steps`, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Moments and step counter. Update `t` (1-based) uses `lr_at(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        OptimizerState {
            config,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            step: 0,
        }
    }

    /// One AdamW update of raw buffers. On a non-finite result the index of
    /// the first bad parameter is returned and nothing is written.
    pub fn step_slices(&mut self, params: &mut [T], grads: &[T], decay: &[bool]) -> std::result::Result<(), usize> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), decay.len());
        let c = self.config;
        let t = self.step + 1;
        let lr = c.lr_at(t);
        let mut scale = 1.0;
        if let Some(max) = c.grad_clip {
            let norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
            if norm > max {
                scale = max / norm;
            }
        }
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (lr_t, shrink, scale) = (T::of(lr), T::of(1.0 - lr * c.weight_decay), T::of(scale));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));

        let mut new_m = Vec::with_capacity(params.len());
        let mut new_v = Vec::with_capacity(params.len());
        let mut new_w = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let g = grads[i] * scale;
            let m = b1 * self.m[i] + one_b1 * g;
            let v = b2 * self.v[i] + one_b2 * g * g;
            let mut w = params[i];
            if decay[i] {
                w = w * shrink;
            }
            w = w - lr_t * (m * inv_bc1) / ((v * inv_bc2).sqrt() + eps);
            if !w.is_finite() {
                return Err(i);
            }
            new_m.push(m);
            new_v.push(v);
            new_w.push(w);
        }
        params.copy_from_slice(&new_w);
        self.m = new_m;
        self.v = new_v;
        self.step = t;
        Ok(())
    }

    /// AdamW update of a model; decay applies to its weight matrices only.
    pub fn adamw_step(&mut self, model: &mut Model<T>, grads: &[T]) -> Result<()> {
        let mask = model.decay_mask();
        self.step_slices(&mut model.params, grads, &mask).map_err(|i| {
            let name = model
                .layout
                .tensors
                .iter()
                .find(|t| t.range.contains(&i))
                .map_or("?", |t| t.name.as_str());
            Error::NonFinite {
                what: format!("update of tensor {name} (element {i})"),
            }
        })
    }
}

/// One epoch of batches: a uniform shuffle of all examples, split into
/// buckets of equal layout, chunked (last partial batch kept), then the
/// batch order shuffled. Returns example indices.
pub fn make_batches(examples: &[TokenSequence], batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut buckets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in order {
        let e = &examples[i];
        buckets.entry((e.input.len(), e.target.len())).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = buckets
        .into_values()
        .flat_map(|b| b.chunks(batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect();
    batches.shuffle(&mut rng);
    batches
}

/// Seed of epoch `epoch` in a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
