// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with hand-written gradients.
//!
//! Pre-norm blocks (LayerNorm, causal multi-head attention, LayerNorm,
//! 4x GELU MLP), learned absolute positions, a final LayerNorm and an output
//! head tied to the token embedding. All parameters live in one flat buffer;
//! layers that share parameters point at the same storage block, so an
//! update through one alias is seen by all of them and their gradients sum.

mod checkpoint;
mod forward;
mod scalar;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use forward::{ActivationCache, Batch, ForwardOutput, Intervention};
pub(crate) use forward::argmax as forward_argmax;
pub use scalar::{matmul, Scalar};

use crate::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// `share_map[l]` is the layer whose parameters layer `l` uses;
    /// `None` gives every layer its own.
    #[serde(default)]
    pub share_map: Option<Vec<usize>>,
}

impl ModelConfig {
    pub fn new(n_layers: usize, hidden_dim: usize, n_heads: usize, max_seq_len: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_layers,
            hidden_dim,
            n_heads,
            max_seq_len,
            vocab_size,
            share_map: None,
        }
    }

    /// Tie the lower half of the layers to layer 0 and the upper half to
    /// layer `n_layers / 2`.
    pub fn with_halves_shared(mut self) -> Self {
        let half = self.n_layers / 2;
        self.share_map = Some((0..self.n_layers).map(|l| if l < half { 0 } else { half }).collect());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.hidden_dim == 0 || self.n_heads == 0 {
            return bad("n_layers, hidden_dim and n_heads must be positive".into());
        }
        if self.hidden_dim % self.n_heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.max_seq_len == 0 || self.vocab_size == 0 {
            return bad("max_seq_len and vocab_size must be positive".into());
        }
        if let Some(map) = &self.share_map {
            if map.len() != self.n_layers {
                return bad(format!("share_map has {} entries for {} layers", map.len(), self.n_layers));
            }
            for (l, &t) in map.iter().enumerate() {
                if t > l || map[t] != t {
                    return bad(format!(
                        "share_map[{l}] = {t} must name an earlier layer that owns its parameters"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Storage block used by each layer.
    pub fn layer_blocks(&self) -> Vec<usize> {
        match &self.share_map {
            None => (0..self.n_layers).collect(),
            Some(map) => {
                let mut owners: Vec<usize> = Vec::new();
                map.iter()
                    .map(|&t| match owners.iter().position(|&o| o == t) {
                        Some(b) => b,
                        None => {
                            owners.push(t);
                            owners.len() - 1
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.layer_blocks().iter().max().map_or(0, |m| m + 1)
    }

    /// `V·D + P·D + B·(12·D² + 13·D) + 2·D`.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        (self.vocab_size + self.max_seq_len) * d + self.n_blocks() * (12 * d * d + 13 * d) + 2 * d
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

/// Parameter class, used by the optimizer and the gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamClass {
    Embedding,
    AttentionWeight,
    AttentionBias,
    MlpWeight,
    MlpBias,
    Norm,
}

impl ParamClass {
    /// Whether decoupled weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, ParamClass::AttentionWeight | ParamClass::MlpWeight)
    }
}

/// Offsets of one storage block's tensors.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

/// A named slice of the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct TensorInfo {
    pub name: String,
    pub range: Range<usize>,
    pub shape: Vec<usize>,
    pub class: ParamClass,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub wte: Range<usize>,
    pub wpe: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    /// Every tensor in canonical order.
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let mut tensors = Vec::new();
        let mut at = 0;
        let mut take = |name: String, shape: Vec<usize>, class: ParamClass| {
            let n: usize = shape.iter().product();
            let r = at..at + n;
            at += n;
            tensors.push(TensorInfo {
                name,
                range: r.clone(),
                shape,
                class,
            });
            r
        };
        use ParamClass::*;
        let wte = take("wte".into(), vec![cfg.vocab_size, d], Embedding);
        let wpe = take("wpe".into(), vec![cfg.max_seq_len, d], Embedding);
        let mut blocks = Vec::new();
        for b in 0..cfg.n_blocks() {
            let p = |s: &str| format!("blocks.{b}.{s}");
            blocks.push(BlockLayout {
                ln1_g: take(p("ln1_g"), vec![d], Norm),
                ln1_b: take(p("ln1_b"), vec![d], Norm),
                w_qkv: take(p("w_qkv"), vec![d, 3 * d], AttentionWeight),
                b_qkv: take(p("b_qkv"), vec![3 * d], AttentionBias),
                w_o: take(p("w_o"), vec![d, d], AttentionWeight),
                b_o: take(p("b_o"), vec![d], AttentionBias),
                ln2_g: take(p("ln2_g"), vec![d], Norm),
                ln2_b: take(p("ln2_b"), vec![d], Norm),
                w_fc: take(p("w_fc"), vec![d, 4 * d], MlpWeight),
                b_fc: take(p("b_fc"), vec![4 * d], MlpBias),
                w_proj: take(p("w_proj"), vec![4 * d, d], MlpWeight),
                b_proj: take(p("b_proj"), vec![d], MlpBias),
            });
        }
        let lnf_g = take("lnf_g".into(), vec![d], Norm);
        let lnf_b = take("lnf_b".into(), vec![d], Norm);
        Layout {
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            tensors,
            total: at,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Weights plus the layout needed to address them.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
    /// Storage block of every layer.
    pub layer_blocks: Vec<usize>,
}

impl<T: Scalar> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Normal(0, 0.02) weights, residual output projections scaled by
/// `1/sqrt(2·n_layers)`, zero biases, unit norm gains.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut params = vec![T::zero(); layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 0.02;
    let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let resid = Normal::new(0.0, resid_std).unwrap();
    for t in &layout.tensors {
        let slice = &mut params[t.range.clone()];
        let is_resid = t.name.ends_with("w_o") || t.name.ends_with("w_proj");
        match t.class {
            ParamClass::Norm if t.name.ends_with("_g") => slice.fill(T::one()),
            ParamClass::Norm | ParamClass::AttentionBias | ParamClass::MlpBias => {}
            _ => {
                let dist = if is_resid { &resid } else { &normal };
                for x in slice.iter_mut() {
                    *x = T::of(dist.sample(&mut rng));
                }
            }
        }
    }
    Ok(Model {
        layer_blocks: config.layer_blocks(),
        config: config.clone(),
        layout,
        params,
    })
}

impl<T: Scalar> Model<T> {
    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "{} parameters given, config needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Model {
            layer_blocks: config.layer_blocks(),
            config,
            layout,
            params,
        })
    }

    /// The same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&x| U::of(x.f64())).collect(),
            layer_blocks: self.layer_blocks.clone(),
        }
    }

    /// Parameters of the block used by `layer`.
    pub fn block(&self, layer: usize) -> &BlockLayout {
        &self.layout.blocks[self.layer_blocks[layer]]
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.tensor(name).map(|t| &self.params[t.range.clone()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.tensor(name)?.range.clone();
        Some(&mut self.params[r])
    }

    /// Weight-decay mask over the flat buffer.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for t in &self.layout.tensors {
            if t.class.decays() {
                mask[t.range.clone()].fill(true);
            }
        }
        mask
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.layout.tensors {
            if self.params[t.range.clone()].iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { what: format!("parameter {}", t.name) });
            }
        }
        Ok(())
    }
}
