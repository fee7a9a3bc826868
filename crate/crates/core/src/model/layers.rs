use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::Result;
use crate::numerics::nn::{Conv1d, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{Graph, ParamStore, Var};

/// Valid-row mask for a sequence padded from `len` to `padded` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqMask {
    weights: Arc<[f64]>,
    keys: Vec<bool>,
}

impl SeqMask {
    pub fn new(len: usize, padded: usize) -> Self {
        let keys: Vec<bool> = (0..padded).map(|i| i < len).collect();
        Self {
            weights: keys.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
            keys,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn keys(&self) -> &[bool] {
        &self.keys
    }
}

/// Zeroes padded rows.
pub(crate) fn apply_mask(g: &mut Graph, x: Var, mask: Option<&SeqMask>) -> Var {
    match mask {
        Some(m) => g
            .tape
            .mul_rows(x, m.weights.clone())
            .expect("mask length matches padded sequence"),
        None => x,
    }
}

#[derive(Clone, Debug)]
struct FftLayer {
    attention: MultiHeadAttention,
    attention_norm: LayerNorm,
    conv1: Conv1d,
    conv2: Conv1d,
    conv_norm: LayerNorm,
}

impl FftLayer {
    fn forward(&self, g: &mut Graph, x: Var, mask: Option<&SeqMask>, dropout: f64) -> Result<Var> {
        let keys = mask.map(SeqMask::keys);
        let a = self.attention.forward(g, x, keys, 0.0)?;
        let a = g.dropout(a, dropout)?;
        let x = g.tape.add(x, a)?;
        let x = self.attention_norm.forward(g, x)?;
        let x = apply_mask(g, x, mask);

        let c = self.conv1.forward(g, x)?;
        let c = g.tape.relu(c);
        let c = apply_mask(g, c, mask);
        let c = self.conv2.forward(g, c)?;
        let c = g.dropout(c, dropout)?;
        let x = g.tape.add(x, c)?;
        let x = self.conv_norm.forward(g, x)?;
        Ok(apply_mask(g, x, mask))
    }
}

/// Feed-forward Transformer stack: post-norm self-attention and
/// convolutional blocks with residual connections.
#[derive(Clone, Debug)]
pub struct FftStack {
    layers: Vec<FftLayer>,
}

impl FftStack {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = format!("{name}.layers.{i}");
            layers.push(FftLayer {
                attention: MultiHeadAttention::new(store, rng, &format!("{p}.attention"), cfg.d_model, cfg.n_heads)?,
                attention_norm: LayerNorm::new(store, &format!("{p}.attention_norm"), cfg.d_model),
                conv1: Conv1d::new(
                    store,
                    rng,
                    &format!("{p}.conv1"),
                    cfg.d_model,
                    cfg.d_ff,
                    cfg.kernel_size,
                ),
                conv2: Conv1d::new(
                    store,
                    rng,
                    &format!("{p}.conv2"),
                    cfg.d_ff,
                    cfg.d_model,
                    cfg.kernel_size,
                ),
                conv_norm: LayerNorm::new(store, &format!("{p}.conv_norm"), cfg.d_model),
            });
        }
        Ok(Self { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&SeqMask>, dropout: f64) -> Result<Var> {
        self.layers
            .iter()
            .try_fold(x, |x, layer| layer.forward(g, x, mask, dropout))
    }
}

/// Two conv/ReLU/LayerNorm/dropout blocks and a linear read-out; shared
/// architecture of the duration and pitch predictors.
#[derive(Clone, Debug)]
pub struct Predictor {
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    projection: Linear,
}

impl Predictor {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig, outputs: usize) -> Self {
        let c = cfg.predictor_channels;
        Self {
            conv1: Conv1d::new(
                store,
                rng,
                &format!("{name}.conv1"),
                cfg.d_model,
                c,
                cfg.predictor_kernel,
            ),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            conv2: Conv1d::new(store, rng, &format!("{name}.conv2"), c, c, cfg.predictor_kernel),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            projection: Linear::new(store, rng, &format!("{name}.projection"), c, outputs),
        }
    }

    /// `n × outputs`; padded rows are zero.
    pub fn forward(&self, g: &mut Graph, h: Var, mask: Option<&SeqMask>, dropout: f64) -> Result<Var> {
        let x = apply_mask(g, h, mask);
        let x = self.conv1.forward(g, x)?;
        let x = g.tape.relu(x);
        let x = self.norm1.forward(g, x)?;
        let x = g.dropout(x, dropout)?;
        let x = apply_mask(g, x, mask);
        let x = self.conv2.forward(g, x)?;
        let x = g.tape.relu(x);
        let x = self.norm2.forward(g, x)?;
        let x = g.dropout(x, dropout)?;
        let x = self.projection.forward(g, x)?;
        Ok(apply_mask(g, x, mask))
    }
}
