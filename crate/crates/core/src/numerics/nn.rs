//! Parameter storage and the layers the network is assembled from.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(Error::shape("ParamStore::set", t.numel(), data.len()));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    /// Collects the gradient of every parameter bound in `graph`; parameters
    /// the loss does not reach get zeros.
    pub fn collect_grads(&self, graph: &Graph, grads: &mut Gradients) -> Vec<Vec<f64>> {
        self.ids()
            .map(|id| {
                grads
                    .take(graph.param(id))
                    .unwrap_or_else(|| vec![0.0; self.get(id).numel()])
            })
            .collect()
    }

    /// Writes per-parameter gradients into each tensor's `grad` buffer.
    pub fn set_grads(&mut self, grads: Vec<Vec<f64>>) -> Result<()> {
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            t.set_grad(g)?;
        }
        Ok(())
    }
}

/// Train mode enables dropout with a seeded generator; eval mode is
/// deterministic and dropout is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

/// A tape with every parameter of a store bound as a leaf.
pub struct Graph {
    pub tape: Tape,
    params: Vec<Var>,
    rng: Option<ChaCha8Rng>,
}

impl Graph {
    pub fn new(store: &ParamStore, mode: Mode) -> Self {
        let mut tape = Tape::new();
        let params = store.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        let rng = match mode {
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Mode::Eval => None,
        };
        Self { tape, params, rng }
    }

    /// Wraps an existing tape whose leaves `params` hold a store's
    /// parameters in store order (e.g. inside [`grad_check`](super::grad_check)).
    pub fn with_bound_params(tape: Tape, params: Vec<Var>, mode: Mode) -> Self {
        let rng = match mode {
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Mode::Eval => None,
        };
        Self { tape, params, rng }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout: kept units are scaled by `1/(1−p)` so evaluation
    /// needs no rescaling.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {p}")));
        }
        let keep = 1.0 - p;
        let n = self.tape.value(x).numel();
        let mask: Arc<[f64]> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.tape.mul_const(x, mask)
    }
}

/// Deterministic generator used for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
    t
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[d_in, d_out], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[d_out], bound));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.tape.matmul(x, g.param(self.weight))?;
        g.tape.add_row(y, g.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[kernel, c_in, c_out], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[c_out], bound));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.tape.conv1d(x, g.param(self.weight), Some(g.param(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0));
        let offset = store.add(format!("{name}.offset"), Tensor::zeros(&[d]));
        Self { gain, offset }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.tape
            .layer_norm(x, g.param(self.gain), g.param(self.offset), LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, count: usize, d: usize) -> Self {
        let scale = (d as f64).powf(-0.5);
        let mut t = Tensor::zeros(&[count, d]);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.sample::<f64, _>(StandardNormal) * scale);
        let table = store.add(format!("{name}.table"), t);
        Self { table }
    }

    pub fn lookup(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        g.tape.gather_rows(g.param(self.table), ids.into())
    }
}

/// Scaled dot-product self-attention over all heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), d_model, d_model),
            key: Linear::new(store, rng, &format!("{name}.key"), d_model, d_model),
            value: Linear::new(store, rng, &format!("{name}.value"), d_model, d_model),
            output: Linear::new(store, rng, &format!("{name}.output"), d_model, d_model),
            n_heads,
        })
    }

    /// Returns the attended output `[t×d]` and the per-head attention
    /// weights `[t×t]` (before attention dropout).
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        x: Var,
        key_mask: Option<&[bool]>,
        dropout: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let d = g.tape.value(x).cols();
        if !d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {d} is not divisible by n_heads {}",
                self.n_heads
            )));
        }
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.tape.slice_cols(q, h * dh, dh)?;
            let kh = g.tape.slice_cols(k, h * dh, dh)?;
            let vh = g.tape.slice_cols(v, h * dh, dh)?;
            let scores = g.tape.matmul_nt(qh, kh)?;
            let scores = g.tape.scale(scores, scale);
            let probs = g.tape.softmax_rows(scores, key_mask)?;
            weights.push(probs);
            let probs = g.dropout(probs, dropout)?;
            heads.push(g.tape.matmul(probs, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.tape.concat_cols(&heads)?
        };
        let out = self.output.forward(g, joined)?;
        Ok((out, weights))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, key_mask: Option<&[bool]>, dropout: f64) -> Result<Var> {
        self.forward_with_weights(g, x, key_mask, dropout).map(|(out, _)| out)
    }
}
