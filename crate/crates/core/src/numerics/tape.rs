//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to run its vector-Jacobian product. Inputs always have smaller
//! indices than outputs, so a single reverse sweep is a valid topological
//! order.

use std::sync::Arc;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    MulConst(Var, Arc<[f64]>),
    MulRows(Var, Arc<[f64]>),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: usize,
        c_in: usize,
        c_out: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        offset: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols {
        input: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        input: Var,
        index: Arc<[usize]>,
    },
    Reshape(Var),
    Sum(Var),
    Mse {
        pred: Var,
        target: Arc<[f64]>,
        row_weight: Option<Arc<[f64]>>,
        denom: f64,
    },
    LinComb(Vec<(Var, f64)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::AddConst(..) => "add_const",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::MulRows(..) => "mul_rows",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::Relu(..) => "relu",
            Op::Conv1d { .. } => "conv1d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mse { .. } => "mse",
            Op::LinComb(..) => "lin_comb",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } | Op::MatMulNt { a, b, .. } => vec![*a, *b],
            Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::MulRows(a, _)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Sum(a) => vec![*a],
            Op::Conv1d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::LayerNorm {
                input, gain, offset, ..
            } => vec![*input, *gain, *offset],
            Op::SliceCols { input, .. } | Op::GatherRows { input, .. } => vec![*input],
            Op::ConcatCols(vs) => vs.clone(),
            Op::Mse { pred, .. } => vec![*pred],
            Op::LinComb(terms) => terms.iter().map(|(v, _)| *v).collect(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded operation, as exposed for execution-trace inspection.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub index: usize,
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub shape: Vec<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, "2-D tensor", format!("{s:?}"))),
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as an input; it is differentiated iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(index, n)| TraceEntry {
                index,
                op: n.op.name(),
                inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                shape: n.value.shape().to_vec(),
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let x = self.value(a);
        let data = x
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `a[r×c] + b[c]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c) = dims2(self.value(a), "add_row")?;
        if self.value(b).numel() != c {
            return Err(Error::shape("add_row", c, self.value(b).numel()));
        }
        let bias = self.value(b).data();
        let mut out = self.value(a).clone().with_requires_grad(false);
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    /// Adds a non-differentiable tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape(
                "add_const",
                format!("{:?}", self.shape(a)),
                format!("{:?}", c.shape()),
            ));
        }
        let x = self.value(a);
        let data = x.data().iter().zip(c.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddConst(a)))
    }

    /// Elementwise product with a constant factor (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Arc<[f64]>) -> Result<Var> {
        if factor.len() != self.value(a).numel() {
            return Err(Error::shape("mul_const", self.value(a).numel(), factor.len()));
        }
        let x = self.value(a);
        let data = x.data().iter().zip(factor.iter()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst(a, factor)))
    }

    /// Scales row `r` of a matrix by `weights[r]` (padding masks).
    pub fn mul_rows(&mut self, a: Var, weights: Arc<[f64]>) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "mul_rows")?;
        if weights.len() != r {
            return Err(Error::shape("mul_rows", r, weights.len()));
        }
        let mut out = self.value(a).clone().with_requires_grad(false);
        for (row, &w) in out.data_mut().chunks_mut(c).zip(weights.iter()) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        Ok(self.push(out, Op::MulRows(a, weights)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.map(a, |v| v * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dim {k}"), k2));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("inner dim {k}"), k2));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNt { a, b, m, k, n }))
    }

    /// 1-D cross-correlation along the time axis with `(k−1)/2` zero padding
    /// on each side. `input` is `[t×c_in]`, `weight` is `[k×c_in×c_out]`,
    /// `bias` is `[c_out]`; the output is `[t×c_out]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (t, c_in) = dims2(self.value(input), "conv1d")?;
        let (kernel, w_in, c_out) = match self.shape(weight) {
            [k, i, o] => (*k, *i, *o),
            s => return Err(Error::shape("conv1d", "[k, c_in, c_out] weight", format!("{s:?}"))),
        };
        if kernel % 2 == 0 {
            return Err(Error::shape("conv1d", "odd kernel size", kernel));
        }
        if w_in != c_in {
            return Err(Error::shape("conv1d", format!("weight input channels {c_in}"), w_in));
        }
        if t == 0 {
            return Err(Error::shape("conv1d", "input length >= 1", 0));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != c_out {
                return Err(Error::shape("conv1d bias", c_out, self.value(b).numel()));
            }
        }
        let mut out = vec![0.0; t * c_out];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bv);
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let pad = kernel / 2;
        for tap in 0..kernel {
            if let Some((lo, hi, shift)) = tap_range(t, tap, pad) {
                let rows = hi - lo;
                let src = ((lo as isize + shift) as usize) * c_in;
                gemm_nn(
                    rows,
                    c_in,
                    c_out,
                    &x[src..src + rows * c_in],
                    &w[tap * c_in * c_out..(tap + 1) * c_in * c_out],
                    &mut out[lo * c_out..hi * c_out],
                );
            }
        }
        let value = Tensor::new(vec![t, c_out], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                kernel,
                c_in,
                c_out,
            },
        ))
    }

    /// Row-wise layer normalization with biased variance.
    pub fn layer_norm(&mut self, input: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2(self.value(input), "layer_norm")?;
        if c == 0 {
            return Err(Error::shape("layer_norm", "c >= 1", 0));
        }
        if self.value(gain).numel() != c || self.value(offset).numel() != c {
            return Err(Error::shape("layer_norm", c, self.value(gain).numel()));
        }
        let x = self.value(input).data();
        let g = self.value(gain).data();
        let b = self.value(offset).data();
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                normalized[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                input,
                gain,
                offset,
                normalized,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax. Columns where `key_mask` is `false` receive exactly
    /// zero weight and do not take part in the normalization.
    pub fn softmax_rows(&mut self, input: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = dims2(self.value(input), "softmax_rows")?;
        if let Some(m) = key_mask {
            if m.len() != c {
                return Err(Error::shape("softmax_rows mask", c, m.len()));
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::shape("softmax_rows mask", "at least one key", 0));
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
        let x = self.value(input).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::Softmax(input)))
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(input), "slice_cols")?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("<= {c} columns"), start + len));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        Ok(self.push(value, Op::SliceCols { input, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "at least one part", 0))?;
        let (r, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", r, pr));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Output row `r` is input row `index[r]`; used for embedding lookup and
    /// for duration-driven upsampling.
    pub fn gather_rows(&mut self, input: Var, index: Arc<[usize]>) -> Result<Var> {
        let (r, c) = dims2(self.value(input), "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::OutOfRange(format!("row index {bad} >= {r}")));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![index.len(), c], out)?;
        Ok(self.push(value, Op::GatherRows { input, index }))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().with_requires_grad(false).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    /// Mean squared error against a constant target, averaged over the
    /// elements of rows whose weight is nonzero. Row weights must be 0 or 1.
    pub fn mse(&mut self, pred: Var, target: &Tensor, row_weight: Option<&[f64]>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?}", p.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        let rows = p.rows();
        let cols = p.cols();
        if let Some(w) = row_weight {
            if w.len() != rows {
                return Err(Error::shape("mse row weights", rows, w.len()));
            }
        }
        let weight = |r: usize| row_weight.map_or(1.0, |w| w[r]);
        let denom: f64 = (0..rows).map(weight).sum::<f64>() * cols as f64;
        if denom <= 0.0 {
            return Err(Error::Empty("mse over zero unmasked elements".into()));
        }
        let mut total = 0.0;
        for r in 0..rows {
            let w = weight(r);
            if w == 0.0 {
                continue;
            }
            let pr = &p.data()[r * cols..(r + 1) * cols];
            let tr = &target.data()[r * cols..(r + 1) * cols];
            total += w * pr.iter().zip(tr).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let value = Tensor::scalar(total / denom);
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                target: target.data().into(),
                row_weight: row_weight.map(Into::into),
                denom,
            },
        ))
    }

    /// `Σ cᵢ·vᵢ` over same-shaped operands.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::shape("lin_comb", "at least one term", 0))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for &(v, c) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape(
                    "lin_comb",
                    format!("{shape:?}"),
                    format!("{:?}", self.shape(v)),
                ));
            }
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LinComb(terms.to_vec())))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.numel()]);
        for i in (0..=root.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, lower);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        let numel = |v: &Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(a, 1.0), (b, 1.0)] {
                    if rg(v) {
                        let d = acc(&mut lower[v.0], g.len());
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(a, 1.0), (b, -1.0)] {
                    if rg(v) {
                        let d = acc(&mut lower[v.0], g.len());
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if rg(a) {
                    let d = acc(&mut lower[a.0], g.len());
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(b) {
                    let c = numel(b);
                    let d = acc(&mut lower[b.0], c);
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if rg(a) {
                    let d = acc(&mut lower[a.0], g.len());
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if rg(a) {
                    let d = acc(&mut lower[a.0], g.len());
                    for ((x, y), w) in d.iter_mut().zip(g).zip(bv) {
                        *x += y * w;
                    }
                }
                if rg(b) {
                    let d = acc(&mut lower[b.0], g.len());
                    for ((x, y), w) in d.iter_mut().zip(g).zip(av) {
                        *x += y * w;
                    }
                }
            }
            Op::MulConst(a, f) => {
                if rg(a) {
                    let d = acc(&mut lower[a.0], g.len());
                    for ((x, y), w) in d.iter_mut().zip(g).zip(f.iter()) {
                        *x += y * w;
                    }
                }
            }
            Op::MulRows(a, w) => {
                if rg(a) {
                    let c = node.value.cols();
                    let d = acc(&mut lower[a.0], g.len());
                    for ((drow, grow), &wr) in d.chunks_mut(c).zip(g.chunks(c)).zip(w.iter()) {
                        drow.iter_mut().zip(grow).for_each(|(x, y)| *x += y * wr);
                    }
                }
            }
            Op::Scale(a, s) => {
                if rg(a) {
                    let d = acc(&mut lower[a.0], g.len());
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Relu(a) => {
                if rg(a) {
                    let xv = self.nodes[a.0].value.data();
                    let d = acc(&mut lower[a.0], g.len());
                    for ((x, y), v) in d.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(a) {
                    let bv = self.nodes[b.0].value.data();
                    let d = acc(&mut lower[a.0], m * k);
                    gemm_nt(m, n, k, g, bv, d);
                }
                if rg(b) {
                    let av = self.nodes[a.0].value.data();
                    let d = acc(&mut lower[b.0], k * n);
                    gemm_tn(k, m, n, av, g, d);
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(a) {
                    let bv = self.nodes[b.0].value.data();
                    let d = acc(&mut lower[a.0], m * k);
                    gemm_nn(m, n, k, g, bv, d);
                }
                if rg(b) {
                    let av = self.nodes[a.0].value.data();
                    let d = acc(&mut lower[b.0], n * k);
                    gemm_tn(n, m, k, g, av, d);
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                kernel,
                c_in,
                c_out,
            } => {
                let (kernel, c_in, c_out) = (*kernel, *c_in, *c_out);
                let t = node.value.rows();
                let pad = kernel / 2;
                if let Some(b) = bias.filter(|b| rg(b)) {
                    let d = acc(&mut lower[b.0], c_out);
                    for row in g.chunks(c_out) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
                if rg(input) {
                    let w = self.nodes[weight.0].value.data();
                    let d = acc(&mut lower[input.0], t * c_in);
                    for tap in 0..kernel {
                        if let Some((lo, hi, shift)) = tap_range(t, tap, pad) {
                            let rows = hi - lo;
                            let dst = ((lo as isize + shift) as usize) * c_in;
                            gemm_nt(
                                rows,
                                c_out,
                                c_in,
                                &g[lo * c_out..hi * c_out],
                                &w[tap * c_in * c_out..(tap + 1) * c_in * c_out],
                                &mut d[dst..dst + rows * c_in],
                            );
                        }
                    }
                }
                if rg(weight) {
                    let x = self.nodes[input.0].value.data();
                    let d = acc(&mut lower[weight.0], kernel * c_in * c_out);
                    for tap in 0..kernel {
                        if let Some((lo, hi, shift)) = tap_range(t, tap, pad) {
                            let rows = hi - lo;
                            let src = ((lo as isize + shift) as usize) * c_in;
                            gemm_tn(
                                c_in,
                                rows,
                                c_out,
                                &x[src..src + rows * c_in],
                                &g[lo * c_out..hi * c_out],
                                &mut d[tap * c_in * c_out..(tap + 1) * c_in * c_out],
                            );
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gain,
                offset,
                normalized,
                inv_std,
            } => {
                let c = node.value.cols();
                let r = node.value.rows();
                let gv = self.nodes[gain.0].value.data();
                if rg(gain) {
                    let d = acc(&mut lower[gain.0], c);
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j] * normalized[i * c + j];
                        }
                    }
                }
                if rg(offset) {
                    let d = acc(&mut lower[offset.0], c);
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
                if rg(input) {
                    let d = acc(&mut lower[input.0], r * c);
                    let mut dxh = vec![0.0; c];
                    for i in 0..r {
                        let xh = &normalized[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxh[j] = g[i * c + j] * gv[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[i * c + j] += inv_std[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if rg(a) {
                    let c = node.value.cols();
                    let y = node.value.data();
                    let d = acc(&mut lower[a.0], g.len());
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::SliceCols { input, start, len } => {
                if rg(input) {
                    let c = self.nodes[input.0].value.cols();
                    let d = acc(&mut lower[input.0], numel(input));
                    for (i, grow) in g.chunks(*len).enumerate() {
                        let dst = &mut d[i * c + start..i * c + start + len];
                        dst.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if rg(p) {
                        let d = acc(&mut lower[p.0], numel(p));
                        for (i, drow) in d.chunks_mut(w).enumerate() {
                            let src = &g[i * total + offset..i * total + offset + w];
                            drow.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { input, index } => {
                if rg(input) {
                    let c = node.value.cols();
                    let d = acc(&mut lower[input.0], numel(input));
                    for (grow, &src) in g.chunks(c).zip(index.iter()) {
                        let drow = &mut d[src * c..(src + 1) * c];
                        drow.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sum(a) => {
                if rg(a) {
                    let d = acc(&mut lower[a.0], numel(a));
                    d.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mse {
                pred,
                target,
                row_weight,
                denom,
            } => {
                if rg(pred) {
                    let p = &self.nodes[pred.0].value;
                    let cols = p.cols();
                    let d = acc(&mut lower[pred.0], p.numel());
                    let scale = 2.0 * g[0] / denom;
                    for (r, ((drow, prow), trow)) in d
                        .chunks_mut(cols)
                        .zip(p.data().chunks(cols))
                        .zip(target.chunks(cols))
                        .enumerate()
                    {
                        let w = row_weight.as_ref().map_or(1.0, |w| w[r]);
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..cols {
                            drow[j] += scale * w * (prow[j] - trow[j]);
                        }
                    }
                }
            }
            Op::LinComb(terms) => {
                for (v, c) in terms {
                    if rg(v) {
                        let d = acc(&mut lower[v.0], g.len());
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                    }
                }
            }
        }
    }
}

/// Output rows `[lo, hi)` that read input rows shifted by `tap − pad`, or
/// `None` when the tap falls entirely into padding.
fn tap_range(t: usize, tap: usize, pad: usize) -> Option<(usize, usize, isize)> {
    let shift = tap as isize - pad as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (t as isize - shift).min(t as isize);
    if hi <= lo as isize {
        return None;
    }
    Some((lo, hi as usize, shift))
}
