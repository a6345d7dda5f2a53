//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every primitive records its output value; nodes whose inputs require
//! gradients additionally keep the forward context needed by their
//! vector-Jacobian product. Node ids are assigned in creation order, so a
//! node's inputs always have smaller ids and the reverse sweep is a simple
//! descending walk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{
    broadcast_offsets, broadcast_shape, gemm_nn, gemm_nt, gemm_tn, gemm_tn_swapped, split_axis,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive operations understood by the engine.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// Batched `a · b` (or `a · bᵀ`); a 2-D right operand is shared across
    /// all leading dimensions of the left one.
    Matmul { transpose_b: bool },
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Relu,
    GeluTanh,
    /// `tanh(β·x)`
    TanhScaled(f64),
    Sigmoid,
    Abs,
    Square,
    /// `1 / (x + ε)`
    ReciprocalEps(f64),
    SoftmaxLastDim,
    /// Normalization over the last axis without affine parameters.
    LayerNorm { eps: f64 },
    MeanOverAxes(Vec<usize>),
    SumOverAxes(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    Dropout { p: f64, seed: u64 },
    /// Rows of the table input selected by `ids`; output shape is
    /// `ids_shape ++ [d]`.
    EmbeddingLookup { ids: Vec<usize>, ids_shape: Vec<usize> },
    /// Mean negative log-likelihood of `labels` under softmax of the last axis.
    CrossEntropyLogits { labels: Vec<usize> },
}

/// Loosely-typed attributes for [`Op::parse`].
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub scalar: Option<f64>,
    pub axes: Vec<usize>,
    pub axis: usize,
    pub start: usize,
    pub len: usize,
    pub shape: Vec<usize>,
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub transpose_b: bool,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "elementwise_mul",
            Op::ScalarMul(_) => "scalar_mul",
            Op::Relu => "relu",
            Op::GeluTanh => "gelu_tanh",
            Op::TanhScaled(_) => "tanh_scaled",
            Op::Sigmoid => "sigmoid",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::ReciprocalEps(_) => "reciprocal_eps",
            Op::SoftmaxLastDim => "softmax_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanOverAxes(_) => "mean_over_axes",
            Op::SumOverAxes(_) => "sum_over_axes",
            Op::Concat { .. } => "concat_axis",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Dropout { .. } => "dropout",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
            Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
        }
    }

    /// Builds an op from its kind name. Unknown names are configuration errors.
    pub fn parse(kind: &str, attrs: &OpAttrs) -> Result<Op> {
        let scalar = |what: &str| {
            attrs
                .scalar
                .ok_or_else(|| Error::config(format!("`{kind}` requires scalar attribute {what}")))
        };
        Ok(match kind {
            "matmul" => Op::Matmul {
                transpose_b: attrs.transpose_b,
            },
            "add" => Op::Add,
            "sub" => Op::Sub,
            "elementwise_mul" => Op::Mul,
            "scalar_mul" => Op::ScalarMul(scalar("c")?),
            "relu" => Op::Relu,
            "gelu_tanh" => Op::GeluTanh,
            "tanh_scaled" => Op::TanhScaled(scalar("beta")?),
            "sigmoid" => Op::Sigmoid,
            "abs" => Op::Abs,
            "square" => Op::Square,
            "reciprocal_eps" => Op::ReciprocalEps(scalar("eps")?),
            "softmax_lastdim" => Op::SoftmaxLastDim,
            "layer_norm" => Op::LayerNorm {
                eps: attrs.scalar.unwrap_or(1e-5),
            },
            "mean_over_axes" => Op::MeanOverAxes(attrs.axes.clone()),
            "sum_over_axes" => Op::SumOverAxes(attrs.axes.clone()),
            "concat_axis" => Op::Concat { axis: attrs.axis },
            "slice" => Op::Slice {
                axis: attrs.axis,
                start: attrs.start,
                len: attrs.len,
            },
            "reshape" => Op::Reshape(attrs.shape.clone()),
            "dropout" => Op::Dropout {
                p: scalar("p")?,
                seed: attrs.seed,
            },
            "embedding_lookup" => Op::EmbeddingLookup {
                ids: attrs.ids.clone(),
                ids_shape: if attrs.shape.is_empty() {
                    vec![attrs.ids.len()]
                } else {
                    attrs.shape.clone()
                },
            },
            "cross_entropy_logits" => Op::CrossEntropyLogits {
                labels: attrs.labels.clone(),
            },
            other => return Err(Error::config(format!("unknown primitive kind `{other}`"))),
        })
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Matmul { .. } | Op::Add | Op::Sub | Op::Mul => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
enum Saved {
    None,
    Rstd(Vec<f64>),
    Mask(Vec<f64>),
    Probs(Vec<f64>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    saved: Saved,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of `len` when none reached it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Single-use reverse-mode tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    retain_intermediate: bool,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            retain_intermediate: cfg!(debug_assertions),
            consumed: false,
        }
    }

    /// Toggle the non-finite check run after every primitive.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Keep gradients of non-leaf nodes after the backward pass.
    pub fn set_retain_intermediate(&mut self, on: bool) {
        self.retain_intermediate = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, Vec::new(), value, requires_grad, Saved::None)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn op(&self, var: Var) -> &Op {
        &self.nodes[var.0].op
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<Var>,
        value: Tensor,
        requires_grad: bool,
        saved: Saved,
    ) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if op == Op::Leaf {
            return Err(Error::Usage("leaves are created with Graph::leaf".into()));
        }
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::dim(
                    op.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(Error::dim(op.name(), "expected at least one input"));
        }
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::Range {
                    what: "graph node",
                    index: v.0,
                    len: self.nodes.len(),
                });
            }
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = forward(&op, &values)?;
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let saved = if requires_grad { saved } else { Saved::None };
        Ok(self.push(op, inputs.to_vec(), value, requires_grad, saved))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul { transpose_b: false }, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul { transpose_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::ScalarMul(c), &[x])
    }

    /// `x + c` via a broadcast constant.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(x, k)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn gelu_tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::GeluTanh, &[x])
    }

    pub fn tanh_scaled(&mut self, x: Var, beta: f64) -> Result<Var> {
        self.apply(Op::TanhScaled(beta), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Abs, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Square, &[x])
    }

    pub fn reciprocal_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Op::ReciprocalEps(eps), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SoftmaxLastDim, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x])
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::MeanOverAxes(axes.to_vec()), &[x])
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::SumOverAxes(axes.to_vec()), &[x])
    }

    /// Sum over every axis, yielding a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean_axes(x, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, len }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        self.apply(Op::Dropout { p, seed }, &[x])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::EmbeddingLookup {
                ids: ids.to_vec(),
                ids_shape: ids_shape.to_vec(),
            },
            &[table],
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(
            Op::CrossEntropyLogits {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`. A graph supports one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Range {
                what: "graph node",
                index: loss.0,
                len: self.nodes.len(),
            });
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = vjp(node, &inputs, &out_grad, &needs);
            for ((var, need), g) in node.inputs.iter().zip(&needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            if self.retain_intermediate {
                grads[id] = Some(out_grad);
            }
        }
        Ok(Gradients { grads })
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} for shape {shape:?}")));
    }
    Ok(())
}

fn reduced_shapes(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut keep = shape.to_vec();
    for (i, &a) in axes.iter().enumerate() {
        check_axis(op, shape, a)?;
        if axes[..i].contains(&a) {
            return Err(Error::dim(op, format!("repeated axis {a}")));
        }
        keep[a] = 1;
    }
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    Ok((keep, out))
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize], transpose_b: bool) -> Result<MatmulDims> {
    let err = || Error::dim("matmul", format!("{a:?} x {b:?} (transpose_b={transpose_b})"));
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if transpose_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if bk != k {
        return Err(err());
    }
    let shared_rhs = b.len() == 2;
    if !shared_rhs && (b.len() != a.len() || a[..a.len() - 2] != b[..b.len() - 2]) {
        return Err(err());
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let mut out_shape = a[..a.len() - 2].to_vec();
    out_shape.extend([m, n]);
    Ok(MatmulDims {
        batch,
        m,
        k,
        n,
        shared_rhs,
        out_shape,
    })
}

fn binary_forward(op: &Op, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::dim(op.name(), format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
    })?;
    let f = |x: f64, y: f64| match op {
        Op::Add => x + y,
        Op::Sub => x - y,
        _ => x * y,
    };
    let data = if a.shape() == out_shape.as_slice() && b.shape() == out_shape.as_slice() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let oa = broadcast_offsets(&out_shape, a.shape());
        let ob = broadcast_offsets(&out_shape, b.shape());
        oa.iter()
            .zip(&ob)
            .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
            .collect()
    };
    Ok(Tensor::from_parts(out_shape, data))
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu_tanh_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn dropout_mask(n: usize, p: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_scale = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep_scale
            }
        })
        .collect()
}

fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let x = inputs[0];
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Matmul { transpose_b } => {
            let b = inputs[1];
            let d = matmul_dims(x.shape(), b.shape(), *transpose_b)?;
            let mut out = vec![0.0; d.batch * d.m * d.n];
            let kernel = if *transpose_b { gemm_nt } else { gemm_nn };
            if d.shared_rhs {
                kernel(x.data(), b.data(), &mut out, d.batch * d.m, d.k, d.n);
            } else {
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                for t in 0..d.batch {
                    kernel(
                        &x.data()[t * sa..(t + 1) * sa],
                        &b.data()[t * sb..(t + 1) * sb],
                        &mut out[t * sc..(t + 1) * sc],
                        d.m,
                        d.k,
                        d.n,
                    );
                }
            }
            Tensor::from_parts(d.out_shape, out)
        }
        Op::Add | Op::Sub | Op::Mul => binary_forward(op, x, inputs[1])?,
        Op::ScalarMul(c) => unary(x, |v| c * v),
        Op::Relu => unary(x, |v| if v > 0.0 { v } else { 0.0 }),
        Op::GeluTanh => unary(x, gelu_tanh_scalar),
        Op::TanhScaled(beta) => unary(x, |v| (beta * v).tanh()),
        Op::Sigmoid => unary(x, sigmoid),
        Op::Abs => unary(x, f64::abs),
        Op::Square => unary(x, |v| v * v),
        Op::ReciprocalEps(eps) => unary(x, |v| 1.0 / (v + eps)),
        Op::SoftmaxLastDim => {
            let c = *x.shape().last().unwrap_or(&1);
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Op::LayerNorm { eps } => {
            if *eps <= 0.0 {
                return Err(Error::config("layer_norm eps must be positive"));
            }
            let c = *x.shape().last().unwrap_or(&1);
            let mut out = x.data().to_vec();
            let mut rstd = Vec::with_capacity(out.len() / c);
            for row in out.chunks_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let r = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * r;
                }
                rstd.push(r);
            }
            return Ok((Tensor::from_parts(x.shape().to_vec(), out), Saved::Rstd(rstd)));
        }
        Op::MeanOverAxes(axes) | Op::SumOverAxes(axes) => {
            let (keep, out_shape) = reduced_shapes(op.name(), x.shape(), axes)?;
            let offsets = broadcast_offsets(x.shape(), &keep);
            let out_n: usize = out_shape.iter().product();
            let mut out = vec![0.0; out_n];
            for (&o, &v) in offsets.iter().zip(x.data()) {
                out[o] += v;
            }
            if matches!(op, Op::MeanOverAxes(_)) {
                let count = (x.numel() / out_n) as f64;
                out.iter_mut().for_each(|v| *v /= count);
            }
            Tensor::from_parts(out_shape, out)
        }
        Op::Concat { axis } => {
            let first = x.shape();
            check_axis("concat_axis", first, *axis)?;
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                let conforms = s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(i, (a, b))| i == *axis || a == b);
                if !conforms {
                    return Err(Error::dim(
                        "concat_axis",
                        format!("{s:?} does not conform to {first:?} along axis {axis}"),
                    ));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = split_axis(first, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let block = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Tensor::from_parts(shape, out)
        }
        Op::Slice { axis, start, len } => {
            check_axis("slice", x.shape(), *axis)?;
            let (outer, extent, inner) = split_axis(x.shape(), *axis);
            if *len == 0 || start + len > extent {
                return Err(Error::dim(
                    "slice",
                    format!("range {start}..{} of axis {axis} in {:?}", start + len, x.shape()),
                ));
            }
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            Tensor::from_parts(shape, out)
        }
        Op::Reshape(shape) => x.reshaped(shape.clone())?,
        Op::Dropout { p, seed } => {
            if !(0.0..1.0).contains(p) {
                return Err(Error::config(format!("dropout p={p} outside [0,1)")));
            }
            let mask = dropout_mask(x.numel(), *p, *seed);
            let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            return Ok((Tensor::from_parts(x.shape().to_vec(), data), Saved::Mask(mask)));
        }
        Op::EmbeddingLookup { ids, ids_shape } => {
            if x.rank() != 2 {
                return Err(Error::dim("embedding_lookup", format!("table shape {:?}", x.shape())));
            }
            if ids_shape.iter().product::<usize>() != ids.len() || ids.is_empty() {
                return Err(Error::dim(
                    "embedding_lookup",
                    format!("{} ids for shape {ids_shape:?}", ids.len()),
                ));
            }
            let (vocab, d) = (x.shape()[0], x.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::Range {
                        what: "token id",
                        index: id,
                        len: vocab,
                    });
                }
                out.extend_from_slice(&x.data()[id * d..(id + 1) * d]);
            }
            let mut shape = ids_shape.clone();
            shape.push(d);
            Tensor::from_parts(shape, out)
        }
        Op::CrossEntropyLogits { labels } => {
            let c = *x.shape().last().unwrap_or(&1);
            let rows = x.numel() / c;
            if labels.len() != rows {
                return Err(Error::dim(
                    "cross_entropy_logits",
                    format!("{} labels for {rows} rows of {:?}", labels.len(), x.shape()),
                ));
            }
            let mut probs = x.data().to_vec();
            let mut loss = 0.0;
            for (row, &label) in probs.chunks_mut(c).zip(labels) {
                if label >= c {
                    return Err(Error::Range {
                        what: "class label",
                        index: label,
                        len: c,
                    });
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                loss += log_z - row[label];
                for v in row.iter_mut() {
                    *v = (*v - log_z).exp();
                }
            }
            return Ok((Tensor::scalar(loss / rows as f64), Saved::Probs(probs)));
        }
    };
    Ok((out, Saved::None))
}

fn vjp(node: &Node, inputs: &[&Tensor], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let x = inputs[0];
    let y = &node.value;
    let elementwise = |f: &dyn Fn(f64, f64) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some(
            x.data()
                .iter()
                .zip(y.data())
                .zip(g)
                .map(|((&xv, &yv), &gv)| gv * f(xv, yv))
                .collect(),
        )]
    };
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Matmul { transpose_b } => {
            let b = inputs[1];
            let d = matmul_dims(x.shape(), b.shape(), *transpose_b).expect("validated in forward");
            let mut ga = needs[0].then(|| vec![0.0; x.numel()]);
            let mut gb = needs[1].then(|| vec![0.0; b.numel()]);
            let (batches, m) = if d.shared_rhs { (1, d.batch * d.m) } else { (d.batch, d.m) };
            let (sa, sb, sc) = (m * d.k, d.k * d.n, m * d.n);
            for t in 0..batches {
                let a_t = &x.data()[t * sa..(t + 1) * sa];
                let b_t = if d.shared_rhs { b.data() } else { &b.data()[t * sb..(t + 1) * sb] };
                let g_t = &g[t * sc..(t + 1) * sc];
                if let Some(ga) = ga.as_mut() {
                    let ga_t = &mut ga[t * sa..(t + 1) * sa];
                    if *transpose_b {
                        gemm_nn(g_t, b_t, ga_t, m, d.n, d.k);
                    } else {
                        gemm_nt(g_t, b_t, ga_t, m, d.n, d.k);
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    let gb_t = if d.shared_rhs { &mut gb[..] } else { &mut gb[t * sb..(t + 1) * sb] };
                    if *transpose_b {
                        gemm_tn_swapped(g_t, a_t, gb_t, m, d.n, d.k);
                    } else {
                        gemm_tn(a_t, g_t, gb_t, m, d.k, d.n);
                    }
                }
            }
            vec![ga, gb]
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = inputs[1];
            let out_shape = y.shape();
            let reduce = |t: &Tensor, factor: &dyn Fn(usize) -> f64| -> Vec<f64> {
                if t.shape() == out_shape {
                    g.iter().enumerate().map(|(i, gv)| gv * factor(i)).collect()
                } else {
                    let offs = broadcast_offsets(out_shape, t.shape());
                    let mut acc = vec![0.0; t.numel()];
                    for (i, (&o, gv)) in offs.iter().zip(g).enumerate() {
                        acc[o] += gv * factor(i);
                    }
                    acc
                }
            };
            let (offs_a, offs_b) = if matches!(node.op, Op::Mul) {
                (
                    Some(broadcast_offsets(out_shape, x.shape())),
                    Some(broadcast_offsets(out_shape, b.shape())),
                )
            } else {
                (None, None)
            };
            let ga = needs[0].then(|| match &node.op {
                Op::Mul => {
                    let ob = offs_b.as_ref().expect("mul offsets");
                    reduce(x, &|i| b.data()[ob[i]])
                }
                _ => reduce(x, &|_| 1.0),
            });
            let gb = needs[1].then(|| match &node.op {
                Op::Mul => {
                    let oa = offs_a.as_ref().expect("mul offsets");
                    reduce(b, &|i| x.data()[oa[i]])
                }
                Op::Sub => reduce(b, &|_| -1.0),
                _ => reduce(b, &|_| 1.0),
            });
            vec![ga, gb]
        }
        Op::ScalarMul(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Op::Relu => elementwise(&|xv, _| if xv > 0.0 { 1.0 } else { 0.0 }),
        Op::GeluTanh => elementwise(&|xv, _| {
            let u = SQRT_2_OVER_PI * (xv + GELU_CUBIC * xv * xv * xv);
            let t = u.tanh();
            0.5 * (1.0 + t)
                + 0.5 * xv * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * xv * xv)
        }),
        Op::TanhScaled(beta) => elementwise(&|_, yv| beta * (1.0 - yv * yv)),
        Op::Sigmoid => elementwise(&|_, yv| yv * (1.0 - yv)),
        Op::Abs => elementwise(&|xv, _| {
            if xv > 0.0 {
                1.0
            } else if xv < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::Square => elementwise(&|xv, _| 2.0 * xv),
        Op::ReciprocalEps(_) => elementwise(&|_, yv| -yv * yv),
        Op::SoftmaxLastDim => {
            let c = *y.shape().last().unwrap_or(&1);
            let mut out = vec![0.0; g.len()];
            for ((o, yr), gr) in out.chunks_mut(c).zip(y.data().chunks(c)).zip(g.chunks(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                    *ov = yv * (gv - dot);
                }
            }
            vec![Some(out)]
        }
        Op::LayerNorm { .. } => {
            let Saved::Rstd(rstd) = &node.saved else {
                unreachable!("layer_norm saves rstd")
            };
            let c = *y.shape().last().unwrap_or(&1);
            let mut out = vec![0.0; g.len()];
            for (((o, yr), gr), r) in out
                .chunks_mut(c)
                .zip(y.data().chunks(c))
                .zip(g.chunks(c))
                .zip(rstd)
            {
                let mean_g = gr.iter().sum::<f64>() / c as f64;
                let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                    *ov = r * (gv - mean_g - yv * mean_gy);
                }
            }
            vec![Some(out)]
        }
        Op::MeanOverAxes(axes) | Op::SumOverAxes(axes) => {
            let (keep, _) = reduced_shapes("reduce", x.shape(), axes).expect("validated in forward");
            let offsets = broadcast_offsets(x.shape(), &keep);
            let scale = if matches!(node.op, Op::MeanOverAxes(_)) {
                y.numel() as f64 / x.numel() as f64
            } else {
                1.0
            };
            vec![Some(offsets.iter().map(|&o| g[o] * scale).collect())]
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = split_axis(y.shape(), *axis);
            let mut start = 0;
            inputs
                .iter()
                .zip(needs)
                .map(|(t, &need)| {
                    let extent = t.shape()[*axis];
                    let this_start = start;
                    start += extent;
                    need.then(|| {
                        let mut out = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = (o * total + this_start) * inner;
                            out.extend_from_slice(&g[base..base + extent * inner]);
                        }
                        out
                    })
                })
                .collect()
        }
        Op::Slice { axis, start, len } => {
            let (outer, extent, inner) = split_axis(x.shape(), *axis);
            let mut out = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(out)]
        }
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::Dropout { .. } => {
            let Saved::Mask(mask) = &node.saved else {
                unreachable!("dropout saves its mask")
            };
            vec![Some(g.iter().zip(mask).map(|(a, b)| a * b).collect())]
        }
        Op::EmbeddingLookup { ids, .. } => {
            let d = x.shape()[1];
            let mut out = vec![0.0; x.numel()];
            for (row, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    out[id * d + j] += g[row * d + j];
                }
            }
            vec![Some(out)]
        }
        Op::CrossEntropyLogits { labels } => {
            let Saved::Probs(probs) = &node.saved else {
                unreachable!("cross entropy saves probabilities")
            };
            let c = *x.shape().last().unwrap_or(&1);
            let rows = labels.len() as f64;
            let mut out = probs.clone();
            for (row, &label) in out.chunks_mut(c).zip(labels) {
                row[label] -= 1.0;
                row.iter_mut().for_each(|v| *v *= g[0] / rows);
            }
            vec![Some(out)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gelu_saturates_to_exact_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[-20.0]));
        let y = g.gelu_tanh(x).unwrap();
        assert_eq!(g.value(y).data()[0], 0.0);
        // independent evaluation of the closed form
        let u: f64 = (2.0 / std::f64::consts::PI).sqrt() * (-20.0 + 0.044715 * -8000.0);
        assert_eq!(u.tanh(), -1.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.square(x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn relu_subgradient_is_zero_at_negative() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        let loss = g.sum_all(r).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_and_abs_subgradient_at_zero() {
        for kind in ["relu", "abs"] {
            let mut g = Graph::new();
            let x = g.param(t(&[1], &[0.0]));
            let y = g.apply(Op::parse(kind, &OpAttrs::default()).unwrap(), &[x]).unwrap();
            let loss = g.sum_all(y).unwrap();
            let grads = g.backward(loss).unwrap();
            assert_eq!(grads.get(x).unwrap(), &[0.0], "{kind}");
        }
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_is_usage_error() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[1.0]));
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!(
            Op::parse("conv2d", &OpAttrs::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -2.0]));
        let a = g.square(x).unwrap();
        let b = g.square(x).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum_all(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0, -8.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[2.0]));
        let c = g.constant(t(&[1], &[3.0]));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_finite_output_is_flagged() {
        let mut g = Graph::new();
        g.set_check_finite(true);
        let x = g.constant(t(&[1], &[-1.0]));
        assert!(matches!(g.reciprocal_eps(x, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn dropout_is_replayable() {
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(Tensor::ones(&[64]));
            let y = g.dropout(x, 0.5, 7).unwrap();
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.data().contains(&0.0));
        assert!(a.data().contains(&2.0));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
    }
}
