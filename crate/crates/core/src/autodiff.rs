//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a [`Node`] in creation order, so the
//! node list is already a topological order and [`Graph::backward`] simply
//! walks it in reverse. Parameters enter the graph through
//! [`Graph::param`], which registers one leaf per parameter name no matter how
//! many times it is requested (an LSTM weight reused at every timestep is a
//! single node whose gradient accumulates across steps).
//!
//! Broadcasting is deliberately limited to [`Graph::add_row`]: a `1 × n` bias
//! row added to every row of a matrix. All other binary ops require equal
//! shapes.

use crate::error::{dim_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use std::collections::BTreeMap;
use std::fmt;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Padding rule for [`Graph::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding with `out = ceil(in / stride)`; extra padding goes to the
    /// bottom/right.
    Same,
    /// No padding; `out = (in - k) / stride + 1`.
    Valid,
}

/// Backward rule for a user-defined op: receives the upstream gradient and the
/// input values, returns one gradient per input.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Param(String),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Log(usize),
    Square(usize),
    Clip { x: usize, lo: f64, hi: f64 },
    Scale(usize, f64),
    Softmax { x: usize, axis: usize },
    LogSoftmax(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    FlipRows(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Pick { x: usize, index: Vec<usize> },
    Conv2d(Box<ConvMeta>),
    ChannelNorm(Box<NormMeta>),
    Custom { inputs: Vec<usize>, backward: CustomBackward },
}

struct ConvMeta {
    x: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

struct NormMeta {
    x: usize,
    gamma: usize,
    beta: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Clip { .. } => "clip",
            Op::Scale(..) => "scale",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::FlipRows(_) => "flip_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Pick { .. } => "pick",
            Op::Conv2d(_) => "conv2d",
            Op::ChannelNorm(_) => "channel_norm",
            Op::Custom { .. } => "custom",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Scale(x, _)
            | Op::LogSoftmax(x)
            | Op::FlipRows(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Clip { x, .. }
            | Op::Softmax { x, .. }
            | Op::Narrow { x, .. }
            | Op::Pick { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d(m) => vec![m.x, m.k],
            Op::ChannelNorm(m) => vec![m.x, m.gamma, m.beta],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

/// One recorded operation: its kind, parents, cached output and gradient
/// accumulator.
pub struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
}

impl Node {
    pub fn kind(&self) -> &'static str {
        self.op.kind()
    }

    pub fn parents(&self) -> Vec<usize> {
        self.op.parents()
    }

    /// Parameter name for parameter leaves.
    pub fn param_name(&self) -> Option<&str> {
        match &self.op {
            Op::Param(n) => Some(n),
            _ => None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node")
            .field("kind", &self.kind())
            .field("shape", &self.value.shape())
            .finish()
    }
}

/// Gradients of a scalar loss with respect to named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    /// Add `other` into `self`, inserting missing entries.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, v) in &other.0 {
            match self.0.get_mut(k) {
                Some(t) => t.add_assign(v),
                None => {
                    self.0.insert(k.clone(), v.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.0.values_mut() {
            t.scale_inplace(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Computation graph (tape).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input (receives a gradient but is not reported as a parameter).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// The leaf for parameter `name`, created on first use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&id) = self.params.get(name) {
            return Ok(Var(id));
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))?
            .clone();
        let v = self.push(Op::Param(name.to_string()), t);
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push(Op::MatMul(a.0, b.0), out))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
            return Err(dim_err!("matmul_nt {:?} x {:?}ᵀ", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        matmul_nt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMulNT(a.0, b.0), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a.0, b.0), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.0, b.0), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.0, b.0), out))
    }

    /// Sum of several equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| dim_err!("add_n of nothing"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Add the `1 × n` row `bias` to every row of `x` (last dimension `n`).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(bias));
        let n = tx.cols();
        if tb.len() != n {
            return Err(dim_err!(
                "bias {:?} does not match last dim of {:?}",
                tb.shape(),
                tx.shape()
            ));
        }
        let b = tb.data();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddRow(x.0, bias.0), out))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.val(x).map(f64::tanh);
        self.push(Op::Tanh(x.0), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.val(x).map(sigmoid);
        self.push(Op::Sigmoid(x.0), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.val(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x.0), out)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.val(x).map(|v| v * v);
        self.push(Op::Square(x.0), out)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = t.map(f64::ln);
        Ok(self.push(Op::Log(x.0), out))
    }

    /// Clamp into `[lo, hi]`. The gradient is 1 strictly inside the interval
    /// and 0 outside or on a boundary.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.val(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clip { x: x.0, lo, hi }, out)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.val(x).map(|v| v * s);
        self.push(Op::Scale(x.0, s), out)
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.val(x);
        if axis >= t.rank() {
            return Err(dim_err!("softmax axis {axis} on {:?}", t.shape()));
        }
        let out = softmax_tensor(t, axis);
        Ok(self.push(Op::Softmax { x: x.0, axis }, out))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let n = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(Op::LogSoftmax(x.0), out)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .val(*parts.first().ok_or_else(|| dim_err!("empty concat"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err!("concat axis {axis} on {:?}", first));
        }
        let mut total = 0;
        for p in parts {
            let s = self.val(*p).shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(dim_err!("concat {:?} with {:?} on axis {axis}", first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.val(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::Concat {
                parts: parts.iter().map(|v| v.0).collect(),
                axis,
            },
            out,
        ))
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.val(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(dim_err!("narrow {start}+{len} on axis {axis} of {:?}", shape));
        }
        let (outer, d, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let out = Tensor::new(oshape, data)?;
        Ok(self.push(
            Op::Narrow {
                x: x.0,
                axis,
                start,
            },
            out,
        ))
    }

    /// Row `r` of a matrix as a `1 × n` tensor.
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.narrow(x, 0, r, 1)
    }

    pub fn flip_rows(&mut self, x: Var) -> Var {
        let out = self.val(x).flip_rows();
        self.push(Op::FlipRows(x.0), out)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.val(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x.0), out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.val(x).sum());
        self.push(Op::Sum(x.0), out)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(x.0), out)
    }

    /// Gather `x[r, c]` for each `(r, c)` pair into a `1 × len` row.
    pub fn pick(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let t = self.val(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut index = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= rows || c >= cols {
                return Err(dim_err!("pick ({r},{c}) outside {:?}", t.shape()));
            }
            index.push(r * cols + c);
        }
        if index.is_empty() {
            return Err(dim_err!("pick with no coordinates"));
        }
        let out = Tensor::row(index.iter().map(|&i| t.data()[i]).collect());
        Ok(self.push(Op::Pick { x: x.0, index }, out))
    }

    /// Cross-correlation of an `H × W × C_in` image with a
    /// `kh × kw × C_in × C_out` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (tx, tk) = (self.val(x), self.val(k));
        if tx.rank() != 3 || tk.rank() != 4 {
            return Err(dim_err!("conv2d {:?} with kernel {:?}", tx.shape(), tk.shape()));
        }
        let (h, w, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (kh, kw, kcin, cout) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        if kcin != cin {
            return Err(dim_err!("conv2d channel mismatch: input {cin}, kernel {kcin}"));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride 0"));
        }
        let (ho, wo, pad_top, pad_left) = conv_geometry(h, w, kh, kw, stride, padding)?;
        let mut out = vec![0.0; ho * wo * cout];
        let (xd, kd) = (tx.data(), tk.data());
        for oy in 0..ho {
            for ox in 0..wo {
                let obase = (oy * wo + ox) * cout;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad_left as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = (iy as usize * w + ix as usize) * cin;
                        for ci in 0..cin {
                            let xv = xd[ibase + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let kbase = ((ky * kw + kx) * cin + ci) * cout;
                            for co in 0..cout {
                                out[obase + co] += xv * kd[kbase + co];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![ho, wo, cout], out)?;
        Ok(self.push(
            Op::Conv2d(Box::new(ConvMeta {
                x: x.0,
                k: k.0,
                stride,
                pad_top,
                pad_left,
            })),
            out,
        ))
    }

    /// Per-channel normalisation over all spatial positions of an
    /// `H × W × C` map, followed by a learned per-channel scale and shift.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(dim_err!("channel_norm: {} channels, scale {:?}", c, tg.shape()));
        }
        let p = tx.rows();
        let xd = tx.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in xd.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= p as f64);
        for row in xd.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / p as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, v) in xd.iter().enumerate() {
            let ch = i % c;
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = tg.data()[ch] * xhat[i] + tb.data()[ch];
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            Op::ChannelNorm(Box::new(NormMeta {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            })),
            out,
        ))
    }

    /// An op with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        self.push(
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                backward,
            },
            value,
        )
    }

    /// Clear every gradient accumulator.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate into the node accumulators: calling `backward`
    /// twice without [`Graph::zero_grad`] doubles every gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.val(loss).len() != 1 {
            return Err(dim_err!(
                "backward needs a scalar loss, got {:?}",
                self.val(loss).shape()
            ));
        }
        let mut pending: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::ones(self.val(loss).shape().to_vec()));
        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            let contribs = self.local_grads(id, &g);
            match &mut self.nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
            for (pid, pg) in contribs {
                match &mut pending[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(self.param_grads())
    }

    /// Current accumulated gradient of every registered parameter.
    pub fn param_grads(&self) -> Gradients {
        Gradients(
            self.params
                .iter()
                .map(|(name, &id)| {
                    let n = &self.nodes[id];
                    let g = n
                        .grad
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec()));
                    (name.clone(), g)
                })
                .collect(),
        )
    }

    fn local_grads(&self, id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[id];
        let y = &node.value;
        let v = |i: usize| &self.nodes[i].value;
        let shaped = |i: usize, data: Vec<f64>| {
            Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut da = vec![0.0; m * k];
                matmul_nt_into(g.data(), tb.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_tn_into(ta.data(), g.data(), &mut db, m, k, n);
                vec![(*a, shaped(*a, da)), (*b, shaped(*b, db))]
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let mut da = vec![0.0; m * k];
                matmul_into(g.data(), tb.data(), &mut da, m, n, k);
                let mut db = vec![0.0; n * k];
                matmul_tn_into(g.data(), ta.data(), &mut db, m, n, k);
                vec![(*a, shaped(*a, da)), (*b, shaped(*b, db))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(v(*b), |x, y| x * y).unwrap()),
                (*b, g.zip_map(v(*a), |x, y| x * y).unwrap()),
            ],
            Op::AddRow(x, b) => {
                let n = g.cols();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                vec![(*x, g.clone()), (*b, shaped(*b, db))]
            }
            Op::Tanh(x) => vec![(*x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)).unwrap())],
            Op::Sigmoid(x) => vec![(*x, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)).unwrap())],
            Op::Relu(x) => vec![(
                *x,
                g.zip_map(v(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                    .unwrap(),
            )],
            Op::Log(x) => vec![(*x, g.zip_map(v(*x), |gv, xv| gv / xv).unwrap())],
            Op::Square(x) => vec![(*x, g.zip_map(v(*x), |gv, xv| 2.0 * gv * xv).unwrap())],
            Op::Clip { x, lo, hi } => vec![(
                *x,
                g.zip_map(v(*x), |gv, xv| if xv > *lo && xv < *hi { gv } else { 0.0 })
                    .unwrap(),
            )],
            Op::Scale(x, s) => vec![(*x, g.map(|gv| gv * s))],
            Op::Softmax { x, axis } => {
                let (outer, d, inner) = split_axis(y.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * d + j) * inner + i;
                        let dot: f64 = (0..d).map(|j| yd[idx(j)] * gd[idx(j)]).sum();
                        for j in 0..d {
                            dx[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                vec![(*x, shaped(*x, dx))]
            }
            Op::LogSoftmax(x) => {
                let n = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((drow, yrow), grow) in dx
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let gs: f64 = grow.iter().sum();
                    for ((d, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = gv - yv.exp() * gs;
                    }
                }
                vec![(*x, shaped(*x, dx))]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let dp = v(p).shape()[*axis];
                    let mut data = Vec::with_capacity(outer * dp * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + dp * inner]);
                    }
                    res.push((p, shaped(p, data)));
                    offset += dp;
                }
                res
            }
            Op::Narrow { x, axis, start } => {
                let (outer, d, inner) = split_axis(v(*x).shape(), *axis);
                let len = y.shape()[*axis];
                let mut dx = vec![0.0; v(*x).len()];
                for o in 0..outer {
                    let base = o * d * inner + start * inner;
                    let gb = o * len * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g.data()[gb..gb + len * inner]);
                }
                vec![(*x, shaped(*x, dx))]
            }
            Op::FlipRows(x) => vec![(*x, g.flip_rows())],
            Op::Reshape(x) => vec![(*x, shaped(*x, g.data().to_vec()))],
            Op::Sum(x) => vec![(*x, Tensor::full(v(*x).shape().to_vec(), g.item()))],
            Op::Mean(x) => {
                let n = v(*x).len() as f64;
                vec![(*x, Tensor::full(v(*x).shape().to_vec(), g.item() / n))]
            }
            Op::Pick { x, index } => {
                let mut dx = vec![0.0; v(*x).len()];
                for (&i, gv) in index.iter().zip(g.data()) {
                    dx[i] += gv;
                }
                vec![(*x, shaped(*x, dx))]
            }
            Op::Conv2d(m) => self.conv_backward(m, g),
            Op::ChannelNorm(m) => {
                let c = y.cols();
                let p = y.rows() as f64;
                let gamma = v(m.gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for (i, gv) in g.data().iter().enumerate() {
                    let ch = i % c;
                    dgamma[ch] += gv * m.xhat[i];
                    dbeta[ch] += gv;
                    let dxh = gv * gamma[ch];
                    sum_dxhat[ch] += dxh;
                    sum_dxhat_xhat[ch] += dxh * m.xhat[i];
                }
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| {
                        let ch = i % c;
                        let dxh = gv * gamma[ch];
                        m.inv_std[ch] / p
                            * (p * dxh - sum_dxhat[ch] - m.xhat[i] * sum_dxhat_xhat[ch])
                    })
                    .collect();
                vec![
                    (m.x, shaped(m.x, dx)),
                    (m.gamma, shaped(m.gamma, dgamma)),
                    (m.beta, shaped(m.beta, dbeta)),
                ]
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&i| v(i)).collect();
                inputs.iter().copied().zip(backward(g, &vals)).collect()
            }
        }
    }

    fn conv_backward(&self, m: &ConvMeta, g: &Tensor) -> Vec<(usize, Tensor)> {
        let (tx, tk) = (&self.nodes[m.x].value, &self.nodes[m.k].value);
        let (h, w, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (kh, kw, cout) = (tk.shape()[0], tk.shape()[1], tk.shape()[3]);
        let (ho, wo) = (g.shape()[0], g.shape()[1]);
        let (xd, kd, gd) = (tx.data(), tk.data(), g.data());
        let mut dx = vec![0.0; xd.len()];
        let mut dk = vec![0.0; kd.len()];
        for oy in 0..ho {
            for ox in 0..wo {
                let obase = (oy * wo + ox) * cout;
                let grow = &gd[obase..obase + cout];
                for ky in 0..kh {
                    let iy = (oy * m.stride + ky) as isize - m.pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * m.stride + kx) as isize - m.pad_left as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = (iy as usize * w + ix as usize) * cin;
                        for ci in 0..cin {
                            let kbase = ((ky * kw + kx) * cin + ci) * cout;
                            let krow = &kd[kbase..kbase + cout];
                            let xv = xd[ibase + ci];
                            let mut acc = 0.0;
                            for co in 0..cout {
                                acc += grow[co] * krow[co];
                                dk[kbase + co] += xv * grow[co];
                            }
                            dx[ibase + ci] += acc;
                        }
                    }
                }
            }
        }
        vec![
            (m.x, Tensor::new(tx.shape().to_vec(), dx).unwrap()),
            (m.k, Tensor::new(tk.shape().to_vec(), dk).unwrap()),
        ]
    }
}

/// Output size and leading padding of a convolution.
pub fn conv_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize, usize, usize)> {
    match padding {
        Padding::Same => {
            let ho = h.div_ceil(stride);
            let wo = w.div_ceil(stride);
            let ph = ((ho - 1) * stride + kh).saturating_sub(h);
            let pw = ((wo - 1) * stride + kw).saturating_sub(w);
            Ok((ho, wo, ph / 2, pw / 2))
        }
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(dim_err!("kernel {kh}x{kw} larger than input {h}x{w}"));
            }
            Ok(((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0))
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of a plain tensor along `axis`, without recording anything.
pub fn softmax_tensor(t: &Tensor, axis: usize) -> Tensor {
    let (outer, d, inner) = split_axis(t.shape(), axis);
    let mut out = t.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * d + j) * inner + i;
            let m = (0..d).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..d {
                let e = (data[idx(j)] - m).exp();
                data[idx(j)] = e;
                s += e;
            }
            for j in 0..d {
                data[idx(j)] /= s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i = g.input(Tensor::eye(2));
        let m = g.input(t(2, 2, &[1., 2., 3., 4.]));
        let r = g.matmul(i, m).unwrap();
        assert_eq!(g.value(r).data(), &[1., 2., 3., 4.]);
        let p = g.input(t(2, 2, &[1., 0., 0., 0.]));
        let c = g.input(t(2, 1, &[5., 7.]));
        let r = g.matmul(p, c).unwrap();
        assert_eq!(g.value(r).data(), &[5., 0.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![0., 0., 0.]));
        let s = g.softmax(x, 1).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.input(Tensor::row(vec![2., 0.]));
        let s = g.softmax(x, 1).unwrap();
        assert!((g.value(s).data()[0] - 0.880797077977882).abs() < 1e-12);
        let x = g.input(Tensor::row(vec![3.0, 1003.0]));
        let s = g.softmax(x, 1).unwrap();
        let d = g.value(s).data();
        assert!(d[0] < 1e-300 && (d[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::new();
        let z = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        let th = g.tanh(z);
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(th).item(), 0.0);
        let five = g.input(Tensor::scalar(5.0));
        let c = g.clip(five, 0.0, 3.0);
        assert_eq!(g.value(c).item(), 3.0);
        assert!(matches!(g.log(z), Err(Error::Domain(_))));
    }

    #[test]
    fn clip_gradient_convention() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![-1.0, 0.0, 1.5, 3.0, 4.0]));
        let c = g.clip(x, 0.0, 3.0);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 0., 1., 0., 0.]);
    }

    #[test]
    fn concat_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::row(vec![1., 2.]));
        let b = g.input(Tensor::row(vec![3.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3.]);
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2, 1]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 4]);
        let bad = g.input(Tensor::zeros(vec![3, 1]));
        assert!(g.concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn backward_simple_rules() {
        let mut store = ParamStore::default();
        store.insert("p", Tensor::row(vec![1., -2., 3.]));
        store.insert("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[1., 1., 1.]);

        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 6.0);
        // accumulation without reset
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 12.0);
        g.zero_grad();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![1., 2.]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn add_row_only_broadcast() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![3, 2]));
        let b = g.input(Tensor::row(vec![1., 2.]));
        let y = g.add_row(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 1., 2., 1., 2.]);
        assert!(g.add(x, b).is_err());
        let b3 = g.input(Tensor::row(vec![1., 2., 3.]));
        assert!(g.add_row(x, b3).is_err());
    }

    #[test]
    fn conv_identity_and_box() {
        let img = Tensor::from_fn(vec![5, 5, 2], |i| i as f64 * 0.5);
        let mut g = Graph::new();
        let x = g.input(img.clone());
        let k = g.input(Tensor::from_fn(vec![1, 1, 2, 2], |i| {
            if i == 0 || i == 3 {
                1.0
            } else {
                0.0
            }
        }));
        let y = g.conv2d(x, k, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y), &img);

        let x = g.input(Tensor::full(vec![6, 6, 1], 2.0));
        let k = g.input(Tensor::ones(vec![3, 3, 1, 1]));
        let y = g.conv2d(x, k, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y).data()[2 * 6 + 2], 18.0);
        assert_eq!(g.value(y).data()[0], 8.0);

        let bad = g.input(Tensor::ones(vec![3, 3, 2, 1]));
        assert!(g.conv2d(x, bad, 1, Padding::Same).is_err());
    }

    #[test]
    fn conv_geometry_ceil_mode() {
        assert_eq!(conv_geometry(9, 9, 3, 3, 2, Padding::Same).unwrap().0, 5);
        assert_eq!(conv_geometry(36, 36, 3, 3, 2, Padding::Same).unwrap().0, 18);
        assert_eq!(conv_geometry(5, 5, 5, 5, 1, Padding::Valid).unwrap().0, 1);
    }
}
