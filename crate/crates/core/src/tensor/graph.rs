//! Append-only computation graph with reverse-mode differentiation.
//!
//! Nodes are stored in creation order, which is a topological order, so the
//! backward pass is a single reverse sweep.

use std::ops::Range;
use std::sync::Arc;

use super::conv::{self, ConvGeometry};
use super::gemm::gemm;
use super::{Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Transposition flags for [`Graph::matmul`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Trans {
    pub lhs: bool,
    pub rhs: bool,
}

impl Trans {
    pub const NN: Trans = Trans { lhs: false, rhs: false };
    pub const TN: Trans = Trans { lhs: true, rhs: false };
    pub const NT: Trans = Trans { lhs: false, rhs: true };
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv { input: Var, weight: Var, geom: ConvGeometry },
    ConvTranspose { input: Var, weight: Var, geom: ConvGeometry },
    BiasAdd { input: Var, bias: Var },
    Relu { input: Var },
    MatMul { lhs: Var, rhs: Var, trans: Trans, m: usize, k: usize, n: usize },
    FrobeniusSq { input: Var, mask: Option<Arc<[f64]>> },
    L1Sum { input: Var },
    Add { lhs: Var, rhs: Var },
    ScalarMul { input: Var, factor: f64 },
    Reshape { input: Var },
    BlockMatMulTN { blocks: Arc<[Range<usize>]>, coef: Var, input: Var },
    CrossBlockGramSq { blocks: Arc<[Range<usize>]>, input: Var },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

impl Graph {
    /// Non-finite detection is on in debug builds.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), checked: cfg!(debug_assertions) }
    }

    pub fn with_checking(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn conv_geometry(&self, name: &'static str, input_shape: &[usize], weight: Var) -> Result<ConvGeometry> {
        let w = self.value(weight).shape();
        if w.len() != 4 || w[2] != w[3] {
            return Err(shape_err(name, format!("weight must be C_out x C_in x k x k, got {w:?}")));
        }
        if input_shape.len() != 4 {
            return Err(shape_err(name, format!("input must be N x C x H x W, got {input_shape:?}")));
        }
        Ok(ConvGeometry {
            batch: input_shape[0],
            in_channels: w[1],
            out_channels: w[0],
            in_h: input_shape[2],
            in_w: input_shape[3],
            kernel: w[2],
        })
    }

    /// Stride-2 convolution with SAME zero padding; output `ceil(in/2)`.
    pub fn conv2d_stride(&mut self, input: Var, weight: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let geom = self.conv_geometry("conv2d_stride", &xs, weight)?;
        if xs[1] != geom.in_channels {
            return Err(shape_err(
                "conv2d_stride",
                format!("input has {} channels, weight expects {}", xs[1], geom.in_channels),
            ));
        }
        let out = conv::conv_forward(&geom, self.value(input).data(), self.value(weight).data());
        let shape = vec![geom.batch, geom.out_channels, geom.out_h(), geom.out_w()];
        let value = Tensor::new(shape, out)?;
        self.push("conv2d_stride", value, Op::Conv { input, weight, geom }, &[input, weight])
    }

    /// Adjoint of [`Graph::conv2d_stride`]. The weight has the forward conv's
    /// layout `C_in_here x C_out_here x k x k`; `out_hw` is the spatial size of
    /// the image that the matching forward conv consumed.
    pub fn conv2d_transpose_stride(&mut self, input: Var, weight: Var, out_hw: (usize, usize)) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 {
            return Err(shape_err("conv2d_transpose_stride", format!("input rank {}", xs.len())));
        }
        let fake_in = [xs[0], 0, out_hw.0, out_hw.1];
        let geom = self.conv_geometry("conv2d_transpose_stride", &fake_in, weight)?;
        if xs[1] != geom.out_channels || xs[2] != geom.out_h() || xs[3] != geom.out_w() {
            return Err(shape_err(
                "conv2d_transpose_stride",
                format!(
                    "input {:?} incompatible with output {:?} and weight {:?}",
                    xs,
                    out_hw,
                    self.value(weight).shape()
                ),
            ));
        }
        let out = conv::conv_transpose_forward(&geom, self.value(input).data(), self.value(weight).data());
        let shape = vec![geom.batch, geom.in_channels, out_hw.0, out_hw.1];
        let value = Tensor::new(shape, out)?;
        self.push("conv2d_transpose_stride", value, Op::ConvTranspose { input, weight, geom }, &[input, weight])
    }

    /// Adds a per-channel bias to an `N x C x ...` tensor.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape();
        let bs = self.value(bias).shape();
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(shape_err("bias_add", format!("input {xs:?}, bias {bs:?}")));
        }
        let (c, inner) = (xs[1], xs[2..].iter().product::<usize>());
        let b = self.value(bias).data();
        let mut out = self.value(input).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.push("bias_add", out, Op::BiasAdd { input, bias }, &[input, bias])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu { input }, &[input])
    }

    /// Matrix product `op(lhs) * op(rhs)` of two rank-2 tensors.
    pub fn matmul(&mut self, lhs: Var, rhs: Var, trans: Trans) -> Result<Var> {
        let (a, b) = (self.value(lhs).shape(), self.value(rhs).shape());
        if a.len() != 2 || b.len() != 2 {
            return Err(shape_err("matmul", format!("operands must be matrices: {a:?}, {b:?}")));
        }
        let (m, k) = if trans.lhs { (a[1], a[0]) } else { (a[0], a[1]) };
        let (k2, n) = if trans.rhs { (b[1], b[0]) } else { (b[0], b[1]) };
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimensions {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(lhs).data(), trans.lhs, self.value(rhs).data(), trans.rhs, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { lhs, rhs, trans, m, k, n }, &[lhs, rhs])
    }

    /// Sum of squares of all entries.
    pub fn frobenius_sq(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum_sq();
        self.push("frobenius_sq", Tensor::scalar(s), Op::FrobeniusSq { input, mask: None }, &[input])
    }

    /// Sum of squares of the entries selected by a constant 0/1 mask.
    pub fn frobenius_sq_masked(&mut self, input: Var, mask: Arc<[f64]>) -> Result<Var> {
        let x = self.value(input).data();
        if mask.len() != x.len() {
            return Err(shape_err("frobenius_sq", format!("mask length {} vs {}", mask.len(), x.len())));
        }
        let s = x.iter().zip(mask.iter()).map(|(v, m)| m * v * v).sum();
        self.push("frobenius_sq", Tensor::scalar(s), Op::FrobeniusSq { input, mask: Some(mask) }, &[input])
    }

    pub fn l1_sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().map(|v| v.abs()).sum();
        self.push("l1_sum", Tensor::scalar(s), Op::L1Sum { input }, &[input])
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        self.push("add", value, Op::Add { lhs, rhs }, &[lhs, rhs])
    }

    pub fn scalar_mul(&mut self, input: Var, factor: f64) -> Result<Var> {
        let out = self.value(input).map(|v| factor * v);
        self.push("scalar_mul", out, Op::ScalarMul { input, factor }, &[input])
    }

    /// `lhs - rhs`, composed from [`Graph::add`] and [`Graph::scalar_mul`].
    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let neg = self.scalar_mul(rhs, -1.0)?;
        self.add(lhs, neg)
    }

    /// Reinterprets the row-major buffer with a new shape. No data movement.
    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { input }, &[input])
    }

    fn check_blocks(name: &'static str, blocks: &[Range<usize>], rows: usize) -> Result<()> {
        let mut next = 0;
        for b in blocks {
            if b.start != next || b.end < b.start {
                return Err(shape_err(name, format!("blocks must tile 0..{rows} in order, got {b:?} at {next}")));
            }
            next = b.end;
        }
        if next != rows {
            return Err(shape_err(name, format!("blocks cover {next} of {rows} rows")));
        }
        Ok(())
    }

    /// Block-diagonal `coef^T * input`: rows of `input` (`N x D`) are split
    /// into `blocks` and block `b` of the output is
    /// `coef[b, b]^T * input[b]`. Entries of the `N x N` coefficient matrix
    /// outside the diagonal blocks are ignored and receive zero gradient.
    pub fn block_matmul_tn(&mut self, coef: Var, input: Var, blocks: Arc<[Range<usize>]>) -> Result<Var> {
        let (cs, xs) = (self.value(coef).shape(), self.value(input).shape());
        if xs.len() != 2 || cs.len() != 2 || cs[0] != xs[0] || cs[1] != xs[0] {
            return Err(shape_err("block_matmul_tn", format!("coef {cs:?}, input {xs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        Self::check_blocks("block_matmul_tn", &blocks, n)?;
        let (c, x) = (self.value(coef).data(), self.value(input).data());
        let mut out = vec![0.0; n * d];
        let mut tile = Vec::new();
        for b in blocks.iter() {
            let len = b.len();
            copy_block(c, n, b, &mut tile);
            gemm(len, len, d, 1.0, &tile, true, &x[b.start * d..b.end * d], false, 0.0, &mut out[b.start * d..b.end * d]);
        }
        let value = Tensor::new(vec![n, d], out)?;
        self.push("block_matmul_tn", value, Op::BlockMatMulTN { blocks, coef, input }, &[coef, input])
    }

    /// `sum_{a < b} ||input[a] * input[b]^T||^2` over row blocks of an
    /// `N x D` matrix, evaluated through `D x D` Gram matrices as
    /// `(||X^T X||^2 - sum_a ||X_a^T X_a||^2) / 2`.
    pub fn cross_block_gram_sq(&mut self, input: Var, blocks: Arc<[Range<usize>]>) -> Result<Var> {
        let xs = self.value(input).shape();
        if xs.len() != 2 {
            return Err(shape_err("cross_block_gram_sq", format!("input {xs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        Self::check_blocks("cross_block_gram_sq", &blocks, n)?;
        let x = self.value(input).data();
        let mut total = vec![0.0; d * d];
        let mut part = vec![0.0; d * d];
        let mut within = 0.0;
        for b in blocks.iter() {
            let xb = &x[b.start * d..b.end * d];
            gemm(d, b.len(), d, 1.0, xb, true, xb, false, 0.0, &mut part);
            within += part.iter().map(|v| v * v).sum::<f64>();
            total.iter_mut().zip(&part).for_each(|(t, p)| *t += p);
        }
        let all: f64 = total.iter().map(|v| v * v).sum();
        let value = Tensor::scalar(0.5 * (all - within));
        self.push("cross_block_gram_sq", value, Op::CrossBlockGramSq { blocks, input }, &[input])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // interior gradients are dropped as soon as they are consumed
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.requires_grad => Some(Tensor { shape: n.value.shape().to_vec(), data: g }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, geom } => {
                let (gi, gw) = conv::conv_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    self.wants(*input),
                    self.wants(*weight),
                );
                accumulate_opt(grads, *input, gi);
                accumulate_opt(grads, *weight, gw);
            }
            Op::ConvTranspose { input, weight, geom } => {
                let (gi, gw) = conv::conv_transpose_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    self.wants(*input),
                    self.wants(*weight),
                );
                accumulate_opt(grads, *input, gi);
                accumulate_opt(grads, *weight, gw);
            }
            Op::BiasAdd { input, bias } => {
                if self.wants(*bias) {
                    let xs = self.value(*input).shape();
                    let (c, inner) = (xs[1], xs[2..].iter().product::<usize>());
                    let mut gb = vec![0.0; c];
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f64>();
                    }
                    accumulate(grads, *bias, &gb);
                }
                if self.wants(*input) {
                    accumulate(grads, *input, g);
                }
            }
            Op::Relu { input } => {
                if self.wants(*input) {
                    let x = self.value(*input).data();
                    let gi: Vec<f64> = x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
                    accumulate_owned(grads, *input, gi);
                }
            }
            Op::MatMul { lhs, rhs, trans, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = self.value(*lhs).data();
                let b = self.value(*rhs).data();
                if self.wants(*lhs) {
                    let mut ga = vec![0.0; m * k];
                    if trans.lhs {
                        // lhs stored k x m: dA = op(B) * dC^T
                        gemm(k, n, m, 1.0, b, trans.rhs, g, true, 0.0, &mut ga);
                    } else {
                        // dA = dC * op(B)^T
                        gemm(m, n, k, 1.0, g, false, b, !trans.rhs, 0.0, &mut ga);
                    }
                    accumulate_owned(grads, *lhs, ga);
                }
                if self.wants(*rhs) {
                    let mut gb = vec![0.0; k * n];
                    if trans.rhs {
                        // rhs stored n x k: dB = dC^T * op(A)
                        gemm(n, m, k, 1.0, g, true, a, trans.lhs, 0.0, &mut gb);
                    } else {
                        // dB = op(A)^T * dC
                        gemm(k, m, n, 1.0, a, !trans.lhs, g, false, 0.0, &mut gb);
                    }
                    accumulate_owned(grads, *rhs, gb);
                }
            }
            Op::FrobeniusSq { input, mask } => {
                if self.wants(*input) {
                    let x = self.value(*input).data();
                    let s = g[0];
                    let gi: Vec<f64> = match mask {
                        None => x.iter().map(|&v| 2.0 * s * v).collect(),
                        Some(m) => x.iter().zip(m.iter()).map(|(&v, &m)| 2.0 * s * m * v).collect(),
                    };
                    accumulate_owned(grads, *input, gi);
                }
            }
            Op::L1Sum { input } => {
                if self.wants(*input) {
                    let s = g[0];
                    let gi: Vec<f64> = self
                        .value(*input)
                        .data()
                        .iter()
                        .map(|&v| if v > 0.0 { s } else if v < 0.0 { -s } else { 0.0 })
                        .collect();
                    accumulate_owned(grads, *input, gi);
                }
            }
            Op::Add { lhs, rhs } => {
                if self.wants(*lhs) {
                    accumulate(grads, *lhs, g);
                }
                if self.wants(*rhs) {
                    accumulate(grads, *rhs, g);
                }
            }
            Op::ScalarMul { input, factor } => {
                if self.wants(*input) {
                    accumulate_owned(grads, *input, g.iter().map(|v| factor * v).collect());
                }
            }
            Op::Reshape { input } => {
                if self.wants(*input) {
                    accumulate(grads, *input, g);
                }
            }
            Op::BlockMatMulTN { blocks, coef, input } => {
                let (c, x) = (self.value(*coef).data(), self.value(*input).data());
                let n = self.value(*input).shape()[0];
                let d = self.value(*input).shape()[1];
                let mut tile = Vec::new();
                if self.wants(*input) {
                    let mut gi = vec![0.0; n * d];
                    for b in blocks.iter() {
                        copy_block(c, n, b, &mut tile);
                        let len = b.len();
                        gemm(len, len, d, 1.0, &tile, false, &g[b.start * d..b.end * d], false, 0.0, &mut gi[b.start * d..b.end * d]);
                    }
                    accumulate_owned(grads, *input, gi);
                }
                if self.wants(*coef) {
                    let mut gc = vec![0.0; n * n];
                    for b in blocks.iter() {
                        let len = b.len();
                        tile.resize(len * len, 0.0);
                        let rows = b.start * d..b.end * d;
                        gemm(len, d, len, 1.0, &x[rows.clone()], false, &g[rows], true, 0.0, &mut tile);
                        for (r, src) in tile.chunks(len.max(1)).enumerate().take(len) {
                            gc[(b.start + r) * n + b.start..][..len].copy_from_slice(src);
                        }
                    }
                    accumulate_owned(grads, *coef, gc);
                }
            }
            Op::CrossBlockGramSq { blocks, input } => {
                if self.wants(*input) {
                    let x = self.value(*input).data();
                    let d = self.value(*input).shape()[1];
                    let mut total = vec![0.0; d * d];
                    let mut parts = Vec::with_capacity(blocks.len());
                    for b in blocks.iter() {
                        let xb = &x[b.start * d..b.end * d];
                        let mut part = vec![0.0; d * d];
                        gemm(d, b.len(), d, 1.0, xb, true, xb, false, 0.0, &mut part);
                        total.iter_mut().zip(&part).for_each(|(t, p)| *t += p);
                        parts.push(part);
                    }
                    // d/dX_a = 2 X_a (S - S_a)
                    let mut gi = vec![0.0; x.len()];
                    for (b, mut part) in blocks.iter().zip(parts) {
                        part.iter_mut().zip(&total).for_each(|(p, t)| *p = t - *p);
                        let rows = b.start * d..b.end * d;
                        gemm(b.len(), d, d, 2.0 * g[0], &x[rows.clone()], false, &part, false, 0.0, &mut gi[rows]);
                    }
                    accumulate_owned(grads, *input, gi);
                }
            }
        }
    }
}

/// Copies the diagonal block `rows x rows` of an `n x n` matrix into `tile`.
fn copy_block(m: &[f64], n: usize, rows: &Range<usize>, tile: &mut Vec<f64>) {
    tile.clear();
    for r in rows.clone() {
        tile.extend_from_slice(&m[r * n + rows.start..r * n + rows.end]);
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_opt(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
    if let Some(g) = g {
        accumulate_owned(grads, v, g);
    }
}

/// Gradients of a scalar root with respect to the graph's parameters.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `param`, or zeros shaped like it when the root does not
    /// depend on it.
    pub fn wrt(&self, graph: &Graph, param: Var) -> Tensor {
        self.get(param).cloned().unwrap_or_else(|| Tensor::zeros(graph.value(param).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
