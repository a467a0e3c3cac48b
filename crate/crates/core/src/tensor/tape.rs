use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use super::kernels::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    /// Multiply by a constant scalar; the only broadcast the engine allows.
    Scale(f64),
    Relu,
    Gelu,
}

impl ElementwiseKind {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

impl FromStr for ElementwiseKind {
    type Err = Error;

    /// Parses `add`, `sub`, `mul`, `relu`, `gelu` or `scale:<factor>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "sub" => Ok(Self::Sub),
            "mul" => Ok(Self::Mul),
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            _ => match s.strip_prefix("scale:").map(str::parse::<f64>) {
                Some(Ok(f)) => Ok(Self::Scale(f)),
                _ => Err(Error::InvalidArgument(format!(
                    "unknown elementwise kind `{s}`"
                ))),
            },
        }
    }
}

/// One attention group: query rows attend to key rows, nothing else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

/// Post-softmax scores of one group, laid out `[head][query][key]`.
#[derive(Clone, Debug)]
pub struct GroupScores {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
    pub heads: usize,
    pub probs: Vec<f64>,
}

impl GroupScores {
    /// Scores averaged over heads, laid out `[query][key]`.
    pub fn head_mean(&self) -> Vec<f64> {
        let per_head = self.queries.len() * self.keys.len();
        let mut out = vec![0.0; per_head];
        for h in 0..self.heads {
            for (o, p) in out.iter_mut().zip(&self.probs[h * per_head..]) {
                *o += p;
            }
        }
        let inv = 1.0 / self.heads as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    AddBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SegmentMean(Var, Vec<Vec<usize>>),
    ScatterMap(Var, Vec<usize>),
    GatherMap(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: Vec<AttentionGroup>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
    Sum(Var),
    Mean(Var),
    Chamfer {
        pred: Var,
        targets: Vec<f64>,
        k_pred: usize,
        k_gt: usize,
        nearest_target: Vec<usize>,
        nearest_pred: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }
}

/// Define-by-run recording of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a reverse sweep over indices is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    layer_norm_fault: Option<f64>,
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

    /// Hash of every piecewise choice on the tape: ReLU input signs and the
    /// Chamfer nearest-neighbour indices. Two evaluations with equal
    /// signatures took the same smooth branch.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::Chamfer {
                    nearest_target,
                    nearest_pred,
                    ..
                } => {
                    i.hash(&mut h);
                    nearest_target.hash(&mut h);
                    nearest_pred.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Scales the gamma gradient of every later layer-norm backward.
    /// Only useful as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn corrupt_layer_norm_backward(&mut self, factor: f64) {
        self.layer_norm_fault = Some(factor);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, x: Var, y: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), y) {
            (true, Some(y)) => {
                if self.shape(x) != self.shape(y) {
                    return Err(Error::shape(
                        "elementwise",
                        format!("{kind:?} on {:?} and {:?}", self.shape(x), self.shape(y)),
                    ));
                }
                let (xs, ys) = (self.value(x).data(), self.value(y).data());
                let data: Vec<f64> = match kind {
                    ElementwiseKind::Add => xs.iter().zip(ys).map(|(a, b)| a + b).collect(),
                    ElementwiseKind::Sub => xs.iter().zip(ys).map(|(a, b)| a - b).collect(),
                    _ => xs.iter().zip(ys).map(|(a, b)| a * b).collect(),
                };
                let op = match kind {
                    ElementwiseKind::Add => Op::Add(x, y),
                    ElementwiseKind::Sub => Op::Sub(x, y),
                    _ => Op::Mul(x, y),
                };
                let t = Tensor::new(self.shape(x).to_vec(), data)?;
                let rg = self.rg(&[x, y]);
                Ok(self.push(t, op, rg))
            }
            (false, None) => {
                let xs = self.value(x).data();
                let (data, op): (Vec<f64>, Op) = match kind {
                    ElementwiseKind::Scale(s) => {
                        (xs.iter().map(|a| a * s).collect(), Op::Scale(x, s))
                    }
                    ElementwiseKind::Relu => (xs.iter().map(|a| a.max(0.0)).collect(), Op::Relu(x)),
                    _ => (xs.iter().map(|&a| kernels::gelu(a)).collect(), Op::Gelu(x)),
                };
                let t = Tensor::new(self.shape(x).to_vec(), data)?;
                let rg = self.rg(&[x]);
                Ok(self.push(t, op, rg))
            }
            (true, None) => Err(Error::InvalidArgument(format!(
                "{kind:?} needs a second operand"
            ))),
            (false, Some(_)) => Err(Error::InvalidArgument(format!(
                "{kind:?} takes a single operand"
            ))),
        }
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, x, Some(y))
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sub, x, Some(y))
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, x, Some(y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.elementwise(ElementwiseKind::Scale(s), x, None)
            .expect("unary op cannot fail")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.elementwise(ElementwiseKind::Relu, x, None)
            .expect("unary op cannot fail")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.elementwise(ElementwiseKind::Gelu, x, None)
            .expect("unary op cannot fail")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|a| a.tanh()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Tanh(x), rg)
    }

    /// `x[..×n] + bias[n]`, the bias repeated over every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    /// `x · w + b` for `x[m×i]`, `w[i×o]`, `b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", x)?;
        let xs = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xs[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if n == 0 {
            return Err(Error::shape("softmax_lastdim", "last axis is empty"));
        }
        let mut data = self.value(x).data().to_vec();
        data.chunks_mut(n).for_each(kernels::softmax_row);
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Per-row standardization over the last axis (biased variance), then
    /// `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    /// `x[C×H×W]`, `w[C_out×C×3×3]`, `b[C_out]` → `[C_out×H×W]`.
    pub fn conv2d_3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (c, h, wd) = match *self.shape(x) {
            [c, h, w] if h > 0 && w > 0 => (c, h, w),
            ref s => return Err(Error::shape("conv2d_3x3", format!("input {s:?}"))),
        };
        let c_out = match *self.shape(w) {
            [o, ci, 3, 3] if ci == c => o,
            ref s => {
                return Err(Error::shape(
                    "conv2d_3x3",
                    format!("weights {s:?} for {c} input channels"),
                ))
            }
        };
        if self.shape(b) != [c_out] {
            return Err(Error::shape(
                "conv2d_3x3",
                format!("bias {:?} for {c_out} output channels", self.shape(b)),
            ));
        }
        let hw = h * wd;
        let cols = kernels::im2col_3x3(self.value(x).data(), c, h, wd);
        let mut out = vec![0.0; c_out * hw];
        gemm(
            c_out,
            c * 9,
            hw,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        for (o, bias) in self.value(b).data().iter().enumerate() {
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bias);
        }
        let rg = self.rg(&[x, w, b]);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(vec![c_out, h, wd], out)?,
            Op::Conv3x3 { x, w, b, cols },
            rg,
        ))
    }

    /// Rows `x[index[i]]`, in order. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("gather_rows", x)?;
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(Error::shape("gather_rows", format!("row {i} of {m}")));
            }
            data.extend_from_slice(&xs[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![index.len(), n], data)?,
            Op::GatherRows(x, index.to_vec()),
            rg,
        ))
    }

    /// Stack matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.matrix_dims("concat_rows", p)?.1,
            None => return Err(Error::shape("concat_rows", "no inputs")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != n {
                return Err(Error::shape("concat_rows", format!("{c} vs {n} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Mean of `x` rows over each segment; each segment must be non-empty.
    /// Rows are summed in the order listed.
    pub fn segment_mean(&mut self, x: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = self.matrix_dims("segment_mean", x)?;
        let xs = self.value(x).data();
        let mut data = vec![0.0; segments.len() * n];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::shape("segment_mean", format!("segment {s} is empty")));
            }
            let out = &mut data[s * n..(s + 1) * n];
            for &i in seg {
                if i >= m {
                    return Err(Error::shape("segment_mean", format!("row {i} of {m}")));
                }
                out.iter_mut()
                    .zip(&xs[i * n..(i + 1) * n])
                    .for_each(|(o, v)| *o += v);
            }
            let inv = 1.0 / seg.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![segments.len(), n], data)?,
            Op::SegmentMean(x, segments.to_vec()),
            rg,
        ))
    }

    /// Scatter token rows `x[P×d]` into a zero `d×H×W` map at flat cells
    /// `cells[p] = iy·W + ix`. Cells must be unique.
    pub fn scatter_to_map(&mut self, x: Var, cells: &[usize], h: usize, w: usize) -> Result<Var> {
        let (p, d) = self.matrix_dims("scatter_to_map", x)?;
        if cells.len() != p {
            return Err(Error::shape(
                "scatter_to_map",
                format!("{} cells for {p} rows", cells.len()),
            ));
        }
        let hw = h * w;
        let mut seen = vec![false; hw];
        let xs = self.value(x).data();
        let mut data = vec![0.0; d * hw];
        for (r, &cell) in cells.iter().enumerate() {
            if cell >= hw {
                return Err(Error::shape("scatter_to_map", format!("cell {cell} of {hw}")));
            }
            if std::mem::replace(&mut seen[cell], true) {
                return Err(Error::Integrity(format!("duplicate cell {cell} in scatter")));
            }
            for c in 0..d {
                data[c * hw + cell] = xs[r * d + c];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![d, h, w], data)?,
            Op::ScatterMap(x, cells.to_vec()),
            rg,
        ))
    }

    /// Read `[P×d]` token rows out of a `d×H×W` map at flat cells.
    pub fn gather_from_map(&mut self, map: Var, cells: &[usize]) -> Result<Var> {
        let (d, hw) = match *self.shape(map) {
            [d, h, w] => (d, h * w),
            ref s => return Err(Error::shape("gather_from_map", format!("map {s:?}"))),
        };
        let ms = self.value(map).data();
        let mut data = Vec::with_capacity(cells.len() * d);
        for &cell in cells {
            if cell >= hw {
                return Err(Error::shape("gather_from_map", format!("cell {cell} of {hw}")));
            }
            data.extend((0..d).map(|c| ms[c * hw + cell]));
        }
        let rg = self.rg(&[map]);
        Ok(self.push(
            Tensor::new(vec![cells.len(), d], data)?,
            Op::GatherMap(map, cells.to_vec()),
            rg,
        ))
    }

    /// Grouped multi-head scaled dot-product attention over already
    /// projected `q[n_q×d]`, `k[n_k×d]`, `v[n_k×d]`.
    ///
    /// Each query row belongs to at most one group and attends only to that
    /// group's keys; rows outside every group come out as zeros. Every group
    /// needs at least one key.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: &[AttentionGroup],
        heads: usize,
    ) -> Result<(Var, Vec<GroupScores>)> {
        let (nq, d) = self.matrix_dims("attention", q)?;
        let (nk, dk) = self.matrix_dims("attention", k)?;
        let (nv, dv) = self.matrix_dims("attention", v)?;
        if dk != d || dv != d || nv != nk {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{d} channels over {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; nq * d];
        let mut claimed = vec![false; nq];
        let mut all_probs = Vec::with_capacity(groups.len());
        for g in groups {
            if g.keys.is_empty() {
                return Err(Error::shape("attention", "group without keys"));
            }
            if let Some(&bad) = g.keys.iter().find(|&&j| j >= nk) {
                return Err(Error::shape("attention", format!("key row {bad} of {nk}")));
            }
            for &i in &g.queries {
                if i >= nq {
                    return Err(Error::shape("attention", format!("query row {i} of {nq}")));
                }
                if std::mem::replace(&mut claimed[i], true) {
                    return Err(Error::Integrity(format!("query row {i} in two groups")));
                }
            }
            let (gq, gk) = (g.queries.len(), g.keys.len());
            let mut probs = vec![0.0; heads * gq * gk];
            for h in 0..heads {
                let off = h * dh;
                for (a, &qi) in g.queries.iter().enumerate() {
                    let qrow = &qs[qi * d + off..qi * d + off + dh];
                    let prow = &mut probs[(h * gq + a) * gk..(h * gq + a + 1) * gk];
                    for (b, &kj) in g.keys.iter().enumerate() {
                        let krow = &ks[kj * d + off..kj * d + off + dh];
                        prow[b] = scale * qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>();
                    }
                    kernels::softmax_row(prow);
                    let orow = &mut out[qi * d + off..qi * d + off + dh];
                    for (b, &kj) in g.keys.iter().enumerate() {
                        let p = prow[b];
                        let vrow = &vs[kj * d + off..kj * d + off + dh];
                        orow.iter_mut().zip(vrow).for_each(|(o, v)| *o += p * v);
                    }
                }
            }
            all_probs.push(probs);
        }
        let scores = groups
            .iter()
            .zip(&all_probs)
            .map(|(g, p)| GroupScores {
                queries: g.queries.clone(),
                keys: g.keys.clone(),
                heads,
                probs: p.clone(),
            })
            .collect();
        let rg = self.rg(&[q, k, v]);
        let var = self.push(
            Tensor::new(vec![nq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                groups: groups.to_vec(),
                heads,
                probs: all_probs,
            },
            rg,
        );
        Ok((var, scores))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.value(x).data().iter().sum::<f64>() / n as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Mean over rows of the squared-distance Chamfer distance between the
    /// `k_pred` points packed in each row of `pred[M×3·k_pred]` and the
    /// matching `k_gt` target points (`targets` is `M×k_gt×3`, flat).
    pub fn chamfer(&mut self, pred: Var, targets: &[f64], k_pred: usize) -> Result<Var> {
        let (m, cols) = self.matrix_dims("chamfer", pred)?;
        if m == 0 || k_pred == 0 || cols != 3 * k_pred {
            return Err(Error::shape(
                "chamfer",
                format!("pred {:?} for {k_pred} points per row", self.shape(pred)),
            ));
        }
        if targets.is_empty() || !targets.len().is_multiple_of(3 * m) {
            return Err(Error::shape(
                "chamfer",
                format!("{} target values for {m} rows", targets.len()),
            ));
        }
        let k_gt = targets.len() / (3 * m);
        let ps = self.value(pred).data();
        let mut nearest_target = vec![0; m * k_pred];
        let mut nearest_pred = vec![0; m * k_gt];
        let mut total = 0.0;
        for r in 0..m {
            let pr = &ps[r * cols..(r + 1) * cols];
            let tr = &targets[r * k_gt * 3..(r + 1) * k_gt * 3];
            let (fwd, bwd) = chamfer_terms(
                pr,
                tr,
                &mut nearest_target[r * k_pred..(r + 1) * k_pred],
                &mut nearest_pred[r * k_gt..(r + 1) * k_gt],
            );
            total += fwd / k_pred as f64 + bwd / k_gt as f64;
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(total / m as f64),
            Op::Chamfer {
                pred,
                targets: targets.to_vec(),
                k_pred,
                k_gt,
                nearest_target,
                nearest_pred,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over every use of a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Autodiff(
                "loss does not depend on any differentiable input".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(i, node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backward_node(
        &self,
        i: usize,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {
                out.grads
                    .insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                if let Some(da) = self.slot(grads, a) {
                    gemm(m, n, k, &g, false, self.value(b).data(), true, da, true);
                }
                if let Some(db) = self.slot(grads, b) {
                    gemm(k, m, n, self.value(a).data(), true, &g, false, db, true);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, a) {
                    d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.slot(grads, b) {
                    d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(d) = self.slot(grads, a) {
                    let bs = self.value(b).data();
                    d.iter_mut()
                        .zip(g.iter().zip(bs))
                        .for_each(|(d, (g, b))| *d += g * b);
                }
                if let Some(d) = self.slot(grads, b) {
                    let xs = self.value(a).data();
                    d.iter_mut()
                        .zip(g.iter().zip(xs))
                        .for_each(|(d, (g, a))| *d += g * a);
                }
            }
            &Op::Scale(x, s) => {
                if let Some(d) = self.slot(grads, x) {
                    d.iter_mut().zip(&g).for_each(|(d, g)| *d += g * s);
                }
            }
            &Op::Relu(x) => {
                if let Some(d) = self.slot(grads, x) {
                    let xs = self.value(x).data();
                    for ((d, g), x) in d.iter_mut().zip(&g).zip(xs) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(d) = self.slot(grads, x) {
                    let xs = self.value(x).data();
                    for ((d, g), &x) in d.iter_mut().zip(&g).zip(xs) {
                        *d += g * kernels::gelu_grad(x);
                    }
                }
            }
            &Op::Tanh(x) => {
                if let Some(d) = self.slot(grads, x) {
                    for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            &Op::AddBias(x, b) => {
                if let Some(d) = self.slot(grads, x) {
                    d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = self.slot(grads, b) {
                    let n = db.len().max(1);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Transpose(x) => {
                if let Some(d) = self.slot(grads, x) {
                    let (m, n) = (self.value(x).shape()[0], self.value(x).shape()[1]);
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(d) = self.slot(grads, x) {
                    d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                }
            }
            &Op::Softmax(x) => {
                if let Some(d) = self.slot(grads, x) {
                    let n = node.value.last_dim();
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let dn = node.value.last_dim();
                if let Some(dg) = self.slot(grads, *gamma) {
                    let f = self.layer_norm_fault.unwrap_or(1.0);
                    for (grow, hrow) in g.chunks(dn).zip(xhat.chunks(dn)) {
                        for ((d, g), h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += f * g * h;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for grow in g.chunks(dn) {
                        db.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let gam = self.value(*gamma).data();
                    let nf = dn as f64;
                    let mut gh = vec![0.0; dn];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let grow = &g[r * dn..(r + 1) * dn];
                        let hrow = &xhat[r * dn..(r + 1) * dn];
                        for c in 0..dn {
                            gh[c] = grow[c] * gam[c];
                        }
                        let s1: f64 = gh.iter().sum();
                        let s2: f64 = gh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let drow = &mut dx[r * dn..(r + 1) * dn];
                        for c in 0..dn {
                            drow[c] += inv / nf * (nf * gh[c] - s1 - hrow[c] * s2);
                        }
                    }
                }
            }
            Op::Conv3x3 { x, w, b, cols } => {
                let (c, h, wd) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1], s[2])
                };
                let c_out = self.value(*w).shape()[0];
                let hw = h * wd;
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(c_out, hw, c * 9, &g, false, cols, true, dw, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dcols = vec![0.0; c * 9 * hw];
                    gemm(
                        c * 9,
                        c_out,
                        hw,
                        self.value(*w).data(),
                        true,
                        &g,
                        false,
                        &mut dcols,
                        false,
                    );
                    kernels::col2im_3x3(&dcols, c, h, wd, dx);
                }
            }
            Op::GatherRows(x, index) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let n = node.value.last_dim();
                    for (r, &src) in index.iter().enumerate() {
                        dx[src * n..(src + 1) * n]
                            .iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(d) = self.slot(grads, p) {
                        d.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(d, g)| *d += g);
                    }
                    off += len;
                }
            }
            Op::SegmentMean(x, segments) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let n = node.value.last_dim();
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len() as f64;
                        let grow = &g[s * n..(s + 1) * n];
                        for &r in seg {
                            dx[r * n..(r + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, g)| *d += g * inv);
                        }
                    }
                }
            }
            Op::ScatterMap(x, cells) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let s = node.value.shape();
                    let (d, hw) = (s[0], s[1] * s[2]);
                    for (r, &cell) in cells.iter().enumerate() {
                        for c in 0..d {
                            dx[r * d + c] += g[c * hw + cell];
                        }
                    }
                }
            }
            Op::GatherMap(map, cells) => {
                if let Some(dm) = self.slot(grads, *map) {
                    let s = self.value(*map).shape();
                    let (d, hw) = (s[0], s[1] * s[2]);
                    for (r, &cell) in cells.iter().enumerate() {
                        for c in 0..d {
                            dm[c * hw + cell] += g[r * d + c];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, groups, *heads, probs, &g, grads);
            }
            &Op::Sum(x) => {
                if let Some(d) = self.slot(grads, x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(d) = self.slot(grads, x) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Chamfer {
                pred,
                targets,
                k_pred,
                k_gt,
                nearest_target,
                nearest_pred,
            } => {
                if let Some(dp) = self.slot(grads, *pred) {
                    let ps = self.value(*pred).data();
                    let m = self.value(*pred).shape()[0];
                    let (kp, kg) = (*k_pred, *k_gt);
                    let wf = 2.0 * g[0] / (m as f64 * kp as f64);
                    let wb = 2.0 * g[0] / (m as f64 * kg as f64);
                    for r in 0..m {
                        let pbase = r * kp * 3;
                        let tbase = r * kg * 3;
                        for a in 0..kp {
                            let t = nearest_target[r * kp + a];
                            for c in 0..3 {
                                dp[pbase + a * 3 + c] +=
                                    wf * (ps[pbase + a * 3 + c] - targets[tbase + t * 3 + c]);
                            }
                        }
                        for b in 0..kg {
                            let p = nearest_pred[r * kg + b];
                            for c in 0..3 {
                                dp[pbase + p * 3 + c] +=
                                    wb * (ps[pbase + p * 3 + c] - targets[tbase + b * 3 + c]);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        groups: &[AttentionGroup],
        heads: usize,
        probs: &[Vec<f64>],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).shape()[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; qs.len()];
        let mut dk = vec![0.0; ks.len()];
        let mut dv = vec![0.0; vs.len()];
        let mut ds = Vec::new();
        for (grp, p) in groups.iter().zip(probs) {
            let (gq, gk) = (grp.queries.len(), grp.keys.len());
            for h in 0..heads {
                let off = h * dh;
                for (a, &qi) in grp.queries.iter().enumerate() {
                    let prow = &p[(h * gq + a) * gk..(h * gq + a + 1) * gk];
                    let grow = &g[qi * d + off..qi * d + off + dh];
                    ds.clear();
                    for (b, &kj) in grp.keys.iter().enumerate() {
                        let vrow = &vs[kj * d + off..kj * d + off + dh];
                        ds.push(grow.iter().zip(vrow).map(|(x, y)| x * y).sum::<f64>());
                        dv[kj * d + off..kj * d + off + dh]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(o, g)| *o += prow[b] * g);
                    }
                    let dot: f64 = ds.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (b, &kj) in grp.keys.iter().enumerate() {
                        let s = prow[b] * (ds[b] - dot) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[qi * d + off + c] += s * ks[kj * d + off + c];
                            dk[kj * d + off + c] += s * qs[qi * d + off + c];
                        }
                    }
                }
            }
        }
        for (var, acc) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(d) = self.slot(grads, var) {
                d.iter_mut().zip(&acc).for_each(|(d, a)| *d += a);
            }
        }
    }
}

/// Sums of nearest squared distances in both directions for one point-set
/// pair (flat `xyz` triples). Fills the argmin indices.
fn chamfer_terms(
    pred: &[f64],
    target: &[f64],
    nearest_target: &mut [usize],
    nearest_pred: &mut [usize],
) -> (f64, f64) {
    let kp = pred.len() / 3;
    let kg = target.len() / 3;
    let mut best_p = vec![f64::INFINITY; kp];
    let mut best_t = vec![f64::INFINITY; kg];
    for a in 0..kp {
        let p = &pred[a * 3..a * 3 + 3];
        for b in 0..kg {
            let t = &target[b * 3..b * 3 + 3];
            let d = (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2);
            if d < best_p[a] {
                best_p[a] = d;
                nearest_target[a] = b;
            }
            if d < best_t[b] {
                best_t[b] = d;
                nearest_pred[b] = a;
            }
        }
    }
    (best_p.iter().sum(), best_t.iter().sum())
}
