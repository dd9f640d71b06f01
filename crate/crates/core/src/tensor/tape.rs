//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a Wengert list: every op appends a node holding its value
//! and enough context to run its vector-Jacobian product. Ops are coarse
//! (matmul, layer norm, fused block attention, segment MSE) so the tape stays
//! short for a transformer forward pass.

use super::attention::{
    block_attention_backward, block_attention_forward, BlockCapture, BlockLayout,
};
use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through a single `exp`; libm's version is several times slower.
#[inline]
fn tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    RepeatRows {
        x: Var,
        times: usize,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Silu(Var),
    Attention {
        qkv: Var,
        heads: usize,
        layout: BlockLayout,
        probs: Vec<Vec<Vec<f64>>>,
    },
    SegmentMse {
        pred: Var,
        target: Vec<f64>,
        segment_len: usize,
        weights: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Attention block sums recorded during a forward pass, tagged by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedCapture {
    pub layer: usize,
    pub capture: BlockCapture,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    captures: Vec<TaggedCapture>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            captures: Vec::new(),
        }
    }

    /// A forward-only graph; attention weights are not retained.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_captures(&mut self) -> Vec<TaggedCapture> {
        std::mem::take(&mut self.captures)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        value.check_finite(op_name(&op))?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.require_rank(2, what)?;
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::Dimension(format!(
                "bias of {} for {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddBias(x, bias), rg)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect())?;
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// Repeats each row of `[m, n]` `times` times consecutively: `[m*times, n]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "repeat_rows")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * times * n);
        for row in src.chunks(n.max(1)).take(m) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let value = Tensor::new(vec![m * times, n], out)?;
        let rg = self.rg(x);
        self.push(value, Op::RepeatRows { x, times }, rg)
    }

    /// Row lookup into a `[rows, n]` table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(table, "gather")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Dimension(format!(
                "gather row {bad} of table with {m} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vec![rows.len(), n], out)?;
        let rg = self.rg(table);
        self.push(
            value,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Columns `start..start+len` of a `[m, n]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of {n}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], out)?;
        let rg = self.rg(x);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for (row, orow) in src.chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            inv_std.push(r);
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(x);
        self.push(value, Op::LayerNorm { x, inv_std }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + tanh(GELU_C * (v + 0.044715 * v * v * v))))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    /// Multi-head block attention over packed `[tokens, 3C]` projections.
    ///
    /// When `capture_layer` is set, block sums of blocks flagged for capture
    /// are recorded on the graph under that layer index.
    pub fn attention(
        &mut self,
        qkv: Var,
        heads: usize,
        layout: &BlockLayout,
        capture_layer: Option<usize>,
    ) -> Result<Var> {
        let (tokens, width) = self.dims2(qkv, "attention")?;
        if width % 3 != 0 {
            return Err(Error::Dimension(format!(
                "qkv width {width} not divisible by 3"
            )));
        }
        let channels = width / 3;
        let mut layout = layout.clone();
        if capture_layer.is_none() {
            layout.blocks.iter_mut().for_each(|b| b.capture = false);
        }
        let keep = self.grad_enabled && self.rg(qkv);
        let res = block_attention_forward(self.value(qkv).data(), channels, heads, &layout, keep)?;
        if let Some(layer) = capture_layer {
            self.captures.extend(
                res.captures
                    .into_iter()
                    .map(|capture| TaggedCapture { layer, capture }),
            );
        }
        let value = Tensor::new(vec![tokens, channels], res.out)?;
        let rg = self.rg(qkv);
        self.push(
            value,
            Op::Attention {
                qkv,
                heads,
                layout,
                probs: if keep { res.probs } else { Vec::new() },
            },
            rg,
        )
    }

    /// `sum_s weights[s] * mean((pred_s - target_s)^2)` over consecutive row
    /// segments of `segment_len` rows.
    pub fn segment_mse(
        &mut self,
        pred: Var,
        target: &Tensor,
        segment_len: usize,
        weights: &[f64],
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "loss prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let rows = p.rows();
        if segment_len == 0
            || !rows.is_multiple_of(segment_len)
            || rows / segment_len != weights.len()
        {
            return Err(Error::Dimension(format!(
                "{rows} rows cannot form {} segments of {segment_len}",
                weights.len()
            )));
        }
        let seg_elems = segment_len * p.row_len();
        let total: f64 = p
            .data()
            .chunks(seg_elems)
            .zip(target.data().chunks(seg_elems))
            .zip(weights)
            .map(|((a, b), w)| {
                w * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / seg_elems as f64
            })
            .sum();
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(total),
            Op::SegmentMse {
                pred,
                target: target.data().to_vec(),
                segment_len,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, d: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.rg(*a) {
                    acc(*a, kernels::matmul_bt(g, bv.data(), m, n, k));
                }
                if self.rg(*b) {
                    acc(*b, kernels::matmul_at(av.data(), g, m, k, n));
                }
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                if self.rg(*b) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*b, db);
                }
                acc(*x, g.to_vec());
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::RepeatRows { x, times } => {
                let n = self.value(*x).row_len();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, row) in g.chunks(n.max(1)).enumerate() {
                    let dst = &mut dx[(r / times) * n..(r / times + 1) * n];
                    dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                acc(*x, dx);
            }
            Op::Gather { table, rows } => {
                let n = self.value(*table).row_len();
                let mut dt = vec![0.0; self.value(*table).len()];
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut dt[r * n..(r + 1) * n];
                    dst.iter_mut()
                        .zip(&g[i * n..(i + 1) * n])
                        .for_each(|(d, v)| *d += v);
                }
                acc(*table, dt);
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).row_len();
                let len = node.value.row_len();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.value.row_len();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (r, ((drow, grow), yrow)) in dx
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(y.chunks(n))
                    .enumerate()
                {
                    let mean_g = grow.iter().sum::<f64>() / n as f64;
                    let mean_gy = kernels::dot(grow, yrow) / n as f64;
                    for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(*x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| {
                        let th = tanh(GELU_C * (v + 0.044715 * v * v * v));
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        gv * (s + v * s * (1.0 - s))
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::Attention {
                qkv,
                heads,
                layout,
                probs,
            } => {
                let q = self.value(*qkv);
                let channels = q.row_len() / 3;
                acc(
                    *qkv,
                    block_attention_backward(q.data(), g, probs, channels, *heads, layout),
                );
            }
            Op::SegmentMse {
                pred,
                target,
                segment_len,
                weights,
            } => {
                let p = self.value(*pred);
                let seg_elems = segment_len * p.row_len();
                let scale = 2.0 * g[0] / seg_elems as f64;
                let dx = p
                    .data()
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(i, (a, b))| scale * weights[i / seg_elems] * (a - b))
                    .collect();
                acc(*pred, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::AddScalar(..) => "add_scalar",
        Op::RepeatRows { .. } => "repeat_rows",
        Op::Gather { .. } => "gather",
        Op::SliceCols { .. } => "slice_cols",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(..) => "gelu",
        Op::Silu(..) => "silu",
        Op::Attention { .. } => "attention",
        Op::SegmentMse { .. } => "segment_mse",
        Op::Sum(..) => "sum",
    }
}

/// Gradients of every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
