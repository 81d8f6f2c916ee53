//! Record-on-execute reverse-mode autodiff.
//!
//! Every op appends a node whose inputs were recorded earlier, so the node
//! list is already in topological order and `backward` is a single reverse
//! sweep. Ops validate shapes and reject non-finite outputs at the boundary.

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a value recorded on a [`Tape`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Softplus(Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gather { x: Var, index: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumLastDim(Var),
    SumMasked { x: Var, weights: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation graph. Single-threaded; independent tapes may run on
/// separate threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Record a leaf. Gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let requires_grad = tensor.requires_grad();
        Ok(self.push_unchecked(tensor, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let value = Tensor::new(shape, data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(a), &[a])
    }

    /// Check that `b`'s shape is a suffix of `a`'s (leading-dim broadcast).
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.broadcast_check(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        let out: Vec<f64> = da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a, b])
    }

    /// `a + b`, with `b` broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "minimum",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Natural log; non-positive inputs are rejected as non-finite.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Layer normalization over the last dimension with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(d) {
            let (xhat, _) = normalize(row);
            out.extend(xhat.iter().enumerate().map(|(j, &v)| v * g[j] + b[j]));
        }
        let shape = self.shape(x).to_vec();
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gain, bias }, &[x, gain, bias])
    }

    /// Gather arbitrary flat elements of `x` into a tensor of `shape`.
    pub fn gather_flat(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("gather index {bad} out of range for {n} elements")));
        }
        let src = self.data(x);
        let out: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        self.push("gather", shape, out, Op::Gather { x, index }, &[x])
    }

    /// Per-row gather: `x[R×V]`, `cols[R][k]` → `[R×k]`.
    pub fn gather(&mut self, x: Var, cols: &[Vec<usize>]) -> Result<Var> {
        let v = self.value(x).last_dim();
        let rows = self.value(x).rows();
        let k = cols.first().map_or(0, Vec::len);
        if cols.len() != rows || k == 0 || cols.iter().any(|c| c.len() != k) {
            return Err(Error::Shape {
                op: "gather",
                lhs: self.shape(x).to_vec(),
                rhs: vec![cols.len(), k],
            });
        }
        let mut index = Vec::with_capacity(rows * k);
        for (r, row_cols) in cols.iter().enumerate() {
            for &c in row_cols {
                if c >= v {
                    return Err(Error::Contract(format!("gather column {c} out of range for width {v}")));
                }
                index.push(r * v + c);
            }
        }
        self.gather_flat(x, index, vec![rows, k])
    }

    /// Select arbitrary rows of a 2-D `x[R×C]` into `[rows.len()×C]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let c = self.value(x).last_dim();
        let r = self.value(x).rows();
        if rows.is_empty() {
            return Err(Error::Contract("select_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row {bad} out of range for {r} rows")));
        }
        let index = rows.iter().flat_map(|&i| (i * c)..(i * c + c)).collect();
        self.gather_flat(x, index, vec![rows.len(), c])
    }

    /// Embedding lookup: `table[V×d]`, ids → `[T×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                vocab: s[0],
            });
        }
        self.select_rows(table, ids)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Softmax over a square `[T×T]` score matrix with entries above the
    /// diagonal masked out.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Shape {
                op: "causal_softmax",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let v = self.value(x).last_dim();
        let mut out = vec![0.0; self.value(x).numel()];
        for (r, (row, o)) in self.data(x).chunks(v).zip(out.chunks_mut(v)).enumerate() {
            let valid = if causal { (r % v) + 1 } else { v };
            softmax_into(&row[..valid], &mut o[..valid]);
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, Op::Softmax(x), &[x])
    }

    /// `x - max - ln Σ exp(x - max)` over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).last_dim();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(v) {
            out.extend(log_softmax_row(row));
        }
        let shape = self.shape(x).to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", vec![1], vec![m], Op::Mean(x), &[x])
    }

    /// Sum over the last dimension: `[..., V]` → `[...]` (rank-1 inputs
    /// collapse to `[1]`).
    pub fn sum_last_dim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).last_dim();
        let out: Vec<f64> = self.data(x).chunks(v).map(|r| r.iter().sum()).collect();
        let s = self.shape(x);
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        self.push("sum_last_dim", shape, out, Op::SumLastDim(x), &[x])
    }

    /// Σ mask·x, optionally divided by Σ mask. `mask` is 0/1 valued and has
    /// one entry per element of `x`.
    pub fn sum_masked(&mut self, x: Var, mask: &[f64], mean: bool) -> Result<Var> {
        let n = self.value(x).numel();
        if mask.len() != n {
            return Err(Error::Shape {
                op: "sum_masked",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Contract("mask must be 0/1 valued".into()));
        }
        let total: f64 = mask.iter().sum();
        let divisor = if mean {
            if total == 0.0 {
                return Err(Error::DegenerateBatch("masked mean over an all-zero mask".into()));
            }
            total
        } else {
            1.0
        };
        let weights: Vec<f64> = mask.iter().map(|m| m / divisor).collect();
        let s: f64 = self.data(x).iter().zip(&weights).map(|(a, w)| a * w).sum();
        self.push("sum_masked", vec![1], vec![s], Op::SumMasked { x, weights }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: s.to_vec(),
                rhs: vec![start, len],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push("slice_cols", vec![r, len], out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let r = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape, data, Op::Reshape(x), &[x])
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad {
                    self.nodes[i].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(slot);
            }
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if needs(*a) {
                    acc(*a, &mut |ga| {
                        for r in 0..m {
                            let g_row = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let b_row = &db[p * n..(p + 1) * n];
                                ga[r * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if needs(*b) {
                    acc(*b, &mut |gb| {
                        for r in 0..m {
                            let g_row = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let a_rp = da[r * k + p];
                                if a_rp == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                    *o += a_rp * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let s = nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| {
                    let nb = gb.len();
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % nb] += sign * gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let nb = db.len();
                acc(*a, &mut |ga| {
                    for (j, gv) in g.iter().enumerate() {
                        ga[j] += gv * db[j % nb];
                    }
                });
                acc(*b, &mut |gb| {
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % nb] += gv * da[j];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y))
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for j in 0..ga.len() {
                    ga[j] += g[j] * out[j];
                }
            }),
            Op::Log(a) => {
                let da = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] / da[j];
                    }
                })
            }
            Op::Gelu(a) => {
                let da = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * gelu_grad(da[j]);
                    }
                })
            }
            Op::Softplus(a) => {
                let da = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * sigmoid(da[j]);
                    }
                })
            }
            Op::Minimum(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        if da[j] <= db[j] {
                            ga[j] += g[j];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        if da[j] > db[j] {
                            gb[j] += g[j];
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let da = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        if da[j] >= *lo && da[j] <= *hi {
                            ga[j] += g[j];
                        }
                    }
                })
            }
            Op::LayerNorm { x, gain, bias } => {
                let dx = nodes[x.0].value.data();
                let d = nodes[x.0].value.last_dim();
                let gn = nodes[gain.0].value.data();
                let rows = dx.len() / d;
                let mut xhats = Vec::with_capacity(rows);
                for row in dx.chunks(d) {
                    xhats.push(normalize(row));
                }
                acc(*gain, &mut |gg| {
                    for (r, (xhat, _)) in xhats.iter().enumerate() {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let n = d as f64;
                    for (r, (xhat, inv_std)) in xhats.iter().enumerate() {
                        let dxhat: Vec<f64> = (0..d).map(|j| g[r * d + j] * gn[j]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += inv_std / n * (n * dxhat[j] - sum_d - xhat[j] * sum_dx);
                        }
                    }
                });
            }
            Op::Gather { x, index } => acc(*x, &mut |gx| {
                for (j, &src) in index.iter().enumerate() {
                    gx[src] += g[j];
                }
            }),
            Op::Softmax(x) => {
                let v = nodes[x.0].value.last_dim();
                acc(*x, &mut |gx| {
                    for ((p, go), gi) in out.chunks(v).zip(g.chunks(v)).zip(gx.chunks_mut(v)) {
                        let dot: f64 = p.iter().zip(go).map(|(a, b)| a * b).sum();
                        for j in 0..v {
                            gi[j] += p[j] * (go[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let v = nodes[x.0].value.last_dim();
                acc(*x, &mut |gx| {
                    for ((ls, go), gi) in out.chunks(v).zip(g.chunks(v)).zip(gx.chunks_mut(v)) {
                        let total: f64 = go.iter().sum();
                        for j in 0..v {
                            gi[j] += go[j] - ls[j].exp() * total;
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => acc(*x, &mut |gx| {
                let n = gx.len() as f64;
                gx.iter_mut().for_each(|v| *v += g[0] / n)
            }),
            Op::SumLastDim(x) => {
                let v = nodes[x.0].value.last_dim();
                acc(*x, &mut |gx| {
                    for (r, row) in gx.chunks_mut(v).enumerate() {
                        row.iter_mut().for_each(|e| *e += g[r]);
                    }
                })
            }
            Op::SumMasked { x, weights } => acc(*x, &mut |gx| {
                for (e, w) in gx.iter_mut().zip(weights) {
                    *e += g[0] * w;
                }
            }),
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.last_dim();
                let len = nodes[i].value.last_dim();
                let start = *start;
                acc(*x, &mut |gx| {
                    for (r, go) in g.chunks(len).enumerate() {
                        for j in 0..len {
                            gx[r * c + start + j] += go[j];
                        }
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    acc(p, &mut |gp| {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            for j in 0..w {
                                row[j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
        }
    }
}

// ------------------------------------------------------------ scalar helpers

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Returns the standardized row and `1/sqrt(var + eps)`.
fn normalize(row: &[f64]) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (row.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - max - lse).collect()
}
