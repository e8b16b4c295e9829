//! Define-by-run reverse-mode tape.
//!
//! Each primitive evaluates eagerly, pushes a record, and returns a [`Var`]
//! handle. [`Tape::backward`] walks the records in reverse, accumulating
//! gradients in a fixed order so training is bit-reproducible. A tape is
//! single-threaded; independent tapes may run concurrently.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::tensor::{BoolMatrix, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    MaskedSoftmax(Var, Rc<BoolMatrix>),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Gelu(Var),
    EmbedGather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Square(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Drops all records but keeps the allocation; lets samplers reuse one
    /// tape across many forwards.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf)
    }

    fn rank2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("{what} must be rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rank2(a, "matmul lhs")?;
        let (kb, n) = self.rank2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner extents {ka} vs {kb}"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..ka {
                let x = av[i * ka + l];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += x * bb;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2(a, "transpose")?;
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    /// `x[S×d] + bias[d]`, bias added to every row.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (s, d) = self.rank2(x, "broadcast add lhs")?;
        let bshape = self.value(bias).shape().to_vec();
        if bshape != [d] {
            return Err(Error::ShapeMismatch(format!(
                "bias shape {bshape:?} for row width {d}"
            )));
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(s * d);
        for r in 0..s {
            for c in 0..d {
                out.push(xv[r * d + c] + bv[c]);
            }
        }
        Ok(self.push(Tensor::new(vec![s, d], out)?, Op::AddRowBroadcast(x, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale(a, c))
    }

    /// Softmax per row restricted to `allowed` columns; disallowed entries
    /// are exactly zero. Stabilized by subtracting the row max over the
    /// allowed set.
    pub fn masked_softmax(&mut self, logits: Var, allowed: Rc<BoolMatrix>) -> Result<Var> {
        let (r, c) = self.rank2(logits, "masked_softmax logits")?;
        if allowed.rows() != r || allowed.cols() != c {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} for logits {r}x{c}",
                allowed.rows(),
                allowed.cols()
            )));
        }
        let lv = self.value(logits).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let mask = allowed.row(i);
            let mut m = f64::NEG_INFINITY;
            for (v, &ok) in row.iter().zip(mask) {
                if ok && *v > m {
                    m = *v;
                }
            }
            if m == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(format!(
                    "masked_softmax row {i} has no allowed column"
                )));
            }
            let mut z = 0.0;
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                if mask[j] {
                    let e = (row[j] - m).exp();
                    orow[j] = e;
                    z += e;
                }
            }
            for (o, &ok) in orow.iter_mut().zip(mask) {
                if ok {
                    *o /= z;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::MaskedSoftmax(logits, allowed),
        ))
    }

    /// Per-row normalization of `x[S×d]` followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (s, d) = self.rank2(x, "layer_norm input")?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::ShapeMismatch("layer_norm affine params".into()));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(s * d);
        for r in 0..s {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                out.push((row[c] - mean) * inv * gv[c] + bv[c]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![s, d], out)?,
            Op::LayerNorm { x, gain, bias, eps },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Gelu(x))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.rank2(table, "embedding table")?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::TokenOutOfRange { id, vocab: n });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::EmbedGather { table, ids: ids.to_vec() },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (s, d) = self.rank2(x, "slice_cols input")?;
        if start + len > d {
            return Err(Error::ShapeMismatch(format!(
                "column slice {start}..{} of width {d}",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s * len);
        for r in 0..s {
            out.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        Ok(self.push(Tensor::new(vec![s, len], out)?, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput);
        }
        let s = self.rank2(parts[0], "concat_cols part")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rs, cs) = self.rank2(p, "concat_cols part")?;
            if rs != s {
                return Err(Error::ShapeMismatch("concat_cols row counts differ".into()));
            }
            widths.push(cs);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(s * total);
        for r in 0..s {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p).data();
                out.extend_from_slice(&pv[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![s, total], out)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (s, d) = self.rank2(x, "gather_rows input")?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= s {
                return Err(Error::ShapeMismatch(format!("row {r} of {s}")));
            }
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::GatherRows { x, rows: rows.to_vec() },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[K×V]`. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (k, v) = self.rank2(logits, "cross_entropy logits")?;
        if targets.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {k} logit rows",
                targets.len()
            )));
        }
        if k == 0 {
            return Err(Error::NothingToPredict);
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
            let row = &lv[i * v..(i + 1) * v];
            total += nll_row(row, t);
        }
        let loss = total / k as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        ))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * v).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Accumulates `d loss / d node` for every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument("backward target must be scalar".into()));
        }
        if !self.value(loss).all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.value(a).rows(), self.value(a).cols());
                    let n = self.value(b).cols();
                    let gv = g.data();
                    // da += g · bᵀ
                    {
                        let bv = self.value(b).data();
                        let da = grad_slot(&mut grads, a, &[m, k]);
                        for i in 0..m {
                            for l in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += gv[i * n + j] * bv[l * n + j];
                                }
                                da[i * k + l] += acc;
                            }
                        }
                    }
                    // db += aᵀ · g
                    {
                        let av = self.value(a).data();
                        let db = grad_slot(&mut grads, b, &[k, n]);
                        for l in 0..k {
                            for i in 0..m {
                                let x = av[i * k + l];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[l * n + j] += x * gv[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let (m, n) = (self.value(a).rows(), self.value(a).cols());
                    let gv = g.data();
                    let da = grad_slot(&mut grads, a, &[m, n]);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += gv[j * m + i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, g.data(), self.value(a).shape());
                    accumulate(&mut grads, b, g.data(), self.value(b).shape());
                }
                Op::AddRowBroadcast(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    let (s, d) = (self.value(x).rows(), self.value(x).cols());
                    accumulate(&mut grads, x, g.data(), self.value(x).shape());
                    let gv = g.data();
                    let db = grad_slot(&mut grads, bias, &[d]);
                    for r in 0..s {
                        for c in 0..d {
                            db[c] += gv[r * d + c];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let scaled: Vec<f64> = g.data().iter().map(|v| v * c).collect();
                    accumulate(&mut grads, a, &scaled, self.value(a).shape());
                }
                Op::MaskedSoftmax(a, mask) => {
                    let a = *a;
                    let mask = Rc::clone(mask);
                    let y = &self.nodes[idx].value;
                    let (r, c) = (y.rows(), y.cols());
                    let yv = y.data();
                    let gv = g.data();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let mrow = mask.row(i);
                        let mut dot = 0.0;
                        for j in 0..c {
                            if mrow[j] {
                                dot += gv[i * c + j] * yv[i * c + j];
                            }
                        }
                        for j in 0..c {
                            if mrow[j] {
                                dx[i * c + j] = yv[i * c + j] * (gv[i * c + j] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, a, &dx, self.value(a).shape());
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let (s, d) = (self.value(x).rows(), self.value(x).cols());
                    let xv = self.value(x).data().to_vec();
                    let gainv = self.value(gain).data().to_vec();
                    let gv = g.data();
                    let mut dx = vec![0.0; s * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..s {
                        let row = &xv[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let grow = &gv[r * d..(r + 1) * d];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..d {
                            dgain[c] += grow[c] * xhat[c];
                            dbias[c] += grow[c];
                            let dxh = grow[c] * gainv[c];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[c];
                        }
                        let df = d as f64;
                        for c in 0..d {
                            let dxh = grow[c] * gainv[c];
                            dx[r * d + c] =
                                inv * (dxh - sum_dxhat / df - xhat[c] * sum_dxhat_xhat / df);
                        }
                    }
                    accumulate(&mut grads, x, &dx, &[s, d]);
                    accumulate(&mut grads, gain, &dgain, &[d]);
                    accumulate(&mut grads, bias, &dbias, &[d]);
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let dx: Vec<f64> = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gg)| gg * gelu_bwd(x))
                        .collect();
                    accumulate(&mut grads, a, &dx, self.value(a).shape());
                }
                Op::EmbedGather { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let (n, d) = (self.value(table).rows(), self.value(table).cols());
                    let gv = g.data();
                    let dt = grad_slot(&mut grads, table, &[n, d]);
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += gv[i * d + c];
                        }
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let (s, d) = (self.value(x).rows(), self.value(x).cols());
                    let gv = g.data();
                    let dx = grad_slot(&mut grads, x, &[s, d]);
                    for r in 0..s {
                        for c in 0..len {
                            dx[r * d + start + c] += gv[r * len + c];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let gv = g.data();
                    let total = self.nodes[idx].value.cols();
                    let s = self.nodes[idx].value.rows();
                    let mut offset = 0usize;
                    for p in parts {
                        let w = self.value(p).cols();
                        let mut dp = vec![0.0; s * w];
                        for r in 0..s {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&gv[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, p, &dp, &[s, w]);
                        offset += w;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let x = *x;
                    let rows = rows.clone();
                    let (s, d) = (self.value(x).rows(), self.value(x).cols());
                    let gv = g.data();
                    let dx = grad_slot(&mut grads, x, &[s, d]);
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            dx[r * d + c] += gv[i * d + c];
                        }
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let (k, v) = (self.value(logits).rows(), self.value(logits).cols());
                    let lv = self.value(logits).data().to_vec();
                    let gs = g.scalar_value();
                    let dl = grad_slot(&mut grads, logits, &[k, v]);
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &lv[i * v..(i + 1) * v];
                        let probs = softmax_row(row);
                        for j in 0..v {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            dl[i * v + j] += gs * (probs[j] - indicator) / k as f64;
                        }
                    }
                }
                Op::Square(a) => {
                    let a = *a;
                    let dx: Vec<f64> = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gg)| 2.0 * x * gg)
                        .collect();
                    accumulate(&mut grads, a, &dx, self.value(a).shape());
                }
                Op::Sum(a) => {
                    let a = *a;
                    let gs = g.scalar_value();
                    let n = self.value(a).numel();
                    let dx = vec![gs; n];
                    accumulate(&mut grads, a, &dx, self.value(a).shape());
                }
            }
        }
        Ok(Grads { by_node: grads })
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut [f64] {
    if grads[v.0].is_none() {
        grads[v.0] = Some(Tensor::zeros(shape.to_vec()));
    }
    grads[v.0].as_mut().unwrap().data_mut()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: &[f64], shape: &[usize]) {
    let slot = grad_slot(grads, v, shape);
    for (s, d) in slot.iter_mut().zip(delta) {
        *s += d;
    }
}

/// Gradients indexed by the [`Var`] they belong to.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`; `None` when the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Negative log-likelihood of `target` under softmax of `row`.
pub(crate) fn nll_row(row: &[f64], target: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    z.ln() + m - row[target]
}
