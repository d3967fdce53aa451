//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation evaluates eagerly, appends a node holding its value and
//! the information its backward rule needs, and returns a [`Var`] handle.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients.
//! A tape built with [`Tape::inference`] records values only.

use crate::error::{Error, Result};
use crate::fusion::entropy_of_rows;
use crate::tensor::Tensor;

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
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleBy(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    Entropy(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    PoolRows { x: Var, group: usize },
    SumAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: Option<usize>, probs: Tensor, count: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the
    /// seeded output (or does not require gradients).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, with zeros when nothing flowed into it.
    pub fn wrt_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// Sums the gradients of every bound copy of each parameter. Parameters
    /// that were never bound or received no gradient are zero.
    pub fn param_grads(&self, shapes: &[&[usize]]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[pid].add_assign(g);
            }
        }
        out
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// A tape that records everything needed for [`Tape::backward`].
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), record: true }
    }

    /// A value-only tape; `backward` on it is a state error.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Vars past that
    /// point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients flow into (an input under test, say).
    pub fn var(&mut self, value: Tensor) -> Var {
        let requires_grad = self.record;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf tagged with a parameter index, for [`Gradients::param_grads`].
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        let v = self.var(value);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x + bias` with a `[1×n]` bias broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.shape() != [1, n] {
            return Err(Error::shape("add_row", format!("bias {:?} for {:?}", bv.shape(), xv.shape())));
        }
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x · s` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", format!("scale must be 1x1, got {:?}", self.value(s).shape())));
        }
        let k = self.value(s).item();
        let value = self.value(x).scale(k);
        Ok(self.push(value, Op::ScaleBy(x, s), &[x, s]))
    }

    /// `alpha · x + beta` with constant coefficients.
    pub fn affine(&mut self, x: Var, alpha: f64, beta: f64) -> Var {
        let value = self.value(x).map(|v| alpha * v + beta);
        self.push(value, Op::Affine(x, alpha), &[x])
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        self.affine(x, alpha, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, false)
    }

    pub fn softmax_rows_masked(&mut self, x: Var, causal: bool) -> Result<Var> {
        let value = self.value(x).softmax_rows_masked(causal)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Normalized attention entropy of a row-stochastic matrix, as a `[1×1]`
    /// node. See [`crate::fusion::attention_entropy`] for the definition.
    /// With `detach`, the result is a constant on the tape.
    pub fn entropy(&mut self, p: Var, detach: bool) -> Var {
        let value = Tensor::scalar(entropy_of_rows(self.value(p)));
        if detach {
            self.constant(value)
        } else {
            self.push(value, Op::Entropy(p), &[p])
        }
    }

    /// Row-wise layer normalization with learned scale and shift (`[1×n]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        for g in [gamma, beta] {
            if self.value(g).shape() != [1, n] {
                return Err(Error::shape("layer_norm", format!("affine {:?} for width {n}", self.value(g).shape())));
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        let mut rstds = Vec::with_capacity(xv.rows());
        for (xr, (hr, or)) in xv.data().chunks(n).zip(xhat.data_mut().chunks_mut(n).zip(out.data_mut().chunks_mut(n))) {
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                hr[j] = (xr[j] - mean) * rstd;
                or[j] = gv[j] * hr[j] + bv[j];
            }
            rstds.push(rstd);
        }
        let op = Op::LayerNorm { x, gamma, beta, xhat, rstd: rstds };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid(format!("token id {id} out of range for vocabulary {v}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&values)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", format!("columns {start}..{} of {n}", start + len)));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Means over consecutive groups of `group` rows.
    pub fn pool_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if group == 0 || m % group != 0 {
            return Err(Error::shape("pool_rows", format!("{m} rows in groups of {group}")));
        }
        let mut data = vec![0.0; (m / group) * n];
        for r in 0..m {
            let o = &mut data[(r / group) * n..(r / group + 1) * n];
            for (o, v) in o.iter_mut().zip(xv.row(r)) {
                *o += v / group as f64;
            }
        }
        let value = Tensor::matrix(m / group, n, data)?;
        Ok(self.push(value, Op::PoolRows { x, group }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean token negative log-likelihood. Positions whose target equals
    /// `ignore` are excluded; if nothing remains the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let (l, v) = (lv.rows(), lv.cols());
        if targets.len() != l {
            return Err(Error::shape("cross_entropy", format!("{l} logit rows for {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v && Some(t) != ignore) {
            return Err(Error::invalid(format!("target id {bad} out of range for vocabulary {v}")));
        }
        let probs = lv.softmax_rows()?;
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, probs, count };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Backpropagates `seed` (shaped like `out`) through everything recorded
    /// before `out`.
    pub fn backward(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        if !self.record {
            return Err(Error::State("backward on an inference tape".into()));
        }
        if out.0 >= self.nodes.len() {
            return Err(Error::State("backward before forward: output not on this tape".into()));
        }
        if !seed.same_shape(&self.nodes[out.0].value) {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.nodes[out.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed.clone());
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self.nodes.iter().enumerate().filter_map(|(i, n)| n.param.map(|p| (i, p))).collect();
        Ok(Gradients { grads, params })
    }

    /// Scalar-output convenience: seeds with 1.
    pub fn backward_scalar(&self, out: Var) -> Result<Gradients> {
        let seed = match self.nodes.get(out.0) {
            Some(n) => Tensor::full(n.value.shape(), 1.0),
            None => return Err(Error::State("backward before forward: output not on this tape".into())),
        };
        self.backward(out, &seed)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(val(*b))?;
                let gb = val(*a).transpose()?.matmul(g)?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: ga = g b, gb = gᵀ a
                let ga = g.matmul(val(*b))?;
                let gb = g.transpose()?.matmul(val(*a))?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.hadamard(val(*b))?;
                let gb = g.hadamard(val(*a))?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(x, b) => {
                let n = g.cols();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *b, Tensor::matrix(1, n, gb)?);
            }
            Op::ScaleBy(x, s) => {
                let k = val(*s).item();
                let gs = g.hadamard(val(*x))?.sum();
                self.accumulate(grads, *x, g.scale(k));
                self.accumulate(grads, *s, Tensor::new(val(*s).shape(), vec![gs])?);
            }
            Op::Affine(x, alpha) => self.accumulate(grads, *x, g.scale(*alpha)),
            Op::Sigmoid(x) => {
                let gx = g.zip_map(y, "sigmoid'", |g, s| g * s * (1.0 - s))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(val(*x), "gelu'", |g, x| g * gelu_grad(x))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let n = y.cols();
                let mut gx = y.clone();
                for (gr, (yr, ogr)) in g.data().chunks(n).zip(y.data().chunks(n).zip(gx.data_mut().chunks_mut(n))) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ogr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Entropy(p) => {
                let pv = val(*p);
                let (m, n) = (pv.rows(), pv.cols());
                let gx = if n < 2 {
                    Tensor::zeros(pv.shape())
                } else {
                    // The [0,1] clamp only absorbs rounding error, so the
                    // gradient of the unclamped expression is used.
                    let coef = -g.item() / (m as f64 * (n as f64).ln());
                    pv.map(|q| if q > 0.0 { coef * (q.ln() + 1.0) } else { 0.0 })
                };
                self.accumulate(grads, *p, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = g.cols();
                let gam = val(*gamma).data();
                let mut gx = Tensor::zeros(g.shape());
                let mut gg = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                for (r, ((gr, hr), ox)) in
                    g.data().chunks(n).zip(xhat.data().chunks(n)).zip(gx.data_mut().chunks_mut(n)).enumerate()
                {
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let d = gr[j] * gam[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        ox[j] = rstd[r] * (gr[j] * gam[j] - mean_d - hr[j] * mean_dh);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, Tensor::matrix(1, n, gg)?);
                self.accumulate(grads, *beta, Tensor::matrix(1, n, gbeta)?);
            }
            Op::Embedding { table, ids } => {
                let t = val(*table);
                let d = t.cols();
                let mut gt = Tensor::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    let slice = g.data()[offset * n..(offset + rows) * n].to_vec();
                    self.accumulate(grads, p, Tensor::matrix(rows, n, slice)?);
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.row(r)[start..start + w]);
                    }
                    self.accumulate(grads, p, Tensor::matrix(rows, w, data)?);
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let w = g.cols();
                let mut gx = Tensor::zeros(xv.shape());
                let n = xv.cols();
                for r in 0..g.rows() {
                    gx.data_mut()[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::PoolRows { x, group } => {
                let xv = val(*x);
                let n = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    for (o, v) in gx.data_mut()[r * n..(r + 1) * n].iter_mut().zip(g.row(r / group)) {
                        *o = v / *group as f64;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let gx = Tensor::full(val(*x).shape(), g.item());
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                let mut gx = Tensor::zeros(probs.shape());
                if *count > 0 {
                    let v = probs.cols();
                    let k = g.item() / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let row = &mut gx.data_mut()[r * v..(r + 1) * v];
                        for (o, p) in row.iter_mut().zip(probs.row(r)) {
                            *o = k * p;
                        }
                        row[t] -= k;
                    }
                }
                self.accumulate(grads, *logits, gx);
            }
        }
        Ok(())
    }
}
