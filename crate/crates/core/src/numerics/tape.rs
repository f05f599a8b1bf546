//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! Values are computed eagerly. Node records are appended only when the tape
//! is recording and at least one input requires a gradient, so constant
//! subgraphs and inference passes leave no backward state behind.

use std::cell::Cell;

use super::tensor::Tensor;
use crate::error::{shape_err, MiraError, Result};

thread_local! {
    static GRAD_RECORDS: Cell<u64> = const { Cell::new(0) };
}

/// Number of backward records created on this thread so far.
pub fn grad_records() -> u64 {
    GRAD_RECORDS.with(|c| c.get())
}

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives exposed as a single entry point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Relu,
    Tanh,
    Scale(f64),
    Add,
}

#[derive(Debug)]
enum Op {
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    AddRows(Var, Var),
    MulRows(Var, Var),
    SoftmaxRows(Var),
    SumNormRows {
        x: Var,
        denom: Vec<f64>,
        degenerate: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BatchedMatVec {
        x: Var,
        m: Var,
        out_dim: usize,
        in_dim: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanGroups {
        x: Var,
        group: usize,
    },
    Reshape(Var),
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape {
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    nodes: Vec<Option<Op>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            needs_grad: Vec::new(),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates values but never records backward nodes.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of backward records held by this tape.
    pub fn record_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_some()).count()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let flag = self.recording;
        self.push_raw(t, flag, None)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    fn push_raw(&mut self, t: Tensor, needs_grad: bool, op: Option<Op>) -> Var {
        if op.is_some() {
            GRAD_RECORDS.with(|c| c.set(c.get() + 1));
        }
        self.values.push(t);
        self.needs_grad.push(needs_grad);
        self.nodes.push(op);
        Var(self.values.len() - 1)
    }

    fn push(&mut self, t: Tensor, inputs: &[Var], op: impl FnOnce() -> Op) -> Var {
        let needs = self.recording && inputs.iter().any(|v| self.needs_grad[v.0]);
        let op = needs.then(op);
        self.push_raw(t, needs, op)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.values[v.0];
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.values[b.0].shape().len() != 2 {
            return shape_err(format!(
                "matmul {:?} x {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            ));
        }
        let out = matmul_raw(self.values[a.0].data(), self.values[b.0].data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, &[a, b], || Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return shape_err(format!(
                "matmul_nt {:?} x {:?}ᵀ",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            ));
        }
        let out = matmul_nt_raw(self.values[a.0].data(), self.values[b.0].data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, &[a, b], || {
            Op::MatMulNt(a, b)
        }))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return shape_err(format!("{what} {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, &[a, b], || Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, &[a, b], || Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, &[a, b], || Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.values[a.0].map(|x| c * x);
        self.push(t, &[a], || Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.values[a.0].map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(t, &[a], || Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.values[a.0].map(f64::tanh);
        self.push(t, &[a], || Op::Tanh(a))
    }

    pub fn elementwise(&mut self, f: Elementwise, x: Var, y: Option<Var>) -> Result<Var> {
        match (f, y) {
            (Elementwise::Relu, None) => Ok(self.relu(x)),
            (Elementwise::Tanh, None) => Ok(self.tanh(x)),
            (Elementwise::Scale(c), None) => Ok(self.scale(x, c)),
            (Elementwise::Add, Some(y)) => self.add(x, y),
            (f, _) => Err(MiraError::Input(format!("wrong arity for {f:?}"))),
        }
    }

    /// Adds `b` (`[p×n]` or `[n]`) to every block of `p` consecutive rows of `a`.
    pub fn add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (m, n) = (ta.rows(), ta.cols());
        let p = tb.rows();
        if tb.cols() != n || m % p != 0 {
            return shape_err(format!("add_rows {:?} + {:?}", ta.shape(), tb.shape()));
        }
        let mut out = ta.data().to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            let brow = tb.row(i % p);
            row.iter_mut().zip(brow).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, &[a, b], || Op::AddRows(a, b)))
    }

    /// Multiplies every row of `a` elementwise by the vector `g`.
    pub fn mul_rows(&mut self, a: Var, g: Var) -> Result<Var> {
        let (ta, tg) = (&self.values[a.0], &self.values[g.0]);
        let n = ta.cols();
        if tg.len() != n {
            return shape_err(format!("mul_rows {:?} * {:?}", ta.shape(), tg.shape()));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(tg.data()).for_each(|(x, y)| *x *= y);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, &[a, g], || Op::MulRows(a, g)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let n = ta.cols();
        let mut out = ta.data().to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push(t, &[a], || Op::SoftmaxRows(a))
    }

    /// Divides every row by its sum. Rows whose sum has magnitude below
    /// `eps` are replaced by uniform weights and pass no gradient; the
    /// returned mask flags them.
    pub fn sum_normalize_rows(&mut self, a: Var, eps: f64) -> (Var, Vec<bool>) {
        let ta = &self.values[a.0];
        let n = ta.cols();
        let mut out = ta.data().to_vec();
        let mut denom = Vec::with_capacity(ta.rows());
        let mut degenerate = Vec::with_capacity(ta.rows());
        for row in out.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            if !(s.abs() >= eps) {
                row.iter_mut().for_each(|x| *x = 1.0 / n as f64);
                degenerate.push(true);
            } else {
                row.iter_mut().for_each(|x| *x /= s);
                degenerate.push(false);
            }
            denom.push(s);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let mask = degenerate.clone();
        let v = self.push(t, &[a], || Op::SumNormRows {
            x: a,
            denom,
            degenerate,
        });
        (v, mask)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ta = &self.values[a.0];
        let n = ta.cols();
        let mut out = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(ta.rows());
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push(t, &[a], || Op::LayerNorm { x: a, inv_std })
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = &self.values[logits.0];
        let (b, c) = (tl.rows(), tl.cols());
        if labels.len() != b {
            return shape_err(format!("{} labels for {b} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(MiraError::Input(format!("label {bad} outside [0, {c})")));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let (arg, max) =
                row.iter()
                    .cloned()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |b, (i, x)| if x > b.1 { (i, x) } else { b },
                    );
            // log-sum-exp as max + ln(1 + rest), keeping tiny losses exact
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, x)| (x - max).exp())
                .sum();
            let lse = max + rest.ln_1p();
            loss += (max - row[y]) + rest.ln_1p();
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let t = Tensor::scalar(loss / b as f64);
        let labels = labels.to_vec();
        Ok(self.push(t, &[logits], || Op::CrossEntropy {
            logits,
            labels,
            probs,
        }))
    }

    /// `out[r] = M_{g(r)} · x[r]` where each row of `m` holds a row-major
    /// `[out_dim × in_dim]` matrix. With `G` rows in `m` and `R` rows in `x`,
    /// consecutive blocks of `R / G` rows of `x` share one matrix.
    pub fn batched_matvec(&mut self, x: Var, m: Var, out_dim: usize, in_dim: usize) -> Result<Var> {
        let (tx, tm) = (&self.values[x.0], &self.values[m.0]);
        let (r, g) = (tx.rows(), tm.rows());
        if tx.cols() != in_dim || tm.cols() != out_dim * in_dim || r % g != 0 {
            return shape_err(format!(
                "batched_matvec x {:?}, m {:?}, matrices {out_dim}x{in_dim}",
                tx.shape(),
                tm.shape()
            ));
        }
        let group = r / g;
        let mut out = vec![0.0; r * out_dim];
        for (i, orow) in out.chunks_mut(out_dim).enumerate() {
            let mat = tm.row(i / group);
            let xr = tx.row(i);
            for (o, val) in orow.iter_mut().enumerate() {
                *val = dot(&mat[o * in_dim..(o + 1) * in_dim], xr);
            }
        }
        let t = Tensor::new(vec![r, out_dim], out)?;
        Ok(self.push(t, &[x, m], || Op::BatchedMatVec {
            x,
            m,
            out_dim,
            in_dim,
        }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.values[x.0];
        let n = tx.cols();
        if len == 0 || start + len > n {
            return shape_err(format!("slice [{start}, {}) of {n} columns", start + len));
        }
        let data: Vec<f64> = tx
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new(vec![tx.rows(), len], data)?;
        Ok(self.push(t, &[x], || Op::SliceCols { x, start }))
    }

    /// Means over consecutive blocks of `group` rows.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = &self.values[x.0];
        let (r, n) = (tx.rows(), tx.cols());
        if group == 0 || r % group != 0 {
            return shape_err(format!("{r} rows not divisible into groups of {group}"));
        }
        let mut out = vec![0.0; (r / group) * n];
        for (i, row) in tx.data().chunks(n).enumerate() {
            let o = &mut out[(i / group) * n..(i / group + 1) * n];
            o.iter_mut()
                .zip(row)
                .for_each(|(a, b)| *a += b / group as f64);
        }
        let t = Tensor::new(vec![r / group, n], out)?;
        Ok(self.push(t, &[x], || Op::MeanGroups { x, group }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.values[x.0].clone().reshape(shape)?;
        Ok(self.push(t, &[x], || Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.values[x.0].sum());
        self.push(t, &[x], || Op::Sum(x))
    }

    /// Multi-head scaled dot-product attention over `[B·seq × d]` token rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let (r, d) = (tq.rows(), tq.cols());
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return shape_err("attention q/k/v shapes differ");
        }
        if seq == 0 || r % seq != 0 || heads == 0 || d % heads != 0 {
            return shape_err(format!(
                "attention rows {r}, seq {seq}, dim {d}, heads {heads}"
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = r / seq;
        let mut out = vec![0.0; r * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let qi = &tq.row(b * seq + i)[h * dh..(h + 1) * dh];
                    let prow = &mut p[i * seq..(i + 1) * seq];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        *pj = scale * dot(qi, &tk.row(b * seq + j)[h * dh..(h + 1) * dh]);
                    }
                    softmax_in_place(prow);
                    let orow =
                        &mut out[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &tv.row(b * seq + j)[h * dh..(h + 1) * dh];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += pj * x);
                    }
                }
            }
        }
        let t = Tensor::new(tq.shape().to_vec(), out)?;
        Ok(self.push(t, &[q, k, v], || Op::Attention {
            q,
            k,
            v,
            seq,
            heads,
            probs,
        }))
    }

    /// Backpropagates from the scalar `loss`, visiting records in reverse
    /// creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.values[loss.0].len() != 1 {
            return shape_err(format!(
                "backward needs a scalar, got {:?}",
                self.values[loss.0].shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(op) = &self.nodes[i] else { continue };
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(op, i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.needs_grad[v.0] {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g.reshape(self.values[v.0].shape().to_vec())?);
                Ok(())
            }
        }
    }

    fn backprop_node(
        &self,
        op: &Op,
        out: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let gd = g.data();
        let val = |v: Var| &self.values[v.0];
        match op {
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = val(*b).cols();
                if self.needs_grad[a.0] {
                    let da = matmul_nt_raw(gd, val(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?)?;
                }
                if self.needs_grad[b.0] {
                    let db = matmul_tn_raw(val(*a).data(), gd, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = val(*b).rows();
                if self.needs_grad[a.0] {
                    let da = matmul_raw(gd, val(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?)?;
                }
                if self.needs_grad[b.0] {
                    let db = matmul_tn_raw(gd, val(*a).data(), m, n, k);
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], db)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                if self.needs_grad[a.0] {
                    let d = zip_map(gd, val(*b).data(), |x, y| x * y);
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?)?;
                }
                if self.needs_grad[b.0] {
                    let d = zip_map(gd, val(*a).data(), |x, y| x * y);
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x))?,
            Op::Relu(a) => {
                let d = zip_map(gd, val(*a).data(), |x, y| if y > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?)?;
            }
            Op::Tanh(a) => {
                let y = self.values[out].data();
                let d = zip_map(gd, y, |x, t| x * (1.0 - t * t));
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?)?;
            }
            Op::AddRows(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs_grad[b.0] {
                    let tb = val(*b);
                    let (p, n) = (tb.rows(), tb.cols());
                    let mut db = vec![0.0; p * n];
                    for (i, row) in gd.chunks(n).enumerate() {
                        let o = &mut db[(i % p) * n..(i % p + 1) * n];
                        o.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?)?;
                }
            }
            Op::MulRows(a, gv) => {
                let (ta, tg) = (val(*a), val(*gv));
                let n = ta.cols();
                if self.needs_grad[a.0] {
                    let mut da = gd.to_vec();
                    for row in da.chunks_mut(n) {
                        row.iter_mut().zip(tg.data()).for_each(|(x, y)| *x *= y);
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?)?;
                }
                if self.needs_grad[gv.0] {
                    let mut dg = vec![0.0; n];
                    for (grow, arow) in gd.chunks(n).zip(ta.data().chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * arow[j];
                        }
                    }
                    self.accumulate(grads, *gv, Tensor::new(tg.shape().to_vec(), dg)?)?;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &self.values[out];
                let n = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n)) {
                    let s = dot(gr, yr);
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), dx)?)?;
            }
            Op::SumNormRows {
                x,
                denom,
                degenerate,
            } => {
                let y = &self.values[out];
                let n = y.cols();
                let mut dx = vec![0.0; y.len()];
                for (i, (dxr, (yr, gr))) in dx
                    .chunks_mut(n)
                    .zip(y.data().chunks(n).zip(gd.chunks(n)))
                    .enumerate()
                {
                    if degenerate[i] {
                        continue;
                    }
                    let s = dot(gr, yr);
                    for j in 0..n {
                        dxr[j] = (gr[j] - s) / denom[i];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?)?;
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &self.values[out];
                let n = y.cols();
                let mut dx = vec![0.0; y.len()];
                for (i, (dxr, (yr, gr))) in dx
                    .chunks_mut(n)
                    .zip(y.data().chunks(n).zip(gd.chunks(n)))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = dot(gr, yr) / n as f64;
                    for j in 0..n {
                        dxr[j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?)?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let tl = val(*logits);
                let (b, c) = (tl.rows(), tl.cols());
                let scale = gd[0] / b as f64;
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                self.accumulate(grads, *logits, Tensor::new(tl.shape().to_vec(), d)?)?;
            }
            Op::BatchedMatVec {
                x,
                m,
                out_dim,
                in_dim,
            } => {
                let (tx, tm) = (val(*x), val(*m));
                let (out_dim, in_dim) = (*out_dim, *in_dim);
                let group = tx.rows() / tm.rows();
                if self.needs_grad[x.0] {
                    let mut dx = vec![0.0; tx.len()];
                    for (i, (dxr, gr)) in dx.chunks_mut(in_dim).zip(gd.chunks(out_dim)).enumerate()
                    {
                        let mat = tm.row(i / group);
                        for (o, &go) in gr.iter().enumerate() {
                            let mrow = &mat[o * in_dim..(o + 1) * in_dim];
                            dxr.iter_mut().zip(mrow).for_each(|(a, b)| *a += go * b);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?)?;
                }
                if self.needs_grad[m.0] {
                    let mut dm = vec![0.0; tm.len()];
                    let w = out_dim * in_dim;
                    for (i, gr) in gd.chunks(out_dim).enumerate() {
                        let xr = tx.row(i);
                        let dmat = &mut dm[(i / group) * w..(i / group + 1) * w];
                        for (o, &go) in gr.iter().enumerate() {
                            let drow = &mut dmat[o * in_dim..(o + 1) * in_dim];
                            drow.iter_mut().zip(xr).for_each(|(a, b)| *a += go * b);
                        }
                    }
                    self.accumulate(grads, *m, Tensor::new(tm.shape().to_vec(), dm)?)?;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = val(*x);
                let n = tx.cols();
                let len = g.cols();
                let mut dx = vec![0.0; tx.len()];
                for (dxr, gr) in dx.chunks_mut(n).zip(gd.chunks(len)) {
                    dxr[*start..start + len].copy_from_slice(gr);
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?)?;
            }
            Op::MeanGroups { x, group } => {
                let tx = val(*x);
                let n = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                for (i, dxr) in dx.chunks_mut(n).enumerate() {
                    let gr = &gd[(i / group) * n..(i / group + 1) * n];
                    dxr.iter_mut()
                        .zip(gr)
                        .for_each(|(a, b)| *a = b / *group as f64);
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?)?;
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(val(*x).shape().to_vec())?;
                self.accumulate(grads, *x, t)?;
            }
            Op::Sum(x) => {
                let t = Tensor::full(val(*x).shape(), gd[0]);
                self.accumulate(grads, *x, t)?;
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (seq, heads) = (*seq, *heads);
                let (r, d) = (tq.rows(), tq.cols());
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; r * d];
                let mut dk = vec![0.0; r * d];
                let mut dv = vec![0.0; r * d];
                let mut dp = vec![0.0; seq];
                for b in 0..r / seq {
                    for h in 0..heads {
                        let p =
                            &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..seq {
                            let go = &gd[(b * seq + i) * d..(b * seq + i + 1) * d][cols.clone()];
                            let prow = &p[i * seq..(i + 1) * seq];
                            for j in 0..seq {
                                let vj = &tv.row(b * seq + j)[cols.clone()];
                                dp[j] = dot(go, vj);
                                let dvj =
                                    &mut dv[(b * seq + j) * d..(b * seq + j + 1) * d][cols.clone()];
                                dvj.iter_mut().zip(go).for_each(|(a, x)| *a += prow[j] * x);
                            }
                            let s = dot(&dp, prow);
                            let qi = &tq.row(b * seq + i)[cols.clone()];
                            for j in 0..seq {
                                let ds = prow[j] * (dp[j] - s) * scale;
                                let kj = &tk.row(b * seq + j)[cols.clone()];
                                let dqi =
                                    &mut dq[(b * seq + i) * d..(b * seq + i + 1) * d][cols.clone()];
                                dqi.iter_mut().zip(kj).for_each(|(a, x)| *a += ds * x);
                                let dkj =
                                    &mut dk[(b * seq + j) * d..(b * seq + j + 1) * d][cols.clone()];
                                dkj.iter_mut().zip(qi).for_each(|(a, x)| *a += ds * x);
                            }
                        }
                    }
                }
                let shape = tq.shape().to_vec();
                self.accumulate(grads, *q, Tensor::new(shape.clone(), dq)?)?;
                self.accumulate(grads, *k, Tensor::new(shape.clone(), dk)?)?;
                self.accumulate(grads, *v, Tensor::new(shape, dv)?)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

/// `[m×k]·[k×n]`
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, x)| *o += aip * x);
        }
    }
    out
}

/// `[m×k]·[n×k]ᵀ`
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `[m×k]ᵀ·[m×n]`
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, x)| *o += aip * x);
        }
    }
    out
}
