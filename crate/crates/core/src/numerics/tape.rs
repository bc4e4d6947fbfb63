//! Reverse-mode differentiation over a recorded trace of tensor operations.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Recurrent layers are
//! recorded as single fused nodes (whole-sequence LSTM, single LSTM step) with
//! hand-written backpropagation through time, which keeps the trace short.

use std::collections::HashMap;

use super::{Gradients, ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics observed by a train-mode batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub layer: String,
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var: Vec<f64>,
}

struct LstmSeqCache {
    /// Activated gates per processed step, `[i, f, g, o]` each of width H.
    gates: Vec<f64>,
    cell: Vec<f64>,
    tanh_cell: Vec<f64>,
}

struct LstmStepCache {
    gates: Vec<f64>,
    tanh_cell: Vec<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    Transpose(Var),
    Sum(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ColumnAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LstmSeq {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        reverse: bool,
        cache: LstmSeqCache,
    },
    LstmCell {
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        cache: LstmStepCache,
    },
    Sse {
        a: Var,
        target: Vec<f64>,
        mask: Vec<f64>,
    },
    BceLogits {
        a: Var,
        target: Vec<f64>,
        mask: Vec<f64>,
        pos_weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    batch_stats: Vec<BatchStats>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[o] += Σ_i w[o×i] x[i]`
fn matvec_acc(out: &mut [f64], w: &[f64], x: &[f64]) {
    let i_dim = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &w[o * i_dim..(o + 1) * i_dim];
        *slot += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out[i] += Σ_o w[o×i] y[o]`
fn matvec_t_acc(out: &mut [f64], w: &[f64], y: &[f64]) {
    let i_dim = out.len();
    for (o, &yv) in y.iter().enumerate() {
        if yv == 0.0 {
            continue;
        }
        let row = &w[o * i_dim..(o + 1) * i_dim];
        for (slot, wv) in out.iter_mut().zip(row) {
            *slot += yv * wv;
        }
    }
}

/// `g[o×i] += y[o] ⊗ x[i]`
fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    let i_dim = x.len();
    for (o, &yv) in y.iter().enumerate() {
        if yv == 0.0 {
            continue;
        }
        let row = &mut g[o * i_dim..(o + 1) * i_dim];
        for (slot, xv) in row.iter_mut().zip(x) {
            *slot += yv * xv;
        }
    }
}

/// One LSTM step on raw slices. Writes activated gates `[i, f, g, o]` into
/// `gates` and returns nothing; `h_out`/`c_out` receive the new state.
#[allow(clippy::too_many_arguments)]
fn lstm_step_raw(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    b: &[f64],
    gates: &mut [f64],
    h_out: &mut [f64],
    c_out: &mut [f64],
    tanh_c: &mut [f64],
) {
    let h = h_prev.len();
    gates.copy_from_slice(b);
    matvec_acc(gates, w_ih, x);
    matvec_acc(gates, w_hh, h_prev);
    for j in 0..h {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[h + j]);
        let g = gates[2 * h + j].tanh();
        let o = sigmoid(gates[3 * h + j]);
        gates[j] = i;
        gates[h + j] = f;
        gates[2 * h + j] = g;
        gates[3 * h + j] = o;
        let c = f * c_prev[j] + i * g;
        c_out[j] = c;
        tanh_c[j] = c.tanh();
        h_out[j] = o * tanh_c[j];
    }
}

/// Backward through one LSTM step given adjoints of the new hidden and cell
/// state. Returns the pre-activation gate adjoints in `dz` and the adjoint of
/// the previous cell state in `dc_prev`.
fn lstm_step_backward(
    gates: &[f64],
    tanh_c: &[f64],
    c_prev: &[f64],
    dh: &[f64],
    dc: &[f64],
    dz: &mut [f64],
    dc_prev: &mut [f64],
) {
    let h = dh.len();
    for j in 0..h {
        let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
        let tc = tanh_c[j];
        let d_o = dh[j] * tc;
        let dcell = dc[j] + dh[j] * o * (1.0 - tc * tc);
        dz[j] = dcell * g * i * (1.0 - i);
        dz[h + j] = dcell * c_prev[j] * f * (1.0 - f);
        dz[2 * h + j] = dcell * i * (1.0 - g * g);
        dz[3 * h + j] = d_o * o * (1.0 - o);
        dc_prev[j] = dcell * f;
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.bound.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    pub fn record_batch_stats(&mut self, stats: BatchStats) {
        self.batch_stats.push(stats);
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats> {
        std::mem::take(&mut self.batch_stats)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `x · wᵀ + b` with `x: m×i`, `w: o×i`, `b: o`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, i) = self.dims(x);
        let (o, i2) = self.dims(w);
        if i != i2 {
            return Err(Error::dim(format!(
                "linear: input width {i} but weights are {o}x{i2}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(Error::dim(format!(
                    "linear: bias has {} entries, expected {o}",
                    self.value(b).len()
                )));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; m * o];
        for r in 0..m {
            let orow = &mut out[r * o..(r + 1) * o];
            if let Some(b) = b {
                orow.copy_from_slice(self.value(b).data());
            }
            matvec_acc(orow, wv, &xv[r * i..(r + 1) * i]);
        }
        Ok(self.push(Tensor::matrix(m, o, out)?, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(Error::dim(format!(
                "add_row: row of {} onto {m}x{n}",
                self.value(row).len()
            )));
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            add_into(v.row_mut(i), &r);
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::dim("mul_const: length mismatch"));
        }
        let av = self.value(a);
        let data = av.data().iter().zip(&c).map(|(x, y)| x * y).collect();
        let v = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulConst(a, c)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Softmax over all elements of `a`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = softmax_tensor(self.value(a))?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|p| self.dims(*p).0)
            .ok_or_else(|| Error::dim("concat_cols: nothing to concatenate"))?;
        let widths: Vec<usize> = parts.iter().map(|p| self.dims(*p).1).collect();
        if parts.iter().any(|p| self.dims(*p).0 != m) {
            return Err(Error::dim("concat_cols: row counts differ"));
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|p| self.dims(*p).1)
            .ok_or_else(|| Error::dim("concat_rows: nothing to concatenate"))?;
        if parts.iter().any(|p| self.dims(*p).1 != n) {
            return Err(Error::dim("concat_rows: column counts differ"));
        }
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
            m += self.dims(*p).0;
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + width > n {
            return Err(Error::dim(format!(
                "slice_cols {start}..{} of {n}",
                start + width
            )));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&av.row(r)[start..start + width]);
        }
        Ok(self.push(Tensor::matrix(m, width, out)?, Op::SliceCols { a, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + count > m {
            return Err(Error::dim(format!(
                "slice_rows {start}..{} of {m}",
                start + count
            )));
        }
        let data = self.value(a).data()[start * n..(start + count) * n].to_vec();
        Ok(self.push(Tensor::matrix(count, n, data)?, Op::SliceRows { a, start }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::row_vector(vec![s]), Op::Sum(a))
    }

    /// Stride-1 convolution along rows with zero "same" padding.
    ///
    /// `x: T×C_in`, `w: C_out×K×C_in` (K odd), `b: C_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let wt = self.value(w);
        if wt.shape().len() != 3 {
            return Err(Error::dim(format!(
                "conv1d kernel must be C_out×K×C_in, got {:?}",
                wt.shape()
            )));
        }
        let (c_out, k, c_in) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::config(format!(
                "conv1d kernel size {k} is even; same padding needs an odd size"
            )));
        }
        let (t_len, cx) = self.dims(x);
        if cx != c_in {
            return Err(Error::dim(format!(
                "conv1d input has {cx} channels, kernel expects {c_in}"
            )));
        }
        let out = conv1d_raw(
            self.value(x).data(),
            wt.data(),
            b.map(|b| self.value(b).data()),
            t_len,
            c_in,
            c_out,
            k,
        );
        Ok(self.push(Tensor::matrix(t_len, c_out, out)?, Op::Conv1d { x, w, b }))
    }

    /// Batch normalization with statistics over the rows of `x` (train mode).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layer: &str,
    ) -> Result<Var> {
        let (t, c) = self.dims(x);
        if t < 2 {
            return Err(Error::dim(format!(
                "batch norm in train mode needs at least 2 frames, got {t}"
            )));
        }
        self.check_channel_params(gamma, beta, c)?;
        let xv = self.value(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in xv.iter_rows() {
            add_into(&mut mean, r);
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        for r in xv.iter_rows() {
            for j in 0..c {
                let d = r[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= t as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = xv.data().to_vec();
        for r in xhat.chunks_mut(c) {
            for j in 0..c {
                r[j] = (r[j] - mean[j]) * inv_std[j];
            }
        }
        let out = scale_shift(&xhat, self.value(gamma).data(), self.value(beta).data());
        let unbiased = var.iter().map(|v| v * t as f64 / (t - 1) as f64).collect();
        self.record_batch_stats(BatchStats {
            layer: layer.to_string(),
            mean,
            var: unbiased,
        });
        Ok(self.push(
            Tensor::matrix(t, c, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Batch normalization with fixed (running) statistics (inference mode).
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let (t, c) = self.dims(x);
        self.check_channel_params(gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch norm running statistics width"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = self.value(x).data().to_vec();
        for r in xhat.chunks_mut(c) {
            for j in 0..c {
                r[j] = (r[j] - mean[j]) * inv_std[j];
            }
        }
        let out = scale_shift(&xhat, self.value(gamma).data(), self.value(beta).data());
        Ok(self.push(
            Tensor::matrix(t, c, out)?,
            Op::ColumnAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn check_channel_params(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim(format!(
                "batch norm scale/shift must have {c} entries"
            )));
        }
        Ok(())
    }

    /// Runs a unidirectional LSTM over all rows of `x` (`T×I`), returning `T×H`.
    /// With `reverse`, the sequence is processed from the last row to the first
    /// and each output row stays at its input position.
    pub fn lstm_sequence(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        reverse: bool,
    ) -> Result<Var> {
        let (t_len, i_dim) = self.dims(x);
        if t_len == 0 {
            return Err(Error::dim("lstm over an empty sequence"));
        }
        let h = self.lstm_hidden(w_ih, w_hh, b, i_dim)?;
        let xv = self.value(x).data();
        let (wi, wh, bv) = (
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b).data(),
        );
        let mut gates = vec![0.0; t_len * 4 * h];
        let mut cell = vec![0.0; t_len * h];
        let mut tanh_cell = vec![0.0; t_len * h];
        let mut out = vec![0.0; t_len * h];
        let zeros = vec![0.0; h];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        let mut prev: Option<usize> = None;
        for &t in &order {
            let (h_prev, c_prev) = match prev {
                Some(p) => (out[p * h..(p + 1) * h].to_vec(), cell[p * h..(p + 1) * h].to_vec()),
                None => (zeros.clone(), zeros.clone()),
            };
            let mut h_new = vec![0.0; h];
            let mut c_new = vec![0.0; h];
            let mut tc = vec![0.0; h];
            lstm_step_raw(
                &xv[t * i_dim..(t + 1) * i_dim],
                &h_prev,
                &c_prev,
                wi,
                wh,
                bv,
                &mut gates[t * 4 * h..(t + 1) * 4 * h],
                &mut h_new,
                &mut c_new,
                &mut tc,
            );
            out[t * h..(t + 1) * h].copy_from_slice(&h_new);
            cell[t * h..(t + 1) * h].copy_from_slice(&c_new);
            tanh_cell[t * h..(t + 1) * h].copy_from_slice(&tc);
            prev = Some(t);
        }
        Ok(self.push(
            Tensor::matrix(t_len, h, out)?,
            Op::LstmSeq {
                x,
                w_ih,
                w_hh,
                b,
                reverse,
                cache: LstmSeqCache {
                    gates,
                    cell,
                    tanh_cell,
                },
            },
        ))
    }

    /// One LSTM step; returns a `1 × 2H` node holding `[h_new, c_new]`.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
    ) -> Result<Var> {
        let i_dim = self.value(x).len();
        let hd = self.lstm_hidden(w_ih, w_hh, b, i_dim)?;
        if self.value(h).len() != hd || self.value(c).len() != hd {
            return Err(Error::dim(format!("lstm state must have width {hd}")));
        }
        let mut gates = vec![0.0; 4 * hd];
        let mut h_new = vec![0.0; hd];
        let mut c_new = vec![0.0; hd];
        let mut tc = vec![0.0; hd];
        lstm_step_raw(
            self.value(x).data(),
            self.value(h).data(),
            self.value(c).data(),
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b).data(),
            &mut gates,
            &mut h_new,
            &mut c_new,
            &mut tc,
        );
        h_new.extend_from_slice(&c_new);
        Ok(self.push(
            Tensor::row_vector(h_new),
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
                cache: LstmStepCache {
                    gates,
                    tanh_cell: tc,
                },
            },
        ))
    }

    fn lstm_hidden(&self, w_ih: Var, w_hh: Var, b: Var, i_dim: usize) -> Result<usize> {
        let (g, wi_cols) = self.dims(w_ih);
        if g % 4 != 0 {
            return Err(Error::dim("lstm gate rows must be a multiple of 4"));
        }
        let h = g / 4;
        if wi_cols != i_dim {
            return Err(Error::dim(format!(
                "lstm input width {i_dim}, weights expect {wi_cols}"
            )));
        }
        if self.dims(w_hh) != (4 * h, h) || self.value(b).len() != 4 * h {
            return Err(Error::dim(format!(
                "lstm recurrent weights must be {}x{h} with bias {}",
                4 * h,
                4 * h
            )));
        }
        Ok(h)
    }

    /// Σ mask·(a − target)² as a `1 × 1` node.
    pub fn sse(&mut self, a: Var, target: Vec<f64>, mask: Vec<f64>) -> Result<Var> {
        let av = self.value(a).data();
        if target.len() != av.len() || mask.len() != av.len() {
            return Err(Error::dim("sse: target/mask length mismatch"));
        }
        let s = av
            .iter()
            .zip(&target)
            .zip(&mask)
            .map(|((x, t), m)| m * (x - t) * (x - t))
            .sum();
        Ok(self.push(Tensor::row_vector(vec![s]), Op::Sse { a, target, mask }))
    }

    /// Masked, positively weighted binary cross-entropy summed over elements,
    /// taking logits as input.
    pub fn bce_logits(
        &mut self,
        a: Var,
        target: Vec<f64>,
        mask: Vec<f64>,
        pos_weight: f64,
    ) -> Result<Var> {
        let av = self.value(a).data();
        if target.len() != av.len() || mask.len() != av.len() {
            return Err(Error::dim("bce: target/mask length mismatch"));
        }
        let s = av
            .iter()
            .zip(&target)
            .zip(&mask)
            .map(|((z, y), m)| m * (pos_weight * y * softplus(-z) + (1.0 - y) * softplus(*z)))
            .sum();
        Ok(self.push(
            Tensor::row_vector(vec![s]),
            Op::BceLogits {
                a,
                target,
                mask,
                pos_weight,
            },
        ))
    }

    /// Backpropagates from scalar outputs, each seeded with the given adjoint.
    pub fn backward(&self, seeds: &[(Var, f64)], num_params: usize) -> Gradients {
        let seeds: Vec<(Var, Vec<f64>)> = seeds
            .iter()
            .map(|(v, s)| (*v, vec![*s; self.value(*v).len()]))
            .collect();
        self.backward_seeded(&seeds, num_params)
    }

    /// Backpropagates from arbitrary nodes with full adjoint tensors.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)], num_params: usize) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, s) in seeds {
            acc(&mut grads, *v, s, self.value(*v).len());
            top = top.max(v.0 + 1);
        }
        let mut out = Gradients::empty(num_params);
        for idx in (0..top).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        out
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let len = |v: Var| self.value(v).len();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match out.get_mut(*id) {
                Some(existing) => add_into(existing, g),
                None => out.set(*id, g.to_vec()),
            },
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = G Bᵀ, dB = Aᵀ G
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        da[i * k + p] = (0..n).map(|j| g[i * n + j] * bv[p * n + j]).sum();
                    }
                }
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av_ip = av[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += av_ip * g[i * n + j];
                        }
                    }
                }
                acc(grads, *a, &da, m * k);
                acc(grads, *b, &db, k * n);
            }
            Op::Linear { x, w, b } => {
                let (m, i) = self.dims(*x);
                let o = self.dims(*w).0;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = vec![0.0; m * i];
                let mut dw = vec![0.0; o * i];
                let mut db = vec![0.0; o];
                for r in 0..m {
                    let gr = &g[r * o..(r + 1) * o];
                    matvec_t_acc(&mut dx[r * i..(r + 1) * i], wv, gr);
                    outer_acc(&mut dw, gr, &xv[r * i..(r + 1) * i]);
                    add_into(&mut db, gr);
                }
                acc(grads, *x, &dx, m * i);
                acc(grads, *w, &dw, o * i);
                if let Some(b) = b {
                    acc(grads, *b, &db, o);
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g, g.len());
                acc(grads, *b, g, g.len());
            }
            Op::AddRow(a, r) => {
                let n = len(*r);
                let mut dr = vec![0.0; n];
                for row in g.chunks(n) {
                    add_into(&mut dr, row);
                }
                acc(grads, *a, g, g.len());
                acc(grads, *r, &dr, n);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g, g.len());
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(grads, *b, &neg, g.len());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                acc(grads, *a, &da, g.len());
                acc(grads, *b, &db, g.len());
            }
            Op::MulConst(a, c) => {
                let da: Vec<f64> = g.iter().zip(c).map(|(x, y)| x * y).collect();
                acc(grads, *a, &da, g.len());
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.iter().map(|x| x * s).collect();
                acc(grads, *a, &da, g.len());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(grads, *a, &da, g.len());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(grads, *a, &da, g.len());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, *a, &da, g.len());
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| y * (g - dot)).collect();
                acc(grads, *a, &da, g.len());
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.dims(*p).1;
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g[r * n + offset..r * n + offset + w]);
                    }
                    acc(grads, *p, &dp, m * w);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let l = len(*p);
                    acc(grads, *p, &g[offset..offset + l], l);
                    offset += l;
                }
            }
            Op::SliceCols { a, start } => {
                let (m, n) = self.dims(*a);
                let w = node.value.cols();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    da[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(grads, *a, &da, m * n);
            }
            Op::SliceRows { a, start } => {
                let (m, n) = self.dims(*a);
                let mut da = vec![0.0; m * n];
                da[start * n..start * n + g.len()].copy_from_slice(g);
                acc(grads, *a, &da, m * n);
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                // node value is n×m; g is laid out n×m
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                acc(grads, *a, &da, m * n);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; len(*a)];
                acc(grads, *a, &da, da.len());
            }
            Op::Conv1d { x, w, b } => {
                let wt = self.value(*w);
                let (c_out, k, c_in) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
                let t_len = self.dims(*x).0;
                let xv = self.value(*x).data();
                let wv = wt.data();
                let pad = k / 2;
                let mut dx = vec![0.0; t_len * c_in];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; c_out];
                for t in 0..t_len {
                    for o in 0..c_out {
                        let gy = g[t * c_out + o];
                        if gy == 0.0 {
                            continue;
                        }
                        db[o] += gy;
                        for kk in 0..k {
                            let src = t as isize + kk as isize - pad as isize;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let src = src as usize;
                            let wrow = &wv[(o * k + kk) * c_in..(o * k + kk + 1) * c_in];
                            let dwrow = &mut dw[(o * k + kk) * c_in..(o * k + kk + 1) * c_in];
                            let xrow = &xv[src * c_in..(src + 1) * c_in];
                            let dxrow = &mut dx[src * c_in..(src + 1) * c_in];
                            for c in 0..c_in {
                                dxrow[c] += gy * wrow[c];
                                dwrow[c] += gy * xrow[c];
                            }
                        }
                    }
                }
                acc(grads, *x, &dx, dx.len());
                acc(grads, *w, &dw, dw.len());
                if let Some(b) = b {
                    acc(grads, *b, &db, c_out);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (t, c) = self.dims(*x);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for r in 0..t {
                    for j in 0..c {
                        let gy = g[r * c + j];
                        let xh = xhat[r * c + j];
                        dgamma[j] += gy * xh;
                        dbeta[j] += gy;
                        let dxh = gy * gm[j];
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xh;
                    }
                }
                let tf = t as f64;
                let mut dx = vec![0.0; t * c];
                for r in 0..t {
                    for j in 0..c {
                        let dxh = g[r * c + j] * gm[j];
                        dx[r * c + j] = inv_std[j] / tf
                            * (tf * dxh - sum_dxhat[j] - xhat[r * c + j] * sum_dxhat_xhat[j]);
                    }
                }
                acc(grads, *x, &dx, t * c);
                acc(grads, *gamma, &dgamma, c);
                acc(grads, *beta, &dbeta, c);
            }
            Op::ColumnAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (t, c) = self.dims(*x);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; t * c];
                for r in 0..t {
                    for j in 0..c {
                        let gy = g[r * c + j];
                        dgamma[j] += gy * xhat[r * c + j];
                        dbeta[j] += gy;
                        dx[r * c + j] = gy * gm[j] * inv_std[j];
                    }
                }
                acc(grads, *x, &dx, t * c);
                acc(grads, *gamma, &dgamma, c);
                acc(grads, *beta, &dbeta, c);
            }
            Op::LstmSeq {
                x,
                w_ih,
                w_hh,
                b,
                reverse,
                cache,
            } => {
                let (t_len, i_dim) = self.dims(*x);
                let h = node.value.cols();
                let xv = self.value(*x).data();
                let wi = self.value(*w_ih).data();
                let wh = self.value(*w_hh).data();
                let hv = node.value.data();
                let mut dx = vec![0.0; t_len * i_dim];
                let mut dwi = vec![0.0; wi.len()];
                let mut dwh = vec![0.0; wh.len()];
                let mut db = vec![0.0; 4 * h];
                let order: Vec<usize> = if *reverse {
                    (0..t_len).rev().collect()
                } else {
                    (0..t_len).collect()
                };
                let zeros = vec![0.0; h];
                let mut dh_next = vec![0.0; h];
                let mut dc_next = vec![0.0; h];
                let mut dz = vec![0.0; 4 * h];
                let mut dc_prev = vec![0.0; h];
                for step in (0..t_len).rev() {
                    let t = order[step];
                    let prev = if step > 0 { Some(order[step - 1]) } else { None };
                    let (h_prev, c_prev) = match prev {
                        Some(p) => (&hv[p * h..(p + 1) * h], &cache.cell[p * h..(p + 1) * h]),
                        None => (&zeros[..], &zeros[..]),
                    };
                    let mut dh = g[t * h..(t + 1) * h].to_vec();
                    add_into(&mut dh, &dh_next);
                    lstm_step_backward(
                        &cache.gates[t * 4 * h..(t + 1) * 4 * h],
                        &cache.tanh_cell[t * h..(t + 1) * h],
                        c_prev,
                        &dh,
                        &dc_next,
                        &mut dz,
                        &mut dc_prev,
                    );
                    outer_acc(&mut dwi, &dz, &xv[t * i_dim..(t + 1) * i_dim]);
                    outer_acc(&mut dwh, &dz, h_prev);
                    add_into(&mut db, &dz);
                    matvec_t_acc(&mut dx[t * i_dim..(t + 1) * i_dim], wi, &dz);
                    dh_next.fill(0.0);
                    matvec_t_acc(&mut dh_next, wh, &dz);
                    dc_next.copy_from_slice(&dc_prev);
                }
                acc(grads, *x, &dx, dx.len());
                acc(grads, *w_ih, &dwi, dwi.len());
                acc(grads, *w_hh, &dwh, dwh.len());
                acc(grads, *b, &db, db.len());
            }
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
                cache,
            } => {
                let hd = self.value(*h).len();
                let xv = self.value(*x).data();
                let hp = self.value(*h).data();
                let cp = self.value(*c).data();
                let wi = self.value(*w_ih).data();
                let wh = self.value(*w_hh).data();
                let mut dz = vec![0.0; 4 * hd];
                let mut dc_prev = vec![0.0; hd];
                lstm_step_backward(
                    &cache.gates,
                    &cache.tanh_cell,
                    cp,
                    &g[..hd],
                    &g[hd..],
                    &mut dz,
                    &mut dc_prev,
                );
                let mut dx = vec![0.0; xv.len()];
                matvec_t_acc(&mut dx, wi, &dz);
                let mut dh = vec![0.0; hd];
                matvec_t_acc(&mut dh, wh, &dz);
                let mut dwi = vec![0.0; wi.len()];
                outer_acc(&mut dwi, &dz, xv);
                let mut dwh = vec![0.0; wh.len()];
                outer_acc(&mut dwh, &dz, hp);
                acc(grads, *x, &dx, dx.len());
                acc(grads, *h, &dh, hd);
                acc(grads, *c, &dc_prev, hd);
                acc(grads, *w_ih, &dwi, dwi.len());
                acc(grads, *w_hh, &dwh, dwh.len());
                acc(grads, *b, &dz, dz.len());
            }
            Op::Sse { a, target, mask } => {
                let av = self.value(*a).data();
                let da: Vec<f64> = av
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((x, t), m)| 2.0 * m * (x - t) * g[0])
                    .collect();
                acc(grads, *a, &da, da.len());
            }
            Op::BceLogits {
                a,
                target,
                mask,
                pos_weight,
            } => {
                let av = self.value(*a).data();
                let da: Vec<f64> = av
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((z, y), m)| {
                        let p = sigmoid(*z);
                        m * (-pos_weight * y * (1.0 - p) + (1.0 - y) * p) * g[0]
                    })
                    .collect();
                acc(grads, *a, &da, da.len());
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], len: usize) {
    debug_assert_eq!(g.len(), len);
    match &mut grads[v.0] {
        Some(existing) => add_into(existing, g),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn scale_shift(xhat: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let c = gamma.len();
    let mut out = xhat.to_vec();
    for r in out.chunks_mut(c) {
        for j in 0..c {
            r[j] = r[j] * gamma[j] + beta[j];
        }
    }
    out
}

pub(crate) fn conv1d_raw(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    t_len: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; t_len * c_out];
    for t in 0..t_len {
        let orow = &mut out[t * c_out..(t + 1) * c_out];
        if let Some(b) = b {
            orow.copy_from_slice(b);
        }
        for kk in 0..k {
            let src = t as isize + kk as isize - pad as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let xrow = &x[src as usize * c_in..(src as usize + 1) * c_in];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wrow = &w[(o * k + kk) * c_in..(o * k + kk + 1) * c_in];
                *slot += wrow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    out
}

pub(crate) fn softmax_tensor(t: &Tensor) -> Result<Tensor> {
    if t.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let exps: Vec<f64> = t.data().iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::new(t.shape().to_vec(), exps.into_iter().map(|e| e / total).collect())
}
