//! Recorded computation graph with reverse-mode gradients.
//!
//! Every operation appends a node holding its output value plus whatever it
//! needs for the backward pass. Nodes are topologically ordered by
//! construction, so the backward pass walks them in reverse index order.

use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::gemm::gemm;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation implemented outside this crate. `backward` returns one entry per
/// input, `None` for inputs that receive no gradient.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// Running-statistics update produced by a batch-norm layer in train mode.
#[derive(Clone, Debug)]
pub(crate) struct RunningUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
    pub momentum: f64,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Option<Vec<f64>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// normalized input (train mode) or `None` in eval mode
        xhat: Option<Vec<f64>>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    KlDiv {
        p: Var,
        log_q: Vec<f64>,
    },
    KlDivRows {
        p: Var,
        log_q: Vec<f64>,
    },
    Add(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    ScaleRows {
        w: Var,
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Column {
        x: Var,
        col: usize,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Floor applied to the reference distribution inside [`Graph::kl_div`].
pub const KL_FLOOR: f64 = 1e-12;

/// A recorded forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    kink_hash: u64,
    pub(crate) running_updates: Vec<RunningUpdate>,
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
            grad_enabled: true,
            params: HashMap::new(),
            kink_hash: 0xcbf2_9ce4_8422_2325,
            running_updates: Vec::new(),
        }
    }

    /// A graph whose nodes never require gradients; ops skip their
    /// backward caches.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Hash of the activation pattern of every rectifier evaluated so far.
    /// Two forward passes with equal signatures lie on the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Param(id), trainable);
        self.params.insert(id, v);
        v
    }

    /// Applies the batch-norm running statistics recorded in train mode.
    pub fn apply_running_updates(&mut self, store: &mut ParamStore) {
        for u in self.running_updates.drain(..) {
            let m = store.value_mut(u.mean_id).data_mut();
            for (r, &b) in m.iter_mut().zip(&u.mean) {
                *r = (1.0 - u.momentum) * *r + u.momentum * b;
            }
            let v = store.value_mut(u.var_id).data_mut();
            for (r, &b) in v.iter_mut().zip(&u.var_unbiased) {
                *r = (1.0 - u.momentum) * *r + u.momentum * b;
            }
        }
    }

    // ---------------------------------------------------------------- ops

    /// 2-D convolution over `[N, C_in, H, W]` with weights
    /// `[C_out, C_in, kH, kW]` and bias `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(NnError::mismatch("conv2d", &xs, &ws));
        }
        if self.shape(b) != [ws[0]] {
            return Err(NnError::mismatch("conv2d bias", &ws, self.shape(b)));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if stride == 0 || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(NnError::mismatch("conv2d kernel", &xs, &ws));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;
        let p = ho * wo;
        let keep_cols = self.grad_enabled && self.requires(w);
        let mut all_cols = if keep_cols {
            Vec::with_capacity(n * k * p)
        } else {
            Vec::new()
        };
        let mut cols = vec![0.0; k * p];
        let mut out = vec![0.0; n * cout * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        for i in 0..n {
            im2col(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], &geom, &mut cols);
            let o = &mut out[i * cout * p..(i + 1) * cout * p];
            for (c, chunk) in o.chunks_mut(p).enumerate() {
                chunk.fill(bv[c]);
            }
            gemm(cout, k, p, 1.0, wv, false, &cols, false, 1.0, o);
            if keep_cols {
                all_cols.extend_from_slice(&cols);
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            Tensor::from_raw(&[n, cout, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols: keep_cols.then_some(all_cols),
            },
            req,
        ))
    }

    /// Batch normalization over axis 1 using the statistics of this batch.
    /// Returns the output plus the batch mean and unbiased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, s) = self.bn_dims(x, gamma, beta)?;
        let m = (n * s) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                mean[ch] += xv[base..base + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                var[ch] += xv[base..base + s]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let out = self.bn_affine(&xhat, gamma, beta, n, c, s);
        let shape = self.shape(x).to_vec();
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let unbiased = if m > 1.0 {
            var.iter().map(|v| v * m / (m - 1.0)).collect()
        } else {
            var.clone()
        };
        let v = self.push(
            Tensor::from_raw(&shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Some(xhat),
                mean: mean.clone(),
                inv_std,
            },
            req,
        );
        Ok((v, mean, unbiased))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, s) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(NnError::mismatch("batch_norm stats", &[c], &[mean.len()]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let out = self.bn_affine(&xhat, gamma, beta, n, c, s);
        let shape = self.shape(x).to_vec();
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::from_raw(&shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: None,
                mean: mean.to_vec(),
                inv_std,
            },
            req,
        ))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(NnError::InvalidShape(format!(
                "batch_norm needs at least 2 axes, got {xs:?}"
            )));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NnError::mismatch("batch_norm", xs, self.shape(gamma)));
        }
        Ok((xs[0], c, xs[2..].iter().product()))
    }

    fn bn_affine(&self, xhat: &[f64], gamma: Var, beta: Var, n: usize, c: usize, s: usize) -> Vec<f64> {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; xhat.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        out
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut h = self.kink_hash;
        let out = xv.map(|v| v.max(0.0));
        for (i, v) in xv.data().iter().enumerate() {
            if *v > 0.0 {
                h ^= i as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        h ^= xv.numel() as u64;
        self.kink_hash = h.wrapping_mul(0x100_0000_01b3);
        let req = self.requires(x);
        self.push(out, Op::Relu(x), req)
    }

    /// Dense layer: `x [N, in]`, `w [out, in]`, `b [out]` gives `[N, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(NnError::mismatch("linear", xs, ws));
        }
        let (n, inp, out_dim) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * out_dim];
        let bv = self.value(b).data();
        for row in out.chunks_mut(out_dim) {
            row.copy_from_slice(bv);
        }
        gemm(
            n,
            inp,
            out_dim,
            1.0,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut out,
        );
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            Tensor::from_raw(&[n, out_dim], out),
            Op::Linear { x, w, b },
            req,
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap_or(&1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            crate::functional::softmax_in_place(row);
        }
        let t = Tensor::from_raw(xv.shape(), out);
        let req = self.requires(x);
        self.push(t, Op::Softmax(x), req)
    }

    /// `sum p * ln(p / q)` over every element, with `0 ln 0 = 0` and `q`
    /// floored at [`KL_FLOOR`]. Both tensors hold distributions along their
    /// last axis; the result is the sum of the row divergences.
    pub fn kl_div(&mut self, p: Var, q: &Tensor) -> Result<Var> {
        if self.shape(p) != q.shape() {
            return Err(NnError::mismatch("kl_div", self.shape(p), q.shape()));
        }
        let log_q: Vec<f64> = q.data().iter().map(|v| v.max(KL_FLOOR).ln()).collect();
        let total = self
            .value(p)
            .data()
            .iter()
            .zip(&log_q)
            .map(|(&pi, &lq)| if pi > 0.0 { pi * (pi.ln() - lq) } else { 0.0 })
            .sum::<f64>();
        let req = self.requires(p);
        Ok(self.push(Tensor::scalar(total), Op::KlDiv { p, log_q }, req))
    }

    /// Like [`Graph::kl_div`] but keeps one divergence per leading-axis row.
    pub fn kl_div_rows(&mut self, p: Var, q: &Tensor) -> Result<Var> {
        if self.shape(p) != q.shape() {
            return Err(NnError::mismatch("kl_div_rows", self.shape(p), q.shape()));
        }
        let log_q: Vec<f64> = q.data().iter().map(|v| v.max(KL_FLOOR).ln()).collect();
        let pv = self.value(p);
        let (rows, len) = (pv.rows(), pv.row_len());
        let per_row = (0..rows)
            .map(|r| {
                pv.row(r)
                    .iter()
                    .zip(&log_q[r * len..(r + 1) * len])
                    .map(|(&pi, &lq)| if pi > 0.0 { pi * (pi.ln() - lq) } else { 0.0 })
                    .sum::<f64>()
            })
            .collect();
        let req = self.requires(p);
        Ok(self.push(Tensor::from_raw(&[rows], per_row), Op::KlDivRows { p, log_q }, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::mismatch("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add(a, b), req))
    }

    /// `x + c` where `c` is a constant; the gradient passes straight to `x`.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(NnError::mismatch("add_const", self.shape(x), c.shape()));
        }
        let mut out = self.value(x).clone();
        out.add_assign(c);
        let req = self.requires(x);
        Ok(self.push(out, Op::AddConst(x), req))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let req = self.requires(x);
        self.push(out, Op::Scale(x, c), req)
    }

    /// Multiplies row `i` of `x` by the scalar `w[i]`.
    pub fn scale_rows(&mut self, w: Var, x: Var) -> Result<Var> {
        let n = self.value(x).rows();
        if self.value(w).numel() != n {
            return Err(NnError::mismatch("scale_rows", self.shape(w), self.shape(x)));
        }
        let xv = self.value(x);
        let wv = self.value(w).data();
        let len = xv.row_len();
        let mut out = xv.data().to_vec();
        for (i, row) in out.chunks_mut(len.max(1)).enumerate().take(n) {
            row.iter_mut().for_each(|v| *v *= wv[i]);
        }
        let t = Tensor::from_raw(xv.shape(), out);
        let req = self.requires(w) || self.requires(x);
        Ok(self.push(t, Op::ScaleRows { w, x }, req))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(NnError::mismatch("concat", &sa, &sb));
        }
        let n = sa[0];
        let la = self.value(a).row_len();
        let lb = self.value(b).row_len();
        let mut out = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_raw(&shape, out), Op::Concat { a, b }, req))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let req = self.requires(x);
        Ok(self.push(out, Op::Reshape(x), req))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.rows(), t.row_len()];
        self.reshape(x, &shape)
    }

    /// Copies leading-axis rows `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(x).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(NnError::InvalidShape(format!(
                "row {bad} out of range for {rows} rows"
            )));
        }
        let out = self.value(x).select_rows(idx);
        let req = self.requires(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            req,
        ))
    }

    /// Column `col` of a `[N, M]` matrix as a `[N]` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || col >= s[1] {
            return Err(NnError::InvalidShape(format!("column {col} of {s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let data = (0..n).map(|i| self.value(x).data()[i * m + col]).collect();
        let req = self.requires(x);
        Ok(self.push(Tensor::from_raw(&[n], data), Op::Column { x, col }, req))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), req)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel().max(1) as f64;
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::Mean(x), req)
    }

    /// Records an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let req = inputs.iter().any(|&v| self.requires(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            req,
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::NoForward);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(NnError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        grads.accumulate(self, store);
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let send = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = node.value.shape();
                let (ho, wo) = (os[2], os[3]);
                let k = cin * kh * kw;
                let p = ho * wo;
                let gd = g.data();
                if self.requires(*b) {
                    let mut db = vec![0.0; cout];
                    for img in gd.chunks(cout * p) {
                        for (c, chunk) in img.chunks(p).enumerate() {
                            db[c] += chunk.iter().sum::<f64>();
                        }
                    }
                    send(grads, *b, Tensor::from_raw(&[cout], db));
                }
                if let (true, Some(cols)) = (self.requires(*w), cols) {
                    let mut dw = vec![0.0; cout * k];
                    for i in 0..n {
                        gemm(
                            cout,
                            p,
                            k,
                            1.0,
                            &gd[i * cout * p..(i + 1) * cout * p],
                            false,
                            &cols[i * k * p..(i + 1) * k * p],
                            true,
                            1.0,
                            &mut dw,
                        );
                    }
                    send(grads, *w, Tensor::from_raw(ws, dw));
                }
                if self.requires(*x) {
                    let geom = ConvGeom {
                        cin,
                        h,
                        w: wd,
                        kh,
                        kw,
                        stride: *stride,
                        pad: *pad,
                        ho,
                        wo,
                    };
                    let wv = self.value(*w).data();
                    let mut dcols = vec![0.0; k * p];
                    let mut dx = vec![0.0; n * cin * h * wd];
                    for i in 0..n {
                        gemm(
                            k,
                            cout,
                            p,
                            1.0,
                            wv,
                            true,
                            &gd[i * cout * p..(i + 1) * cout * p],
                            false,
                            0.0,
                            &mut dcols,
                        );
                        col2im(
                            &dcols,
                            &geom,
                            &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd],
                        );
                    }
                    send(grads, *x, Tensor::from_raw(xs, dx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                mean,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let xhat: Vec<f64> = match xhat {
                    Some(v) => v.clone(),
                    None => {
                        let xv = self.value(*x).data();
                        let mut out = vec![0.0; xv.len()];
                        for i in 0..n {
                            for ch in 0..c {
                                let base = (i * c + ch) * s;
                                for j in base..base + s {
                                    out[j] = (xv[j] - mean[ch]) * inv_std[ch];
                                }
                            }
                        }
                        out
                    }
                };
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for j in base..base + s {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                if self.requires(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let train = matches!(node.op, Op::BatchNorm { xhat: Some(_), .. });
                    let m = (n * s) as f64;
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * s;
                            for j in base..base + s {
                                dx[j] = if train {
                                    gam[ch] * inv_std[ch] / m
                                        * (m * gd[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * gd[j]
                                };
                            }
                        }
                    }
                    send(grads, *x, Tensor::from_raw(xs, dx));
                }
                send(grads, *gamma, Tensor::from_raw(&[c], dgamma));
                send(grads, *beta, Tensor::from_raw(&[c], dbeta));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                send(grads, *x, Tensor::from_raw(g.shape(), d));
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, inp, out_dim) = (xs[0], xs[1], ws[0]);
                let gd = g.data();
                if self.requires(*x) {
                    let mut dx = vec![0.0; n * inp];
                    gemm(n, out_dim, inp, 1.0, gd, false, self.value(*w).data(), false, 0.0, &mut dx);
                    send(grads, *x, Tensor::from_raw(xs, dx));
                }
                if self.requires(*w) {
                    let mut dw = vec![0.0; out_dim * inp];
                    gemm(out_dim, n, inp, 1.0, gd, true, self.value(*x).data(), false, 0.0, &mut dw);
                    send(grads, *w, Tensor::from_raw(ws, dw));
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; out_dim];
                    for row in gd.chunks(out_dim) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(grads, *b, Tensor::from_raw(&[out_dim], db));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let len = *node.value.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(len)
                    .zip(y.chunks(len))
                    .zip(g.data().chunks(len))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..len {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(grads, *x, Tensor::from_raw(node.value.shape(), d));
            }
            Op::KlDiv { p, log_q } => {
                let g0 = g.data()[0];
                let pv = self.value(*p);
                let d = pv
                    .data()
                    .iter()
                    .zip(log_q)
                    .map(|(&pi, &lq)| g0 * (pi.max(f64::MIN_POSITIVE).ln() - lq + 1.0))
                    .collect();
                send(grads, *p, Tensor::from_raw(pv.shape(), d));
            }
            Op::KlDivRows { p, log_q } => {
                let pv = self.value(*p);
                let len = pv.row_len().max(1);
                let gd = g.data();
                let d = pv
                    .data()
                    .iter()
                    .zip(log_q)
                    .enumerate()
                    .map(|(i, (&pi, &lq))| gd[i / len] * (pi.max(f64::MIN_POSITIVE).ln() - lq + 1.0))
                    .collect();
                send(grads, *p, Tensor::from_raw(pv.shape(), d));
            }
            Op::Add(a, b) => {
                send(grads, *a, g.clone());
                send(grads, *b, g.clone());
            }
            Op::AddConst(x) => send(grads, *x, g.clone()),
            Op::Scale(x, c) => send(grads, *x, g.scale(*c)),
            Op::ScaleRows { w, x } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let len = xv.row_len();
                let n = xv.rows();
                if self.requires(*w) {
                    let dw: Vec<f64> = (0..n)
                        .map(|i| {
                            g.data()[i * len..(i + 1) * len]
                                .iter()
                                .zip(xv.row(i))
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    send(grads, *w, Tensor::from_raw(wv.shape(), dw));
                }
                if self.requires(*x) {
                    let mut dx = g.data().to_vec();
                    for (i, row) in dx.chunks_mut(len.max(1)).enumerate().take(n) {
                        row.iter_mut().for_each(|v| *v *= wv.data()[i]);
                    }
                    send(grads, *x, Tensor::from_raw(xv.shape(), dx));
                }
            }
            Op::Concat { a, b } => {
                let la = self.value(*a).row_len();
                let lb = self.value(*b).row_len();
                let n = self.value(*a).rows();
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for row in g.data().chunks(la + lb) {
                    da.extend_from_slice(&row[..la]);
                    db.extend_from_slice(&row[la..]);
                }
                send(grads, *a, Tensor::from_raw(self.shape(*a), da));
                send(grads, *b, Tensor::from_raw(self.shape(*b), db));
            }
            Op::Reshape(x) => {
                send(grads, *x, Tensor::from_raw(self.shape(*x), g.data().to_vec()));
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let len = xv.row_len();
                let mut dx = vec![0.0; xv.numel()];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..len {
                        dx[r * len + j] += g.data()[k * len + j];
                    }
                }
                send(grads, *x, Tensor::from_raw(xv.shape(), dx));
            }
            Op::Column { x, col } => {
                let s = self.shape(*x);
                let m = s[1];
                let mut dx = vec![0.0; s[0] * m];
                for (i, gi) in g.data().iter().enumerate() {
                    dx[i * m + col] = *gi;
                }
                send(grads, *x, Tensor::from_raw(s, dx));
            }
            Op::Sum(x) => {
                send(grads, *x, Tensor::full(self.shape(*x), g.data()[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                send(grads, *x, Tensor::full(self.shape(*x), g.data()[0] / n));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&vals, &node.value, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        debug_assert_eq!(gi.shape(), self.shape(*v), "{} grad shape", op.name());
                        send(grads, *v, gi);
                    }
                }
            }
        }
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradient of every parameter leaf owned by `store`.
    pub fn accumulate(&self, graph: &Graph, store: &mut ParamStore) {
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                if store.owns(*id) && store.is_trainable(*id) {
                    store.accumulate_grad(*id, g);
                }
            }
        }
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
