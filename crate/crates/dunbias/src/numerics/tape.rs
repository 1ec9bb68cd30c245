//! Reverse-mode automatic differentiation over a linear op tape.
//!
//! A [`Tape`] records ops in topological order during the forward pass and
//! replays them in reverse to accumulate gradients. Every op validates input
//! shapes and rejects non-finite outputs at the boundary. Gradients
//! accumulate (`+=`) across fan-out; a second `backward` without an explicit
//! `zero_grad` is a contract error.

use crate::error::{Error, Result};
use crate::numerics::funcs::LN_2PI;
use crate::numerics::tensor::Tensor;
use rand::Rng;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-feature batch statistics emitted by a batch-stat normalization op,
/// for the caller to fold into running statistics.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_biased: Vec<f64>,
    pub n: usize,
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Neg { x: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    BatchNormBatch { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormRunning { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    GaussianLogLik { mean: Var, log_var: Var, targets: Vec<f64> },
    Sum { x: Var },
    Mean { x: Var },
    WeightedSum { x: Var, weights: Vec<f64> },
    Softmax { x: Var },
    Ln { x: Var },
    Dot { a: Var, b: Var },
    StackScalars { xs: Vec<Var> },
}

/// Reverse-mode op tape. Rebuilt per training iteration; parameters live
/// outside and are registered as leaves each pass.
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), values: Vec::new(), grads: Vec::new(), needs: Vec::new(), backward_done: false }
    }

    fn push(&mut self, op: Op, value: Tensor, needs: bool) -> Var {
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        self.needs.push(needs);
        Var(self.values.len() - 1)
    }

    fn check(op: &'static str, value: Tensor) -> Result<Tensor> {
        value.check_finite(op)?;
        Ok(value)
    }

    /// Register a leaf. `requires_grad` marks it as a target for `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        Ok(self.push(Op::Leaf, value, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient accumulated for `v` by the last `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Clear all gradients and re-arm `backward`.
    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.backward_done = false;
    }

    fn needs_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs[v.0])
    }

    // ---- forward ops ----

    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        mm::nn(m, k, n, ta.data(), tb.data(), &mut out, 0.0);
        let value = Self::check("matmul", Tensor::new(vec![m, n], out)?)?;
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(Op::Matmul { a, b }, value, needs))
    }

    /// Row-broadcast bias add: `[n,f] + [f]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.values[x.0], &self.values[bias.0]);
        if tx.shape().len() != 2 || tb.shape().len() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("{:?} + {:?}", tx.shape(), tb.shape()),
            });
        }
        let f = tx.shape()[1];
        let data: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % f])
            .collect();
        let value = Self::check("add_bias", Tensor::new(tx.shape().to_vec(), data)?)?;
        let needs = self.needs_any(&[x, bias]);
        Ok(self.push(Op::AddBias { x, bias }, value, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    fn elementwise_pair(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Self::check(name, Tensor::new(ta.shape().to_vec(), data)?)?;
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(op(a, b), value, needs))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| -v).collect())?;
        let needs = self.needs[x.0];
        Ok(self.push(Op::Neg { x }, value, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let tx = &self.values[x.0];
        let value =
            Self::check("scale", Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| c * v).collect())?)?;
        let needs = self.needs[x.0];
        Ok(self.push(Op::Scale { x, c }, value, needs))
    }

    /// Elementwise max(0, x). The subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v.max(0.0)).collect())?;
        let needs = self.needs[x.0];
        Ok(self.push(Op::Relu { x }, value, needs))
    }

    /// Normalize `[n,f]` with statistics of this batch (biased variance,
    /// epsilon inside the square root), then apply the learned affine map.
    /// Returns the batch statistics so the caller can update running stats.
    pub fn batch_norm_batch(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let tx = &self.values[x.0];
        if tx.shape().len() != 2 {
            return Err(Error::Shape { op: "batch_norm", detail: format!("{:?}", tx.shape()) });
        }
        let (n, f) = (tx.shape()[0], tx.shape()[1]);
        if n < 2 {
            return Err(Error::DegenerateBatch { n });
        }
        self.affine_shape_check(gamma, beta, f)?;
        let xd = tx.data();
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for i in 0..n {
            for j in 0..f {
                mean[j] += xd[i * f + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for i in 0..n {
            for j in 0..f {
                let d = xd[i * f + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        let (g, b) = (self.values[gamma.0].data(), self.values[beta.0].data());
        for i in 0..n {
            for j in 0..f {
                let h = (xd[i * f + j] - mean[j]) * inv_std[j];
                xhat[i * f + j] = h;
                out[i * f + j] = g[j] * h + b[j];
            }
        }
        let value = Self::check("batch_norm", Tensor::new(vec![n, f], out)?)?;
        let needs = self.needs_any(&[x, gamma, beta]);
        let stats = BatchStats { mean, var_biased: var, n };
        let v = self.push(
            Op::BatchNormBatch { x, gamma, beta, xhat, inv_std },
            value,
            needs,
        );
        Ok((v, stats))
    }

    /// Normalize with frozen running statistics (evaluation passes).
    pub fn batch_norm_running(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.shape().len() != 2 {
            return Err(Error::Shape { op: "batch_norm", detail: format!("{:?}", tx.shape()) });
        }
        let (n, f) = (tx.shape()[0], tx.shape()[1]);
        self.affine_shape_check(gamma, beta, f)?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::Shape { op: "batch_norm", detail: "running stats width".into() });
        }
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xd = tx.data();
        let mut xhat = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        let (g, b) = (self.values[gamma.0].data(), self.values[beta.0].data());
        for i in 0..n {
            for j in 0..f {
                let h = (xd[i * f + j] - running_mean[j]) * inv_std[j];
                xhat[i * f + j] = h;
                out[i * f + j] = g[j] * h + b[j];
            }
        }
        let value = Self::check("batch_norm", Tensor::new(vec![n, f], out)?)?;
        let needs = self.needs_any(&[x, gamma, beta]);
        Ok(self.push(Op::BatchNormRunning { x, gamma, beta, xhat, inv_std }, value, needs))
    }

    fn affine_shape_check(&self, gamma: Var, beta: Var, f: usize) -> Result<()> {
        if self.values[gamma.0].len() != f || self.values[beta.0].len() != f {
            return Err(Error::Shape { op: "batch_norm", detail: "gamma/beta width".into() });
        }
        Ok(())
    }

    /// Inverted dropout: zero each element with probability `p`, scale
    /// survivors by 1/(1-p). Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability {p} outside [0, 1)")));
        }
        let tx = &self.values[x.0];
        if p == 0.0 {
            let value = tx.clone();
            let mask = vec![1.0; tx.len()];
            let needs = self.needs[x.0];
            return Ok(self.push(Op::Dropout { x, mask }, value, needs));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs[x.0];
        Ok(self.push(Op::Dropout { x, mask }, value, needs))
    }

    /// Per-example Gaussian log density `log N(y_i; mean_i, exp(log_var))`.
    /// `mean` must hold one value per target; `log_var` is a scalar node.
    pub fn gaussian_log_lik(&mut self, mean: Var, log_var: Var, targets: &[f64]) -> Result<Var> {
        let tm = &self.values[mean.0];
        if tm.len() != targets.len() {
            return Err(Error::Shape {
                op: "gaussian_log_lik",
                detail: format!("{} means vs {} targets", tm.len(), targets.len()),
            });
        }
        if self.values[log_var.0].len() != 1 {
            return Err(Error::Shape { op: "gaussian_log_lik", detail: "log_var must be scalar".into() });
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { op: "gaussian_log_lik" });
        }
        let lv = self.values[log_var.0].data()[0];
        let inv_var = (-lv).exp();
        let data: Vec<f64> = tm
            .data()
            .iter()
            .zip(targets)
            .map(|(&m, &y)| {
                let d = y - m;
                -0.5 * LN_2PI - 0.5 * lv - 0.5 * d * d * inv_var
            })
            .collect();
        let value = Self::check("gaussian_log_lik", Tensor::vector(data))?;
        let needs = self.needs_any(&[mean, log_var]);
        Ok(self.push(Op::GaussianLogLik { mean, log_var, targets: targets.to_vec() }, value, needs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.values[x.0].data().iter().sum();
        let value = Self::check("sum", Tensor::scalar(s))?;
        let needs = self.needs[x.0];
        Ok(self.push(Op::Sum { x }, value, needs))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        if t.is_empty() {
            return Err(Error::Param("mean of empty tensor".into()));
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let value = Self::check("mean", Tensor::scalar(s))?;
        let needs = self.needs[x.0];
        Ok(self.push(Op::Mean { x }, value, needs))
    }

    /// Fixed-weight contraction `sum_i w_i x_i` (weights are constants).
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let t = &self.values[x.0];
        if t.len() != weights.len() {
            return Err(Error::Contract(format!(
                "weighted_sum: {} values vs {} weights",
                t.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite { op: "weighted_sum" });
        }
        let s: f64 = t.data().iter().zip(weights).map(|(&v, &w)| v * w).sum();
        let value = Self::check("weighted_sum", Tensor::scalar(s))?;
        let needs = self.needs[x.0];
        Ok(self.push(Op::WeightedSum { x, weights: weights.to_vec() }, value, needs))
    }

    /// Vector softmax with full Jacobian backward.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        if t.shape().len() != 1 || t.is_empty() {
            return Err(Error::Shape { op: "softmax", detail: format!("{:?}", t.shape()) });
        }
        let out = crate::numerics::funcs::softmax(t.data())?;
        let value = Tensor::vector(out);
        let needs = self.needs[x.0];
        Ok(self.push(Op::Softmax { x }, value, needs))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        let data: Vec<f64> = t.data().iter().map(|v| v.ln()).collect();
        let value = Self::check("ln", Tensor::new(t.shape().to_vec(), data)?)?;
        let needs = self.needs[x.0];
        Ok(self.push(Op::Ln { x }, value, needs))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.len() != tb.len() {
            return Err(Error::Shape {
                op: "dot",
                detail: format!("{} vs {}", ta.len(), tb.len()),
            });
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
        let value = Self::check("dot", Tensor::scalar(s))?;
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(Op::Dot { a, b }, value, needs))
    }

    /// Gather scalar nodes into one vector node.
    pub fn stack_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Param("stack_scalars of empty list".into()));
        }
        let mut data = Vec::with_capacity(xs.len());
        for &v in xs {
            if self.values[v.0].len() != 1 {
                return Err(Error::Shape { op: "stack_scalars", detail: "non-scalar input".into() });
            }
            data.push(self.values[v.0].data()[0]);
        }
        let value = Tensor::vector(data);
        let needs = self.needs_any(xs);
        Ok(self.push(Op::StackScalars { xs: xs.to_vec() }, value, needs))
    }

    // ---- backward ----

    /// Accumulate gradients of the scalar `loss` into every node that
    /// requires them. Call `zero_grad` before running again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without zero_grad".into(),
            ));
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract("backward requires a scalar loss".into()));
        }
        self.backward_done = true;
        if !self.needs[loss.0] {
            return Ok(());
        }
        acc(&mut self.grads, &self.values, loss.0, &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let values = &self.values;
        let needs = &self.needs;
        let grads = &mut self.grads;
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                let n = values[b.0].shape()[1];
                if needs[a.0] {
                    let buf = grad_buf(grads, values, a.0);
                    mm::nt(m, n, k, g, values[b.0].data(), buf);
                }
                if needs[b.0] {
                    let buf = grad_buf(grads, values, b.0);
                    mm::tn(k, m, n, values[a.0].data(), g, buf);
                }
            }
            Op::AddBias { x, bias } => {
                if needs[x.0] {
                    acc(grads, values, x.0, g);
                }
                if needs[bias.0] {
                    let f = values[bias.0].len();
                    let buf = grad_buf(grads, values, bias.0);
                    for (idx, &gv) in g.iter().enumerate() {
                        buf[idx % f] += gv;
                    }
                }
            }
            Op::Add { a, b } => {
                if needs[a.0] {
                    acc(grads, values, a.0, g);
                }
                if needs[b.0] {
                    acc(grads, values, b.0, g);
                }
            }
            Op::Sub { a, b } => {
                if needs[a.0] {
                    acc(grads, values, a.0, g);
                }
                if needs[b.0] {
                    let buf = grad_buf(grads, values, b.0);
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                }
            }
            Op::Neg { x } => {
                if needs[x.0] {
                    let buf = grad_buf(grads, values, x.0);
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                }
            }
            Op::Scale { x, c } => {
                if needs[x.0] {
                    let c = *c;
                    let buf = grad_buf(grads, values, x.0);
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += c * gv;
                    }
                }
            }
            Op::Relu { x } => {
                if needs[x.0] {
                    let xd = values[x.0].data();
                    let buf = grad_buf(grads, values, x.0);
                    for idx in 0..xd.len() {
                        if xd[idx] > 0.0 {
                            buf[idx] += g[idx];
                        }
                    }
                }
            }
            Op::BatchNormBatch { x, gamma, beta, xhat, inv_std } => {
                let f = inv_std.len();
                let n = xhat.len() / f;
                let mut sum_g = vec![0.0; f];
                let mut sum_gx = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        sum_g[j] += g[i * f + j];
                        sum_gx[j] += g[i * f + j] * xhat[i * f + j];
                    }
                }
                if needs[beta.0] {
                    acc(grads, values, beta.0, &sum_g);
                }
                if needs[gamma.0] {
                    acc(grads, values, gamma.0, &sum_gx);
                }
                if needs[x.0] {
                    let gm = values[gamma.0].data();
                    let nf = n as f64;
                    let buf = grad_buf(grads, values, x.0);
                    for i in 0..n {
                        for j in 0..f {
                            let idx = i * f + j;
                            buf[idx] += gm[j]
                                * inv_std[j]
                                * (g[idx] - sum_g[j] / nf - xhat[idx] * sum_gx[j] / nf);
                        }
                    }
                }
            }
            Op::BatchNormRunning { x, gamma, beta, xhat, inv_std } => {
                let f = inv_std.len();
                let n = xhat.len() / f;
                if needs[beta.0] || needs[gamma.0] {
                    let mut sum_g = vec![0.0; f];
                    let mut sum_gx = vec![0.0; f];
                    for i in 0..n {
                        for j in 0..f {
                            sum_g[j] += g[i * f + j];
                            sum_gx[j] += g[i * f + j] * xhat[i * f + j];
                        }
                    }
                    if needs[beta.0] {
                        acc(grads, values, beta.0, &sum_g);
                    }
                    if needs[gamma.0] {
                        acc(grads, values, gamma.0, &sum_gx);
                    }
                }
                if needs[x.0] {
                    let gm = values[gamma.0].data();
                    let buf = grad_buf(grads, values, x.0);
                    for i in 0..n {
                        for j in 0..f {
                            buf[i * f + j] += g[i * f + j] * gm[j] * inv_std[j];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if needs[x.0] {
                    let buf = grad_buf(grads, values, x.0);
                    for idx in 0..mask.len() {
                        buf[idx] += g[idx] * mask[idx];
                    }
                }
            }
            Op::GaussianLogLik { mean, log_var, targets } => {
                let lv = values[log_var.0].data()[0];
                let inv_var = (-lv).exp();
                let md = values[mean.0].data();
                if needs[mean.0] {
                    let buf = grad_buf(grads, values, mean.0);
                    for idx in 0..targets.len() {
                        buf[idx] += g[idx] * (targets[idx] - md[idx]) * inv_var;
                    }
                }
                if needs[log_var.0] {
                    let mut s = 0.0;
                    for idx in 0..targets.len() {
                        let d = targets[idx] - md[idx];
                        s += g[idx] * (-0.5 + 0.5 * d * d * inv_var);
                    }
                    let buf = grad_buf(grads, values, log_var.0);
                    buf[0] += s;
                }
            }
            Op::Sum { x } => {
                if needs[x.0] {
                    let buf = grad_buf(grads, values, x.0);
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if needs[x.0] {
                    let scale = 1.0 / values[x.0].len() as f64;
                    let buf = grad_buf(grads, values, x.0);
                    for o in buf.iter_mut() {
                        *o += g[0] * scale;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if needs[x.0] {
                    let buf = grad_buf(grads, values, x.0);
                    for (idx, &w) in weights.iter().enumerate() {
                        buf[idx] += g[0] * w;
                    }
                }
            }
            Op::Softmax { x } => {
                if needs[x.0] {
                    let q = values[i].data();
                    let gq: f64 = g.iter().zip(q).map(|(&gv, &qv)| gv * qv).sum();
                    let buf = grad_buf(grads, values, x.0);
                    for idx in 0..q.len() {
                        buf[idx] += q[idx] * (g[idx] - gq);
                    }
                }
            }
            Op::Ln { x } => {
                if needs[x.0] {
                    let xd = values[x.0].data();
                    let buf = grad_buf(grads, values, x.0);
                    for idx in 0..xd.len() {
                        buf[idx] += g[idx] / xd[idx];
                    }
                }
            }
            Op::Dot { a, b } => {
                if needs[a.0] {
                    let bd = values[b.0].data().to_vec();
                    let buf = grad_buf(grads, values, a.0);
                    for (o, bv) in buf.iter_mut().zip(bd) {
                        *o += g[0] * bv;
                    }
                }
                if needs[b.0] {
                    let ad = values[a.0].data().to_vec();
                    let buf = grad_buf(grads, values, b.0);
                    for (o, av) in buf.iter_mut().zip(ad) {
                        *o += g[0] * av;
                    }
                }
            }
            Op::StackScalars { xs } => {
                for (j, v) in xs.clone().into_iter().enumerate() {
                    if needs[v.0] {
                        let buf = grad_buf(grads, values, v.0);
                        buf[0] += g[j];
                    }
                }
            }
        }
    }
}

fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    values: &[Tensor],
    idx: usize,
) -> &'a mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; values[idx].len()])
}

fn acc(grads: &mut [Option<Vec<f64>>], values: &[Tensor], idx: usize, contrib: &[f64]) {
    let buf = grad_buf(grads, values, idx);
    for (o, &c) in buf.iter_mut().zip(contrib) {
        *o += c;
    }
}

/// Row-major dgemm wrappers around the matrixmultiply kernel.
mod mm {
    /// c += a[m,k] * b[k,n] (beta=1) or c = a*b (beta=0)
    pub fn nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    /// c += g[m,n] * b[k,n]^T  -> [m,k]
    pub fn nt(m: usize, n: usize, k: usize, g: &[f64], b: &[f64], c: &mut [f64]) {
        debug_assert_eq!(g.len(), m * n);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * k);
        unsafe {
            matrixmultiply::dgemm(
                m, n, k, 1.0,
                g.as_ptr(), n as isize, 1,
                b.as_ptr(), 1, n as isize,
                1.0,
                c.as_mut_ptr(), k as isize, 1,
            );
        }
    }

    /// c += a[m,k]^T * g[m,n]  -> [k,n]
    pub fn tn(k: usize, m: usize, n: usize, a: &[f64], g: &[f64], c: &mut [f64]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(g.len(), m * n);
        debug_assert_eq!(c.len(), k * n);
        unsafe {
            matrixmultiply::dgemm(
                k, m, n, 1.0,
                a.as_ptr(), 1, k as isize,
                g.as_ptr(), n as isize, 1,
                1.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}
