use crate::error::{Error, Result};
use crate::numerics::tensor::{argmax, Tensor};

/// Handle to a tensor stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    FullyConnected { x: usize, w: usize, b: usize, out: usize },
    MatMulNT { a: usize, b: usize, out: usize },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        out: usize,
        // Saved forward context: normalized values and per-column 1/std.
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu { x: usize, out: usize },
    Softmax { x: usize, out: usize },
    L2NormalizeRows { x: usize, out: usize, norms: Vec<f64> },
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { x: usize, c: f64, out: usize },
    AddScalar { x: usize, out: usize },
    Clamp { x: usize, lo: f64, hi: f64, out: usize },
    Acos { x: usize, out: usize },
    Cos { x: usize, out: usize },
    ConcatCols { a: usize, b: usize, out: usize },
    Column { x: usize, k: usize, out: usize },
    MulColBroadcast { c: usize, x: usize, out: usize },
    ChooseRows { reps: Vec<usize>, choices: Vec<usize>, out: usize },
    RowSum { x: usize, out: usize },
    LogSumExpRows { x: usize, out: usize },
    MeanAll { x: usize, out: usize },
    SumAll { x: usize, out: usize },
}

struct Node {
    tensor: Tensor,
    requires_grad: bool,
}

/// Recorded computation: operations execute eagerly and append to a tape,
/// `backward` replays the tape in reverse. One graph per training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Inserts a tensor that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> TensorRef {
        self.push(t, false)
    }

    /// Inserts a differentiable leaf. Its gradient buffer exists from the
    /// start, so a parameter the loss never touches reads back as zeros.
    pub fn param(&mut self, mut t: Tensor) -> TensorRef {
        t.ensure_grad();
        self.push(t, true)
    }

    pub fn value(&self, r: TensorRef) -> &Tensor {
        &self.nodes[r.0].tensor
    }

    /// Gradient of a node; zeros for untouched differentiable leaves,
    /// `None` for constants.
    pub fn grad(&self, r: TensorRef) -> Option<&[f64]> {
        self.nodes[r.0].tensor.grad()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Zeroes every gradient buffer; the tape itself is kept.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.tensor.clear_grad();
        }
    }

    /// Reverse-mode sweep from a scalar loss. Each tape entry is visited
    /// exactly once; repeated calls without [`Graph::reset_grads`]
    /// accumulate.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        let t = &self.nodes[loss.0].tensor;
        if t.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", t.shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::invalid("backward", "loss does not depend on any parameter"));
        }
        self.nodes[loss.0].tensor.ensure_grad()[0] += 1.0;

        for oi in (0..self.ops.len()).rev() {
            self.step_backward(oi);
        }
        Ok(())
    }

    fn push(&mut self, t: Tensor, requires_grad: bool) -> TensorRef {
        self.nodes.push(Node {
            tensor: t,
            requires_grad,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn data(&self, i: usize) -> &[f64] {
        self.nodes[i].tensor.data()
    }

    fn shape(&self, i: usize) -> &[usize] {
        self.nodes[i].tensor.shape()
    }

    fn require_2d(&self, op: &'static str, r: TensorRef) -> Result<(usize, usize)> {
        let s = self.shape(r.0);
        if s.len() != 2 {
            return Err(Error::invalid(op, format!("expected 2-D tensor, got shape {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    fn require_same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<()> {
        if self.shape(a.0) != self.shape(b.0) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a.0).to_vec(),
                rhs: self.shape(b.0).to_vec(),
            });
        }
        Ok(())
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// `y = x·w + b` with `x: [n×i]`, `w: [i×o]`, `b: [o]`.
    pub fn fully_connected(&mut self, x: TensorRef, w: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (n, i) = self.require_2d("fully_connected", x)?;
        let (wi, o) = self.require_2d("fully_connected", w)?;
        if i != wi {
            return Err(Error::ShapeMismatch {
                op: "fully_connected",
                lhs: self.shape(x.0).to_vec(),
                rhs: self.shape(w.0).to_vec(),
            });
        }
        if self.shape(b.0) != [o] {
            return Err(Error::ShapeMismatch {
                op: "fully_connected",
                lhs: self.shape(w.0).to_vec(),
                rhs: self.shape(b.0).to_vec(),
            });
        }
        let (xd, wd, bd) = (self.data(x.0), self.data(w.0), self.data(b.0));
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let xr = &xd[r * i..(r + 1) * i];
            let or = &mut out[r * o..(r + 1) * o];
            or.copy_from_slice(bd);
            for (k, &xv) in xr.iter().enumerate() {
                if xv != 0.0 {
                    let wr = &wd[k * o..(k + 1) * o];
                    for c in 0..o {
                        or[c] += xv * wr[c];
                    }
                }
            }
        }
        let rg = self.rg(&[x.0, w.0, b.0]);
        let out = self.push(Tensor::new(vec![n, o], out)?, rg);
        self.ops.push(Op::FullyConnected { x: x.0, w: w.0, b: b.0, out: out.0 });
        Ok(out)
    }

    /// `y = a·bᵀ` with `a: [n×e]`, `b: [m×e]`.
    pub fn matmul_nt(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (n, e) = self.require_2d("matmul_nt", a)?;
        let (m, eb) = self.require_2d("matmul_nt", b)?;
        if e != eb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a.0).to_vec(),
                rhs: self.shape(b.0).to_vec(),
            });
        }
        let (ad, bd) = (self.data(a.0), self.data(b.0));
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let ar = &ad[r * e..(r + 1) * e];
            for c in 0..m {
                let br = &bd[c * e..(c + 1) * e];
                out[r * m + c] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        let out = self.push(Tensor::new(vec![n, m], out)?, rg);
        self.ops.push(Op::MatMulNT { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    /// Train-mode batch normalization over columns. Requires at least two
    /// rows (a single sample has no batch variance). Returns the batch
    /// statistics so the caller can fold them into its running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: f64,
    ) -> Result<(TensorRef, BatchStats)> {
        let (n, d) = self.require_2d("batch_norm", x)?;
        if n < 2 {
            return Err(Error::invalid(
                "batch_norm",
                format!("train mode needs at least 2 rows, got {}", n),
            ));
        }
        self.check_affine("batch_norm", gamma, beta, d)?;
        let xd = self.data(x.0);
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                mean[c] += xd[r * d + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in 0..n {
            for c in 0..d {
                let dv = xd[r * d + c] - mean[c];
                var[c] += dv * dv;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_affine(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Eval-mode batch normalization using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<TensorRef> {
        let (_, d) = self.require_2d("batch_norm", x)?;
        self.check_affine("batch_norm", gamma, beta, d)?;
        if running_mean.len() != d || running_var.len() != d {
            return Err(Error::invalid(
                "batch_norm",
                format!(
                    "running statistics sized {}/{} do not match width {}",
                    running_mean.len(),
                    running_var.len(),
                    d
                ),
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_affine(x, gamma, beta, running_mean, &inv_std, false)
    }

    fn check_affine(&self, op: &'static str, gamma: TensorRef, beta: TensorRef, d: usize) -> Result<()> {
        for r in [gamma, beta] {
            if self.shape(r.0) != [d] {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: vec![d],
                    rhs: self.shape(r.0).to_vec(),
                });
            }
        }
        Ok(())
    }

    fn bn_affine(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        mean: &[f64],
        inv_std: &[f64],
        train: bool,
    ) -> Result<TensorRef> {
        let (n, d) = self.require_2d("batch_norm", x)?;
        let xd = self.data(x.0);
        let (gd, bd) = (self.data(gamma.0), self.data(beta.0));
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                let h = (xd[r * d + c] - mean[c]) * inv_std[c];
                xhat[r * d + c] = h;
                out[r * d + c] = gd[c] * h + bd[c];
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        let out = self.push(Tensor::new(vec![n, d], out)?, rg);
        self.ops.push(Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            out: out.0,
            xhat,
            inv_std: inv_std.to_vec(),
            train,
        });
        Ok(out)
    }

    pub fn relu(&mut self, x: TensorRef) -> Result<TensorRef> {
        let t = &self.nodes[x.0].tensor;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect())?;
        let rg = self.rg(&[x.0]);
        let out = self.push(out, rg);
        self.ops.push(Op::Relu { x: x.0, out: out.0 });
        Ok(out)
    }

    /// Row-wise softmax, stabilized by max subtraction. NaN input is
    /// rejected; large finite logits are fine.
    pub fn softmax(&mut self, x: TensorRef) -> Result<TensorRef> {
        let (n, d) = self.require_2d("softmax", x)?;
        if d == 0 {
            return Err(Error::invalid("softmax", "zero-width rows"));
        }
        if !self.nodes[x.0].tensor.all_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let xd = self.data(x.0);
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * d..(r + 1) * d];
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                o[c] = e;
                sum += e;
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(&[x.0]);
        let out = self.push(Tensor::new(vec![n, d], out)?, rg);
        self.ops.push(Op::Softmax { x: x.0, out: out.0 });
        Ok(out)
    }

    /// Scales each row to unit Euclidean norm; a zero row has no direction
    /// and is rejected.
    pub fn l2_normalize(&mut self, x: TensorRef) -> Result<TensorRef> {
        let (n, d) = self.require_2d("l2_normalize", x)?;
        let xd = self.data(x.0);
        let mut norms = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::invalid("l2_normalize", format!("row {} has zero norm", r)));
            }
            norms[r] = norm;
            for c in 0..d {
                out[r * d + c] = row[c] / norm;
            }
        }
        let rg = self.rg(&[x.0]);
        let out = self.push(Tensor::new(vec![n, d], out)?, rg);
        self.ops.push(Op::L2NormalizeRows { x: x.0, out: out.0, norms });
        Ok(out)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.require_same_shape("add", a, b)?;
        self.zip_elementwise(a, b, |x, y| x + y, |o| Op::Add { a: a.0, b: b.0, out: o })
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.require_same_shape("sub", a, b)?;
        self.zip_elementwise(a, b, |x, y| x - y, |o| Op::Sub { a: a.0, b: b.0, out: o })
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.require_same_shape("mul", a, b)?;
        self.zip_elementwise(a, b, |x, y| x * y, |o| Op::Mul { a: a.0, b: b.0, out: o })
    }

    fn zip_elementwise(
        &mut self,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<TensorRef> {
        let data = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a.0).to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        let out = self.push(t, rg);
        self.ops.push(op(out.0));
        Ok(out)
    }

    pub fn scale(&mut self, x: TensorRef, c: f64) -> Result<TensorRef> {
        self.map_elementwise(x, |v| c * v, |o| Op::Scale { x: x.0, c, out: o })
    }

    pub fn add_scalar(&mut self, x: TensorRef, c: f64) -> Result<TensorRef> {
        self.map_elementwise(x, |v| v + c, |o| Op::AddScalar { x: x.0, out: o })
    }

    pub fn clamp(&mut self, x: TensorRef, lo: f64, hi: f64) -> Result<TensorRef> {
        if !(lo < hi) {
            return Err(Error::invalid("clamp", format!("empty range [{}, {}]", lo, hi)));
        }
        self.map_elementwise(x, |v| v.clamp(lo, hi), |o| Op::Clamp { x: x.0, lo, hi, out: o })
    }

    pub fn acos(&mut self, x: TensorRef) -> Result<TensorRef> {
        if self.data(x.0).iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::invalid("acos", "input outside [-1, 1]"));
        }
        self.map_elementwise(x, |v| v.acos(), |o| Op::Acos { x: x.0, out: o })
    }

    pub fn cos(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.map_elementwise(x, |v| v.cos(), |o| Op::Cos { x: x.0, out: o })
    }

    fn map_elementwise(
        &mut self,
        x: TensorRef,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<TensorRef> {
        let data = self.data(x.0).iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x.0).to_vec(), data)?;
        let rg = self.rg(&[x.0]);
        let out = self.push(t, rg);
        self.ops.push(op(out.0));
        Ok(out)
    }

    /// `[n×a] ++ [n×b] → [n×(a+b)]`.
    pub fn concat_cols(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (n, ca) = self.require_2d("concat_cols", a)?;
        let (nb, cb) = self.require_2d("concat_cols", b)?;
        if n != nb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape(a.0).to_vec(),
                rhs: self.shape(b.0).to_vec(),
            });
        }
        let (ad, bd) = (self.data(a.0), self.data(b.0));
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(&[a.0, b.0]);
        let out = self.push(Tensor::new(vec![n, ca + cb], out)?, rg);
        self.ops.push(Op::ConcatCols { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    /// Extracts column `k` as an `[n×1]` tensor.
    pub fn column(&mut self, x: TensorRef, k: usize) -> Result<TensorRef> {
        let (n, d) = self.require_2d("column", x)?;
        if k >= d {
            return Err(Error::invalid("column", format!("column {} out of {}", k, d)));
        }
        let data: Vec<f64> = (0..n).map(|r| self.data(x.0)[r * d + k]).collect();
        let rg = self.rg(&[x.0]);
        let out = self.push(Tensor::new(vec![n, 1], data)?, rg);
        self.ops.push(Op::Column { x: x.0, k, out: out.0 });
        Ok(out)
    }

    /// Row-wise broadcast product: `y[i, :] = c[i] · x[i, :]`.
    pub fn mul_col_broadcast(&mut self, c: TensorRef, x: TensorRef) -> Result<TensorRef> {
        let (n, one) = self.require_2d("mul_col_broadcast", c)?;
        let (nx, d) = self.require_2d("mul_col_broadcast", x)?;
        if one != 1 || n != nx {
            return Err(Error::ShapeMismatch {
                op: "mul_col_broadcast",
                lhs: self.shape(c.0).to_vec(),
                rhs: self.shape(x.0).to_vec(),
            });
        }
        let (cd, xd) = (self.data(c.0), self.data(x.0));
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for col in 0..d {
                out[r * d + col] = cd[r] * xd[r * d + col];
            }
        }
        let rg = self.rg(&[c.0, x.0]);
        let out = self.push(Tensor::new(vec![n, d], out)?, rg);
        self.ops.push(Op::MulColBroadcast { c: c.0, x: x.0, out: out.0 });
        Ok(out)
    }

    /// Builds row `i` of the output from row `i` of `reps[choices[i]]`.
    /// Gradients flow only into the chosen rows.
    pub fn choose_rows(&mut self, reps: &[TensorRef], choices: &[usize]) -> Result<TensorRef> {
        if reps.is_empty() {
            return Err(Error::invalid("choose_rows", "empty representation list"));
        }
        let (n, d) = self.require_2d("choose_rows", reps[0])?;
        for r in reps.iter().skip(1) {
            self.require_same_shape("choose_rows", reps[0], *r)?;
        }
        if choices.len() != n {
            return Err(Error::invalid(
                "choose_rows",
                format!("{} choices for {} rows", choices.len(), n),
            ));
        }
        if let Some(bad) = choices.iter().find(|&&c| c >= reps.len()) {
            return Err(Error::invalid(
                "choose_rows",
                format!("choice {} out of {} tensors", bad, reps.len()),
            ));
        }
        let mut out = vec![0.0; n * d];
        for (r, &c) in choices.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&self.data(reps[c].0)[r * d..(r + 1) * d]);
        }
        let ids: Vec<usize> = reps.iter().map(|r| r.0).collect();
        let rg = self.rg(&ids);
        let out = self.push(Tensor::new(vec![n, d], out)?, rg);
        self.ops.push(Op::ChooseRows { reps: ids, choices: choices.to_vec(), out: out.0 });
        Ok(out)
    }

    /// `[n×d] → [n×1]` row sums.
    pub fn row_sum(&mut self, x: TensorRef) -> Result<TensorRef> {
        let (n, d) = self.require_2d("row_sum", x)?;
        let xd = self.data(x.0);
        let data: Vec<f64> = (0..n).map(|r| xd[r * d..(r + 1) * d].iter().sum()).collect();
        let rg = self.rg(&[x.0]);
        let out = self.push(Tensor::new(vec![n, 1], data)?, rg);
        self.ops.push(Op::RowSum { x: x.0, out: out.0 });
        Ok(out)
    }

    /// Row-wise `log Σ exp`, max-stabilized.
    pub fn logsumexp_rows(&mut self, x: TensorRef) -> Result<TensorRef> {
        let (n, d) = self.require_2d("logsumexp_rows", x)?;
        if d == 0 {
            return Err(Error::invalid("logsumexp_rows", "zero-width rows"));
        }
        if !self.nodes[x.0].tensor.all_finite() {
            return Err(Error::NonFinite { op: "logsumexp_rows" });
        }
        let xd = self.data(x.0);
        let mut data = vec![0.0; n];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            data[r] = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        }
        let rg = self.rg(&[x.0]);
        let out = self.push(Tensor::new(vec![n, 1], data)?, rg);
        self.ops.push(Op::LogSumExpRows { x: x.0, out: out.0 });
        Ok(out)
    }

    pub fn mean_all(&mut self, x: TensorRef) -> Result<TensorRef> {
        let numel = self.nodes[x.0].tensor.numel();
        if numel == 0 {
            return Err(Error::invalid("mean_all", "empty tensor"));
        }
        let v = self.data(x.0).iter().sum::<f64>() / numel as f64;
        let rg = self.rg(&[x.0]);
        let out = self.push(Tensor::scalar(v), rg);
        self.ops.push(Op::MeanAll { x: x.0, out: out.0 });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: TensorRef) -> Result<TensorRef> {
        let v = self.data(x.0).iter().sum::<f64>();
        let rg = self.rg(&[x.0]);
        let out = self.push(Tensor::scalar(v), rg);
        self.ops.push(Op::SumAll { x: x.0, out: out.0 });
        Ok(out)
    }

    /// Row-wise argmax of a node's value (ties toward the lowest index).
    pub fn argmax_rows(&self, x: TensorRef) -> Result<Vec<usize>> {
        let (n, d) = self.require_2d("argmax_rows", x)?;
        let xd = self.data(x.0);
        Ok((0..n).map(|r| argmax(&xd[r * d..(r + 1) * d])).collect())
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn take_out_grad(&mut self, out: usize) -> Option<Vec<f64>> {
        if self.nodes[out].tensor.grad().is_none() {
            return None;
        }
        // The producing op is visited after every consumer, so the buffer
        // is final; it is put back for callers inspecting interior grads.
        Some(std::mem::take(self.nodes[out].tensor.ensure_grad()))
    }

    fn restore_out_grad(&mut self, out: usize, g: Vec<f64>) {
        *self.nodes[out].tensor.ensure_grad() = g;
    }

    fn add_grad(&mut self, idx: usize, contrib: &[f64]) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let g = self.nodes[idx].tensor.ensure_grad();
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn step_backward(&mut self, oi: usize) {
        // Ops are moved out one at a time so node data stays borrowable.
        let op = std::mem::replace(&mut self.ops[oi], Op::SumAll { x: 0, out: 0 });
        match &op {
            Op::FullyConnected { x, w, b, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let o = self.shape(*w)[1];
                    let xd = self.data(*x);
                    let wd = self.data(*w);
                    let mut gx = vec![0.0; n * i];
                    let mut gw = vec![0.0; i * o];
                    let mut gb = vec![0.0; o];
                    for r in 0..n {
                        let gyr = &gy[r * o..(r + 1) * o];
                        for k in 0..i {
                            let xv = xd[r * i + k];
                            let wr = &wd[k * o..(k + 1) * o];
                            let mut acc = 0.0;
                            for c in 0..o {
                                acc += gyr[c] * wr[c];
                                gw[k * o + c] += xv * gyr[c];
                            }
                            gx[r * i + k] = acc;
                        }
                        for c in 0..o {
                            gb[c] += gyr[c];
                        }
                    }
                    self.add_grad(*x, &gx);
                    self.add_grad(*w, &gw);
                    self.add_grad(*b, &gb);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::MatMulNT { a, b, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let (n, e) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let m = self.shape(*b)[0];
                    let ad = self.data(*a);
                    let bd = self.data(*b);
                    let mut ga = vec![0.0; n * e];
                    let mut gb = vec![0.0; m * e];
                    for r in 0..n {
                        for c in 0..m {
                            let g = gy[r * m + c];
                            if g != 0.0 {
                                for k in 0..e {
                                    ga[r * e + k] += g * bd[c * e + k];
                                    gb[c * e + k] += g * ad[r * e + k];
                                }
                            }
                        }
                    }
                    self.add_grad(*a, &ga);
                    self.add_grad(*b, &gb);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::BatchNorm { x, gamma, beta, out, xhat, inv_std, train } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let gd = self.data(*gamma);
                    let mut gx = vec![0.0; n * d];
                    let mut ggamma = vec![0.0; d];
                    let mut gbeta = vec![0.0; d];
                    for c in 0..d {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for r in 0..n {
                            let dy = gy[r * d + c];
                            ggamma[c] += dy * xhat[r * d + c];
                            gbeta[c] += dy;
                            let dxh = dy * gd[c];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[r * d + c];
                        }
                        for r in 0..n {
                            let dxh = gy[r * d + c] * gd[c];
                            gx[r * d + c] = if *train {
                                // Batch statistics depend on x, so the
                                // mean/variance paths contribute too.
                                inv_std[c] / n as f64
                                    * (n as f64 * dxh - sum_dxhat - xhat[r * d + c] * sum_dxhat_xhat)
                            } else {
                                dxh * inv_std[c]
                            };
                        }
                    }
                    self.add_grad(*x, &gx);
                    self.add_grad(*gamma, &ggamma);
                    self.add_grad(*beta, &gbeta);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::Relu { x, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let gx: Vec<f64> = self
                        .data(*x)
                        .iter()
                        .zip(&gy)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::Softmax { x, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let yd = self.data(*out);
                    let mut gx = vec![0.0; n * d];
                    for r in 0..n {
                        let y = &yd[r * d..(r + 1) * d];
                        let g = &gy[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            gx[r * d + c] = y[c] * (g[c] - dot);
                        }
                    }
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::L2NormalizeRows { x, out, norms } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let yd = self.data(*out);
                    let mut gx = vec![0.0; n * d];
                    for r in 0..n {
                        let y = &yd[r * d..(r + 1) * d];
                        let g = &gy[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            gx[r * d + c] = (g[c] - y[c] * dot) / norms[r];
                        }
                    }
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::Add { a, b, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    self.add_grad(*a, &gy);
                    self.add_grad(*b, &gy);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    self.add_grad(*a, &gy);
                    let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                    self.add_grad(*b, &neg);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let ga: Vec<f64> = gy.iter().zip(self.data(*b)).map(|(g, v)| g * v).collect();
                    let gb: Vec<f64> = gy.iter().zip(self.data(*a)).map(|(g, v)| g * v).collect();
                    self.add_grad(*a, &ga);
                    self.add_grad(*b, &gb);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::Scale { x, c, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let gx: Vec<f64> = gy.iter().map(|g| g * c).collect();
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::AddScalar { x, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    self.add_grad(*x, &gy);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::Clamp { x, lo, hi, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let gx: Vec<f64> = self
                        .data(*x)
                        .iter()
                        .zip(&gy)
                        .map(|(&v, &g)| if v >= *lo && v <= *hi { g } else { 0.0 })
                        .collect();
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::Acos { x, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let gx: Vec<f64> = self
                        .data(*x)
                        .iter()
                        .zip(&gy)
                        .map(|(&v, &g)| -g / (1.0 - v * v).sqrt())
                        .collect();
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::Cos { x, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let gx: Vec<f64> = self
                        .data(*x)
                        .iter()
                        .zip(&gy)
                        .map(|(&v, &g)| -g * v.sin())
                        .collect();
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::ConcatCols { a, b, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let (n, ca) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let cb = self.shape(*b)[1];
                    let w = ca + cb;
                    let mut ga = vec![0.0; n * ca];
                    let mut gb = vec![0.0; n * cb];
                    for r in 0..n {
                        ga[r * ca..(r + 1) * ca].copy_from_slice(&gy[r * w..r * w + ca]);
                        gb[r * cb..(r + 1) * cb].copy_from_slice(&gy[r * w + ca..(r + 1) * w]);
                    }
                    self.add_grad(*a, &ga);
                    self.add_grad(*b, &gb);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::Column { x, k, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut gx = vec![0.0; n * d];
                    for r in 0..n {
                        gx[r * d + k] = gy[r];
                    }
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::MulColBroadcast { c, x, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let cd = self.data(*c);
                    let xd = self.data(*x);
                    let mut gc = vec![0.0; n];
                    let mut gx = vec![0.0; n * d];
                    for r in 0..n {
                        for col in 0..d {
                            let g = gy[r * d + col];
                            gc[r] += g * xd[r * d + col];
                            gx[r * d + col] = g * cd[r];
                        }
                    }
                    self.add_grad(*c, &gc);
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::ChooseRows { reps, choices, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let d = self.shape(*out)[1];
                    let numel = self.nodes[reps[0]].tensor.numel();
                    for (k, &rep) in reps.iter().enumerate() {
                        if !self.nodes[rep].requires_grad || !choices.contains(&k) {
                            continue;
                        }
                        let mut contrib = vec![0.0; numel];
                        for (r, _) in choices.iter().enumerate().filter(|(_, &c)| c == k) {
                            contrib[r * d..(r + 1) * d].copy_from_slice(&gy[r * d..(r + 1) * d]);
                        }
                        self.add_grad(rep, &contrib);
                    }
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::RowSum { x, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut gx = vec![0.0; n * d];
                    for r in 0..n {
                        gx[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = gy[r]);
                    }
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::LogSumExpRows { x, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let xd = self.data(*x);
                    let yd = self.data(*out);
                    let mut gx = vec![0.0; n * d];
                    for r in 0..n {
                        for c in 0..d {
                            gx[r * d + c] = gy[r] * (xd[r * d + c] - yd[r]).exp();
                        }
                    }
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::MeanAll { x, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let numel = self.nodes[*x].tensor.numel();
                    let gx = vec![gy[0] / numel as f64; numel];
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
            Op::SumAll { x, out } => {
                if let Some(gy) = self.take_out_grad(*out) {
                    let gx = vec![gy[0]; self.nodes[*x].tensor.numel()];
                    self.add_grad(*x, &gx);
                    self.restore_out_grad(*out, gy);
                }
            }
        }
        self.ops[oi] = op;
    }
}
