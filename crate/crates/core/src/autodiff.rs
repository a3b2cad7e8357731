//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and enough
//! cached state to run its backward rule. [`Tape::backward`] walks the tape
//! in reverse from a scalar and returns the gradient of every node that
//! depends on a `requires_grad` leaf.
//!
//! Matrices are 2-d row-major tensors; graph operations treat rows as nodes
//! (or edges) and columns as channels.

use std::rc::Rc;

use rand::Rng;

use crate::tensor::{ParamId, ParamStore, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        needs: &[bool],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Concat(Vec<Var>),
    Scatter {
        values: Var,
        index: Rc<[usize]>,
        weight: Option<Vec<f64>>,
    },
    Elu(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    L1(Var, Var),
    Sum(Var),
    Reshape(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics of one batch-norm call in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node on a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// C = alpha * op(A) * op(B) + beta * C with row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe the row-major layouts checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn expect_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    if t.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: vec![0, 0],
            found: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. Its gradient is tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    /// Binds every parameter of `store` as a differentiable leaf, in order.
    pub fn bind_params(&mut self, store: &ParamStore) -> Vec<Var> {
        store
            .params()
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.zero_grad();
                self.leaf(t.with_requires_grad(true))
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = expect_matrix("matmul", self.value(a))?;
        let (k2, n) = expect_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: vec![k, n],
                found: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: self.value(a).shape().to_vec(),
                found: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var, TensorError> {
        self.same_shape(op, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, node, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, s), needs)
    }

    /// Adds the length-`C` vector `bias` to every row of the `N x C` matrix `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, c) = expect_matrix("add_row", self.value(x))?;
        if self.value(bias).numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                expected: vec![c],
                found: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone().with_requires_grad(false);
        for row in out.data_mut().chunks_mut(c) {
            for (o, bi) in row.iter_mut().zip(&b) {
                *o += bi;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(x, bias), needs))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyInput { op: "concat" })?;
        let (rows, _) = expect_matrix("concat", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = expect_matrix("concat", self.value(p))?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    expected: vec![rows, c],
                    found: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::Concat(parts.to_vec()), needs))
    }

    fn scatter(&mut self, values: Var, index: &[usize], n: usize, mean: bool) -> Result<Var, TensorError> {
        let op = if mean { "scatter_mean" } else { "scatter_sum" };
        let (e, c) = expect_matrix(op, self.value(values))?;
        if index.len() != e {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: vec![e],
                found: vec![index.len()],
            });
        }
        let mut counts = vec![0usize; n];
        for &i in index {
            if i >= n {
                return Err(TensorError::IndexOutOfRange { op, index: i, bound: n });
            }
            counts[i] += 1;
        }
        let mut out = vec![0.0; n * c];
        let src = self.value(values).data();
        for (row, &i) in index.iter().enumerate() {
            let dst = &mut out[i * c..(i + 1) * c];
            for (d, s) in dst.iter_mut().zip(&src[row * c..(row + 1) * c]) {
                *d += s;
            }
        }
        let weight = mean.then(|| {
            counts
                .iter()
                .map(|&k| if k == 0 { 0.0 } else { 1.0 / k as f64 })
                .collect::<Vec<f64>>()
        });
        if let Some(w) = &weight {
            for (row, wi) in out.chunks_mut(c).zip(w) {
                for o in row {
                    *o *= wi;
                }
            }
        }
        let needs = self.needs(values);
        Ok(self.push(
            Tensor::matrix(n, c, out)?,
            Op::Scatter {
                values,
                index: index.into(),
                weight,
            },
            needs,
        ))
    }

    /// Row `i` of the result is the mean of the rows of `values` whose index
    /// is `i`; rows with no contributions are zero.
    pub fn scatter_mean(&mut self, values: Var, index: &[usize], n: usize) -> Result<Var, TensorError> {
        self.scatter(values, index, n, true)
    }

    pub fn scatter_sum(&mut self, values: Var, index: &[usize], n: usize) -> Result<Var, TensorError> {
        self.scatter(values, index, n, false)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp_m1() })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Elu(x), needs)
    }

    /// Batch normalization over the rows of an `N x C` matrix using the
    /// batch statistics; also returns them for the running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats), TensorError> {
        let (n, c) = expect_matrix("batch_norm", self.value(x))?;
        self.check_channels("batch_norm", gamma, c)?;
        self.check_channels("batch_norm", beta, c)?;
        if n == 0 {
            return Err(TensorError::EmptyInput { op: "batch_norm" });
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        for row in xd.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in xd.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / n as f64 + BN_EPS).sqrt())
            .collect();
        let unbiased: Vec<f64> = var
            .iter()
            .map(|s| if n > 1 { s / (n - 1) as f64 } else { 0.0 })
            .collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for j in 0..c {
                let h = (xd[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = BatchStats {
            mean,
            var: unbiased,
        };
        let v = self.push(
            Tensor::matrix(n, c, out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        );
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var, TensorError> {
        let (n, c) = expect_matrix("batch_norm", self.value(x))?;
        self.check_channels("batch_norm", gamma, c)?;
        self.check_channels("batch_norm", beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                expected: vec![c],
                found: vec![running_mean.len()],
            });
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for j in 0..c {
                out[r * c + j] = g[j] * (xd[r * c + j] - running_mean[j]) * inv_std[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::matrix(n, c, out)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            needs,
        ))
    }

    fn check_channels(&self, op: &'static str, v: Var, c: usize) -> Result<(), TensorError> {
        if self.value(v).numel() != c {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: vec![c],
                found: self.value(v).shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Inverted dropout. Outside training, or with `p == 0`, returns `x`
    /// itself and draws nothing from `rng`. Masks are drawn in row-major order.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout(x, mask), needs))
    }

    /// Mean absolute error over all entries.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        self.same_shape("l1_loss", pred, target)?;
        let p = self.value(pred).data();
        if p.is_empty() {
            return Err(TensorError::EmptyInput { op: "l1_loss" });
        }
        let total: f64 = p
            .iter()
            .zip(self.value(target).data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let loss = total / p.len() as f64;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(loss), Op::L1(pred, target), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.value(x).clone().with_requires_grad(false).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Records an externally computed output whose gradient rule is `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(output, Op::Custom(inputs.to_vec(), op), needs)
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::NotScalar(self.value(root).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                if self.needs(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(b).data(), true, &mut ga, 0.0);
                    accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), true, g, false, &mut gb, 0.0);
                    accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.needs(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.needs(b) {
                    accumulate(grads, b, g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let gb: Vec<f64> = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, a, gb);
                }
                if self.needs(b) {
                    let ga: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, b, ga);
                }
            }
            &Op::Scale(a, s) => {
                if self.needs(a) {
                    accumulate(grads, a, g.iter().map(|v| v * s).collect());
                }
            }
            &Op::AddRow(x, bias) => {
                if self.needs(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if self.needs(bias) {
                    let c = self.value(bias).numel();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(grads, bias, gb);
                }
            }
            Op::Concat(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::Scatter {
                values,
                index,
                weight,
            } => {
                if self.needs(*values) {
                    let c = out.shape()[1];
                    let mut gv = Vec::with_capacity(index.len() * c);
                    for &i in index.iter() {
                        let w = weight.as_ref().map_or(1.0, |w| w[i]);
                        gv.extend(g[i * c..(i + 1) * c].iter().map(|v| v * w));
                    }
                    accumulate(grads, *values, gv);
                }
            }
            &Op::Elu(x) => {
                let gx = g
                    .iter()
                    .zip(self.value(x).data())
                    .zip(out.data())
                    .map(|((gi, &xi), &yi)| if xi > 0.0 { *gi } else { gi * (yi + 1.0) })
                    .collect();
                accumulate(grads, x, gx);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = (out.shape()[0], out.shape()[1]);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        sum_g[j] += g[r * c + j];
                        sum_gx[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data();
                    let nf = n as f64;
                    let mut gx = vec![0.0; n * c];
                    for r in 0..n {
                        for j in 0..c {
                            let k = r * c + j;
                            gx[k] = gam[j] * inv_std[j] / nf
                                * (nf * g[k] - sum_g[j] - xhat[k] * sum_gx[j]);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, sum_gx);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, sum_g);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c) = (out.shape()[0], out.shape()[1]);
                let gam = self.value(*gamma).data();
                let xd = self.value(*x).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                let mut gx = vec![0.0; n * c];
                for r in 0..n {
                    for j in 0..c {
                        let k = r * c + j;
                        sum_g[j] += g[k];
                        sum_gx[j] += g[k] * (xd[k] - mean[j]) * inv_std[j];
                        gx[k] = g[k] * gam[j] * inv_std[j];
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, gx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, sum_gx);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, sum_g);
                }
            }
            Op::Dropout(x, mask) => {
                accumulate(grads, *x, g.iter().zip(mask).map(|(a, m)| a * m).collect());
            }
            &Op::L1(pred, target) => {
                let p = self.value(pred).data();
                let t = self.value(target).data();
                let scale = g[0] / p.len() as f64;
                let gp: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.needs(target) {
                    accumulate(grads, target, gp.iter().map(|v| -v).collect());
                }
                if self.needs(pred) {
                    accumulate(grads, pred, gp);
                }
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Reshape(x) => accumulate(grads, x, g.to_vec()),
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let result = op.backward(&values, &needs, out, g);
                for (&v, gi) in inputs.iter().zip(result) {
                    if let Some(gi) = gi {
                        accumulate(grads, v, gi);
                    }
                }
            }
        }
    }
}

/// Compares reverse-mode and central-difference gradients of a scalar
/// function at `x`. Returns `max |a − n| / max(1, |a|, |n|)` over coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y)?.get_or_zeros(xv, x.numel());

    let eval = |t: Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).data()[0])
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`], but perturbs selected `(parameter, element)`
/// coordinates of a store. `f` receives the bindings from
/// [`Tape::bind_params`].
pub fn grad_check_params<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    f: F,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars = tape.bind_params(store);
    let y = f(&mut tape, &vars)?;
    let grads = tape.backward(y)?;
    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars = tape.bind_params(s);
        let y = f(&mut tape, &vars)?;
        Ok(tape.value(y).data()[0])
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for &(id, i) in coords {
        let analytic = grads.get(vars[id.0]).map_or(0.0, |g| g[i]);
        let original = store.param(id).tensor.data()[i];
        probe.params_mut()[id.0].tensor.data_mut()[i] = original + h;
        let plus = eval(&probe)?;
        probe.params_mut()[id.0].tensor.data_mut()[i] = original - h;
        let minus = eval(&probe)?;
        probe.params_mut()[id.0].tensor.data_mut()[i] = original;
        worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Projects onto fixed pseudo-random weights so the checked scalar
    /// depends on every output entry.
    fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var, TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = tape.value(v);
        let w = Tensor::new(
            t.shape().to_vec(),
            (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let w = tape.constant(w);
        let p = tape.mul(v, w)?;
        Ok(tape.sum(p))
    }

    #[test]
    fn scatter_mean_examples() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(2, 1, vec![2.0, 4.0]).unwrap());
        let m = tape.scatter_mean(v, &[0, 0], 1).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0]);

        let v = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let m = tape.scatter_mean(v, &[1], 3).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 1.0, 0.0]);

        assert!(matches!(
            tape.scatter_mean(v, &[3], 3),
            Err(TensorError::IndexOutOfRange { index: 3, .. })
        ));
        assert!(matches!(
            tape.scatter_mean(v, &[0, 1], 3),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn scatter_mean_gradient_is_inverse_count() {
        // Three edges: two land on node 0, one on node 2.
        let x = Tensor::matrix(3, 1, vec![0.3, -1.2, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone().with_requires_grad(true));
        let m = tape.scatter_mean(v, &[0, 0, 2], 3).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[0.5, 0.5, 1.0]);
        // Central differences agree.
        let err = grad_check(
            |t, v| {
                let m = t.scatter_mean(v, &[0, 0, 2], 3)?;
                Ok(t.sum(m))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn elu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap());
        let y = tape.elu(x);
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 1.0);
        assert!((d[2] - (-0.6321205588285577)).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_normalizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 50, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::filled(vec![4], 1.0));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let (y, _) = tape.batch_norm_train(xv, g, b).unwrap();
        let d = tape.value(y).data();
        let xd = tape.value(xv).data().to_vec();
        let moments = |data: &[f64], j: usize| {
            let col: Vec<f64> = (0..50).map(|r| data[r * 4 + j]).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            (mean, col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0)
        };
        for j in 0..4 {
            let (mean, var) = moments(d, j);
            let (_, var_x) = moments(&xd, j);
            assert!(mean.abs() < 1e-12);
            assert!((var - var_x / (var_x + BN_EPS)).abs() < 1e-12, "{var}");
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_training_rescales() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_matrix(&mut rng, 20, 5);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.dropout(xv, 0.1, false, &mut rng).unwrap();
        assert_eq!(y, xv);
        assert_eq!(tape.value(y).data(), x.data());
        let y = tape.dropout(xv, 0.5, true, &mut rng).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(x.data()) {
            assert!(*o == 0.0 || *o == 2.0 * i);
        }
        assert!(tape.dropout(xv, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn l1_examples() {
        let mut tape = Tape::new();
        let t = Tensor::matrix(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        let a = tape.constant(t.clone());
        let b = tape.constant(t.clone());
        let l = tape.l1_loss(a, b).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        let shifted = tape.constant(Tensor::matrix(3, 1, t.data().iter().map(|v| v + 1.0).collect()).unwrap());
        let l = tape.l1_loss(shifted, b).unwrap();
        assert_eq!(tape.value(l).data(), &[1.0]);
        let e = tape.constant(Tensor::zeros(vec![0, 1]));
        assert!(matches!(tape.l1_loss(e, e), Err(TensorError::EmptyInput { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(vec![2]).with_requires_grad(true));
        assert!(matches!(tape.backward(v), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_l1_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target = rand_matrix(&mut rng, 6, 2);
        let x = Tensor::matrix(
            6,
            2,
            target
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + if i % 2 == 0 { 0.3 } else { -0.2 })
                .collect(),
        )
        .unwrap();
        let err = grad_check(
            |t, v| {
                let c = t.constant(target.clone());
                t.l1_loss(v, c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_matrix(&mut rng, 5, 3);
        let w = rand_matrix(&mut rng, 3, 4);
        let bias = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.05]).unwrap();
        let other = rand_matrix(&mut rng, 5, 2);

        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var, TensorError>>)> = vec![
            ("matmul_left", Box::new(|t, v| {
                let w = t.constant(w.clone());
                let y = t.matmul(v, w)?;
                project(t, y, 1)
            })),
            ("add_row_elu", Box::new(|t, v| {
                let w = t.constant(w.clone());
                let b = t.constant(bias.clone());
                let y = t.matmul(v, w)?;
                let y = t.add_row(y, b)?;
                let y = t.elu(y);
                project(t, y, 2)
            })),
            ("concat_scatter", Box::new(|t, v| {
                let o = t.constant(other.clone());
                let c = t.concat(&[v, o, v])?;
                let m = t.scatter_mean(c, &[0, 1, 1, 3, 1], 4)?;
                let s = t.scatter_sum(c, &[2, 2, 0, 0, 1], 3)?;
                let a = project(t, m, 3)?;
                let b = project(t, s, 4)?;
                t.add(a, b)
            })),
            ("batch_norm_train", Box::new(|t, v| {
                let g = t.constant(Tensor::new(vec![3], vec![1.5, 0.7, -0.4])?);
                let b = t.constant(Tensor::new(vec![3], vec![0.1, 0.0, 0.2])?);
                let (y, _) = t.batch_norm_train(v, g, b)?;
                project(t, y, 5)
            })),
            ("batch_norm_eval", Box::new(|t, v| {
                let g = t.constant(Tensor::new(vec![3], vec![1.5, 0.7, -0.4])?);
                let b = t.constant(Tensor::new(vec![3], vec![0.1, 0.0, 0.2])?);
                let y = t.batch_norm_eval(v, g, b, &[0.1, -0.1, 0.0], &[0.5, 2.0, 1.0])?;
                project(t, y, 6)
            })),
            ("dropout_fixed_mask", Box::new(|t, v| {
                let mut r = ChaCha8Rng::seed_from_u64(9);
                let y = t.dropout(v, 0.3, true, &mut r)?;
                project(t, y, 7)
            })),
            ("reshape_sub_scale", Box::new(|t, v| {
                let r = t.reshape(v, vec![3, 5])?;
                let r2 = t.scale(r, -2.5);
                let d = t.sub(r, r2)?;
                project(t, d, 8)
            })),
        ];
        for (name, f) in cases {
            let err = grad_check(&*f, &x, 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
        // Gradient w.r.t. the right operand of matmul and batch-norm affine terms.
        let err = grad_check(
            |t, wv| {
                let xv = t.constant(x.clone());
                let y = t.matmul(xv, wv)?;
                project(t, y, 10)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |t, g| {
                let xv = t.constant(x.clone());
                let b = t.constant(Tensor::zeros(vec![3]));
                let (y, _) = t.batch_norm_train(xv, g, b)?;
                project(t, y, 11)
            },
            &Tensor::new(vec![3], vec![0.5, 1.0, 2.0]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn matmul_grad_check_random_shapes(r in 1usize..6, k in 1usize..6, c in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_matrix(&mut rng, r, k);
            let w = rand_matrix(&mut rng, k, c);
            let err = grad_check(|t, v| {
                let w = t.constant(w.clone());
                let y = t.matmul(v, w)?;
                let y = t.elu(y);
                project(t, y, seed)
            }, &x, 1e-5).unwrap();
            prop_assert!(err < 1e-4);
        }
    }
}
