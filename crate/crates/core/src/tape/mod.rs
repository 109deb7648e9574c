//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and the handles of its
//! inputs. [`Tape::backward`] walks the nodes in reverse execution order
//! exactly once and accumulates gradients into every node that requires one.

mod flops;
pub mod kernels;

use alloc::vec;
use alloc::vec::Vec;

pub use flops::{FlopCounter, FlopScope};
pub use kernels::ConvGeom;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed differentiable ops.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    flops: FlopCounter,
    scope: FlopScope,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            flops: FlopCounter::default(),
            scope: FlopScope::Other,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Toggle the finiteness assertion run after every op.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Element count of every non-leaf value currently retained.
    pub fn activation_elements(&self) -> u64 {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.value.numel() as u64)
            .sum()
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    /// Sets the accounting scope for subsequent ops, returning the old one.
    pub fn set_scope(&mut self, scope: FlopScope) -> FlopScope {
        core::mem::replace(&mut self.scope, scope)
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
        name: &'static str,
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).clone(),
                right: self.shape(b).clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).clone(), data);
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    /// `x[.., C] + bias[C]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.shape(x).last();
        if self.shape(bias).dims() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).clone(),
                right: self.shape(bias).clone(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let value = Tensor::from_parts(self.shape(x).clone(), data);
        self.push(value, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).clone(), data);
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let value = Tensor::from_parts(self.shape(x).clone(), data);
        self.push(value, Op::Scale(x, s), &[x], "scale")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = kernels::matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![T::ZERO; m * n];
        kernels::gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        self.flops.add_macs(self.scope, (m * k * n) as u64);
        let value = Tensor::from_parts(Shape::new(&[m, n])?, out);
        self.push(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `x[N, Cin] · w[Cin, Cout] + b[Cout]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                msg: alloc::format!("expected rank 2, got {s}"),
            });
        }
        let (r, c) = (s.dim(0), s.dim(1));
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(src[i * c + j]);
            }
        }
        let value = Tensor::from_parts(Shape::new(&[c, r])?, out);
        self.push(value, Op::Transpose(x), &[x], "transpose")
    }

    /// Per-head product of `[h, m, k]` with `[h, k, n]`, or with `[h, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || Error::ShapeMismatch {
            op: "batch_matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.rank() != 3 || sb.rank() != 3 || sa.dim(0) != sb.dim(0) {
            return Err(bad());
        }
        let (h, m, k) = (sa.dim(0), sa.dim(1), sa.dim(2));
        let n = if trans_b {
            if sb.dim(2) != k {
                return Err(bad());
            }
            sb.dim(1)
        } else {
            if sb.dim(1) != k {
                return Err(bad());
            }
            sb.dim(2)
        };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::ZERO; h * m * n];
        for i in 0..h {
            let (ai, bi) = (
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
            );
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(ai, bi, m, k, n, oi);
            } else {
                kernels::gemm_nn(ai, bi, m, k, n, oi);
            }
        }
        self.flops.add_macs(self.scope, (h * m * k * n) as u64);
        let value = Tensor::from_parts(Shape::new(&[h, m, n])?, out);
        self.push(
            value,
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
            "batch_matmul",
        )
    }

    /// `[N, C]` → `[h, N, C/h]`, head `i` taking channels `i·d .. (i+1)·d`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.rank() != 2 || heads == 0 || !s.dim(1).is_multiple_of(heads) {
            return Err(Error::InvalidShape {
                op: "split_heads",
                msg: alloc::format!("cannot split {s} into {heads} heads"),
            });
        }
        let (n, c) = (s.dim(0), s.dim(1));
        let d = c / heads;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        for hh in 0..heads {
            for t in 0..n {
                out.extend_from_slice(&src[t * c + hh * d..t * c + (hh + 1) * d]);
            }
        }
        let value = Tensor::from_parts(Shape::new(&[heads, n, d])?, out);
        self.push(value, Op::SplitHeads { x, heads }, &[x], "split_heads")
    }

    /// `[h, N, d]` → `[N, h·d]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.rank() != 3 {
            return Err(Error::InvalidShape {
                op: "merge_heads",
                msg: alloc::format!("expected rank 3, got {s}"),
            });
        }
        let (h, n, d) = (s.dim(0), s.dim(1), s.dim(2));
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; n * h * d];
        for hh in 0..h {
            for t in 0..n {
                out[t * h * d + hh * d..t * h * d + (hh + 1) * d]
                    .copy_from_slice(&src[(hh * n + t) * d..(hh * n + t + 1) * d]);
            }
        }
        let value = Tensor::from_parts(Shape::new(&[n, h * d])?, out);
        self.push(value, Op::MergeHeads(x), &[x], "merge_heads")
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(dims)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = kernels::softmax(self.value(x), axis)?;
        self.flops
            .add_normalization(self.scope, 2 * value.numel() as u64);
        self.push(value, Op::Softmax { x, axis }, &[x], "softmax")
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let cols = self.shape(x).last();
        if self.shape(x).rank() == 0
            || self.shape(gamma).dims() != [cols]
            || self.shape(beta).dims() != [cols]
        {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).clone(),
                right: self.shape(gamma).clone(),
            });
        }
        let (y, means, rstds) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            cols,
            eps,
        );
        self.flops.add_normalization(self.scope, 2 * y.len() as u64);
        let value = Tensor::from_parts(self.shape(x).clone(), y);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            means,
            rstds,
        };
        self.push(value, op, &[x, gamma, beta], "layer_norm")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = kernels::gelu_tensor(self.value(x));
        self.push(value, Op::Gelu(x), &[x], "gelu")
    }

    /// Channels-last convolution: `x[H, W, Cin]`, `w[k, k, Cin/groups, Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad, groups)?;
        if self.shape(b).dims() != [geom.c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.shape(w).clone(),
                right: self.shape(b).clone(),
            });
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        self.flops.add_macs(self.scope, geom.macs());
        let value = Tensor::from_parts(Shape::new(&[geom.h_out, geom.w_out, geom.c_out])?, out);
        self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b], "conv2d")
    }

    /// `[N, C]` → `[1, C]` mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "mean_rows",
                msg: alloc::format!("expected rank 2, got {s}"),
            });
        }
        let (n, c) = (s.dim(0), s.dim(1));
        let src = self.value(x).data();
        let inv = T::ONE / T::from_usize(n);
        let mut out = vec![T::ZERO; c];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Tensor::from_parts(Shape::new(&[1, c])?, out);
        self.push(value, Op::MeanRows(x), &[x], "mean_rows")
    }

    /// Stacks rank-2 values with a common column count.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::InvalidShape {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let cols = self.shape(first).last();
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.rank() != 2 || s.dim(1) != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).clone(),
                    right: s.clone(),
                });
            }
            rows += s.dim(0);
            out.extend_from_slice(self.value(x).data());
        }
        let value = Tensor::from_parts(Shape::new(&[rows, cols])?, out);
        self.push(value, Op::ConcatRows(xs.to_vec()), xs, "concat_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x], "sum")
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits[B, K]`, computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.rank() != 2 || s.dim(0) != labels.len() {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                msg: alloc::format!("logits {s} vs {} labels", labels.len()),
            });
        }
        let (b, k) = (s.dim(0), s.dim(1));
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax_forward(x, b, k, 1);
        let mut total = T::ZERO;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(row[0], T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / T::from_usize(b));
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(value, op, &[logits], "cross_entropy")
    }

    /// Populates gradients of the scalar `loss` for every node that
    /// requires one. Shared inputs accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if loss_shape.numel() != 1 || loss_shape.rank() > 1 {
            return Err(Error::NotScalar(loss_shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DetachedLoss);
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            backprop_node(nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        self.grads = grads
            .into_iter()
            .zip(nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().clone(), g))
            })
            .collect();
        Ok(())
    }
}

/// Mutable gradient buffer for `v`, created on first use; `None` when `v`
/// does not require a gradient.
fn slot<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut [T]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![T::ZERO; node.value.numel()])
            .as_mut_slice(),
    )
}

fn accumulate<T: Real>(dst: Option<&mut [T]>, src: impl IntoIterator<Item = T>) {
    if let Some(dst) = dst {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(slot(nodes, grads, *a), g.iter().copied());
            accumulate(slot(nodes, grads, *b), g.iter().copied());
        }
        Op::AddBias(x, bias) => {
            accumulate(slot(nodes, grads, *x), g.iter().copied());
            if let Some(db) = slot(nodes, grads, *bias) {
                let c = db.len();
                for (i, &v) in g.iter().enumerate() {
                    db[i % c] += v;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(
                slot(nodes, grads, *a),
                g.iter().zip(bv).map(|(&g, &b)| g * b),
            );
            accumulate(
                slot(nodes, grads, *b),
                g.iter().zip(av).map(|(&g, &a)| g * a),
            );
        }
        Op::Scale(x, s) => {
            accumulate(slot(nodes, grads, *x), g.iter().map(|&g| g * *s));
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                kernels::gemm_nt(g, bv.data(), m, n, k, da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                kernels::gemm_tn(av.data(), g, k, m, n, db);
            }
        }
        Op::Transpose(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let (r, c) = (val(*x).dims()[0], val(*x).dims()[1]);
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (h, m, k) = (av.dims()[0], av.dims()[1], av.dims()[2]);
            let n = node.value.dims()[2];
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..h {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        kernels::gemm_nn(gi, bi, m, n, k, dai);
                    } else {
                        kernels::gemm_nt(gi, bi, m, n, k, dai);
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for i in 0..h {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        kernels::gemm_tn(gi, ai, n, m, k, dbi);
                    } else {
                        kernels::gemm_tn(ai, gi, k, m, n, dbi);
                    }
                }
            }
        }
        Op::SplitHeads { x, heads } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let (n, c) = (val(*x).dims()[0], val(*x).dims()[1]);
                let d = c / heads;
                for hh in 0..*heads {
                    for t in 0..n {
                        for j in 0..d {
                            dx[t * c + hh * d + j] += g[(hh * n + t) * d + j];
                        }
                    }
                }
            }
        }
        Op::MergeHeads(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let dims = val(*x).dims();
                let (h, n, d) = (dims[0], dims[1], dims[2]);
                for hh in 0..h {
                    for t in 0..n {
                        for j in 0..d {
                            dx[(hh * n + t) * d + j] += g[t * h * d + hh * d + j];
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => {
            accumulate(slot(nodes, grads, *x), g.iter().copied());
        }
        Op::Softmax { x, axis } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                kernels::softmax_backward(node.value.data(), g, outer, len, inner, dx);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            means,
            rstds,
        } => {
            let cols = node.value.shape().last();
            let xv = val(*x).data();
            let gv = val(*gamma).data();
            // Distinct inputs, so at most one of the three slots is borrowed
            // at a time; gather each into an owned buffer first.
            let mut dx = nodes[x.0].requires_grad.then(|| vec![T::ZERO; xv.len()]);
            let mut dg = nodes[gamma.0].requires_grad.then(|| vec![T::ZERO; cols]);
            let mut db = nodes[beta.0].requires_grad.then(|| vec![T::ZERO; cols]);
            kernels::layer_norm_backward(
                xv,
                gv,
                means,
                rstds,
                g,
                cols,
                dx.as_deref_mut(),
                dg.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (v, buf) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                if let Some(buf) = buf {
                    accumulate(slot(nodes, grads, v), buf);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            accumulate(
                slot(nodes, grads, *x),
                g.iter().zip(xv).map(|(&g, &x)| g * kernels::gelu_grad(x)),
            );
        }
        Op::Conv2d { x, w, b, geom } => {
            let (xv, wv) = (val(*x).data(), val(*w).data());
            let mut dx = nodes[x.0].requires_grad.then(|| vec![T::ZERO; xv.len()]);
            let mut dw = nodes[w.0].requires_grad.then(|| vec![T::ZERO; wv.len()]);
            let mut db = nodes[b.0].requires_grad.then(|| vec![T::ZERO; geom.c_out]);
            kernels::conv2d_backward(
                xv,
                wv,
                g,
                geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (v, buf) in [(*x, dx), (*w, dw), (*b, db)] {
                if let Some(buf) = buf {
                    accumulate(slot(nodes, grads, v), buf);
                }
            }
        }
        Op::MeanRows(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let c = g.len();
                let n = dx.len() / c;
                let inv = T::ONE / T::from_usize(n);
                for r in 0..n {
                    for j in 0..c {
                        dx[r * c + j] += g[j] * inv;
                    }
                }
            }
        }
        Op::ConcatRows(xs) => {
            let mut offset = 0;
            for &x in xs {
                let len = val(x).numel();
                accumulate(
                    slot(nodes, grads, x),
                    g[offset..offset + len].iter().copied(),
                );
                offset += len;
            }
        }
        Op::Sum(x) => {
            let g0 = g[0];
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g0);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if let Some(dx) = slot(nodes, grads, *logits) {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / T::from_usize(b);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let target = if j == label { T::ONE } else { T::ZERO };
                        dx[r * k + j] += (probs[r * k + j] - target) * scale;
                    }
                }
            }
        }
    }
}
