//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node whose parents all have smaller indices, so walking the node list
//! backwards is a reverse topological order.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input (`None` when the input receives
    /// no gradient).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Gelu(Var),
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    CrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<Option<usize>>, classes: usize },
    Normalize { a: Var, xhat: Vec<T>, inv_std: Vec<T>, width: usize },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceRows { a: Var, start: usize, row_len: usize },
    SliceCols { a: Var, start: usize, width: usize, cols: usize },
    ConcatRows(Vec<Var>),
    ConcatCols { parts: Vec<Var>, widths: Vec<usize> },
    Outer { a: Var, b: Var, z: usize, v: usize, n: usize },
    Conv1dCausal { x: Var, kernel: Var, len: usize, width: usize, channels: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the node received no gradient.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Output shape under trailing-suffix broadcasting.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(a.to_vec());
    }
    if nb == 1 || (b.len() <= a.len() && a.ends_with(b)) {
        return Ok(a.to_vec());
    }
    if na == 1 || (a.len() <= b.len() && b.ends_with(a)) {
        return Ok(b.to_vec());
    }
    Err(Error::dim(op, a, b))
}

fn reduce_to<T: Scalar>(grad: &[T], n: usize) -> Vec<T> {
    if grad.len() == n {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for (i, &g) in grad.iter().enumerate() {
        out[i % n] += g;
    }
    out
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Trainable input: gradients flow into it.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let (da, db) = (va.data(), vb.data());
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|i| f(da[i % da.len()], db[i % db.len()]))
            .collect();
        Ok(self.push(Tensor::new(shape, data)?, op, &[a, b]))
    }

    /// Elementwise sum. The operand with fewer elements broadcasts when its
    /// shape is a trailing suffix of the other's (or it holds one element).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise difference; broadcasts like [`Tape::add`].
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product; broadcasts like [`Tape::add`].
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2().map_err(|_| Error::dim("matmul", va.shape(), vb.shape()))?;
        let (k2, n) = vb.dims2().map_err(|_| Error::dim("matmul", va.shape(), vb.shape()))?;
        if k != k2 {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        }
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = va.dims2()?;
        let d = va.data();
        let out = Tensor::from_fn(&[cols, rows], |i| d[(i % rows) * cols + i / rows]);
        Ok(self.push(out, Op::Transpose { a, rows, cols }, &[a]))
    }

    /// `x·w + b` with `x: [R×I]`, `w: [I×O]`, optional `b: [O]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op, &[a])
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Ln(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `x·σ(x)`.
    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape();
        if axis >= shape.len() {
            return Err(Error::Parameter(format!("softmax axis {axis} for shape {shape:?}")));
        }
        if !va.is_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = va.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { a, outer, len, inner }, &[a]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [B×C]`. `None` targets are masked out; if every row is masked
    /// the loss is zero.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, classes) = vl.dims2()?;
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", vl.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(Error::Index {
                what: "cross-entropy classes",
                index: bad,
                bound: classes,
            });
        }
        if !vl.is_finite() {
            return Err(Error::NonFinite("cross_entropy logits"));
        }
        let x = vl.data();
        let mut probs = vec![T::zero(); x.len()];
        let mut loss = T::zero();
        let mut count = 0usize;
        for r in 0..rows {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + total.ln();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
            if let Some(t) = targets[r] {
                loss += lse - row[t];
                count += 1;
            }
        }
        if count > 0 {
            loss /= T::of(count as f64);
        }
        let op = Op::CrossEntropy {
            logits,
            probs,
            targets: targets.to_vec(),
            classes,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Zero-mean, unit-variance normalization over the trailing axis.
    pub fn normalize(&self, a: Var, eps: T) -> Var {
        let va = self.value(a);
        let width = va.last_dim();
        let rows = va.numel() / width;
        let x = va.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let w = T::of(width as f64);
        for r in 0..rows {
            let row = &x[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<T>() / w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / w;
            let s = T::one() / (var + eps).sqrt();
            inv_std[r] = s;
            for c in 0..width {
                xhat[r * width + c] = (row[c] - mean) * s;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), xhat.clone()).expect("same shape");
        self.push(out, Op::Normalize { a, xhat, inv_std, width }, &[a])
    }

    /// Layer normalization with affine `gamma`, `beta` over the trailing axis.
    pub fn layer_norm(&self, a: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let n = self.normalize(a, eps);
        let scaled = self.mul(n, gamma)?;
        self.add(scaled, beta)
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.sum() / T::of(va.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = (*self.value(a)).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Rows `start..start+count` along the leading axis.
    pub fn slice_rows(&self, a: Var, start: usize, count: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape();
        if count == 0 || start + count > shape[0] {
            return Err(Error::Index {
                what: "slice_rows",
                index: start + count,
                bound: shape[0],
            });
        }
        let row_len = va.numel() / shape[0];
        let data = va.data()[start * row_len..(start + count) * row_len].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = count;
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SliceRows { a, start, row_len }, &[a]))
    }

    /// Columns `start..start+width` of a 2-D tensor.
    pub fn slice_cols(&self, a: Var, start: usize, width: usize) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = va.dims2()?;
        if width == 0 || start + width > cols {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + width,
                bound: cols,
            });
        }
        let d = va.data();
        let out = Tensor::from_fn(&[rows, width], |i| d[(i / width) * cols + start + i % width]);
        Ok(self.push(out, Op::SliceCols { a, start, width, cols }, &[a]))
    }

    /// Stacks along the leading axis; trailing extents must agree.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Invalid("empty concat".into()))?);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != first[1..] {
                return Err(Error::dim("concat_rows", &first, v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first.clone();
        shape[0] = rows;
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins 2-D tensors side by side; row counts must agree.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values.first().ok_or_else(|| Error::Invalid("empty concat".into()))?;
        let rows = first.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(Error::dim("concat_cols", first.shape(), v.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let op = Op::ConcatCols {
            parts: parts.to_vec(),
            widths,
        };
        Ok(self.push(Tensor::new(vec![rows, total], data)?, op, parts))
    }

    /// Per-row outer product: `a: [Z×V]`, `b: [Z×N]` → `[Z×V×N]`.
    pub fn outer(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (z, v) = va.dims2()?;
        let (z2, n) = vb.dims2()?;
        if z != z2 {
            return Err(Error::dim("outer", va.shape(), vb.shape()));
        }
        let (da, db) = (va.data(), vb.data());
        let out = Tensor::from_fn(&[z, v, n], |i| {
            let (zi, rest) = (i / (v * n), i % (v * n));
            da[zi * v + rest / n] * db[zi * n + rest % n]
        });
        Ok(self.push(out, Op::Outer { a, b, z, v, n }, &[a, b]))
    }

    /// Depthwise causal convolution: `x: [T×D]`, `kernel: [W×D]`,
    /// `out[t,d] = Σ_w kernel[w,d]·x[t−w,d]` with zero left padding.
    pub fn conv1d_causal(&self, x: Var, kernel: Var) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let (len, channels) = vx.dims2()?;
        let (width, kc) = vk.dims2()?;
        if kc != channels {
            return Err(Error::dim("conv1d_causal", vx.shape(), vk.shape()));
        }
        let out = conv1d_causal_raw(vx.data(), vk.data(), len, width, channels);
        let op = Op::Conv1dCausal {
            x,
            kernel,
            len,
            width,
            channels,
        };
        Ok(self.push(Tensor::new(vec![len, channels], out)?, op, &[x, kernel]))
    }

    /// Records an externally computed value with a custom backward rule.
    pub fn custom(&self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Backpropagates from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        let n = self.value(out).numel();
        if n != 1 {
            return Err(Error::dim("backward (scalar output expected)", &self.shape(out), &[1]));
        }
        self.backward_with(out, vec![T::one()])
    }

    /// Backpropagates an arbitrary seed gradient from `out`.
    pub fn backward_with(&self, out: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if seed.len() != nodes[out.0].value.numel() {
            return Err(Error::dim("backward seed", nodes[out.0].value.shape(), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.requires_grad {
                for (parent, pg) in backward_node(&nodes, node, &g) {
                    if nodes[parent.0].requires_grad {
                        accumulate(&mut grads[parent.0], pg);
                    }
                }
            }
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

pub(crate) fn conv1d_causal_raw<T: Scalar>(
    x: &[T],
    k: &[T],
    len: usize,
    width: usize,
    channels: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); len * channels];
    for t in 0..len {
        let orow = &mut out[t * channels..(t + 1) * channels];
        for w in 0..width.min(t + 1) {
            let xrow = &x[(t - w) * channels..(t - w + 1) * channels];
            let krow = &k[w * channels..(w + 1) * channels];
            for ((o, &xv), &kv) in orow.iter_mut().zip(xrow).zip(krow) {
                *o += kv * xv;
            }
        }
    }
    out
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let val = |v: Var| nodes[v.0].value.as_ref();
    let out = node.value.data();
    let elementwise = |a: Var, f: &dyn Fn(T, T) -> T| -> Vec<(Var, Vec<T>)> {
        let x = val(a).data();
        vec![(a, x.iter().zip(out).zip(g).map(|((&x, &y), &g)| g * f(x, y)).collect())]
    };
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to(g, val(*a).numel())),
            (*b, reduce_to(g, val(*b).numel())),
        ],
        Op::Sub(a, b) => {
            let neg: Vec<T> = g.iter().map(|&x| -x).collect();
            vec![
                (*a, reduce_to(g, val(*a).numel())),
                (*b, reduce_to(&neg, val(*b).numel())),
            ]
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(*a).data(), val(*b).data());
            let ga: Vec<T> = g.iter().enumerate().map(|(i, &x)| x * db[i % db.len()]).collect();
            let gb: Vec<T> = g.iter().enumerate().map(|(i, &x)| x * da[i % da.len()]).collect();
            vec![(*a, reduce_to(&ga, da.len())), (*b, reduce_to(&gb, db.len()))]
        }
        Op::Scale(a, c) => vec![(*a, g.iter().map(|&x| x * *c).collect())],
        Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Matmul { a, b, m, k, n } => {
            let ga = matmul_nt_raw(g, val(*b).data(), *m, *k, *n);
            let gb = matmul_tn_raw(val(*a).data(), g, *m, *k, *n);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Transpose { a, rows, cols } => {
            // g is [cols×rows]
            let mut ga = vec![T::zero(); rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    ga[r * cols + c] = g[c * rows + r];
                }
            }
            vec![(*a, ga)]
        }
        Op::Exp(a) => elementwise(*a, &|_, y| y),
        Op::Ln(a) => elementwise(*a, &|x, _| T::one() / x),
        Op::Tanh(a) => elementwise(*a, &|_, y| T::one() - y * y),
        Op::Sigmoid(a) => elementwise(*a, &|_, y| y * (T::one() - y)),
        Op::Silu(a) => elementwise(*a, &|x, _| {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }),
        Op::Softplus(a) => elementwise(*a, &|x, _| sigmoid(x)),
        Op::Gelu(a) => elementwise(*a, &|x, _| gelu_grad(x)),
        Op::Softmax { a, outer, len, inner } => {
            let mut ga = vec![T::zero(); g.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..*len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                    for j in 0..*len {
                        ga[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            vec![(*a, ga)]
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            classes,
        } => {
            let count = targets.iter().flatten().count();
            let mut gl = vec![T::zero(); probs.len()];
            if count > 0 {
                let s = g[0] / T::of(count as f64);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for c in 0..*classes {
                            gl[r * classes + c] = s * probs[r * classes + c];
                        }
                        gl[r * classes + t] -= s;
                    }
                }
            }
            vec![(*logits, gl)]
        }
        Op::Normalize {
            a,
            xhat,
            inv_std,
            width,
        } => {
            let w = T::of(*width as f64);
            let mut ga = vec![T::zero(); g.len()];
            for (r, &s) in inv_std.iter().enumerate() {
                let range = r * width..(r + 1) * width;
                let (gr, xr) = (&g[range.clone()], &xhat[range.clone()]);
                let mg = gr.iter().copied().sum::<T>() / w;
                let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / w;
                for c in 0..*width {
                    ga[r * width + c] = s * (gr[c] - mg - xr[c] * mgx);
                }
            }
            vec![(*a, ga)]
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
        Op::Mean(a) => {
            let n = val(*a).numel();
            vec![(*a, vec![g[0] / T::of(n as f64); n])]
        }
        Op::SliceRows { a, start, row_len } => {
            let mut ga = vec![T::zero(); val(*a).numel()];
            ga[start * row_len..start * row_len + g.len()].copy_from_slice(g);
            vec![(*a, ga)]
        }
        Op::SliceCols {
            a,
            start,
            width,
            cols,
        } => {
            let rows = g.len() / width;
            let mut ga = vec![T::zero(); rows * cols];
            for r in 0..rows {
                ga[r * cols + start..r * cols + start + width]
                    .copy_from_slice(&g[r * width..(r + 1) * width]);
            }
            vec![(*a, ga)]
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let n = val(p).numel();
                    let piece = g[offset..offset + n].to_vec();
                    offset += n;
                    (p, piece)
                })
                .collect()
        }
        Op::ConcatCols { parts, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            parts
                .iter()
                .zip(widths)
                .map(|(&p, &w)| {
                    let mut piece = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        piece.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    (p, piece)
                })
                .collect()
        }
        Op::Outer { a, b, z, v, n } => {
            let (da, db) = (val(*a).data(), val(*b).data());
            let mut ga = vec![T::zero(); z * v];
            let mut gb = vec![T::zero(); z * n];
            for zi in 0..*z {
                for vi in 0..*v {
                    for ni in 0..*n {
                        let gv = g[(zi * v + vi) * n + ni];
                        ga[zi * v + vi] += gv * db[zi * n + ni];
                        gb[zi * n + ni] += gv * da[zi * v + vi];
                    }
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Conv1dCausal {
            x,
            kernel,
            len,
            width,
            channels,
        } => {
            let (dx, dk) = (val(*x).data(), val(*kernel).data());
            let c = *channels;
            let mut gx = vec![T::zero(); dx.len()];
            let mut gk = vec![T::zero(); dk.len()];
            for t in 0..*len {
                for w in 0..(*width).min(t + 1) {
                    for ch in 0..c {
                        let gv = g[t * c + ch];
                        gx[(t - w) * c + ch] += dk[w * c + ch] * gv;
                        gk[w * c + ch] += dx[(t - w) * c + ch] * gv;
                    }
                }
            }
            vec![(*x, gx), (*kernel, gk)]
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
            op.backward(&ins, &node.value, g)
                .into_iter()
                .zip(inputs)
                .filter_map(|(gi, &v)| gi.map(|gi| (v, gi)))
                .collect()
        }
    }
}
