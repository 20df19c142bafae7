//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value and the inputs needed by
//! its backward rule. Node ids increase monotonically, so the node vector is
//! already in topological order and [`Tape::backward`] walks it once in reverse.

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::logistic;
use crate::tensor::{axis_split, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
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
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Elu(Var),
    ClampMin(Var, T),
    LogSumExp { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Pad { x: Var, pads: Vec<(usize, usize)> },
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, geom: ConvGeometry },
    ConvTranspose { x: Var, k: Var, geom: ConvGeometry },
    AddBias { x: Var, b: Var },
    AddItemBias { x: Var, b: Var },
    GatherRows { table: Var, ids: Vec<usize> },
    MulConst { x: Var, c: Tensor<T> },
    MulRowConst { x: Var, c: Vec<T> },
    Sum(Var),
    BinLogMass { x: Vec<T>, mu: Var, log_s: Var },
    Pick { x: Var, idx: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Single-threaded; one tape per worker.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every differentiable leaf.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf; `None` for constants and non-leaf nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter or probed input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let elems = x.elems().iter().zip(y.elems()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), elems)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut out = vec![T::zero(); t.numel()];
        T::sigmoid_slice(t.elems(), &mut out);
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("sigmoid", v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, logistic::softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    /// ELU with unit slope parameter.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut out = vec![T::zero(); t.numel()];
        T::elu_slice(t.elems(), &mut out);
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("elu", v, Op::Elu(x), &[x])
    }

    /// `max(x, min)` elementwise; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, min: T) -> Result<Var> {
        self.unary("clamp_min", x, |v| v.max(min), Op::ClampMin(x, min))
    }

    /// Reduces `axis` by a max-shifted log-sum-exp. The axis is removed.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("logsumexp", format!("axis {axis} of {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let xs = t.elems();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| xs[(o * len + l) * inner + i];
                let m = (0..len).map(at).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|l| (at(l) - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        self.push("logsumexp", Tensor::from_parts(shape, out), Op::LogSumExp { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("log_softmax", format!("axis {axis} of {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let xs = t.elems();
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| xs[idx(l)]).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|l| (xs[idx(l)] - m).exp()).sum();
                let lse = m + s.ln();
                for l in 0..len {
                    out[idx(l)] = xs[idx(l)] - lse;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.push("log_softmax", Tensor::from_parts(shape, out), Op::LogSoftmax { x, axis }, &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.elems()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, full, inner) = axis_split(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&t.elems()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push("slice", Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, &[x])
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        if axis >= self.value(x).rank() || total != self.shape(x)[axis] {
            return Err(Error::shape("split", format!("{sizes:?} on axis {axis} of {:?}", self.shape(x))));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Zero padding with explicit `(before, after)` amounts per axis.
    pub fn pad(&mut self, x: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(x);
        if pads.len() != t.rank() {
            return Err(Error::shape("pad", format!("{} pads for rank {}", pads.len(), t.rank())));
        }
        let out_shape: Vec<usize> = t.shape().iter().zip(pads).map(|(&d, &(a, b))| d + a + b).collect();
        let mut out = Tensor::zeros(out_shape.clone());
        copy_box(t.elems(), t.shape(), out.elems_mut(), &out_shape, pads, false);
        self.push(
            "pad",
            out,
            Op::Pad {
                x,
                pads: pads.to_vec(),
            },
            &[x],
        )
    }

    /// `x @ w (+ b)` over the last axis of `x`; `w: [cin, cout]`, `b: [cout]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (cin, cout) = match *self.shape(w) {
            [cin, cout] => (cin, cout),
            ref s => return Err(Error::shape("dense", format!("weight shape {s:?}"))),
        };
        if xs.last() != Some(&cin) {
            return Err(Error::shape("dense", format!("input {xs:?} vs weight [{cin}, {cout}]")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("dense", format!("bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / cin.max(1);
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            let bias = self.value(b).elems();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bias);
            }
        }
        gemm_nn(rows, cin, cout, self.value(x).elems(), self.value(w).elems(), T::one(), &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("dense", Tensor::from_parts(shape, out), Op::Dense { x, w, b }, &inputs)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, geom: ConvGeometry) -> Result<Var> {
        let y = conv::conv2d(self.value(x), self.value(k), &geom)?;
        self.push("conv2d", y, Op::Conv2d { x, k, geom }, &[x, k])
    }

    /// Exact adjoint of [`Tape::conv2d`] with the same kernel and geometry.
    pub fn conv2d_transpose(&mut self, x: Var, k: Var, geom: ConvGeometry) -> Result<Var> {
        let y = conv::conv2d_transpose(self.value(x), self.value(k), &geom)?;
        self.push("conv2d_transpose", y, Op::ConvTranspose { x, k, geom }, &[x, k])
    }

    /// Adds `b: [c]` to every position of the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(Error::shape("add_bias", format!("{:?} vs {:?}", self.shape(b), self.shape(x))));
        }
        let bias = self.value(b).elems().to_vec();
        let mut out = self.value(x).clone();
        for row in out.elems_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&bias) {
                *v = *v + bv;
            }
        }
        self.push("add_bias", out, Op::AddBias { x, b }, &[x, b])
    }

    /// Adds a per-item channel vector `b: [n, c]` to `x: [n, .., c]`.
    pub fn add_item_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], *xs.last().unwrap());
        if self.shape(b) != [n, c] {
            return Err(Error::shape("add_item_bias", format!("{:?} vs {xs:?}", self.shape(b))));
        }
        let per_item = self.value(x).numel() / n.max(1);
        let bias = self.value(b).elems().to_vec();
        let mut out = self.value(x).clone();
        for (item, chunk) in out.elems_mut().chunks_mut(per_item).enumerate() {
            let bi = &bias[item * c..(item + 1) * c];
            for row in chunk.chunks_mut(c) {
                for (v, &bv) in row.iter_mut().zip(bi) {
                    *v = *v + bv;
                }
            }
        }
        self.push("add_item_bias", out, Op::AddItemBias { x, b }, &[x, b])
    }

    /// Selects rows of `table: [v, c]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = match *self.shape(table) {
            [r, c] => (r, c),
            ref s => return Err(Error::shape("gather_rows", format!("table {s:?}"))),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Invalid(format!("row {bad} out of range for {rows} rows")));
        }
        let t = self.value(table).elems();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), c], out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Multiplies by a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", self.shape(x), c.shape())));
        }
        let v = {
            let t = self.value(x);
            let e = t.elems().iter().zip(c.elems()).map(|(&a, &b)| a * b).collect();
            Tensor::from_parts(t.shape().to_vec(), e)
        };
        self.push("mul_const", v, Op::MulConst { x, c }, &[x])
    }

    /// Applies a pre-drawn dropout mask (already scaled by `1/(1-rate)`).
    pub fn dropout_mask_apply(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        self.mul_const(x, mask)
    }

    /// Scales each row of the last axis by a constant factor: `x[r, :] * c[r]`.
    pub fn mul_row_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().unwrap_or(&1);
        if t.numel() != c.len() * cols {
            return Err(Error::shape("mul_row_const", format!("{} factors for {:?}", c.len(), t.shape())));
        }
        let mut out = t.clone();
        for (row, &f) in out.elems_mut().chunks_mut(cols).zip(&c) {
            for v in row {
                *v = *v * f;
            }
        }
        self.push("mul_row_const", out, Op::MulRowConst { x, c }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Log-mass of the unit bin around integer `x` (0..=255) under a logistic
    /// with location `mu` and log-scale `log_s`; bins 0 and 255 absorb the tails.
    pub fn bin_log_mass(&mut self, x: Vec<T>, mu: Var, log_s: Var) -> Result<Var> {
        self.same_shape("bin_log_mass", mu, log_s)?;
        if x.len() != self.value(mu).numel() {
            return Err(Error::shape("bin_log_mass", format!("{} values for {:?}", x.len(), self.shape(mu))));
        }
        let out = {
            let (m, s) = (self.value(mu).elems(), self.value(log_s).elems());
            let e = x
                .iter()
                .zip(m.iter().zip(s))
                .map(|(&xv, (&mv, &sv))| logistic::log_bin_mass(xv, mv, sv))
                .collect();
            Tensor::from_parts(self.shape(mu).to_vec(), e)
        };
        self.push("bin_log_mass", out, Op::BinLogMass { x, mu, log_s }, &[mu, log_s])
    }

    /// `out[r] = x[r, idx[r]]` over the last axis.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().unwrap_or(&1);
        if t.numel() != idx.len() * cols || idx.iter().any(|&i| i >= cols) {
            return Err(Error::shape("pick", format!("{} indices for {:?}", idx.len(), t.shape())));
        }
        let e = idx.iter().enumerate().map(|(r, &i)| t.elems()[r * cols + i]).collect();
        let shape = t.shape()[..t.rank() - 1].to_vec();
        self.push("pick", Tensor::from_parts(shape, e), Op::Pick { x, idx }, &[x])
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Every differentiable leaf gets a gradient; leaves the root does not
    /// depend on get exact zeros.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), T::one()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }

        for (id, node) in self.nodes.iter().enumerate() {
            let is_param = matches!(node.op, Op::Leaf) && node.needs_grad;
            if !is_param {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let map_g = |f: &dyn Fn(usize, T) -> T| -> Tensor<T> {
            let e = g.elems().iter().enumerate().map(|(i, &gv)| f(i, gv)).collect();
            Tensor::from_parts(g.shape().to_vec(), e)
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).elems(), self.value(*b).elems());
                if self.needs(*a) {
                    acc(*a, map_g(&|i, gv| gv * bv[i]));
                }
                if self.needs(*b) {
                    acc(*b, map_g(&|i, gv| gv * av[i]));
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * *c)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Sigmoid(x) => {
                let ys = y.elems();
                acc(*x, map_g(&|i, gv| gv * ys[i] * (T::one() - ys[i])));
            }
            Op::Tanh(x) => {
                let ys = y.elems();
                acc(*x, map_g(&|i, gv| gv * (T::one() - ys[i] * ys[i])));
            }
            Op::Softplus(x) => {
                let xs = self.value(*x).elems();
                acc(*x, map_g(&|i, gv| gv * logistic::sigmoid(xs[i])));
            }
            Op::Exp(x) => {
                let ys = y.elems();
                acc(*x, map_g(&|i, gv| gv * ys[i]));
            }
            Op::Log(x) => {
                let xs = self.value(*x).elems();
                acc(*x, map_g(&|i, gv| gv / xs[i]));
            }
            Op::Elu(x) => {
                let xs = self.value(*x).elems();
                let ys = y.elems();
                acc(
                    *x,
                    map_g(&|i, gv| if xs[i] > T::zero() { gv } else { gv * (ys[i] + T::one()) }),
                );
            }
            Op::ClampMin(x, min) => {
                let xs = self.value(*x).elems();
                acc(*x, map_g(&|i, gv| if xs[i] > *min { gv } else { T::zero() }));
            }
            Op::LogSumExp { x, axis } => {
                let xt = self.value(*x);
                let (outer, len, inner) = axis_split(xt.shape(), *axis);
                let mut gx = vec![T::zero(); xt.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for l in 0..len {
                            let at = (o * len + l) * inner + i;
                            gx[at] = g.elems()[r] * (xt.elems()[at] - y.elems()[r]).exp();
                        }
                    }
                }
                acc(*x, Tensor::from_parts(xt.shape().to_vec(), gx));
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut gx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let gs: T = (0..len).map(|l| g.elems()[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = g.elems()[idx(l)] - y.elems()[idx(l)].exp() * gs;
                        }
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut start = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    let len = s[*axis];
                    if self.needs(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            part.extend_from_slice(&g.elems()[base..base + len * inner]);
                        }
                        acc(v, Tensor::from_parts(s.to_vec(), part));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, full, inner) = axis_split(xs, *axis);
                let len = y.shape()[*axis];
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g.elems()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Tensor::from_parts(xs.to_vec(), gx));
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x).to_vec())?),
            Op::Pad { x, pads } => {
                let xs = self.shape(*x).to_vec();
                let mut gx = Tensor::zeros(xs.clone());
                copy_box(g.elems(), g.shape(), gx.elems_mut(), &xs, pads, true);
                acc(*x, gx);
            }
            Op::Dense { x, w, b } => {
                let wt = self.value(*w);
                let (cin, cout) = (wt.shape()[0], wt.shape()[1]);
                let xt = self.value(*x);
                let rows = xt.numel() / cin.max(1);
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); rows * cin];
                    gemm_nt(rows, cout, cin, g.elems(), wt.elems(), T::zero(), &mut gx);
                    acc(*x, Tensor::from_parts(xt.shape().to_vec(), gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); cin * cout];
                    gemm_tn(cin, rows, cout, xt.elems(), g.elems(), T::zero(), &mut gw);
                    acc(*w, Tensor::from_parts(vec![cin, cout], gw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        acc(*b, column_sums(g.elems(), cout));
                    }
                }
            }
            Op::Conv2d { x, k, geom } => {
                let xt = self.value(*x);
                if self.needs(*x) {
                    let (h, w) = (xt.shape()[1], xt.shape()[2]);
                    acc(*x, conv::conv2d_input_grad(g, self.value(*k), geom, (h, w))?);
                }
                if self.needs(*k) {
                    acc(*k, conv::conv2d_kernel_grad(xt, g, geom)?);
                }
            }
            Op::ConvTranspose { x, k, geom } => {
                if self.needs(*x) {
                    acc(*x, conv::conv2d(g, self.value(*k), geom)?);
                }
                if self.needs(*k) {
                    acc(*k, conv::conv2d_kernel_grad(g, self.value(*x), geom)?);
                }
            }
            Op::AddBias { x, b } => {
                acc(*x, g.clone());
                if self.needs(*b) {
                    acc(*b, column_sums(g.elems(), self.shape(*b)[0]));
                }
            }
            Op::AddItemBias { x, b } => {
                acc(*x, g.clone());
                if self.needs(*b) {
                    let (n, c) = (self.shape(*b)[0], self.shape(*b)[1]);
                    let per_item = g.numel() / n.max(1);
                    let mut gb = Vec::with_capacity(n * c);
                    for chunk in g.elems().chunks(per_item) {
                        gb.extend_from_slice(column_sums(chunk, c).elems());
                    }
                    acc(*b, Tensor::from_parts(vec![n, c], gb));
                }
            }
            Op::GatherRows { table, ids } => {
                let ts = self.shape(*table).to_vec();
                let c = ts[1];
                let mut gt = Tensor::zeros(ts);
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut gt.elems_mut()[i * c..(i + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(&g.elems()[r * c..(r + 1) * c]) {
                        *d = *d + v;
                    }
                }
                acc(*table, gt);
            }
            Op::MulConst { x, c } => acc(*x, map_g(&|i, gv| gv * c.elems()[i])),
            Op::MulRowConst { x, c } => {
                let cols = *g.shape().last().unwrap_or(&1);
                acc(*x, map_g(&|i, gv| gv * c[i / cols]));
            }
            Op::Sum(x) => {
                let gv = g.elems()[0];
                acc(*x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::BinLogMass { x, mu, log_s } => {
                let (m, s) = (self.value(*mu).elems(), self.value(*log_s).elems());
                let mut gmu = Vec::with_capacity(x.len());
                let mut gls = Vec::with_capacity(x.len());
                for (i, &gv) in g.elems().iter().enumerate() {
                    let (dmu, dls) = logistic::log_bin_mass_grad(x[i], m[i], s[i]);
                    gmu.push(gv * dmu);
                    gls.push(gv * dls);
                }
                let shape = self.shape(*mu).to_vec();
                acc(*mu, Tensor::from_parts(shape.clone(), gmu));
                acc(*log_s, Tensor::from_parts(shape, gls));
            }
            Op::Pick { x, idx } => {
                let xs = self.shape(*x).to_vec();
                let cols = *xs.last().unwrap_or(&1);
                let mut gx = Tensor::zeros(xs);
                for (r, (&i, &gv)) in idx.iter().zip(g.elems()).enumerate() {
                    gx.elems_mut()[r * cols + i] = gv;
                }
                acc(*x, gx);
            }
        }
        Ok(())
    }
}

fn column_sums<T: Scalar>(g: &[T], cols: usize) -> Tensor<T> {
    let mut s = vec![T::zero(); cols];
    for row in g.chunks(cols) {
        for (a, &v) in s.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    Tensor::from_parts(vec![cols], s)
}

/// Copies between a small box and a padded box. `crop = false` writes `src`
/// into the interior of `dst`; `crop = true` reads the interior of `src` into `dst`.
fn copy_box<T: Scalar>(
    src: &[T],
    src_shape: &[usize],
    dst: &mut [T],
    dst_shape: &[usize],
    pads: &[(usize, usize)],
    crop: bool,
) {
    let (small, big) = if crop { (dst_shape, src_shape) } else { (src_shape, dst_shape) };
    let rank = small.len();
    if rank == 0 {
        dst[0] = src[0];
        return;
    }
    let inner = small[rank - 1];
    let rows: usize = small[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for r in 0..rows {
        let mut off = 0;
        for d in 0..rank - 1 {
            off = off * big[d] + idx[d] + pads[d].0;
        }
        off = off * big[rank - 1] + pads[rank - 1].0;
        let small_off = r * inner;
        if crop {
            dst[small_off..small_off + inner].copy_from_slice(&src[off..off + inner]);
        } else {
            dst[off..off + inner].copy_from_slice(&src[small_off..small_off + inner]);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < small[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
