//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and the operands needed for the vector-Jacobian product. Nodes are only
//! ever appended, so node order is a topological order and [`Graph::backward`]
//! is a single reverse sweep.

use std::fmt;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{self, axis_blocks, reduce_to_shape, zip_broadcast, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Vector-Jacobian product for [`Graph::custom_unary`]: `(input, upstream) -> input grad`.
pub type VjpFn = Box<dyn Fn(&Tensor, &Tensor) -> Tensor + Send + Sync>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    BroadcastTo(Var),
    Reshape(Var),
    Sum(Var, usize),
    Mean(Var, usize),
    Softmax(Var, usize),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f64),
    Concat(Vec<Var>, usize),
    StraightThrough(Var),
    Custom(Var, VjpFn),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax(..) => "softmax",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::StraightThrough(..) => "straight_through",
            Op::Custom(..) => "custom",
        };
        f.write_str(name)
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax along `axis` of a plain tensor, max-shifted.
pub fn softmax_tensor(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_blocks(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

fn sum_axis_tensor(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_blocks(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out).expect("shape derived from input")
}

/// Inverse of [`sum_axis_tensor`]'s reduction: repeats `g` `n` times along a re-inserted axis.
fn expand_axis(g: &Tensor, axis: usize, n: usize, scale: f64) -> Tensor {
    let mut shape = g.shape().to_vec();
    shape.insert(axis, n);
    let (outer, _, inner) = axis_blocks(&shape, axis);
    let src = g.data();
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for j in 0..n {
            let dst = &mut out[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, s) in dst.iter_mut().zip(&src[o * inner..(o + 1) * inner]) {
                *d = s * scale;
            }
        }
    }
    Tensor::new(shape, out).expect("shape derived from gradient")
}

/// Batched matmul dimensions: (batch, m, n, p, rhs_is_batched).
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    let mismatch = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok((1, a[0], a[1], b[1], false)),
        (3, 2) if a[2] == b[0] => Ok((a[0], a[1], a[2], b[1], false)),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Ok((a[0], a[1], a[2], b[2], true)),
        _ => Err(mismatch()),
    }
}

fn matmul_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, n, p, rhs_batched) = matmul_dims(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; batch * m * p];
    for bi in 0..batch {
        let a_blk = &ad[bi * m * n..(bi + 1) * m * n];
        let b_blk = if rhs_batched {
            &bd[bi * n * p..(bi + 1) * n * p]
        } else {
            bd
        };
        let o_blk = &mut out[bi * m * p..(bi + 1) * m * p];
        for i in 0..m {
            let o_row = &mut o_blk[i * p..(i + 1) * p];
            for l in 0..n {
                let av = a_blk[i * n + l];
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in o_row.iter_mut().zip(&b_blk[l * p..(l + 1) * p]) {
                    *o += av * bv;
                }
            }
        }
    }
    let mut shape = a.shape()[..a.rank() - 1].to_vec();
    shape.push(p);
    Tensor::new(shape, out)
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (batch, m, n, p, rhs_batched) = matmul_dims(a.shape(), b.shape()).expect("checked in forward");
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    for bi in 0..batch {
        let a_blk = &ad[bi * m * n..(bi + 1) * m * n];
        let g_blk = &gd[bi * m * p..(bi + 1) * m * p];
        let b_off = if rhs_batched { bi * n * p } else { 0 };
        let b_blk = &bd[b_off..b_off + n * p];
        // dA = dC · Bᵀ
        let ga_blk = &mut ga[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let g_row = &g_blk[i * p..(i + 1) * p];
            for l in 0..n {
                let b_row = &b_blk[l * p..(l + 1) * p];
                ga_blk[i * n + l] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        // dB = Aᵀ · dC
        let gb_blk = &mut gb[b_off..b_off + n * p];
        for i in 0..m {
            let g_row = &g_blk[i * p..(i + 1) * p];
            for l in 0..n {
                let av = a_blk[i * n + l];
                if av == 0.0 {
                    continue;
                }
                for (o, gv) in gb_blk[l * p..(l + 1) * p].iter_mut().zip(g_row) {
                    *o += av * gv;
                }
            }
        }
    }
    (
        Tensor::new(a.shape().to_vec(), ga).expect("shape of lhs"),
        Tensor::new(b.shape().to_vec(), gb).expect("shape of rhs"),
    )
}

fn scale_tensor(t: &Tensor, c: f64) -> Tensor {
    t.map(|v| v * c)
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::fault(format!("{op:?} produced a non-finite value")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a named entry of `store` as a trainable leaf.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let value = store
            .value(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?
            .clone();
        let v = self.variable(value)?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Parameters bound with [`Graph::param`], in binding order.
    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = zip_broadcast(name, self.value(a), self.value(b), f)?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `[m,n]·[n,p]`, `[B,m,n]·[n,p]` or `[B,m,n]·[B,n,p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_tensor(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = tensor::broadcast_to(self.value(x), shape)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::BroadcastTo(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "{op}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(())
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let value = sum_axis_tensor(self.value(x), axis);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x, axis), rg)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let n = self.shape(x)[axis];
        if n == 0 {
            return Err(Error::invalid("mean over an empty axis"));
        }
        let value = scale_tensor(&sum_axis_tensor(self.value(x), axis), 1.0 / n as f64);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean(x, axis), rg)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        if self.shape(x)[axis] == 0 {
            return Err(Error::invalid("softmax over an empty axis"));
        }
        let value = softmax_tensor(self.value(x), axis);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Softmax(x, axis), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, softplus_scalar, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                let d = self.value(x).data();
                data.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(xs);
        self.push(value, Op::Concat(xs.to_vec(), axis), rg)
    }

    /// Forward value is `hard`; the gradient passes unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: hard.shape().to_vec(),
                rhs: self.shape(soft).to_vec(),
            });
        }
        let rg = self.any_grad(&[soft]);
        self.push(hard, Op::StraightThrough(soft), rg)
    }

    /// Elementwise op with a caller-supplied VJP. Used by the gradient checker's own tests.
    pub fn custom_unary(&mut self, x: Var, forward: impl Fn(f64) -> f64, vjp: VjpFn) -> Result<Var> {
        self.unary(x, forward, Op::Custom(x, vjp))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |v: Var, contrib: Tensor| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, reduce_to_shape(g, self.shape(*a)));
                send(*b, reduce_to_shape(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to_shape(g, self.shape(*a)));
                send(*b, scale_tensor(&reduce_to_shape(g, self.shape(*b)), -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = zip_broadcast("mul", g, bv, |x, y| x * y)?;
                    send(*a, reduce_to_shape(&ga, av.shape()));
                }
                if self.requires_grad(*b) {
                    let gb = zip_broadcast("mul", g, av, |x, y| x * y)?;
                    send(*b, reduce_to_shape(&gb, bv.shape()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = zip_broadcast("div", g, bv, |x, y| x / y)?;
                    send(*a, reduce_to_shape(&ga, av.shape()));
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -out/b
                    let t = zip_broadcast("div", g, &node.value, |x, y| -x * y)?;
                    let gb = zip_broadcast("div", &t, bv, |x, y| x / y)?;
                    send(*b, reduce_to_shape(&gb, bv.shape()));
                }
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(self.value(*a), self.value(*b), g);
                send(*a, ga);
                send(*b, gb);
            }
            Op::BroadcastTo(x) => send(*x, reduce_to_shape(g, self.shape(*x))),
            Op::Reshape(x) => send(*x, g.reshape(self.shape(*x))?),
            Op::Sum(x, axis) => send(*x, expand_axis(g, *axis, self.shape(*x)[*axis], 1.0)),
            Op::Mean(x, axis) => {
                let n = self.shape(*x)[*axis];
                send(*x, expand_axis(g, *axis, n, 1.0 / n as f64));
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let gy = zip_broadcast("softmax", g, y, |a, b| a * b)?;
                let dot = expand_axis(&sum_axis_tensor(&gy, *axis), *axis, y.shape()[*axis], 1.0);
                let centered = zip_broadcast("softmax", g, &dot, |a, b| a - b)?;
                send(*x, zip_broadcast("softmax", &centered, y, |a, b| a * b)?);
            }
            Op::Softplus(x) => {
                let gx = zip_broadcast("softplus", g, self.value(*x), |gv, xv| gv * sigmoid_scalar(xv))?;
                send(*x, gx);
            }
            Op::Sigmoid(x) => {
                send(*x, zip_broadcast("sigmoid", g, &node.value, |gv, y| gv * y * (1.0 - y))?);
            }
            Op::Tanh(x) => {
                send(*x, zip_broadcast("tanh", g, &node.value, |gv, y| gv * (1.0 - y * y))?);
            }
            Op::Exp(x) => send(*x, zip_broadcast("exp", g, &node.value, |gv, y| gv * y)?),
            Op::Log(x) => send(*x, zip_broadcast("log", g, self.value(*x), |gv, xv| gv / xv)?),
            Op::Scale(x, c) => send(*x, scale_tensor(g, *c)),
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_blocks(g.shape(), *axis);
                let mut start = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    let mut data = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let from = (o * total + start) * inner;
                        data.extend_from_slice(&g.data()[from..from + n * inner]);
                    }
                    send(x, Tensor::new(self.shape(x).to_vec(), data)?);
                    start += n;
                }
            }
            Op::StraightThrough(soft) => send(*soft, g.clone()),
            Op::Custom(x, vjp) => {
                let gx = vjp(self.value(*x), g);
                if gx.shape() != self.shape(*x) {
                    return Err(Error::Shape {
                        op: "custom vjp",
                        lhs: gx.shape().to_vec(),
                        rhs: self.shape(*x).to_vec(),
                    });
                }
                send(*x, gx);
            }
        }
        Ok(())
    }

    /// Adds the gradients of every bound parameter into `store`'s grad buffers.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParameterStore) -> Result<()> {
        for (name, v) in &self.params {
            if let Some(g) = grads.get(*v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softplus_of_zero_is_ln2() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0)).unwrap();
        let y = g.softplus(x).unwrap();
        assert!(close(g.value(y).data()[0], std::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        for c in [-50.0, 0.0, 3.25, 700.0] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::full(&[3], c)).unwrap();
            let y = g.softmax(x, 0).unwrap();
            for &v in g.value(y).data() {
                assert!(close(v, 1.0 / 3.0, 1e-15));
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, -4.0, 2.5])).unwrap();
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![0.7, -1.3])).unwrap();
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn detached_edge_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.5, 2.0])).unwrap();
        let d = g.detach(x).unwrap();
        let y = g.mul(d, x).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        // only the non-detached factor contributes: d/dx (c * x) = c
        assert_eq!(grads.get(x).unwrap().data(), &[1.5, 2.0]);
        assert!(grads.get(d).is_none());

        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.5])).unwrap();
        let d = g.detach(x).unwrap();
        let s = g.sum_all(d).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Invalid(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[4])).unwrap();
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
        let msg = g.matmul(a, a).unwrap_err().to_string();
        assert!(msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn non_finite_results_fault() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 1.0])).unwrap();
        assert!(matches!(g.log(x), Err(Error::NumericFault(_))));
        let big = g.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(g.exp(big), Err(Error::NumericFault(_))));
    }

    #[test]
    fn matmul_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64)).unwrap();
        let w = g.constant(Tensor::from_fn(&[4, 5], |i| i as f64 * 0.1)).unwrap();
        let aw = g.matmul(a, w).unwrap();
        assert_eq!(g.shape(aw), &[2, 3, 5]);
        let b = g.constant(Tensor::from_fn(&[2, 4, 2], |i| i as f64)).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        // element [1, 0, 1] = sum_l a[1,0,l] * b[1,l,1]
        let expect: f64 = (0..4)
            .map(|l| g.value(a).get(&[1, 0, l]) * g.value(b).get(&[1, l, 1]))
            .sum();
        assert_eq!(g.value(c).get(&[1, 0, 1]), expect);
    }

    #[test]
    fn concat_and_split_gradient() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::from_fn(&[2, 1], |i| i as f64)).unwrap();
        let b = g.variable(Tensor::from_fn(&[2, 2], |i| 10.0 + i as f64)).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 10.0, 11.0, 1.0, 12.0, 13.0]);
        let w = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64)).unwrap();
        let p = g.mul(c, w).unwrap();
        let s = g.sum_all(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 3.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn straight_through_forwards_hard_and_routes_grad_to_soft() {
        let mut g = Graph::new();
        let soft = g.variable(Tensor::from_vec(vec![0.2, 0.5, 0.3])).unwrap();
        let hard = Tensor::from_vec(vec![0.0, 1.0, 0.0]);
        let st = g.straight_through(hard.clone(), soft).unwrap();
        assert_eq!(g.value(st), &hard);
        let w = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let p = g.mul(st, w).unwrap();
        let s = g.sum_all(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(soft).unwrap().data(), &[1.0, 2.0, 3.0]);
    }
}
