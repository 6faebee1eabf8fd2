//! Tape-based reverse mode with differentiable backward passes.
//!
//! Every vector-Jacobian product is itself written in terms of graph ops, so a
//! backward pass run with `create_graph` leaves a tape that can be
//! differentiated again (double backprop, Hessian-vector products).

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Activation used by a guided-backprop site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GuidedAct {
    Relu,
    Softplus(f64),
    Identity,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    SafeRecip(usize),
    Mask(usize, Rc<Vec<f64>>),
    Softplus(usize, f64),
    Sigmoid(usize, f64),
    Guided(usize, GuidedAct),
    Sum(usize),
    Expand(usize),
    SumRows(usize),
    ExpandRows(usize),
    MulRows(usize, usize),
    ChannelSum(usize),
    ChannelExpand(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Conv(usize, usize, ConvGeom),
    ConvDx(usize, usize, ConvGeom),
    ConvDw(usize, usize, ConvGeom),
    Gather(usize, Rc<Vec<usize>>),
    ScatterAdd(usize, Rc<Vec<usize>>),
    LogSoftmax(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    /// History contains a gradient produced without higher-order mode.
    detached_grad: bool,
}

/// An append-only tape. Nodes only ever reference earlier nodes.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
    stored: Cell<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Options for [`Graph::grad`].
#[derive(Clone, Copy, Debug, Default)]
pub struct GradOptions {
    /// Record the backward pass so the returned gradients are differentiable.
    pub create_graph: bool,
    /// Return zeros for inputs the output does not depend on.
    pub allow_unused: bool,
}

impl GradOptions {
    pub fn higher_order() -> Self {
        Self { create_graph: true, allow_unused: false }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn bad_shape(op: &'static str, t: &Tensor, reason: &str) -> Error {
    Error::InvalidShape { op, shape: t.shape().to_vec(), reason: reason.to_string() }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: Cell::new(true), stored: Cell::new(0) }
    }

    /// A differentiable leaf (parameter or input we take gradients against).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, self.recording.get(), false)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `f64` values held by the tape, a proxy for peak memory.
    pub fn stored_values(&self) -> usize {
        self.stored.get()
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool, detached_grad: bool) -> Var<'_> {
        self.stored.set(self.stored.get() + value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad, detached_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let (req, det) = {
            let nodes = self.nodes.borrow();
            let req = self.recording.get() && inputs.iter().any(|&i| nodes[i].requires_grad);
            let det = inputs.iter().any(|&i| nodes[i].detached_grad);
            (req, det)
        };
        let op = if req { op } else { Op::Leaf };
        self.push_raw(value, op, req, det)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        std::ptr::eq(v.graph, self) && v.id < self.len()
    }

    /// Gradients of a single-element `output` with respect to `wrt`.
    ///
    /// With `create_graph` the backward pass is recorded, so the returned
    /// gradients can themselves be differentiated. Without it the results are
    /// marked as detached; differentiating through them later fails with
    /// [`Error::HigherOrderRequired`] rather than silently returning zeros.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>], opts: GradOptions) -> Result<Vec<Var<'g>>> {
        if !self.owns(&output) {
            return Err(Error::ForeignNode(output.id));
        }
        for w in wrt {
            if !self.owns(w) {
                return Err(Error::ForeignNode(w.id));
            }
        }
        let out_val = output.value();
        if out_val.len() != 1 {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        let lowest = wrt.iter().map(|v| v.id).min().unwrap_or(output.id);
        let mut adj: Vec<Option<usize>> = vec![None; output.id + 1];

        let prev = self.recording.get();
        if !opts.create_graph {
            self.recording.set(false);
        }
        let result = (|| -> Result<()> {
            if self.nodes.borrow()[output.id].requires_grad {
                let seed = self.constant(Tensor::full(out_val.shape(), 1.0));
                adj[output.id] = Some(seed.id);
            }
            for id in (lowest..=output.id).rev() {
                let Some(gid) = adj[id] else { continue };
                let (op, req) = {
                    let nodes = self.nodes.borrow();
                    (nodes[id].op.clone(), nodes[id].requires_grad)
                };
                if !req {
                    continue;
                }
                let contribs = self.vjp(&op, id, self.var(gid))?;
                for (input, c) in contribs {
                    adj[input] = Some(match adj[input] {
                        None => c.id,
                        Some(prev) => self.var(prev).add(c)?.id,
                    });
                }
            }
            Ok(())
        })();
        self.recording.set(prev);
        result?;

        let out_detached = self.nodes.borrow()[output.id].detached_grad;
        let mut grads = Vec::with_capacity(wrt.len());
        for w in wrt {
            let g = match adj[w.id] {
                Some(gid) => self.var(gid),
                None if opts.allow_unused => self.constant(Tensor::zeros(w.value().shape())),
                None if out_detached => return Err(Error::HigherOrderRequired(w.id)),
                None => return Err(Error::Unreachable(w.id)),
            };
            grads.push(if opts.create_graph {
                g
            } else {
                let v = (*g.value()).clone();
                self.push_raw(v, Op::Leaf, false, true)
            });
        }
        Ok(grads)
    }

    /// Plain gradient values, no higher-order tape.
    pub fn backward<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Tensor>> {
        let gs = self.grad(output, wrt, GradOptions::default())?;
        Ok(gs.iter().map(|g| (*g.value()).clone()).collect())
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Input adjoints for node `id` given its upstream adjoint `g`.
    fn vjp<'g>(&'g self, op: &Op, id: usize, g: Var<'g>) -> Result<Vec<(usize, Var<'g>)>> {
        let v = |i: usize| self.var(i);
        let y = v(id);
        let mut out = Vec::with_capacity(2);
        macro_rules! emit {
            ($i:expr, $e:expr) => {
                if self.needs($i) {
                    out.push(($i, $e));
                }
            };
        }
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit!(a, g);
                emit!(b, g);
            }
            Op::Sub(a, b) => {
                emit!(a, g);
                emit!(b, g.neg());
            }
            Op::Mul(a, b) => {
                emit!(a, g.mul(v(b))?);
                emit!(b, g.mul(v(a))?);
            }
            Op::Div(a, b) => {
                emit!(a, g.div(v(b))?);
                emit!(b, g.mul(y)?.div(v(b))?.neg());
            }
            Op::Neg(a) => emit!(a, g.neg()),
            Op::Scale(a, s) => emit!(a, g.scale(s)),
            Op::AddScalar(a) => emit!(a, g),
            Op::Exp(a) => emit!(a, g.mul(y)?),
            Op::Log(a) => emit!(a, g.div(v(a))?),
            Op::Sqrt(a) => emit!(a, g.mul(y.safe_recip())?.scale(0.5)),
            Op::SafeRecip(a) => emit!(a, g.mul(y)?.mul(y)?.neg()),
            Op::Mask(a, ref m) => emit!(a, g.mask_rc(Rc::clone(m))?),
            Op::Softplus(a, beta) => emit!(a, g.mul(v(a).sigmoid(beta))?),
            Op::Sigmoid(a, beta) => {
                let one_minus = y.neg().add_scalar(1.0);
                emit!(a, g.mul(y)?.mul(one_minus)?.scale(beta));
            }
            Op::Guided(a, act) => {
                let open = v(a).value().map(|z| if z > 0.0 { 1.0 } else { 0.0 });
                let gated = g.relu().mask(open)?;
                let local = match act {
                    GuidedAct::Relu | GuidedAct::Identity => gated,
                    GuidedAct::Softplus(beta) => gated.mul(v(a).sigmoid(beta))?,
                };
                emit!(a, local);
            }
            Op::Sum(a) => emit!(a, g.expand(v(a).value().shape())?),
            Op::Expand(a) => emit!(a, g.sum().reshape(v(a).value().shape())?),
            Op::SumRows(a) => emit!(a, g.expand_rows(v(a).value().shape())?),
            Op::ExpandRows(a) => emit!(a, g.sum_rows()),
            Op::MulRows(a, s) => {
                emit!(a, g.mul_rows(v(s))?);
                emit!(s, g.mul(v(a))?.sum_rows());
            }
            Op::ChannelSum(a) => emit!(a, g.channel_expand(v(a).value().shape())?),
            Op::ChannelExpand(a) => emit!(a, g.channel_sum()?),
            Op::MatMul(a, b) => {
                emit!(a, g.matmul(v(b).t()?)?);
                emit!(b, v(a).t()?.matmul(g)?);
            }
            Op::Transpose(a) => emit!(a, g.t()?),
            Op::Reshape(a) => emit!(a, g.reshape(v(a).value().shape())?),
            Op::Conv(x, w, geom) => {
                emit!(x, g.conv2d_dx(v(w), geom)?);
                emit!(w, v(x).conv2d_dw(g, geom)?);
            }
            Op::ConvDx(gy, w, geom) => {
                emit!(gy, g.conv2d_geom(v(w), geom)?);
                emit!(w, g.conv2d_dw(v(gy), geom)?);
            }
            Op::ConvDw(x, gy, geom) => {
                emit!(x, v(gy).conv2d_dx(g, geom)?);
                emit!(gy, v(x).conv2d_geom(g, geom)?);
            }
            Op::Gather(a, ref idx) => {
                emit!(a, g.scatter_add(Rc::clone(idx), v(a).value().shape())?)
            }
            Op::ScatterAdd(a, ref idx) => {
                emit!(a, g.gather(Rc::clone(idx), v(a).value().shape())?)
            }
            Op::LogSoftmax(a) => {
                let soft = y.exp();
                let total = g.sum_rows().expand_rows(y.value().shape())?;
                emit!(a, g.sub(soft.mul(total)?)?);
            }
        }
        Ok(out)
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value; panics on multi-element nodes.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    /// Same value, cut from the history.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, &[self.id])
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, &[self.id, other.id])
    }

    fn same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::ForeignNode(other.id))
        }
    }

    fn elementwise(
        &self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, &a, &b));
        }
        let out = a.zip_map(&b, f)?;
        Ok(self.binary(other, out, op))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(self.value().map(|v| -v), Op::Neg(self.id))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary(self.value().scale(s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        self.unary(self.value().map(|v| v + s), Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(self.value().map(f64::ln), Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(self.value().map(f64::sqrt), Op::Sqrt(self.id))
    }

    /// `1/v`, defined as 0 where `v == 0`.
    pub fn safe_recip(&self) -> Var<'g> {
        let out = self.value().map(|v| if v == 0.0 { 0.0 } else { 1.0 / v });
        self.unary(out, Op::SafeRecip(self.id))
    }

    /// Elementwise product with a constant tensor.
    pub fn mask(&self, m: Tensor) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() != m.shape() {
            return Err(mismatch("mask", &a, &m));
        }
        self.mask_rc(Rc::new(m.into_data()))
    }

    fn mask_rc(&self, m: Rc<Vec<f64>>) -> Result<Var<'g>> {
        let a = self.value();
        if a.len() != m.len() {
            return Err(bad_shape("mask", &a, "mask length differs"));
        }
        let data = a.data().iter().zip(m.iter()).map(|(x, k)| x * k).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.unary(out, Op::Mask(self.id, m)))
    }

    pub fn relu(&self) -> Var<'g> {
        let a = self.value();
        let m: Vec<f64> = a.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        self.mask_rc(Rc::new(m)).expect("mask built from own shape")
    }

    pub fn softplus(&self, beta: f64) -> Var<'g> {
        self.unary(self.value().map(|v| kernels::softplus(v, beta)), Op::Softplus(self.id, beta))
    }

    /// `sigmoid(beta * v)`, the derivative of `softplus(beta)`.
    pub fn sigmoid(&self, beta: f64) -> Var<'g> {
        self.unary(self.value().map(|v| kernels::sigmoid(beta * v)), Op::Sigmoid(self.id, beta))
    }

    /// Activation whose backward pass applies the guided-backprop gating:
    /// upstream gradient clipped at zero and pre-activation required positive.
    pub fn guided(&self, act: GuidedAct) -> Var<'g> {
        let out = match act {
            GuidedAct::Relu => self.value().map(|v| v.max(0.0)),
            GuidedAct::Softplus(beta) => self.value().map(|v| kernels::softplus(v, beta)),
            GuidedAct::Identity => (*self.value()).clone(),
        };
        self.unary(out, Op::Guided(self.id, act))
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&self) -> Var<'g> {
        self.unary(Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcast a single-element node to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.len() != 1 {
            return Err(bad_shape("expand", &a, "expected a single element"));
        }
        Ok(self.unary(Tensor::full(shape, a.data()[0]), Op::Expand(self.id)))
    }

    /// Per-row sums over all trailing axes: `[B, ...] -> [B]`.
    pub fn sum_rows(&self) -> Var<'g> {
        let a = self.value();
        let rows = a.rows();
        let data = (0..rows).map(|r| a.row(r).iter().sum()).collect();
        self.unary(Tensor::from_parts(vec![rows], data), Op::SumRows(self.id))
    }

    /// `[B] -> shape` with `shape[0] == B`, repeating each entry across its row.
    pub fn expand_rows(&self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.ndim() != 1 || shape.first() != Some(&a.len()) {
            return Err(Error::ShapeMismatch { op: "expand_rows", lhs: a.shape().to_vec(), rhs: shape.to_vec() });
        }
        let per: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(a.len() * per);
        for &v in a.data() {
            data.extend(std::iter::repeat(v).take(per));
        }
        Ok(self.unary(Tensor::from_parts(shape.to_vec(), data), Op::ExpandRows(self.id)))
    }

    /// Scales row `i` of `[B, ...]` by `s[i]`.
    pub fn mul_rows(&self, s: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&s)?;
        let (a, sv) = (self.value(), s.value());
        if sv.ndim() != 1 || a.rows() != sv.len() || a.ndim() == 0 {
            return Err(mismatch("mul_rows", &a, &sv));
        }
        let per = a.row_len();
        let data = a.data().iter().enumerate().map(|(i, x)| x * sv.data()[i / per]).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.binary(s, out, Op::MulRows(self.id, s.id)))
    }

    /// `[B, C, ...] -> [C]` summing batch and trailing axes.
    pub fn channel_sum(&self) -> Result<Var<'g>> {
        let a = self.value();
        if a.ndim() < 2 {
            return Err(bad_shape("channel_sum", &a, "need at least [batch, channels]"));
        }
        let (b, c) = (a.shape()[0], a.shape()[1]);
        let inner: usize = a.shape()[2..].iter().product();
        let mut out = vec![0.0; c];
        for bi in 0..b {
            for (ci, o) in out.iter_mut().enumerate() {
                let start = (bi * c + ci) * inner;
                *o += a.data()[start..start + inner].iter().sum::<f64>();
            }
        }
        Ok(self.unary(Tensor::from_parts(vec![c], out), Op::ChannelSum(self.id)))
    }

    /// `[C] -> shape` with `shape[1] == C`.
    pub fn channel_expand(&self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.ndim() != 1 || shape.len() < 2 || shape[1] != a.len() {
            return Err(Error::ShapeMismatch { op: "channel_expand", lhs: a.shape().to_vec(), rhs: shape.to_vec() });
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut data = Vec::with_capacity(b * c * inner);
        for _ in 0..b {
            for &v in a.data() {
                data.extend(std::iter::repeat(v).take(inner));
            }
        }
        Ok(self.unary(Tensor::from_parts(shape.to_vec(), data), Op::ChannelExpand(self.id)))
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", &a, &b));
        }
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::from_parts(vec![n, m], kernels::matmul(a.data(), b.data(), n, k, m));
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    pub fn t(&self) -> Result<Var<'g>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(bad_shape("transpose", &a, "expected a matrix"));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let out = Tensor::from_parts(vec![c, r], kernels::transpose(a.data(), r, c));
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// `[B, ...] -> [B, prod(...)]`
    pub fn flatten(&self) -> Result<Var<'g>> {
        let a = self.value();
        self.reshape(&[a.rows(), a.row_len()])
    }

    /// Stride-1 convolution with symmetric zero padding.
    /// `x: [B, C, H, W]`, `w: [O, C, K, K]`.
    pub fn conv2d(&self, w: Var<'g>, pad: usize) -> Result<Var<'g>> {
        self.same_graph(&w)?;
        let (x, wv) = (self.value(), w.value());
        if x.ndim() != 4 || wv.ndim() != 4 || x.shape()[1] != wv.shape()[1] || wv.shape()[2] != wv.shape()[3] {
            return Err(mismatch("conv2d", &x, &wv));
        }
        let geom = ConvGeom {
            batch: x.shape()[0],
            in_ch: x.shape()[1],
            out_ch: wv.shape()[0],
            in_h: x.shape()[2],
            in_w: x.shape()[3],
            kernel: wv.shape()[2],
            pad,
        };
        if geom.in_h + 2 * pad < geom.kernel || geom.in_w + 2 * pad < geom.kernel {
            return Err(mismatch("conv2d", &x, &wv));
        }
        self.conv2d_geom(w, geom)
    }

    fn conv2d_geom(&self, w: Var<'g>, geom: ConvGeom) -> Result<Var<'g>> {
        let (x, wv) = (self.value(), w.value());
        if x.len() != geom.x_len() || wv.len() != geom.w_len() {
            return Err(mismatch("conv2d", &x, &wv));
        }
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let out = Tensor::from_parts(shape, kernels::conv2d(x.data(), wv.data(), &geom));
        Ok(self.binary(w, out, Op::Conv(self.id, w.id, geom)))
    }

    /// Input-adjoint of a convolution: `self` is the output gradient.
    pub fn conv2d_dx(&self, w: Var<'g>, geom: ConvGeom) -> Result<Var<'g>> {
        self.same_graph(&w)?;
        let (gy, wv) = (self.value(), w.value());
        if gy.len() != geom.y_len() || wv.len() != geom.w_len() {
            return Err(mismatch("conv2d_dx", &gy, &wv));
        }
        let shape = vec![geom.batch, geom.in_ch, geom.in_h, geom.in_w];
        let out = Tensor::from_parts(shape, kernels::conv2d_dx(gy.data(), wv.data(), &geom));
        Ok(self.binary(w, out, Op::ConvDx(self.id, w.id, geom)))
    }

    /// Weight-adjoint of a convolution: `self` is the input, `gy` the output gradient.
    pub fn conv2d_dw(&self, gy: Var<'g>, geom: ConvGeom) -> Result<Var<'g>> {
        self.same_graph(&gy)?;
        let (x, g) = (self.value(), gy.value());
        if x.len() != geom.x_len() || g.len() != geom.y_len() {
            return Err(mismatch("conv2d_dw", &x, &g));
        }
        let shape = vec![geom.out_ch, geom.in_ch, geom.kernel, geom.kernel];
        let out = Tensor::from_parts(shape, kernels::conv2d_dw(x.data(), g.data(), &geom));
        Ok(self.binary(gy, out, Op::ConvDw(self.id, gy.id, geom)))
    }

    /// `out[i] = self[idx[i]]`, reshaped to `shape`.
    pub fn gather(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if shape.iter().product::<usize>() != idx.len() || idx.iter().any(|&i| i >= a.len()) {
            return Err(bad_shape("gather", &a, "index out of range or output shape mismatch"));
        }
        let data = idx.iter().map(|&i| a.data()[i]).collect();
        Ok(self.unary(Tensor::from_parts(shape.to_vec(), data), Op::Gather(self.id, idx)))
    }

    /// `out[idx[i]] += self[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let n: usize = shape.iter().product();
        if a.len() != idx.len() || idx.iter().any(|&i| i >= n) {
            return Err(bad_shape("scatter_add", &a, "index out of range or length mismatch"));
        }
        let mut data = vec![0.0; n];
        for (&i, &v) in idx.iter().zip(a.data()) {
            data[i] += v;
        }
        Ok(self.unary(Tensor::from_parts(shape.to_vec(), data), Op::ScatterAdd(self.id, idx)))
    }

    /// Non-overlapping `size x size` max pooling on `[B, C, H, W]`.
    /// Ties route to the first maximal element in row-major window order.
    pub fn maxpool2d(&self, size: usize) -> Result<Var<'g>> {
        let a = self.value();
        if a.ndim() != 4 || size == 0 || a.shape()[2] < size || a.shape()[3] < size {
            return Err(bad_shape("maxpool2d", &a, "expected [B, C, H, W] with H, W >= pool size"));
        }
        let (b, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
        let (oh, ow) = (h / size, w / size);
        let idx = kernels::maxpool_argmax(a.data(), b * c, h, w, size);
        self.gather(Rc::new(idx), &[b, c, oh, ow])
    }

    /// Row-wise log-softmax on `[B, C]`.
    pub fn log_softmax(&self) -> Result<Var<'g>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(bad_shape("log_softmax", &a, "expected [B, C]"));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let out = Tensor::from_parts(vec![r, c], kernels::log_softmax(a.data(), r, c));
        Ok(self.unary(out, Op::LogSoftmax(self.id)))
    }

    pub fn softmax(&self) -> Result<Var<'g>> {
        Ok(self.log_softmax()?.exp())
    }

    /// Full inner product, shape `[]`.
    pub fn dot(&self, other: Var<'g>) -> Result<Var<'g>> {
        Ok(self.mul(other)?.sum())
    }

    /// Euclidean norm of all elements, shape `[]`.
    pub fn l2norm(&self) -> Var<'g> {
        self.mul(*self).expect("same shape").sum().sqrt()
    }

    /// Per-row inner products of two `[B, ...]` nodes.
    pub fn row_dot(&self, other: Var<'g>) -> Result<Var<'g>> {
        Ok(self.mul(other)?.sum_rows())
    }

    /// Per-row Euclidean norms of `[B, ...]`.
    pub fn row_norm(&self) -> Var<'g> {
        self.mul(*self).expect("same shape").sum_rows().sqrt()
    }

    /// Selects `self[b, cols[b]]` from `[B, C]`, giving `[B]`.
    pub fn pick(&self, cols: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.ndim() != 2 || a.shape()[0] != cols.len() || cols.iter().any(|&c| c >= a.shape()[1]) {
            return Err(bad_shape("pick", &a, "expected [B, C] and one in-range column per row"));
        }
        let c = a.shape()[1];
        let idx: Vec<usize> = cols.iter().enumerate().map(|(b, &k)| b * c + k).collect();
        self.gather(Rc::new(idx), &[cols.len()])
    }
}
