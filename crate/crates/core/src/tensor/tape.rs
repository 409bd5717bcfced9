use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, Conv3dGeom, Stencil};
use super::{DType, Tensor};
use crate::consts::NORM_EPS;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Square(usize),
    Huber(usize, f64),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv3d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: Conv3dGeom,
    },
    Spatial {
        input: usize,
        stencil: Arc<Stencil>,
        channels: usize,
    },
    Gather {
        input: usize,
        index: Arc<[usize]>,
    },
    Reshape(usize),
    Concat(Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
    SumLast(usize, usize),
    Normalize {
        input: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    AddBias {
        input: usize,
        bias: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for reverse-mode differentiation.
///
/// Entries are appended in execution order, so every entry's inputs precede
/// it. A tape is single-owner; use one per thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    zero_norms: Cell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar root with respect to every leaf it depends on.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.map.get(&v.id)
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.map.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
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

    /// Number of normalisations that met an all-zero vector since the last reset.
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norms.get()
    }

    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.zero_norms.set(0);
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar root.
    ///
    /// The returned map holds one gradient per leaf created with
    /// [`Tape::leaf`] that the root actually depends on; a constant root
    /// yields an empty map.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        if !root_node.requires_grad {
            return Ok(Gradients::default());
        }
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }

        let map = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| {
                let g = g?;
                let n = &nodes[id];
                Some((id, Tensor::from_parts(n.value.shape().to_vec(), g, n.value.dtype())))
            })
            .collect();
        Ok(Gradients { map })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib),
    }
}

/// Sums a broadcast gradient back to the operand's shape.
fn unbroadcast(g: Vec<f64>, target_len: usize) -> Vec<f64> {
    if target_len == g.len() {
        g
    } else {
        vec![g.iter().sum()]
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| nodes[id].value.data();
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, unbroadcast(g.to_vec(), val(*a).len()));
            accumulate(grads, nodes, *b, unbroadcast(g.to_vec(), val(*b).len()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, unbroadcast(g.to_vec(), val(*a).len()));
            let neg = g.iter().map(|x| -x).collect();
            accumulate(grads, nodes, *b, unbroadcast(neg, val(*b).len()));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
            if nodes[*a].requires_grad {
                let ga = g.iter().enumerate().map(|(i, gi)| gi * pick(bv, i)).collect();
                accumulate(grads, nodes, *a, unbroadcast(ga, av.len()));
            }
            if nodes[*b].requires_grad {
                let gb = g.iter().enumerate().map(|(i, gi)| gi * pick(av, i)).collect();
                accumulate(grads, nodes, *b, unbroadcast(gb, bv.len()));
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.iter().map(|x| x * s).collect()),
        Op::Offset(a) | Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Relu(a) => {
            let x = val(*a);
            let d = g.iter().zip(x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 });
            accumulate(grads, nodes, *a, d.collect());
        }
        Op::Gelu(a) => {
            let x = val(*a);
            let d = g.iter().zip(x).map(|(gi, &xi)| gi * gelu_grad(xi));
            accumulate(grads, nodes, *a, d.collect());
        }
        Op::Exp(a) => {
            let d = g.iter().zip(out).map(|(gi, yi)| gi * yi);
            accumulate(grads, nodes, *a, d.collect());
        }
        Op::Log(a) => {
            let d = g.iter().zip(val(*a)).map(|(gi, xi)| gi / xi);
            accumulate(grads, nodes, *a, d.collect());
        }
        Op::Abs(a) => {
            let d = g.iter().zip(val(*a)).map(|(gi, &xi)| {
                if xi > 0.0 {
                    *gi
                } else if xi < 0.0 {
                    -gi
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, *a, d.collect());
        }
        Op::Square(a) => {
            let d = g.iter().zip(val(*a)).map(|(gi, xi)| 2.0 * gi * xi);
            accumulate(grads, nodes, *a, d.collect());
        }
        Op::Huber(a, delta) => {
            let d = g.iter().zip(val(*a)).map(|(gi, &xi)| {
                if xi.abs() <= *delta {
                    gi * xi
                } else {
                    gi * delta * xi.signum()
                }
            });
            accumulate(grads, nodes, *a, d.collect());
        }
        Op::Matmul { a, b, m, k, n } => {
            if nodes[*a].requires_grad {
                let da = kernels::matmul_grad_a(g, val(*b), *m, *k, *n);
                accumulate(grads, nodes, *a, da);
            }
            if nodes[*b].requires_grad {
                let db = kernels::matmul_grad_b(val(*a), g, *m, *k, *n);
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Conv3d {
            input,
            weight,
            bias,
            geom,
        } => {
            let (di, dw, db) = kernels::conv3d_backward(
                val(*input),
                val(*weight),
                g,
                geom,
                nodes[*input].requires_grad,
                nodes[*weight].requires_grad,
            );
            if let Some(di) = di {
                accumulate(grads, nodes, *input, di);
            }
            if let Some(dw) = dw {
                accumulate(grads, nodes, *weight, dw);
            }
            if let Some(b) = bias {
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Spatial {
            input,
            stencil,
            channels,
        } => accumulate(grads, nodes, *input, stencil.apply_transpose(g, *channels)),
        Op::Gather { input, index } => {
            let mut d = vec![0.0; val(*input).len()];
            for (gi, &src) in g.iter().zip(index.iter()) {
                d[src] += gi;
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(p).len();
                accumulate(grads, nodes, p, g[off..off + len].to_vec());
                off += len;
            }
        }
        Op::SumAll(a) => accumulate(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::MeanAll(a) => {
            let n = val(*a).len();
            accumulate(grads, nodes, *a, vec![g[0] / n as f64; n]);
        }
        Op::SumLast(a, len) => {
            let d = (0..val(*a).len()).map(|i| g[i / len]).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Normalize {
            input,
            outer,
            len,
            inner,
        } => {
            let x = val(*input);
            let mut d = vec![0.0; x.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let ss: f64 = (0..*len).map(|j| x[at(j)] * x[at(j)]).sum();
                    let norm = (ss + NORM_EPS).sqrt();
                    let dot: f64 = (0..*len).map(|j| g[at(j)] * out[at(j)]).sum();
                    for j in 0..*len {
                        d[at(j)] = (g[at(j)] - out[at(j)] * dot) / norm;
                    }
                }
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::Softmax(a, len) => {
            let mut d = vec![0.0; out.len()];
            for r in 0..out.len() / len {
                let s = r * len..(r + 1) * len;
                let dot: f64 = g[s.clone()].iter().zip(&out[s.clone()]).map(|(x, y)| x * y).sum();
                for i in s {
                    d[i] = out[i] * (g[i] - dot);
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::LogSoftmax(a, len) => {
            let mut d = vec![0.0; out.len()];
            for r in 0..out.len() / len {
                let s = r * len..(r + 1) * len;
                let gs: f64 = g[s.clone()].iter().sum();
                for i in s {
                    d[i] = g[i] - out[i].exp() * gs;
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::AddBias {
            input,
            bias,
            outer,
            len,
            inner,
        } => {
            accumulate(grads, nodes, *input, g.to_vec());
            if nodes[*bias].requires_grad {
                let mut db = vec![0.0; *len];
                for o in 0..*outer {
                    for (j, dbj) in db.iter_mut().enumerate() {
                        let s = (o * len + j) * inner;
                        *dbj += g[s..s + inner].iter().sum::<f64>();
                    }
                }
                accumulate(grads, nodes, *bias, db);
            }
        }
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// Arithmetic is fallible on shape mismatch, so std::ops is not implemented.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    /// Scalar value of a one-element var.
    pub fn item(self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.rg(self.id)
    }

    fn same_tape(self, other: Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        self.tape.push(y, op, self.requires_grad())
    }

    fn binary(self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.dtype() != b.dtype() {
            return Err(Error::Contract(format!(
                "{name}: mixed dtypes {:?} and {:?}",
                a.dtype(),
                b.dtype()
            )));
        }
        let (shape, data): (Vec<usize>, Vec<f64>) = if a.shape() == b.shape() {
            let d = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y));
            (a.shape().to_vec(), d.collect())
        } else if b.numel() == 1 {
            let s = b.data()[0];
            (a.shape().to_vec(), a.data().iter().map(|x| f(*x, s)).collect())
        } else if a.numel() == 1 {
            let s = a.data()[0];
            (b.shape().to_vec(), b.data().iter().map(|y| f(s, *y)).collect())
        } else {
            return Err(Error::dim(name, a.shape(), b.shape()));
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::from_parts(shape, data, a.dtype()), op, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |x| x + s)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    /// Elementwise Huber penalty of the values themselves (callers pass a residual).
    pub fn huber(self, delta: f64) -> Var<'t> {
        self.unary(Op::Huber(self.id, delta), move |x| {
            if x.abs() <= delta {
                0.5 * x * x
            } else {
                delta * (x.abs() - 0.5 * delta)
            }
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        if a.dtype() != b.dtype() {
            return Err(Error::Contract("matmul: mixed dtypes".into()));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], data, a.dtype()),
            Op::Matmul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `self` is `[C_in, D, H, W]`, `weight` is `[C_out, C_in, k, k, k]`.
    pub fn conv3d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        let (x, w) = (self.value(), weight.value());
        let geom = Conv3dGeom::new(x.shape(), w.shape(), stride, pad)?;
        let bias_t = match bias {
            Some(b) => {
                self.same_tape(b)?;
                let bt = b.value();
                if bt.shape() != [geom.out_channels] {
                    return Err(Error::dim("conv3d bias", bt.shape(), &[geom.out_channels]));
                }
                Some(bt)
            }
            None => None,
        };
        let data = kernels::conv3d_forward(x.data(), w.data(), bias_t.as_ref().map(|b| b.data()), &geom);
        let [d, h, wd] = geom.out_ext;
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            Tensor::from_parts(vec![geom.out_channels, d, h, wd], data, x.dtype()),
            Op::Conv3d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    /// Applies a spatial stencil to every channel of `[C, ...spatial]`.
    /// The output has shape `[C, ..out_spatial]`.
    pub fn spatial(self, stencil: Arc<Stencil>, out_spatial: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        let in_len: usize = shape.iter().skip(1).product();
        let out_len: usize = out_spatial.iter().product();
        if shape.is_empty() || in_len != stencil.in_len() || out_len != stencil.out_len() {
            return Err(Error::dim("spatial", shape, out_spatial));
        }
        let channels = shape[0];
        let data = stencil.apply(x.data(), channels);
        let mut out_shape = vec![channels];
        out_shape.extend_from_slice(out_spatial);
        Ok(self.tape.push(
            Tensor::from_parts(out_shape, data, x.dtype()),
            Op::Spatial {
                input: self.id,
                stencil,
                channels,
            },
            self.requires_grad(),
        ))
    }

    /// `out[i] = self[index[i]]` with the given output shape.
    pub fn gather(self, index: Arc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of bounds for {} elements",
                x.numel()
            )));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), data, x.dtype()),
            Op::Gather { input: self.id, index },
            self.requires_grad(),
        ))
    }

    pub fn transpose2d(self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::dim("transpose2d", &shape, &[2]));
        }
        let (r, c) = (shape[0], shape[1]);
        let index: Arc<[usize]> = (0..r * c).map(|i| (i % r) * c + i / r).collect();
        self.gather(index, &[c, r])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let y = self.value().reshape(shape)?;
        Ok(self.tape.push(y, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Concatenates along axis 0.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let head = first.value();
        let tail = head.shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for p in parts {
            first.same_tape(*p)?;
            let v = p.value();
            if v.shape().is_empty() || v.shape()[1..] != tail[..] || v.dtype() != head.dtype() {
                return Err(Error::dim("concat", head.shape(), v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
            rg |= p.requires_grad();
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(first.tape.push(
            Tensor::from_parts(shape, data, head.dtype()),
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let s = x.sum();
        self.tape.push(
            Tensor::from_parts(vec![], vec![s], x.dtype()),
            Op::SumAll(self.id),
            self.requires_grad(),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let m = x.sum() / x.numel() as f64;
        self.tape.push(
            Tensor::from_parts(vec![], vec![m], x.dtype()),
            Op::MeanAll(self.id),
            self.requires_grad(),
        )
    }

    /// Sums over the last axis.
    pub fn sum_last(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        let len = *shape
            .last()
            .ok_or_else(|| Error::Contract("sum_last on a scalar".into()))?;
        let data = x.data().chunks(len.max(1)).map(|c| c.iter().sum()).collect();
        Ok(self.tape.push(
            Tensor::from_parts(shape[..shape.len() - 1].to_vec(), data, x.dtype()),
            Op::SumLast(self.id, len),
            self.requires_grad(),
        ))
    }

    pub fn mean_last(self) -> Result<Var<'t>> {
        let len = *self.shape().last().unwrap_or(&1);
        Ok(self.sum_last()?.scale(1.0 / len as f64))
    }

    /// Scales every fibre along `axis` to unit l2 norm. The norm is
    /// `sqrt(Σx² + NORM_EPS)`; all-zero fibres are counted in
    /// [`Tape::zero_norm_events`].
    pub fn l2_normalize(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "normalize axis {axis} invalid for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let xs = x.data();
        let mut y = vec![0.0; xs.len()];
        let mut zeros = 0;
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let ss: f64 = (0..len).map(|j| xs[at(j)] * xs[at(j)]).sum();
                if ss == 0.0 {
                    zeros += 1;
                }
                let norm = (ss + NORM_EPS).sqrt();
                for j in 0..len {
                    y[at(j)] = xs[at(j)] / norm;
                }
            }
        }
        self.tape.zero_norms.set(self.tape.zero_norms.get() + zeros);
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), y, x.dtype()),
            Op::Normalize {
                input: self.id,
                outer,
                len,
                inner,
            },
            self.requires_grad(),
        ))
    }

    fn row_len(self, name: &str) -> Result<usize> {
        match self.shape().last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(Error::Contract(format!("{name} needs a non-empty last axis"))),
        }
    }

    pub fn softmax_last(self) -> Result<Var<'t>> {
        let len = self.row_len("softmax")?;
        let x = self.value();
        let mut y = Vec::with_capacity(x.numel());
        for row in x.data().chunks(len) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            y.extend(e.iter().map(|v| v / s));
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), y, x.dtype()),
            Op::Softmax(self.id, len),
            self.requires_grad(),
        ))
    }

    /// Log-softmax with max-shift (log-sum-exp) stabilisation.
    pub fn log_softmax_last(self) -> Result<Var<'t>> {
        let len = self.row_len("log_softmax")?;
        let x = self.value();
        let mut y = Vec::with_capacity(x.numel());
        for row in x.data().chunks(len) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            y.extend(row.iter().map(|v| v - lse));
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), y, x.dtype()),
            Op::LogSoftmax(self.id, len),
            self.requires_grad(),
        ))
    }

    /// Adds a bias vector along `axis`, broadcasting over all other axes.
    pub fn add_bias(self, bias: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let (x, b) = (self.value(), bias.value());
        let shape = x.shape();
        if axis >= shape.len() || b.shape() != [shape[axis]] {
            return Err(Error::dim("add_bias", shape, b.shape()));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let bs = b.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bs[(i / inner) % len])
            .collect();
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), data, x.dtype()),
            Op::AddBias {
                input: self.id,
                bias: bias.id,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }
}

/// Convenience for tests and oracles: `DType` of a var.
impl Var<'_> {
    pub fn dtype(self) -> DType {
        self.tape.nodes.borrow()[self.id].value.dtype()
    }
}
