use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;

/// Primitive operation recorded on a [`Tape`].
///
/// Every primitive carries three rules: a reverse rule over raw tensors, a reverse rule that
/// records its result on the tape (so gradients can be differentiated again), and a tangent
/// (forward-mode) rule.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar(f64),
    PowScalar(f64),
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    Sin,
    Cos,
    Abs,
    Max,
    Clamp { lo: f64, hi: f64 },
    MatMul,
    Transpose,
    Conv(ConvGeom),
    ConvInput(ConvGeom),
    ConvWeight(ConvGeom),
    Sum,
    Expand(Vec<usize>),
    SumRows,
    BroadcastRows(usize),
    Reshape(Vec<usize>),
    Slice { start: usize, len: usize },
    Pad { start: usize, total: usize },
    Concat,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Rc<Tensor>,
    tracked: bool,
}

/// Append-only record of operations.
///
/// Nodes are stored in creation order, so every node's inputs precede it. A tape is
/// single-writer; use one tape per thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Input that gradients can be taken with respect to.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Op::Leaf, Vec::new(), value, true)
    }

    /// Input that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Op::Const, Vec::new(), value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_node(&self, op: Op, inputs: Vec<usize>, value: Tensor, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            value: Rc::new(value),
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op: Op, inputs: &[Var<'_>], value: Tensor) -> Var<'_> {
        for v in inputs {
            assert!(std::ptr::eq(v.tape, self), "variables from different tapes");
        }
        let tracked = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].tracked)
        };
        if tracked {
            self.push_node(op, inputs.iter().map(|v| v.id).collect(), value, true)
        } else {
            self.push_node(Op::Const, Vec::new(), value, false)
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Nodes from which some `wrt` node is reachable, restricted to `0..end`.
    fn reach(&self, end: usize, wrt: &[Var<'_>]) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut reach = vec![false; end];
        for w in wrt {
            if w.id < end {
                reach[w.id] = true;
            }
        }
        for i in 0..end {
            if !reach[i] && nodes[i].tracked {
                reach[i] = nodes[i].inputs.iter().any(|&j| reach[j]);
            }
        }
        reach
    }

    /// Reverse pass over raw tensors. Returns `sum_k <seed_k, d out_k / d wrt>` for each `wrt`.
    pub fn vjp(&self, seeds: &[(Var<'_>, &Tensor)], wrt: &[Var<'_>]) -> Vec<Tensor> {
        let end = seeds.iter().map(|(v, _)| v.id + 1).max().unwrap_or(0);
        let reach = self.reach(end, wrt);
        let mut grads: Vec<Option<Tensor>> = vec![None; end];
        for (v, s) in seeds {
            assert_eq!(v.shape(), s.shape(), "seed shape does not match output shape");
            accumulate(&mut grads[v.id], (*s).clone());
        }
        let nodes = self.nodes.borrow();
        for i in (0..end).rev() {
            if !reach[i] || !nodes[i].tracked || nodes[i].inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &*nodes[j].value).collect();
            let need: Vec<bool> = node.inputs.iter().map(|&j| reach[j]).collect();
            let out = vjp_raw(&node.op, &ins, &node.value, &g, &need);
            for (&j, gj) in node.inputs.iter().zip(out) {
                if let Some(gj) = gj {
                    accumulate(&mut grads[j], gj);
                }
            }
            // Keep seeds of intermediate wrt nodes.
            if wrt.iter().any(|w| w.id == i) {
                grads[i] = Some(g);
            }
        }
        drop(nodes);
        wrt.iter()
            .map(|w| match grads.get(w.id).cloned().flatten() {
                Some(g) => g,
                None => {
                    log::warn!("node {} is not reachable from the output; gradient is zero", w.id);
                    Tensor::zeros(w.shape())
                }
            })
            .collect()
    }

    /// Gradient of a scalar `out` with respect to each `wrt`, as raw tensors.
    pub fn backward(&self, out: Var<'_>, wrt: &[Var<'_>]) -> Vec<Tensor> {
        assert_eq!(out.len(), 1, "backward requires a scalar output");
        let seed = Tensor::new(out.shape().to_vec(), vec![1.0]);
        self.vjp(&[(out, &seed)], wrt)
    }

    /// Reverse pass whose result is itself recorded on the tape, so it can be differentiated.
    pub fn vjp_graph<'t>(&'t self, seeds: &[(Var<'t>, Var<'t>)], wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        let end = seeds.iter().map(|(v, _)| v.id + 1).max().unwrap_or(0);
        let reach = self.reach(end, wrt);
        let mut grads: Vec<Option<Var<'t>>> = vec![None; end];
        for &(v, s) in seeds {
            assert_eq!(v.shape(), s.shape(), "seed shape does not match output shape");
            grads[v.id] = Some(match grads[v.id] {
                Some(prev) => prev + s,
                None => s,
            });
        }
        for i in (0..end).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = grads[i] else {
                continue;
            };
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[i];
                if !node.tracked || node.inputs.is_empty() {
                    continue;
                }
                (node.op.clone(), node.inputs.clone())
            };
            let ins: Vec<Var<'t>> = inputs.iter().map(|&j| self.var(j)).collect();
            let need: Vec<bool> = inputs.iter().map(|&j| reach[j]).collect();
            let out = vjp_graph(self, &op, &ins, self.var(i), g, &need);
            for (&j, gj) in inputs.iter().zip(out) {
                if let Some(gj) = gj {
                    grads[j] = Some(match grads[j] {
                        Some(prev) => prev + gj,
                        None => gj,
                    });
                }
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => {
                    log::warn!("node {} is not reachable from the output; gradient is zero", w.id);
                    self.constant(Tensor::zeros(w.shape()))
                }
            })
            .collect()
    }

    /// Gradient of a scalar `out`, recorded on the tape (double-backpropagation capable).
    pub fn backward_graph<'t>(&'t self, out: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        assert_eq!(out.len(), 1, "backward requires a scalar output");
        let seed = self.constant(Tensor::new(out.shape().to_vec(), vec![1.0]));
        self.vjp_graph(&[(out, seed)], wrt)
    }

    /// Propagates tangents forward from `inputs` to `output` using each node's tangent rule.
    pub fn tangent(&self, inputs: &[(Var<'_>, &Tensor)], output: Var<'_>) -> Tensor {
        let end = output.id + 1;
        let mut tangents: Vec<Option<Tensor>> = vec![None; end];
        for (v, t) in inputs {
            assert_eq!(v.shape(), t.shape(), "tangent shape does not match input shape");
            if v.id < end {
                tangents[v.id] = Some((*t).clone());
            }
        }
        let start = inputs.iter().map(|(v, _)| v.id).min().unwrap_or(end);
        let nodes = self.nodes.borrow();
        for i in start..end {
            let node = &nodes[i];
            if !node.tracked || node.inputs.is_empty() {
                continue;
            }
            if node.inputs.iter().all(|&j| tangents[j].is_none()) {
                continue;
            }
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &*nodes[j].value).collect();
            let tin: Vec<Option<&Tensor>> = node.inputs.iter().map(|&j| tangents[j].as_ref()).collect();
            tangents[i] = Some(jvp_raw(&node.op, &ins, &node.value, &tin));
        }
        tangents[output.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(output.shape()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(prev) => prev.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Directional derivative of `f` at `input` along `tangent`.
///
/// Returns `(f(input), J_f(input) * tangent)`.
pub fn jvp(f: impl for<'t> Fn(Var<'t>) -> Var<'t>, input: &Tensor, tangent: &Tensor) -> (Tensor, Tensor) {
    assert_eq!(input.shape(), tangent.shape(), "jvp tangent shape mismatch");
    let tape = Tape::new();
    let x = tape.leaf(input.clone());
    let y = f(x);
    let t = tape.tangent(&[(x, tangent)], y);
    ((*y.value()).clone(), t)
}

/// Gradient of a scalar function, evaluated on a fresh tape.
pub fn grad(f: impl for<'t> Fn(Var<'t>) -> Var<'t>, input: &Tensor) -> (f64, Tensor) {
    let tape = Tape::new();
    let x = tape.leaf(input.clone());
    let y = f(x);
    let g = tape.backward(y, &[x]).pop().unwrap();
    (y.item(), g)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// True when gradients can flow into this node.
    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(op, &[self], v)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch in {:?}", op);
        let v = a.zip_map(&b, f);
        self.tape.push(op, &[self, other], v)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::MulScalar(c), |x| x * c)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(Op::PowScalar(p), |x| x.powf(p))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log, f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin, f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos, f64::cos)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    /// `x * sigmoid(x)`.
    pub fn swish(self) -> Var<'t> {
        self * self.sigmoid()
    }

    /// Elementwise maximum. On ties the gradient flows to `self`.
    pub fn max(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Max, |a, b| if a >= b { a } else { b })
    }

    /// Elementwise `max(self, c)` against a constant.
    pub fn max_scalar(self, c: f64) -> Var<'t> {
        let other = self.tape.constant(Tensor::full(self.shape(), c));
        self.max(other)
    }

    /// Clamp to `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        assert!(lo <= hi, "clamp with lo > hi");
        self.unary(Op::Clamp { lo, hi }, |x| x.max(lo).min(hi))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = Tensor::new([m, n], kernels::matmul(a.data(), b.data(), m, k, n));
        self.tape.push(Op::MatMul, &[self, other], v)
    }

    pub fn transpose(self) -> Var<'t> {
        let a = self.value();
        let s = a.shape();
        assert_eq!(s.len(), 2, "transpose needs a matrix");
        let v = Tensor::new([s[1], s[0]], kernels::transpose(a.data(), s[0], s[1]));
        self.tape.push(Op::Transpose, &[self], v)
    }

    /// Strided windowed sum of a `[C, H, W]` input with `[O, C, K, K]` weights.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape(), w.shape());
        assert!(
            sx.len() == 3 && sw.len() == 4 && sw[1] == sx[0] && sw[2] == sw[3],
            "conv shapes {:?} * {:?}",
            sx,
            sw
        );
        let geom = ConvGeom {
            in_channels: sx[0],
            out_channels: sw[0],
            height: sx[1],
            width: sx[2],
            kernel: sw[2],
            stride,
            pad,
        };
        let v = Tensor::new(geom.output_shape(), geom.forward(x.data(), w.data()));
        self.tape.push(Op::Conv(geom), &[self, weight], v)
    }

    fn conv_input(self, weight: Var<'t>, geom: ConvGeom) -> Var<'t> {
        let (g, w) = (self.value(), weight.value());
        let v = Tensor::new(geom.input_shape(), geom.input_grad(g.data(), w.data()));
        self.tape.push(Op::ConvInput(geom), &[self, weight], v)
    }

    fn conv_weight(self, g: Var<'t>, geom: ConvGeom) -> Var<'t> {
        let (x, gv) = (self.value(), g.value());
        let v = Tensor::new(geom.weight_shape(), geom.weight_grad(x.data(), gv.data()));
        self.tape.push(Op::ConvWeight(geom), &[self, g], v)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(Op::Sum, &[self], v)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        (self * other).sum()
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.len(), 1, "expand needs a single-element input");
        let v = Tensor::full(shape.to_vec(), x.item());
        self.tape.push(Op::Expand(x.shape().to_vec()), &[self], v)
    }

    /// `[R, N] -> [R]` row sums.
    pub fn sum_rows(self) -> Var<'t> {
        let x = self.value();
        let s = x.shape();
        assert_eq!(s.len(), 2, "sum_rows needs a matrix");
        let (r, n) = (s[0], s[1]);
        let data = (0..r).map(|i| x.data()[i * n..(i + 1) * n].iter().sum()).collect();
        self.tape.push(Op::SumRows, &[self], Tensor::new([r], data))
    }

    /// `[R] -> [R, N]` by repeating each entry along a row.
    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape().len(), 1, "broadcast_rows needs a vector");
        let r = x.len();
        let mut data = Vec::with_capacity(r * n);
        for &v in x.data() {
            data.extend(std::iter::repeat(v).take(n));
        }
        self.tape.push(Op::BroadcastRows(n), &[self], Tensor::new([r, n], data))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let from = x.shape().to_vec();
        let v = (*x).clone().reshape(shape.to_vec());
        self.tape.push(Op::Reshape(from), &[self], v)
    }

    /// Contiguous range of the flattened tensor, as a vector.
    pub fn slice(self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        assert!(start + len <= x.len(), "slice out of range");
        let v = Tensor::vector(x.data()[start..start + len].to_vec());
        self.tape.push(Op::Slice { start, len }, &[self], v)
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn at(self, i: usize) -> Var<'t> {
        self.slice(i, 1).reshape(&[])
    }

    /// Places a vector into a zero vector of length `total` at `start`.
    pub fn pad(self, start: usize, total: usize) -> Var<'t> {
        let x = self.value();
        assert!(start + x.len() <= total, "pad out of range");
        let mut data = vec![0.0; total];
        data[start..start + x.len()].copy_from_slice(x.data());
        self.tape.push(Op::Pad { start, total }, &[self], Tensor::vector(data))
    }

    /// Concatenates flattened inputs into one vector.
    pub fn concat(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        tape.push(Op::Concat, parts, Tensor::vector(data))
    }

    /// Multiplies every element by a scalar variable.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let shape = self.shape();
        self * s.expand(&shape)
    }

    /// Adds a scalar variable to every element.
    pub fn offset_by(self, s: Var<'t>) -> Var<'t> {
        let shape = self.shape();
        self + s.expand(&shape)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $op:expr, $f:expr, $scalar:ident) => {
        impl<'t> ops::$tr for Var<'t> {
            type Output = Var<'t>;
            fn $m(self, rhs: Var<'t>) -> Var<'t> {
                self.binary(rhs, $op, $f)
            }
        }
        impl<'t> ops::$tr<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $m(self, rhs: f64) -> Var<'t> {
                $scalar(self, rhs)
            }
        }
    };
}

fn add_f(v: Var<'_>, c: f64) -> Var<'_> {
    v.add_scalar(c)
}
fn sub_f(v: Var<'_>, c: f64) -> Var<'_> {
    v.add_scalar(-c)
}
fn mul_f(v: Var<'_>, c: f64) -> Var<'_> {
    v.mul_scalar(c)
}
fn div_f(v: Var<'_>, c: f64) -> Var<'_> {
    v.mul_scalar(1.0 / c)
}

binop!(Add, add, Op::Add, |a, b| a + b, add_f);
binop!(Sub, sub, Op::Sub, |a, b| a - b, sub_f);
binop!(Mul, mul, Op::Mul, |a, b| a * b, mul_f);
binop!(Div, div, Op::Div, |a, b| a / b, div_f);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

impl<'t> ops::Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.mul_scalar(self)
    }
}

impl<'t> ops::Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs.add_scalar(self)
    }
}

impl<'t> ops::Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.neg().add_scalar(self)
    }
}

fn mask(x: &Tensor, keep: impl Fn(f64) -> bool) -> Tensor {
    x.map(|v| if keep(v) { 1.0 } else { 0.0 })
}

fn max_mask(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| if x >= y { 1.0 } else { 0.0 })
}

fn sign(x: &Tensor) -> Tensor {
    x.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn sum_rows_raw(g: &Tensor) -> Tensor {
    let (r, n) = mat_dims(g);
    Tensor::new([r], (0..r).map(|i| g.data()[i * n..(i + 1) * n].iter().sum()).collect())
}

fn broadcast_rows_raw(g: &Tensor, n: usize) -> Tensor {
    let r = g.len();
    let mut data = Vec::with_capacity(r * n);
    for &v in g.data() {
        data.extend(std::iter::repeat(v).take(n));
    }
    Tensor::new([r, n], data)
}

fn raw_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = mat_dims(a);
    let n = b.shape()[1];
    Tensor::new([m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

fn raw_transpose(a: &Tensor) -> Tensor {
    let (r, c) = mat_dims(a);
    Tensor::new([c, r], kernels::transpose(a.data(), r, c))
}

/// Reverse rule over raw tensors.
fn vjp_raw(op: &Op, ins: &[&Tensor], out: &Tensor, g: &Tensor, need: &[bool]) -> Vec<Option<Tensor>> {
    let want = |k: usize| need.get(k).copied().unwrap_or(false);
    let one = |t: Tensor| vec![Some(t)];
    match op {
        Op::Leaf | Op::Const => Vec::new(),
        Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.scale(-1.0))],
        Op::Mul => vec![
            want(0).then(|| g.zip_map(ins[1], |g, b| g * b)),
            want(1).then(|| g.zip_map(ins[0], |g, a| g * a)),
        ],
        Op::Div => vec![
            want(0).then(|| g.zip_map(ins[1], |g, b| g / b)),
            want(1).then(|| {
                let t = g.zip_map(out, |g, y| g * y);
                t.zip_map(ins[1], |t, b| -t / b)
            }),
        ],
        Op::Neg => one(g.scale(-1.0)),
        Op::AddScalar => one(g.clone()),
        Op::MulScalar(c) => one(g.scale(*c)),
        Op::PowScalar(p) => one(g.zip_map(ins[0], |g, x| g * p * x.powf(p - 1.0))),
        Op::Exp => one(g.zip_map(out, |g, y| g * y)),
        Op::Log => one(g.zip_map(ins[0], |g, x| g / x)),
        Op::Sqrt => one(g.zip_map(out, |g, y| 0.5 * g / y)),
        Op::Tanh => one(g.zip_map(out, |g, y| g * (1.0 - y * y))),
        Op::Sigmoid => one(g.zip_map(out, |g, y| g * y * (1.0 - y))),
        Op::Sin => one(g.zip_map(ins[0], |g, x| g * x.cos())),
        Op::Cos => one(g.zip_map(ins[0], |g, x| -g * x.sin())),
        Op::Abs => one(g.zip_map(&sign(ins[0]), |g, s| g * s)),
        Op::Max => {
            let m = max_mask(ins[0], ins[1]);
            vec![
                want(0).then(|| g.zip_map(&m, |g, m| g * m)),
                want(1).then(|| g.zip_map(&m, |g, m| g * (1.0 - m))),
            ]
        }
        Op::Clamp { lo, hi } => one(g.zip_map(ins[0], |g, x| if x >= *lo && x <= *hi { g } else { 0.0 })),
        Op::MatMul => vec![
            want(0).then(|| raw_matmul(g, &raw_transpose(ins[1]))),
            want(1).then(|| raw_matmul(&raw_transpose(ins[0]), g)),
        ],
        Op::Transpose => one(raw_transpose(g)),
        Op::Conv(geom) => vec![
            want(0).then(|| Tensor::new(geom.input_shape(), geom.input_grad(g.data(), ins[1].data()))),
            want(1).then(|| Tensor::new(geom.weight_shape(), geom.weight_grad(ins[0].data(), g.data()))),
        ],
        Op::ConvInput(geom) => vec![
            want(0).then(|| Tensor::new(geom.output_shape(), geom.forward(g.data(), ins[1].data()))),
            want(1).then(|| Tensor::new(geom.weight_shape(), geom.weight_grad(g.data(), ins[0].data()))),
        ],
        Op::ConvWeight(geom) => vec![
            want(0).then(|| Tensor::new(geom.input_shape(), geom.input_grad(ins[1].data(), g.data()))),
            want(1).then(|| Tensor::new(geom.output_shape(), geom.forward(ins[0].data(), g.data()))),
        ],
        Op::Sum => one(Tensor::full(ins[0].shape().to_vec(), g.item())),
        Op::Expand(from) => one(Tensor::new(from.clone(), vec![g.sum()])),
        Op::SumRows => one(broadcast_rows_raw(g, ins[0].shape()[1])),
        Op::BroadcastRows(_) => one(sum_rows_raw(g)),
        Op::Reshape(from) => one(g.clone().reshape(from.clone())),
        Op::Slice { start, len } => {
            let mut d = vec![0.0; ins[0].len()];
            d[*start..start + len].copy_from_slice(g.data());
            one(Tensor::new(ins[0].shape().to_vec(), d))
        }
        Op::Pad { start, .. } => {
            let n = ins[0].len();
            one(Tensor::new(
                ins[0].shape().to_vec(),
                g.data()[*start..start + n].to_vec(),
            ))
        }
        Op::Concat => {
            let mut off = 0;
            ins.iter()
                .enumerate()
                .map(|(k, t)| {
                    let n = t.len();
                    let r = want(k).then(|| Tensor::new(t.shape().to_vec(), g.data()[off..off + n].to_vec()));
                    off += n;
                    r
                })
                .collect()
        }
    }
}

/// Reverse rule recorded on the tape.
fn vjp_graph<'t>(
    tape: &'t Tape,
    op: &Op,
    ins: &[Var<'t>],
    out: Var<'t>,
    g: Var<'t>,
    need: &[bool],
) -> Vec<Option<Var<'t>>> {
    let want = |k: usize| need.get(k).copied().unwrap_or(false);
    let one = |v: Var<'t>| vec![Some(v)];
    match op {
        Op::Leaf | Op::Const => Vec::new(),
        Op::Add => vec![want(0).then_some(g), want(1).then_some(g)],
        Op::Sub => vec![want(0).then_some(g), want(1).then(|| -g)],
        Op::Mul => vec![want(0).then(|| g * ins[1]), want(1).then(|| g * ins[0])],
        Op::Div => vec![want(0).then(|| g / ins[1]), want(1).then(|| -(g * out) / ins[1])],
        Op::Neg => one(-g),
        Op::AddScalar => one(g),
        Op::MulScalar(c) => one(g.mul_scalar(*c)),
        Op::PowScalar(p) => one(g * ins[0].powf(p - 1.0).mul_scalar(*p)),
        Op::Exp => one(g * out),
        Op::Log => one(g / ins[0]),
        Op::Sqrt => one((g / out).mul_scalar(0.5)),
        Op::Tanh => one(g * (1.0 - out * out)),
        Op::Sigmoid => one(g * out * (1.0 - out)),
        Op::Sin => one(g * ins[0].cos()),
        Op::Cos => one(-(g * ins[0].sin())),
        Op::Abs => one(g * tape.constant(sign(&ins[0].value()))),
        Op::Max => {
            let m = max_mask(&ins[0].value(), &ins[1].value());
            let inv = m.map(|m| 1.0 - m);
            vec![
                want(0).then(|| g * tape.constant(m)),
                want(1).then(|| g * tape.constant(inv)),
            ]
        }
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            one(g * tape.constant(mask(&ins[0].value(), |x| x >= lo && x <= hi)))
        }
        Op::MatMul => vec![
            want(0).then(|| g.matmul(ins[1].transpose())),
            want(1).then(|| ins[0].transpose().matmul(g)),
        ],
        Op::Transpose => one(g.transpose()),
        Op::Conv(geom) => vec![
            want(0).then(|| g.conv_input(ins[1], *geom)),
            want(1).then(|| ins[0].conv_weight(g, *geom)),
        ],
        Op::ConvInput(geom) => vec![
            want(0).then(|| g.conv2d(ins[1], geom.stride, geom.pad)),
            want(1).then(|| g.conv_weight(ins[0], *geom)),
        ],
        Op::ConvWeight(geom) => vec![
            want(0).then(|| ins[1].conv_input(g, *geom)),
            want(1).then(|| ins[0].conv2d(g, geom.stride, geom.pad)),
        ],
        Op::Sum => one(g.expand(&ins[0].shape())),
        Op::Expand(from) => one(g.sum().reshape(from)),
        Op::SumRows => one(g.broadcast_rows(ins[0].shape()[1])),
        Op::BroadcastRows(_) => one(g.sum_rows()),
        Op::Reshape(from) => one(g.reshape(from)),
        Op::Slice { start, .. } => {
            let shape = ins[0].shape();
            let total = ins[0].len();
            one(g.pad(*start, total).reshape(&shape))
        }
        Op::Pad { start, .. } => {
            let shape = ins[0].shape();
            one(g.slice(*start, ins[0].len()).reshape(&shape))
        }
        Op::Concat => {
            let mut off = 0;
            ins.iter()
                .enumerate()
                .map(|(k, v)| {
                    let n = v.len();
                    let shape = v.shape();
                    let r = want(k).then(|| g.slice(off, n).reshape(&shape));
                    off += n;
                    r
                })
                .collect()
        }
    }
}

/// Tangent rule: maps input tangents to the output tangent.
fn jvp_raw(op: &Op, ins: &[&Tensor], out: &Tensor, t: &[Option<&Tensor>]) -> Tensor {
    let zero = |k: usize| Tensor::zeros(ins[k].shape().to_vec());
    let tan = |k: usize| t[k].cloned().unwrap_or_else(|| zero(k));
    let t0 = || tan(0);
    match op {
        Op::Leaf | Op::Const => Tensor::zeros(out.shape().to_vec()),
        Op::Add => t0().zip_map(&tan(1), |a, b| a + b),
        Op::Sub => t0().zip_map(&tan(1), |a, b| a - b),
        Op::Mul => {
            let a = t0().zip_map(ins[1], |t, b| t * b);
            let b = tan(1).zip_map(ins[0], |t, a| t * a);
            a.zip_map(&b, |x, y| x + y)
        }
        Op::Div => {
            let num = t0().zip_map(&tan(1).zip_map(out, |tb, y| tb * y), |a, b| a - b);
            num.zip_map(ins[1], |n, b| n / b)
        }
        Op::Neg => t0().scale(-1.0),
        Op::AddScalar => t0(),
        Op::MulScalar(c) => t0().scale(*c),
        Op::PowScalar(p) => t0().zip_map(ins[0], |t, x| t * p * x.powf(p - 1.0)),
        Op::Exp => t0().zip_map(out, |t, y| t * y),
        Op::Log => t0().zip_map(ins[0], |t, x| t / x),
        Op::Sqrt => t0().zip_map(out, |t, y| 0.5 * t / y),
        Op::Tanh => t0().zip_map(out, |t, y| t * (1.0 - y * y)),
        Op::Sigmoid => t0().zip_map(out, |t, y| t * y * (1.0 - y)),
        Op::Sin => t0().zip_map(ins[0], |t, x| t * x.cos()),
        Op::Cos => t0().zip_map(ins[0], |t, x| -t * x.sin()),
        Op::Abs => t0().zip_map(&sign(ins[0]), |t, s| t * s),
        Op::Max => {
            let m = max_mask(ins[0], ins[1]);
            let a = t0().zip_map(&m, |t, m| t * m);
            let b = tan(1).zip_map(&m, |t, m| t * (1.0 - m));
            a.zip_map(&b, |x, y| x + y)
        }
        Op::Clamp { lo, hi } => t0().zip_map(ins[0], |t, x| if x >= *lo && x <= *hi { t } else { 0.0 }),
        Op::MatMul => {
            let a = raw_matmul(&t0(), ins[1]);
            let b = raw_matmul(ins[0], &tan(1));
            a.zip_map(&b, |x, y| x + y)
        }
        Op::Transpose => raw_transpose(&t0()),
        Op::Conv(geom) => {
            let mut a = geom.forward(t0().data(), ins[1].data());
            for (x, y) in a.iter_mut().zip(geom.forward(ins[0].data(), tan(1).data())) {
                *x += y;
            }
            Tensor::new(geom.output_shape(), a)
        }
        Op::ConvInput(geom) => {
            let mut a = geom.input_grad(t0().data(), ins[1].data());
            for (x, y) in a.iter_mut().zip(geom.input_grad(ins[0].data(), tan(1).data())) {
                *x += y;
            }
            Tensor::new(geom.input_shape(), a)
        }
        Op::ConvWeight(geom) => {
            let mut a = geom.weight_grad(t0().data(), ins[1].data());
            for (x, y) in a.iter_mut().zip(geom.weight_grad(ins[0].data(), tan(1).data())) {
                *x += y;
            }
            Tensor::new(geom.weight_shape(), a)
        }
        Op::Sum => Tensor::scalar(t0().sum()),
        Op::Expand(_) => Tensor::full(out.shape().to_vec(), t0().item()),
        Op::SumRows => sum_rows_raw(&t0()),
        Op::BroadcastRows(n) => broadcast_rows_raw(&t0(), *n),
        Op::Reshape(_) => t0().reshape(out.shape().to_vec()),
        Op::Slice { start, len } => Tensor::vector(t0().data()[*start..start + len].to_vec()),
        Op::Pad { start, total } => {
            let mut d = vec![0.0; *total];
            let t = t0();
            d[*start..start + t.len()].copy_from_slice(t.data());
            Tensor::vector(d)
        }
        Op::Concat => {
            let mut d = Vec::with_capacity(out.len());
            for k in 0..ins.len() {
                d.extend_from_slice(tan(k).data());
            }
            Tensor::vector(d)
        }
    }
}
