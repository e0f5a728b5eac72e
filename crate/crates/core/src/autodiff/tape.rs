use std::cell::RefCell;
use std::collections::HashMap;
use std::ops;

use super::tensor::{matmul, Tensor};
use crate::error::{Error, Result};
use crate::numerics::{ln_gamma, psi, psi1};

/// Storage precision of forward values.
///
/// Values are always held as `f64`; `F32` rounds every forward result to the
/// nearest `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Parameter,
    Input,
    Constant,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafKind),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Relu(usize),
    Tanh(usize),
    Sqrt(usize),
    Powf(usize, f64),
    Lgamma(usize),
    Digamma(usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    RowSums(usize),
    ColSums(usize),
    LogSumExpRows(usize),
    SoftmaxRows(usize),
    GatherRows(usize, Vec<usize>),
    Pick(usize, Vec<usize>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// The first failing operation (shape mismatch, non-finite result) is kept and
/// every later operation becomes a no-op; the error surfaces from
/// [`Var::value`] or [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    error: RefCell<Option<Error>>,
    precision: Precision,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, LeafKind::Parameter)
    }

    /// An input leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, LeafKind::Input)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, LeafKind::Constant)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&self, value: Tensor, kind: LeafKind) -> Var<'_> {
        let value = self.round(value);
        if !value.is_finite() {
            self.fail(Error::NonFinite { op: "leaf" });
        }
        self.push(value, Op::Leaf(kind), kind != LeafKind::Constant)
    }

    /// The first recorded error, if any.
    pub fn status(&self) -> Result<()> {
        match &*self.error.borrow() {
            None => Ok(()),
            Some(e) => Err(clone_error(e)),
        }
    }

    fn failed(&self) -> bool {
        self.error.borrow().is_some()
    }

    fn fail(&self, e: Error) {
        let mut slot = self.error.borrow_mut();
        if slot.is_none() {
            *slot = Some(e);
        }
    }

    fn round(&self, mut t: Tensor) -> Tensor {
        if self.precision == Precision::F32 {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        t
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn poisoned(&self) -> Var<'_> {
        self.push(Tensor::zeros(1, 1), Op::Leaf(LeafKind::Constant), false)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Record the result of an op after the finiteness check.
    fn record(&self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let value = self.round(value);
        if !value.is_finite() {
            self.fail(Error::NonFinite { op: op_name });
            return self.poisoned();
        }
        self.push(value, op, needs_grad)
    }

    fn unary(
        &self,
        name: &'static str,
        a: usize,
        op: Op,
        f: impl Fn(&Tensor) -> Tensor,
    ) -> Var<'_> {
        if self.failed() {
            return self.poisoned();
        }
        let value = f(&self.nodes.borrow()[a].value);
        self.record(name, value, op, self.needs_grad(a))
    }

    fn binary(
        &self,
        name: &'static str,
        a: usize,
        b: usize,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Var<'_> {
        if self.failed() {
            return self.poisoned();
        }
        let computed = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a].value, &nodes[b].value);
            match Broadcast::new(x.shape(), y.shape()) {
                Some(bc) => {
                    let mut out = Vec::with_capacity(bc.rows * bc.cols);
                    for i in 0..bc.rows {
                        for j in 0..bc.cols {
                            out.push(f(x.data()[bc.lhs(i, j)], y.data()[bc.rhs(i, j)]));
                        }
                    }
                    Ok(Tensor::new(bc.rows, bc.cols, out).expect("broadcast shape"))
                }
                None => Err(format!("cannot broadcast {:?} with {:?}", x.shape(), y.shape())),
            }
        };
        let value = match computed {
            Ok(v) => v,
            Err(msg) => {
                self.fail(Error::shape(name, msg));
                return self.poisoned();
            }
        };
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.record(name, value, op, ng)
    }

    pub fn value(&self, v: Var<'_>) -> Result<Tensor> {
        self.status()?;
        Ok(self.nodes.borrow()[v.id].value.clone())
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.status()?;
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::scalar(1.0));
        let mut leaves = HashMap::new();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf(kind) = node.op {
                if kind != LeafKind::Constant {
                    leaves.insert(id, g);
                }
                continue;
            }
            for (parent, contrib) in self.local_grads(&nodes, id, &g) {
                if !nodes[parent].needs_grad {
                    continue;
                }
                let contrib = self.round(contrib);
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { leaves })
    }

    fn local_grads(&self, nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &nodes[id];
        let y = &node.value;
        let val = |i: usize| &nodes[i].value;
        let ew = |i: usize, f: &dyn Fn(f64, f64, f64) -> f64| {
            // f(grad, input, output)
            let x = val(i);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gv, &xv), &yv)| f(gv, xv, yv))
                .collect();
            (i, Tensor::new(x.rows(), x.cols(), data).expect("elementwise shape"))
        };
        match &node.op {
            Op::Leaf(_) => vec![],
            &Op::Add(a, b) => vec![
                (a, reduce_to(g, val(a).shape(), |gv, _, _| gv, val(a), val(b), true)),
                (b, reduce_to(g, val(b).shape(), |gv, _, _| gv, val(a), val(b), false)),
            ],
            &Op::Sub(a, b) => vec![
                (a, reduce_to(g, val(a).shape(), |gv, _, _| gv, val(a), val(b), true)),
                (b, reduce_to(g, val(b).shape(), |gv, _, _| -gv, val(a), val(b), false)),
            ],
            &Op::Mul(a, b) => vec![
                (a, reduce_to(g, val(a).shape(), |gv, _, yb| gv * yb, val(a), val(b), true)),
                (b, reduce_to(g, val(b).shape(), |gv, xa, _| gv * xa, val(a), val(b), false)),
            ],
            &Op::Div(a, b) => vec![
                (a, reduce_to(g, val(a).shape(), |gv, _, yb| gv / yb, val(a), val(b), true)),
                (
                    b,
                    reduce_to(
                        g,
                        val(b).shape(),
                        |gv, xa, yb| -gv * xa / (yb * yb),
                        val(a),
                        val(b),
                        false,
                    ),
                ),
            ],
            &Op::Neg(a) => vec![ew(a, &|gv, _, _| -gv)],
            &Op::Scale(a, c) => vec![ew(a, &|gv, _, _| gv * c)],
            &Op::Offset(a) => vec![ew(a, &|gv, _, _| gv)],
            &Op::Exp(a) => vec![ew(a, &|gv, _, yv| gv * yv)],
            &Op::Log(a) => vec![ew(a, &|gv, xv, _| gv / xv)],
            &Op::Softplus(a) => vec![ew(a, &|gv, xv, _| gv * sigmoid(xv))],
            &Op::Relu(a) => vec![ew(a, &|gv, xv, _| if xv > 0.0 { gv } else { 0.0 })],
            &Op::Tanh(a) => vec![ew(a, &|gv, _, yv| gv * (1.0 - yv * yv))],
            &Op::Sqrt(a) => vec![ew(a, &|gv, _, yv| gv * 0.5 / yv)],
            &Op::Powf(a, p) => vec![ew(a, &|gv, xv, _| gv * p * xv.powf(p - 1.0))],
            &Op::Lgamma(a) => vec![ew(a, &|gv, xv, _| gv * psi(xv))],
            &Op::Digamma(a) => vec![ew(a, &|gv, xv, _| gv * psi1(xv))],
            &Op::MatMul(a, b) => vec![
                (a, matmul(g, &val(b).transpose())),
                (b, matmul(&val(a).transpose(), g)),
            ],
            &Op::Sum(a) => vec![(a, Tensor::filled(val(a).rows(), val(a).cols(), g.item()))],
            &Op::Mean(a) => {
                let n = val(a).len() as f64;
                vec![(a, Tensor::filled(val(a).rows(), val(a).cols(), g.item() / n))]
            }
            &Op::RowSums(a) => {
                let x = val(a);
                let mut out = Tensor::zeros(x.rows(), x.cols());
                let cols = x.cols();
                for (i, chunk) in out.data_mut().chunks_mut(cols).enumerate() {
                    chunk.fill(g.data()[i]);
                }
                vec![(a, out)]
            }
            &Op::ColSums(a) => {
                let x = val(a);
                let mut out = Tensor::zeros(x.rows(), x.cols());
                let cols = x.cols();
                for chunk in out.data_mut().chunks_mut(cols) {
                    chunk.copy_from_slice(g.data());
                }
                vec![(a, out)]
            }
            &Op::LogSumExpRows(a) => {
                let x = val(a);
                let cols = x.cols();
                let mut out = Tensor::zeros(x.rows(), cols);
                for (i, chunk) in out.data_mut().chunks_mut(cols).enumerate() {
                    let (gi, yi) = (g.data()[i], y.data()[i]);
                    for (j, o) in chunk.iter_mut().enumerate() {
                        *o = gi * (x.get(i, j) - yi).exp();
                    }
                }
                vec![(a, out)]
            }
            &Op::SoftmaxRows(a) => {
                let cols = y.cols();
                let mut out = Tensor::zeros(y.rows(), cols);
                for (i, chunk) in out.data_mut().chunks_mut(cols).enumerate() {
                    let (gr, yr) = (g.row_slice(i), y.row_slice(i));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        chunk[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(a, out)]
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let cols = x.cols();
                let mut out = Tensor::zeros(x.rows(), cols);
                for (i, &src) in idx.iter().enumerate() {
                    let dst = &mut out.data_mut()[src * cols..(src + 1) * cols];
                    for (d, gv) in dst.iter_mut().zip(g.row_slice(i)) {
                        *d += gv;
                    }
                }
                vec![(*a, out)]
            }
            Op::Pick(a, idx) => {
                let x = val(*a);
                let cols = x.cols();
                let mut out = Tensor::zeros(x.rows(), cols);
                for (i, &c) in idx.iter().enumerate() {
                    out.data_mut()[i * cols + c] += g.data()[i];
                }
                vec![(*a, out)]
            }
            &Op::Reshape(a) => {
                let [r, c] = val(a).shape();
                vec![(a, g.clone().reshaped(r, c).expect("reshape back"))]
            }
        }
    }
}

/// Gradient of `grad` (shaped like the broadcast output) pulled back onto an
/// operand of shape `target`, summing over broadcast dimensions.
/// `f(g, lhs_value, rhs_value)` gives the pointwise partial.
fn reduce_to(
    grad: &Tensor,
    target: [usize; 2],
    f: impl Fn(f64, f64, f64) -> f64,
    lhs: &Tensor,
    rhs: &Tensor,
    is_lhs: bool,
) -> Tensor {
    let bc = Broadcast::new(lhs.shape(), rhs.shape()).expect("validated in forward");
    let mut out = Tensor::zeros(target[0], target[1]);
    for i in 0..bc.rows {
        for j in 0..bc.cols {
            let (li, ri) = (bc.lhs(i, j), bc.rhs(i, j));
            let v = f(grad.data()[i * bc.cols + j], lhs.data()[li], rhs.data()[ri]);
            let dst = if is_lhs { li } else { ri };
            out.data_mut()[dst] += v;
        }
    }
    out
}

struct Broadcast {
    rows: usize,
    cols: usize,
    lhs: [usize; 2],
    rhs: [usize; 2],
}

impl Broadcast {
    fn new(lhs: [usize; 2], rhs: [usize; 2]) -> Option<Self> {
        let dim = |a: usize, b: usize| match (a, b) {
            _ if a == b => Some(a),
            (1, _) => Some(b),
            (_, 1) => Some(a),
            _ => None,
        };
        Some(Self {
            rows: dim(lhs[0], rhs[0])?,
            cols: dim(lhs[1], rhs[1])?,
            lhs,
            rhs,
        })
    }

    fn index(shape: [usize; 2], i: usize, j: usize) -> usize {
        let r = if shape[0] == 1 { 0 } else { i };
        let c = if shape[1] == 1 { 0 } else { j };
        r * shape[1] + c
    }

    fn lhs(&self, i: usize, j: usize) -> usize {
        Self::index(self.lhs, i, j)
    }

    fn rhs(&self, i: usize, j: usize) -> usize {
        Self::index(self.rhs, i, j)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFinite { op },
        Error::Shape { op, msg } => Error::Shape {
            op,
            msg: msg.clone(),
        },
        other => Error::Contract(other.to_string()),
    }
}

/// Gradients of every parameter and input leaf reached by a backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&v.id)
    }

    /// Gradient for `v`, zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.leaves.get(&v.id) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = v.shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn value(&self) -> Result<Tensor> {
        self.tape.value(*self)
    }

    /// Value of a `1 x 1` var.
    pub fn item(&self) -> Result<f64> {
        let v = self.value()?;
        if v.shape() != [1, 1] {
            return Err(Error::shape("item", format!("expected a scalar, got {:?}", v.shape())));
        }
        Ok(v.item())
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape
            .binary("add", self.id, other.id, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape
            .binary("sub", self.id, other.id, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape
            .binary("mul", self.id, other.id, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        self.tape
            .binary("div", self.id, other.id, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.tape.unary("neg", self.id, Op::Neg(self.id), |x| x.map(|v| -v))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape
            .unary("scale", self.id, Op::Scale(self.id, c), |x| x.map(|v| v * c))
    }

    /// `self + c` elementwise.
    pub fn offset(self, c: f64) -> Var<'t> {
        self.tape
            .unary("offset", self.id, Op::Offset(self.id), |x| x.map(|v| v + c))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary("exp", self.id, Op::Exp(self.id), |x| x.map(f64::exp))
    }

    pub fn log(self) -> Var<'t> {
        self.tape.unary("log", self.id, Op::Log(self.id), |x| x.map(f64::ln))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape
            .unary("softplus", self.id, Op::Softplus(self.id), |x| x.map(softplus))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape
            .unary("relu", self.id, Op::Relu(self.id), |x| x.map(|v| v.max(0.0)))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary("tanh", self.id, Op::Tanh(self.id), |x| x.map(f64::tanh))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary("sqrt", self.id, Op::Sqrt(self.id), |x| x.map(f64::sqrt))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.tape
            .unary("powf", self.id, Op::Powf(self.id, p), |x| x.map(|v| v.powf(p)))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    pub fn lgamma(self) -> Var<'t> {
        self.tape
            .unary("lgamma", self.id, Op::Lgamma(self.id), |x| x.map(ln_gamma))
    }

    pub fn digamma(self) -> Var<'t> {
        self.tape
            .unary("digamma", self.id, Op::Digamma(self.id), |x| x.map(psi))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let tape = self.tape;
        if tape.failed() {
            return tape.poisoned();
        }
        let computed = {
            let nodes = tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.cols() == b.rows() {
                Ok(matmul(a, b))
            } else {
                Err(format!("{:?} x {:?}", a.shape(), b.shape()))
            }
        };
        let value = match computed {
            Ok(v) => v,
            Err(msg) => {
                tape.fail(Error::shape("matmul", msg));
                return tape.poisoned();
            }
        };
        let ng = tape.needs_grad(self.id) || tape.needs_grad(other.id);
        tape.record("matmul", value, Op::MatMul(self.id, other.id), ng)
    }

    /// Sum of all entries (`1 x 1`).
    pub fn sum(self) -> Var<'t> {
        self.tape.unary("sum", self.id, Op::Sum(self.id), |x| {
            Tensor::scalar(x.data().iter().sum())
        })
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.unary("mean", self.id, Op::Mean(self.id), |x| {
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        })
    }

    /// Per-row sums (`n x 1`).
    pub fn row_sums(self) -> Var<'t> {
        self.tape.unary("row_sums", self.id, Op::RowSums(self.id), |x| {
            Tensor::column((0..x.rows()).map(|i| x.row_slice(i).iter().sum()).collect())
        })
    }

    /// Per-column sums (`1 x k`).
    pub fn col_sums(self) -> Var<'t> {
        self.tape.unary("col_sums", self.id, Op::ColSums(self.id), |x| {
            let mut out = vec![0.0; x.cols()];
            for i in 0..x.rows() {
                for (o, v) in out.iter_mut().zip(x.row_slice(i)) {
                    *o += v;
                }
            }
            Tensor::row(out)
        })
    }

    /// Per-row log-sum-exp (`n x 1`), shifted by the row maximum.
    pub fn logsumexp_rows(self) -> Var<'t> {
        self.tape
            .unary("logsumexp", self.id, Op::LogSumExpRows(self.id), |x| {
                Tensor::column((0..x.rows()).map(|i| logsumexp(x.row_slice(i))).collect())
            })
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.tape
            .unary("softmax", self.id, Op::SoftmaxRows(self.id), |x| {
                let mut out = x.clone();
                let cols = x.cols();
                for chunk in out.data_mut().chunks_mut(cols) {
                    let m = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in chunk.iter_mut() {
                        *v = (*v - m).exp();
                        total += *v;
                    }
                    for v in chunk.iter_mut() {
                        *v /= total;
                    }
                }
                out
            })
    }

    /// Rows `indices` of `self`, in order (indices may repeat).
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let rows = self.shape()[0];
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            self.tape
                .fail(Error::Index(format!("gather_rows index {bad} >= {rows}")));
            return self.tape.poisoned();
        }
        self.tape.unary(
            "gather_rows",
            self.id,
            Op::GatherRows(self.id, indices.to_vec()),
            |x| x.select_rows(indices),
        )
    }

    /// `out[i] = self[i, indices[i]]` as an `n x 1` column.
    pub fn pick(self, indices: &[usize]) -> Var<'t> {
        let [rows, cols] = self.shape();
        if indices.len() != rows {
            self.tape.fail(Error::shape(
                "pick",
                format!("{} indices for {rows} rows", indices.len()),
            ));
            return self.tape.poisoned();
        }
        if let Some(bad) = indices.iter().find(|&&c| c >= cols) {
            self.tape
                .fail(Error::Index(format!("pick column {bad} >= {cols}")));
            return self.tape.poisoned();
        }
        self.tape
            .unary("pick", self.id, Op::Pick(self.id, indices.to_vec()), |x| {
                Tensor::column(
                    indices
                        .iter()
                        .enumerate()
                        .map(|(i, &c)| x.get(i, c))
                        .collect(),
                )
            })
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let [r, c] = self.shape();
        if r * c != rows * cols {
            self.tape.fail(Error::shape(
                "reshape",
                format!("cannot view {r}x{c} as {rows}x{cols}"),
            ));
            return self.tape.poisoned();
        }
        self.tape.unary("reshape", self.id, Op::Reshape(self.id), |x| {
            x.clone().reshaped(rows, cols).expect("checked")
        })
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

macro_rules! var_binop {
    ($tr:ident, $method:ident, $inner:ident) => {
        impl<'t> ops::$tr<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                Var::$inner(self, rhs)
            }
        }
    };
}

var_binop!(Add, add, add);
var_binop!(Sub, sub, sub);
var_binop!(Mul, mul, mul);
var_binop!(Div, div, div);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

impl<'t> ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.offset(rhs)
    }
}

impl<'t> ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.offset(-rhs)
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}
