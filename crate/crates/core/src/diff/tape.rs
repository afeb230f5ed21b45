use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose backward rule lives outside this module.
///
/// `backward` receives the input values in the order they were passed to
/// [`Tape::custom`], the recorded output and the upstream gradient, and
/// returns one optional gradient per input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    DivElem(Var, Var),
    ScalarMul(Var, f64),
    AddConst(Var),
    MulConst(Var, Arc<Tensor>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Softplus(Var),
    Sum(Var),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentMax(Var, Vec<usize>),
    SegmentSoftmax(Var, Arc<[usize]>, f64),
    HCat(Vec<Var>),
    RowSoftmax(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::MulElem(..) => "mul_elem",
            Op::DivElem(..) => "div_elem",
            Op::ScalarMul(..) => "scalar_mul",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Pow(..) => "pow_elem",
            Op::Softplus(..) => "softplus",
            Op::Sum(..) => "sum",
            Op::GatherRows(..) => "gather_rows",
            Op::SegmentSum(..) => "segment_sum",
            Op::SegmentMax(..) => "segment_max",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::HCat(..) => "hcat",
            Op::RowSoftmax(..) => "row_softmax",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in evaluation order so gradients can be pulled back in
/// reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<String>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape when no path reached it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn is_scalar(t: &Tensor) -> bool {
    t.shape() == (1, 1)
}

/// Elementwise binary op with scalar broadcast on either side.
fn broadcast(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        Ok(a.zip_map(b, f))
    } else if is_scalar(b) {
        let s = b.item();
        Ok(a.map(|x| f(x, s)))
    } else if is_scalar(a) {
        let s = a.item();
        Ok(b.map(|x| f(s, x)))
    } else {
        Err(shape_err(op, a, b))
    }
}

/// Reduces a gradient computed at the broadcast shape back to `target`.
fn unbroadcast(grad: Tensor, target: (usize, usize)) -> Tensor {
    if grad.shape() == target {
        grad
    } else {
        Tensor::scalar(grad.sum())
    }
}

fn check_offsets(op: &'static str, offsets: &[usize], rows: usize) -> Result<()> {
    let ok = offsets.first() == Some(&0)
        && offsets.last() == Some(&rows)
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            left: (rows, 0),
            right: (offsets.last().copied().unwrap_or(0), offsets.len()),
        })
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales every input gradient of ops named `op` by 1.1 during backward.
    /// Exists so gradient checks can prove they catch a broken rule.
    pub fn inject_fault(&mut self, op: impl Into<String>) {
        self.fault = Some(op.into());
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

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) {
            if let Some((row, col)) = value.find_non_finite() {
                return Err(Error::NonFinite {
                    op: op.name(),
                    row,
                    col,
                });
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast("mul_elem", self.value(a), self.value(b), |x, y| x * y)?;
        self.push(out, Op::MulElem(a, b), &[a, b])
    }

    pub fn div_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if let Some(i) = tb.data().iter().position(|&x| x == 0.0) {
            return Err(Error::Domain {
                op: "div_elem",
                row: i / tb.cols(),
                col: i % tb.cols(),
                value: 0.0,
            });
        }
        let out = broadcast("div_elem", ta, tb, |x, y| x / y)?;
        self.push(out, Op::DivElem(a, b), &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::ScalarMul(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddConst(a), &[a])
    }

    /// Elementwise product with a constant tensor of the same shape, e.g. a
    /// dropout mask.
    pub fn mul_const(&mut self, a: Var, mask: Arc<Tensor>) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != mask.shape() {
            return Err(shape_err("mul_const", ta, &mask));
        }
        let out = ta.zip_map(&mask, |x, m| x * m);
        self.push(out, Op::MulConst(a, mask), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Some(i) = ta.data().iter().position(|&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                row: i / ta.cols(),
                col: i % ta.cols(),
                value: ta.data()[i],
            });
        }
        let out = ta.map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn pow_elem(&mut self, a: Var, exponent: f64) -> Result<Var> {
        let ta = self.value(a);
        if exponent.fract() != 0.0 {
            if let Some(i) = ta.data().iter().position(|&x| x < 0.0) {
                return Err(Error::Domain {
                    op: "pow_elem",
                    row: i / ta.cols(),
                    col: i % ta.cols(),
                    value: ta.data()[i],
                });
            }
        }
        let out = ta.map(|x| x.powf(exponent));
        self.push(out, Op::Pow(a, exponent), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// `out[e] = a[index[e]]`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        let mut out = Tensor::zeros(index.len(), ta.cols());
        for (e, &i) in index.iter().enumerate() {
            if i >= ta.rows() {
                return Err(Error::Shape {
                    op: "gather_rows",
                    left: ta.shape(),
                    right: (i, e),
                });
            }
            out.row_mut(e).copy_from_slice(ta.row(i));
        }
        self.push(out, Op::GatherRows(a, index), &[a])
    }

    /// Column-wise sums of each run of rows delimited by `offsets`.
    pub fn segment_sum(&mut self, a: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        check_offsets("segment_sum", &offsets, ta.rows())?;
        let n = offsets.len() - 1;
        let mut out = Tensor::zeros(n, ta.cols());
        for s in 0..n {
            let o = out.row_mut(s);
            for e in offsets[s]..offsets[s + 1] {
                for (x, y) in o.iter_mut().zip(ta.row(e)) {
                    *x += y;
                }
            }
        }
        self.push(out, Op::SegmentSum(a, offsets), &[a])
    }

    /// Column-wise maxima of each segment. Ties resolve to the lowest row.
    pub fn segment_max(&mut self, a: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        check_offsets("segment_max", &offsets, ta.rows())?;
        let (n, d) = (offsets.len() - 1, ta.cols());
        let mut out = Tensor::zeros(n, d);
        let mut argmax = vec![0usize; n * d];
        for s in 0..n {
            let range = offsets[s]..offsets[s + 1];
            if range.is_empty() {
                return Err(Error::EmptyRow { node: s });
            }
            for k in 0..d {
                let mut best = range.start;
                for e in range.clone() {
                    if ta.get(e, k) > ta.get(best, k) {
                        best = e;
                    }
                }
                argmax[s * d + k] = best;
                out.set(s, k, ta.get(best, k));
            }
        }
        self.push(out, Op::SegmentMax(a, argmax), &[a])
    }

    /// Per segment and column, `exp(g*x - g*max) / sum(...)`.
    pub fn segment_softmax(&mut self, a: Var, offsets: Arc<[usize]>, gamma: f64) -> Result<Var> {
        let ta = self.value(a);
        check_offsets("segment_softmax", &offsets, ta.rows())?;
        let out = segment_softmax_values(ta, &offsets, gamma);
        self.push(out, Op::SegmentSoftmax(a, offsets, gamma), &[a])
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::hcat(&values)?;
        self.push(out, Op::HCat(parts.to_vec()), parts)
    }

    /// Softmax across the columns of each row.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        self.push(out, Op::RowSoftmax(a), &[a])
    }

    /// Records an op whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(value, Op::Custom(op, inputs.to_vec()), inputs)
    }

    /// Reverse sweep from a 1x1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !is_scalar(lv) {
            return Err(Error::Tape(format!(
                "loss must be 1x1, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contributions = self.local_grads(node, &g)?;
            if self.fault.as_deref() == Some(node.op.name()) {
                for (_, t) in &mut contributions {
                    *t = t.map(|x| x * 1.1);
                }
            }
            for (v, t) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            // Leaves keep their gradient.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        // Intermediate gradients were consumed; only leaves are reported.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(*b).transpose())?;
                let gb = val(*a).transpose().matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![
                (*a, unbroadcast(g.clone(), val(*a).shape())),
                (*b, unbroadcast(g.clone(), val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, unbroadcast(g.clone(), val(*a).shape())),
                (*b, unbroadcast(g.map(|x| -x), val(*b).shape())),
            ],
            Op::MulElem(a, b) => {
                let ga = broadcast("mul_elem", g, val(*b), |x, y| x * y)?;
                let gb = broadcast("mul_elem", g, val(*a), |x, y| x * y)?;
                vec![
                    (*a, unbroadcast(ga, val(*a).shape())),
                    (*b, unbroadcast(gb, val(*b).shape())),
                ]
            }
            Op::DivElem(a, b) => {
                let ga = broadcast("div_elem", g, val(*b), |x, y| x / y)?;
                // d(a/b)/db = -out/b
                let q = broadcast("div_elem", out, val(*b), |o, y| -o / y)?;
                let gb = g.zip_map(&q, |x, y| x * y);
                vec![
                    (*a, unbroadcast(ga, val(*a).shape())),
                    (*b, unbroadcast(gb, val(*b).shape())),
                ]
            }
            Op::ScalarMul(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::AddConst(a) => vec![(*a, g.clone())],
            Op::MulConst(a, m) => vec![(*a, g.zip_map(m, |x, y| x * y))],
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }))],
            Op::LeakyRelu(a, s) => vec![(
                *a,
                g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { s * x }),
            )],
            Op::Exp(a) => vec![(*a, g.zip_map(out, |x, y| x * y))],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |x, y| x / y))],
            Op::Pow(a, e) => vec![(
                *a,
                g.zip_map(val(*a), |x, y| x * e * y.powf(e - 1.0)),
            )],
            Op::Softplus(a) => vec![(*a, g.zip_map(val(*a), |x, y| x * sigmoid(y)))],
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Tensor::full(r, c, g.item()))]
            }
            Op::GatherRows(a, index) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for (e, &i) in index.iter().enumerate() {
                    for (x, y) in ga.row_mut(i).iter_mut().zip(g.row(e)) {
                        *x += y;
                    }
                }
                vec![(*a, ga)]
            }
            Op::SegmentSum(a, offsets) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for s in 0..offsets.len() - 1 {
                    for e in offsets[s]..offsets[s + 1] {
                        ga.row_mut(e).copy_from_slice(g.row(s));
                    }
                }
                vec![(*a, ga)]
            }
            Op::SegmentMax(a, argmax) => {
                let ta = val(*a);
                let d = ta.cols();
                let mut ga = Tensor::zeros(ta.rows(), d);
                for (i, &e) in argmax.iter().enumerate() {
                    let (s, k) = (i / d, i % d);
                    ga.set(e, k, ga.get(e, k) + g.get(s, k));
                }
                vec![(*a, ga)]
            }
            Op::SegmentSoftmax(a, offsets, gamma) => {
                let d = out.cols();
                let mut ga = Tensor::zeros(out.rows(), d);
                for s in 0..offsets.len() - 1 {
                    let range = offsets[s]..offsets[s + 1];
                    for k in 0..d {
                        let dot: f64 = range.clone().map(|e| out.get(e, k) * g.get(e, k)).sum();
                        for e in range.clone() {
                            ga.set(e, k, gamma * out.get(e, k) * (g.get(e, k) - dot));
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::HCat(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = val(p).cols();
                    let mut gp = Tensor::zeros(g.rows(), c);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    offset += c;
                    res.push((p, gp));
                }
                res
            }
            Op::RowSoftmax(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (s, gr) = (out.row(r), g.row(r));
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, x) in ga.row_mut(r).iter_mut().enumerate() {
                        *x = s[c] * (gr[c] - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&values, out, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Tape(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(&v, g)| g.map(|g| (v, g)))
                    .collect()
            }
        })
    }
}

/// Max-subtracted softmax over each segment and column.
pub fn segment_softmax_values(a: &Tensor, offsets: &[usize], gamma: f64) -> Tensor {
    let d = a.cols();
    let mut out = Tensor::zeros(a.rows(), d);
    for s in 0..offsets.len() - 1 {
        let range = offsets[s]..offsets[s + 1];
        if range.is_empty() {
            continue;
        }
        for k in 0..d {
            let m = range
                .clone()
                .map(|e| gamma * a.get(e, k))
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in range.clone() {
                let v = (gamma * a.get(e, k) - m).exp();
                out.set(e, k, v);
                z += v;
            }
            for e in range.clone() {
                out.set(e, k, out.get(e, k) / z);
            }
        }
    }
    out
}
