//! Neighborhood aggregation functions.
//!
//! Five kernels share one calling convention: a [`Graph`] whose row `v`
//! lists `N_v` with weights `A_vu`, and a node-feature matrix `H`.
//!
//! * [`AggKind::Sum`]: `sum_u A_vu H_u`
//! * [`AggKind::Max`]: column-wise `max_u H_u`, weights ignored
//! * [`AggKind::Lp`]: `(sum_u A_vu (H_u - mu)^p)^(1/p) + mu`, `p >= 1`
//! * [`AggKind::Poly`]: `sum_u A_vu (H_u - mu)^(a+1) / sum_u A_vu (H_u - mu)^a + mu`, `a >= 0`
//! * [`AggKind::Softmax`]: `sum_u A_vu H_u * softmax_u(g H_u)`, `g >= 0`
//!
//! `mu` is the smallest entry of the whole input matrix, so every powered
//! quantity is nonnegative. Lp interpolates between the shifted weighted sum
//! (`p = 1`) and the max (`p -> inf`); polynomial and softmax interpolate
//! between the weighted mean (`a = 0`, `g = 0`) and the max.
//!
//! The interpolation parameters are trained through an unconstrained scalar
//! `theta`: `p = 1 + softplus(theta)`, `a = softplus(theta)`,
//! `g = softplus(theta)`.

mod kernels;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::{sigmoid, softplus, CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Floor applied to shifted values before taking logarithms.
pub const EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggKind {
    Sum,
    Max,
    Lp,
    Poly,
    Softmax,
}

impl AggKind {
    pub const ALL: [AggKind; 5] = [
        AggKind::Sum,
        AggKind::Max,
        AggKind::Lp,
        AggKind::Poly,
        AggKind::Softmax,
    ];

    pub fn has_param(self) -> bool {
        matches!(self, AggKind::Lp | AggKind::Poly | AggKind::Softmax)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AggKind::Sum => "sum",
            AggKind::Max => "max",
            AggKind::Lp => "lp",
            AggKind::Poly => "poly",
            AggKind::Softmax => "softmax",
        }
    }

    /// Lower end of the effective parameter's domain.
    pub fn param_floor(self) -> f64 {
        if self == AggKind::Lp {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown aggregator {s:?}")))
    }
}

/// `ln(e - 1)`: softplus maps it to exactly 1.
pub const THETA_FOR_ONE: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggConfig {
    pub kind: AggKind,
    /// Raw, unconstrained parameter. Ignored for sum and max.
    pub theta: f64,
    pub learnable: bool,
}

impl AggConfig {
    /// Default start: `p = 2` for Lp, `a = g = 1` otherwise.
    pub fn new(kind: AggKind) -> Self {
        AggConfig {
            kind,
            theta: THETA_FOR_ONE,
            learnable: kind.has_param(),
        }
    }

    /// A non-learnable config pinned at an effective parameter value.
    pub fn fixed(kind: AggKind, value: f64) -> Result<Self> {
        Ok(AggConfig {
            kind,
            theta: inverse_reparam(kind, value)?,
            learnable: false,
        })
    }

    pub fn effective(&self) -> Result<f64> {
        reparam(self.kind, self.theta)
    }
}

/// Maps a raw parameter onto the kind's domain.
pub fn reparam(kind: AggKind, theta: f64) -> Result<f64> {
    if !kind.has_param() {
        return Err(Error::Parameter(format!("{kind} aggregation has no parameter")));
    }
    Ok(kind.param_floor() + softplus(theta))
}

/// `d reparam / d theta`.
pub fn reparam_slope(theta: f64) -> f64 {
    sigmoid(theta)
}

/// Inverse of [`reparam`]. The domain's lower end maps to `-inf`.
pub fn inverse_reparam(kind: AggKind, value: f64) -> Result<f64> {
    if !kind.has_param() {
        return Err(Error::Parameter(format!("{kind} aggregation has no parameter")));
    }
    let x = value - kind.param_floor();
    if x.is_nan() || x < 0.0 {
        return Err(Error::Parameter(format!(
            "{kind} parameter {value} below {}",
            kind.param_floor()
        )));
    }
    if x == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    // softplus^-1(x) = ln(e^x - 1) = x + ln(1 - e^-x)
    Ok(x + (-(-x).exp()).ln_1p())
}

/// Global minimum of the layer input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftValue {
    pub mu_m: f64,
}

pub fn global_min(h: &Tensor) -> Result<ShiftValue> {
    h.min()
        .map(|mu_m| ShiftValue { mu_m })
        .ok_or_else(|| Error::Parameter("global_min of an empty tensor".into()))
}

fn check_features(op: &'static str, g: &Graph, h: &Tensor) -> Result<()> {
    if h.rows() != g.num_nodes() {
        return Err(Error::Shape {
            op,
            left: (g.num_nodes(), h.cols()),
            right: h.shape(),
        });
    }
    Ok(())
}

fn check_param(kind: AggKind, value: f64) -> Result<()> {
    let floor = kind.param_floor();
    if !(value >= floor) || !value.is_finite() {
        let name = match kind {
            AggKind::Lp => "p",
            AggKind::Poly => "alpha",
            _ => "gamma",
        };
        return Err(Error::Parameter(format!("{name} = {value} must be finite and >= {floor}")));
    }
    Ok(())
}

fn check_nonempty_rows(g: &Graph) -> Result<()> {
    match (0..g.num_nodes()).find(|&v| g.edge_range(v).is_empty()) {
        Some(node) => Err(Error::EmptyRow { node }),
        None => Ok(()),
    }
}

/// Evaluates one aggregator without recording gradients.
///
/// `param` is the effective p/a/g and is ignored for sum and max. The shift
/// is recomputed from `h`.
pub fn aggregate(kind: AggKind, g: &Graph, h: &Tensor, param: f64) -> Result<Tensor> {
    let mu = match kind {
        AggKind::Lp | AggKind::Poly if !h.is_empty() => global_min(h)?.mu_m,
        _ => 0.0,
    };
    forward_checked(kind, g, g.edge_weights(), h, param, mu)
}

fn forward_checked(kind: AggKind, g: &Graph, w: &[f64], h: &Tensor, param: f64, mu: f64) -> Result<Tensor> {
    check_features(kind.as_str(), g, h)?;
    if w.len() != g.num_edges() {
        return Err(Error::Shape {
            op: "aggregate",
            left: (g.num_edges(), 1),
            right: (w.len(), 1),
        });
    }
    if kind.has_param() {
        check_param(kind, param)?;
    }
    if kind == AggKind::Max {
        check_nonempty_rows(g)?;
    }
    Ok(kernels::forward(kind, g, w, h, param, mu))
}

/// `out[v] = sum_u w(v,u) h[u]`.
pub fn agg_sum(g: &Graph, h: &Tensor) -> Result<Tensor> {
    forward_checked(AggKind::Sum, g, g.edge_weights(), h, 0.0, 0.0)
}

/// Column-wise neighborhood maximum; weights are ignored.
pub fn agg_max(g: &Graph, h: &Tensor) -> Result<Tensor> {
    forward_checked(AggKind::Max, g, g.edge_weights(), h, 0.0, 0.0)
}

pub fn agg_lp(g: &Graph, h: &Tensor, p: f64, mu: ShiftValue) -> Result<Tensor> {
    forward_checked(AggKind::Lp, g, g.edge_weights(), h, p, mu.mu_m)
}

pub fn agg_poly(g: &Graph, h: &Tensor, alpha: f64, mu: ShiftValue) -> Result<Tensor> {
    forward_checked(AggKind::Poly, g, g.edge_weights(), h, alpha, mu.mu_m)
}

pub fn agg_softmax(g: &Graph, h: &Tensor, gamma: f64) -> Result<Tensor> {
    forward_checked(AggKind::Softmax, g, g.edge_weights(), h, gamma, 0.0)
}

/// Where an aggregator's interpolation parameter comes from on the tape.
#[derive(Clone, Copy, Debug)]
pub enum ParamInput {
    /// A constant effective value; no gradient.
    Fixed(f64),
    /// A 1x1 tape value holding the effective p/a/g.
    Var(Var),
}

/// Records `1 + softplus(theta)` (Lp) or `softplus(theta)` on the tape.
pub fn reparam_on_tape(tape: &mut Tape, kind: AggKind, theta: Var) -> Result<Var> {
    let sp = tape.softplus(theta)?;
    if kind.param_floor() != 0.0 {
        tape.add_const(sp, kind.param_floor())
    } else {
        Ok(sp)
    }
}

struct AggregateOp {
    kind: AggKind,
    graph: Arc<Graph>,
    mu: f64,
    param: f64,
    param_is_input: bool,
    weights_are_input: bool,
}

impl CustomOp for AggregateOp {
    fn name(&self) -> &'static str {
        match self.kind {
            AggKind::Sum => "agg_sum",
            AggKind::Max => "agg_max",
            AggKind::Lp => "agg_lp",
            AggKind::Poly => "agg_poly",
            AggKind::Softmax => "agg_softmax",
        }
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let h = inputs[0];
        let weights = if self.weights_are_input {
            inputs[inputs.len() - 1].data()
        } else {
            self.graph.edge_weights()
        };
        let gr = kernels::backward(
            self.kind,
            &self.graph,
            weights,
            h,
            self.param,
            self.mu,
            output,
            grad,
            self.weights_are_input,
        );
        let mut res = vec![Some(gr.h)];
        if self.param_is_input {
            res.push(Some(Tensor::scalar(gr.param)));
        }
        if let Some(w) = gr.weights {
            res.push(Some(Tensor::column(&w)));
        }
        Ok(res)
    }
}

/// Records an aggregation on the tape.
///
/// `weights`, when given, is an `E x 1` tape value replacing the graph's own
/// edge weights (learned attention); the graph then only supplies topology.
/// The shift `mu` is taken from the current value of `h` and is not
/// differentiated.
pub fn aggregate_on_tape(
    tape: &mut Tape,
    graph: &Arc<Graph>,
    h: Var,
    kind: AggKind,
    param: ParamInput,
    weights: Option<Var>,
) -> Result<Var> {
    let hv = tape.value(h);
    let param_value = match param {
        ParamInput::Fixed(x) => x,
        ParamInput::Var(v) => tape.value(v).item(),
    };
    let mu = match kind {
        AggKind::Lp | AggKind::Poly => global_min(hv)?.mu_m,
        _ => 0.0,
    };
    let w = match weights {
        Some(wv) => {
            let wt = tape.value(wv);
            if wt.shape() != (graph.num_edges(), 1) {
                return Err(Error::Shape {
                    op: "aggregate",
                    left: (graph.num_edges(), 1),
                    right: wt.shape(),
                });
            }
            wt.data()
        }
        None => graph.edge_weights(),
    };
    let out = forward_checked(kind, graph, w, hv, param_value, mu)?;

    let mut inputs = vec![h];
    let param_is_input = matches!(param, ParamInput::Var(_)) && kind.has_param();
    if let (true, ParamInput::Var(v)) = (param_is_input, param) {
        inputs.push(v);
    }
    if let Some(wv) = weights {
        inputs.push(wv);
    }
    let op = AggregateOp {
        kind,
        graph: Arc::clone(graph),
        mu,
        param: param_value,
        param_is_input,
        weights_are_input: weights.is_some(),
    };
    tape.custom(&inputs, out, Box::new(op))
}

/// Like [`aggregate_on_tape`] with an explicit shift. Used where the shift
/// must stay fixed while `h` is perturbed, e.g. finite-difference checks.
pub fn aggregate_on_tape_with_shift(
    tape: &mut Tape,
    graph: &Arc<Graph>,
    h: Var,
    kind: AggKind,
    param: ParamInput,
    mu: ShiftValue,
) -> Result<Var> {
    let param_value = match param {
        ParamInput::Fixed(x) => x,
        ParamInput::Var(v) => tape.value(v).item(),
    };
    let out = forward_checked(kind, graph, graph.edge_weights(), tape.value(h), param_value, mu.mu_m)?;
    let mut inputs = vec![h];
    let param_is_input = matches!(param, ParamInput::Var(_)) && kind.has_param();
    if let (true, ParamInput::Var(v)) = (param_is_input, param) {
        inputs.push(v);
    }
    let op = AggregateOp {
        kind,
        graph: Arc::clone(graph),
        mu: mu.mu_m,
        param: param_value,
        param_is_input,
        weights_are_input: false,
    };
    tape.custom(&inputs, out, Box::new(op))
}
