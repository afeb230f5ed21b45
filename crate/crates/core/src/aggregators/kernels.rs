//! Row kernels for every aggregator, forward and backward.
//!
//! All nonlinear kernels work per (node, column). Lp and polynomial
//! aggregation evaluate their power sums as max-subtracted log-sum-exp over
//! `ln w + q * ln y` with `y = max(h - mu, EPS)`, so large exponents never
//! overflow. Rows are independent and run in parallel; every reduction inside
//! a row follows edge order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::{AggKind, EPS};
use crate::graph::Graph;
use crate::tensor::Tensor;

pub(crate) struct Gradient {
    pub h: Tensor,
    pub param: f64,
    pub weights: Option<Vec<f64>>,
}

#[inline]
fn shifted(x: f64, mu: f64) -> f64 {
    (x - mu).max(EPS)
}

/// `ln(max(h - mu, EPS))`, computed once per node instead of once per edge.
fn log_shifted(h: &Tensor, mu: f64) -> Tensor {
    h.map(|x| shifted(x, mu).ln())
}

fn log_weights(weights: &[f64]) -> Vec<f64> {
    weights.iter().map(|&w| w.ln()).collect()
}

/// Log-sum-exp of `terms`, `-inf` when every term is `-inf`.
#[inline]
fn lse(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

pub(crate) fn forward(
    kind: AggKind,
    g: &Graph,
    weights: &[f64],
    h: &Tensor,
    param: f64,
    mu: f64,
) -> Tensor {
    let d = h.cols();
    let mut out = Tensor::zeros(g.num_nodes(), d);
    if d == 0 {
        return out;
    }
    let log_y = matches!(kind, AggKind::Lp | AggKind::Poly).then(|| log_shifted(h, mu));
    let log_w = matches!(kind, AggKind::Lp | AggKind::Poly).then(|| log_weights(weights));

    out.data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(v, out_row)| {
            let range = g.edge_range(v);
            let cols = &g.col_indices()[range.clone()];
            let w = &weights[range.clone()];
            let mut scratch = vec![0.0; cols.len()];
            let mut scratch2 = vec![0.0; cols.len()];
            for (k, o) in out_row.iter_mut().enumerate() {
                *o = match kind {
                    AggKind::Sum => cols.iter().zip(w).map(|(&u, &w)| w * h.get(u, k)).sum(),
                    AggKind::Max => max_index(cols, h, k).map_or(0.0, |j| h.get(cols[j], k)),
                    AggKind::Lp => {
                        let (ly, lw) = (log_y.as_ref().unwrap(), &log_w.as_ref().unwrap()[range.clone()]);
                        for (j, &u) in cols.iter().enumerate() {
                            scratch[j] = lw[j] + param * ly.get(u, k);
                        }
                        (lse(&scratch) / param).exp() + mu
                    }
                    AggKind::Poly => {
                        let (ly, lw) = (log_y.as_ref().unwrap(), &log_w.as_ref().unwrap()[range.clone()]);
                        for (j, &u) in cols.iter().enumerate() {
                            let l = ly.get(u, k);
                            scratch[j] = lw[j] + param * l;
                            scratch2[j] = scratch[j] + l;
                        }
                        (lse(&scratch2) - poly_denominator(lse(&scratch))).exp() + mu
                    }
                    AggKind::Softmax => {
                        softmax_weights(cols, h, k, param, &mut scratch);
                        cols.iter()
                            .enumerate()
                            .map(|(j, &u)| w[j] * h.get(u, k) * scratch[j])
                            .sum()
                    }
                };
            }
        });
    out
}

/// Log of the polynomial denominator. Shifted values are already floored at
/// EPS, so the sum is only empty when every weight is zero; that case is
/// floored at EPS.
#[inline]
fn poly_denominator(log_den: f64) -> f64 {
    if log_den == f64::NEG_INFINITY {
        EPS.ln()
    } else {
        log_den
    }
}

/// Position of the first maximal entry of column `k` over `cols`.
#[inline]
pub(crate) fn max_index(cols: &[usize], h: &Tensor, k: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &u) in cols.iter().enumerate() {
        if best.is_none_or(|b| h.get(u, k) > h.get(cols[b], k)) {
            best = Some(j);
        }
    }
    best
}

/// Unweighted softmax of `gamma * h[., k]` over the neighborhood, into `s`.
#[inline]
fn softmax_weights(cols: &[usize], h: &Tensor, k: usize, gamma: f64, s: &mut [f64]) {
    let m = cols
        .iter()
        .map(|&u| gamma * h.get(u, k))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (j, &u) in cols.iter().enumerate() {
        s[j] = (gamma * h.get(u, k) - m).exp();
        z += s[j];
    }
    for x in s.iter_mut() {
        *x /= z;
    }
}

struct RowGrad {
    /// Gradient w.r.t. the gathered value `h[col_e, k]`, edge-major.
    edge: Vec<f64>,
    /// Gradient w.r.t. each edge weight.
    weight: Vec<f64>,
    param: f64,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    kind: AggKind,
    g: &Graph,
    weights: &[f64],
    h: &Tensor,
    param: f64,
    mu: f64,
    out: &Tensor,
    grad: &Tensor,
    want_weights: bool,
) -> Gradient {
    let (n, d) = (g.num_nodes(), h.cols());
    let log_y = matches!(kind, AggKind::Lp | AggKind::Poly).then(|| log_shifted(h, mu));
    let log_w = matches!(kind, AggKind::Lp | AggKind::Poly).then(|| log_weights(weights));

    let rows: Vec<RowGrad> = (0..n)
        .into_par_iter()
        .map(|v| {
            let range = g.edge_range(v);
            let cols = &g.col_indices()[range.clone()];
            let w = &weights[range.clone()];
            let deg = cols.len();
            let mut rg = RowGrad {
                edge: vec![0.0; deg * d],
                weight: vec![0.0; deg],
                param: 0.0,
            };
            let mut s = vec![0.0; deg];
            let mut s2 = vec![0.0; deg];
            for k in 0..d {
                let gk = grad.get(v, k);
                if gk == 0.0 {
                    continue;
                }
                match kind {
                    AggKind::Sum => {
                        for (j, &u) in cols.iter().enumerate() {
                            rg.edge[j * d + k] += gk * w[j];
                            rg.weight[j] += gk * h.get(u, k);
                        }
                    }
                    AggKind::Max => {
                        if let Some(j) = max_index(cols, h, k) {
                            rg.edge[j * d + k] += gk;
                        }
                    }
                    AggKind::Lp => {
                        let p = param;
                        let ly = log_y.as_ref().unwrap();
                        let lw = &log_w.as_ref().unwrap()[range.clone()];
                        for (j, &u) in cols.iter().enumerate() {
                            s[j] = lw[j] + p * ly.get(u, k);
                        }
                        let l = lse(&s);
                        if l == f64::NEG_INFINITY {
                            continue;
                        }
                        let z = out.get(v, k) - mu;
                        let mut weighted_log = 0.0;
                        for (j, &u) in cols.iter().enumerate() {
                            let lyj = ly.get(u, k);
                            // dz/dy = z * w * y^(p-1) / S; also the limit at the floor.
                            rg.edge[j * d + k] += gk * z * (lw[j] + (p - 1.0) * lyj - l).exp();
                            weighted_log += (s[j] - l).exp() * lyj;
                            if want_weights {
                                rg.weight[j] += gk * z * (p * lyj - l).exp() / p;
                            }
                        }
                        rg.param += gk * z * (weighted_log / p - l / (p * p));
                    }
                    AggKind::Poly => {
                        let a = param;
                        let ly = log_y.as_ref().unwrap();
                        let lw = &log_w.as_ref().unwrap()[range.clone()];
                        for (j, &u) in cols.iter().enumerate() {
                            let lyj = ly.get(u, k);
                            s[j] = lw[j] + a * lyj;
                            s2[j] = a * lyj;
                        }
                        let raw_den = lse(&s);
                        let floored = raw_den == f64::NEG_INFINITY;
                        let den = poly_denominator(raw_den);
                        let q = out.get(v, k) - mu;
                        let mut dq_da = 0.0;
                        for (j, &u) in cols.iter().enumerate() {
                            let lyj = ly.get(u, k);
                            let y = lyj.exp();
                            let rho = (s[j] - den).exp();
                            let on_floor = h.get(u, k) - mu < EPS;
                            let mut dy = (a + 1.0) * rho;
                            if !floored {
                                dy -= a * q * rho / y;
                                dq_da += rho * lyj * (y - q);
                            } else {
                                dq_da += rho * lyj * y;
                            }
                            // y^a has an unbounded slope at 0 when a < 1; the
                            // floor is treated as flat.
                            if !on_floor {
                                rg.edge[j * d + k] += gk * dy;
                            }
                            if want_weights {
                                let scale = (s2[j] - den).exp();
                                rg.weight[j] += gk * scale * if floored { y } else { y - q };
                            }
                        }
                        rg.param += gk * dq_da;
                    }
                    AggKind::Softmax => {
                        let gamma = param;
                        softmax_weights(cols, h, k, gamma, &mut s);
                        let o = out.get(v, k);
                        let mean: f64 = cols.iter().enumerate().map(|(j, &u)| s[j] * h.get(u, k)).sum();
                        let mut dgamma = 0.0;
                        for (j, &u) in cols.iter().enumerate() {
                            let x = h.get(u, k);
                            rg.edge[j * d + k] += gk * (w[j] * s[j] + gamma * s[j] * (w[j] * x - o));
                            dgamma += w[j] * x * s[j] * (x - mean);
                            rg.weight[j] += gk * x * s[j];
                        }
                        rg.param += gk * dgamma;
                    }
                }
            }
            rg
        })
        .collect();

    let mut grad_h = Tensor::zeros(h.rows(), d);
    let mut grad_param = 0.0;
    let mut grad_w = want_weights.then(|| vec![0.0; g.num_edges()]);
    for (v, rg) in rows.iter().enumerate() {
        let range = g.edge_range(v);
        for (j, &u) in g.col_indices()[range.clone()].iter().enumerate() {
            for (acc, x) in grad_h.row_mut(u).iter_mut().zip(&rg.edge[j * d..(j + 1) * d]) {
                *acc += x;
            }
        }
        if let Some(gw) = grad_w.as_mut() {
            gw[range].copy_from_slice(&rg.weight);
        }
        grad_param += rg.param;
    }
    Gradient {
        h: grad_h,
        param: grad_param,
        weights: grad_w,
    }
}
