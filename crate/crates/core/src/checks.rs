//! Randomized property and gradient suites behind `nagg propcheck` and
//! `nagg gradcheck`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregators::{self, AggConfig, AggKind, ParamInput, ShiftValue};
use crate::diff::{grad_check, grad_check_against, GradReport, Tape, Var};
use crate::error::Result;
use crate::graph::{EdgeList, Graph, WeightScheme};
use crate::models::{self, GraphSet, Mode, ModelParams, ModelSpec, Weighting};
use crate::tensor::Tensor;
use crate::trainer;

/// Outcome of one named check: the worst observed error against its bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, worst: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            worst,
            tolerance,
            passed: worst <= tolerance,
        }
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

#[derive(Clone, Debug)]
pub struct PropConfig {
    pub seed: u64,
    pub trials: usize,
    /// Replaces every default tolerance when set.
    pub tolerance: Option<f64>,
}

impl Default for PropConfig {
    fn default() -> Self {
        PropConfig {
            seed: 0x5eed,
            trials: 100,
            tolerance: None,
        }
    }
}

/// A connected-ish random graph with self-loops, `n <= 50`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, density: f64, scheme: WeightScheme) -> Result<Graph> {
    let mut pairs = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random_bool(density) {
                pairs.push((u, v));
            }
        }
    }
    Graph::build(&EdgeList::new(n, pairs), true, true)?.with_scheme(scheme)
}

pub fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..n * d).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(n, d, data).expect("sized by construction")
}

/// Features whose entries within each column are pairwise at least 0.1
/// apart, so every neighborhood has a unique maximum.
pub fn separated_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut h = Tensor::zeros(n, d);
    let offset: f64 = rng.random_range(-5.0..5.0);
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..d {
        order.shuffle(rng);
        for (rank, &u) in order.iter().enumerate() {
            h.set(u, k, offset + 0.15 * rank as f64 + rng.random_range(0.0..0.05));
        }
    }
    h
}

fn weights_scheme(rng: &mut ChaCha8Rng) -> WeightScheme {
    if rng.random_bool(0.5) {
        WeightScheme::SymNorm
    } else {
        WeightScheme::Binary
    }
}

struct Case {
    g: Graph,
    h: Tensor,
}

fn case(rng: &mut ChaCha8Rng, scheme: WeightScheme, separated: bool) -> Result<Case> {
    let n = rng.random_range(2..=50);
    let d = rng.random_range(1..=8);
    let density = rng.random_range(0.05..0.4);
    let g = random_graph(rng, n, density, scheme)?;
    let h = if separated {
        separated_features(rng, n, d)
    } else {
        random_features(rng, n, d, -3.0, 3.0)
    };
    Ok(Case { g, h })
}

fn nbr_fold(g: &Graph, h: &Tensor, v: usize, k: usize, init: f64, f: fn(f64, f64) -> f64) -> f64 {
    g.neighbors(v).iter().map(|&u| h.get(u, k)).fold(init, f)
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

/// Runs every aggregator property on `cfg.trials` random inputs each.
pub fn run_propcheck(cfg: &PropConfig) -> Result<Vec<CheckResult>> {
    let tol = |default: f64| cfg.tolerance.unwrap_or(default);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();

    // Exact specializations.
    let (mut lp1, mut poly0, mut soft0) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cfg.trials {
        let scheme = weights_scheme(&mut rng);
        let Case { g, h } = case(&mut rng, scheme, false)?;
        let mu = h.min().unwrap_or(0.0);
        let mut shifted_sum = Tensor::zeros(h.rows(), h.cols());
        let mut mean = shifted_sum.clone();
        for v in 0..g.num_nodes() {
            let w = g.row_weights(v);
            let wsum: f64 = w.iter().sum();
            for k in 0..h.cols() {
                let s: f64 = g.neighbors(v).iter().zip(w).map(|(&u, &w)| w * (h.get(u, k) - mu)).sum();
                shifted_sum.set(v, k, s + mu);
                let m: f64 = g.neighbors(v).iter().zip(w).map(|(&u, &w)| w * h.get(u, k)).sum();
                mean.set(v, k, m / wsum);
            }
        }
        lp1 = lp1.max(max_abs(&aggregators::aggregate(AggKind::Lp, &g, &h, 1.0)?, &shifted_sum));
        poly0 = poly0.max(max_abs(&aggregators::aggregate(AggKind::Poly, &g, &h, 0.0)?, &mean));
        let gb = g.with_scheme(WeightScheme::Binary)?;
        let mut plain_mean = Tensor::zeros(h.rows(), h.cols());
        for v in 0..gb.num_nodes() {
            let deg = gb.neighbors(v).len() as f64;
            for k in 0..h.cols() {
                plain_mean.set(v, k, nbr_fold(&gb, &h, v, k, 0.0, |a, b| a + b) / deg);
            }
        }
        soft0 = soft0.max(max_abs(&aggregators::aggregate(AggKind::Softmax, &gb, &h, 0.0)?, &plain_mean));
    }
    out.push(CheckResult::new("lp_p1_equals_shifted_sum", lp1, tol(1e-10)));
    out.push(CheckResult::new("poly_a0_equals_weighted_mean", poly0, tol(1e-10)));
    out.push(CheckResult::new("softmax_g0_equals_mean", soft0, tol(1e-10)));

    // Limits towards max, relative to the value range of each input.
    let mut limits = [0.0f64; 3];
    for _ in 0..cfg.trials {
        let scheme = weights_scheme(&mut rng);
        let Case { g, h } = case(&mut rng, scheme, true)?;
        let range = h.max().unwrap() - h.min().unwrap();
        let max = aggregators::agg_max(&g, &h)?;
        let gb = g.with_scheme(WeightScheme::Binary)?;
        let runs = [
            aggregators::aggregate(AggKind::Lp, &g, &h, 128.0)?,
            aggregators::aggregate(AggKind::Poly, &g, &h, 128.0)?,
            aggregators::aggregate(AggKind::Softmax, &gb, &h, 128.0)?,
        ];
        for (worst, r) in limits.iter_mut().zip(&runs) {
            *worst = worst.max(max_abs(r, &max) / range);
        }
    }
    out.push(CheckResult::new("lp_p128_approaches_max", limits[0], tol(0.05)));
    out.push(CheckResult::new("poly_a128_approaches_max", limits[1], tol(0.05)));
    out.push(CheckResult::new("softmax_g128_approaches_max", limits[2], tol(0.01)));

    // Monotonicity in the interpolation parameter.
    let grids: [(AggKind, WeightScheme, &[f64]); 3] = [
        (AggKind::Lp, WeightScheme::RowNorm, &[1.0, 2.0, 4.0, 8.0, 32.0]),
        (AggKind::Poly, WeightScheme::SymNorm, &[0.0, 1.0, 4.0, 16.0, 64.0]),
        (AggKind::Softmax, WeightScheme::Binary, &[0.0, 1.0, 4.0, 16.0, 64.0]),
    ];
    for (kind, scheme, grid) in grids {
        let mut worst = 0.0f64;
        for _ in 0..cfg.trials {
            let Case { g, h } = case(&mut rng, scheme, false)?;
            let mut prev: Option<Tensor> = None;
            for &p in grid {
                let cur = aggregators::aggregate(kind, &g, &h, p)?;
                if let Some(prev) = &prev {
                    let drop = prev.zip_map(&cur, |a, b| a - b).max().unwrap_or(0.0);
                    worst = worst.max(drop);
                }
                prev = Some(cur);
            }
        }
        out.push(CheckResult::new(format!("{kind}_monotone_in_param"), worst, tol(1e-10)));
    }

    // Bounds by the neighborhood extremes.
    let bounded: [(AggKind, WeightScheme, bool); 3] = [
        (AggKind::Lp, WeightScheme::RowNorm, false),
        (AggKind::Poly, WeightScheme::RowNorm, true),
        (AggKind::Softmax, WeightScheme::Binary, true),
    ];
    for (kind, scheme, lower) in bounded {
        let mut worst = 0.0f64;
        for _ in 0..cfg.trials {
            let Case { g, h } = case(&mut rng, scheme, false)?;
            let param = rng.random_range(kind.param_floor()..20.0);
            let out = aggregators::aggregate(kind, &g, &h, param)?;
            for v in 0..g.num_nodes() {
                for k in 0..h.cols() {
                    let hi = nbr_fold(&g, &h, v, k, f64::NEG_INFINITY, f64::max);
                    worst = worst.max(out.get(v, k) - hi);
                    if lower {
                        let lo = nbr_fold(&g, &h, v, k, f64::INFINITY, f64::min);
                        worst = worst.max(lo - out.get(v, k));
                    }
                }
            }
        }
        out.push(CheckResult::new(format!("{kind}_within_neighborhood_bounds"), worst, tol(1e-10)));
    }

    // Translation and permutation equivariance.
    for (kind, scheme) in [
        (AggKind::Lp, WeightScheme::SymNorm),
        (AggKind::Poly, WeightScheme::SymNorm),
        (AggKind::Softmax, WeightScheme::Binary),
    ] {
        let (mut shift, mut perm) = (0.0f64, 0.0f64);
        for _ in 0..cfg.trials {
            let Case { g, h } = case(&mut rng, scheme, false)?;
            let param = rng.random_range(kind.param_floor()..10.0);
            let base = aggregators::aggregate(kind, &g, &h, param)?;
            let c: f64 = rng.random_range(-100.0..100.0);
            let moved = aggregators::aggregate(kind, &g, &h.map(|x| x + c), param)?;
            shift = shift.max(max_abs(&moved, &base.map(|x| x + c)));

            let mut order: Vec<usize> = (0..g.num_nodes()).collect();
            order.shuffle(&mut rng);
            let gp = g.permute(&order)?;
            let mut hp = Tensor::zeros(h.rows(), h.cols());
            let mut expected = hp.clone();
            for v in 0..g.num_nodes() {
                hp.row_mut(order[v]).copy_from_slice(h.row(v));
                expected.row_mut(order[v]).copy_from_slice(base.row(v));
            }
            perm = perm.max(max_abs(&aggregators::aggregate(kind, &gp, &hp, param)?, &expected));
        }
        out.push(CheckResult::new(format!("{kind}_translation_equivariant"), shift, tol(1e-9)));
        out.push(CheckResult::new(format!("{kind}_permutation_equivariant"), perm, tol(1e-10)));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GradConfig {
    pub seed: u64,
    pub step: f64,
    /// Tape op whose backward is deliberately scaled.
    pub fault: Option<String>,
    pub op_tolerance: f64,
    pub model_tolerance: f64,
}

impl Default for GradConfig {
    fn default() -> Self {
        GradConfig {
            seed: 0x6ead,
            step: crate::diff::DEFAULT_STEP,
            fault: None,
            op_tolerance: 1e-4,
            model_tolerance: 1e-3,
        }
    }
}

/// Entries at least `gap` from zero, keeping kinks out of the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64, gap: f64) -> Tensor {
    random_features(rng, rows, cols, lo, hi).map(|v| if v.abs() < gap { gap.copysign(v + 1e-15) } else { v })
}

type OpBuilder = fn(&mut Tape, Var, Var) -> Result<Var>;

fn op_table() -> Vec<(&'static str, OpBuilder, (f64, f64))> {
    fn segs() -> Arc<[usize]> {
        Arc::from(vec![0, 1, 4, 6])
    }
    vec![
        ("matmul", |t, x, y| {
            let yt = t.value(y).transpose();
            let c = t.constant(yt);
            t.matmul(x, c)
        }, (-2.0, 2.0)),
        ("add", |t, x, y| t.add(x, y), (-2.0, 2.0)),
        ("sub", |t, x, y| t.sub(x, y), (-2.0, 2.0)),
        ("mul_elem", |t, x, y| t.mul_elem(x, y), (-2.0, 2.0)),
        ("div_elem", |t, x, y| t.div_elem(y, x), (0.5, 2.0)),
        ("scalar_mul", |t, x, _| t.scalar_mul(x, -1.7), (-2.0, 2.0)),
        ("add_const", |t, x, _| t.add_const(x, 0.4), (-2.0, 2.0)),
        ("mul_const", |t, x, y| {
            let m = Arc::new(t.value(y).clone());
            t.mul_const(x, m)
        }, (-2.0, 2.0)),
        ("relu", |t, x, _| t.relu(x), (-2.0, 2.0)),
        ("leaky_relu", |t, x, _| t.leaky_relu(x, 0.2), (-2.0, 2.0)),
        ("exp", |t, x, _| t.exp(x), (-2.0, 2.0)),
        ("log", |t, x, _| t.log(x), (0.1, 3.0)),
        ("pow_elem", |t, x, _| t.pow_elem(x, 2.5), (0.1, 3.0)),
        ("softplus", |t, x, _| t.softplus(x), (-3.0, 3.0)),
        ("sum", |t, x, _| t.sum(x), (-2.0, 2.0)),
        ("gather_rows", |t, x, _| t.gather_rows(x, Arc::from(vec![5, 0, 0, 3, 2, 1, 4])), (-2.0, 2.0)),
        ("segment_sum", |t, x, _| t.segment_sum(x, segs()), (-2.0, 2.0)),
        ("segment_max", |t, x, _| t.segment_max(x, segs()), (-2.0, 2.0)),
        ("segment_softmax", |t, x, _| t.segment_softmax(x, segs(), 1.3), (-2.0, 2.0)),
        ("hcat", |t, x, y| t.hcat(&[y, x, x]), (-2.0, 2.0)),
        ("row_softmax", |t, x, _| t.row_softmax(x), (-3.0, 3.0)),
    ]
}

/// Contracts `out` with fixed uneven weights so the upstream gradient is not
/// all ones.
fn project(t: &mut Tape, out: Var) -> Result<Var> {
    let (r, c) = t.value(out).shape();
    let w = Tensor::from_vec(r, c, (0..r * c).map(|i| 0.3 + ((i * 7) % 5) as f64 * 0.2).collect())?;
    let wv = t.constant(w);
    let p = t.mul_elem(out, wv)?;
    t.sum(p)
}

fn squared_sum(t: &mut Tape, out: Var) -> Result<Var> {
    let sq = t.mul_elem(out, out)?;
    t.sum(sq)
}

fn inject(t: &mut Tape, fault: &Option<String>) {
    if let Some(op) = fault {
        t.inject_fault(op.clone());
    }
}

fn worst_of(reports: impl IntoIterator<Item = GradReport>) -> f64 {
    reports.into_iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

/// Gradient checks for every tape op, every aggregator (features,
/// parameter, edge weights), the loss, and full two-layer models.
pub fn run_gradcheck(cfg: &GradConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let fault = &cfg.fault;

    for (name, build, (lo, hi)) in op_table() {
        let mut reports = Vec::new();
        for _ in 0..5 {
            let x = away_from_zero(&mut rng, 6, 3, lo, hi, 1e-3);
            let other = away_from_zero(&mut rng, 6, 3, lo, hi, 1e-3);
            reports.push(grad_check(
                |t, xv| {
                    inject(t, fault);
                    let y = t.constant(other.clone());
                    let o = build(t, xv, y)?;
                    project(t, o)
                },
                &x,
                cfg.step,
            )?);
        }
        out.push(CheckResult::new(format!("op:{name}"), worst_of(reports), cfg.op_tolerance));
    }

    for kind in AggKind::ALL {
        let (mut wrt_h, mut wrt_p, mut wrt_w) = (Vec::new(), Vec::new(), Vec::new());
        for trial in 0..4 {
            let scheme = [WeightScheme::Binary, WeightScheme::SymNorm, WeightScheme::RowNorm][trial % 3];
            let g = Arc::new(random_graph(&mut rng, 7, 0.3, scheme)?);
            let h = random_features(&mut rng, 7, 3, -2.0, 2.0);
            // Keep the shift fixed and every shifted value >= 0.5.
            let mu = ShiftValue { mu_m: h.min().unwrap() - 0.5 };
            let param = kind.param_floor() + rng.random_range(0.05..4.0);
            wrt_h.push(grad_check(
                |t, hv| {
                    inject(t, fault);
                    let o = aggregators::aggregate_on_tape_with_shift(t, &g, hv, kind, ParamInput::Fixed(param), mu)?;
                    squared_sum(t, o)
                },
                &h,
                cfg.step,
            )?);
            if kind.has_param() {
                wrt_p.push(grad_check(
                    |t, pv| {
                        inject(t, fault);
                        let hv = t.constant(h.clone());
                        let o = aggregators::aggregate_on_tape_with_shift(t, &g, hv, kind, ParamInput::Var(pv), mu)?;
                        squared_sum(t, o)
                    },
                    &Tensor::scalar(param),
                    cfg.step,
                )?);
            }
            if kind != AggKind::Max {
                let gb = Arc::new(g.with_scheme(WeightScheme::Binary)?);
                let w: Vec<f64> = (0..gb.num_edges()).map(|_| rng.random_range(0.2..1.0)).collect();
                let hpos = h.map(|x| x + 3.0);
                wrt_w.push(grad_check(
                    |t, wv| {
                        inject(t, fault);
                        let hv = t.constant(hpos.clone());
                        let o = aggregators::aggregate_on_tape(t, &gb, hv, kind, ParamInput::Fixed(param), Some(wv))?;
                        squared_sum(t, o)
                    },
                    &Tensor::column(&w),
                    cfg.step,
                )?);
            }
        }
        out.push(CheckResult::new(format!("agg:{kind}:features"), worst_of(wrt_h), cfg.op_tolerance));
        if kind.has_param() {
            out.push(CheckResult::new(format!("agg:{kind}:param"), worst_of(wrt_p), cfg.op_tolerance));
        }
        if kind != AggKind::Max {
            out.push(CheckResult::new(format!("agg:{kind}:edge_weights"), worst_of(wrt_w), cfg.op_tolerance));
        }
        if kind.has_param() {
            let r = grad_check(
                |t, th| {
                    inject(t, fault);
                    let p = aggregators::reparam_on_tape(t, kind, th)?;
                    let sq = t.mul_elem(p, p)?;
                    t.sum(sq)
                },
                &Tensor::scalar(rng.random_range(-2.0..2.0)),
                cfg.step,
            )?;
            out.push(CheckResult::new(format!("reparam:{kind}"), r.max_rel_error, cfg.op_tolerance));
        }
    }

    let labels: Arc<[usize]> = Arc::from((0..8).map(|i| i % 3).collect::<Vec<_>>());
    let mask: Arc<[usize]> = Arc::from(vec![0, 2, 3, 5, 7]);
    let logits = random_features(&mut rng, 8, 3, -3.0, 3.0);
    let r = grad_check(
        |t, x| {
            inject(t, fault);
            trainer::cross_entropy_on_tape(t, x, Arc::clone(&labels), Arc::clone(&mask))
        },
        &logits,
        cfg.step,
    )?;
    out.push(CheckResult::new("loss:cross_entropy", r.max_rel_error, cfg.op_tolerance));

    for kind in AggKind::ALL {
        let gcn = ModelSpec::gcn(4, 5, 3, AggConfig::new(kind), Weighting::SymNorm, 0.0);
        let gat = ModelSpec::gat(4, 3, 2, 3, AggConfig::new(kind), 0.0);
        for (label, spec) in [("gcn", gcn), ("gat", gat)] {
            let worst = model_grad_check(&spec, &mut rng, cfg)?;
            out.push(CheckResult::new(format!("model:{label}-{kind}"), worst, cfg.model_tolerance));
        }
    }
    Ok(out)
}

fn model_loss(
    graphs: &GraphSet,
    x: &Tensor,
    spec: &ModelSpec,
    params: &ModelParams,
    labels: &Arc<[usize]>,
    fault: &Option<String>,
) -> Result<(Tape, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    inject(&mut tape, fault);
    let vars = models::register_params(&mut tape, params);
    let xv = tape.constant(x.clone());
    let fwd = models::model_forward(&mut tape, graphs, xv, spec, &vars, &mut Mode::Eval)?;
    let mask: Arc<[usize]> = Arc::from((0..x.rows()).collect::<Vec<_>>());
    let loss = trainer::cross_entropy_on_tape(&mut tape, fwd.logits, Arc::clone(labels), mask)?;
    Ok((tape, loss, vars.all))
}

/// Worst relative error over every parameter tensor of a two-layer model on
/// a 10-node graph, dropout disabled.
pub fn model_grad_check(spec: &ModelSpec, rng: &mut ChaCha8Rng, cfg: &GradConfig) -> Result<f64> {
    let n = 10;
    let mut pairs: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    pairs.push((0, n / 2));
    pairs.push((2, 7));
    let g = Graph::build(&EdgeList::new(n, pairs), true, true)?;
    let graphs = GraphSet::new(&g)?;
    let x = random_features(rng, n, spec.layers[0].in_dim, -1.0, 1.0);
    let classes = spec.layers.last().map_or(1, |l| l.output_width());
    let labels: Arc<[usize]> = Arc::from((0..n).map(|i| i % classes).collect::<Vec<_>>());
    let params = models::init_params(spec, rng.random())?;
    let (tape, loss, vars) = model_loss(&graphs, &x, spec, &params, &labels, &cfg.fault)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(v);
        let report = grad_check_against(
            |t| {
                let mut p = params.clone();
                *p.tensors_mut()[i] = t.clone();
                let (tape, loss, _) = model_loss(&graphs, &x, spec, &p, &labels, &None)?;
                Ok(tape.value(loss).item())
            },
            params.tensors()[i].0,
            &analytic,
            cfg.step,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}
