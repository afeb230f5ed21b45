//! Acceptance suite. Prints one PASS / FAIL / SKIP line per criterion and
//! exits non-zero when any criterion fails.
//!
//! Criterion 9 needs a Cora directory in `NAGG_CORA_DIR`; without it the
//! criterion is skipped.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nagg::aggregators::{self, AggKind, ParamInput, ShiftValue};
use nagg::checks::{self, GradConfig, PropConfig};
use nagg::config::RunConfig;
use nagg::diff::Tape;
use nagg::graph::{EdgeList, Graph, WeightScheme};
use nagg::runner::{self, RunSummary};
use nagg::Tensor;

type Res<T> = Result<T, Box<dyn std::error::Error>>;

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        Outcome {
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
        }
    }
}

fn within(budget: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t < budget, format!("{:.1}s of {}s", t.as_secs_f64(), budget.as_secs()))
}

// Independent helpers: graphs, features and per-node reference formulas
// written directly from the definitions.

fn graph(rng: &mut ChaCha8Rng, n: usize, scheme: WeightScheme) -> Res<Graph> {
    let density: f64 = rng.random_range(0.05..0.4);
    let mut pairs = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random_bool(density) {
                pairs.push((u, v));
            }
        }
    }
    Ok(Graph::build(&EdgeList::new(n, pairs), true, true)?.with_scheme(scheme)?)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, d: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..n * d).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(n, d, data).unwrap()
}

/// Column entries spaced at least 0.1 apart, so every neighborhood has a
/// unique maximum with gap >= 0.1.
fn gapped(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let base: f64 = rng.random_range(-4.0..4.0);
    let mut h = Tensor::zeros(n, d);
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..d {
        order.shuffle(rng);
        for (rank, &u) in order.iter().enumerate() {
            h.set(u, k, base + 0.14 * rank as f64 + rng.random_range(0.0..0.04));
        }
    }
    h
}

fn min_gap(g: &Graph, h: &Tensor) -> f64 {
    let mut gap = f64::INFINITY;
    for v in 0..g.num_nodes() {
        for k in 0..h.cols() {
            let mut vals: Vec<f64> = g.neighbors(v).iter().map(|&u| h.get(u, k)).collect();
            if vals.len() < 2 {
                continue;
            }
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            gap = gap.min(vals[0] - vals[1]);
        }
    }
    gap
}

fn range(h: &Tensor) -> f64 {
    h.max().unwrap() - h.min().unwrap()
}

fn global_min(h: &Tensor) -> f64 {
    h.data().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Dense adjacency read back through `weight(v, u)`.
fn dense(g: &Graph) -> Vec<Vec<f64>> {
    let n = g.num_nodes();
    (0..n)
        .map(|v| (0..n).map(|u| g.weight(v, u).unwrap_or(0.0)).collect())
        .collect()
}

/// Reference value of one aggregator at `(v, k)` by a plain loop over a
/// dense adjacency row. No log-space tricks.
fn reference(kind: AggKind, a: &[Vec<f64>], h: &Tensor, v: usize, k: usize, param: f64, mu: f64) -> f64 {
    const EPS: f64 = 1e-12;
    let nbrs: Vec<usize> = (0..a.len()).filter(|&u| a[v][u] != 0.0).collect();
    let y = |u: usize| (h.get(u, k) - mu).max(EPS);
    match kind {
        AggKind::Sum => nbrs.iter().map(|&u| a[v][u] * h.get(u, k)).sum(),
        AggKind::Max => nbrs.iter().map(|&u| h.get(u, k)).fold(f64::NEG_INFINITY, f64::max),
        AggKind::Lp => nbrs.iter().map(|&u| a[v][u] * y(u).powf(param)).sum::<f64>().powf(1.0 / param) + mu,
        AggKind::Poly => {
            let num: f64 = nbrs.iter().map(|&u| a[v][u] * y(u).powf(param + 1.0)).sum();
            let den: f64 = nbrs.iter().map(|&u| a[v][u] * y(u).powf(param)).sum();
            num / den + mu
        }
        AggKind::Softmax => {
            let z: f64 = nbrs.iter().map(|&u| (param * h.get(u, k)).exp()).sum();
            nbrs.iter()
                .map(|&u| a[v][u] * h.get(u, k) * (param * h.get(u, k)).exp() / z)
                .sum()
        }
    }
}

fn max_diff_vs(out: &Tensor, f: impl Fn(usize, usize) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for v in 0..out.rows() {
        for k in 0..out.cols() {
            worst = worst.max((out.get(v, k) - f(v, k)).abs());
        }
    }
    worst
}

fn neighborhood_mean(g: &Graph, h: &Tensor, v: usize, k: usize, weighted: bool) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &u in g.neighbors(v) {
        let w = if weighted { g.weight(v, u).unwrap() } else { 1.0 };
        num += w * h.get(u, k);
        den += w;
    }
    num / den
}

fn neighborhood_max(g: &Graph, h: &Tensor, v: usize, k: usize) -> f64 {
    g.neighbors(v).iter().map(|&u| h.get(u, k)).fold(f64::NEG_INFINITY, f64::max)
}

/// Shared driver for criteria 1 to 3: exact specialization plus the
/// large-parameter limit on 50 graphs each.
fn proposition(
    kind: AggKind,
    seed: u64,
    schemes: &[WeightScheme],
    exact_param: f64,
    exact: impl Fn(&Graph, &Tensor, usize, usize) -> f64,
    limit_tol: f64,
) -> Res<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_exact: f64 = 0.0;
    let mut worst_limit: f64 = 0.0;
    let mut graphs = 0;
    while graphs < 50 {
        let scheme = schemes[graphs % schemes.len()];
        let n = rng.random_range(2..=50);
        let d = rng.random_range(1..=8);
        let g = graph(&mut rng, n, scheme)?;

        let h = uniform(&mut rng, n, d, -3.0, 3.0);
        let out = aggregators::aggregate(kind, &g, &h, exact_param)?;
        worst_exact = worst_exact.max(max_diff_vs(&out, |v, k| exact(&g, &h, v, k)));

        let hg = gapped(&mut rng, n, d);
        if min_gap(&g, &hg) < 0.1 {
            continue;
        }
        let out = aggregators::aggregate(kind, &g, &hg, 128.0)?;
        let rel = max_diff_vs(&out, |v, k| neighborhood_max(&g, &hg, v, k)) / range(&hg).max(1e-12);
        worst_limit = worst_limit.max(rel);
        graphs += 1;
    }
    let (fast, time) = within(Duration::from_secs(5), start);
    Ok(Outcome::check(
        worst_exact <= 1e-10 && worst_limit <= limit_tol && fast,
        format!(
            "exact {worst_exact:.2e} (tol 1e-10), limit {:.3}% of range (tol {}%), {time}",
            100.0 * worst_limit,
            100.0 * limit_tol
        ),
    ))
}

fn criterion_1() -> Res<Outcome> {
    proposition(
        AggKind::Lp,
        101,
        &[WeightScheme::SymNorm, WeightScheme::Binary],
        1.0,
        |g, h, v, k| {
            let mu = global_min(h);
            g.neighbors(v).iter().map(|&u| g.weight(v, u).unwrap() * (h.get(u, k) - mu)).sum::<f64>() + mu
        },
        0.05,
    )
}

fn criterion_2() -> Res<Outcome> {
    proposition(
        AggKind::Poly,
        102,
        &[WeightScheme::SymNorm, WeightScheme::Binary],
        0.0,
        |g, h, v, k| neighborhood_mean(g, h, v, k, true),
        0.05,
    )
}

fn criterion_3() -> Res<Outcome> {
    proposition(
        AggKind::Softmax,
        103,
        &[WeightScheme::Binary],
        0.0,
        |g, h, v, k| neighborhood_mean(g, h, v, k, false),
        0.01,
    )
}

fn criterion_4() -> Res<Outcome> {
    let start = Instant::now();
    let cfg = PropConfig {
        seed: 104,
        trials: 100,
        tolerance: None,
    };
    let results = checks::run_propcheck(&cfg)?;
    let props: Vec<_> = results
        .iter()
        .filter(|r| ["monotone", "bounds", "equivariant"].iter().any(|s| r.name.contains(s)))
        .collect();
    let failed: Vec<&str> = props.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let (fast, time) = within(Duration::from_secs(30), start);
    Ok(Outcome::check(
        props.len() == 12 && failed.is_empty() && fast,
        format!("{} properties x 100 trials, failed [{}], {time}", props.len(), failed.join(", ")),
    ))
}

/// Relative error used throughout: |a - n| / max(1, |a|, |n|).
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Central differences of `R . AGG(h)` with respect to features and the
/// effective parameter, against the tape gradient.
fn aggregator_fd(kind: AggKind, rng: &mut ChaCha8Rng) -> Res<(f64, f64)> {
    const STEP: f64 = 1e-6;
    let n = rng.random_range(3..=12);
    let d = rng.random_range(1..=4);
    let scheme = if kind == AggKind::Softmax {
        WeightScheme::Binary
    } else {
        WeightScheme::SymNorm
    };
    let g = Arc::new(graph(rng, n, scheme)?);
    let h = if kind == AggKind::Max {
        gapped(rng, n, d)
    } else {
        uniform(rng, n, d, 0.5, 3.0)
    };
    let mu = ShiftValue { mu_m: global_min(&h) - 0.5 };
    let param = match kind {
        AggKind::Lp => rng.random_range(1.2..4.0),
        AggKind::Poly | AggKind::Softmax => rng.random_range(0.3..3.0),
        _ => 0.0,
    };
    let r = Arc::new(uniform(rng, n, d, -1.0, 1.0));

    let forward = |h: &Tensor, p: f64| -> Res<f64> {
        let out = match kind {
            AggKind::Lp => aggregators::agg_lp(&g, h, p, mu)?,
            AggKind::Poly => aggregators::agg_poly(&g, h, p, mu)?,
            _ => aggregators::aggregate(kind, &g, h, p)?,
        };
        Ok(out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };

    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let pv = tape.leaf(Tensor::scalar(param));
    let input = if kind.has_param() {
        ParamInput::Var(pv)
    } else {
        ParamInput::Fixed(0.0)
    };
    let out = aggregators::aggregate_on_tape_with_shift(&mut tape, &g, hv, kind, input, mu)?;
    let weighted = tape.mul_const(out, Arc::clone(&r))?;
    let loss = tape.sum(weighted)?;
    let grads = tape.backward(loss)?;
    let gh = grads.get_or_zero(hv);

    let mut worst_h: f64 = 0.0;
    let mut probe = h.clone();
    for i in 0..h.len() {
        let x = h.data()[i];
        probe.data_mut()[i] = x + STEP;
        let plus = forward(&probe, param)?;
        probe.data_mut()[i] = x - STEP;
        let minus = forward(&probe, param)?;
        probe.data_mut()[i] = x;
        worst_h = worst_h.max(rel_err(gh.data()[i], (plus - minus) / (2.0 * STEP)));
    }
    let worst_p = if kind.has_param() {
        let numeric = (forward(&h, param + STEP)? - forward(&h, param - STEP)?) / (2.0 * STEP);
        rel_err(grads.get_or_zero(pv).item(), numeric)
    } else {
        0.0
    };
    Ok((worst_h, worst_p))
}

fn criterion_5() -> Res<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst_agg: f64 = 0.0;
    for kind in AggKind::ALL {
        for _ in 0..10 {
            let (a, b) = aggregator_fd(kind, &mut rng)?;
            worst_agg = worst_agg.max(a).max(b);
        }
    }
    let results = checks::run_gradcheck(&GradConfig {
        seed: 105,
        ..GradConfig::default()
    })?;
    let worst_model = results
        .iter()
        .filter(|r| r.name.starts_with("model:"))
        .map(|r| r.worst)
        .fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let (fast, time) = within(Duration::from_secs(60), start);
    Ok(Outcome::check(
        worst_agg <= 1e-4 && worst_model <= 1e-3 && failed.is_empty() && fast,
        format!(
            "aggregators {worst_agg:.2e} (tol 1e-4), two-layer models {worst_model:.2e} (tol 1e-3), \
             {} suite checks failed, {time}",
            failed.len()
        ),
    ))
}

fn criterion_6() -> Res<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let schemes = [WeightScheme::Binary, WeightScheme::SymNorm, WeightScheme::RowNorm];
    let mut worst: f64 = 0.0;
    for t in 0..20 {
        let n = rng.random_range(2..=40);
        let d = rng.random_range(1..=6);
        let g = graph(&mut rng, n, schemes[t % 3])?;
        let h = uniform(&mut rng, n, d, -3.0, 3.0);
        let a = dense(&g);
        let mu = global_min(&h);
        let cases: [(AggKind, &[f64]); 5] = [
            (AggKind::Sum, &[0.0]),
            (AggKind::Max, &[0.0]),
            (AggKind::Lp, &[1.0, 1.5, 2.0, 3.7, 8.0, 16.0]),
            (AggKind::Poly, &[0.0, 0.5, 1.0, 2.5, 8.0, 16.0]),
            (AggKind::Softmax, &[0.0, 0.5, 1.0, 4.0, 16.0]),
        ];
        for (kind, params) in cases {
            for &p in params {
                let out = aggregators::aggregate(kind, &g, &h, p)?;
                let m = if matches!(kind, AggKind::Lp | AggKind::Poly) { mu } else { 0.0 };
                worst = worst.max(max_diff_vs(&out, |v, k| reference(kind, &a, &h, v, k, p, m)));
            }
        }
    }
    let (fast, time) = within(Duration::from_secs(10), start);
    Ok(Outcome::check(
        worst <= 1e-8 && fast,
        format!("max |kernel - dense| {worst:.2e} (tol 1e-8), {time}"),
    ))
}

struct Desk {
    runs: Vec<(AggKind, RunSummary)>,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn desk_runs() -> Res<Desk> {
    let dir = tempfile::tempdir()?;
    let start = Instant::now();
    let mut runs = Vec::new();
    for kind in AggKind::ALL {
        let mut cfg = RunConfig::default();
        cfg.set("dataset", "sbm-std")?;
        cfg.set("aggregator", kind.as_str())?;
        cfg.set("seeds", "0..10")?;
        cfg.set("out_dir", &dir.path().to_string_lossy())?;
        runs.push((kind, runner::run_config(&cfg, None)?));
    }
    Ok(Desk {
        runs,
        elapsed: start.elapsed(),
        _dir: dir,
    })
}

fn sum_run(desk: &Desk) -> &RunSummary {
    &desk.runs.iter().find(|(k, _)| *k == AggKind::Sum).unwrap().1
}

fn criterion_7(desk: &Desk) -> Res<Outcome> {
    let base = sum_run(desk).mean_test_acc;
    let finite = desk
        .runs
        .iter()
        .all(|(_, s)| s.runs.iter().all(|r| r.metrics.final_train_loss.is_finite()));
    let mut ok = finite && desk.elapsed < Duration::from_secs(600);
    let mut parts = Vec::new();
    for (kind, s) in &desk.runs {
        let line = format!("{} {:.2}±{:.2}", kind, 100.0 * s.mean_test_acc, 100.0 * s.std_test_acc);
        if kind.has_param() && s.mean_test_acc < base - 0.02 {
            ok = false;
            parts.push(format!("{line} (below {:.2})", 100.0 * (base - 0.02)));
        } else {
            parts.push(line);
        }
    }
    Ok(Outcome::check(
        ok,
        format!("{}; finite {finite}; {:.0}s of 600s", parts.join(", "), desk.elapsed.as_secs_f64()),
    ))
}

fn criterion_8(desk: &Desk) -> Res<Outcome> {
    let bound = sum_run(desk).mean_final_train_loss * 1.05;
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, s) in desk.runs.iter().filter(|(k, _)| k.has_param()) {
        let pass = s.mean_final_train_loss <= bound;
        ok &= pass;
        parts.push(format!(
            "{} {:.4}{}",
            kind,
            s.mean_final_train_loss,
            if pass { "" } else { " (over)" }
        ));
    }
    Ok(Outcome::check(
        ok,
        format!("bound {bound:.4} (sum x 1.05); {}", parts.join(", ")),
    ))
}

fn criterion_9() -> Res<Outcome> {
    let Some(cora) = std::env::var_os("NAGG_CORA_DIR").map(PathBuf::from) else {
        return Ok(Outcome {
            status: Status::Skip,
            detail: "NAGG_CORA_DIR not set".into(),
        });
    };
    if !cora.is_dir() {
        return Ok(Outcome {
            status: Status::Skip,
            detail: format!("{} is not a directory", cora.display()),
        });
    }
    let out = tempfile::tempdir()?;
    let start = Instant::now();
    let mut means = Vec::new();
    for kind in [AggKind::Sum, AggKind::Lp, AggKind::Poly, AggKind::Softmax] {
        let mut cfg = RunConfig::default();
        cfg.set("dataset", &cora.to_string_lossy())?;
        cfg.set("aggregator", kind.as_str())?;
        cfg.set("seeds", "0..10")?;
        cfg.set("out_dir", &out.path().to_string_lossy())?;
        means.push((kind, runner::run_config(&cfg, None)?.mean_test_acc));
    }
    let base = means[0].1;
    let mut ok = (0.78..=0.84).contains(&base);
    ok &= means[1..].iter().all(|&(_, m)| m >= base - 0.005);
    let (fast, time) = within(Duration::from_secs(900), start);
    let parts: Vec<String> = means.iter().map(|(k, m)| format!("{k} {:.2}", 100.0 * m)).collect();
    Ok(Outcome::check(ok && fast, format!("{}; {time}", parts.join(", "))))
}

fn read(p: &Path) -> Res<Vec<u8>> {
    Ok(std::fs::read(p)?)
}

fn criterion_10() -> Res<Outcome> {
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir()?;
        let mut cfg = RunConfig::default();
        cfg.set("aggregator", "lp")?;
        cfg.set("seeds", "3")?;
        cfg.set("out_dir", &out.path().to_string_lossy())?;
        let s = runner::run_config(&cfg, None)?;
        bytes.push(read(&s.runs[0].dir.join("metrics.json"))?);
    }
    Ok(Outcome::check(
        !bytes[0].is_empty() && bytes[0] == bytes[1],
        format!("{} bytes, identical {}", bytes[0].len(), bytes[0] == bytes[1]),
    ))
}

fn main() -> ExitCode {
    let desk = desk_runs();
    let desk_outcome = |f: fn(&Desk) -> Res<Outcome>| -> Res<Outcome> {
        match &desk {
            Ok(d) => f(d),
            Err(e) => Err(format!("desk-scale runs failed: {e}").into()),
        }
    };
    let results: Vec<(u32, Res<Outcome>)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6()),
        (7, desk_outcome(criterion_7)),
        (8, desk_outcome(criterion_8)),
        (9, criterion_9()),
        (10, criterion_10()),
    ];
    let mut failed = 0;
    for (n, r) in results {
        let o = r.unwrap_or_else(|e| Outcome {
            status: Status::Fail,
            detail: format!("error: {e}"),
        });
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!("criterion {n:>2}: {tag}  {}", o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
