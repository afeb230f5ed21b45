use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::{grad_check_against, DEFAULT_STEP};
use crate::graph::EdgeList;

fn graphs(n: usize, pairs: Vec<(usize, usize)>) -> GraphSet {
    let g = Graph::build(&EdgeList::new(n, pairs), true, true).unwrap();
    GraphSet::new(&g).unwrap()
}

fn ring(n: usize) -> GraphSet {
    let mut pairs: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    pairs.push((0, n / 2));
    graphs(n, pairs)
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn layer(in_dim: usize, out_dim: usize, agg: AggConfig, weighting: Weighting) -> LayerSpec {
    LayerSpec {
        in_dim,
        out_dim,
        agg,
        weighting,
        activation: Activation::None,
        dropout_rate: 0.0,
        attention: None,
    }
}

fn single_layer(g: &Arc<Graph>, h: &Tensor, spec: &LayerSpec, w: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let wv = tape.leaf(w);
    let vars = LayerVars {
        weights: vec![wv],
        attn_dst: vec![],
        attn_src: vec![],
        theta: None,
    };
    let out = gcn_layer_forward(&mut tape, g, hv, spec, &vars, &mut Mode::Eval).unwrap();
    tape.value(out).clone()
}

#[test]
fn init_is_deterministic_and_bounded() {
    let spec = ModelSpec::gcn(1433, 16, 7, AggConfig::new(AggKind::Lp), Weighting::SymNorm, 0.5);
    let a = init_params(&spec, 11).unwrap();
    let b = init_params(&spec, 11).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_params(&spec, 12).unwrap());
    let bound = (6.0f64 / 1449.0).sqrt();
    assert!(a.layers[0].weights[0].data().iter().all(|x| x.abs() <= bound));
    assert_eq!(a.layers[0].weights[0].shape(), (1433, 16));
    assert_eq!(a.layers[0].theta.as_ref().unwrap().item(), AggConfig::new(AggKind::Lp).theta);
}

#[test]
fn init_mean_is_zero() {
    let spec = ModelSpec::gcn(50, 40, 3, AggConfig::new(AggKind::Sum), Weighting::SymNorm, 0.5);
    let p = init_params(&spec, 3).unwrap();
    let w = p.layers[0].weights[0].data();
    let bound = (6.0f64 / 90.0).sqrt();
    // Uniform(-b, b) has variance b^2 / 3.
    let sigma = bound / 3f64.sqrt() / (w.len() as f64).sqrt();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!(mean.abs() < 3.0 * sigma, "mean {mean} sigma {sigma}");
}

#[test]
fn gat_init_shapes() {
    let spec = ModelSpec::gat(5, 8, 8, 3, AggConfig::new(AggKind::Sum), 0.6);
    let p = init_params(&spec, 0).unwrap();
    assert_eq!(p.layers[0].weights.len(), 8);
    assert_eq!(p.layers[0].attn_src[0].shape(), (8, 1));
    assert_eq!(p.layers[1].weights[0].shape(), (64, 3));
    assert!(p.layers[0].theta.is_none());
}

#[test]
fn spec_validation() {
    let mut s = ModelSpec::gcn(4, 3, 2, AggConfig::new(AggKind::Sum), Weighting::SymNorm, 0.5);
    assert!(s.validate().is_ok());
    s.layers[1].in_dim = 5;
    assert!(s.validate().is_err());
    let mut s = ModelSpec::gcn(4, 3, 2, AggConfig::new(AggKind::Sum), Weighting::SymNorm, 1.0);
    assert!(s.validate().is_err());
    s.layers[0].dropout_rate = 0.0;
    s.layers[1].dropout_rate = 0.0;
    s.layers[0].weighting = Weighting::Attention;
    assert!(s.validate().is_err());
}

#[test]
fn identity_layer_on_self_loop() {
    let g = Arc::new(Graph::build(&EdgeList::new(1, vec![]), true, false).unwrap());
    let h = Tensor::from_rows(&[[0.3, -2.0]]);
    let spec = layer(2, 2, AggConfig::new(AggKind::Sum), Weighting::Binary);
    assert_eq!(single_layer(&g, &h, &spec, Tensor::identity(2)), h);
}

#[test]
fn symnorm_sum_layer_example() {
    let gs = graphs(2, vec![(0, 1)]);
    let h = Tensor::column(&[1.0, 3.0]);
    let spec = layer(1, 1, AggConfig::new(AggKind::Sum), Weighting::SymNorm);
    let out = single_layer(&gs.symnorm, &h, &spec, Tensor::scalar(1.0));
    assert!(out.max_abs_diff(&Tensor::column(&[2.0, 2.0])) < 1e-12);
}

#[test]
fn scheme_mismatch_is_rejected() {
    let gs = graphs(2, vec![(0, 1)]);
    let spec = layer(1, 1, AggConfig::new(AggKind::Sum), Weighting::RowNorm);
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::column(&[1.0, 2.0]));
    let w = tape.leaf(Tensor::scalar(1.0));
    let vars = LayerVars {
        weights: vec![w],
        attn_dst: vec![],
        attn_src: vec![],
        theta: None,
    };
    assert!(matches!(
        gcn_layer_forward(&mut tape, &gs.symnorm, h, &spec, &vars, &mut Mode::Eval),
        Err(Error::Graph(_))
    ));
    let h3 = tape.constant(Tensor::column(&[1.0, 2.0, 3.0]));
    assert!(matches!(
        gcn_layer_forward(&mut tape, &gs.rownorm, h3, &spec, &vars, &mut Mode::Eval),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn lp_one_matches_sum_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gs = ring(9);
    let h = random_features(&mut rng, 9, 4);
    let w = random_features(&mut rng, 4, 3);
    let sum = single_layer(&gs.rownorm, &h, &layer(4, 3, AggConfig::new(AggKind::Sum), Weighting::RowNorm), w.clone());
    let lp = AggConfig::fixed(AggKind::Lp, 1.0).unwrap();
    let lp = single_layer(&gs.rownorm, &h, &layer(4, 3, lp, Weighting::RowNorm), w);
    assert!(sum.max_abs_diff(&lp) < 1e-10, "{}", sum.max_abs_diff(&lp));
}

#[test]
fn max_layer_applies_transform_first() {
    let gs = graphs(2, vec![(0, 1)]);
    let h = Tensor::column(&[1.0, 3.0]);
    let mut spec = layer(1, 1, AggConfig::new(AggKind::Max), Weighting::Binary);
    spec.activation = Activation::Relu;
    // max(relu(-h)) is 0, whereas -max(h) would be -3.
    let out = single_layer(&gs.binary, &h, &spec, Tensor::scalar(-1.0));
    assert_eq!(out, Tensor::column(&[0.0, 0.0]));
}

fn gat_vars(tape: &mut Tape, params: &ModelParams) -> ParamVars {
    register_params(tape, params)
}

#[test]
fn uniform_attention_for_identical_features() {
    let gs = ring(6);
    let spec = ModelSpec::gat(3, 4, 2, 2, AggConfig::new(AggKind::Sum), 0.0);
    let params = init_params(&spec, 1).unwrap();
    let mut tape = Tape::new();
    let vars = gat_vars(&mut tape, &params);
    let h = tape.constant(Tensor::full(6, 3, 0.7));
    let a = gat_attention_weights(&mut tape, &gs.binary, h, &vars.layers[0], 1, 0.2).unwrap();
    let a = tape.value(a);
    for v in 0..6 {
        let deg = gs.binary.neighbors(v).len() as f64;
        for e in gs.binary.edge_range(v) {
            assert!((a.get(e, 0) - 1.0 / deg).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_scorer_gives_uniform_attention() {
    let gs = ring(6);
    let spec = ModelSpec::gat(3, 4, 1, 2, AggConfig::new(AggKind::Sum), 0.0);
    let mut params = init_params(&spec, 1).unwrap();
    params.layers[0].attn_dst[0] = Tensor::zeros(4, 1);
    params.layers[0].attn_src[0] = Tensor::zeros(4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let vars = gat_vars(&mut tape, &params);
    let h = tape.constant(random_features(&mut rng, 6, 3));
    let a = gat_attention_weights(&mut tape, &gs.binary, h, &vars.layers[0], 0, 0.2).unwrap();
    for v in 0..6 {
        let deg = gs.binary.neighbors(v).len() as f64;
        for e in gs.binary.edge_range(v) {
            assert!((tape.value(a).get(e, 0) - 1.0 / deg).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_dense_oracle() {
    let gs = graphs(3, vec![(0, 1), (1, 2)]);
    let spec = ModelSpec::gat(2, 3, 1, 2, AggConfig::new(AggKind::Sum), 0.0);
    let params = init_params(&spec, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_features(&mut rng, 3, 2);

    let lp = &params.layers[0];
    let wh = x.matmul(&lp.weights[0]).unwrap();
    let dot = |row: usize, a: &Tensor| (0..3).map(|k| wh.get(row, k) * a.get(k, 0)).sum::<f64>();
    let adj = [[1, 1, 0], [1, 1, 1], [0, 1, 1]];
    let mut dense = [[0.0; 3]; 3];
    for v in 0..3 {
        let scores: Vec<f64> = (0..3)
            .map(|u| {
                let e = dot(v, &lp.attn_dst[0]) + dot(u, &lp.attn_src[0]);
                if e > 0.0 { e } else { 0.2 * e }
            })
            .collect();
        let z: f64 = (0..3).filter(|&u| adj[v][u] == 1).map(|u| scores[u].exp()).sum();
        for u in 0..3 {
            if adj[v][u] == 1 {
                dense[v][u] = scores[u].exp() / z;
            }
        }
    }

    let mut tape = Tape::new();
    let vars = register_params(&mut tape, &params);
    let h = tape.constant(x);
    let a = gat_attention_weights(&mut tape, &gs.binary, h, &vars.layers[0], 0, 0.2).unwrap();
    let a = tape.value(a);
    for v in 0..3 {
        let mut row = 0.0;
        for (e, &u) in gs.binary.edge_range(v).zip(gs.binary.neighbors(v)) {
            assert!((a.get(e, 0) - dense[v][u]).abs() < 1e-10);
            assert!(a.get(e, 0) > 0.0);
            row += a.get(e, 0);
        }
        assert!((row - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_rejects_bad_head() {
    let gs = ring(4);
    let spec = ModelSpec::gat(2, 2, 2, 2, AggConfig::new(AggKind::Sum), 0.0);
    let params = init_params(&spec, 0).unwrap();
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, &params);
    let h = tape.constant(Tensor::zeros(4, 2));
    assert!(gat_attention_weights(&mut tape, &gs.binary, h, &vars.layers[0], 2, 0.2).is_err());
}

#[test]
fn eval_forward_is_deterministic_and_shaped() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gs = ring(10);
    let x = random_features(&mut rng, 10, 5);
    for spec in [
        ModelSpec::gcn(5, 6, 3, AggConfig::new(AggKind::Poly), Weighting::SymNorm, 0.5),
        ModelSpec::gat(5, 4, 3, 3, AggConfig::new(AggKind::Softmax), 0.5),
    ] {
        let params = init_params(&spec, 2).unwrap();
        let a = predict(&gs, &x, &spec, &params).unwrap();
        let b = predict(&gs, &x, &spec, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (10, 3));
    }
}

#[test]
fn zero_features_and_weights_give_zero_logits() {
    let gs = ring(5);
    let spec = ModelSpec::gcn(3, 4, 2, AggConfig::new(AggKind::Sum), Weighting::SymNorm, 0.5);
    let mut params = init_params(&spec, 0).unwrap();
    for t in params.tensors_mut() {
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    let out = predict(&gs, &Tensor::zeros(5, 3), &spec, &params).unwrap();
    assert!(out.data().iter().all(|&x| x == 0.0));
}

#[test]
fn dropout_rate_and_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut tape = Tape::new();
    let n = 20_000;
    let h = tape.constant(Tensor::full(n, 1, 1.0));
    let r = 0.3;
    let out = dropout(&mut tape, h, r, &mut Mode::Train(&mut rng)).unwrap();
    let out = tape.value(out);
    let zeros = out.data().iter().filter(|&&x| x == 0.0).count() as f64 / n as f64;
    let sigma = (r * (1.0 - r) / n as f64).sqrt();
    assert!((zeros - r).abs() < 3.0 * sigma, "zero fraction {zeros}");
    assert!(out.data().iter().all(|&x| x == 0.0 || (x - 1.0 / (1.0 - r)).abs() < 1e-15));

    let same = dropout(&mut tape, h, r, &mut Mode::Eval).unwrap();
    assert_eq!(same, h);
}

#[test]
fn effective_params_follow_sharing() {
    let mut spec = ModelSpec::gcn(3, 4, 2, AggConfig::new(AggKind::Lp), Weighting::SymNorm, 0.5);
    spec.share_theta = true;
    let mut p = init_params(&spec, 0).unwrap();
    assert!(p.layers.iter().all(|l| l.theta.is_none()));
    p.shared_theta = Some(Tensor::scalar(0.0));
    let expected = 1.0 + 2f64.ln();
    for e in p.effective_params(&spec) {
        assert!((e.unwrap() - expected).abs() < 1e-15);
    }
    let tensors = p.tensors();
    assert!(!tensors.last().unwrap().1);
}

/// Squared loss against fixed targets, enough to exercise every parameter.
fn loss_of(gs: &GraphSet, x: &Tensor, spec: &ModelSpec, params: &ModelParams, target: &Tensor) -> Result<(Tape, Var, ParamVars)> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let xv = tape.constant(x.clone());
    let out = model_forward(&mut tape, gs, xv, spec, &vars, &mut Mode::Eval)?;
    let t = tape.constant(target.clone());
    let diff = tape.sub(out.logits, t)?;
    let sq = tape.mul_elem(diff, diff)?;
    let loss = tape.sum(sq)?;
    Ok((tape, loss, vars))
}

fn end_to_end_check(spec: &ModelSpec, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gs = ring(10);
    let x = random_features(&mut rng, 10, 4);
    let target = random_features(&mut rng, 10, 3);
    let params = init_params(spec, seed).unwrap();
    let (tape, loss, vars) = loss_of(&gs, &x, spec, &params, &target).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.all.iter().enumerate() {
        let analytic = grads.get_or_zero(v);
        let base = params.clone();
        let report = grad_check_against(
            |t| {
                let mut p = base.clone();
                *p.tensors_mut()[i] = t.clone();
                let (tape, loss, _) = loss_of(&gs, &x, spec, &p, &target)?;
                Ok(tape.value(loss).item())
            },
            params.tensors()[i].0,
            &analytic,
            DEFAULT_STEP,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

#[test]
fn end_to_end_gradients() {
    for kind in AggKind::ALL {
        let gcn = ModelSpec::gcn(4, 5, 3, AggConfig::new(kind), Weighting::SymNorm, 0.0);
        let err = end_to_end_check(&gcn, 1);
        assert!(err <= 1e-3, "gcn {kind}: {err}");
        let gat = ModelSpec::gat(4, 3, 2, 3, AggConfig::new(kind), 0.0);
        let err = end_to_end_check(&gat, 2);
        assert!(err <= 1e-3, "gat {kind}: {err}");
    }
}

#[test]
fn weighting_parses() {
    assert_eq!("rownorm".parse::<Weighting>().unwrap(), Weighting::RowNorm);
    assert!("rownrm".parse::<Weighting>().is_err());
}
