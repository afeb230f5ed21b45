//! Full-batch semi-supervised training: masked cross-entropy, Adam or SGD
//! with momentum, early stopping on validation accuracy.

use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::diff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{self, GraphSet, Mode, ModelParams, ModelSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    SgdMomentum,
}

impl Optimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::Adam => "adam",
            Optimizer::SgdMomentum => "sgd_momentum",
        }
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd_momentum" | "sgd" => Ok(Optimizer::SgdMomentum),
            _ => Err(Error::Parameter(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            weight_decay: 5e-4,
            max_epochs: 500,
            patience: 100,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be non-negative", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.max_epochs == 0 || self.eval_every == 0 {
            return bad("max_epochs and eval_every must be positive".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMask {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitMask {
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Split("training set is empty".into()));
        }
        let mut owner = vec![None; num_nodes];
        for (name, idx) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in idx {
                let slot = owner.get_mut(i).ok_or_else(|| {
                    Error::Split(format!("{name} index {i} out of range for {num_nodes} nodes"))
                })?;
                if let Some(prev) = slot.replace(name) {
                    return Err(Error::Split(format!("node {i} is in both {prev} and {name}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Effective p/a/g of every layer that has one.
    pub param_snapshot: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seed: u64,
    pub test_acc: f64,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    /// Per layer, the effective aggregator parameter of the returned snapshot.
    pub agg_params: Vec<Option<f64>>,
}

fn check_mask(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::Split("empty mask".into()));
    }
    if labels.len() != logits.rows() {
        return Err(Error::Shape {
            op: "masked_cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    for &i in mask {
        if i >= logits.rows() {
            return Err(Error::Split(format!("mask index {i} out of range")));
        }
        if labels[i] >= logits.cols() {
            return Err(Error::Parameter(format!(
                "label {} of node {i} is not below {} classes",
                labels[i],
                logits.cols()
            )));
        }
    }
    Ok(())
}

/// Row maximum `m` and `ln sum exp(x - m)`. The maximal entry's own term is
/// kept out of the sum so confident rows do not round to a zero loss.
fn log_softmax_row(row: &[f64]) -> (f64, f64) {
    let top = argmax(row);
    let m = row[top];
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, x)| (x - m).exp())
        .sum();
    (m, rest.ln_1p())
}

/// Mean over `mask` of `-log softmax(logits)[label]`.
pub fn masked_cross_entropy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    check_mask(logits, labels, mask)?;
    let total: f64 = mask
        .iter()
        .map(|&i| {
            let row = logits.row(i);
            let (m, lz) = log_softmax_row(row);
            (m - row[labels[i]]) + lz
        })
        .sum();
    Ok(total / mask.len() as f64)
}

struct CrossEntropyOp {
    labels: Arc<[usize]>,
    mask: Arc<[usize]>,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let logits = inputs[0];
        let scale = grad.item() / self.mask.len() as f64;
        let mut g = Tensor::zeros(logits.rows(), logits.cols());
        for &i in self.mask.iter() {
            let row = logits.row(i);
            let (m, lz) = log_softmax_row(row);
            for (c, (out, &x)) in g.row_mut(i).iter_mut().zip(row).enumerate() {
                let target = if c == self.labels[i] { 1.0 } else { 0.0 };
                *out += scale * ((x - m - lz).exp() - target);
            }
        }
        Ok(vec![Some(g)])
    }
}

/// [`masked_cross_entropy`] recorded on the tape.
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: Arc<[usize]>, mask: Arc<[usize]>) -> Result<Var> {
    let value = masked_cross_entropy(tape.value(logits), &labels, &mask)?;
    tape.custom(&[logits], Tensor::scalar(value), Box::new(CrossEntropyOp { labels, mask }))
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    check_mask(logits, labels, mask)?;
    let hits = mask
        .iter()
        .filter(|&&i| argmax(logits.row(i)) == labels[i])
        .count();
    Ok(hits as f64 / mask.len() as f64)
}

#[derive(Clone, Debug, Default)]
pub struct OptState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: i32,
}

fn check_step(params: &[&mut Tensor], grads: &[Tensor], decay: &[bool]) -> Result<()> {
    if params.len() != grads.len() || params.len() != decay.len() {
        return Err(Error::Parameter(format!(
            "{} parameters, {} gradients, {} decay flags",
            params.len(),
            grads.len(),
            decay.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "optimizer_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    Ok(())
}

fn decayed_grad(p: &Tensor, g: &Tensor, decay: bool, wd: f64) -> Tensor {
    if decay && wd != 0.0 {
        g.zip_map(p, |g, p| g + wd * p)
    } else {
        g.clone()
    }
}

fn init_state(state: &mut OptState, params: &[&mut Tensor]) {
    if state.first.len() != params.len() {
        state.first = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        state.second = state.first.clone();
        state.step = 0;
    }
}

/// One Adam update with `b1 = 0.9`, `b2 = 0.999`, `eps = 1e-8`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    decay: &[bool],
    state: &mut OptState,
    cfg: &TrainConfig,
) -> Result<()> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    check_step(params, grads, decay)?;
    init_state(state, params);
    state.step += 1;
    let c1 = 1.0 - B1.powi(state.step);
    let c2 = 1.0 - B2.powi(state.step);
    for (i, p) in params.iter_mut().enumerate() {
        let g = decayed_grad(p, &grads[i], decay[i], cfg.weight_decay);
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = B1 * *mi + (1.0 - B1) * gi;
            *vi = B2 * *vi + (1.0 - B2) * gi * gi;
            *x -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
        }
    }
    Ok(())
}

/// Heavy-ball SGD: `v = momentum * v + g; p -= lr * v`.
pub fn sgd_momentum_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    decay: &[bool],
    state: &mut OptState,
    cfg: &TrainConfig,
) -> Result<()> {
    check_step(params, grads, decay)?;
    init_state(state, params);
    state.step += 1;
    for (i, p) in params.iter_mut().enumerate() {
        let g = decayed_grad(p, &grads[i], decay[i], cfg.weight_decay);
        for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(state.first[i].data_mut()) {
            *vi = cfg.momentum * *vi + gi;
            *x -= cfg.lr * *vi;
        }
    }
    Ok(())
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best-validation evaluation.
    pub params: ModelParams,
    pub logs: Vec<EpochLog>,
    pub metrics: Metrics,
}

fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence {
            epoch,
            loss: f64::NAN,
        },
        other => other,
    }
}

fn snapshot(spec: &ModelSpec, params: &ModelParams) -> Vec<f64> {
    params.effective_params(spec).into_iter().flatten().collect()
}

/// Trains `spec` on `bundle` with the given splits. The model is
/// initialised from `cfg.seed`; dropout draws from a separate stream of the
/// same seed.
pub fn train(bundle: &DatasetBundle, splits: &SplitMask, spec: &ModelSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    bundle.validate()?;
    splits.validate(bundle.num_nodes())?;
    if spec.layers[0].in_dim != bundle.features.cols() {
        return Err(Error::Parameter(format!(
            "model expects {} features, dataset has {}",
            spec.layers[0].in_dim,
            bundle.features.cols()
        )));
    }
    let graphs = GraphSet::new(&bundle.graph)?;
    let labels: Arc<[usize]> = Arc::from(bundle.labels.as_slice());
    let train_mask: Arc<[usize]> = Arc::from(splits.train.as_slice());

    let mut params = models::init_params(spec, cfg.seed)?;
    let decay: Vec<bool> = params.tensors().iter().map(|(_, d)| *d).collect();
    let mut state = OptState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut logs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stale = 0;
    let mut last_train_loss = f64::NAN;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut tape = Tape::new();
        let vars = models::register_params(&mut tape, &params);
        let x = tape.constant(bundle.features.clone());
        let fwd = models::model_forward(&mut tape, &graphs, x, spec, &vars, &mut Mode::Train(&mut rng))
            .map_err(|e| divergence(epoch, e))?;
        let loss = cross_entropy_on_tape(&mut tape, fwd.logits, Arc::clone(&labels), Arc::clone(&train_mask))?;
        let train_loss = tape.value(loss).item();
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: train_loss,
            });
        }
        last_train_loss = train_loss;
        let grads = tape.backward(loss).map_err(|e| divergence(epoch, e))?;
        let grads: Vec<Tensor> = vars.all.iter().map(|&v| grads.get_or_zero(v)).collect();
        drop(tape);
        {
            let mut ps = params.tensors_mut();
            match cfg.optimizer {
                Optimizer::Adam => adam_step(&mut ps, &grads, &decay, &mut state, cfg)?,
                Optimizer::SgdMomentum => sgd_momentum_step(&mut ps, &grads, &decay, &mut state, cfg)?,
            }
        }
        if params.tensors().iter().any(|(t, _)| t.find_non_finite().is_some()) {
            return Err(Error::Divergence {
                epoch,
                loss: train_loss,
            });
        }

        if epoch % cfg.eval_every != 0 && epoch != cfg.max_epochs {
            continue;
        }
        let logits = models::predict(&graphs, &bundle.features, spec, &params).map_err(|e| divergence(epoch, e))?;
        let (val_loss, val_acc) = if splits.val.is_empty() {
            (f64::NAN, 0.0)
        } else {
            (
                masked_cross_entropy(&logits, &bundle.labels, &splits.val)?,
                accuracy(&logits, &bundle.labels, &splits.val)?,
            )
        };
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            param_snapshot: snapshot(spec, &params),
        });
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (best_val_acc, best_epoch, best_params) = best.expect("at least one evaluation runs");
    let test_acc = if splits.test.is_empty() {
        0.0
    } else {
        let logits = models::predict(&graphs, &bundle.features, spec, &best_params)?;
        accuracy(&logits, &bundle.labels, &splits.test)?
    };
    let metrics = Metrics {
        seed: cfg.seed,
        test_acc,
        best_val_acc,
        best_epoch,
        epochs_run,
        final_train_loss: last_train_loss,
        agg_params: best_params.effective_params(spec),
    };
    Ok(TrainOutcome {
        params: best_params,
        logs,
        metrics,
    })
}

/// Eval-mode output of the first layer, one row per node.
pub fn embeddings(bundle: &DatasetBundle, spec: &ModelSpec, params: &ModelParams) -> Result<Tensor> {
    let graphs = GraphSet::new(&bundle.graph)?;
    let mut tape = Tape::new();
    let vars = models::register_params(&mut tape, params);
    let x = tape.constant(bundle.features.clone());
    let fwd = models::model_forward(&mut tape, &graphs, x, spec, &vars, &mut Mode::Eval)?;
    Ok(tape.value(fwd.hidden[0]).clone())
}
