//! GCN and GAT layers with a pluggable aggregator, and the two-layer
//! node classifier built from them.
//!
//! A layer computes `act(AGG(A, dropout(H)) W)`: the aggregator runs on the
//! untransformed input and the linear map comes after. For the linear sum this
//! equals the usual `A H W`. Max aggregation instead follows the
//! GraphSAGE form `max_u act(H_u W)`.
//!
//! GAT layers learn per-edge attention `softmax_{N_v}(LeakyReLU(a_dst . W h_v
//! + a_src . W h_u))` and hand it to the aggregator in place of `A`.

use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregators::{self, AggConfig, AggKind, ParamInput};
use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Graph, WeightScheme};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
    RowSoftmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    SymNorm,
    RowNorm,
    Binary,
    Attention,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::SymNorm => "symnorm",
            Weighting::RowNorm => "rownorm",
            Weighting::Binary => "binary",
            Weighting::Attention => "attention",
        }
    }

    /// Scheme of the graph this weighting aggregates over. Attention runs on
    /// the binary topology and supplies its own weights.
    pub fn scheme(self) -> WeightScheme {
        match self {
            Weighting::SymNorm => WeightScheme::SymNorm,
            Weighting::RowNorm => WeightScheme::RowNorm,
            Weighting::Binary | Weighting::Attention => WeightScheme::Binary,
        }
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Weighting::SymNorm, Weighting::RowNorm, Weighting::Binary, Weighting::Attention]
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown weighting {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub heads: usize,
    pub leaky_slope: f64,
    /// Concatenate head outputs; otherwise average them.
    pub concat: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub agg: AggConfig,
    pub weighting: Weighting,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub attention: Option<AttentionSpec>,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Parameter("layer dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!(
                "dropout {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        match (self.weighting, &self.attention) {
            (Weighting::Attention, Some(a)) if a.heads > 0 => Ok(()),
            (Weighting::Attention, _) => Err(Error::Parameter(
                "attention weighting needs at least one head".into(),
            )),
            (_, Some(_)) => Err(Error::Parameter(
                "attention settings require attention weighting".into(),
            )),
            (_, None) => Ok(()),
        }
    }

    pub fn heads(&self) -> usize {
        self.attention.map_or(1, |a| a.heads)
    }

    /// Width of the layer output after head concatenation.
    pub fn output_width(&self) -> usize {
        match self.attention {
            Some(a) if a.concat => a.heads * self.out_dim,
            _ => self.out_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    /// One aggregator parameter for all layers instead of one per layer.
    pub share_theta: bool,
}

impl ModelSpec {
    /// Two-layer GCN: hidden ReLU layer, linear output layer.
    pub fn gcn(
        in_dim: usize,
        hidden: usize,
        classes: usize,
        agg: AggConfig,
        weighting: Weighting,
        dropout: f64,
    ) -> Self {
        let layer = |in_dim, out_dim, activation| LayerSpec {
            in_dim,
            out_dim,
            agg,
            weighting,
            activation,
            dropout_rate: dropout,
            attention: None,
        };
        ModelSpec {
            layers: vec![
                layer(in_dim, hidden, Activation::Relu),
                layer(hidden, classes, Activation::None),
            ],
            share_theta: false,
        }
    }

    /// Two-layer GAT: `heads` concatenated heads, then a single output head.
    pub fn gat(
        in_dim: usize,
        hidden: usize,
        heads: usize,
        classes: usize,
        agg: AggConfig,
        dropout: f64,
    ) -> Self {
        ModelSpec {
            layers: vec![
                LayerSpec {
                    in_dim,
                    out_dim: hidden,
                    agg,
                    weighting: Weighting::Attention,
                    activation: Activation::Relu,
                    dropout_rate: dropout,
                    attention: Some(AttentionSpec {
                        heads,
                        leaky_slope: 0.2,
                        concat: true,
                    }),
                },
                LayerSpec {
                    in_dim: heads * hidden,
                    out_dim: classes,
                    agg,
                    weighting: Weighting::Attention,
                    activation: Activation::None,
                    dropout_rate: dropout,
                    attention: Some(AttentionSpec {
                        heads: 1,
                        leaky_slope: 0.2,
                        concat: false,
                    }),
                },
            ],
            share_theta: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Parameter("model has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()?;
            if i > 0 && self.layers[i - 1].output_width() != l.in_dim {
                return Err(Error::Parameter(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.in_dim,
                    i - 1,
                    self.layers[i - 1].output_width()
                )));
            }
        }
        if self.share_theta {
            let kinds: Vec<_> = self.layers.iter().map(|l| l.agg.kind).collect();
            if kinds.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Parameter(
                    "shared aggregator parameter needs one aggregator kind".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// One `in_dim x out_dim` matrix per head.
    pub weights: Vec<Tensor>,
    /// Per head, `out_dim x 1` scorer halves for the destination and the
    /// neighbor. Empty for GCN layers.
    pub attn_dst: Vec<Tensor>,
    pub attn_src: Vec<Tensor>,
    /// Raw 1x1 aggregator parameter when learnable and not shared.
    pub theta: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    pub shared_theta: Option<Tensor>,
    pub seed: u64,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("sized by construction")
}

/// Glorot-uniform weights and attention vectors; aggregator parameters start
/// at each layer's configured `theta`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let heads = l.heads();
        let weights = (0..heads).map(|_| glorot(&mut rng, l.in_dim, l.out_dim)).collect();
        let (mut attn_dst, mut attn_src) = (Vec::new(), Vec::new());
        if l.attention.is_some() {
            for _ in 0..heads {
                // The scorer is one (2 * out_dim) x 1 vector split in halves.
                let a = glorot(&mut rng, 2 * l.out_dim, 1).into_data();
                let (dst, src) = a.split_at(l.out_dim);
                attn_dst.push(Tensor::column(dst));
                attn_src.push(Tensor::column(src));
            }
        }
        let theta = (l.agg.learnable && l.agg.kind.has_param() && !spec.share_theta)
            .then(|| Tensor::scalar(l.agg.theta));
        layers.push(LayerParams {
            weights,
            attn_dst,
            attn_src,
            theta,
        });
    }
    let first = &spec.layers[0].agg;
    let shared_theta = (spec.share_theta && first.learnable && first.kind.has_param())
        .then(|| Tensor::scalar(first.theta));
    Ok(ModelParams {
        layers,
        shared_theta,
        seed,
    })
}

impl ModelParams {
    /// Every trainable tensor in a fixed order, paired with whether weight
    /// decay applies. Aggregator parameters are never decayed.
    pub fn tensors(&self) -> Vec<(&Tensor, bool)> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter().map(|t| (t, true)));
            out.extend(l.attn_dst.iter().map(|t| (t, true)));
            out.extend(l.attn_src.iter().map(|t| (t, true)));
            out.extend(l.theta.iter().map(|t| (t, false)));
        }
        out.extend(self.shared_theta.iter().map(|t| (t, false)));
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.weights.iter_mut());
            out.extend(l.attn_dst.iter_mut());
            out.extend(l.attn_src.iter_mut());
            out.extend(l.theta.iter_mut());
        }
        out.extend(self.shared_theta.iter_mut());
        out
    }

    /// Effective p/a/g per layer; `None` for sum and max layers.
    pub fn effective_params(&self, spec: &ModelSpec) -> Vec<Option<f64>> {
        spec.layers
            .iter()
            .zip(&self.layers)
            .map(|(ls, lp)| {
                if !ls.agg.kind.has_param() {
                    return None;
                }
                let theta = lp
                    .theta
                    .as_ref()
                    .or(self.shared_theta.as_ref())
                    .map_or(ls.agg.theta, Tensor::item);
                aggregators::reparam(ls.agg.kind, theta).ok()
            })
            .collect()
    }
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub weights: Vec<Var>,
    pub attn_dst: Vec<Var>,
    pub attn_src: Vec<Var>,
    pub theta: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<LayerVars>,
    /// All handles, in [`ModelParams::tensors`] order.
    pub all: Vec<Var>,
}

/// Puts every parameter on the tape as a trainable leaf.
pub fn register_params(tape: &mut Tape, params: &ModelParams) -> ParamVars {
    let mut all = Vec::new();
    let mut leaf = |tape: &mut Tape, t: &Tensor| {
        let v = tape.leaf(t.clone());
        all.push(v);
        v
    };
    let mut layers = Vec::with_capacity(params.layers.len());
    for l in &params.layers {
        let weights = l.weights.iter().map(|t| leaf(tape, t)).collect();
        let attn_dst = l.attn_dst.iter().map(|t| leaf(tape, t)).collect();
        let attn_src = l.attn_src.iter().map(|t| leaf(tape, t)).collect();
        let theta = l.theta.as_ref().map(|t| leaf(tape, t));
        layers.push(LayerVars {
            weights,
            attn_dst,
            attn_src,
            theta,
        });
    }
    if let Some(t) = &params.shared_theta {
        let v = leaf(tape, t);
        for l in &mut layers {
            l.theta = Some(v);
        }
    }
    ParamVars { layers, all }
}

/// The three weightings of one topology, built once per dataset.
#[derive(Clone, Debug)]
pub struct GraphSet {
    pub binary: Arc<Graph>,
    pub symnorm: Arc<Graph>,
    pub rownorm: Arc<Graph>,
}

impl GraphSet {
    pub fn new(g: &Graph) -> Result<Self> {
        let binary = g.with_scheme(WeightScheme::Binary)?;
        Ok(GraphSet {
            symnorm: Arc::new(binary.sym_normalize()?),
            rownorm: Arc::new(binary.row_normalize()?),
            binary: Arc::new(binary),
        })
    }

    pub fn for_weighting(&self, w: Weighting) -> &Arc<Graph> {
        match w {
            Weighting::SymNorm => &self.symnorm,
            Weighting::RowNorm => &self.rownorm,
            Weighting::Binary | Weighting::Attention => &self.binary,
        }
    }
}

/// Dropout configuration for one forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// `1 / (1 - rate)`.
pub fn dropout(tape: &mut Tape, h: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let Mode::Train(rng) = mode else {
        return Ok(h);
    };
    if rate == 0.0 {
        return Ok(h);
    }
    let (r, c) = tape.value(h).shape();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.mul_const(h, Arc::new(Tensor::from_vec(r, c, mask)?))
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::None => Ok(x),
        Activation::RowSoftmax => tape.row_softmax(x),
    }
}

fn agg_param(tape: &mut Tape, spec: &LayerSpec, theta: Option<Var>) -> Result<ParamInput> {
    if !spec.agg.kind.has_param() {
        return Ok(ParamInput::Fixed(0.0));
    }
    match theta {
        Some(t) => Ok(ParamInput::Var(aggregators::reparam_on_tape(tape, spec.agg.kind, t)?)),
        None => Ok(ParamInput::Fixed(spec.agg.effective()?)),
    }
}

fn check_input(g: &Graph, h: &Tensor, spec: &LayerSpec) -> Result<()> {
    if h.shape() != (g.num_nodes(), spec.in_dim) {
        return Err(Error::Shape {
            op: "layer_forward",
            left: (g.num_nodes(), spec.in_dim),
            right: h.shape(),
        });
    }
    if g.scheme() != spec.weighting.scheme() {
        return Err(Error::Graph(format!(
            "layer wants {} weighting, graph is {:?}",
            spec.weighting.as_str(),
            g.scheme()
        )));
    }
    Ok(())
}

/// Aggregate-then-transform for one head: `AGG(h) W`, or `max_u act(h_u W)`
/// for max aggregation. Returns whether the activation was already applied.
fn head_forward(
    tape: &mut Tape,
    g: &Arc<Graph>,
    h: Var,
    spec: &LayerSpec,
    weight: Var,
    param: ParamInput,
    edge_weights: Option<Var>,
) -> Result<(Var, bool)> {
    if spec.agg.kind == AggKind::Max {
        let z = tape.matmul(h, weight)?;
        let f = activate(tape, z, spec.activation)?;
        let out = aggregators::aggregate_on_tape(tape, g, f, AggKind::Max, param, None)?;
        return Ok((out, true));
    }
    let agg = aggregators::aggregate_on_tape(tape, g, h, spec.agg.kind, param, edge_weights)?;
    Ok((tape.matmul(agg, weight)?, false))
}

/// One GCN layer: `act(AGG(g, dropout(h)) W)`.
pub fn gcn_layer_forward(
    tape: &mut Tape,
    g: &Arc<Graph>,
    h: Var,
    spec: &LayerSpec,
    vars: &LayerVars,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    check_input(g, tape.value(h), spec)?;
    if spec.attention.is_some() {
        return Err(Error::Parameter("gcn layer given attention settings".into()));
    }
    let h = dropout(tape, h, spec.dropout_rate, mode)?;
    let param = agg_param(tape, spec, vars.theta)?;
    let (out, activated) = head_forward(tape, g, h, spec, vars.weights[0], param, None)?;
    if activated {
        Ok(out)
    } else {
        activate(tape, out, spec.activation)
    }
}

/// Attention of one head as an `E x 1` tape value; each row of the graph
/// sums to one.
pub fn gat_attention_weights(
    tape: &mut Tape,
    g: &Graph,
    h: Var,
    vars: &LayerVars,
    head: usize,
    leaky_slope: f64,
) -> Result<Var> {
    if head >= vars.weights.len() || head >= vars.attn_dst.len() {
        return Err(Error::Parameter(format!("head {head} out of range")));
    }
    let wh = tape.matmul(h, vars.weights[head])?;
    let f_dst = tape.matmul(wh, vars.attn_dst[head])?;
    let f_src = tape.matmul(wh, vars.attn_src[head])?;
    let rows: Arc<[usize]> = Arc::from(g.edge_rows());
    let cols: Arc<[usize]> = Arc::from(g.col_indices());
    let e_dst = tape.gather_rows(f_dst, rows)?;
    let e_src = tape.gather_rows(f_src, cols)?;
    let scores = tape.add(e_dst, e_src)?;
    let scores = tape.leaky_relu(scores, leaky_slope)?;
    tape.segment_softmax(scores, Arc::from(g.row_offsets()), 1.0)
}

/// One GAT layer over the binary topology `g`.
pub fn gat_layer_forward(
    tape: &mut Tape,
    g: &Arc<Graph>,
    h: Var,
    spec: &LayerSpec,
    vars: &LayerVars,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    check_input(g, tape.value(h), spec)?;
    let att = spec
        .attention
        .ok_or_else(|| Error::Parameter("gat layer needs attention settings".into()))?;
    let h = dropout(tape, h, spec.dropout_rate, mode)?;
    let param = agg_param(tape, spec, vars.theta)?;
    let mut heads = Vec::with_capacity(att.heads);
    let mut activated = false;
    for k in 0..att.heads {
        let alpha = if spec.agg.kind == AggKind::Max {
            None
        } else {
            Some(gat_attention_weights(tape, g, h, vars, k, att.leaky_slope)?)
        };
        let (out, act) = head_forward(tape, g, h, spec, vars.weights[k], param, alpha)?;
        activated = act;
        heads.push(out);
    }
    let combined = if heads.len() == 1 {
        heads[0]
    } else if att.concat {
        tape.hcat(&heads)?
    } else {
        let mut acc = heads[0];
        for &x in &heads[1..] {
            acc = tape.add(acc, x)?;
        }
        tape.scalar_mul(acc, 1.0 / heads.len() as f64)?
    };
    if activated {
        Ok(combined)
    } else {
        activate(tape, combined, spec.activation)
    }
}

/// Output of [`model_forward`]: hidden representations after each layer
/// and the final logits.
pub struct Forward {
    pub hidden: Vec<Var>,
    pub logits: Var,
}

/// Runs every layer. Logits carry no activation unless the last layer asks
/// for one.
pub fn model_forward(
    tape: &mut Tape,
    graphs: &GraphSet,
    x: Var,
    spec: &ModelSpec,
    vars: &ParamVars,
    mode: &mut Mode<'_>,
) -> Result<Forward> {
    let mut h = x;
    let mut hidden = Vec::with_capacity(spec.layers.len());
    for (ls, lv) in spec.layers.iter().zip(&vars.layers) {
        let g = graphs.for_weighting(ls.weighting);
        h = if ls.attention.is_some() {
            gat_layer_forward(tape, g, h, ls, lv, mode)?
        } else {
            gcn_layer_forward(tape, g, h, ls, lv, mode)?
        };
        hidden.push(h);
    }
    Ok(Forward { hidden, logits: h })
}

/// Eval-mode logits without keeping the tape.
pub fn predict(graphs: &GraphSet, x: &Tensor, spec: &ModelSpec, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let xv = tape.constant(x.clone());
    let out = model_forward(&mut tape, graphs, xv, spec, &vars, &mut Mode::Eval)?;
    Ok(tape.value(out.logits).clone())
}

#[cfg(test)]
mod tests;
