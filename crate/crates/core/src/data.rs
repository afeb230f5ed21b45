//! Plain-text datasets, the stochastic block model benchmark, split
//! construction and run artifacts.
//!
//! A dataset directory holds `edges.tsv` (`src<TAB>dst`), `features.csv`
//! (one node per line), `labels.tsv` (`node<TAB>class`) and optionally
//! `splits.json` with `train`, `val` and `test` index arrays.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeList, Graph};
use crate::tensor::Tensor;
use crate::trainer::{EpochLog, Metrics, SplitMask};

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const SPLITS_FILE: &str = "splits.json";

/// Header line of `labels.tsv` declaring the class count.
const CLASSES_PREFIX: &str = "# classes:";

#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub name: String,
    /// Binary, symmetrized, with self-loops.
    pub graph: Graph,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Option<SplitMask>,
    /// Lines in the edge file.
    pub raw_edges: usize,
    /// Distinct unordered pairs, self-loops excluded.
    pub undirected_edges: usize,
}

impl DatasetBundle {
    /// Assembles a bundle from raw parts, building the graph the loader uses.
    pub fn new(name: impl Into<String>, edges: &EdgeList, features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let graph = Graph::build(edges, true, true)?;
        let bundle = DatasetBundle {
            name: name.into(),
            undirected_edges: count_undirected(&graph),
            raw_edges: edges.pairs.len(),
            graph,
            features,
            labels,
            num_classes,
            splits: None,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.features.rows() != n || self.labels.len() != n {
            return Err(Error::Parameter(format!(
                "dataset {}: {n} nodes, {} feature rows, {} labels",
                self.name,
                self.features.rows(),
                self.labels.len()
            )));
        }
        if let Some((i, &c)) = self.labels.iter().enumerate().find(|(_, &c)| c >= self.num_classes) {
            return Err(Error::Parameter(format!(
                "dataset {}: node {i} has class {c} of {}",
                self.name, self.num_classes
            )));
        }
        if let Some(s) = &self.splits {
            s.validate(n)?;
        }
        Ok(())
    }

    /// Directed edges of the graph without self-loops, as `u < v` pairs.
    pub fn undirected_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for v in 0..self.num_nodes() {
            pairs.extend(self.graph.neighbors(v).iter().filter(|&&u| u > v).map(|&u| (v, u)));
        }
        pairs
    }
}

fn count_undirected(g: &Graph) -> usize {
    (0..g.num_nodes())
        .map(|v| g.neighbors(v).iter().filter(|&&u| u > v).count())
        .sum()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_features(text: &str, path: &Path) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            return Err(Error::parse(path, i + 1, "empty feature row"));
        }
        let before = data.len();
        for field in line.split(',') {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|e| Error::parse(path, i + 1, format!("bad value {field:?}: {e}")))?;
            if !x.is_finite() {
                return Err(Error::parse(path, i + 1, format!("non-finite value {field:?}")));
            }
            data.push(x);
        }
        let w = data.len() - before;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("row has {w} values, expected {expected}"),
                ));
            }
            _ => {}
        }
        rows += 1;
    }
    Tensor::from_vec(rows, width.unwrap_or(0), data)
}

fn parse_labels(text: &str, n: usize, path: &Path) -> Result<(Vec<usize>, usize)> {
    let mut declared = None;
    let mut labels = vec![None; n];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if let Some(rest) = line.strip_prefix(CLASSES_PREFIX) {
            let k = rest
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::parse(path, i + 1, format!("bad class count: {e}")))?;
            declared = Some(k);
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::parse(path, i + 1, "expected `node<TAB>class`"));
        };
        let parse = |s: &str, what: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::parse(path, i + 1, format!("bad {what} {s:?}: {e}")))
        };
        let (node, class) = (parse(a, "node")?, parse(b, "class")?);
        if node >= n {
            return Err(Error::parse(path, i + 1, format!("node {node} out of range for {n} nodes")));
        }
        if let Some(k) = declared {
            if class >= k {
                return Err(Error::parse(path, i + 1, format!("class {class} out of range for {k} classes")));
            }
        }
        if labels[node].replace(class).is_some() {
            return Err(Error::parse(path, i + 1, format!("node {node} labelled twice")));
        }
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(v, l)| l.ok_or_else(|| Error::parse(path, 0, format!("node {v} has no label"))))
        .collect::<Result<Vec<_>>>()?;
    let k = declared.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Ok((labels, k))
}

/// Reads a dataset directory. The node count comes from `features.csv`.
pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let fpath = dir.join(FEATURES_FILE);
    let features = parse_features(&read_text(&fpath)?, &fpath)?;
    let n = features.rows();
    let epath = dir.join(EDGES_FILE);
    let edges = EdgeList::parse(&read_text(&epath)?, Some(n), &epath)?;
    if let Some(&(src, dst)) = edges.pairs.iter().find(|&&(a, b)| a >= n || b >= n) {
        return Err(Error::EdgeOutOfRange {
            src,
            dst,
            num_nodes: n,
        });
    }
    let lpath = dir.join(LABELS_FILE);
    let (labels, num_classes) = parse_labels(&read_text(&lpath)?, n, &lpath)?;
    let name = dir
        .file_name()
        .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
    let mut bundle = DatasetBundle::new(name, &edges, features, labels, num_classes)?;
    let spath = dir.join(SPLITS_FILE);
    if spath.exists() {
        let splits: SplitMask = serde_json::from_str(&read_text(&spath)?)?;
        splits
            .validate(n)
            .map_err(|e| Error::Split(format!("{}: {e}", spath.display())))?;
        bundle.splits = Some(splits);
    }
    Ok(bundle)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `bundle` in the format [`load_dataset`] reads.
pub fn write_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let edges = EdgeList::new(bundle.num_nodes(), bundle.undirected_pairs());
    write_text(&dir.join(EDGES_FILE), &edges.to_text())?;
    write_text(&dir.join(FEATURES_FILE), &tensor_csv(&bundle.features))?;
    let mut labels = format!("{CLASSES_PREFIX} {}\n", bundle.num_classes);
    for (v, c) in bundle.labels.iter().enumerate() {
        let _ = writeln!(labels, "{v}\t{c}");
    }
    write_text(&dir.join(LABELS_FILE), &labels)?;
    if let Some(s) = &bundle.splits {
        write_text(&dir.join(SPLITS_FILE), &serde_json::to_string(s)?)?;
    }
    Ok(())
}

fn tensor_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        for (j, x) in t.row(r).iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "{x}");
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_shift: f64,
    pub noise_sigma: f64,
}

impl SbmSpec {
    /// The `sbm-std` benchmark.
    pub fn standard() -> Self {
        SbmSpec {
            blocks: 4,
            nodes_per_block: 100,
            p_in: 0.05,
            p_out: 0.005,
            feature_dim: 16,
            feature_shift: 1.0,
            noise_sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.blocks == 0 || self.nodes_per_block == 0 || self.feature_dim == 0 {
            return bad("sbm sizes must be positive".into());
        }
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return bad(format!("need 0 <= p_out < p_in <= 1, got {} and {}", self.p_out, self.p_in));
        }
        if !(self.feature_shift > 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("feature_shift must be positive and noise_sigma non-negative".into());
        }
        Ok(())
    }
}

/// Split sizes: nodes per class for training, then validation and test
/// counts drawn from the rest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub per_class: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn standard() -> Self {
        SplitSizes {
            per_class: 20,
            val: 100,
            test: 200,
        }
    }
}

/// Samples a block model. Block `b` holds nodes `b * m .. (b + 1) * m` and
/// label `b`; its feature mean is `feature_shift` along axis
/// `b mod feature_dim`.
pub fn generate_sbm(spec: &SbmSpec, seed: u64) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.blocks * spec.nodes_per_block;
    let labels: Vec<usize> = (0..n).map(|v| v / spec.nodes_per_block).collect();
    let mut pairs = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            if rng.random_bool(p) {
                pairs.push((u, v));
            }
        }
    }
    let d = spec.feature_dim;
    let mut features = Tensor::zeros(n, d);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    for v in 0..n {
        for k in 0..d {
            let mean = if k == labels[v] % d { spec.feature_shift } else { 0.0 };
            let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            features.set(v, k, mean + eps);
        }
    }
    DatasetBundle::new("sbm", &EdgeList::new(n, pairs), features, labels, spec.blocks)
}

/// Draws `per_class` training nodes per class, then validation and test
/// nodes uniformly from the remainder. Each index list is sorted.
pub fn make_splits(labels: &[usize], num_classes: usize, sizes: SplitSizes, seed: u64) -> Result<SplitMask> {
    let n = labels.len();
    let needed = sizes.per_class * num_classes + sizes.val + sizes.test;
    if needed > n {
        return Err(Error::Split(format!(
            "splits need {needed} nodes but the dataset has {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = vec![false; n];
    let mut train = Vec::with_capacity(sizes.per_class * num_classes);
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..n).filter(|&v| labels[v] == c).collect();
        if members.len() < sizes.per_class {
            return Err(Error::Split(format!(
                "class {c} has {} nodes, fewer than {} requested",
                members.len(),
                sizes.per_class
            )));
        }
        members.shuffle(&mut rng);
        for &v in &members[..sizes.per_class] {
            taken[v] = true;
            train.push(v);
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&v| !taken[v]).collect();
    rest.shuffle(&mut rng);
    let mut val = rest[..sizes.val].to_vec();
    let mut test = rest[sizes.val..sizes.val + sizes.test].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitMask { train, val, test })
}

/// One node per line, comma-separated.
pub fn export_embeddings(h: &Tensor, path: &Path) -> Result<()> {
    write_text(path, &tensor_csv(h))
}

pub const LOSS_HEADER: &str = "epoch,train_loss,val_loss,val_acc,agg_param";

/// Loss curve CSV. Several per-layer parameters share the last column,
/// separated by `;`.
pub fn write_loss_csv(logs: &[EpochLog], path: &Path) -> Result<()> {
    let mut s = format!("{LOSS_HEADER}\n");
    for l in logs {
        let params: Vec<String> = l.param_snapshot.iter().map(|p| p.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            l.epoch,
            l.train_loss,
            l.val_loss,
            l.val_acc,
            params.join(";")
        );
    }
    write_text(path, &s)
}

pub fn write_metrics_json(metrics: &Metrics, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(metrics)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_metrics_json(path: &Path) -> Result<Metrics> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

#[cfg(test)]
mod tests;
