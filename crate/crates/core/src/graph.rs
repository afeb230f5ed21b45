//! CSR adjacency with per-edge weights.
//!
//! Row `v` of the matrix lists the neighborhood `N_v` of node `v`; every
//! aggregator reduces over a row. Columns within a row are sorted ascending so
//! that iteration order, and hence every floating-point reduction, is fixed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// How the edge weights of a [`Graph`] were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WeightScheme {
    /// All weights are one.
    Binary,
    /// `D^-1/2 A D^-1/2` with self-loop inclusive degrees.
    SymNorm,
    /// Each row sums to one.
    RowNorm,
    /// Weights supplied from outside, typically learned attention.
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub num_nodes: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl EdgeList {
    pub fn new(num_nodes: usize, pairs: Vec<(usize, usize)>) -> Self {
        EdgeList { num_nodes, pairs }
    }

    /// Parses the tab-separated `src<TAB>dst` format. Lines starting with `#`
    /// and blank lines are skipped. `num_nodes` defaults to one past the
    /// largest index seen.
    pub fn parse(text: &str, num_nodes: Option<usize>, path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut max_index = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::parse(path, i + 1, "expected `src<TAB>dst`"));
            };
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::parse(path, i + 1, format!("bad node id {s:?}: {e}")))
            };
            let (src, dst) = (parse(a)?, parse(b)?);
            max_index = max_index.max(Some(src.max(dst)));
            pairs.push((src, dst));
        }
        let num_nodes = num_nodes.unwrap_or_else(|| max_index.map_or(0, |m| m + 1));
        Ok(EdgeList { num_nodes, pairs })
    }

    pub fn read(path: &Path, num_nodes: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, num_nodes, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &(a, b) in &self.pairs {
            let _ = writeln!(s, "{a}\t{b}");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    edge_weights: Vec<f64>,
    scheme: WeightScheme,
    self_loops: bool,
}

impl Graph {
    /// Builds a binary graph. Duplicate pairs collapse to one edge.
    pub fn build(edges: &EdgeList, add_self_loops: bool, symmetrize: bool) -> Result<Self> {
        let n = edges.num_nodes;
        let mut pairs = Vec::with_capacity(edges.pairs.len() * 2 + n);
        for &(src, dst) in &edges.pairs {
            if src >= n || dst >= n {
                return Err(Error::EdgeOutOfRange {
                    src,
                    dst,
                    num_nodes: n,
                });
            }
            pairs.push((src, dst));
            if symmetrize {
                pairs.push((dst, src));
            }
        }
        if add_self_loops {
            pairs.extend((0..n).map(|v| (v, v)));
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut row_offsets = vec![0usize; n + 1];
        for &(r, _) in &pairs {
            row_offsets[r + 1] += 1;
        }
        for i in 0..n {
            row_offsets[i + 1] += row_offsets[i];
        }
        let col_indices: Vec<usize> = pairs.iter().map(|&(_, c)| c).collect();
        let edge_weights = vec![1.0; col_indices.len()];
        Ok(Graph {
            num_nodes: n,
            row_offsets,
            col_indices,
            edge_weights,
            scheme: WeightScheme::Binary,
            self_loops: add_self_loops,
        })
    }

    /// `D^-1/2 A D^-1/2` where `D` holds the weighted row sums of a binary
    /// graph (self-loops included).
    pub fn sym_normalize(&self) -> Result<Self> {
        if self.scheme != WeightScheme::Binary {
            return Err(Error::Graph(format!(
                "sym_normalize expects a binary graph, got {:?}",
                self.scheme
            )));
        }
        let degree: Vec<f64> = (0..self.num_nodes)
            .map(|v| self.row_weights(v).iter().sum())
            .collect();
        if let Some(node) = degree.iter().position(|&d| d <= 0.0) {
            return Err(Error::ZeroDegree { node });
        }
        let mut out = self.clone();
        for v in 0..self.num_nodes {
            for e in self.edge_range(v) {
                let u = self.col_indices[e];
                out.edge_weights[e] = self.edge_weights[e] / (degree[v] * degree[u]).sqrt();
            }
        }
        out.scheme = WeightScheme::SymNorm;
        Ok(out)
    }

    /// Scales every row to sum to one.
    pub fn row_normalize(&self) -> Result<Self> {
        let mut out = self.clone();
        for v in 0..self.num_nodes {
            let range = self.edge_range(v);
            if range.is_empty() {
                return Err(Error::EmptyRow { node: v });
            }
            let total: f64 = self.edge_weights[range.clone()].iter().sum();
            for w in &mut out.edge_weights[range] {
                *w /= total;
            }
        }
        out.scheme = WeightScheme::RowNorm;
        Ok(out)
    }

    /// Same topology, caller-supplied weights.
    pub fn with_external_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.num_edges() {
            return Err(Error::Shape {
                op: "with_external_weights",
                left: (self.num_edges(), 1),
                right: (weights.len(), 1),
            });
        }
        let mut out = self.clone();
        out.edge_weights.copy_from_slice(weights);
        out.scheme = WeightScheme::External;
        Ok(out)
    }

    pub fn with_scheme(&self, scheme: WeightScheme) -> Result<Self> {
        match scheme {
            WeightScheme::Binary => {
                let mut g = self.clone();
                g.edge_weights.iter_mut().for_each(|w| *w = 1.0);
                g.scheme = WeightScheme::Binary;
                Ok(g)
            }
            WeightScheme::SymNorm => self.with_scheme(WeightScheme::Binary)?.sym_normalize(),
            WeightScheme::RowNorm => self.with_scheme(WeightScheme::Binary)?.row_normalize(),
            WeightScheme::External => Err(Error::Graph(
                "external weights must be supplied explicitly".into(),
            )),
        }
    }

    /// Relabels node `v` as `perm[v]`, keeping weights attached to their edges.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::Graph("permutation length mismatch".into()));
        }
        let mut triples: Vec<(usize, usize, f64)> = Vec::with_capacity(self.num_edges());
        for v in 0..self.num_nodes {
            for e in self.edge_range(v) {
                triples.push((perm[v], perm[self.col_indices[e]], self.edge_weights[e]));
            }
        }
        triples.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_offsets = vec![0usize; self.num_nodes + 1];
        for t in &triples {
            row_offsets[t.0 + 1] += 1;
        }
        for i in 0..self.num_nodes {
            row_offsets[i + 1] += row_offsets[i];
        }
        Ok(Graph {
            num_nodes: self.num_nodes,
            row_offsets,
            col_indices: triples.iter().map(|t| t.1).collect(),
            edge_weights: triples.iter().map(|t| t.2).collect(),
            scheme: self.scheme,
            self_loops: self.self_loops,
        })
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        self.col_indices.len()
    }

    #[inline]
    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    #[inline]
    pub fn has_self_loops(&self) -> bool {
        self.self_loops
    }

    #[inline]
    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    #[inline]
    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    #[inline]
    pub fn edge_weights(&self) -> &[f64] {
        &self.edge_weights
    }

    #[inline]
    pub fn edge_range(&self, v: usize) -> std::ops::Range<usize> {
        self.row_offsets[v]..self.row_offsets[v + 1]
    }

    #[inline]
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.col_indices[self.edge_range(v)]
    }

    #[inline]
    pub fn row_weights(&self, v: usize) -> &[f64] {
        &self.edge_weights[self.edge_range(v)]
    }

    /// Destination row of every edge, in edge order.
    pub fn edge_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.num_edges());
        for v in 0..self.num_nodes {
            rows.extend(std::iter::repeat_n(v, self.edge_range(v).len()));
        }
        rows
    }

    pub fn weight(&self, v: usize, u: usize) -> Option<f64> {
        let range = self.edge_range(v);
        self.col_indices[range.clone()]
            .binary_search(&u)
            .ok()
            .map(|i| self.edge_weights[range.start + i])
    }

    pub fn to_edge_list(&self) -> EdgeList {
        let mut pairs = Vec::with_capacity(self.num_edges());
        for v in 0..self.num_nodes {
            for &u in self.neighbors(v) {
                pairs.push((v, u));
            }
        }
        EdgeList::new(self.num_nodes, pairs)
    }

    /// Checks every structural invariant. Used by tests and after loading.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Graph(m));
        if self.row_offsets.len() != self.num_nodes + 1 || self.row_offsets[0] != 0 {
            return bad("row_offsets malformed".into());
        }
        if *self.row_offsets.last().unwrap() != self.col_indices.len()
            || self.col_indices.len() != self.edge_weights.len()
        {
            return bad("edge arrays have inconsistent lengths".into());
        }
        for v in 0..self.num_nodes {
            if self.row_offsets[v] > self.row_offsets[v + 1] {
                return bad(format!("row_offsets decreases at {v}"));
            }
            let cols = self.neighbors(v);
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {v} unsorted or duplicated"));
            }
            if cols.iter().any(|&u| u >= self.num_nodes) {
                return bad(format!("row {v} has out-of-range column"));
            }
            if self.self_loops && cols.binary_search(&v).is_err() {
                return bad(format!("row {v} missing self-loop"));
            }
            let w = self.row_weights(v);
            if self.scheme != WeightScheme::External && w.iter().any(|&x| !(x > 0.0)) {
                return bad(format!("row {v} has non-positive weight"));
            }
            match self.scheme {
                WeightScheme::Binary if w.iter().any(|&x| x != 1.0) => {
                    return bad(format!("row {v} not binary"));
                }
                WeightScheme::RowNorm if (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 => {
                    return bad(format!("row {v} does not sum to 1"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}
