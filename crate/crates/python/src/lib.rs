//! Python bindings for the `nagg` crate.
//!
//! Matrices cross the boundary as lists of row lists; run summaries and
//! check results come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nagg::aggregators::{self, AggKind};
use nagg::checks::{self, CheckResult, GradConfig, PropConfig};
use nagg::config::RunConfig;
use nagg::data::{self, DatasetBundle, SbmSpec};
use nagg::graph::{self, EdgeList, WeightScheme};
use nagg::{runner, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::EdgeOutOfRange { .. } => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_kind(name: &str) -> PyResult<AggKind> {
    name.parse().map_err(py_err)
}

fn scheme(name: &str) -> PyResult<WeightScheme> {
    match name {
        "binary" => Ok(WeightScheme::Binary),
        "symnorm" => Ok(WeightScheme::SymNorm),
        "rownorm" => Ok(WeightScheme::RowNorm),
        other => Err(PyValueError::new_err(format!(
            "unknown weighting {other:?}: expected binary, symnorm or rownorm"
        ))),
    }
}

fn scheme_name(s: WeightScheme) -> &'static str {
    match s {
        WeightScheme::Binary => "binary",
        WeightScheme::SymNorm => "symnorm",
        WeightScheme::RowNorm => "rownorm",
        WeightScheme::External => "external",
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().position(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("row {r} has {} entries, expected {cols}", rows[r].len())));
    }
    let n = rows.len();
    Tensor::from_vec(n, cols, rows.into_iter().flatten().collect()).map_err(py_err)
}

/// CSR graph with weighted edges.
#[pyclass(name = "Graph", frozen)]
struct PyGraph {
    inner: graph::Graph,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (num_nodes, edges, weighting = "binary", self_loops = true, symmetrize = true))]
    fn new(num_nodes: usize, edges: Vec<(usize, usize)>, weighting: &str, self_loops: bool, symmetrize: bool) -> PyResult<Self> {
        let g = graph::Graph::build(&EdgeList::new(num_nodes, edges), self_loops, symmetrize).map_err(py_err)?;
        let inner = g.with_scheme(scheme(weighting)?).map_err(py_err)?;
        Ok(PyGraph { inner })
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    #[getter]
    fn weighting(&self) -> &'static str {
        scheme_name(self.inner.scheme())
    }

    fn neighbors(&self, v: usize) -> PyResult<Vec<usize>> {
        self.check_node(v)?;
        Ok(self.inner.neighbors(v).to_vec())
    }

    fn weights(&self, v: usize) -> PyResult<Vec<f64>> {
        self.check_node(v)?;
        Ok(self.inner.row_weights(v).to_vec())
    }

    /// Same topology under another weighting.
    fn reweighted(&self, weighting: &str) -> PyResult<PyGraph> {
        let inner = self.inner.with_scheme(scheme(weighting)?).map_err(py_err)?;
        Ok(PyGraph { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(num_nodes={}, num_edges={}, weighting={:?})",
            self.inner.num_nodes(),
            self.inner.num_edges(),
            self.weighting()
        )
    }
}

impl PyGraph {
    fn check_node(&self, v: usize) -> PyResult<()> {
        if v >= self.inner.num_nodes() {
            return Err(PyValueError::new_err(format!("node {v} out of range")));
        }
        Ok(())
    }
}

/// A node-classification dataset: graph, features, labels and optional splits.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: DatasetBundle,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.features.to_rows()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.undirected_pairs()
    }

    fn graph(&self, weighting: &str) -> PyResult<PyGraph> {
        let inner = self.inner.graph.with_scheme(scheme(weighting)?).map_err(py_err)?;
        Ok(PyGraph { inner })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        data::write_dataset(&self.inner, &dir).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, num_nodes={}, num_classes={})",
            self.inner.name,
            self.inner.num_nodes(),
            self.inner.num_classes
        )
    }
}

/// Applies one aggregator to `h` (one row per node).
#[pyfunction]
#[pyo3(signature = (kind, graph, h, param = 1.0))]
fn aggregate(kind: &str, graph: &PyGraph, h: Vec<Vec<f64>>, param: f64) -> PyResult<Vec<Vec<f64>>> {
    let h = tensor(h)?;
    let out = aggregators::aggregate(parse_kind(kind)?, &graph.inner, &h, param).map_err(py_err)?;
    Ok(out.to_rows())
}

/// Effective p / alpha / gamma for a raw parameter theta.
#[pyfunction]
fn reparam(kind: &str, theta: f64) -> PyResult<f64> {
    aggregators::reparam(parse_kind(kind)?, theta).map_err(py_err)
}

#[pyfunction]
fn inverse_reparam(kind: &str, value: f64) -> PyResult<f64> {
    aggregators::inverse_reparam(parse_kind(kind)?, value).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (seed = 0, blocks = 4, nodes_per_block = 100, p_in = 0.05, p_out = 0.005, feature_dim = 16))]
fn generate_sbm(
    seed: u64,
    blocks: usize,
    nodes_per_block: usize,
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
) -> PyResult<PyDataset> {
    let spec = SbmSpec {
        blocks,
        nodes_per_block,
        p_in,
        p_out,
        feature_dim,
        ..SbmSpec::standard()
    };
    let inner = data::generate_sbm(&spec, seed).map_err(py_err)?;
    Ok(PyDataset { inner })
}

#[pyfunction]
fn load_dataset(dir: PathBuf) -> PyResult<PyDataset> {
    let inner = data::load_dataset(&dir).map_err(py_err)?;
    Ok(PyDataset { inner })
}

fn value_text(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(b) = v.extract::<bool>() {
        return Ok(b.to_string());
    }
    Ok(v.str()?.to_string())
}

/// Trains one configuration. `settings` maps config keys to values, exactly
/// as `--set key=value` on the command line. Returns the run summary.
#[pyfunction]
#[pyo3(signature = (settings = None, threads = None))]
fn train<'py>(py: Python<'py>, settings: Option<&Bound<'py, PyDict>>, threads: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = RunConfig::default();
    if let Some(s) = settings {
        for (k, v) in s.iter() {
            cfg.set(&k.extract::<String>()?, &value_text(&v)?).map_err(py_err)?;
        }
    }
    let summary = py.detach(|| runner::run_config(&cfg, threads)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("run_name", &summary.run_name)?;
    out.set_item("dir", summary.dir.to_string_lossy().into_owned())?;
    out.set_item("seeds", summary.seeds.clone())?;
    out.set_item("mean_test_acc", summary.mean_test_acc)?;
    out.set_item("std_test_acc", summary.std_test_acc)?;
    out.set_item("mean_final_train_loss", summary.mean_final_train_loss)?;
    let mut runs = Vec::new();
    for r in &summary.runs {
        let m = PyDict::new(py);
        m.set_item("seed", r.metrics.seed)?;
        m.set_item("test_acc", r.metrics.test_acc)?;
        m.set_item("best_val_acc", r.metrics.best_val_acc)?;
        m.set_item("best_epoch", r.metrics.best_epoch)?;
        m.set_item("epochs_run", r.metrics.epochs_run)?;
        m.set_item("final_train_loss", r.metrics.final_train_loss)?;
        m.set_item("agg_params", r.metrics.agg_params.clone())?;
        runs.push(m);
    }
    out.set_item("runs", runs)?;
    Ok(out)
}

fn results<'py>(py: Python<'py>, rs: Vec<CheckResult>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    rs.into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", r.name)?;
            d.set_item("worst", r.worst)?;
            d.set_item("tolerance", r.tolerance)?;
            d.set_item("passed", r.passed)?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
#[pyo3(signature = (trials = 100, seed = None, tolerance = None))]
fn propcheck<'py>(py: Python<'py>, trials: usize, seed: Option<u64>, tolerance: Option<f64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = PropConfig {
        trials,
        tolerance,
        ..PropConfig::default()
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let rs = py.detach(|| checks::run_propcheck(&cfg)).map_err(py_err)?;
    results(py, rs)
}

#[pyfunction]
#[pyo3(signature = (inject_fault = None, seed = None))]
fn gradcheck<'py>(py: Python<'py>, inject_fault: Option<String>, seed: Option<u64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = GradConfig {
        fault: inject_fault,
        ..GradConfig::default()
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let rs = py.detach(|| checks::run_gradcheck(&cfg)).map_err(py_err)?;
    results(py, rs)
}

#[pymodule]
fn nagg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(reparam, m)?)?;
    m.add_function(wrap_pyfunction!(inverse_reparam, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sbm, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(propcheck, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("AGGREGATORS", AggKind::ALL.iter().map(|k| k.as_str()).collect::<Vec<_>>())?;
    Ok(())
}
