//! Multi-seed training runs, parameter sweeps and dataset materialization.
//!
//! Output layout for a run named `<dataset>-<model>-<aggregator>`:
//!
//! ```text
//! <out_dir>/<run>/config.resolved
//! <out_dir>/<run>/summary.json
//! <out_dir>/<run>/<seed>/metrics.json
//! <out_dir>/<run>/<seed>/loss.csv
//! <out_dir>/<run>/<seed>/timing.json
//! <out_dir>/<run>/<seed>/embeddings.csv   (export_embeddings = true)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, Resolved, RunConfig};
use crate::data::{self, DatasetBundle};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::trainer::{self, Metrics, SplitMask};

/// Sample mean and standard deviation (`n - 1` denominator, 0 for one
/// value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub metrics: Metrics,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_name: String,
    pub dir: PathBuf,
    pub seeds: Vec<u64>,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub mean_final_train_loss: f64,
    #[serde(skip)]
    pub runs: Vec<SeedRun>,
}

impl RunSummary {
    /// `name: 81.24 ± 1.68 (n seeds)`, accuracies in percent.
    pub fn line(&self) -> String {
        format!(
            "{}: {:.2} ± {:.2} ({} seeds, mean final train loss {:.4})",
            self.run_name,
            100.0 * self.mean_test_acc,
            100.0 * self.std_test_acc,
            self.seeds.len(),
            self.mean_final_train_loss
        )
    }
}

#[derive(Serialize)]
struct Timing {
    wall_time_s: f64,
}

/// A dataset with the splits a run trains on, plus the model built for it.
pub struct Prepared {
    pub resolved: Resolved,
    pub bundle: DatasetBundle,
    pub splits: SplitMask,
    pub spec: ModelSpec,
}

/// Loads or generates the dataset and fixes the splits. Splits come from
/// `splits.json` when the dataset has one, otherwise from `split_seed`.
pub fn prepare(resolved: Resolved) -> Result<Prepared> {
    let bundle = match &resolved.dataset {
        DatasetSource::Sbm { spec, name } => {
            let mut b = data::generate_sbm(spec, resolved.data_seed)?;
            b.name = name.clone();
            b
        }
        DatasetSource::Dir(p) => data::load_dataset(p)?,
    };
    let splits = match &bundle.splits {
        Some(s) => s.clone(),
        None => data::make_splits(&bundle.labels, bundle.num_classes, resolved.split_sizes(), resolved.split_seed)?,
    };
    let spec = resolved.model_spec(bundle.features.cols(), bundle.num_classes);
    spec.validate()?;
    Ok(Prepared {
        resolved,
        bundle,
        splits,
        spec,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Thread pool capped at `threads` workers, or rayon's default.
pub fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        b = b.num_threads(t.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn train_seed(p: &Prepared, run_dir: &Path, seed: u64) -> Result<SeedRun> {
    let start = Instant::now();
    let cfg = trainer::TrainConfig {
        seed,
        ..p.resolved.train.clone()
    };
    let out = trainer::train(&p.bundle, &p.splits, &p.spec, &cfg)?;
    let dir = run_dir.join(seed.to_string());
    create_dir(&dir)?;
    data::write_metrics_json(&out.metrics, &dir.join("metrics.json"))?;
    data::write_loss_csv(&out.logs, &dir.join("loss.csv"))?;
    if p.resolved.export_embeddings {
        let h = trainer::embeddings(&p.bundle, &p.spec, &out.params)?;
        data::export_embeddings(&h, &dir.join("embeddings.csv"))?;
    }
    let timing = Timing {
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write(&dir.join("timing.json"), &(serde_json::to_string(&timing)? + "\n"))?;
    Ok(SeedRun {
        metrics: out.metrics,
        dir,
    })
}

/// Trains every seed of a prepared run under `<out_dir>/<name>/`.
pub fn run_prepared(p: &Prepared, cfg: &RunConfig, name: &str, threads: Option<usize>) -> Result<RunSummary> {
    let run_dir = p.resolved.out_dir.join(name);
    create_dir(&run_dir)?;
    write(&run_dir.join("config.resolved"), &cfg.to_text())?;
    let seeds = p.resolved.seeds.clone();
    let runs: Vec<SeedRun> = pool(threads)?.install(|| {
        seeds
            .par_iter()
            .map(|&s| train_seed(p, &run_dir, s))
            .collect::<Result<Vec<_>>>()
    })?;
    let accs: Vec<f64> = runs.iter().map(|r| r.metrics.test_acc).collect();
    let losses: Vec<f64> = runs.iter().map(|r| r.metrics.final_train_loss).collect();
    let (mean, std) = mean_std(&accs);
    let summary = RunSummary {
        run_name: name.to_string(),
        dir: run_dir.clone(),
        seeds,
        mean_test_acc: mean,
        std_test_acc: std,
        mean_final_train_loss: mean_std(&losses).0,
        runs,
    };
    write(&run_dir.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(summary)
}

/// Validates the whole config and dataset, then trains every seed.
pub fn run_config(cfg: &RunConfig, threads: Option<usize>) -> Result<RunSummary> {
    let p = prepare(cfg.resolve()?)?;
    let name = p.resolved.run_name();
    run_prepared(&p, cfg, &name, threads)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub param_value: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
}

/// Trains one fixed-parameter run per grid value and writes
/// `<out_dir>/<run>-sweep.csv`.
pub fn sweep(cfg: &RunConfig, values: &[f64], threads: Option<usize>) -> Result<(Vec<SweepRow>, PathBuf)> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    // Validate every grid point before training any of them.
    let mut points = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        c.set("agg_learnable", "false")?;
        c.set("agg_param", &v.to_string())?;
        let r = c.resolve()?;
        if !r.agg.kind.has_param() {
            return Err(Error::Config(format!("cannot sweep {} aggregation", r.agg.kind)));
        }
        points.push((v, c, r));
    }
    let mut rows = Vec::with_capacity(points.len());
    let mut base_name = String::new();
    for (v, c, r) in points {
        let p = prepare(r)?;
        base_name = p.resolved.run_name();
        let s = run_prepared(&p, &c, &format!("{base_name}-param{v}"), threads)?;
        rows.push(SweepRow {
            param_value: v,
            mean_acc: s.mean_test_acc,
            std_acc: s.std_test_acc,
        });
    }
    let out_dir = cfg.resolve()?.out_dir;
    let path = out_dir.join(format!("{base_name}-sweep.csv"));
    let mut text = String::from("param_value,mean_acc,std_acc\n");
    for r in &rows {
        let _ = writeln!(text, "{},{},{}", r.param_value, r.mean_acc, r.std_acc);
    }
    write(&path, &text)?;
    Ok((rows, path))
}

/// Writes a generated block-model dataset, with its splits, to `dir`.
pub fn synth(cfg: &RunConfig, dir: &Path) -> Result<DatasetBundle> {
    let r = cfg.resolve()?;
    let DatasetSource::Sbm { spec, name } = &r.dataset else {
        return Err(Error::Config("synth needs dataset = sbm-std or sbm".into()));
    };
    let mut b = data::generate_sbm(spec, r.data_seed)?;
    b.name = name.clone();
    b.splits = Some(data::make_splits(&b.labels, b.num_classes, r.split_sizes(), r.split_seed)?);
    data::write_dataset(&b, dir)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(dir: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        for kv in [
            "sbm_nodes_per_block=30",
            "sbm_p_in=0.2",
            "val_size=20",
            "test_size=40",
            "train_per_class=5",
            "max_epochs=20",
            "patience=20",
            "seeds=0,1",
        ] {
            c.apply_override(kv).unwrap();
        }
        c.set("out_dir", dir.to_str().unwrap()).unwrap();
        c
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn run_writes_per_seed_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = quick(tmp.path());
        c.set("export_embeddings", "true").unwrap();
        let s = run_config(&c, Some(2)).unwrap();
        assert_eq!(s.run_name, "sbm-std-gcn-sum");
        for seed in ["0", "1"] {
            let d = s.dir.join(seed);
            for f in ["metrics.json", "loss.csv", "timing.json", "embeddings.csv"] {
                assert!(d.join(f).exists(), "{f}");
            }
        }
        let accs: Vec<f64> = s
            .runs
            .iter()
            .map(|r| data::read_metrics_json(&r.dir.join("metrics.json")).unwrap().test_acc)
            .collect();
        let (m, sd) = mean_std(&accs);
        assert!((m - s.mean_test_acc).abs() < 1e-9 && (sd - s.std_test_acc).abs() < 1e-9);
        let resolved = RunConfig::read(&s.dir.join("config.resolved")).unwrap();
        assert_eq!(resolved, c);
    }

    #[test]
    fn invalid_dataset_leaves_no_output() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = quick(tmp.path());
        c.set("train_per_class", "500").unwrap();
        assert!(matches!(run_config(&c, None), Err(Error::Split(_))));
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }

    #[test]
    fn sweep_writes_one_row_per_value() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = quick(tmp.path());
        c.set("aggregator", "lp").unwrap();
        c.set("seeds", "0").unwrap();
        let (rows, path) = sweep(&c, &[1.0, 2.0], Some(1)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(fs::read_to_string(path).unwrap().lines().count(), 3);
        c.set("aggregator", "sum").unwrap();
        assert!(sweep(&c, &[1.0], None).is_err());
    }

    #[test]
    fn synth_output_loads() {
        let tmp = tempfile::tempdir().unwrap();
        let b = synth(&RunConfig::default(), tmp.path()).unwrap();
        let back = data::load_dataset(tmp.path()).unwrap();
        assert_eq!(back.graph, b.graph);
        assert_eq!(back.splits, b.splits);
    }
}
