use std::path::Path;
use std::process::{Command, Output};

fn nagg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nagg"))
        .args(args)
        .env_remove("NAGG_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn quick_args(out: &str) -> Vec<&str> {
    vec![
        "--out", out,
        "--set", "sbm_nodes_per_block=40",
        "--set", "max_epochs=15",
        "--set", "patience=15",
        "--set", "val_size=20",
        "--set", "test_size=30",
    ]
}

#[test]
fn misspelled_key_exits_2_with_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let o = nagg(&["train", "--out", out.to_str().unwrap(), "--set", "aggegator=lp"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("aggregator"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn bad_value_exits_2() {
    let o = nagg(&["train", "--set", "dropout=1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_thread_count_exits_2() {
    let o = Command::new(env!("CARGO_BIN_EXE_nagg"))
        .args(["propcheck", "--trials", "1"])
        .env("NAGG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = nagg(&["train", "--set", &format!("dataset={}", missing.display())]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn config_file_and_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# quick\naggregator = poly\nsbm_nodes_per_block = 40\nmax_epochs = 10\npatience = 10\nval_size = 20\ntest_size = 30\n").unwrap();
    let out = dir.path().join("runs");
    let o = nagg(&[
        "train",
        "--config", cfg.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
        "--seed-list", "4,7",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = out.join("sbm-std-gcn-poly");
    for seed in ["4", "7"] {
        for f in ["metrics.json", "loss.csv", "timing.json"] {
            assert!(run.join(seed).join(f).is_file(), "{seed}/{f}");
        }
    }
    assert!(run.join("config.resolved").is_file());
    assert!(stdout(&o).contains("sbm-std-gcn-poly:"));
}

#[test]
fn synth_then_train_on_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = nagg(&["synth", "--out", data.to_str().unwrap(), "--set", "sbm_nodes_per_block=40", "--set", "val_size=20", "--set", "test_size=30"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["edges.tsv", "features.csv", "labels.tsv"] {
        assert!(data.join(f).is_file());
    }
    let out = dir.path().join("runs");
    let out_s = out.to_str().unwrap().to_string();
    let mut args = vec!["train", "--seeds", "2"];
    args.extend(quick_args(&out_s));
    let ds = format!("dataset={}", data.display());
    args.extend(["--set", &ds]);
    let o = nagg(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(Path::new(&out_s).read_dir().unwrap().count() > 0);
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();
    let mut args = vec!["sweep", "--values", "1,4", "--set", "aggregator=lp"];
    args.extend(quick_args(&out));
    let o = nagg(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("sbm-std-gcn-lp-sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("param_value,mean_acc,std_acc"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn propcheck_passes_and_tolerance_override_fails() {
    let o = nagg(&["propcheck", "--trials", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let o = nagg(&["propcheck", "--trials", "10", "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn gradcheck_detects_injected_fault() {
    let o = nagg(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let o = nagg(&["gradcheck", "--inject-fault", "agg_lp"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("FAIL agg:lp:features")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("PASS agg:sum:features")));
}
