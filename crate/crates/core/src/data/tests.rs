use std::path::PathBuf;

use super::*;

fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

fn write_dir(files: &[(&str, &str)]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in files {
        fs::write(dir.path().join(name), text).unwrap();
    }
    dir
}

#[test]
fn loads_toy_fixture() {
    let b = load_dataset(&toy_dir()).unwrap();
    assert_eq!(b.num_nodes(), 2);
    assert_eq!(b.features.cols(), 2);
    assert_eq!(b.undirected_edges, 1);
    assert_eq!(b.raw_edges, 1);
    assert_eq!(b.num_classes, 2);
    assert_eq!(b.graph.num_edges(), 4);
    assert!(b.splits.is_none());
}

#[test]
fn rejects_label_out_of_range() {
    let dir = write_dir(&[
        (EDGES_FILE, "0\t1\n"),
        (FEATURES_FILE, "1,2\n3,4\n"),
        (LABELS_FILE, "# classes: 7\n0\t3\n1\t9\n"),
    ]);
    match load_dataset(dir.path()) {
        Err(Error::Parse { path, line, msg }) => {
            assert!(path.ends_with(LABELS_FILE));
            assert_eq!(line, 3);
            assert!(msg.contains("class 9"), "{msg}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn rejects_ragged_features() {
    let dir = write_dir(&[
        (EDGES_FILE, "0\t1\n"),
        (FEATURES_FILE, "1,2\n3\n"),
        (LABELS_FILE, "0\t0\n1\t0\n"),
    ]);
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    assert!(err.to_string().contains(FEATURES_FILE));
}

#[test]
fn rejects_missing_file_and_bad_edges() {
    let dir = write_dir(&[(FEATURES_FILE, "1\n2\n"), (LABELS_FILE, "0\t0\n1\t0\n")]);
    assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    fs::write(dir.path().join(EDGES_FILE), "0\t5\n").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::EdgeOutOfRange { .. })));
    fs::write(dir.path().join(EDGES_FILE), "0\t1\n").unwrap();
    fs::write(dir.path().join(LABELS_FILE), "0\t0\n").unwrap();
    assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("no label"));
}

#[test]
fn sbm_degenerate_probabilities_give_cliques() {
    let spec = SbmSpec {
        blocks: 2,
        nodes_per_block: 5,
        p_in: 1.0,
        p_out: 0.0,
        feature_dim: 3,
        feature_shift: 2.0,
        noise_sigma: 0.0,
    };
    let b = generate_sbm(&spec, 1).unwrap();
    assert_eq!(b.undirected_edges, 2 * 10);
    for (u, v) in b.undirected_pairs() {
        assert_eq!(b.labels[u], b.labels[v]);
    }
    for v in 0..10 {
        let mut expected = vec![0.0; 3];
        expected[b.labels[v]] = 2.0;
        assert_eq!(b.features.row(v), expected.as_slice());
    }
}

#[test]
fn sbm_edge_count_matches_binomial() {
    let spec = SbmSpec::standard();
    let b = generate_sbm(&spec, 7).unwrap();
    let intra = b.undirected_pairs().iter().filter(|&&(u, v)| b.labels[u] == b.labels[v]).count() as f64;
    let trials = 4.0 * (100.0 * 99.0 / 2.0);
    let mean = trials * 0.05;
    let sigma = (trials * 0.05 * 0.95f64).sqrt();
    assert!((mean - 990.0).abs() < 1e-9);
    assert!((intra - mean).abs() < 5.0 * sigma, "intra {intra}");
    let mut counts = [0; 4];
    b.labels.iter().for_each(|&c| counts[c] += 1);
    assert_eq!(counts, [100; 4]);
    assert_eq!(generate_sbm(&spec, 7).unwrap().features, b.features);
}

#[test]
fn sbm_rejects_bad_spec() {
    let mut s = SbmSpec::standard();
    s.p_out = s.p_in;
    assert!(generate_sbm(&s, 0).is_err());
}

#[test]
fn splits_follow_protocol() {
    let labels: Vec<usize> = (0..2708).map(|v| v % 7).collect();
    let sizes = SplitSizes {
        per_class: 20,
        val: 500,
        test: 1000,
    };
    let s = make_splits(&labels, 7, sizes, 3).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (140, 500, 1000));
    s.validate(2708).unwrap();
    for c in 0..7 {
        assert_eq!(s.train.iter().filter(|&&v| labels[v] == c).count(), 20);
    }
    assert_eq!(make_splits(&labels, 7, sizes, 3).unwrap(), s);
    assert_ne!(make_splits(&labels, 7, sizes, 4).unwrap(), s);
}

#[test]
fn splits_reject_small_class() {
    let labels = vec![0, 0, 0, 1];
    let sizes = SplitSizes {
        per_class: 2,
        val: 0,
        test: 0,
    };
    assert!(make_splits(&labels, 2, sizes, 0).unwrap_err().to_string().contains("class 1"));
    let sizes = SplitSizes {
        per_class: 1,
        val: 2,
        test: 1,
    };
    assert!(make_splits(&labels, 2, sizes, 0).is_err());
}

#[test]
fn export_formats() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("emb.csv");
    export_embeddings(&Tensor::from_rows(&[[1.0, 2.5], [-3.0, 0.0]]), &p).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, ["1,2.5", "-3,0"]);

    let p = dir.path().join("loss.csv");
    write_loss_csv(&[], &p).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), format!("{LOSS_HEADER}\n"));

    let logs = [EpochLog {
        epoch: 3,
        train_loss: 0.5,
        val_loss: 0.75,
        val_acc: 0.25,
        param_snapshot: vec![2.0, 3.0],
    }];
    write_loss_csv(&logs, &p).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap().lines().nth(1), Some("3,0.5,0.75,0.25,2;3"));
}

#[test]
fn metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("metrics.json");
    let m = Metrics {
        seed: 4,
        test_acc: 0.8125,
        best_val_acc: 0.1 + 0.2,
        best_epoch: 17,
        epochs_run: 117,
        final_train_loss: 1.0 / 3.0,
        agg_params: vec![Some(2.5), None],
    };
    write_metrics_json(&m, &p).unwrap();
    assert_eq!(read_metrics_json(&p).unwrap(), m);
}

#[test]
fn write_then_load_is_identity() {
    let mut b = generate_sbm(
        &SbmSpec {
            blocks: 3,
            nodes_per_block: 15,
            p_in: 0.3,
            p_out: 0.02,
            feature_dim: 5,
            feature_shift: 1.5,
            noise_sigma: 0.7,
        },
        11,
    )
    .unwrap();
    b.splits = Some(make_splits(&b.labels, 3, SplitSizes { per_class: 2, val: 5, test: 10 }, 1).unwrap());
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&b, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.graph, b.graph);
    assert_eq!(back.labels, b.labels);
    assert_eq!(back.num_classes, 3);
    assert!(back.features.max_abs_diff(&b.features) <= 1e-12);
    assert_eq!(back.splits, b.splits);
}
