use std::io::BufReader;

use pmedit::facts::{self, FactOptions};
use pmedit::harness::{sweep_batch, ExperimentConfig};
use pmedit::metrics::{self, BatchTag};
use pmedit::solvers::Method;
use pmedit::toymodel::{ModelConfig, Snapshot};
use pmedit::{weights, ToyModel};

#[test]
fn fact_jsonl_round_trip_is_exact() {
    let fs = facts::generate_fact_set_with(6, 9, 7, 5, 12, 40, &FactOptions::default(), 3).unwrap();
    let mut buf = Vec::new();
    facts::write_jsonl(&mut buf, &fs).unwrap();
    assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 6);
    let back = facts::read_jsonl(BufReader::new(buf.as_slice())).unwrap();
    assert_eq!(back, fs);
}

#[test]
fn snapshot_file_round_trip_restores_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ToyModel::new(&ModelConfig {
        d_ctx: 8,
        d_k: 6,
        d_v: 5,
        vocab: 10,
        layers: 3,
        ..Default::default()
    })
    .unwrap();
    let snap = model.snapshot().unwrap();
    snap.write(dir.path().join("snap.bin")).unwrap();
    let delta = model.weights(1).unwrap().map(|x| 0.5 * x);
    model.apply_delta(1, &delta).unwrap();
    assert_ne!(model.weights_hash().unwrap(), snap.hash);
    model
        .restore(&Snapshot::read(dir.path().join("snap.bin")).unwrap())
        .unwrap();
    assert_eq!(model.weights_hash().unwrap(), snap.hash);
    assert_eq!(
        weights::encode(model.layers()).unwrap(),
        weights::encode(&snap.layers).unwrap()
    );
}

#[test]
fn csv_round_trip_preserves_empty_columns() {
    let cfg = ExperimentConfig {
        methods: vec![Method::Rome, Method::Emmet],
        model: ModelConfig {
            d_ctx: 12,
            d_k: 10,
            d_v: 8,
            vocab: 20,
            layers: 3,
            ..Default::default()
        },
        batch_sizes: vec![2],
        default_num_batches: 1,
        layers: "1".parse().unwrap(),
        preserved_keys: 40,
        neighborhood: 10,
        holdout: 8,
        ..Default::default()
    };
    let rows = sweep_batch(&cfg).unwrap().rows;
    let mut buf = Vec::new();
    metrics::write_csv(&mut buf, &rows).unwrap();
    let back = metrics::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back, rows);
    assert!(back
        .iter()
        .filter(|r| r.method == Method::Rome)
        .all(|r| r.cond_d.is_none()));
    assert!(back
        .iter()
        .filter(|r| r.method == Method::Emmet)
        .all(|r| r.cond_d.is_some()));
}

/// Weight drift grows with the number of exact edits.
#[test]
fn drift_grows_with_batch_size() {
    let cfg = ExperimentConfig {
        methods: vec![Method::Emmet],
        alpha: 0.0,
        batch_sizes: vec![4, 16, 64],
        ..Default::default()
    };
    let sweep = sweep_batch(&cfg).unwrap();
    let drift: Vec<f64> = sweep
        .rows
        .iter()
        .filter(|r| r.batch == BatchTag::mean())
        .map(|r| r.drift)
        .collect();
    assert_eq!(drift.len(), 3);
    assert!(drift.windows(2).all(|w| w[0] <= w[1]), "{drift:?}");
}
