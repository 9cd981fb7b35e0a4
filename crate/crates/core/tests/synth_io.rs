use std::io::Cursor;
use std::path::Path;

use dmap_core::io::{self, read_matrix, write_matrix};
use dmap_core::pipeline::{class_mean_consistency, PipelineData};
use dmap_core::{generate, preinspect, DMatrix, DmapError, Epsilon, SynthConfig, SyntheticData};
use proptest::prelude::*;

fn pipeline_data(data: &SyntheticData) -> PipelineData {
    PipelineData::new(data.train.clone(), data.test_features.clone(), data.test_labels.clone()).unwrap()
}

#[test]
fn exact_preset_is_exactly_consistent() {
    for seed in 0..5 {
        let data = generate(&SynthConfig::exact(seed)).unwrap();
        let report = class_mean_consistency(&pipeline_data(&data), 1e-6).unwrap();
        assert!(report.irc_gap <= 1e-8, "seed {seed}: {}", report.irc_gap);
        assert!(report.cm >= 1.0 - 1e-6, "seed {seed}: {}", report.cm);
    }
}

#[test]
fn single_defect_pair_is_the_only_flag() {
    for seed in 0..5 {
        let data = generate(&SynthConfig::with_defects(1, seed)).unwrap();
        let rep = preinspect(
            data.train.seen_embeddings().data(),
            &data.train.unseen_embeddings(),
            Epsilon::Absolute(1e-9),
        )
        .unwrap();
        assert_eq!(rep.flagged_pairs.len(), 1);
        let (a, b) = &data.defect_pairs[0];
        assert_eq!((&rep.flagged_pairs[0].class_i, &rep.flagged_pairs[0].class_j), (a, b));
        // the twins still differ as embeddings
        let ku = data.train.unseen_embeddings();
        assert!((ku.column(a).unwrap() - ku.column(b).unwrap()).norm() > 1e-3);
    }
}

#[test]
fn generation_is_bit_identical_per_seed() {
    let cfg = SynthConfig::noisy(0.5, 42);
    let (a, b) = (generate(&cfg).unwrap(), generate(&cfg).unwrap());
    assert_eq!(a.train, b.train);
    assert_eq!(a.test_features, b.test_features);
    assert_eq!(a.test_labels, b.test_labels);
    assert_eq!(a.embeddings, b.embeddings);
    assert_eq!(a.feature_prototypes, b.feature_prototypes);
    let c = generate(&SynthConfig::noisy(0.5, 43)).unwrap();
    assert_ne!(a.embeddings, c.embeddings);
}

#[test]
fn noise_and_distortion_do_not_shift_the_stream() {
    let base = generate(&SynthConfig::noisy(0.0, 3)).unwrap();
    let other = generate(&SynthConfig {
        noise_sigma: 1.5,
        ..SynthConfig::noisy(2.0, 3)
    })
    .unwrap();
    assert_eq!(base.embeddings, other.embeddings);
    let k = base.train.split.seen().len();
    assert_eq!(base.feature_prototypes.columns(0, k), other.feature_prototypes.columns(0, k));
}

#[test]
fn infeasible_configs_are_rejected() {
    let bad = [
        SynthConfig { d: 5, p: 10, ..SynthConfig::default() },
        SynthConfig { defect_pairs: 3, ..SynthConfig::default() }, // k ≥ p
        SynthConfig { defect_pairs: 4, ..SynthConfig::with_defects(0, 0) }, // > l/2
        SynthConfig { noise_sigma: -1.0, ..SynthConfig::default() },
        SynthConfig { n_per_class: 0, ..SynthConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(generate(&cfg), Err(DmapError::InfeasibleConfig(_)) | Err(DmapError::InvalidInput(_))), "{cfg:?}");
    }
}

#[test]
fn saved_dataset_loads_back_for_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::with_defects(2, 1);
    let data = generate(&cfg).unwrap();
    io::save_dataset(tmp.path(), &data, &cfg).unwrap();
    let loaded = PipelineData::load(tmp.path()).unwrap();
    assert_eq!(loaded.train.features.data(), data.train.features.data());
    assert_eq!(loaded.train.labels, data.train.labels);
    assert_eq!(loaded.test_features.data(), data.test_features.data());
    assert_eq!(loaded.test_labels, data.test_labels);
    assert_eq!(loaded.train.semantic.data(), data.train.semantic.data());
    let meta: serde_json::Value = io::read_json(tmp.path().join("synth.json")).unwrap();
    assert_eq!(serde_json::from_value::<SynthConfig>(meta["config"].clone()).unwrap(), cfg);
    assert_eq!(meta["defect_pairs"], serde_json::json!([["u0", "u1"], ["u2", "u3"]]));
}

fn round_trip(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut buf = Vec::new();
    write_matrix(&mut buf, m).unwrap();
    read_matrix(Cursor::new(buf), Path::new("mem")).unwrap()
}

fn bits(m: &DMatrix<f64>) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn small_matrices_round_trip() {
    let zero = DMatrix::from_element(1, 1, 0.0);
    let mut buf = Vec::new();
    write_matrix(&mut buf, &zero).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    assert_eq!(round_trip(&zero), zero);

    let m = DMatrix::from_row_slice(2, 3, &[0.1, -2.5e-300, 1.0 / 3.0, 6.02e23, -0.0, f64::MAX]);
    assert_eq!(bits(&round_trip(&m)), bits(&m));
}

#[test]
fn gzip_round_trip_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let m = DMatrix::from_fn(4, 3, |i, j| (i as f64 + 0.5) / (j as f64 + 7.0));
    let a = tmp.path().join("a.mat.gz");
    let b = tmp.path().join("b.mat.gz");
    io::save_matrix(&a, &m).unwrap();
    io::save_matrix(&b, &m).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(bits(&io::load_matrix(&a).unwrap()), bits(&m));
}

#[test]
fn malformed_matrices_report_location() {
    let parse = |text: &str| read_matrix(Cursor::new(text.as_bytes().to_vec()), Path::new("bad.mat"));
    assert!(matches!(parse("dmap-matrix 1 1 2\n1.0 zz\n"), Err(DmapError::Parse { line: 2, column: 5, .. })));
    assert!(matches!(parse("dmap-matrix 1 2 1\n1.0\n"), Err(DmapError::ShapeMismatch(_))));
    assert!(matches!(parse("dmap-matrix 1 1 2\n1.0\n"), Err(DmapError::ShapeMismatch(_))));
    assert!(matches!(parse("not-a-matrix\n"), Err(DmapError::Parse { line: 1, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn finite_matrices_round_trip_bit_exact(
        rows in 1usize..6,
        cols in 1usize..6,
        raw in prop::collection::vec(any::<u64>(), 36),
    ) {
        let vals: Vec<f64> = raw
            .iter()
            .map(|&b| f64::from_bits(b))
            .map(|v| if v.is_finite() { v } else { 1.0 })
            .collect();
        let m = DMatrix::from_fn(rows, cols, |i, j| vals[i * 6 + j]);
        prop_assert_eq!(bits(&round_trip(&m)), bits(&m));
    }

    #[test]
    fn label_files_round_trip(labels in prop::collection::vec("[a-z][a-z0-9_]{0,8}", 1..20)) {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("labels.txt");
        io::save_labels(&path, &labels).unwrap();
        prop_assert_eq!(io::load_labels(&path).unwrap(), labels);
    }
}
