//! Report-level behavior of the evaluation harness.

use std::collections::BTreeMap;

use scene_insert::backends::{Backends, DoubleParams};
use scene_insert::dataset::{DatasetConfig, TrainingRecord};
use scene_insert::eval::{evaluate, load_method_outputs, MethodOutputs, Region, COMPOSITE_FILE, CSV_HEADER};
use scene_insert::imaging::{ImageRGB, ValueRange};
use scene_insert::synthetic::{synthetic_records, SyntheticSpec};

fn setup() -> (Backends, Vec<TrainingRecord>) {
    let backends = Backends::doubles(&DoubleParams::default()).unwrap();
    let dc = DatasetConfig {
        resolution: 64,
        frames_per_video: 12,
        ..DatasetConfig::default()
    };
    let records = synthetic_records(6, SyntheticSpec::default(), &backends, &dc, 21).unwrap();
    (backends, records)
}

fn outputs(records: &[TrainingRecord]) -> MethodOutputs {
    let mut out = MethodOutputs::new();
    out.insert(
        "oracle".into(),
        records.iter().map(|r| (r.id.clone(), r.gt.clone())).collect(),
    );
    out.insert(
        "scene".into(),
        records.iter().map(|r| (r.id.clone(), r.scene.clone())).collect(),
    );
    let gray = ImageRGB::filled(64, 64, [0.5; 3], ValueRange::Unit).unwrap();
    out.insert(
        "gray-partial".into(),
        records.iter().take(2).map(|r| (r.id.clone(), gray.clone())).collect(),
    );
    out.insert("absent".into(), BTreeMap::new());
    out
}

#[test]
fn ground_truth_output_scores_perfectly() {
    let (backends, records) = setup();
    let refs: Vec<&TrainingRecord> = records.iter().collect();
    for region in [Region::Full, Region::Bbox] {
        let report = evaluate(&refs, &outputs(&records), &backends, region, "synthetic", "h").unwrap();
        let oracle = report.rows.iter().find(|r| r.method == "oracle").unwrap();
        assert!((oracle.ssim.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(oracle.mse.unwrap(), 0.0);
        assert!((oracle.sim.unwrap() - 1.0).abs() < 1e-12);
        assert!((oracle.depth_ssim.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(oracle.depth_mse.unwrap(), 0.0);
        let scene = report.rows.iter().find(|r| r.method == "scene").unwrap();
        assert!(scene.ssim.unwrap() < 1.0 && scene.mse.unwrap() > 0.0);
    }
}

#[test]
fn missing_outputs_become_na_cells_and_counts() {
    let (backends, records) = setup();
    let refs: Vec<&TrainingRecord> = records.iter().collect();
    let report = evaluate(&refs, &outputs(&records), &backends, Region::Full, "synthetic", "h").unwrap();
    let partial = report.rows.iter().find(|r| r.method == "gray-partial").unwrap();
    assert_eq!((partial.evaluated, partial.missing), (2, 4));
    assert!(partial.ssim.is_some());
    let absent = report.rows.iter().find(|r| r.method == "absent").unwrap();
    assert_eq!((absent.evaluated, absent.missing), (0, 6));
    let csv = report.to_csv();
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    assert!(csv.lines().any(|l| l == "absent,NA,NA,NA,NA,NA"));
    assert!(csv
        .lines()
        .any(|l| l == "published:direct,0.723,0.0177,0.893,0.896,0.0141"));
}

#[test]
fn scores_do_not_depend_on_record_order() {
    let (backends, records) = setup();
    let forward: Vec<&TrainingRecord> = records.iter().collect();
    let mut shuffled = forward.clone();
    shuffled.reverse();
    shuffled.swap(0, 3);
    let a = evaluate(&forward, &outputs(&records), &backends, Region::Full, "s", "h").unwrap();
    let b = evaluate(&shuffled, &outputs(&records), &backends, Region::Full, "s", "h").unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.method, y.method);
        for (p, q) in [
            (x.ssim, y.ssim),
            (x.mse, y.mse),
            (x.sim, y.sim),
            (x.depth_ssim, y.depth_ssim),
            (x.depth_mse, y.depth_mse),
        ] {
            match (p, q) {
                (Some(p), Some(q)) => assert!((p - q).abs() <= 1e-12),
                (None, None) => {}
                _ => panic!("NA pattern differs"),
            }
        }
    }
}

#[test]
fn outputs_load_from_the_prediction_layout() {
    let (_, records) = setup();
    let dir = tempfile::tempdir().unwrap();
    for r in &records[..3] {
        let d = dir.path().join("direct").join(&r.id);
        std::fs::create_dir_all(&d).unwrap();
        r.gt.save_png(&d.join(COMPOSITE_FILE)).unwrap();
    }
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let loaded = load_method_outputs(dir.path(), &ids).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded["direct"].len(), 3);
}
