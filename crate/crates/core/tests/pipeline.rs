//! Dataset synthesis and benchmark runs on small configurations.

use std::collections::HashMap;

use epiwarp::imgio::{read_image, read_manifest, Split};
use epiwarp::metrics::Granularity;
use epiwarp::pipeline::{
    make_dataset, parse_methods, run_benchmark, BenchmarkConfig, BenchmarkOptions, FieldConfig, Method,
    PipelineError, SplitFractions,
};

fn cfg(phantoms: usize, slices: usize) -> BenchmarkConfig {
    BenchmarkConfig {
        phantoms,
        slices,
        width: 32,
        height: 32,
        seed: 11,
        ..BenchmarkConfig::default()
    }
}

fn zero_field_cfg() -> BenchmarkConfig {
    BenchmarkConfig {
        fields: FieldConfig {
            gas_wall_hz: (0.0, 0.0),
            implant_probability: 0.0,
            background_gradient_max: 0.0,
            ..FieldConfig::default()
        },
        split: SplitFractions {
            train: 0.0,
            validation: 0.0,
            test: 1.0,
        },
        ..cfg(1, 2)
    }
}

#[test]
fn sample_count_is_phantoms_times_slices_times_directions() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(&cfg(2, 3), dir.path()).unwrap();
    assert_eq!(m.samples.len(), 24);
    assert_eq!(m.epi_params_used.len(), 4);
    let reread = read_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(reread, m);
    assert!(m.samples.iter().any(|s| s.id == "p001_z02_pa"));
}

#[test]
fn splits_are_disjoint_by_subject() {
    let mut c = cfg(20, 1);
    c.directions.truncate(1);
    c.split = SplitFractions {
        train: 0.8,
        validation: 0.1,
        test: 0.1,
    };
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(&c, dir.path()).unwrap();
    let mut by_subject: HashMap<u32, Split> = HashMap::new();
    for s in &m.samples {
        let prev = by_subject.insert(s.subject, s.split);
        assert!(prev.is_none_or(|p| p == s.split), "subject {} in two splits", s.subject);
    }
    let test = by_subject.values().filter(|&&s| s == Split::Test).count();
    assert_eq!(test, 2);
}

#[test]
fn baseline_on_zero_field_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let m = make_dataset(&zero_field_cfg(), &data).unwrap();
    let report = run_benchmark(&m, &data, &[Method::Baseline], &dir.path().join("eval"), &BenchmarkOptions::default())
        .unwrap();
    assert!(report.failures.is_empty());
    assert_eq!(report.entries.len(), 8 * 3);
    for e in &report.entries {
        assert_eq!(e.nmse, 0.0);
        assert_eq!(e.psnr_db, f64::INFINITY);
    }
    let json = std::fs::read_to_string(dir.path().join("eval/report.json")).unwrap();
    assert!(json.contains("\"inf\""));
    let csv = std::fs::read_to_string(dir.path().join("eval/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + report.entries.len());
}

#[test]
fn every_referenced_output_loads() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut c = cfg(1, 1);
    c.split = SplitFractions {
        train: 0.0,
        validation: 0.0,
        test: 1.0,
    };
    let m = make_dataset(&c, &data).unwrap();
    let methods = parse_methods(&["baseline", "fugue-ideal", "topup-ideal", "topup-default"]).unwrap();
    let eval = dir.path().join("eval");
    let report = run_benchmark(&m, &data, &methods, &eval, &BenchmarkOptions::default()).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    for e in &report.entries {
        let out = eval.join(e.output.as_ref().unwrap());
        read_image(&out.join("b50")).unwrap();
        read_image(&out.join("adc")).unwrap();
        assert_eq!(e.field_rmse_px.is_some(), e.method == "topup-default");
    }
    assert!(eval.join("restored/fugue-ideal/p000_z00_lr/confidence_mask.json").is_file());
    assert!(report.aggregate("topup-default", "b50", Granularity::Subject).is_some());
}

#[test]
fn neural_predictions_are_scored_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let m = make_dataset(&zero_field_cfg(), &data).unwrap();
    // a perfect model: copy the clean references
    let preds = dir.path().join("preds");
    for s in &m.samples {
        let src = data.join(&s.dir).join("clean");
        let dst = preds.join(&s.id);
        std::fs::create_dir_all(&dst).unwrap();
        for stem in ["b50", "b1400", "adc"] {
            for ext in ["json", "bin"] {
                std::fs::copy(src.join(format!("{stem}.{ext}")), dst.join(format!("{stem}.{ext}"))).unwrap();
            }
        }
    }
    let opts = BenchmarkOptions {
        neural_dir: Some(preds),
        ..BenchmarkOptions::default()
    };
    let report = run_benchmark(&m, &data, &[Method::Neural], &dir.path().join("eval"), &opts).unwrap();
    assert!(report.failures.is_empty());
    assert!(report.entries.iter().all(|e| e.nmse == 0.0));

    let missing = BenchmarkOptions {
        neural_dir: Some(dir.path().join("nowhere")),
        ..BenchmarkOptions::default()
    };
    let err = run_benchmark(&m, &data, &[Method::Neural], &dir.path().join("eval2"), &missing);
    assert!(matches!(err, Err(PipelineError::NeuralDirNotFound(_))));
}

#[test]
fn missing_prediction_is_a_recorded_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let m = make_dataset(&zero_field_cfg(), &data).unwrap();
    let preds = dir.path().join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    let opts = BenchmarkOptions {
        neural_dir: Some(preds),
        ..BenchmarkOptions::default()
    };
    let report = run_benchmark(&m, &data, &[Method::Baseline, Method::Neural], &dir.path().join("eval"), &opts).unwrap();
    assert_eq!(report.failures.len(), m.samples.len());
    assert!(report.entries.iter().all(|e| e.method == "baseline"));
}

#[test]
fn no_reference_mode_writes_images_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let m = make_dataset(&zero_field_cfg(), &data).unwrap();
    let opts = BenchmarkOptions {
        reference: false,
        ..BenchmarkOptions::default()
    };
    let eval = dir.path().join("eval");
    let report = run_benchmark(&m, &data, &[Method::FugueIdeal, Method::TopupIdeal], &eval, &opts).unwrap();
    assert!(report.entries.is_empty());
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert!(eval.join("restored/topup-ideal/p000_z00_ap/b50.json").is_file());
    assert!(eval.join("restored/fugue-ideal/p000_z01_rl/confidence_mask.json").is_file());
}

#[test]
fn unknown_method_is_rejected_by_name() {
    let err = parse_methods(&["baseline", "magic"]).unwrap_err();
    assert!(err.to_string().contains("magic"));
}
