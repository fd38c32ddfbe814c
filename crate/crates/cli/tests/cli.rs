//! End-to-end runs of the `epiwarp` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn epiwarp(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epiwarp"))
        .current_dir(cwd)
        .env_remove("EPIWARP_JOBS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Relative path -> bytes for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL: [&str; 2] = ["--set", "phantom.width=40"];

/// Phantom plus a forward and a reverse sample in `tmp`.
fn simulated_pair(tmp: &Path) {
    let o = epiwarp(tmp, &["phantom", "--out", "ph", SMALL[0], SMALL[1], "--set", "phantom.height=40"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::write(
        tmp.join("cfg.toml"),
        "[simulate.dipoles]\ncenters = [[32.0, 20.0]]\nmoments = [2500.0]\norientations = [[1.0, 0.0]]\n",
    )
    .unwrap();
    for (dir, out) in [("ap", "fwd"), ("pa", "rev")] {
        let o = epiwarp(tmp, &["simulate", "--config", "cfg.toml", "--direction", dir, "--in", "ph", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
}

const ZERO_FIELD: [&str; 14] = [
    "--set",
    "dataset.phantoms=2",
    "--set",
    "dataset.slices=2",
    "--set",
    "dataset.width=32",
    "--set",
    "dataset.height=32",
    "--set",
    "dataset.fields.gas_wall_hz=[0.0, 0.0]",
    "--set",
    "dataset.fields.implant_probability=0.0",
    "--set",
    "dataset.fields.background_gradient_max=0.0",
];

#[test]
fn correct_writes_restored_images() {
    let tmp = TempDir::new().unwrap();
    simulated_pair(tmp.path());
    for method in ["fugue-ideal", "topup-ideal", "topup-default"] {
        let out = format!("res_{method}");
        let o = epiwarp(tmp.path(), &["correct", "--method", method, "--in", "fwd", "--reverse", "rev", "--out", &out]);
        assert_eq!(code(&o), 0, "{method}: {}", stderr(&o));
        for stem in ["b50", "b1400", "adc"] {
            let img = epiwarp::read_image(&tmp.path().join(&out).join(stem)).unwrap();
            assert_eq!((img.width(), img.height()), (40, 40));
        }
        let has_mask = tmp.path().join(&out).join("confidence_mask.json").is_file();
        assert_eq!(has_mask, method == "fugue-ideal");
    }
    // the reverse image may also be simulated from the sample itself
    let o = epiwarp(tmp.path(), &["correct", "--method", "topup-ideal", "--in", "fwd", "--out", "self_rev"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn unknown_correct_method_lists_valid_ones() {
    let tmp = TempDir::new().unwrap();
    let o = epiwarp(tmp.path(), &["correct", "--method", "nonsense", "--in", "x", "--out", "res"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    for m in ["fugue-ideal", "topup-ideal", "topup-default"] {
        assert!(err.contains(m), "{err}");
    }
    assert!(!tmp.path().join("res").exists());
}

#[test]
fn baseline_on_zero_field_has_zero_nmse() {
    let tmp = TempDir::new().unwrap();
    let mut args = vec!["make-dataset", "--out", "ds"];
    args.extend(ZERO_FIELD);
    let o = epiwarp(tmp.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = epiwarp(
        tmp.path(),
        &["evaluate", "--manifest", "ds/manifest.json", "--methods", "baseline", "--split", "all", "--out", "rep"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("baseline"));
    let csv = fs::read_to_string(tmp.path().join("rep/report.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "nmse").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 16 * 3);
    for row in rows {
        assert_eq!(row.split(',').nth(col).unwrap().parse::<f64>().unwrap(), 0.0, "{row}");
    }
}

#[test]
fn unknown_evaluate_method_fails_before_any_output() {
    let tmp = TempDir::new().unwrap();
    let o = epiwarp(tmp.path(), &["evaluate", "--manifest", "m.json", "--methods", "baseline,bogus", "--out", "rep"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("neural"), "{}", stderr(&o));
    assert!(!tmp.path().join("rep").exists());
}

#[test]
fn neural_without_predictions_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let mut args = vec!["make-dataset", "--out", "ds"];
    args.extend(ZERO_FIELD);
    assert_eq!(code(&epiwarp(tmp.path(), &args)), 0);
    let base = ["evaluate", "--manifest", "ds/manifest.json", "--methods", "neural", "--out", "rep"];
    assert_eq!(code(&epiwarp(tmp.path(), &base)), 1);
    let mut with_dir = base.to_vec();
    with_dir.extend(["--neural-dir", "missing"]);
    let o = epiwarp(tmp.path(), &with_dir);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing"));
}

#[test]
fn no_reference_mode_writes_only_images() {
    let tmp = TempDir::new().unwrap();
    let mut args = vec!["make-dataset", "--out", "ds"];
    args.extend(ZERO_FIELD);
    assert_eq!(code(&epiwarp(tmp.path(), &args)), 0);
    let o = epiwarp(
        tmp.path(),
        &["evaluate", "--manifest", "ds/manifest.json", "--methods", "fugue-ideal", "--split", "all", "--no-reference", "--out", "rep"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("rep/report.json")).unwrap()).unwrap();
    assert!(report["entries"].as_array().unwrap().is_empty());
    assert!(tmp.path().join("rep/restored/fugue-ideal/p000_z00_lr/confidence_mask.json").is_file());
}

#[test]
fn runtime_failure_exits_2() {
    let tmp = TempDir::new().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let o = epiwarp(tmp.path(), &["correct", "--method", "fugue-ideal", "--in", "empty", "--out", "res"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("params.json"), "{}", stderr(&o));
}

#[test]
fn validation_failures_exit_1() {
    let tmp = TempDir::new().unwrap();
    let cases: [&[&str]; 6] = [
        &["bogus"],
        &["phantom"],
        &["phantom", "--out", "p", "--set", "phantom.widht=40"],
        &["phantom", "--out", "p", "--set", "phantom.width=4"],
        &["phantom", "--out", "p", "--jobs", "0"],
        &["make-dataset", "--out", "p", "--set", "dataset.split.train=2.0"],
    ];
    for args in cases {
        let o = epiwarp(tmp.path(), args);
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
    let o = epiwarp(tmp.path(), &["phantom", "--out", "p", "--set", "phantom.widht=40"]);
    assert!(stderr(&o).contains("widht"));
    assert!(!tmp.path().join("p").exists());
}

#[test]
fn help_and_version_exit_0() {
    let tmp = TempDir::new().unwrap();
    for args in [
        &["--help"][..],
        &["--version"],
        &["phantom", "--help"],
        &["evaluate", "--help"],
        &["export-png", "--help"],
    ] {
        let o = epiwarp(tmp.path(), args);
        assert_eq!(code(&o), 0, "{args:?}");
        assert!(!stdout(&o).is_empty());
    }
    let help = stdout(&epiwarp(tmp.path(), &["correct", "--help"]));
    for flag in ["--method", "--in", "--reverse", "--out", "--config", "--set", "--seed", "--jobs", "--eq1-literal"] {
        assert!(help.contains(flag), "{flag} missing from\n{help}");
    }
}

#[test]
fn seed_determines_outputs() {
    let tmp = TempDir::new().unwrap();
    let run = |out: &str, seed: &str| {
        let o = epiwarp(tmp.path(), &["phantom", "--out", out, "--seed", seed, SMALL[0], SMALL[1]]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        tree(&tmp.path().join(out))
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("c.toml"), "seed = 1\n[phantom]\nwidth = 36\nheight = 36\n").unwrap();
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["phantom", "--out", out, "--config", "c.toml"];
        args.extend(extra);
        let o = epiwarp(tmp.path(), &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        tree(&tmp.path().join(out))
    };
    let flag = run("flag", &["--seed", "2", "--set", "seed=1"]);
    let set = run("set", &["--set", "seed=2"]);
    assert_eq!(flag, set);
    assert_ne!(flag, run("file", &[]));
    let img = epiwarp::read_image(&tmp.path().join("set/b50")).unwrap();
    assert_eq!(img.width(), 36);
    let img = {
        run("wide", &["--set", "phantom.width=44"]);
        epiwarp::read_image(&tmp.path().join("wide/b50")).unwrap()
    };
    assert_eq!((img.width(), img.height()), (44, 36));
}

#[test]
fn dataset_is_independent_of_job_count() {
    let tmp = TempDir::new().unwrap();
    let run = |out: &str, jobs: &str| {
        let mut args = vec!["make-dataset", "--out", out, "--jobs", jobs];
        args.extend(["--set", "dataset.phantoms=2", "--set", "dataset.slices=2"]);
        args.extend(["--set", "dataset.width=32", "--set", "dataset.height=32"]);
        let o = epiwarp(tmp.path(), &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        tree(&tmp.path().join(out))
    };
    assert_eq!(run("one", "1"), run("four", "4"));
}

#[test]
fn nothing_is_written_outside_out() {
    let tmp = TempDir::new().unwrap();
    simulated_pair(tmp.path());
    let before = tree(tmp.path());
    let runs: [&[&str]; 3] = [
        &["correct", "--method", "topup-default", "--in", "fwd", "--reverse", "rev", "--out", "o1"],
        &["export-png", "--in", "fwd", "--out", "o2"],
        &["simulate", "--config", "cfg.toml", "--in", "ph", "--out", "o3"],
    ];
    for args in runs {
        let o = epiwarp(tmp.path(), args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    let after = tree(tmp.path());
    for (k, v) in &after {
        let top = k.components().next().unwrap().as_os_str().to_string_lossy().into_owned();
        if !["o1", "o2", "o3"].contains(&top.as_str()) {
            assert_eq!(before.get(k), Some(v), "{} changed", k.display());
        }
    }
    assert_eq!(before.len(), after.keys().filter(|k| !k.starts_with("o1") && !k.starts_with("o2") && !k.starts_with("o3")).count());
}

#[test]
fn export_png_mirrors_layout_and_warns() {
    let tmp = TempDir::new().unwrap();
    simulated_pair(tmp.path());
    let o = epiwarp(tmp.path(), &["export-png", "--in", "fwd", "ph/b50", "--window", "0,1.5", "--out", "png"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("lossy"));
    for rel in ["distorted/b50.png", "clean/adc.png", "truth/field_hz.png", "b50.png"] {
        let img = image::open(tmp.path().join("png").join(rel)).unwrap();
        assert_eq!((img.width(), img.height()), (40, 40), "{rel}");
    }
    let o = epiwarp(tmp.path(), &["export-png", "--in", "nope", "--out", "png2"]);
    assert_eq!(code(&o), 1);
}
