use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbm")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_stable_one_dimensional_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "m.json", r#"{"d": 1, "Q": [[0]], "mu": [-1], "Sigma": [[1]]}"#);
    let out_dir = dir.path().join("out");
    let out = rbm(&["validate", "--model", &model, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cert = json(&out_dir.join("certificate.json"));
    assert!((cert["certificate"]["delta0"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn validate_unstable_model_names_the_assumption() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "m.json", r#"{"d": 1, "Q": [[0]], "mu": [1], "Sigma": [[1]]}"#);
    let out = rbm(&["validate", "--model", &model, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("A2"));
}

#[test]
fn validate_indefinite_covariance_is_a3() {
    let dir = tempfile::tempdir().unwrap();
    let model =
        write(dir.path(), "m.json", r#"{"d": 2, "Q": [[0, 0], [0, 0]], "mu": [-1, -1], "Sigma": [[1, 2], [2, 1]]}"#);
    let out = rbm(&["validate", "--model", &model, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("A3"));
}

#[test]
fn malformed_model_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "m.json", r#"{"d": 1, "Q": [[0]], "mu": "#);
    let out = rbm(&["validate", "--model", &model, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    let missing = rbm(&["validate", "--model", dir.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(code(&missing), 3);
}

#[test]
fn scaling_reports_slope_and_flags_single_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("s");
    let out = rbm(&[
        "scaling",
        "--generator",
        "tandem:d=3,q=0.5",
        "--d-list",
        "8,16,32,64",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let report = json(&out_dir.join("scaling.json"));
    let slope = report["slope"].as_f64().unwrap();
    assert!((3.8..=4.6).contains(&slope), "slope {slope}");
    let csv = fs::read_to_string(out_dir.join("scaling.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 5);

    let single_dir = dir.path().join("one");
    let out = rbm(&["scaling", "--d-list", "16", "--out", single_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let report = json(&single_dir.join("scaling.json"));
    assert!(report["slope"].is_null());
    assert!(report["slope_flag"].is_string());

    let out = rbm(&["scaling", "--d-list", "2,8", "--out", dir.path().join("bad").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}

#[test]
fn verify_default_model_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("v");
    let out = rbm(&["verify", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let report = json(&out_dir.join("verify.json"));
    assert_eq!(report["passed"], serde_json::Value::Bool(true));
    assert!(String::from_utf8_lossy(&out.stdout).lines().all(|l| !l.starts_with("FAIL")));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sim");
    let config = write(
        dir.path(),
        "c.json",
        &format!(
            r#"{{"generator": "tandem:d=2,q=0.5", "seed": 5, "horizon": 3.0, "out": {:?}}}"#,
            out_dir.to_str().unwrap()
        ),
    );
    let out = rbm(&["simulate", "--config", &config, "--horizon", "1.0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["manifest"]["seed"], 5);
    assert_eq!(manifest["manifest"]["horizon"].as_f64(), Some(1.0));
    let rows = fs::read_to_string(out_dir.join("path.csv")).unwrap();
    assert_eq!(rows.lines().filter(|l| !l.starts_with('#')).count(), 1 + 101);

    let bad = write(dir.path(), "bad.json", r#"{"sede": 5}"#);
    assert_eq!(code(&rbm(&["simulate", "--config", &bad])), 3);
}

#[test]
fn outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = rbm(&[
            "couple",
            "--generator",
            "tandem:d=2,q=0.5",
            "--reps",
            "40",
            "--horizon",
            "5",
            "--seed",
            "11",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(!out_dir.join("coupling.partial.json").exists());
        (fs::read(out_dir.join("coupling.csv")).unwrap(), fs::read(out_dir.join("coupling.json")).unwrap())
    };
    assert_eq!(run("a"), run("b"));

    let sim = |name: &str| {
        let out_dir = dir.path().join(name);
        assert_eq!(code(&rbm(&["simulate", "--horizon", "2", "--seed", "3", "--out", out_dir.to_str().unwrap()])), 0);
        ["path.csv", "path.bin", "hitting.json"].map(|f| fs::read(out_dir.join(f)).unwrap())
    };
    assert_eq!(sim("s1"), sim("s2"));
}

#[test]
fn couple_rejects_too_few_replications() {
    let dir = tempfile::tempdir().unwrap();
    let out = rbm(&["couple", "--reps", "10", "--out", dir.path().join("c").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}
