use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metamorph::Trajectory;
use metamorph_cli::output::{landmark_long, OutputDir};
use metamorph_cli::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metamorph"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .arg("run")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .args(args)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn missing_lambda_is_named() {
    let out = bin().arg("validate").arg(data("missing_lambda.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lambda") && err.contains("system"), "{err}");
}

#[test]
fn nested_errors_carry_field_paths() {
    let text = std::fs::read_to_string(data("deterministic.json"))
        .unwrap()
        .replace("\"steps\": 10", "\"steps\": \"ten\"");
    let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
    assert!(err.contains("integrator.steps"), "{err}");
    let err = ExperimentConfig::from_json(r#"{"scenario": "nope"}"#).unwrap_err().to_string();
    assert!(err.contains("unknown scenario"), "{err}");
    let err = ExperimentConfig::from_json(r#"{"system": {}}"#).unwrap_err().to_string();
    assert!(err.contains("scenario"), "{err}");
}

#[test]
fn validate_and_schema_succeed() {
    let out = bin().arg("validate").arg(data("deterministic.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let out = bin().arg("schema").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let schema: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let text = schema.to_string();
    for key in ["landmark_sde", "ch2_sde", "landmark_match", "fda_generate", "convergence_study", "lambda"] {
        assert!(text.contains(key), "schema lacks {key}");
    }
}

#[test]
fn semantic_validation_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(data("deterministic.json")).unwrap();
    let bad = write(dir.path(), "bad.json", &text.replace("\"r\": 1.0", "\"r\": -1.0"));
    let out = run(&[], &bad, &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("system"));

    let missing_file = text.replace(
        "\"p0\"",
        "\"noise\": {\"sigma_nu\": {\"grid_values_file\": \"nowhere.csv\"}}, \"p0\"",
    );
    let bad = write(dir.path(), "missing.json", &missing_file);
    let out = bin().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid_values_file"));

    let out = bin()
        .arg("run")
        .arg(data("deterministic.json"))
        .arg("--out")
        .arg(dir.path().join("o"))
        .env("METAMORPH_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = write(dir.path(), "file", "");
    let out = run(&[], &data("deterministic.json"), &blocker.join("sub"));
    assert_eq!(out.status.code(), Some(3));

    let text = std::fs::read_to_string(data("deterministic.json"))
        .unwrap()
        .replace("[[0.3, -0.2], [-0.1, 0.4]]", "[[1e200, 1e200], [-1e200, 1e200]]");
    let cfg = write(dir.path(), "blowup.json", &text);
    let out = run(&[], &cfg, &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn deterministic_scenario_matches_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[], &data("deterministic.json"), dir.path());
    assert!(out.status.success());
    let got = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let want = std::fs::read_to_string(data("deterministic_trajectory.csv")).unwrap();
    assert_eq!(got, want);
}

/// Classical RK4 on the landmark metamorphosis equations at a fine step.
fn rk4_reference(q: [[f64; 2]; 2], p: [[f64; 2]; 2], lambda: f64, t: f64, steps: usize) -> [f64; 8] {
    let rhs = |x: &[f64; 8]| {
        let mut dx = [0.0; 8];
        for i in 0..2 {
            for j in 0..2 {
                let dq = [x[2 * i] - x[2 * j], x[2 * i + 1] - x[2 * j + 1]];
                let k = (-0.5 * (dq[0] * dq[0] + dq[1] * dq[1])).exp();
                let pipj = x[4 + 2 * i] * x[4 + 2 * j] + x[5 + 2 * i] * x[5 + 2 * j];
                for a in 0..2 {
                    dx[2 * i + a] += k * x[4 + 2 * j + a];
                    dx[4 + 2 * i + a] += pipj * k * dq[a];
                }
            }
            for a in 0..2 {
                dx[2 * i + a] += lambda * lambda * x[4 + 2 * i + a];
            }
        }
        dx
    };
    let mut x = [q[0][0], q[0][1], q[1][0], q[1][1], p[0][0], p[0][1], p[1][0], p[1][1]];
    let h = t / steps as f64;
    let axpy = |x: &[f64; 8], k: &[f64; 8], s: f64| std::array::from_fn::<f64, 8, _>(|i| x[i] + s * k[i]);
    for _ in 0..steps {
        let k1 = rhs(&x);
        let k2 = rhs(&axpy(&x, &k1, h / 2.0));
        let k3 = rhs(&axpy(&x, &k2, h / 2.0));
        let k4 = rhs(&axpy(&x, &k3, h));
        x = std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
    x
}

#[test]
fn stored_baseline_agrees_with_independent_integrator() {
    let text = std::fs::read_to_string(data("deterministic_trajectory.csv")).unwrap();
    let last: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .filter(|r: &Vec<f64>| r[0] == 1.0)
        .collect();
    let reference = rk4_reference([[-0.5, 0.0], [0.5, 0.2]], [[0.3, -0.2], [-0.1, 0.4]], 0.5, 1.0, 10_000);
    for row in &last {
        let i = row[1] as usize;
        for a in 0..2 {
            assert!((row[2 + a] - reference[2 * i + a]).abs() < 5e-3);
            assert!((row[4 + a] - reference[4 + 2 * i + a]).abs() < 5e-3);
        }
    }
    assert_eq!(last.len(), 2);
}

#[test]
fn long_format_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[], &data("deterministic.json"), dir.path());
    assert!(out.status.success());
    let long = std::fs::read_to_string(dir.path().join("trajectory_long.csv")).unwrap();
    let mut lines = long.lines();
    assert_eq!(lines.next(), Some("t,entity,coordinate,value,realization"));
    assert_eq!(lines.count(), 2 * 2 * 11);

    let mut od = OutputDir::create(dir.path()).unwrap();
    landmark_long(&mut od, "empty.csv", std::iter::empty::<(usize, &Trajectory)>(), 2, 2).unwrap();
    let empty = std::fs::read_to_string(dir.path().join("empty.csv")).unwrap();
    assert_eq!(empty, "t,entity,coordinate,value,realization\n");
}

#[test]
fn manifest_echo_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/landmark_ensemble.json");
    let first = dir.path().join("first");
    assert!(run(&["--seed", "99"], &cfg, &first).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["base_seed"], 99);
    assert_eq!(manifest["config"]["ensemble"]["base_seed"], 99);
    let echo = write(dir.path(), "echo.json", &manifest["config"].to_string());
    let second = dir.path().join("second");
    assert!(run(&[], &echo, &second).status.success());
    for f in ["mean.csv", "variance.csv", "covariance.csv", "stats.json"] {
        assert_eq!(
            std::fs::read(first.join(f)).unwrap(),
            std::fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn ch2_step_guideline_is_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ch2_peakon.json"))
        .unwrap()
        .replace("\"steps\": 10000", "\"steps\": 10")
        .replace("\"horizon\": 10.0", "\"horizon\": 1.0")
        .replace("[0.0, 5.0, 10.0]", "[]");
    let cfg = write(dir.path(), "coarse.json", &text);
    let out = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("advective"));
}

#[test]
fn grid_values_file_feeds_ch2_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ch2_stochastic.json");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("\"steps\": 2000", "\"steps\": 200")
        .replace("\"horizon\": 2.0", "\"horizon\": 0.2")
        .replace("[0.0, 1.0, 2.0]", "[0.0, 0.2]")
        .replace(
            "ch2_sigma_nu.csv",
            cfg.parent().unwrap().join("ch2_sigma_nu.csv").to_str().unwrap(),
        );
    let local = write(dir.path(), "ch2.json", &text);
    let out = run(&[], &local, &dir.path().join("o"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let inv = std::fs::read_to_string(dir.path().join("o/invariants.csv")).unwrap();
    let rho: Vec<f64> = inv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(rho.len(), 201);
    assert!(rho.iter().all(|r| (r - rho[0]).abs() < 1e-10 * rho[0].abs().max(1.0)));
}

#[test]
fn every_scenario_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, expect) in [
        ("landmark_match.json", "match.json"),
        ("fda_generate.json", "signals.csv"),
        ("landmark_sde.json", "trajectory.csv"),
    ] {
        let out = run(&[], &cfgs.join(name), &dir.path().join(name));
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.path().join(name).join(expect).exists());
        assert!(dir.path().join(name).join("manifest.json").exists());
    }
    let m: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("landmark_match.json/match.json")).unwrap(),
    )
    .unwrap();
    for key in ["p0", "residual", "iterations", "energy"] {
        assert!(m.get(key).is_some());
    }
    for key in ["total", "deformation", "template"] {
        assert!(m["energy"].get(key).is_some());
    }
}
