use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name].iter().collect()
}

fn phideepc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phideepc")).args(args).output().expect("binary runs")
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = phideepc(args);
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// CSV text with the timing column removed.
fn without_timing(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn linear_run_writes_all_artifacts_and_report_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (code, stdout, stderr) = run(&["run", "--config", s(&config("linear-sanity.json")), "--out", s(&out)]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("J_ISE") && stdout.contains("koopman-mpc"));
    for f in [
        "config.json",
        "data.csv",
        "basis.json",
        "predictor/predictor.json",
        "metrics.csv",
        "metrics.txt",
        "plot.gp",
        "report.json",
        "trajectories/phi-spc.csv",
        "trajectories/phi-deepc.csv",
        "trajectories/koopman-mpc.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let header = fs::read_to_string(out.join("trajectories/phi-spc.csv")).unwrap();
    assert!(header.starts_with("k,t,u,y,r,objective,qp_status,solve_ms\n"));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let (code, stdout, _) = run(&["report", "--out", s(&out)]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("phi-") || l.starts_with("koopman")).count(), 3);
}

#[test]
fn identical_seeds_reproduce_outputs_and_seed_override_changes_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("linear-sanity.json");
    let paths: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| dir.path().join(n)).collect();
    for (p, seed) in paths.iter().zip(["5", "5", "6"]) {
        let (code, _, stderr) = run(&["run", "--config", s(&cfg), "--out", s(p), "--seed", seed]);
        assert_eq!(code, 0, "{stderr}");
    }
    for f in ["trajectories/phi-spc.csv", "trajectories/phi-deepc.csv", "trajectories/koopman-mpc.csv"] {
        assert_eq!(without_timing(&paths[0].join(f)), without_timing(&paths[1].join(f)), "{f}");
    }
    assert_eq!(
        fs::read(paths[0].join("data.csv")).unwrap(),
        fs::read(paths[1].join("data.csv")).unwrap()
    );
    assert_ne!(
        fs::read(paths[0].join("data.csv")).unwrap(),
        fs::read(paths[2].join("data.csv")).unwrap()
    );
}

#[test]
fn zero_controllers_write_identification_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ident");
    let (code, stdout, stderr) =
        run(&["run", "--config", s(&config("pendulum-identification-only.json")), "--out", s(&out)]);
    assert_eq!(code, 0, "{stderr}");
    assert!(out.join("predictor/predictor.json").is_file());
    assert!(out.join("data.csv").is_file());
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 1);
    assert_eq!(fs::read_dir(out.join("trajectories")).unwrap().count(), 0);
    assert!(stdout.contains("J_ISE"));
}

#[test]
fn controller_selection_keeps_table_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("spc");
    let (code, _, stderr) = run(&[
        "run",
        "--config",
        s(&config("pendulum-noise-free.json")),
        "--out",
        s(&out),
        "--controllers",
        "phi-spc",
    ]);
    assert_eq!(code, 0, "{stderr}");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("phi-spc,phi-spc,"));
}

#[test]
fn generate_data_and_fit_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("linear-sanity.json");
    let data_dir = dir.path().join("data");
    let (code, stdout, _) = run(&["generate-data", "--config", s(&cfg), "--out", s(&data_dir)]);
    assert_eq!(code, 0);
    assert!(stdout.contains("200 samples"));
    let fit_dir = dir.path().join("fit");
    let (code, stdout, stderr) = run(&[
        "fit",
        "--config",
        s(&cfg),
        "--out",
        s(&fit_dir),
        "--data",
        s(&data_dir.join("data.csv")),
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("9x193"));
    assert!(fit_dir.join("predictor/theta.bin").is_file());
}

#[test]
fn linear_verification_passes_with_stored_predictor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("linear-sanity.json");
    let fit_dir = dir.path().join("fit");
    assert_eq!(run(&["fit", "--config", s(&cfg), "--out", s(&fit_dir)]).0, 0);
    let (code, stdout, stderr) = run(&[
        "verify",
        "--config",
        s(&cfg),
        "--out",
        s(dir.path()),
        "--predictor",
        s(&fit_dir.join("predictor/predictor.json")),
    ]);
    assert_eq!(code, 0, "{stdout}{stderr}");
    assert!(!stdout.contains("FAIL"));
    for check in ["residual-vanishes", "deepc-matches-spc", "koopman-matches-spc", "stored-predictor-matches"] {
        assert!(stdout.contains(&format!("PASS {check}")), "{check}");
    }
    assert!(dir.path().join("verification.json").is_file());
}

#[test]
fn corrupted_predictor_is_a_validation_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("predictor.json");
    fs::write(&bad, "{\"variant\": ").unwrap();
    let (code, _, stderr) = run(&["verify", "--config", s(&config("linear-sanity.json")), "--predictor", s(&bad)]);
    assert_eq!(code, 2);
    assert!(stderr.contains(s(&bad)), "{stderr}");
}

#[test]
fn pendulum_verification_reports_failures_with_exit_code_3() {
    let (code, stdout, _) = run(&["verify", "--config", s(&config("pendulum-noise-free.json"))]);
    assert!(stdout.contains("consistency-diagnostic"));
    assert!(stdout.contains("PASS r1-r2-equivalence"));
    assert!(stdout.contains("PASS ridge-prediction-exact"));
    assert!(stdout.contains("PASS nullspace-residual"));
    let expected = if stdout.contains("FAIL") { 3 } else { 0 };
    assert_eq!(code, expected);
}

#[test]
fn invalid_configs_exit_with_code_2_and_a_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config("linear-sanity.json")).unwrap();
    let cases = [
        (text.replace("\"horizon\": 5", "\"horizon\": 0"), "horizon"),
        (text.replace("\"t_ini\": 2", "\"t_ini\": 2, \"tini\": 2"), "tini"),
        (text.replace("\"q\": 10.0", "\"q\": \"ten\""), "cost.q"),
        (text.replace("\"type\": \"phi-deepc\"", "\"type\": \"phi-deepc-r2\", \"lambda\": -1"), "controllers[1].lambda"),
    ];
    for (i, (bad, path)) in cases.iter().enumerate() {
        assert_ne!(bad, &text, "case {i} did not apply");
        let file = dir.path().join(format!("bad{i}.json"));
        fs::write(&file, bad).unwrap();
        let (code, _, stderr) = run(&["run", "--config", s(&file), "--out", s(&dir.path().join("o"))]);
        assert_eq!(code, 2, "case {i}: {stderr}");
        assert!(stderr.contains(path), "case {i}: {stderr}");
    }
    let (code, _, stderr) = run(&["run", "--config", s(&config("missing.json")), "--out", s(dir.path())]);
    assert_eq!(code, 2);
    assert!(stderr.contains("missing.json"));
    let (code, _, _) = run(&["run", "--config", s(&config("linear-sanity.json"))]);
    assert_eq!(code, 2);
}
