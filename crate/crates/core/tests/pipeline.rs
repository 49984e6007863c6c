use std::path::PathBuf;

use phideepc::control::Formulation;
use phideepc::experiment::{
    build_controller, generate_data, identify, run_experiment, simulate, ExperimentConfig, PlantConfig,
};
use phideepc::plant::compute_metrics;
use phideepc::Error;

fn config_path(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name].iter().collect()
}

#[test]
fn shipped_configs_load_and_round_trip() {
    for entry in std::fs::read_dir(config_path("")).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back, "{}", path.display());
    }
}

#[test]
fn config_errors_carry_the_field_path() {
    let text = std::fs::read_to_string(config_path("linear-sanity.json")).unwrap();
    let bad = text.replace("\"n_sines\": 20", "\"n_sines\": -3");
    match ExperimentConfig::from_json(&bad) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "data.multisine.n_sines"),
        other => panic!("unexpected {other:?}"),
    }
    let bad = text.replace("\"type\": \"linear\"", "\"type\": \"quadrotor\"");
    assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config { .. })));
}

#[test]
fn closed_loop_logs_are_reproducible() {
    let cfg = ExperimentConfig::load(config_path("linear-sanity.json")).unwrap();
    let ident = identify(&cfg, generate_data(&cfg).unwrap()).unwrap();
    let strip = |csv: String| csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    let mut logs = Vec::new();
    for _ in 0..2 {
        let c = build_controller(&cfg, &ident, Formulation::PhiSpc).unwrap();
        logs.push(strip(simulate(&cfg, &ident, c).unwrap().to_csv_string()));
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[0].len(), 101);
}

#[test]
fn metrics_match_a_direct_average_of_the_log() {
    let cfg = ExperimentConfig::load(config_path("linear-sanity.json")).unwrap();
    let ident = identify(&cfg, generate_data(&cfg).unwrap()).unwrap();
    let c = build_controller(&cfg, &ident, Formulation::KoopmanMpc).unwrap();
    let log = simulate(&cfg, &ident, c).unwrap();
    let cost = cfg.cost.build(1, 1).unwrap();
    let m = compute_metrics(&log, &cost.q, &cost.r, &[]).unwrap();
    let n = log.records.len() as f64;
    let ise: f64 = log.records.iter().map(|r| (r.y[0] - r.r[0]).powi(2)).sum::<f64>() / n;
    let iae: f64 = log.records.iter().map(|r| (r.y[0] - r.r[0]).abs()).sum::<f64>() / n;
    let ju: f64 = log.records.iter().map(|r| r.u[0].abs()).sum::<f64>() / n;
    assert!((m.j_ise - ise).abs() <= 1e-12 * ise.max(1.0));
    assert!((m.j_iae - iae).abs() <= 1e-12 * iae.max(1.0));
    assert!((m.j_u - ju).abs() <= 1e-12 * ju.max(1.0));
}

#[test]
fn failing_controller_is_reported_without_aborting_the_suite() {
    let mut cfg = ExperimentConfig::load(config_path("linear-sanity.json")).unwrap();
    cfg.constraints.y_bounds = vec![[Some(5.0), None]];
    cfg.simulation.fallback = phideepc::control::Fallback::Abort;
    assert!(matches!(cfg.plant, PlantConfig::Linear { .. }));
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(report.results.len(), 3);
    assert!(report.results.iter().all(|r| r.error.is_some() && r.metrics.is_none()));
    let table = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(table.contains("failed"));
}
