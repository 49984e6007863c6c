//! End-to-end workflow: data generation, identification, controller suite, reports.

mod config;
mod report;
mod verify;

pub use config::{
    BasisConfig, ControllerEntry, CostConfig, DataConfig, ExperimentConfig, PlantConfig, ReferenceConfig,
    SimulationConfig, SolverConfig, VerificationConfig, Weight, WarmupConfig,
};
pub use report::{gnuplot_script, metrics_csv, metrics_table};
pub use verify::{check_predictor, verify_identified, verify_properties, Check, VerificationReport};

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::build_phi;
use crate::control::{fit_koopman, ControllerSpec, Formulation, PredictiveController};
use crate::error::{Error, Result};
use crate::plant::{compute_metrics, reference_sinusoid, run_closed_loop, simulate_open_loop, ClosedLoopOptions, MetricsReport, TrajectoryLog, Warmup};
use crate::regress::{fit_least_squares, IdentifiedPredictor};
use crate::signal::{add_noise, build_hankel, multisine_extended, HankelBlocks, TrajectoryDataset};

/// Open-loop identification record of the configured plant, with measurement noise.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<TrajectoryDataset> {
    let mut plant = cfg.plant.build()?;
    if plant.m() != 1 {
        return Err(Error::Config {
            path: "data.multisine".into(),
            reason: format!("multisine excitation drives one input, the plant has {}", plant.m()),
        });
    }
    let len = cfg.data.length.unwrap_or(cfg.data.multisine.period);
    let u = multisine_extended(&cfg.data.multisine, len)?;
    let clean = simulate_open_loop(plant.as_mut(), &DMatrix::from_row_slice(1, len, &u))?;
    add_noise(&clean, cfg.data.noise_std, cfg.data.noise_seed)
}

/// Data, Hankel blocks and the least-squares predictor built on the configured basis.
#[derive(Debug, Clone)]
pub struct Identification {
    pub data: TrajectoryDataset,
    pub blocks: HankelBlocks,
    pub predictor: IdentifiedPredictor,
}

pub fn identify(cfg: &ExperimentConfig, data: TrajectoryDataset) -> Result<Identification> {
    let blocks = build_hankel(&data, cfg.t_ini, cfg.horizon)?;
    let basis = cfg.basis.build(&blocks)?;
    let lifted = build_phi(&basis, &blocks)?;
    let predictor = fit_least_squares(&lifted, &blocks.yf)?;
    Ok(Identification { data, blocks, predictor })
}

pub fn controller_spec(cfg: &ExperimentConfig, formulation: Formulation) -> Result<ControllerSpec> {
    let dims = cfg.plant.build()?;
    Ok(ControllerSpec {
        formulation,
        cost: cfg.cost.build(dims.m(), dims.p())?,
        constraints: cfg.constraints.clone(),
        horizon: cfg.horizon,
        t_ini: cfg.t_ini,
    })
}

pub fn build_controller(
    cfg: &ExperimentConfig,
    ident: &Identification,
    formulation: Formulation,
) -> Result<PredictiveController> {
    let spec = controller_spec(cfg, formulation)?;
    if formulation == Formulation::KoopmanMpc {
        let model = fit_koopman(&ident.blocks, ident.predictor.basis())?;
        PredictiveController::from_koopman(spec, &model)
    } else {
        PredictiveController::from_predictor(spec, &ident.predictor)
    }
}

/// The `p × (steps + N + 1)` reference and the number of scored control steps.
pub fn reference_matrix(cfg: &ExperimentConfig) -> Result<(DMatrix<f64>, usize)> {
    let dt = cfg.reference_sample_time()?;
    let steps = reference_sinusoid(cfg.reference.frequency, cfg.reference.duration, dt)?.len() - 1;
    let lookahead = cfg.reference.duration + cfg.horizon as f64 * dt;
    let r = reference_sinusoid(cfg.reference.frequency, lookahead, dt)?;
    let p = cfg.plant.build()?.p();
    Ok((DMatrix::from_fn(p, r.len(), |_, k| r[k]), steps))
}

/// Closed-loop run of one controller on a fresh plant over the configured reference.
pub fn simulate(cfg: &ExperimentConfig, ident: &Identification, controller: PredictiveController) -> Result<TrajectoryLog> {
    let (reference, steps) = reference_matrix(cfg)?;
    simulate_steps(cfg, ident, controller, &reference, steps)
}

pub fn simulate_steps(
    cfg: &ExperimentConfig,
    ident: &Identification,
    controller: PredictiveController,
    reference: &DMatrix<f64>,
    steps: usize,
) -> Result<TrajectoryLog> {
    let mut plant = cfg.plant.build()?;
    let warmup = match cfg.simulation.warmup {
        WarmupConfig::Zero => Warmup::Zero,
        WarmupConfig::Recorded => {
            let inputs = ident.data.inputs();
            let len = inputs.ncols();
            Warmup::Recorded(inputs.columns(len - cfg.t_ini, cfg.t_ini).into_owned())
        }
    };
    let opts = ClosedLoopOptions {
        steps,
        noise_std: cfg.simulation.noise_std,
        seed: cfg.simulation.seed,
        warmup,
        fallback: cfg.simulation.fallback,
        tol: cfg.solver.tol,
        max_iter: cfg.solver.max_iter,
    };
    run_closed_loop(plant.as_mut(), controller, reference, &opts)
}

/// Outcome of one controller in a suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerResult {
    pub label: String,
    pub formulation: Formulation,
    pub decision_variables: usize,
    pub metrics: Option<MetricsReport>,
    pub fallbacks: usize,
    pub error: Option<String>,
    #[serde(skip)]
    pub log: Option<TrajectoryLog>,
}

/// Runs every configured controller; a failing controller is reported, not fatal.
pub fn run_suite(cfg: &ExperimentConfig, ident: &Identification) -> Result<Vec<ControllerResult>> {
    let spec_probe = controller_spec(cfg, Formulation::PhiSpc)?;
    let mut results = Vec::new();
    for entry in &cfg.controllers {
        let label = entry.label();
        let outcome = build_controller(cfg, ident, entry.formulation).and_then(|c| {
            let n = c.n_vars();
            let log = simulate(cfg, ident, c)?;
            let metrics = compute_metrics(&log, &spec_probe.cost.q, &spec_probe.cost.r, &[])?;
            Ok((n, log, metrics))
        });
        results.push(match outcome {
            Ok((n, log, metrics)) => ControllerResult {
                label,
                formulation: entry.formulation,
                decision_variables: n,
                metrics: Some(metrics),
                fallbacks: log.fallbacks,
                error: None,
                log: Some(log),
            },
            Err(e) => {
                log::error!("controller {label} failed: {e}");
                ControllerResult {
                    label,
                    formulation: entry.formulation,
                    decision_variables: 0,
                    metrics: None,
                    fallbacks: 0,
                    error: Some(e.to_string()),
                    log: None,
                }
            }
        });
    }
    Ok(results)
}

/// Summary written next to the experiment artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub phi_rows: usize,
    pub phi_columns: usize,
    pub consistency_diagnostic: f64,
    pub results: Vec<ControllerResult>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes the identification record and the fitted predictor into `out`.
pub fn write_identification(ident: &Identification, out: &Path) -> Result<()> {
    mkdir(out)?;
    ident.data.write_csv(out.join("data.csv"))?;
    ident.predictor.basis().save(out.join("basis.json"))?;
    ident.predictor.save(out.join("predictor"))
}

/// Full workflow; writes data, predictor, trajectories, metrics and plot files into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    mkdir(out)?;
    write(&out.join("config.json"), &cfg.to_json()?)?;
    let ident = identify(cfg, generate_data(cfg)?)?;
    write_identification(&ident, out)?;
    let results = run_suite(cfg, &ident)?;
    let traj_dir = out.join("trajectories");
    mkdir(&traj_dir)?;
    for r in &results {
        if let Some(log) = &r.log {
            log.write_csv(traj_dir.join(format!("{}.csv", r.label)))?;
        }
    }
    write(&out.join("metrics.csv"), &metrics_csv(&results))?;
    write(&out.join("metrics.txt"), &metrics_table(&results))?;
    write(&out.join("plot.gp"), &gnuplot_script(&results))?;
    let report = ExperimentReport {
        output_dir: out.to_path_buf(),
        phi_rows: ident.predictor.phi().nrows(),
        phi_columns: ident.predictor.phi().ncols(),
        consistency_diagnostic: ident.predictor.consistency_diagnostic(),
        results,
    };
    write(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Reads the `report.json` written by [`run_experiment`].
pub fn load_report(dir: &Path) -> Result<ExperimentReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        path,
        reason: e.to_string(),
    })
}
