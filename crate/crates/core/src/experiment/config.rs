use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, RbfOptions, Structure};
use crate::control::{ConstraintSpec, CostSpec, Fallback, Formulation};
use crate::error::{Error, Result};
use crate::plant::{LinearTestPlant, PendulumPlant, Plant};
use crate::qp::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::signal::{HankelBlocks, MultisineSpec};

/// A complete, seed-explicit experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantConfig,
    pub data: DataConfig,
    pub basis: BasisConfig,
    pub t_ini: usize,
    pub horizon: usize,
    pub cost: CostConfig,
    #[serde(default)]
    pub constraints: ConstraintSpec,
    pub reference: ReferenceConfig,
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub controllers: Vec<ControllerEntry>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub verification: VerificationConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PlantConfig {
    Pendulum {
        #[serde(default = "one")]
        mass: f64,
        #[serde(default = "one")]
        length: f64,
        #[serde(default = "default_friction")]
        friction: f64,
        #[serde(default = "default_gravity")]
        gravity: f64,
        #[serde(default = "default_pendulum_ts")]
        sample_time: f64,
    },
    /// Row-major `A`, `B`, `C`.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        #[serde(default = "one")]
        sample_time: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_friction() -> f64 {
    0.1
}

fn default_gravity() -> f64 {
    9.81
}

fn default_pendulum_ts() -> f64 {
    1.0 / 30.0
}

fn rows(path: &str, v: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = v.len();
    let c = v.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || v.iter().any(|row| row.len() != c) {
        return Err(Error::Config {
            path: path.into(),
            reason: "expected a non-empty rectangular matrix".into(),
        });
    }
    Ok(DMatrix::from_row_iterator(r, c, v.iter().flatten().cloned()))
}

impl PlantConfig {
    pub fn build(&self) -> Result<Box<dyn Plant>> {
        let config_err = |path: &str, e: Error| Error::Config {
            path: path.into(),
            reason: e.to_string(),
        };
        match self {
            Self::Pendulum {
                mass,
                length,
                friction,
                gravity,
                sample_time,
            } => {
                let p = PendulumPlant {
                    mass: *mass,
                    length: *length,
                    friction: *friction,
                    gravity: *gravity,
                    sample_time: *sample_time,
                    state: [0.0, 0.0],
                };
                p.validate().map_err(|e| config_err("plant", e))?;
                Ok(Box::new(p))
            }
            Self::Linear { a, b, c, sample_time } => {
                let plant = LinearTestPlant::new(rows("plant.a", a)?, rows("plant.b", b)?, rows("plant.c", c)?, *sample_time)
                    .map_err(|e| config_err("plant", e))?;
                Ok(Box::new(plant))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub multisine: MultisineSpec,
    /// Record length; defaults to one multisine period.
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default)]
    pub noise_std: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BasisConfig {
    Rbf {
        centers: usize,
        /// Kernel width; omitted means `1/√2`.
        #[serde(default)]
        sigma: Option<f64>,
        seed: u64,
        #[serde(default = "default_kmeans_iter")]
        max_iter: usize,
        #[serde(default = "default_restarts")]
        restarts: usize,
        #[serde(default = "yes")]
        scaled: bool,
        #[serde(default)]
        include_bias: bool,
    },
    Chebyshev {
        orders: Vec<usize>,
        #[serde(default = "yes")]
        include_bias: bool,
    },
    IdentityLinear {
        #[serde(default)]
        include_bias: bool,
    },
}

fn default_kmeans_iter() -> usize {
    300
}

fn default_restarts() -> usize {
    10
}

fn yes() -> bool {
    true
}

impl BasisConfig {
    pub fn build(&self, blocks: &HankelBlocks) -> Result<BasisSet> {
        let structure = Structure::AffineInFutureInputs;
        match self {
            Self::Rbf {
                centers,
                sigma,
                seed,
                max_iter,
                restarts,
                scaled,
                include_bias,
            } => BasisSet::rbf_from_data(
                blocks,
                &RbfOptions {
                    centers: *centers,
                    sigma: *sigma,
                    seed: *seed,
                    max_iter: *max_iter,
                    restarts: *restarts,
                    scaled: *scaled,
                    structure,
                    includes_bias: *include_bias,
                },
            ),
            Self::Chebyshev { orders, include_bias } => {
                BasisSet::chebyshev_from_data(blocks, orders.clone(), structure, *include_bias)
            }
            Self::IdentityLinear { include_bias } => {
                BasisSet::identity_linear(crate::basis::Dims::from_blocks(blocks), structure, *include_bias)
            }
        }
    }
}

/// A weight given as a scalar multiple of the identity or as a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl Weight {
    fn matrix(&self, path: &str, size: usize) -> Result<DMatrix<f64>> {
        match self {
            Self::Scalar(v) => Ok(DMatrix::identity(size, size) * *v),
            Self::Matrix(v) => rows(path, v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: Weight,
    pub r: Weight,
    #[serde(default = "yes")]
    pub terminal_uses_stage_cost: bool,
}

impl CostConfig {
    pub fn build(&self, m: usize, p: usize) -> Result<CostSpec> {
        Ok(CostSpec {
            q: self.q.matrix("cost.q", p)?,
            r: self.r.matrix("cost.r", m)?,
            terminal_uses_stage_cost: self.terminal_uses_stage_cost,
        })
    }
}

/// Sinusoidal output reference `sin(2π F k Δ)` consumed one sample per control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub frequency: f64,
    pub duration: f64,
    /// Reference grid spacing `Δ`; defaults to the plant sample time.
    #[serde(default)]
    pub sample_time: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarmupConfig {
    /// The last `T_ini` identification inputs.
    #[default]
    Recorded,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub warmup: WarmupConfig,
    #[serde(default)]
    pub fallback: Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerEntry {
    /// Label used for file names and tables; defaults to the formulation name.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(flatten)]
    pub formulation: Formulation,
}

impl ControllerEntry {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| match self.formulation {
            Formulation::PhiDeepcR1 { lambda } | Formulation::PhiDeepcR2 { lambda } => {
                format!("{}-lambda-{lambda:e}", self.formulation.name())
            }
            Formulation::RidgePhiDeepc { gamma } => format!("{}-gamma-{gamma:e}", self.formulation.name()),
            _ => self.formulation.name().to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// Settings of the property verification suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationConfig {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Data columns used as initial windows.
    #[serde(default = "default_windows")]
    pub windows: usize,
    pub seed: u64,
    /// Closed-loop steps for the equivalence checks.
    #[serde(default = "default_verify_steps")]
    pub steps: usize,
}

fn default_lambdas() -> Vec<f64> {
    vec![1e0, 1e2, 1e4, 1e6]
}

fn default_gamma() -> f64 {
    1e-3
}

fn default_windows() -> usize {
    20
}

fn default_verify_steps() -> usize {
    100
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            lambdas: default_lambdas(),
            gamma: default_gamma(),
            windows: default_windows(),
            seed: 0,
            steps: default_verify_steps(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: String| {
            Err(Error::Config {
                path: path.into(),
                reason,
            })
        };
        if self.t_ini == 0 {
            return bad("t_ini", "must be at least 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon", "must be at least 1".into());
        }
        if !(self.data.noise_std >= 0.0) {
            return bad("data.noise_std", "must be non-negative".into());
        }
        if !(self.simulation.noise_std >= 0.0) {
            return bad("simulation.noise_std", "must be non-negative".into());
        }
        if !(self.reference.frequency > 0.0) || !(self.reference.duration >= 0.0) {
            return bad("reference", "needs a positive frequency and non-negative duration".into());
        }
        if let Some(dt) = self.reference.sample_time {
            if !(dt > 0.0) {
                return bad("reference.sample_time", "must be positive".into());
            }
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return bad("solver", "tol must be positive and max_iter at least 1".into());
        }
        let plant = self.plant.build()?;
        self.cost
            .build(plant.m(), plant.p())
            .and_then(|c| {
                let probe = crate::control::ControllerSpec {
                    formulation: Formulation::PhiSpc,
                    cost: c,
                    constraints: self.constraints.clone(),
                    horizon: self.horizon,
                    t_ini: self.t_ini,
                };
                probe.validate(plant.m(), plant.p())
            })
            .map_err(|e| Error::Config {
                path: "cost/constraints".into(),
                reason: e.to_string(),
            })?;
        let mut labels = std::collections::BTreeSet::new();
        for (i, c) in self.controllers.iter().enumerate() {
            let label = c.label();
            if !labels.insert(label.clone()) {
                return bad(&format!("controllers[{i}]"), format!("duplicate controller name `{label}`"));
            }
            match c.formulation {
                Formulation::PhiDeepcR1 { lambda } | Formulation::PhiDeepcR2 { lambda } if !(lambda > 0.0) => {
                    return bad(&format!("controllers[{i}].lambda"), "must be positive".into())
                }
                Formulation::RidgePhiDeepc { gamma } if !(gamma > 0.0) => {
                    return bad(&format!("controllers[{i}].gamma"), "must be positive".into())
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Replaces every seed with values derived from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.multisine.seed = seed;
        self.data.noise_seed = seed.wrapping_add(1);
        self.simulation.seed = seed.wrapping_add(2);
        self.verification.seed = seed.wrapping_add(3);
        if let BasisConfig::Rbf { seed: s, .. } = &mut self.basis {
            *s = seed.wrapping_add(4);
        }
    }

    /// Keeps only the controllers whose label or formulation name is listed.
    pub fn select_controllers(&mut self, names: &[String]) -> Result<()> {
        for n in names {
            if !self.controllers.iter().any(|c| &c.label() == n || c.formulation.name() == n) {
                return Err(Error::Config {
                    path: "--controllers".into(),
                    reason: format!("no controller named `{n}`"),
                });
            }
        }
        self.controllers
            .retain(|c| names.iter().any(|n| n == &c.label() || n == c.formulation.name()));
        Ok(())
    }

    pub fn reference_sample_time(&self) -> Result<f64> {
        Ok(self
            .reference
            .sample_time
            .unwrap_or(self.plant.build()?.sample_time()))
    }
}
