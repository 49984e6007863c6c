//! Predictive-control problems compiled into dense QPs.
//!
//! Every formulation uses the decision vector `z = [y; u; extra]`, where `y` stacks the
//! predicted outputs `y(1..N)`, `u` stacks the inputs `u(0..N-1)` (time-major), and
//! `extra` holds the formulation's auxiliary variables (`g`, `ĝ`, or nothing).

mod koopman;
mod receding;

pub use koopman::{fit_koopman, KoopmanModel};
pub use receding::{Fallback, RecedingHorizon, StepOutcome};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::min_eigenvalue;
use crate::qp::QpProblem;
use crate::regress::{ridge_gram, IdentifiedPredictor, Variant};
use crate::signal::IniWindow;

/// Quadratic tracking weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    /// Output weight, `p × p`, PSD.
    pub q: DMatrix<f64>,
    /// Input weight, `m × m`, PD.
    pub r: DMatrix<f64>,
    /// Weight the last predicted output with `Q` (otherwise it is free).
    pub terminal_uses_stage_cost: bool,
}

impl CostSpec {
    /// Scalar-weight cost for `p` outputs and `m` inputs.
    pub fn diagonal(q: f64, r: f64, p: usize, m: usize) -> Self {
        Self {
            q: DMatrix::identity(p, p) * q,
            r: DMatrix::identity(m, m) * r,
            terminal_uses_stage_cost: true,
        }
    }

    fn validate(&self, m: usize, p: usize) -> Result<()> {
        ensure_dim("Q rows", p, self.q.nrows())?;
        ensure_dim("Q columns", p, self.q.ncols())?;
        ensure_dim("R rows", m, self.r.nrows())?;
        ensure_dim("R columns", m, self.r.ncols())?;
        let symmetric = |a: &DMatrix<f64>| (a - a.transpose()).amax() <= 1e-12 * a.amax().max(1.0);
        if !symmetric(&self.q) || min_eigenvalue(&self.q) < -1e-10 * self.q.amax() {
            return Err(Error::invalid("Q", "must be symmetric positive semidefinite"));
        }
        if !symmetric(&self.r) || min_eigenvalue(&self.r) <= 0.0 {
            return Err(Error::invalid("R", "must be symmetric positive definite"));
        }
        Ok(())
    }
}

/// Per-step references `y_ref(1..N)` and `u_ref(0..N-1)`, one column per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub y: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl Reference {
    /// Output reference with a zero input reference.
    pub fn outputs(y: DMatrix<f64>, m: usize) -> Self {
        let n = y.ncols();
        Self {
            y,
            u: DMatrix::zeros(m, n),
        }
    }

    /// SISO output reference from a slice of length `N`.
    pub fn siso(y: &[f64]) -> Self {
        Self::outputs(DMatrix::from_row_slice(1, y.len(), y), 1)
    }
}

/// Closed interval with optional ends; `None` is unbounded.
pub type Interval = [Option<f64>; 2];

/// Per-channel box constraints; an empty list leaves every channel free.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    #[serde(default)]
    pub u_bounds: Vec<Interval>,
    #[serde(default)]
    pub y_bounds: Vec<Interval>,
}

impl ConstraintSpec {
    pub fn input_box(lo: f64, hi: f64, m: usize) -> Self {
        Self {
            u_bounds: vec![[Some(lo), Some(hi)]; m],
            y_bounds: Vec::new(),
        }
    }

    fn validate(&self, m: usize, p: usize) -> Result<()> {
        for (name, list, channels) in [("u_bounds", &self.u_bounds, m), ("y_bounds", &self.y_bounds, p)] {
            if !list.is_empty() && list.len() != channels {
                return Err(Error::invalid(
                    name,
                    format!("{} intervals for {channels} channels", list.len()),
                ));
            }
            for [lo, hi] in list {
                let (lo, hi) = (lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY));
                if lo.is_nan() || hi.is_nan() || lo > hi {
                    return Err(Error::invalid(name, format!("empty interval [{lo}, {hi}]")));
                }
            }
        }
        Ok(())
    }
}

fn interval_bounds(list: &[Interval], channels: usize, steps: usize) -> (DVector<f64>, DVector<f64>) {
    let mut lb = DVector::from_element(channels * steps, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(channels * steps, f64::INFINITY);
    for (c, [lo, hi]) in list.iter().enumerate() {
        for s in 0..steps {
            if let Some(lo) = lo {
                lb[s * channels + c] = *lo;
            }
            if let Some(hi) = hi {
                ub[s * channels + c] = *hi;
            }
        }
    }
    (lb, ub)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Formulation {
    PhiSpc,
    PhiDeepc,
    PhiDeepcR1 { lambda: f64 },
    PhiDeepcR2 { lambda: f64 },
    RidgePhiDeepc { gamma: f64 },
    KoopmanMpc,
}

impl Formulation {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PhiSpc => "phi-spc",
            Self::PhiDeepc => "phi-deepc",
            Self::PhiDeepcR1 { .. } => "phi-deepc-r1",
            Self::PhiDeepcR2 { .. } => "phi-deepc-r2",
            Self::RidgePhiDeepc { .. } => "ridge-phi-deepc",
            Self::KoopmanMpc => "koopman-mpc",
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |name, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be positive, got {v}")))
            }
        };
        match *self {
            Self::PhiDeepcR1 { lambda } | Self::PhiDeepcR2 { lambda } => positive("lambda", lambda),
            Self::RidgePhiDeepc { gamma } => positive("gamma", gamma),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSpec {
    pub formulation: Formulation,
    pub cost: CostSpec,
    pub constraints: ConstraintSpec,
    pub horizon: usize,
    pub t_ini: usize,
}

impl ControllerSpec {
    pub fn validate(&self, m: usize, p: usize) -> Result<()> {
        if self.horizon == 0 || self.t_ini == 0 {
            return Err(Error::invalid("horizon", "N and T_ini must be at least 1"));
        }
        self.formulation.validate()?;
        self.cost.validate(m, p)?;
        self.constraints.validate(m, p)
    }
}

/// Formulation data that does not change between control steps.
#[derive(Debug, Clone)]
enum Prepared {
    Spc {
        theta_fixed: DMatrix<f64>,
        theta_u: DMatrix<f64>,
    },
    Deepc {
        phi: DMatrix<f64>,
        yf: DMatrix<f64>,
    },
    R1 {
        phi: DMatrix<f64>,
        yf: DMatrix<f64>,
        pinv_fixed: DMatrix<f64>,
        pinv_u: DMatrix<f64>,
        lambda: f64,
    },
    R2 {
        theta_fixed: DMatrix<f64>,
        theta_u: DMatrix<f64>,
        phi: DMatrix<f64>,
        yf: DMatrix<f64>,
        lambda: f64,
    },
    Ridge {
        gram: DMatrix<f64>,
        yf_phi_t: DMatrix<f64>,
    },
    Koopman {
        psi: DMatrix<f64>,
        gamma: DMatrix<f64>,
    },
}

/// A controller ready to compile QPs for any initial window and reference.
#[derive(Debug, Clone)]
pub struct PredictiveController {
    spec: ControllerSpec,
    basis: BasisSet,
    m: usize,
    p: usize,
    prepared: Prepared,
}

fn split_columns(a: &DMatrix<f64>, at: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (a.columns(0, at).into_owned(), a.columns(at, a.ncols() - at).into_owned())
}

impl PredictiveController {
    /// Builds any data-driven formulation from a least-squares predictor.
    pub fn from_predictor(spec: ControllerSpec, predictor: &IdentifiedPredictor) -> Result<Self> {
        let basis = predictor.basis().clone();
        let dims = basis.dims();
        let (m, p) = (dims.m, dims.p);
        spec.validate(m, p)?;
        if !basis.is_affine() {
            return Err(Error::NonAffineBasis);
        }
        ensure_dim("basis horizon", spec.horizon, dims.n)?;
        ensure_dim("basis T_ini", spec.t_ini, dims.t_ini)?;
        let nf = basis.fixed_len();
        let least_squares = || -> Result<()> {
            if predictor.variant == Variant::LeastSquares {
                Ok(())
            } else {
                Err(Error::invalid("predictor", "a least-squares fit is required"))
            }
        };
        let prepared = match spec.formulation {
            Formulation::PhiSpc => {
                least_squares()?;
                let (theta_fixed, theta_u) = split_columns(&predictor.theta, nf);
                Prepared::Spc { theta_fixed, theta_u }
            }
            Formulation::PhiDeepc => Prepared::Deepc {
                phi: predictor.phi().clone(),
                yf: predictor.yf.clone(),
            },
            Formulation::PhiDeepcR1 { lambda } => {
                least_squares()?;
                let pinv = predictor
                    .phi_pinv
                    .as_ref()
                    .ok_or_else(|| Error::invalid("predictor", "missing Φ†"))?;
                let (pinv_fixed, pinv_u) = split_columns(pinv, nf);
                Prepared::R1 {
                    phi: predictor.phi().clone(),
                    yf: predictor.yf.clone(),
                    pinv_fixed,
                    pinv_u,
                    lambda,
                }
            }
            Formulation::PhiDeepcR2 { lambda } => {
                least_squares()?;
                let (theta_fixed, theta_u) = split_columns(&predictor.theta, nf);
                Prepared::R2 {
                    theta_fixed,
                    theta_u,
                    phi: predictor.phi().clone(),
                    yf: predictor.yf.clone(),
                    lambda,
                }
            }
            Formulation::RidgePhiDeepc { gamma } => {
                let phi = predictor.phi();
                Prepared::Ridge {
                    gram: ridge_gram(phi, gamma),
                    yf_phi_t: &predictor.yf * phi.transpose(),
                }
            }
            Formulation::KoopmanMpc => {
                return Err(Error::invalid(
                    "formulation",
                    "koopman-mpc is built from a fitted KoopmanModel",
                ))
            }
        };
        Ok(Self {
            spec,
            basis,
            m,
            p,
            prepared,
        })
    }

    /// Builds the lifted-linear-model controller.
    pub fn from_koopman(spec: ControllerSpec, model: &KoopmanModel) -> Result<Self> {
        if spec.formulation != Formulation::KoopmanMpc {
            return Err(Error::invalid("formulation", "expected koopman-mpc"));
        }
        let dims = model.basis.dims();
        spec.validate(dims.m, dims.p)?;
        ensure_dim("basis T_ini", spec.t_ini, dims.t_ini)?;
        let (psi, gamma) = model.prediction_matrices(spec.horizon);
        Ok(Self {
            spec,
            basis: model.basis.clone(),
            m: dims.m,
            p: dims.p,
            prepared: Prepared::Koopman { psi, gamma },
        })
    }

    pub fn spec(&self) -> &ControllerSpec {
        &self.spec
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of auxiliary decision variables after `[y; u]`.
    pub fn extra_len(&self) -> usize {
        match &self.prepared {
            Prepared::Spc { .. } | Prepared::Koopman { .. } => 0,
            Prepared::Deepc { phi, .. } | Prepared::R1 { phi, .. } | Prepared::R2 { phi, .. } => phi.ncols(),
            Prepared::Ridge { gram, .. } => gram.nrows(),
        }
    }

    /// Total number of decision variables.
    pub fn n_vars(&self) -> usize {
        (self.p + self.m) * self.spec.horizon + self.extra_len()
    }

    /// Lifted fixed part `φ_fixed` of the current window (the Koopman initial state).
    fn fixed_features(&self, window: &IniWindow) -> Result<DVector<f64>> {
        self.basis.eval_fixed(window)
    }

    /// Compiles the QP for the given window and reference.
    pub fn compile(&self, window: &IniWindow, reference: &Reference) -> Result<QpProblem> {
        let n = self.spec.horizon;
        let (m, p) = (self.m, self.p);
        ensure_dim("output reference rows", p, reference.y.nrows())?;
        ensure_dim("output reference steps", n, reference.y.ncols())?;
        ensure_dim("input reference rows", m, reference.u.nrows())?;
        ensure_dim("input reference steps", n, reference.u.ncols())?;
        let phi_fixed = self.fixed_features(window)?;
        let (ny, nu, ne) = (p * n, m * n, self.extra_len());
        let nz = ny + nu + ne;
        let (yo, uo, eo) = (0, ny, ny + nu);

        let mut h = DMatrix::zeros(nz, nz);
        let mut f = DVector::zeros(nz);
        let mut offset = 0.0;
        let cost = &self.spec.cost;
        for s in 0..n {
            let q = if s + 1 < n || cost.terminal_uses_stage_cost {
                cost.q.clone()
            } else {
                DMatrix::zeros(p, p)
            };
            let yr = reference.y.column(s);
            h.view_mut((yo + s * p, yo + s * p), (p, p)).copy_from(&(&q * 2.0));
            f.rows_mut(yo + s * p, p).copy_from(&(&q * yr * -2.0));
            offset += (yr.transpose() * &q * yr)[(0, 0)];
            let ur = reference.u.column(s);
            h.view_mut((uo + s * m, uo + s * m), (m, m)).copy_from(&(&cost.r * 2.0));
            f.rows_mut(uo + s * m, m).copy_from(&(&cost.r * ur * -2.0));
            offset += (ur.transpose() * &cost.r * ur)[(0, 0)];
        }

        let neg_eye = |k: usize| -DMatrix::<f64>::identity(k, k);
        let (a, b) = match &self.prepared {
            Prepared::Spc { theta_fixed, theta_u } => {
                let mut a = DMatrix::zeros(ny, nz);
                a.view_mut((0, yo), (ny, ny)).copy_from(&neg_eye(ny));
                a.view_mut((0, uo), (ny, nu)).copy_from(theta_u);
                (a, -(theta_fixed * &phi_fixed))
            }
            Prepared::Koopman { psi, gamma } => {
                let mut a = DMatrix::zeros(ny, nz);
                a.view_mut((0, yo), (ny, ny)).copy_from(&neg_eye(ny));
                a.view_mut((0, uo), (ny, nu)).copy_from(gamma);
                (a, -(psi * &phi_fixed))
            }
            Prepared::Deepc { phi, yf } | Prepared::R1 { phi, yf, .. } => {
                if let Prepared::R1 {
                    pinv_fixed,
                    pinv_u,
                    lambda,
                    ..
                } = &self.prepared
                {
                    // λ‖g − Φ†_fixed φ_fixed − Φ†_u u‖².
                    let c = pinv_fixed * &phi_fixed;
                    let two_l = 2.0 * lambda;
                    for i in 0..ne {
                        h[(eo + i, eo + i)] += two_l;
                    }
                    let cross = pinv_u * -two_l;
                    h.view_mut((eo, uo), (ne, nu)).copy_from(&cross);
                    h.view_mut((uo, eo), (nu, ne)).copy_from(&cross.transpose());
                    let uu = pinv_u.transpose() * pinv_u * two_l;
                    let mut huu = h.view_mut((uo, uo), (nu, nu));
                    huu += &uu;
                    f.rows_mut(eo, ne).copy_from(&(&c * -two_l));
                    let fu = pinv_u.transpose() * &c * two_l;
                    let mut fu_view = f.rows_mut(uo, nu);
                    fu_view += &fu;
                    offset += lambda * c.norm_squared();
                }
                deepc_rows(phi, yf, &phi_fixed, ny, nu, nz)
            }
            Prepared::R2 {
                theta_fixed,
                theta_u,
                phi,
                yf,
                lambda,
            } => {
                for i in 0..ne {
                    h[(eo + i, eo + i)] = 2.0 * lambda;
                }
                let l = phi.nrows();
                let mut a = DMatrix::zeros(l + ny, nz);
                a.view_mut((0, eo), (l, ne)).copy_from(phi);
                a.view_mut((l, yo), (ny, ny)).copy_from(&neg_eye(ny));
                a.view_mut((l, uo), (ny, nu)).copy_from(theta_u);
                a.view_mut((l, eo), (ny, ne)).copy_from(yf);
                let mut b = DVector::zeros(l + ny);
                b.rows_mut(l, ny).copy_from(&-(theta_fixed * &phi_fixed));
                (a, b)
            }
            Prepared::Ridge { gram, yf_phi_t } => deepc_rows(gram, yf_phi_t, &phi_fixed, ny, nu, nz),
        };

        let (ylb, yub) = interval_bounds(&self.spec.constraints.y_bounds, p, n);
        let (ulb, uub) = interval_bounds(&self.spec.constraints.u_bounds, m, n);
        let mut lb = DVector::from_element(nz, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(nz, f64::INFINITY);
        lb.rows_mut(yo, ny).copy_from(&ylb);
        ub.rows_mut(yo, ny).copy_from(&yub);
        lb.rows_mut(uo, nu).copy_from(&ulb);
        ub.rows_mut(uo, nu).copy_from(&uub);

        let mut problem = QpProblem::new(h, f, a, b, lb, ub)?;
        problem.offset = offset;
        Ok(problem)
    }

    /// Splits a solution vector into `(y, u)`.
    pub fn split(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (ny, nu) = (self.p * self.spec.horizon, self.m * self.spec.horizon);
        (z.rows(0, ny).into_owned(), z.rows(ny, nu).into_owned())
    }

    /// The auxiliary part of a solution vector (`g` or `ĝ`).
    pub fn extra<'a>(&self, z: &'a DVector<f64>) -> nalgebra::DVectorView<'a, f64> {
        let start = (self.p + self.m) * self.spec.horizon;
        z.rows(start, z.len() - start)
    }
}

/// Rows `M_fixed g = φ_fixed`, `M_u g − u = 0`, `Y g − y = 0` for `M = [M_fixed; M_u]`.
fn deepc_rows(
    mat: &DMatrix<f64>,
    y_map: &DMatrix<f64>,
    phi_fixed: &DVector<f64>,
    ny: usize,
    nu: usize,
    nz: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let (l, ne) = mat.shape();
    let nf = phi_fixed.len();
    let eo = ny + nu;
    let mut a = DMatrix::zeros(l + ny, nz);
    a.view_mut((0, eo), (l, ne)).copy_from(mat);
    a.view_mut((nf, ny), (nu, nu)).copy_from(&-DMatrix::<f64>::identity(nu, nu));
    a.view_mut((l, 0), (ny, ny)).copy_from(&-DMatrix::<f64>::identity(ny, ny));
    a.view_mut((l, eo), (ny, ne)).copy_from(y_map);
    let mut b = DVector::zeros(l + ny);
    b.rows_mut(0, nf).copy_from(phi_fixed);
    (a, b)
}

fn expect(spec: &ControllerSpec, name: &str) -> Result<()> {
    if spec.formulation.name() == name {
        Ok(())
    } else {
        Err(Error::invalid(
            "formulation",
            format!("expected {name}, got {}", spec.formulation.name()),
        ))
    }
}

/// One-shot compilation helpers; [`PredictiveController`] caches the window-independent work.
pub fn compile_spc(
    spec: &ControllerSpec,
    predictor: &IdentifiedPredictor,
    window: &IniWindow,
    reference: &Reference,
) -> Result<QpProblem> {
    expect(spec, "phi-spc")?;
    PredictiveController::from_predictor(spec.clone(), predictor)?.compile(window, reference)
}

pub fn compile_deepc(
    spec: &ControllerSpec,
    predictor: &IdentifiedPredictor,
    window: &IniWindow,
    reference: &Reference,
) -> Result<QpProblem> {
    expect(spec, "phi-deepc")?;
    PredictiveController::from_predictor(spec.clone(), predictor)?.compile(window, reference)
}

pub fn compile_deepc_r1(
    spec: &ControllerSpec,
    predictor: &IdentifiedPredictor,
    window: &IniWindow,
    reference: &Reference,
) -> Result<QpProblem> {
    expect(spec, "phi-deepc-r1")?;
    PredictiveController::from_predictor(spec.clone(), predictor)?.compile(window, reference)
}

pub fn compile_deepc_r2(
    spec: &ControllerSpec,
    predictor: &IdentifiedPredictor,
    window: &IniWindow,
    reference: &Reference,
) -> Result<QpProblem> {
    expect(spec, "phi-deepc-r2")?;
    PredictiveController::from_predictor(spec.clone(), predictor)?.compile(window, reference)
}

pub fn compile_ridge_deepc(
    spec: &ControllerSpec,
    predictor: &IdentifiedPredictor,
    window: &IniWindow,
    reference: &Reference,
) -> Result<QpProblem> {
    expect(spec, "ridge-phi-deepc")?;
    PredictiveController::from_predictor(spec.clone(), predictor)?.compile(window, reference)
}

pub fn compile_koopman_mpc(
    model: &KoopmanModel,
    spec: &ControllerSpec,
    window: &IniWindow,
    reference: &Reference,
) -> Result<QpProblem> {
    PredictiveController::from_koopman(spec.clone(), model)?.compile(window, reference)
}
