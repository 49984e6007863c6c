use std::collections::VecDeque;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{PredictiveController, Reference};
use crate::error::{ensure_dim, Error, Result};
use crate::qp::{solve_qp, QpSolution, QpStatus, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::signal::IniWindow;

/// What to apply when the QP has no optimal solution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    #[default]
    HoldLast,
    Abort,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub u: DVector<f64>,
    /// Solver output, absent if compilation or solving raised an error.
    pub solution: Option<QpSolution>,
    /// Predicted outputs `y(1..N)` at the optimizer.
    pub predicted_y: Option<DVector<f64>>,
    pub fell_back: bool,
    pub solve_time: Duration,
}

impl StepOutcome {
    pub fn status(&self) -> Option<QpStatus> {
        self.solution.as_ref().map(|s| s.status)
    }
}

/// Receding-horizon loop state: the controller plus its `(u_ini, y_ini)` buffers.
#[derive(Debug, Clone)]
pub struct RecedingHorizon {
    controller: PredictiveController,
    u_hist: VecDeque<DVector<f64>>,
    y_hist: VecDeque<DVector<f64>>,
    awaiting_measurement: bool,
    pub fallback: Fallback,
    pub tol: f64,
    pub max_iter: usize,
}

fn split_samples(v: &DVector<f64>, width: usize) -> VecDeque<DVector<f64>> {
    (0..v.len() / width).map(|i| v.rows(i * width, width).into_owned()).collect()
}

impl RecedingHorizon {
    /// `initial` holds `u(k−T_ini..k−1)` and `y(k−T_ini+1..k)` for the first step `k`.
    pub fn new(controller: PredictiveController, initial: &IniWindow) -> Result<Self> {
        let (m, p, t_ini) = (controller.m(), controller.p(), controller.spec().t_ini);
        ensure_dim("u_ini length", t_ini * m, initial.u_ini.len())?;
        ensure_dim("y_ini length", t_ini * p, initial.y_ini.len())?;
        Ok(Self {
            u_hist: split_samples(&initial.u_ini, m),
            y_hist: split_samples(&initial.y_ini, p),
            controller,
            awaiting_measurement: false,
            fallback: Fallback::HoldLast,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        })
    }

    pub fn controller(&self) -> &PredictiveController {
        &self.controller
    }

    pub fn window(&self) -> IniWindow {
        let stack = |h: &VecDeque<DVector<f64>>| DVector::from_iterator(h.iter().map(|v| v.len()).sum(), h.iter().flat_map(|v| v.iter().cloned()));
        IniWindow {
            u_ini: stack(&self.u_hist),
            y_ini: stack(&self.y_hist),
        }
    }

    /// Solves for the current window, records `u(k)` and returns it.
    pub fn step(&mut self, reference: &Reference) -> Result<StepOutcome> {
        if self.awaiting_measurement {
            return Err(Error::invalid("step", "the previous output has not been measured"));
        }
        let window = self.window();
        let last = self.u_hist.back().cloned().expect("T_ini ≥ 1");
        let problem = self.controller.compile(&window, reference)?;
        let started = Instant::now();
        let solved = solve_qp(&problem, self.tol, self.max_iter);
        let solve_time = started.elapsed();
        let outcome = match solved {
            Ok(sol) if sol.status == QpStatus::Optimal => {
                let (y, u) = self.controller.split(&sol.z);
                StepOutcome {
                    u: u.rows(0, self.controller.m()).into_owned(),
                    solution: Some(sol),
                    predicted_y: Some(y),
                    fell_back: false,
                    solve_time,
                }
            }
            other => {
                let reason = match &other {
                    Ok(sol) => format!("status {}", sol.status),
                    Err(e) => e.to_string(),
                };
                if self.fallback == Fallback::Abort {
                    return match other {
                        Err(e) => Err(e),
                        Ok(_) => Err(Error::invalid("qp", reason)),
                    };
                }
                log::warn!(
                    "{}: QP not solved ({reason}); holding the previous input",
                    self.controller.spec().formulation.name()
                );
                StepOutcome {
                    u: last,
                    solution: other.ok(),
                    predicted_y: None,
                    fell_back: true,
                    solve_time,
                }
            }
        };
        self.u_hist.pop_front();
        self.u_hist.push_back(outcome.u.clone());
        self.awaiting_measurement = true;
        Ok(outcome)
    }

    /// Records the output `y(k+1)` produced by the last applied input.
    pub fn measure(&mut self, y: &DVector<f64>) -> Result<()> {
        ensure_dim("measurement length", self.controller.p(), y.len())?;
        if !self.awaiting_measurement {
            return Err(Error::invalid("measure", "no input has been applied since the last measurement"));
        }
        self.y_hist.pop_front();
        self.y_hist.push_back(y.clone());
        self.awaiting_measurement = false;
        Ok(())
    }
}
