//! Simulation plants, the closed-loop runner, and tracking metrics.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{Fallback, PredictiveController, RecedingHorizon, Reference};
use crate::error::{ensure_dim, Error, Result};
use crate::qp::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::signal::{format_float, GaussianNoise, IniWindow, TrajectoryDataset};

/// Discrete-time plant with a noise-free output map.
pub trait Plant {
    fn m(&self) -> usize;
    fn p(&self) -> usize;
    fn sample_time(&self) -> f64;
    /// Noise-free output of the current state.
    fn output(&self) -> DVector<f64>;
    /// Advances the state by one sample under input `u`.
    fn advance(&mut self, u: &DVector<f64>);
}

/// Damped pendulum driven by a torque, measured by its angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumPlant {
    pub mass: f64,
    pub length: f64,
    pub friction: f64,
    pub gravity: f64,
    pub sample_time: f64,
    /// `(x₁, x₂)`: angular-rate-like state and angle.
    #[serde(default)]
    pub state: [f64; 2],
}

impl Default for PendulumPlant {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            friction: 0.1,
            gravity: 9.81,
            sample_time: 1.0 / 30.0,
            state: [0.0, 0.0],
        }
    }
}

impl PendulumPlant {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mass", self.mass),
            ("length", self.length),
            ("sample_time", self.sample_time),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Moment of inertia `M L² / 3`.
    pub fn inertia(&self) -> f64 {
        self.mass * self.length * self.length / 3.0
    }

    /// Applies torque `u` and returns the measured angle `x₂(k+1) + w`.
    pub fn step(&mut self, u: f64, w: f64) -> f64 {
        let j = self.inertia();
        let ts = self.sample_time;
        let [x1, x2] = self.state;
        let next1 = (1.0 - self.friction * ts / j) * x1 + ts / j * u
            - self.mass * self.length * self.gravity * ts / (2.0 * j) * x2.sin();
        let next2 = ts * x1 + x2;
        self.state = [next1, next2];
        next2 + w
    }
}

impl Plant for PendulumPlant {
    fn m(&self) -> usize {
        1
    }

    fn p(&self) -> usize {
        1
    }

    fn sample_time(&self) -> f64 {
        self.sample_time
    }

    fn output(&self) -> DVector<f64> {
        DVector::from_element(1, self.state[1])
    }

    fn advance(&mut self, u: &DVector<f64>) {
        self.step(u[0], 0.0);
    }
}

/// Linear state-space plant `x⁺ = A x + B u`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTestPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub x: DVector<f64>,
    pub sample_time: f64,
}

impl LinearTestPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, sample_time: f64) -> Result<Self> {
        let n = a.nrows();
        ensure_dim("A columns", n, a.ncols())?;
        ensure_dim("B rows", n, b.nrows())?;
        ensure_dim("C columns", n, c.ncols())?;
        Ok(Self {
            a,
            b,
            c,
            x: DVector::zeros(n),
            sample_time,
        })
    }

    /// The stable, controllable and observable two-state sanity plant.
    pub fn second_order() -> Self {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[0.7, 0.4, -0.3, 0.9]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            1.0,
        )
        .expect("consistent dimensions")
    }
}

impl Plant for LinearTestPlant {
    fn m(&self) -> usize {
        self.b.ncols()
    }

    fn p(&self) -> usize {
        self.c.nrows()
    }

    fn sample_time(&self) -> f64 {
        self.sample_time
    }

    fn output(&self) -> DVector<f64> {
        &self.c * &self.x
    }

    fn advance(&mut self, u: &DVector<f64>) {
        self.x = &self.a * &self.x + &self.b * u;
    }
}

/// Drives `plant` with `inputs` (one column per sample) and records `y(k)` before each `u(k)`.
pub fn simulate_open_loop<P: Plant + ?Sized>(plant: &mut P, inputs: &DMatrix<f64>) -> Result<TrajectoryDataset> {
    ensure_dim("input channels", plant.m(), inputs.nrows())?;
    let mut outputs = DMatrix::zeros(plant.p(), inputs.ncols());
    for k in 0..inputs.ncols() {
        outputs.set_column(k, &plant.output());
        plant.advance(&inputs.column(k).into_owned());
    }
    TrajectoryDataset::new(inputs.clone(), outputs, plant.sample_time())
}

/// `r(k) = sin(2π F k Ts)` for `k = 0..=⌊duration/Ts⌋`.
pub fn reference_sinusoid(frequency: f64, duration: f64, sample_time: f64) -> Result<Vec<f64>> {
    if !(frequency > 0.0) {
        return Err(Error::invalid("frequency", format!("must be positive, got {frequency}")));
    }
    if !(sample_time > 0.0) || !(duration >= 0.0) {
        return Err(Error::invalid("duration", "needs duration ≥ 0 and a positive sample time"));
    }
    // Round away representation error so 4 s / 0.01 s gives 400, not 399.
    let steps = (duration / sample_time + 1e-9).floor() as usize;
    Ok((0..=steps)
        .map(|k| (2.0 * std::f64::consts::PI * frequency * k as f64 * sample_time).sin())
        .collect())
}

/// How the controller's first window is obtained.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Warmup {
    /// `T_ini` zero inputs.
    #[default]
    Zero,
    /// The given inputs (`m × T_ini`), typically the identification record's tail.
    Recorded(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopOptions {
    pub steps: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub warmup: Warmup,
    pub fallback: Fallback,
    pub tol: f64,
    pub max_iter: usize,
}

impl ClosedLoopOptions {
    /// Zero warm-up, hold-last fallback and default solver settings.
    pub fn new(steps: usize, noise_std: f64, seed: u64) -> Self {
        Self {
            steps,
            noise_std,
            seed,
            warmup: Warmup::Zero,
            fallback: Fallback::HoldLast,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// One control step: `u(k)` and the resulting `y(k+1)` against `r(k+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub k: usize,
    /// Time of `y` and `r`.
    pub t: f64,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub r: Vec<f64>,
    pub objective: f64,
    pub qp_status: String,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<LogRecord>,
    /// Steps that applied the fallback input.
    pub fallbacks: usize,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes `k,t,u,y,r,objective,qp_status,solve_ms`, one column per channel for `u`, `y`, `r`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        out.write_all(self.to_csv_string().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv_string(&self) -> String {
        let (m, p) = self
            .records
            .first()
            .map(|r| (r.u.len(), r.y.len()))
            .unwrap_or((1, 1));
        let channel = |name: &str, n: usize| -> Vec<String> {
            if n == 1 {
                vec![name.to_string()]
            } else {
                (1..=n).map(|i| format!("{name}{i}")).collect()
            }
        };
        let mut header = vec!["k".to_string(), "t".to_string()];
        header.extend(channel("u", m));
        header.extend(channel("y", p));
        header.extend(channel("r", p));
        header.extend(["objective", "qp_status", "solve_ms"].map(String::from));
        let mut s = header.join(",");
        s.push('\n');
        for r in &self.records {
            let mut row = vec![r.k.to_string(), format_float(r.t)];
            row.extend(r.u.iter().chain(&r.y).chain(&r.r).map(|v| format_float(*v)));
            row.push(format_float(r.objective));
            row.push(r.qp_status.clone());
            row.push(format!("{:.6}", r.solve_ms));
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

fn reference_window(reference: &DMatrix<f64>, first: usize, horizon: usize) -> DMatrix<f64> {
    let last = reference.ncols() - 1;
    DMatrix::from_fn(reference.nrows(), horizon, |i, s| reference[(i, (first + s).min(last))])
}

/// Runs the receding-horizon loop for `opts.steps` steps against `reference` (`p × len`).
///
/// The plant first receives `T_ini` warm-up inputs to fill the controller window. Row `k` of
/// the log pairs `u(k)` with `y(k+1)` and `r(k+1)`; lookahead past the end of the reference
/// repeats its last sample.
pub fn run_closed_loop<P: Plant + ?Sized>(
    plant: &mut P,
    controller: PredictiveController,
    reference: &DMatrix<f64>,
    opts: &ClosedLoopOptions,
) -> Result<TrajectoryLog> {
    let (m, p) = (plant.m(), plant.p());
    ensure_dim("controller inputs", m, controller.m())?;
    ensure_dim("controller outputs", p, controller.p())?;
    ensure_dim("reference rows", p, reference.nrows())?;
    if reference.ncols() < opts.steps + 1 {
        return Err(Error::InsufficientData {
            required: opts.steps + 1,
            available: reference.ncols(),
        });
    }
    let (t_ini, horizon) = (controller.spec().t_ini, controller.spec().horizon);
    let warm = match &opts.warmup {
        Warmup::Zero => DMatrix::zeros(m, t_ini),
        Warmup::Recorded(u) => {
            ensure_dim("warm-up input channels", m, u.nrows())?;
            ensure_dim("warm-up samples", t_ini, u.ncols())?;
            u.clone()
        }
    };
    let mut noise = GaussianNoise::new(opts.seed);
    let mut measure = |plant: &P| -> DVector<f64> {
        let mut y = plant.output();
        if opts.noise_std > 0.0 {
            for v in y.iter_mut() {
                *v += opts.noise_std * noise.sample();
            }
        }
        y
    };

    let mut y_ini = DVector::zeros(t_ini * p);
    for k in 0..t_ini {
        plant.advance(&warm.column(k).into_owned());
        y_ini.rows_mut(k * p, p).copy_from(&measure(plant));
    }
    let u_ini = DVector::from_column_slice(warm.as_slice());
    let mut loop_state = RecedingHorizon::new(controller, &IniWindow { u_ini, y_ini })?;
    loop_state.fallback = opts.fallback;
    loop_state.tol = opts.tol;
    loop_state.max_iter = opts.max_iter;

    let mut log = TrajectoryLog::default();
    for k in 0..opts.steps {
        let reference_y = reference_window(reference, k + 1, horizon);
        let step = loop_state.step(&Reference::outputs(reference_y, m))?;
        plant.advance(&step.u);
        let y = measure(plant);
        loop_state.measure(&y)?;
        if step.fell_back {
            log.fallbacks += 1;
        }
        log.records.push(LogRecord {
            k,
            t: (k + 1) as f64 * plant.sample_time(),
            u: step.u.iter().cloned().collect(),
            y: y.iter().cloned().collect(),
            r: reference.column(k + 1).iter().cloned().collect(),
            objective: step.solution.as_ref().map_or(f64::NAN, |s| s.objective),
            qp_status: step
                .status()
                .map_or_else(|| "error".to_string(), |s| s.to_string()),
            solve_ms: step.solve_time.as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

/// Average tracking indices of a log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub j_ise: f64,
    pub j_iae: f64,
    pub j_u: f64,
    pub j_track: f64,
    /// Mean QP solve time in seconds.
    pub mean_cpu: f64,
}

/// Running sums behind [`MetricsReport`], so logs can be scored as they stream in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsAccumulator {
    count: usize,
    ise: f64,
    iae: f64,
    input: f64,
    track: f64,
    cpu: f64,
}

impl MetricsAccumulator {
    /// Adds one step; `y_ref`/`u_ref` are the references paired with `y` and `u`.
    pub fn push(
        &mut self,
        record: &LogRecord,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        y_ref: &[f64],
        u_ref: &[f64],
    ) {
        let e = DVector::from_iterator(record.y.len(), record.y.iter().zip(y_ref).map(|(y, r)| y - r));
        let du = DVector::from_iterator(record.u.len(), record.u.iter().zip(u_ref).map(|(u, r)| u - r));
        self.count += 1;
        self.ise += e.norm_squared();
        self.iae += e.lp_norm(1);
        self.input += record.u.iter().map(|u| u.abs()).sum::<f64>();
        self.track += e.dot(&(q * &e)) + du.dot(&(r * &du));
        self.cpu += record.solve_ms / 1e3;
    }

    pub fn report(&self) -> MetricsReport {
        if self.count == 0 {
            return MetricsReport::default();
        }
        let n = self.count as f64;
        MetricsReport {
            j_ise: self.ise / n,
            j_iae: self.iae / n,
            j_u: self.input / n,
            j_track: self.track / n,
            mean_cpu: self.cpu / n,
        }
    }
}

/// Tracking indices of a log against the logged output reference and the input reference
/// `u_ref` (one entry per record, each of length `m`; empty means zero).
pub fn compute_metrics(
    log: &TrajectoryLog,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    u_ref: &[Vec<f64>],
) -> Result<MetricsReport> {
    if log.is_empty() {
        return Err(Error::invalid("log", "no records to score"));
    }
    if !u_ref.is_empty() {
        ensure_dim("input reference length", log.len(), u_ref.len())?;
    }
    let mut acc = MetricsAccumulator::default();
    for (i, rec) in log.records.iter().enumerate() {
        ensure_dim("Q size", rec.y.len(), q.nrows())?;
        ensure_dim("R size", rec.u.len(), r.nrows())?;
        let zero = vec![0.0; rec.u.len()];
        let ur = u_ref.get(i).unwrap_or(&zero);
        acc.push(rec, q, r, &rec.r, ur);
    }
    Ok(acc.report())
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_phi, BasisSet, Dims, Structure};
    use crate::control::{ConstraintSpec, ControllerSpec, CostSpec, Formulation};
    use crate::regress::fit_least_squares;
    use crate::signal::build_hankel;
    use proptest::prelude::*;

    #[test]
    fn pendulum_equilibria() {
        let mut p = PendulumPlant::default();
        assert_eq!(p.step(0.0, 0.0), 0.0);
        assert_eq!(p.state, [0.0, 0.0]);
        let mut p = PendulumPlant {
            state: [0.0, std::f64::consts::PI],
            ..Default::default()
        };
        let y = p.step(0.0, 0.0);
        assert!(p.state[0].abs() < 1e-14);
        assert_eq!(y, std::f64::consts::PI);
    }

    #[test]
    fn pendulum_single_step_by_hand() {
        let mut p = PendulumPlant {
            state: [1.0, 0.0],
            ..Default::default()
        };
        assert!((p.inertia() - 1.0 / 3.0).abs() < 1e-15);
        let y = p.step(0.0, 0.0);
        assert!((p.state[0] - 0.99).abs() < 1e-12);
        assert!((p.state[1] - 1.0 / 30.0).abs() < 1e-15);
        assert_eq!(y, p.state[1]);
        assert_eq!(PendulumPlant::default().step(0.0, 0.25), 0.25);
    }

    fn settle_step(mut p: PendulumPlant, steps: usize) -> Option<usize> {
        (0..steps).find(|_| {
            let before = p.state;
            p.step(0.0, 0.0);
            ((p.state[0] - before[0]).powi(2) + (p.state[1] - before[1]).powi(2)).sqrt() < 1e-6
        })
    }

    #[test]
    fn nominal_friction_does_not_damp_the_discrete_map() {
        let p = PendulumPlant::default();
        let (ts, j) = (p.sample_time, p.inertia());
        // Linearization at rest: [[1 − bTs/J, −MLgTs/(2J)], [Ts, 1]].
        let det = 1.0 - p.friction * ts / j + p.mass * p.length * p.gravity * ts / (2.0 * j) * ts;
        assert!(det > 1.0);
        let mut q = PendulumPlant { state: [0.0, 0.01], ..p.clone() };
        let mut peak: f64 = 0.0;
        for _ in 0..3000 {
            peak = peak.max(q.step(0.0, 0.0).abs());
        }
        assert!(peak > 0.1, "{peak}");
        assert_eq!(settle_step(PendulumPlant { state: [0.0, 0.3], ..p }, 10_000), None);
    }

    #[test]
    fn sufficient_friction_settles() {
        let p = PendulumPlant {
            friction: 0.5,
            state: [0.0, 0.3],
            ..Default::default()
        };
        assert!(settle_step(p, 10_000).is_some());
    }

    #[test]
    fn sinusoid_samples() {
        let r = reference_sinusoid(1.0, 1.0, 0.25).unwrap();
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0];
        assert_eq!(r.len(), 5);
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(reference_sinusoid(1.0, 4.0, 1.0 / 30.0).unwrap().len(), 121);
        assert_eq!(reference_sinusoid(1.0, 4.0, 0.01).unwrap().len(), 401);
        assert_eq!(reference_sinusoid(1.0, 0.0, 0.1).unwrap(), vec![0.0]);
        assert!(reference_sinusoid(0.0, 1.0, 0.1).is_err());
    }

    fn record(k: usize, u: f64, y: f64, r: f64, ms: f64) -> LogRecord {
        LogRecord {
            k,
            t: k as f64,
            u: vec![u],
            y: vec![y],
            r: vec![r],
            objective: 0.0,
            qp_status: "optimal".into(),
            solve_ms: ms,
        }
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn metrics_of_perfect_tracking_vanish() {
        let log = TrajectoryLog {
            records: (0..5).map(|k| record(k, 0.0, k as f64, k as f64, 0.0)).collect(),
            fallbacks: 0,
        };
        let m = compute_metrics(&log, &scalar(200.0), &scalar(0.5), &[]).unwrap();
        assert_eq!((m.j_ise, m.j_iae, m.j_u, m.j_track), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn metrics_of_constant_error() {
        let log = TrajectoryLog {
            records: (0..10).map(|k| record(k, 0.0, 1.0, 0.0, 2.0)).collect(),
            fallbacks: 0,
        };
        let m = compute_metrics(&log, &scalar(1.0), &scalar(1.0), &[]).unwrap();
        assert_eq!((m.j_ise, m.j_iae), (1.0, 1.0));
        assert!((m.mean_cpu - 2e-3).abs() < 1e-15);
        assert!(compute_metrics(&TrajectoryLog::default(), &scalar(1.0), &scalar(1.0), &[]).is_err());
    }

    #[test]
    fn metrics_three_step_hand_oracle() {
        let log = TrajectoryLog {
            records: vec![
                record(0, 1.0, 0.5, 0.0, 1.0),
                record(1, -2.0, 0.2, 1.0, 2.0),
                record(2, 0.5, -0.1, -0.4, 3.0),
            ],
            fallbacks: 0,
        };
        let u_ref = vec![vec![0.0], vec![-1.0], vec![1.0]];
        let m = compute_metrics(&log, &scalar(200.0), &scalar(0.5), &u_ref).unwrap();
        // e = (0.5, -0.8, 0.3); u = (1, -2, 0.5); u - u_r = (1, -1, -0.5).
        assert!((m.j_ise - (0.25 + 0.64 + 0.09) / 3.0).abs() < 1e-12);
        assert!((m.j_iae - (0.5 + 0.8 + 0.3) / 3.0).abs() < 1e-12);
        assert!((m.j_u - 3.5 / 3.0).abs() < 1e-12);
        assert!((m.j_track - (200.0 * 0.98 + 0.5 * 2.25) / 3.0).abs() < 1e-12);
        assert!((m.mean_cpu - 0.002).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn metrics_are_chunking_invariant(
            values in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..40),
            cut in 0usize..40,
        ) {
            let records: Vec<_> = values.iter().enumerate().map(|(k, &(u, y, r))| record(k, u, y, r, 1.0)).collect();
            let (q, r) = (scalar(3.0), scalar(0.25));
            let cut = cut.min(records.len());
            let mut streamed = MetricsAccumulator::default();
            for chunk in [&records[..cut], &records[cut..]] {
                for rec in chunk {
                    streamed.push(rec, &q, &r, &rec.r, &[0.0]);
                }
            }
            let batch = compute_metrics(&TrajectoryLog { records, fallbacks: 0 }, &q, &r, &[]).unwrap();
            prop_assert_eq!(batch, streamed.report());
        }
    }

    fn linear_controller(formulation: Formulation) -> PredictiveController {
        let mut plant = LinearTestPlant::second_order();
        let mut g = crate::signal::GaussianNoise::new(1);
        let inputs = DMatrix::from_fn(1, 60, |_, _| g.sample());
        let data = simulate_open_loop(&mut plant, &inputs).unwrap();
        let blocks = build_hankel(&data, 2, 4).unwrap();
        let basis = BasisSet::identity_linear(Dims::from_blocks(&blocks), Structure::AffineInFutureInputs, false).unwrap();
        let predictor = fit_least_squares(&build_phi(&basis, &blocks).unwrap(), &blocks.yf).unwrap();
        let spec = ControllerSpec {
            formulation,
            cost: CostSpec::diagonal(5.0, 0.1, 1, 1),
            constraints: ConstraintSpec::default(),
            horizon: 4,
            t_ini: 2,
        };
        PredictiveController::from_predictor(spec, &predictor).unwrap()
    }

    fn options(seed: u64, noise_std: f64) -> ClosedLoopOptions {
        ClosedLoopOptions::new(20, noise_std, seed)
    }

    #[test]
    fn equilibrium_regulation_stays_at_rest() {
        for f in [Formulation::PhiSpc, Formulation::PhiDeepcR2 { lambda: 10.0 }] {
            let mut plant = LinearTestPlant::second_order();
            let log = run_closed_loop(&mut plant, linear_controller(f), &DMatrix::zeros(1, 21), &options(0, 0.0)).unwrap();
            for r in &log.records {
                assert!(r.u[0].abs() < 1e-7 && r.y[0].abs() < 1e-7);
            }
        }
    }

    #[test]
    fn noise_free_runs_ignore_the_seed() {
        let reference = DMatrix::from_fn(1, 25, |_, k| (0.3 * k as f64).sin());
        let run = |seed| {
            let mut plant = LinearTestPlant::second_order();
            let log = run_closed_loop(&mut plant, linear_controller(Formulation::PhiSpc), &reference, &options(seed, 0.0)).unwrap();
            log.records.iter().map(|r| (r.u.clone(), r.y.clone(), r.objective)).collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn log_rows_pair_input_with_next_output() {
        let reference = DMatrix::from_fn(1, 25, |_, k| (0.3 * k as f64).sin());
        let mut plant = LinearTestPlant::second_order();
        let opts = ClosedLoopOptions {
            warmup: Warmup::Recorded(DMatrix::from_row_slice(1, 2, &[0.5, -0.5])),
            ..options(3, 0.0)
        };
        let log = run_closed_loop(&mut plant, linear_controller(Formulation::PhiSpc), &reference, &opts).unwrap();
        let mut replay = LinearTestPlant::second_order();
        replay.advance(&DVector::from_element(1, 0.5));
        replay.advance(&DVector::from_element(1, -0.5));
        for rec in &log.records {
            replay.advance(&DVector::from_element(1, rec.u[0]));
            assert_eq!(rec.y[0], replay.output()[0]);
            assert_eq!(rec.r[0], reference[(0, rec.k + 1)]);
        }
        let csv = log.to_csv_string();
        assert!(csv.starts_with("k,t,u,y,r,objective,qp_status,solve_ms\n"));
        assert_eq!(csv.lines().count(), 21);
    }
}
