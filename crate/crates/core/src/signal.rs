//! Trajectory storage, Hankel data matrices, excitation signals and measurement noise.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Input/output record of a plant experiment.
///
/// Samples are stored column-wise: `inputs` is `m × len`, `outputs` is `p × len`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    sample_time: f64,
}

impl TrajectoryDataset {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>, sample_time: f64) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::invalid("inputs", "at least one input channel is required"));
        }
        if outputs.nrows() == 0 {
            return Err(Error::invalid("outputs", "at least one output channel is required"));
        }
        ensure_dim("dataset length", inputs.ncols(), outputs.ncols())?;
        if inputs.ncols() == 0 {
            return Err(Error::InsufficientData {
                required: 1,
                available: 0,
            });
        }
        if !(sample_time > 0.0 && sample_time.is_finite()) {
            return Err(Error::invalid("sample_time", "must be positive and finite"));
        }
        Ok(Self {
            inputs,
            outputs,
            sample_time,
        })
    }

    /// Single-input single-output dataset from two equal-length slices.
    pub fn from_siso(u: &[f64], y: &[f64], sample_time: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_row_slice(1, u.len(), u),
            DMatrix::from_row_slice(1, y.len(), y),
            sample_time,
        )
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn m(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn p(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn input(&self, k: usize) -> DVector<f64> {
        self.inputs.column(k).into_owned()
    }

    pub fn output(&self, k: usize) -> DVector<f64> {
        self.outputs.column(k).into_owned()
    }

    /// Initial window ending at sample `k`: inputs `u(k-T_ini..k-1)`, outputs `y(k-T_ini+1..k)`.
    pub fn ini_window(&self, k: usize, t_ini: usize) -> Result<IniWindow> {
        if t_ini == 0 {
            return Err(Error::invalid("t_ini", "must be at least 1"));
        }
        if k < t_ini || k >= self.len() {
            return Err(Error::invalid(
                "k",
                format!("window end {k} needs {t_ini} <= k < {}", self.len()),
            ));
        }
        let u = stack_columns(&self.inputs, k - t_ini, t_ini, None);
        let y = stack_columns(&self.outputs, k + 1 - t_ini, t_ini, None);
        Ok(IniWindow { u_ini: u, y_ini: y })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.m()).map(|i| format!("u{i}")));
        header.extend((1..=self.p()).map(|i| format!("y{i}")));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![format_float(k as f64 * self.sample_time)];
            row.extend(self.inputs.column(k).iter().map(|v| format_float(*v)));
            row.extend(self.outputs.column(k).iter().map(|v| format_float(*v)));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a `t,u1..um,y1..yp` file; the sample time is taken from the first two rows.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let malformed = |reason: String| Error::MalformedFile {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.get(0) != Some("t") {
            return Err(malformed("first column must be `t`".into()));
        }
        let m = header.iter().filter(|h| h.starts_with('u')).count();
        let p = header.iter().filter(|h| h.starts_with('y')).count();
        for (i, h) in header.iter().enumerate().skip(1) {
            let expected = if i <= m {
                format!("u{i}")
            } else {
                format!("y{}", i - m)
            };
            if h != expected {
                return Err(malformed(format!("expected column `{expected}`, found `{h}`")));
            }
        }
        if m == 0 || p == 0 {
            return Err(malformed("need at least one u and one y column".into()));
        }
        let mut t = Vec::new();
        let mut u = Vec::new();
        let mut y = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != 1 + m + p {
                return Err(malformed(format!("row {} has {} fields", line + 1, rec.len())));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| malformed(format!("row {}: {e}", line + 1)))
            };
            t.push(parse(&rec[0])?);
            for i in 0..m {
                u.push(parse(&rec[1 + i])?);
            }
            for i in 0..p {
                y.push(parse(&rec[1 + m + i])?);
            }
        }
        if t.len() < 2 {
            return Err(malformed("at least two samples are needed to infer the sample time".into()));
        }
        let n = t.len();
        Self::new(
            DMatrix::from_column_slice(m, n, &u),
            DMatrix::from_column_slice(p, n, &y),
            t[1] - t[0],
        )
    }
}

pub(crate) fn format_float(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v:?}")
}

/// Stacks `count` consecutive columns of `data` starting at `start` into one vector.
/// With `wrap = Some(len)` column indices are taken modulo `len`.
fn stack_columns(data: &DMatrix<f64>, start: usize, count: usize, wrap: Option<usize>) -> DVector<f64> {
    let rows = data.nrows();
    let mut out = DVector::zeros(rows * count);
    for i in 0..count {
        let mut c = start + i;
        if let Some(len) = wrap {
            c %= len;
        }
        out.rows_mut(i * rows, rows).copy_from(&data.column(c));
    }
    out
}

/// Past input/output window `(u_ini, y_ini)` fed to a predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct IniWindow {
    pub u_ini: DVector<f64>,
    pub y_ini: DVector<f64>,
}

impl IniWindow {
    pub fn new(u_ini: DVector<f64>, y_ini: DVector<f64>, t_ini: usize, m: usize, p: usize) -> Result<Self> {
        ensure_dim("u_ini length", t_ini * m, u_ini.len())?;
        ensure_dim("y_ini length", t_ini * p, y_ini.len())?;
        Ok(Self { u_ini, y_ini })
    }

    /// Concatenation `col(u_ini, y_ini)`.
    pub fn stacked(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.u_ini.len() + self.y_ini.len());
        z.rows_mut(0, self.u_ini.len()).copy_from(&self.u_ini);
        z.rows_mut(self.u_ini.len(), self.y_ini.len()).copy_from(&self.y_ini);
        z
    }
}

/// The four Hankel data matrices sharing a column count `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelBlocks {
    pub up: DMatrix<f64>,
    pub yp: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub yf: DMatrix<f64>,
    pub t_ini: usize,
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

impl HankelBlocks {
    pub fn columns(&self) -> usize {
        self.up.ncols()
    }

    /// `[Up; Yp]`, the past-window arguments of every column.
    pub fn past(&self) -> DMatrix<f64> {
        let (a, b) = (self.up.nrows(), self.yp.nrows());
        let mut z = DMatrix::zeros(a + b, self.columns());
        z.rows_mut(0, a).copy_from(&self.up);
        z.rows_mut(a, b).copy_from(&self.yp);
        z
    }

    pub fn ini_window(&self, j: usize) -> IniWindow {
        IniWindow {
            u_ini: self.up.column(j).into_owned(),
            y_ini: self.yp.column(j).into_owned(),
        }
    }
}

/// Column-count convention for [`build_hankel_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "columns")]
pub enum ColumnCount {
    /// `T = len - T_ini - N`, every column inside the record.
    Maximal,
    /// Exactly the given number of columns; sample indices past the end wrap to the start.
    Wrapped(usize),
}

/// Hankel matrices with the maximal column count `T = len - T_ini - N`.
pub fn build_hankel(data: &TrajectoryDataset, t_ini: usize, n: usize) -> Result<HankelBlocks> {
    build_hankel_with(data, t_ini, n, ColumnCount::Maximal)
}

pub fn build_hankel_with(
    data: &TrajectoryDataset,
    t_ini: usize,
    n: usize,
    columns: ColumnCount,
) -> Result<HankelBlocks> {
    if t_ini == 0 {
        return Err(Error::invalid("t_ini", "must be at least 1"));
    }
    if n == 0 {
        return Err(Error::invalid("n", "horizon must be at least 1"));
    }
    let (m, p, len) = (data.m(), data.p(), data.len());
    let min_cols = (m + p) * t_ini + m * n;
    let required = t_ini + n + min_cols;
    let (t, wrap) = match columns {
        ColumnCount::Maximal => {
            if len < required {
                return Err(Error::InsufficientData {
                    required,
                    available: len,
                });
            }
            (len - t_ini - n, None)
        }
        ColumnCount::Wrapped(t) => {
            if t < min_cols {
                return Err(Error::invalid(
                    "columns",
                    format!("{t} columns requested, at least {min_cols} needed"),
                ));
            }
            if len < t_ini + n + 1 {
                return Err(Error::InsufficientData {
                    required: t_ini + n + 1,
                    available: len,
                });
            }
            (t, Some(len))
        }
    };

    let mut up = DMatrix::zeros(t_ini * m, t);
    let mut yp = DMatrix::zeros(t_ini * p, t);
    let mut uf = DMatrix::zeros(n * m, t);
    let mut yf = DMatrix::zeros(n * p, t);
    for j in 0..t {
        up.set_column(j, &stack_columns(data.inputs(), j, t_ini, wrap));
        yp.set_column(j, &stack_columns(data.outputs(), j + 1, t_ini, wrap));
        uf.set_column(j, &stack_columns(data.inputs(), j + t_ini, n, wrap));
        yf.set_column(j, &stack_columns(data.outputs(), j + t_ini + 1, n, wrap));
    }
    Ok(HankelBlocks {
        up,
        yp,
        uf,
        yf,
        t_ini,
        n,
        m,
        p,
    })
}

/// Multisine excitation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultisineSpec {
    pub range: [f64; 2],
    pub n_sines: usize,
    /// Frequency band as fractions of the Nyquist frequency.
    #[serde(default = "default_band")]
    pub band: [f64; 2],
    pub period: usize,
    pub seed: u64,
    /// Random phase draws; the draw with the smallest peak amplitude is kept.
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_band() -> [f64; 2] {
    [0.0, 1.0]
}

fn default_trials() -> usize {
    1
}

/// Sum of `n_sines` sinusoids on distinct frequency bins inside `band`, rescaled to `range`.
pub fn multisine(range: [f64; 2], n_sines: usize, band: [f64; 2], period: usize, seed: u64) -> Result<Vec<f64>> {
    multisine_spec(&MultisineSpec {
        range,
        n_sines,
        band,
        period,
        seed,
        trials: 1,
    })
}

pub fn multisine_spec(spec: &MultisineSpec) -> Result<Vec<f64>> {
    multisine_extended(spec, spec.period)
}

/// The multisine of `spec` evaluated over `len` samples, repeating with period `spec.period`.
pub fn multisine_extended(spec: &MultisineSpec, len: usize) -> Result<Vec<f64>> {
    let [lo, hi] = spec.range;
    if !(lo < hi) {
        return Err(Error::invalid("range", format!("lower bound {lo} must be below {hi}")));
    }
    if spec.n_sines == 0 {
        return Err(Error::invalid("n_sines", "must be at least 1"));
    }
    if spec.period < 2 * spec.n_sines {
        return Err(Error::invalid(
            "period",
            format!("{} samples cannot hold {} sines", spec.period, spec.n_sines),
        ));
    }
    if spec.trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    let [b0, b1] = spec.band;
    if !(0.0 <= b0 && b0 < b1 && b1 <= 1.0) {
        return Err(Error::invalid("band", format!("[{b0}, {b1}] is not a band inside [0, 1]")));
    }

    // Frequency bin k has frequency k/period cycles per sample; Nyquist is bin period/2.
    let period = spec.period;
    let nyquist = period as f64 / 2.0;
    let first = ((b0 * nyquist).ceil() as usize).max(1);
    let last = (b1 * nyquist).floor() as usize;
    if last < first || last - first + 1 < spec.n_sines {
        return Err(Error::invalid(
            "band",
            format!(
                "only {} frequency bins available for {} sines",
                (last + 1).saturating_sub(first),
                spec.n_sines
            ),
        ));
    }
    let bins: Vec<usize> = if spec.n_sines == 1 {
        vec![first]
    } else {
        let step = (last - first) as f64 / (spec.n_sines - 1) as f64;
        (0..spec.n_sines)
            .map(|i| first + (i as f64 * step).round() as usize)
            .collect()
    };
    let eval = |phases: &[f64], t: usize| -> f64 {
        bins.iter()
            .zip(phases)
            .map(|(&k, &ph)| (2.0 * PI * ((k * t) % period) as f64 / period as f64 + ph).sin())
            .sum()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for _ in 0..spec.trials {
        let phases: Vec<f64> = bins.iter().map(|_| rng.gen::<f64>() * 2.0 * PI).collect();
        let one: Vec<f64> = (0..period).map(|t| eval(&phases, t)).collect();
        let peak = one.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if best.as_ref().map_or(true, |(b, _, _)| peak < *b) {
            best = Some((peak, phases, one));
        }
    }
    let (_, phases, one) = best.expect("at least one trial");

    let smin = one.iter().cloned().fold(f64::INFINITY, f64::min);
    let smax = one.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(smax > smin) {
        return Err(Error::invalid("period", "multisine is constant on the sampling grid"));
    }
    let scale = (hi - lo) / (smax - smin);
    Ok((0..len)
        .map(|t| {
            let v = if t < period { one[t] } else { eval(&phases, t % period) };
            lo + (v - smin) * scale
        })
        .collect())
}

/// Deterministic standard-normal source on a seeded ChaCha8 stream.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    rng: ChaCha8Rng,
}

impl GaussianNoise {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

/// Adds i.i.d. zero-mean Gaussian noise of standard deviation `std` to every output sample.
pub fn add_noise(data: &TrajectoryDataset, std: f64, seed: u64) -> Result<TrajectoryDataset> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::invalid("std", format!("must be non-negative, got {std}")));
    }
    let mut out = data.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let mut noise = GaussianNoise::new(seed);
    for v in out.outputs.iter_mut() {
        *v += std * noise.sample();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp() -> TrajectoryDataset {
        TrajectoryDataset::from_siso(&[0., 1., 2., 3., 4.], &[0., 10., 20., 30., 40.], 1.0).unwrap()
    }

    #[test]
    fn scalar_hankel_offsets() {
        let h = build_hankel(&ramp(), 1, 1).unwrap();
        assert_eq!(h.columns(), 3);
        assert_eq!(h.up.as_slice(), &[0., 1., 2.]);
        assert_eq!(h.yp.as_slice(), &[10., 20., 30.]);
        assert_eq!(h.uf.as_slice(), &[1., 2., 3.]);
        assert_eq!(h.yf.as_slice(), &[20., 30., 40.]);
    }

    #[test]
    fn wrapped_columns_extend_past_the_tail() {
        let h = build_hankel_with(&ramp(), 1, 1, ColumnCount::Wrapped(4)).unwrap();
        assert_eq!(h.yf.as_slice(), &[20., 30., 40., 0.]);
        assert_eq!(h.uf.as_slice(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn pendulum_sized_record_gives_985_columns() {
        let u: Vec<f64> = (0..1000).map(|k| (k as f64 * 0.37).sin()).collect();
        let d = TrajectoryDataset::from_siso(&u, &u, 1.0 / 30.0).unwrap();
        let h = build_hankel(&d, 5, 10).unwrap();
        assert_eq!(h.columns(), 985);
        assert_eq!((h.up.nrows(), h.yp.nrows(), h.uf.nrows(), h.yf.nrows()), (5, 5, 10, 10));
        let h = build_hankel_with(&d, 5, 10, ColumnCount::Wrapped(990)).unwrap();
        assert_eq!(h.columns(), 990);
    }

    #[test]
    fn too_short_record_is_rejected() {
        let d = TrajectoryDataset::from_siso(&[1., 2.], &[1., 2.], 1.0).unwrap();
        match build_hankel(&d, 1, 1) {
            Err(Error::InsufficientData { required, available }) => {
                assert_eq!((required, available), (5, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_tone_hits_the_range() {
        for seed in [0, 7, 99] {
            let s = multisine([-1.0, 1.0], 1, [0.0, 1.0], 64, seed).unwrap();
            let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((min + 1.0).abs() < 1e-12 && (max - 1.0).abs() < 1e-12);
            // One sinusoid: the mean over a full period is the midpoint of the range.
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            assert!(mean.abs() < 0.1);
        }
    }

    #[test]
    fn benchmark_multisine_shape() {
        let s = multisine([-4.0, 4.0], 25, [0.0, 1.0], 1000, 3).unwrap();
        assert_eq!(s.len(), 1000);
        let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((min + 4.0).abs() < 1e-12 && (max - 4.0).abs() < 1e-12);
        assert_eq!(s, multisine([-4.0, 4.0], 25, [0.0, 1.0], 1000, 3).unwrap());
        assert_ne!(s, multisine([-4.0, 4.0], 25, [0.0, 1.0], 1000, 4).unwrap());
    }

    #[test]
    fn multisine_argument_errors() {
        assert!(multisine([1.0, 1.0], 1, [0.0, 1.0], 10, 0).is_err());
        assert!(multisine([-1.0, 1.0], 6, [0.0, 1.0], 10, 0).is_err());
        assert!(multisine([-1.0, 1.0], 3, [0.5, 0.5], 100, 0).is_err());
        assert!(multisine([-1.0, 1.0], 5, [0.9, 1.0], 20, 0).is_err());
    }

    #[test]
    fn more_trials_never_raise_the_crest() {
        let base = MultisineSpec {
            range: [-1.0, 1.0],
            n_sines: 10,
            band: [0.0, 1.0],
            period: 200,
            seed: 5,
            trials: 1,
        };
        let crest = |s: &[f64]| {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let rms = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
            1.0 / rms
        };
        let one = multisine_spec(&base).unwrap();
        let many = multisine_spec(&MultisineSpec { trials: 40, ..base }).unwrap();
        assert!(crest(&many) <= crest(&one) + 1e-12);
    }

    fn clean() -> TrajectoryDataset {
        let u: Vec<f64> = (0..1000).map(|k| (k as f64 * 0.1).cos()).collect();
        let y: Vec<f64> = (0..1000).map(|k| (k as f64 * 0.2).sin()).collect();
        TrajectoryDataset::from_siso(&u, &y, 0.1).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let d = clean();
        assert_eq!(add_noise(&d, 0.0, 1).unwrap(), d);
        assert!(add_noise(&d, -1.0, 1).is_err());
    }

    #[test]
    fn noise_statistics_match_the_requested_std() {
        let d = clean();
        let noisy = add_noise(&d, 0.01, 42).unwrap();
        assert_eq!(noisy.inputs(), d.inputs());
        let diff: Vec<f64> = (noisy.outputs() - d.outputs()).iter().cloned().collect();
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let var = diff.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (diff.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.008..=0.012).contains(&std), "std = {std}");
        assert_ne!(noisy, add_noise(&d, 0.01, 43).unwrap());
        assert_eq!(noisy, add_noise(&d, 0.01, 42).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = TrajectoryDataset::new(
            DMatrix::from_fn(2, 6, |i, j| (i * 10 + j) as f64 * 0.1),
            DMatrix::from_fn(1, 6, |_, j| (j as f64).sqrt()),
            0.25,
        )
        .unwrap();
        d.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,u1,u2,y1\n"));
        assert_eq!(TrajectoryDataset::read_csv(&path).unwrap(), d);
    }

    #[test]
    fn ini_window_offsets() {
        let w = ramp().ini_window(3, 2).unwrap();
        assert_eq!(w.u_ini.as_slice(), &[1., 2.]);
        assert_eq!(w.y_ini.as_slice(), &[20., 30.]);
        assert_eq!(w.stacked().as_slice(), &[1., 2., 20., 30.]);
    }

    proptest! {
        #[test]
        fn hankel_shift_and_reconstruction(
            m in 1usize..3, p in 1usize..3, t_ini in 1usize..4, n in 1usize..4, extra in 0usize..10,
            seed in any::<u64>(),
        ) {
            let len = t_ini + n + (m + p) * t_ini + m * n + extra;
            let mut g = GaussianNoise::new(seed);
            let u = DMatrix::from_fn(m, len, |_, _| g.sample());
            let y = DMatrix::from_fn(p, len, |_, _| g.sample());
            let d = TrajectoryDataset::new(u.clone(), y.clone(), 1.0).unwrap();
            let h = build_hankel(&d, t_ini, n).unwrap();
            let t = h.columns();
            prop_assert_eq!(t, len - t_ini - n);
            for (blk, rows) in [(&h.up, m), (&h.yp, p), (&h.uf, m), (&h.yf, p)] {
                for i in 0..blk.nrows() - rows {
                    for j in 0..t - 1 {
                        prop_assert_eq!(blk[(i, j + 1)], blk[(i + rows, j)]);
                    }
                }
            }
            // First column of [Up; Uf] followed by the last entries of later columns rebuilds u.
            let mut rebuilt: Vec<f64> = h.up.column(0).iter().chain(h.uf.column(0).iter()).cloned().collect();
            for j in 1..t {
                for r in 0..m {
                    rebuilt.push(h.uf[(h.uf.nrows() - m + r, j)]);
                }
            }
            prop_assert_eq!(&rebuilt[..], &u.as_slice()[..(t_ini + n + t - 1) * m]);
        }

        #[test]
        fn multisine_is_periodic(n_sines in 1usize..8, period in 16usize..120, seed in any::<u64>()) {
            let spec = MultisineSpec { range: [-2.0, 3.0], n_sines, band: [0.0, 1.0], period, seed, trials: 1 };
            let s = multisine_extended(&spec, 3 * period).unwrap();
            prop_assert_eq!(&s[..period], &multisine_spec(&spec).unwrap()[..]);
            for t in 0..2 * period {
                prop_assert_eq!(s[t], s[t + period]);
            }
        }
    }
}
