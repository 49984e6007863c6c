//! Basis-function families, the stacked map `φ̄`, and the lifted data matrix `Φ`.
//!
//! The argument of every basis is the window `col(u_ini, y_ini, u_f)`. With
//! [`Structure::AffineInFutureInputs`] the kernel only sees `col(u_ini, y_ini)` and the
//! future inputs are appended unchanged:
//!
//! ```text
//! φ̄ = col([1], φ_K(u_ini, y_ini), u_f)
//! ```
//!
//! With [`Structure::General`] the kernel sees the full window.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::kmeans::{kmeans, KMeansOptions};
use crate::signal::{HankelBlocks, IniWindow};

/// Default relative threshold for the numerical row rank of `Φ`.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    AffineInFutureInputs,
    General,
}

impl Structure {
    /// Bias default: omitted for affine bases, present otherwise.
    pub fn default_bias(self) -> bool {
        matches!(self, Structure::General)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisKind {
    /// `exp(-‖s(z) - c‖² / (2σ²))` for each center `c`.
    RbfGaussian { centers: Vec<Vec<f64>>, sigma: f64 },
    /// `T_k(s(z_i))` for `k = 1..=orders[channel(i)]` and every argument entry `z_i`.
    Chebyshev { orders: Vec<usize> },
    IdentityLinear,
}

/// Window dimensions a basis was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub t_ini: usize,
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

impl Dims {
    pub fn from_blocks(b: &HankelBlocks) -> Self {
        Self {
            t_ini: b.t_ini,
            n: b.n,
            m: b.m,
            p: b.p,
        }
    }

    pub fn past_len(&self) -> usize {
        self.t_ini * (self.m + self.p)
    }

    pub fn future_len(&self) -> usize {
        self.n * self.m
    }
}

/// Affine map of each signal channel onto `[-1, 1]`. Channels are ordered inputs first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScaling {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ChannelScaling {
    /// Channel-wise min/max over the recorded windows.
    pub fn from_blocks(b: &HankelBlocks) -> Self {
        let channels = b.m + b.p;
        let mut lo = vec![f64::INFINITY; channels];
        let mut hi = vec![f64::NEG_INFINITY; channels];
        let mut visit = |mat: &DMatrix<f64>, width: usize, offset: usize| {
            for (i, row) in mat.row_iter().enumerate() {
                let ch = offset + i % width;
                for v in row.iter() {
                    lo[ch] = lo[ch].min(*v);
                    hi[ch] = hi[ch].max(*v);
                }
            }
        };
        visit(&b.up, b.m, 0);
        visit(&b.uf, b.m, 0);
        visit(&b.yp, b.p, b.m);
        visit(&b.yf, b.p, b.m);
        Self { lo, hi }
    }

    fn apply(&self, ch: usize, v: f64) -> f64 {
        let width = self.hi[ch] - self.lo[ch];
        if width > 0.0 {
            2.0 * (v - self.lo[ch]) / width - 1.0
        } else {
            0.0
        }
    }
}

/// An evaluable family `{φ₀ … φ_L}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    #[serde(flatten)]
    kind: BasisKind,
    structure: Structure,
    includes_bias: bool,
    dims: Dims,
    #[serde(default)]
    scaling: Option<ChannelScaling>,
}

/// RBF width that makes the kernel `exp(-‖z - c‖²)`.
pub fn default_rbf_width(centers: &[Vec<f64>]) -> Result<f64> {
    if centers.is_empty() {
        return Err(Error::invalid("centers", "at least one center is required"));
    }
    Ok(std::f64::consts::FRAC_1_SQRT_2)
}

/// Options for building an RBF basis from data.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfOptions {
    pub centers: usize,
    /// `None` selects [`default_rbf_width`].
    pub sigma: Option<f64>,
    pub seed: u64,
    pub max_iter: usize,
    pub restarts: usize,
    /// Cluster and evaluate in channel-scaled coordinates.
    pub scaled: bool,
    pub structure: Structure,
    pub includes_bias: bool,
}

impl BasisSet {
    pub fn new(
        kind: BasisKind,
        structure: Structure,
        includes_bias: bool,
        dims: Dims,
        scaling: Option<ChannelScaling>,
    ) -> Result<Self> {
        let b = Self {
            kind,
            structure,
            includes_bias,
            dims,
            scaling,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn identity_linear(dims: Dims, structure: Structure, includes_bias: bool) -> Result<Self> {
        Self::new(BasisKind::IdentityLinear, structure, includes_bias, dims, None)
    }

    /// Gaussian RBF basis with K-means centers over the kernel arguments of the data columns.
    pub fn rbf_from_data(blocks: &HankelBlocks, opts: &RbfOptions) -> Result<Self> {
        let dims = Dims::from_blocks(blocks);
        let scaling = opts.scaled.then(|| ChannelScaling::from_blocks(blocks));
        let probe = Self {
            kind: BasisKind::IdentityLinear,
            structure: opts.structure,
            includes_bias: false,
            dims,
            scaling: scaling.clone(),
        };
        let args = probe.kernel_arguments(blocks);
        let clustering = kmeans(
            &args,
            &KMeansOptions {
                k: opts.centers,
                seed: opts.seed,
                max_iter: opts.max_iter,
                restarts: opts.restarts,
            },
        )?;
        let centers: Vec<Vec<f64>> = clustering.centers.column_iter().map(|c| c.iter().cloned().collect()).collect();
        let sigma = match opts.sigma {
            Some(s) => s,
            None => default_rbf_width(&centers)?,
        };
        Self::new(
            BasisKind::RbfGaussian { centers, sigma },
            opts.structure,
            opts.includes_bias,
            dims,
            scaling,
        )
    }

    /// Chebyshev basis with channel scaling fitted to the data.
    pub fn chebyshev_from_data(
        blocks: &HankelBlocks,
        orders: Vec<usize>,
        structure: Structure,
        includes_bias: bool,
    ) -> Result<Self> {
        Self::new(
            BasisKind::Chebyshev { orders },
            structure,
            includes_bias,
            Dims::from_blocks(blocks),
            Some(ChannelScaling::from_blocks(blocks)),
        )
    }

    fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.t_ini == 0 || d.n == 0 || d.m == 0 || d.p == 0 {
            return Err(Error::invalid("dims", "t_ini, n, m and p must all be positive"));
        }
        if let Some(s) = &self.scaling {
            ensure_dim("scaling channels", d.m + d.p, s.lo.len())?;
            ensure_dim("scaling channels", d.m + d.p, s.hi.len())?;
            if s.lo.iter().zip(&s.hi).any(|(l, h)| !(l <= h)) {
                return Err(Error::invalid("scaling", "lo must not exceed hi"));
            }
        }
        match &self.kind {
            BasisKind::RbfGaussian { centers, sigma } => {
                if centers.is_empty() {
                    return Err(Error::invalid("centers", "at least one center is required"));
                }
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::invalid("sigma", format!("must be positive, got {sigma}")));
                }
                let dim = self.kernel_arg_len();
                for c in centers {
                    ensure_dim("RBF center length", dim, c.len())?;
                }
            }
            BasisKind::Chebyshev { orders } => {
                ensure_dim("Chebyshev orders (one per channel)", d.m + d.p, orders.len())?;
                if self.scaling.is_none() {
                    return Err(Error::invalid("scaling", "Chebyshev bases need channel scaling"));
                }
            }
            BasisKind::IdentityLinear => {}
        }
        if self.len() == 0 {
            return Err(Error::invalid("basis", "the basis has no functions"));
        }
        Ok(())
    }

    pub fn kind(&self) -> &BasisKind {
        &self.kind
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn includes_bias(&self) -> bool {
        self.includes_bias
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn scaling(&self) -> Option<&ChannelScaling> {
        self.scaling.as_ref()
    }

    pub fn is_affine(&self) -> bool {
        self.structure == Structure::AffineInFutureInputs
    }

    fn kernel_arg_len(&self) -> usize {
        match self.structure {
            Structure::AffineInFutureInputs => self.dims.past_len(),
            Structure::General => self.dims.past_len() + self.dims.future_len(),
        }
    }

    fn kernel_len(&self) -> usize {
        match &self.kind {
            BasisKind::RbfGaussian { centers, .. } => centers.len(),
            BasisKind::IdentityLinear => self.kernel_arg_len(),
            BasisKind::Chebyshev { orders } => (0..self.kernel_arg_len()).map(|i| orders[self.channel_of(i)]).sum(),
        }
    }

    /// Number of basis functions `L + 1`.
    pub fn len(&self) -> usize {
        let future = match self.structure {
            Structure::AffineInFutureInputs => self.dims.future_len(),
            Structure::General => 0,
        };
        usize::from(self.includes_bias) + self.kernel_len() + future
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries of `φ̄` that do not depend on `u_f` (bias and `φ_K`); for affine bases only.
    pub fn fixed_len(&self) -> usize {
        usize::from(self.includes_bias) + self.kernel_len()
    }

    /// Signal channel of an entry of `col(u_ini, y_ini, u_f)`.
    fn channel_of(&self, i: usize) -> usize {
        let Dims { t_ini, m, p, .. } = self.dims;
        if i < t_ini * m {
            i % m
        } else if i < t_ini * (m + p) {
            m + (i - t_ini * m) % p
        } else {
            (i - t_ini * (m + p)) % m
        }
    }

    fn scaled(&self, arg: &mut [f64]) {
        if let Some(s) = &self.scaling {
            for (i, v) in arg.iter_mut().enumerate() {
                *v = s.apply(self.channel_of(i), *v);
            }
        }
    }

    /// Kernel arguments of every data column, scaled when the basis carries a scaling.
    pub fn kernel_arguments(&self, blocks: &HankelBlocks) -> DMatrix<f64> {
        let mut z = blocks.past();
        if self.structure == Structure::General {
            let start = z.nrows();
            z = z.resize_vertically(start + blocks.uf.nrows(), 0.0);
            z.rows_mut(start, blocks.uf.nrows()).copy_from(&blocks.uf);
        }
        for mut col in z.column_iter_mut() {
            self.scaled(col.as_mut_slice());
        }
        z
    }

    fn eval_kernel(&self, arg: &[f64], out: &mut Vec<f64>) {
        match &self.kind {
            BasisKind::IdentityLinear => out.extend_from_slice(arg),
            BasisKind::RbfGaussian { centers, sigma } => {
                let denom = 2.0 * sigma * sigma;
                for c in centers {
                    let d2: f64 = arg.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    out.push((-d2 / denom).exp());
                }
            }
            BasisKind::Chebyshev { orders } => {
                for (i, &x) in arg.iter().enumerate() {
                    let order = orders[self.channel_of(i)];
                    let (mut prev, mut cur) = (1.0, x);
                    for k in 1..=order {
                        if k > 1 {
                            let next = 2.0 * x * cur - prev;
                            prev = cur;
                            cur = next;
                        }
                        out.push(cur);
                    }
                }
            }
        }
    }

    fn check_window(&self, u_ini: &DVector<f64>, y_ini: &DVector<f64>) -> Result<()> {
        ensure_dim("u_ini length", self.dims.t_ini * self.dims.m, u_ini.len())?;
        ensure_dim("y_ini length", self.dims.t_ini * self.dims.p, y_ini.len())
    }

    /// `φ̄(u_ini, y_ini, u_f)`.
    pub fn eval(&self, u_ini: &DVector<f64>, y_ini: &DVector<f64>, u_f: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_window(u_ini, y_ini)?;
        ensure_dim("u_f length", self.dims.future_len(), u_f.len())?;
        let mut arg: Vec<f64> = u_ini.iter().chain(y_ini.iter()).cloned().collect();
        if self.structure == Structure::General {
            arg.extend(u_f.iter());
        }
        self.scaled(&mut arg);
        let mut out = Vec::with_capacity(self.len());
        if self.includes_bias {
            out.push(1.0);
        }
        self.eval_kernel(&arg, &mut out);
        if self.structure == Structure::AffineInFutureInputs {
            out.extend(u_f.iter());
        }
        Ok(DVector::from_vec(out))
    }

    /// The `u_f`-independent part `col([1], φ_K(u_ini, y_ini))` of an affine basis.
    pub fn eval_fixed(&self, window: &IniWindow) -> Result<DVector<f64>> {
        if !self.is_affine() {
            return Err(Error::NonAffineBasis);
        }
        self.check_window(&window.u_ini, &window.y_ini)?;
        let mut arg: Vec<f64> = window.u_ini.iter().chain(window.y_ini.iter()).cloned().collect();
        self.scaled(&mut arg);
        let mut out = Vec::with_capacity(self.fixed_len());
        if self.includes_bias {
            out.push(1.0);
        }
        self.eval_kernel(&arg, &mut out);
        Ok(DVector::from_vec(out))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(text)?;
        b.validate()?;
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::MalformedFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// `Φ = φ̄` applied to every column of `[Up; Yp; Uf]`.
#[derive(Debug, Clone)]
pub struct LiftedDataMatrix {
    pub phi: DMatrix<f64>,
    pub basis: BasisSet,
    pub row_rank_ok: bool,
    pub rank_tolerance: f64,
    /// Singular values of `Φ` in decreasing order.
    pub singular_values: DVector<f64>,
}

impl LiftedDataMatrix {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn rows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn columns(&self) -> usize {
        self.phi.ncols()
    }
}

pub fn build_phi(basis: &BasisSet, blocks: &HankelBlocks) -> Result<LiftedDataMatrix> {
    build_phi_with_tolerance(basis, blocks, DEFAULT_RANK_TOLERANCE)
}

pub fn build_phi_with_tolerance(basis: &BasisSet, blocks: &HankelBlocks, rank_tolerance: f64) -> Result<LiftedDataMatrix> {
    let dims = basis.dims();
    ensure_dim("Hankel T_ini", dims.t_ini, blocks.t_ini)?;
    ensure_dim("Hankel horizon", dims.n, blocks.n)?;
    ensure_dim("Hankel inputs", dims.m, blocks.m)?;
    ensure_dim("Hankel outputs", dims.p, blocks.p)?;
    let t = blocks.columns();
    let mut phi = DMatrix::zeros(basis.len(), t);
    for j in 0..t {
        let col = basis.eval(
            &blocks.up.column(j).into_owned(),
            &blocks.yp.column(j).into_owned(),
            &blocks.uf.column(j).into_owned(),
        )?;
        phi.set_column(j, &col);
    }
    let mut sv = phi.clone().svd(false, false).singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    let row_rank_ok = phi.nrows() <= phi.ncols() && {
        let max = sv[0];
        let min = sv[sv.len() - 1];
        max > 0.0 && min > rank_tolerance * max
    };
    Ok(LiftedDataMatrix {
        phi,
        basis: basis.clone(),
        row_rank_ok,
        rank_tolerance,
        singular_values: sv,
    })
}
