use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSet;
use crate::error::{ensure_dim, Error, Result};
use crate::signal::HankelBlocks;

/// Largest tolerated condition number of the snapshot Gram matrix.
const GRAM_CONDITION_LIMIT: f64 = 1e12;

/// Lifted linear model `z⁺ = A z + B u`, `y = C z` with `z = φ_fixed(u_ini, y_ini)`.
#[derive(Debug, Clone)]
pub struct KoopmanModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub basis: BasisSet,
    /// Frobenius norms of the state and output fit residuals.
    pub state_residual: f64,
    pub output_residual: f64,
}

/// Minimizer of `‖target − X · regressors‖_F` with a conditioning check on the Gram matrix.
fn snapshot_fit(regressors: &DMatrix<f64>, target: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let sv = regressors.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    let ratio = if hi > 0.0 { (lo / hi).powi(2) } else { 0.0 };
    if regressors.nrows() > regressors.ncols() || ratio < 1.0 / GRAM_CONDITION_LIMIT {
        return Err(Error::invalid(
            what,
            format!(
                "snapshot Gram matrix is rank deficient (reciprocal condition {ratio:.3e}); \
                 add ridge damping or richer excitation"
            ),
        ));
    }
    let gram = regressors * regressors.transpose();
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::invalid(what, "snapshot Gram matrix is not positive definite"))?;
    Ok(chol.solve(&(regressors * target.transpose())).transpose())
}

/// Fits `(A, B, C)` to the lifted windows of consecutive Hankel columns.
pub fn fit_koopman(blocks: &HankelBlocks, basis: &BasisSet) -> Result<KoopmanModel> {
    if !basis.is_affine() {
        return Err(Error::NonAffineBasis);
    }
    let dims = basis.dims();
    ensure_dim("basis T_ini", dims.t_ini, blocks.t_ini)?;
    ensure_dim("basis inputs", dims.m, blocks.m)?;
    ensure_dim("basis outputs", dims.p, blocks.p)?;
    let t = blocks.columns();
    if t < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            available: t,
        });
    }
    let (m, p) = (blocks.m, blocks.p);
    let lk = basis.fixed_len();
    let mut z = DMatrix::zeros(lk, t);
    for j in 0..t {
        z.set_column(j, &basis.eval_fixed(&blocks.ini_window(j))?);
    }
    let pairs = t - 1;
    let mut regressors = DMatrix::zeros(lk + m, pairs);
    regressors.view_mut((0, 0), (lk, pairs)).copy_from(&z.columns(0, pairs));
    regressors
        .view_mut((lk, 0), (m, pairs))
        .copy_from(&blocks.uf.view((0, 0), (m, pairs)));
    let z_next = z.columns(1, pairs).into_owned();
    let ab = snapshot_fit(&regressors, &z_next, "koopman state fit")?;
    let (a, b) = (ab.columns(0, lk).into_owned(), ab.columns(lk, m).into_owned());

    // The newest output of each window.
    let y = blocks.yp.rows((blocks.t_ini - 1) * p, p).into_owned();
    let c = snapshot_fit(&z, &y, "koopman output fit")?;

    let state_residual = (&z_next - &ab * &regressors).norm();
    let output_residual = (&y - &c * &z).norm();
    Ok(KoopmanModel {
        a,
        b,
        c,
        basis: basis.clone(),
        state_residual,
        output_residual,
    })
}

impl KoopmanModel {
    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    /// `(Ψ, Γ)` with `y(1..N) = Ψ z(0) + Γ u(0..N-1)`.
    pub fn prediction_matrices(&self, horizon: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let (p, m, lk) = (self.c.nrows(), self.b.ncols(), self.lifted_dim());
        let mut psi = DMatrix::zeros(p * horizon, lk);
        let mut gamma = DMatrix::zeros(p * horizon, m * horizon);
        // markov[k] = C A^k B.
        let mut markov = Vec::with_capacity(horizon);
        let mut ca = self.c.clone();
        for i in 0..horizon {
            markov.push(&ca * &self.b);
            ca = &ca * &self.a;
            psi.view_mut((i * p, 0), (p, lk)).copy_from(&ca);
        }
        for i in 0..horizon {
            for j in 0..=i {
                gamma.view_mut((i * p, j * m), (p, m)).copy_from(&markov[i - j]);
            }
        }
        (psi, gamma)
    }

    /// Predicted outputs for a lifted initial state and an input sequence.
    pub fn predict(&self, z0: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let horizon = u.len() / self.b.ncols().max(1);
        let (psi, gamma) = self.prediction_matrices(horizon);
        psi * z0 + gamma * u
    }
}
