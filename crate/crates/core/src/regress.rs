//! Multi-step predictor identification from lifted data.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, LiftedDataMatrix};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{nullspace, row_pseudo_inverse, spectral_norm};
use crate::matfile::{self, JsonMatrix};

/// Largest null-space dimension that is materialized by default.
pub const DEFAULT_NULLSPACE_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Variant {
    LeastSquares,
    Ridge { gamma: f64 },
}

/// A fitted predictor `y = Θ φ̄(u_ini, y_ini, u_f)` together with its training data.
#[derive(Debug, Clone)]
pub struct IdentifiedPredictor {
    pub theta: DMatrix<f64>,
    pub variant: Variant,
    pub lifted: LiftedDataMatrix,
    pub yf: DMatrix<f64>,
    /// `E = Yf - Θ Φ`.
    pub residuals: DMatrix<f64>,
    /// `Φ†`, least squares only.
    pub phi_pinv: Option<DMatrix<f64>>,
    /// Orthonormal columns spanning the null space of `Φ`, when within the size cap.
    pub nullspace_basis: Option<DMatrix<f64>>,
}

pub fn fit_least_squares(lifted: &LiftedDataMatrix, yf: &DMatrix<f64>) -> Result<IdentifiedPredictor> {
    fit_least_squares_with_cap(lifted, yf, DEFAULT_NULLSPACE_CAP)
}

/// `Θ* = Yf Φ†` from a thin SVD of `Φ`.
pub fn fit_least_squares_with_cap(
    lifted: &LiftedDataMatrix,
    yf: &DMatrix<f64>,
    nullspace_cap: usize,
) -> Result<IdentifiedPredictor> {
    let phi = &lifted.phi;
    ensure_dim("Yf columns", phi.ncols(), yf.ncols())?;
    if !lifted.row_rank_ok {
        let sv = &lifted.singular_values;
        let ratio = if phi.nrows() > phi.ncols() || sv.is_empty() || sv[0] == 0.0 {
            0.0
        } else {
            sv[sv.len() - 1] / sv[0]
        };
        return Err(Error::RankDeficient { ratio });
    }
    let pinv = row_pseudo_inverse(phi);
    let theta = yf * &pinv;
    let residuals = yf - &theta * phi;
    let null_dim = phi.ncols() - phi.nrows();
    let nullspace_basis = (null_dim > 0 && null_dim <= nullspace_cap).then(|| nullspace(phi));
    Ok(IdentifiedPredictor {
        theta,
        variant: Variant::LeastSquares,
        lifted: lifted.clone(),
        yf: yf.clone(),
        residuals,
        phi_pinv: Some(pinv),
        nullspace_basis,
    })
}

/// `Θ^R = Yf Φᵀ (Φ Φᵀ + γ I)⁻¹` through a Cholesky factorization.
pub fn fit_ridge(lifted: &LiftedDataMatrix, yf: &DMatrix<f64>, gamma: f64) -> Result<IdentifiedPredictor> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma", format!("must be positive, got {gamma}")));
    }
    let phi = &lifted.phi;
    ensure_dim("Yf columns", phi.ncols(), yf.ncols())?;
    let chol = ridge_gram(phi, gamma)
        .cholesky()
        .ok_or_else(|| Error::invalid("gamma", "Φ Φᵀ + γI is not numerically positive definite"))?;
    // Gram is symmetric, so Θᵀ = Gram⁻¹ Φ Yfᵀ.
    let theta = chol.solve(&(phi * yf.transpose())).transpose();
    let residuals = yf - &theta * phi;
    Ok(IdentifiedPredictor {
        theta,
        variant: Variant::Ridge { gamma },
        lifted: lifted.clone(),
        yf: yf.clone(),
        residuals,
        phi_pinv: None,
        nullspace_basis: None,
    })
}

/// `Φ Φᵀ + γ I`.
pub fn ridge_gram(phi: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let mut g = phi * phi.transpose();
    for i in 0..g.nrows() {
        g[(i, i)] += gamma;
    }
    g
}

impl IdentifiedPredictor {
    pub fn basis(&self) -> &BasisSet {
        &self.lifted.basis
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.lifted.phi
    }

    /// `Θ φ̄(u_ini, y_ini, u_f)`.
    pub fn predict(&self, u_ini: &DVector<f64>, y_ini: &DVector<f64>, u_f: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.theta * self.basis().eval(u_ini, y_ini, u_f)?)
    }

    /// Largest `‖E ĝ‖₂` over the orthonormal null-space basis vectors `ĝ` of `Φ`.
    ///
    /// Zero exactly when the data-driven and identified predictors coincide. Without a
    /// materialized basis the bound `‖E (I - Φ†Φ)‖₂ = ‖E‖₂` is returned instead.
    pub fn consistency_diagnostic(&self) -> f64 {
        let null_dim = self.phi().ncols().saturating_sub(self.phi().nrows());
        if null_dim == 0 {
            return 0.0;
        }
        match &self.nullspace_basis {
            Some(n) => {
                let en = &self.residuals * n;
                en.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
            }
            None => spectral_norm(&self.residuals),
        }
    }

    pub fn export(&self) -> ExportedPredictor {
        ExportedPredictor {
            variant: self.variant,
            theta: self.theta.clone(),
            basis: self.basis().clone(),
        }
    }

    /// Writes `predictor.json` plus `theta.bin`, `phi.bin` and `yf.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.export().save(dir.join("predictor.json"))?;
        matfile::write(dir.join("theta.bin"), &self.theta)?;
        matfile::write(dir.join("phi.bin"), self.phi())?;
        matfile::write(dir.join("yf.bin"), &self.yf)
    }
}

/// The portable part of a predictor: parameters plus the basis needed to evaluate them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedPredictor {
    pub variant: Variant,
    pub theta: DMatrix<f64>,
    pub basis: BasisSet,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictorDocument {
    variant: Variant,
    theta: JsonMatrix,
    basis: BasisSet,
}

impl ExportedPredictor {
    pub fn predict(&self, u_ini: &DVector<f64>, y_ini: &DVector<f64>, u_f: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.theta * self.basis.eval(u_ini, y_ini, u_f)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PredictorDocument {
            variant: self.variant,
            theta: JsonMatrix::from(&self.theta),
            basis: self.basis.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let doc: PredictorDocument = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let basis = BasisSet::from_json(&serde_json::to_string(&doc.basis).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let theta = doc.theta.to_matrix()?;
        let d = basis.dims();
        if theta.nrows() != d.n * d.p || theta.ncols() != basis.len() {
            return Err(format!(
                "theta is {}x{} but the basis needs {}x{}",
                theta.nrows(),
                theta.ncols(),
                d.n * d.p,
                basis.len()
            ));
        }
        if let Variant::Ridge { gamma } = doc.variant {
            if !(gamma > 0.0) {
                return Err(format!("ridge gamma must be positive, got {gamma}"));
            }
        }
        Ok(Self {
            variant: doc.variant,
            theta,
            basis,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|reason| Error::MalformedFile {
            path: path.to_path_buf(),
            reason,
        })
    }
}
