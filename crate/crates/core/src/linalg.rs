//! Dense linear-algebra helpers shared by identification and control.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Thin SVD based Moore–Penrose inverse of a matrix with full row rank.
pub(crate) fn row_pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    // Work on the tall transpose so the thin factors are r × r and T × r.
    let svd = a.transpose().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let s = svd.singular_values;
    // aᵀ = U S Vᵀ  ⇒  a† = (aᵀ)†ᵀ = U S⁻¹ Vᵀ.
    let mut us = u;
    for (j, mut col) in us.column_iter_mut().enumerate() {
        col /= s[j];
    }
    us * v_t
}

/// Orthonormal basis of `{g : a g = 0}` for `a` with full row rank `r < T`.
pub(crate) fn nullspace(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, t) = a.shape();
    let qr = a.transpose().qr();
    let mut qt = DMatrix::identity(t, t);
    qr.q_tr_mul(&mut qt);
    // Rows r.. of Qᵀ are orthogonal to the column space of aᵀ.
    qt.rows(r, t - r).transpose()
}

/// Smallest eigenvalue of a symmetric matrix.
pub(crate) fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    if h.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(h.clone()).eigenvalues.min()
}

/// Largest singular value.
pub(crate) fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

pub(crate) fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}
