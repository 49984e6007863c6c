//! Dense convex quadratic programs
//!
//! ```text
//! minimize ½ zᵀ H z + fᵀ z + offset   subject to   A z = b,  lb ≤ z ≤ ub
//! ```
//!
//! solved with a Mehrotra predictor–corrector interior-point method. Unbounded variables
//! whose Hessian block is diagonal and positive are eliminated from every Newton system, so
//! problems with a long, diagonally weighted decision vector stay cheap.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{max_abs, min_eigenvalue};
use crate::matfile;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;
const REFINE_STEPS: usize = 5;

/// Relative tolerance on the smallest Hessian eigenvalue.
const PSD_TOL: f64 = 1e-10;
/// Largest positive-Hessian core checked by a full eigendecomposition.
const EIGEN_CHECK_LIMIT: usize = 400;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    /// Constant added to the reported objective.
    pub offset: f64,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self> {
        let p = Self {
            h,
            f,
            a_eq,
            b_eq,
            lb,
            ub,
            offset: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    /// `min ½ zᵀHz + fᵀz` without constraints.
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Result<Self> {
        let n = f.len();
        Self::new(
            h,
            f,
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z) + self.offset
    }

    /// Dimension, bound and symmetry checks.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        ensure_dim("H rows", n, self.h.nrows())?;
        ensure_dim("H columns", n, self.h.ncols())?;
        ensure_dim("A_eq columns", n, self.a_eq.ncols())?;
        ensure_dim("b_eq length", self.a_eq.nrows(), self.b_eq.len())?;
        ensure_dim("lb length", n, self.lb.len())?;
        ensure_dim("ub length", n, self.ub.len())?;
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !finite(self.h.as_slice()) || !finite(self.f.as_slice()) || !finite(self.a_eq.as_slice()) || !finite(self.b_eq.as_slice()) {
            return Err(Error::invalid("qp", "H, f, A_eq and b_eq must be finite"));
        }
        for i in 0..n {
            let (l, u) = (self.lb[i], self.ub[i]);
            if l.is_nan() || u.is_nan() || !(l <= u) || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(Error::invalid("bounds", format!("invalid bounds [{l}, {u}] on variable {i}")));
            }
        }
        let scale = self.h.amax().max(1.0);
        for j in 0..n {
            let col = self.h.column(j);
            for i in j + 1..n {
                if (col[i] - self.h[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::invalid("H", format!("not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    /// Writes `<stem>.json` with vectors and metadata plus `<stem>_H.bin` and `<stem>_A.bin`.
    pub fn dump(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bound = |v: &DVector<f64>| v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        let doc = QpDocument {
            n: self.n(),
            n_eq: self.n_eq(),
            f: self.f.as_slice().to_vec(),
            b_eq: self.b_eq.as_slice().to_vec(),
            lb: bound(&self.lb),
            ub: bound(&self.ub),
            offset: self.offset,
            h_file: format!("{stem}_H.bin"),
            a_file: format!("{stem}_A.bin"),
        };
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))?;
        matfile::write(dir.join(&doc.h_file), &self.h)?;
        matfile::write(dir.join(&doc.a_file), &self.a_eq)
    }

    pub fn load_dump(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc: QpDocument = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let unbound = |v: &[Option<f64>], inf: f64| DVector::from_iterator(v.len(), v.iter().map(|x| x.unwrap_or(inf)));
        let mut p = Self::new(
            matfile::read(dir.join(&doc.h_file))?,
            DVector::from_vec(doc.f),
            matfile::read(dir.join(&doc.a_file))?,
            DVector::from_vec(doc.b_eq),
            unbound(&doc.lb, f64::NEG_INFINITY),
            unbound(&doc.ub, f64::INFINITY),
        )?;
        p.offset = doc.offset;
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct QpDocument {
    n: usize,
    n_eq: usize,
    f: Vec<f64>,
    b_eq: Vec<f64>,
    lb: Vec<Option<f64>>,
    ub: Vec<Option<f64>>,
    offset: f64,
    h_file: String,
    a_file: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

impl fmt::Display for QpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIter => "max-iter",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// Largest of the absolute primal residual, the scaled dual residual and the
    /// complementarity sum.
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Equality multipliers.
    pub nu: DVector<f64>,
    pub w_lower: DVector<f64>,
    pub w_upper: DVector<f64>,
    /// Primal minus dual objective.
    pub duality_gap: f64,
}

/// Equality-constrained Newton systems with the eliminable variables folded in.
struct Kkt {
    /// Eliminated variables and their Hessian diagonal.
    d_idx: Vec<usize>,
    h_d: DVector<f64>,
    /// Remaining variables.
    r_idx: Vec<usize>,
    /// `[H_RD; A_D]`.
    coupling: DMatrix<f64>,
    /// `[[H_RR, A_Rᵀ], [A_R, 0]]`.
    unreduced: DMatrix<f64>,
    /// `unreduced - coupling diag(1/h_D) couplingᵀ`.
    base: DMatrix<f64>,
    n_eq: usize,
    reg: f64,
}

impl Kkt {
    fn new(h: &DMatrix<f64>, a: &DMatrix<f64>, bounded: &[bool]) -> Self {
        let n = h.nrows();
        let q = a.nrows();
        let mut d_idx: Vec<usize> = Vec::new();
        for j in 0..n {
            if bounded[j] || h[(j, j)] <= 0.0 {
                continue;
            }
            let col = h.column(j);
            if d_idx.iter().all(|&k| col[k] == 0.0) {
                d_idx.push(j);
            }
        }
        let mut in_d = vec![false; n];
        for &j in &d_idx {
            in_d[j] = true;
        }
        let r_idx: Vec<usize> = (0..n).filter(|&j| !in_d[j]).collect();
        let (nd, nr) = (d_idx.len(), r_idx.len());
        let h_d = DVector::from_iterator(nd, d_idx.iter().map(|&j| h[(j, j)]));

        let mut coupling = DMatrix::zeros(nr + q, nd);
        for (c, &j) in d_idx.iter().enumerate() {
            for (r, &i) in r_idx.iter().enumerate() {
                coupling[(r, c)] = h[(i, j)];
            }
            for e in 0..q {
                coupling[(nr + e, c)] = a[(e, j)];
            }
        }
        let mut base = DMatrix::zeros(nr + q, nr + q);
        for (r, &i) in r_idx.iter().enumerate() {
            for (c, &j) in r_idx.iter().enumerate() {
                base[(r, c)] = h[(i, j)];
            }
            for e in 0..q {
                base[(nr + e, r)] = a[(e, i)];
                base[(r, nr + e)] = a[(e, i)];
            }
        }
        let unreduced = base.clone();
        if nd > 0 {
            let mut scaled = coupling.clone();
            for (c, mut col) in scaled.column_iter_mut().enumerate() {
                col /= h_d[c];
            }
            base -= &scaled * coupling.transpose();
        }
        let scale = base.amax().max(h_d.amax()).max(1.0);
        Self {
            d_idx,
            h_d,
            r_idx,
            coupling,
            unreduced,
            base,
            n_eq: q,
            reg: 1e-13 * scale,
        }
    }

    /// Factorizes the reduced matrix for the current barrier weights `sigma` (length n).
    fn factor(&self, sigma: &DVector<f64>) -> Factored<'_> {
        let nr = self.r_idx.len();
        let mut exact = self.base.clone();
        for (r, &i) in self.r_idx.iter().enumerate() {
            exact[(r, r)] += sigma[i];
        }
        let lu = exact.clone().lu();
        let lu = if lu.is_invertible() && lu.u().diagonal().iter().all(|d| d.is_finite()) {
            lu
        } else {
            let mut regularized = exact;
            for r in 0..nr {
                regularized[(r, r)] += self.reg;
            }
            for e in 0..self.n_eq {
                regularized[(nr + e, nr + e)] -= self.reg;
            }
            regularized.lu()
        };
        Factored {
            kkt: self,
            lu,
            sigma: sigma.clone(),
        }
    }
}

struct Factored<'a> {
    kkt: &'a Kkt,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    sigma: DVector<f64>,
}

impl Factored<'_> {
    /// Solves `(H + Σ) dz + Aᵀ λ = rhs1`, `A dz = rhs2`, refined against the full system.
    fn solve(&self, rhs1: &DVector<f64>, rhs2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (mut dz, mut lam) = self.solve_reduced(rhs1, rhs2);
        let scale = rhs1.amax().max(rhs2.amax());
        let mut previous = f64::INFINITY;
        for _ in 0..REFINE_STEPS {
            let (r1, r2) = self.residual(rhs1, rhs2, &dz, &lam);
            let err = r1.amax().max(r2.amax());
            if !(err > 1e-15 * scale) || err > 0.5 * previous {
                break;
            }
            previous = err;
            let (ddz, dlam) = self.solve_reduced(&r1, &r2);
            dz += ddz;
            lam += dlam;
        }
        (dz, lam)
    }

    /// Residual of the unreduced system, evaluated blockwise.
    fn residual(
        &self,
        rhs1: &DVector<f64>,
        rhs2: &DVector<f64>,
        dz: &DVector<f64>,
        lam: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let k = self.kkt;
        let nr = k.r_idx.len();
        let mut x = DVector::zeros(nr + k.n_eq);
        for (r, &i) in k.r_idx.iter().enumerate() {
            x[r] = dz[i];
        }
        x.rows_mut(nr, k.n_eq).copy_from(lam);
        let z_d = DVector::from_iterator(k.d_idx.len(), k.d_idx.iter().map(|&j| dz[j]));
        let mut top = &k.unreduced * &x;
        if !k.d_idx.is_empty() {
            top += &k.coupling * &z_d;
        }
        let mut r1 = rhs1.clone();
        for (r, &i) in k.r_idx.iter().enumerate() {
            r1[i] -= top[r] + self.sigma[i] * dz[i];
        }
        if !k.d_idx.is_empty() {
            let back = k.coupling.tr_mul(&x);
            for (c, &j) in k.d_idx.iter().enumerate() {
                r1[j] -= back[c] + k.h_d[c] * z_d[c];
            }
        }
        let r2 = rhs2 - top.rows(nr, k.n_eq);
        (r1, r2)
    }

    fn solve_reduced(&self, rhs1: &DVector<f64>, rhs2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let k = self.kkt;
        let (nr, q) = (k.r_idx.len(), k.n_eq);
        let rhs_d = DVector::from_iterator(k.d_idx.len(), k.d_idx.iter().enumerate().map(|(c, &j)| rhs1[j] / k.h_d[c]));
        let mut red = DVector::zeros(nr + q);
        for (r, &i) in k.r_idx.iter().enumerate() {
            red[r] = rhs1[i];
        }
        red.rows_mut(nr, q).copy_from(rhs2);
        if !k.d_idx.is_empty() {
            red -= &k.coupling * &rhs_d;
        }
        let x = if nr + q == 0 {
            DVector::zeros(0)
        } else {
            self.lu.solve(&red).unwrap_or_else(|| DVector::zeros(nr + q))
        };
        let mut dz = DVector::zeros(rhs1.len());
        for (r, &i) in k.r_idx.iter().enumerate() {
            dz[i] = x[r];
        }
        if !k.d_idx.is_empty() {
            let back = k.coupling.tr_mul(&x);
            for (c, &j) in k.d_idx.iter().enumerate() {
                dz[j] = rhs_d[c] - back[c] / k.h_d[c];
            }
        }
        (dz, x.rows(nr, q).into_owned())
    }
}

/// Rejects Hessians with an eigenvalue below `-1e-10 ‖H‖`.
fn check_convex(h: &DMatrix<f64>) -> Result<()> {
    let n = h.nrows();
    let norm = h.norm();
    if norm == 0.0 {
        return Ok(());
    }
    let tol = PSD_TOL * norm;
    // Rows that are entirely zero contribute zero eigenvalues and can be dropped.
    let nnz: Vec<usize> = (0..n).map(|i| h.column(i).iter().filter(|v| **v != 0.0).count()).collect();
    let core: Vec<usize> = (0..n).filter(|&i| nnz[i] > 0).collect();
    // Split off an independent positive diagonal block, sparsest columns first, and keep
    // its Schur complement.
    let mut order = core.clone();
    order.sort_by_key(|&i| nnz[i]);
    let mut diag_idx: Vec<usize> = Vec::new();
    let mut in_diag = vec![false; n];
    for &j in &order {
        let col = h.column(j);
        if col[j] > 0.0 && diag_idx.iter().all(|&k| col[k] == 0.0) {
            diag_idx.push(j);
            in_diag[j] = true;
        }
    }
    let rest: Vec<usize> = core.iter().cloned().filter(|&j| !in_diag[j]).collect();
    let mut s = DMatrix::from_fn(rest.len(), rest.len(), |a, b| h[(rest[a], rest[b])]);
    for &d in &diag_idx {
        let column = h.column(d);
        let col = DVector::from_iterator(rest.len(), rest.iter().map(|&i| column[i]));
        if col.iter().any(|v| *v != 0.0) {
            s.ger(-1.0 / column[d], &col, &col, 1.0);
        }
    }
    if s.nrows() == 0 {
        return Ok(());
    }
    if s.nrows() <= EIGEN_CHECK_LIMIT {
        let min = min_eigenvalue(&s);
        if min < -tol {
            return Err(Error::NotConvex { min_eigenvalue: min });
        }
        return Ok(());
    }
    for i in 0..s.nrows() {
        s[(i, i)] += tol;
    }
    if s.cholesky().is_none() {
        return Err(Error::NotConvex {
            min_eigenvalue: f64::NEG_INFINITY,
        });
    }
    Ok(())
}

struct Bounds<'a> {
    has_lo: &'a [bool],
    has_hi: &'a [bool],
}

type Iterate = (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>, f64);

/// Re-solves the equality system with the bounds the interior-point iterate identifies as
/// active. Returns the exact vertex solution when it is primal and dual feasible.
#[allow(clippy::too_many_arguments)]
fn polish(
    p: &QpProblem,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    bounds: &Bounds<'_>,
    z: &DVector<f64>,
    w_l: &DVector<f64>,
    w_u: &DVector<f64>,
    tol: f64,
) -> Option<Iterate> {
    let n = p.n();
    let q = a.nrows();
    let mut active: Vec<(usize, bool)> = Vec::new();
    for i in 0..n {
        if bounds.has_lo[i] && z[i] - p.lb[i] < w_l[i] {
            active.push((i, false));
        } else if bounds.has_hi[i] && p.ub[i] - z[i] < w_u[i] {
            active.push((i, true));
        }
    }
    let rows = q + active.len();
    let mut aa = DMatrix::zeros(rows, n);
    aa.rows_mut(0, q).copy_from(a);
    let mut bb = DVector::zeros(rows);
    bb.rows_mut(0, q).copy_from(b);
    for (r, &(i, upper)) in active.iter().enumerate() {
        aa[(q + r, i)] = 1.0;
        bb[q + r] = if upper { p.ub[i] } else { p.lb[i] };
    }
    let bounded: Vec<bool> = (0..n).map(|i| bounds.has_lo[i] || bounds.has_hi[i]).collect();
    let kkt = Kkt::new(&p.h, &aa, &bounded);
    let (zp, lam) = kkt.factor(&DVector::zeros(n)).solve(&-&p.f, &bb);
    let nu_all = -lam;
    if zp.iter().chain(nu_all.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    for i in 0..n {
        if (bounds.has_lo[i] && zp[i] < p.lb[i] - tol) || (bounds.has_hi[i] && zp[i] > p.ub[i] + tol) {
            return None;
        }
    }
    let hz = &p.h * &zp;
    let dual_scale = 1.0 + max_abs(&p.f).max(max_abs(&hz));
    let mut wl = DVector::zeros(n);
    let mut wu = DVector::zeros(n);
    for (r, &(i, upper)) in active.iter().enumerate() {
        let v = nu_all[q + r];
        let w = if upper { -v } else { v };
        if w < -tol * dual_scale {
            return None;
        }
        if upper {
            wu[i] = w.max(0.0);
        } else {
            wl[i] = w.max(0.0);
        }
    }
    let nu = nu_all.rows(0, q).into_owned();
    let r_d = &hz + &p.f - a.tr_mul(&nu) - &wl + &wu;
    let r_p = a * &zp - b;
    let dual_scale = dual_scale.max(1.0 + max_abs(&a.tr_mul(&nu)));
    let kkt_residual = max_abs(&r_p).max(max_abs(&r_d) / dual_scale);
    (kkt_residual <= tol).then_some((zp, nu, wl, wu, kkt_residual))
}

/// Solves `p` to tolerance `tol` within `max_iter` interior-point iterations.
pub fn solve_qp(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    p.validate()?;
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    check_convex(&p.h)?;
    let n = p.n();

    // Fixed variables become equality rows.
    let fixed: Vec<usize> = (0..n).filter(|&i| p.lb[i] == p.ub[i]).collect();
    let q = p.n_eq() + fixed.len();
    let mut a = DMatrix::zeros(q, n);
    a.rows_mut(0, p.n_eq()).copy_from(&p.a_eq);
    let mut b = DVector::zeros(q);
    b.rows_mut(0, p.n_eq()).copy_from(&p.b_eq);
    for (r, &i) in fixed.iter().enumerate() {
        a[(p.n_eq() + r, i)] = 1.0;
        b[p.n_eq() + r] = p.lb[i];
    }
    let has_lo: Vec<bool> = (0..n).map(|i| p.lb[i].is_finite() && p.lb[i] < p.ub[i]).collect();
    let has_hi: Vec<bool> = (0..n).map(|i| p.ub[i].is_finite() && p.lb[i] < p.ub[i]).collect();
    let bounded: Vec<bool> = (0..n).map(|i| has_lo[i] || has_hi[i]).collect();
    let n_bounds = has_lo.iter().chain(&has_hi).filter(|&&x| x).count();

    let kkt = Kkt::new(&p.h, &a, &bounded);

    // Starting point: equality-constrained minimizer with unit barrier weights, pushed inside the box.
    let sigma0 = DVector::from_iterator(n, bounded.iter().map(|&bd| if bd { 1.0 } else { 0.0 }));
    let mut center = DVector::zeros(n);
    let mut margin = DVector::zeros(n);
    for i in 0..n {
        let (l, u) = (p.lb[i], p.ub[i]);
        margin[i] = match (has_lo[i], has_hi[i]) {
            (true, true) => (0.25 * (u - l)).min(1.0),
            _ => 1.0,
        };
        center[i] = match (has_lo[i], has_hi[i]) {
            (true, true) => 0.0f64.clamp(l + margin[i], u - margin[i]),
            (true, false) => 0.0f64.max(l + margin[i]),
            (false, true) => 0.0f64.min(u - margin[i]),
            (false, false) => 0.0,
        };
    }
    let (mut z, lam0) = kkt.factor(&sigma0).solve(&(-&p.f + sigma0.component_mul(&center)), &b);
    let mut nu = -lam0;
    for i in 0..n {
        if has_lo[i] {
            z[i] = z[i].max(p.lb[i] + margin[i]);
        }
        if has_hi[i] {
            z[i] = z[i].min(p.ub[i] - margin[i]);
        }
    }
    let grad0 = &p.h * &z + &p.f - a.tr_mul(&nu);
    let mut w_l = DVector::from_iterator(n, (0..n).map(|i| if has_lo[i] { grad0[i].max(0.0) + 1.0 } else { 0.0 }));
    let mut w_u = DVector::from_iterator(n, (0..n).map(|i| if has_hi[i] { (-grad0[i]).max(0.0) + 1.0 } else { 0.0 }));

    let slack = |z: &DVector<f64>| {
        let s_l = DVector::from_iterator(n, (0..n).map(|i| if has_lo[i] { z[i] - p.lb[i] } else { 1.0 }));
        let s_u = DVector::from_iterator(n, (0..n).map(|i| if has_hi[i] { p.ub[i] - z[i] } else { 1.0 }));
        (s_l, s_u)
    };

    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;
    let mut rp_history: Vec<f64> = Vec::new();
    let mut kkt_residual;
    let mut previous: Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>, f64)> = None;
    let mut short_steps = 0;
    loop {
        let (s_l, s_u) = slack(&z);
        let hz = &p.h * &z;
        let atnu = a.tr_mul(&nu);
        let r_d = &hz + &p.f - &atnu - &w_l + &w_u;
        let r_p = &a * &z - &b;
        let comp = s_l.dot(&w_l) + s_u.dot(&w_u);
        let dual_scale = 1.0 + max_abs(&p.f).max(max_abs(&hz)).max(max_abs(&atnu));
        let rp = max_abs(&r_p);
        let rd = max_abs(&r_d) / dual_scale;
        kkt_residual = rp.max(rd).max(comp);
        let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
        if !(kkt_residual.is_finite() && finite(&r_d) && finite(&r_p) && finite(&w_l) && finite(&w_u)) {
            // Breakdown: report the last finite iterate.
            let last_rp = rp_history.last().copied().unwrap_or(f64::INFINITY);
            if let Some((pz, pnu, pwl, pwu, pk)) = previous.take() {
                (z, nu, w_l, w_u, kkt_residual) = (pz, pnu, pwl, pwu, pk);
            }
            status = if last_rp > tol { QpStatus::Infeasible } else { QpStatus::MaxIter };
            break;
        }
        rp_history.push(rp);
        if kkt_residual <= tol {
            status = QpStatus::Optimal;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        let stalled = iterations >= 30 && rp > tol && rp > 0.9 * rp_history[iterations - 15];
        let diverged = w_l.amax().max(w_u.amax()) > 1e14 * dual_scale;
        if stalled || diverged || (short_steps >= 5 && rp > tol) {
            status = QpStatus::Infeasible;
            break;
        }
        iterations += 1;
        previous = Some((z.clone(), nu.clone(), w_l.clone(), w_u.clone(), kkt_residual));

        let mut sigma = DVector::zeros(n);
        for i in 0..n {
            if has_lo[i] {
                sigma[i] += w_l[i] / s_l[i];
            }
            if has_hi[i] {
                sigma[i] += w_u[i] / s_u[i];
            }
        }
        let fac = kkt.factor(&sigma);
        let neg_rp = -&r_p;
        let direction = |r_cl: &DVector<f64>, r_cu: &DVector<f64>| {
            let mut rhs1 = -&r_d;
            for i in 0..n {
                if has_lo[i] {
                    rhs1[i] -= r_cl[i] / s_l[i];
                }
                if has_hi[i] {
                    rhs1[i] += r_cu[i] / s_u[i];
                }
            }
            let (dz, lam) = fac.solve(&rhs1, &neg_rp);
            let dw_l = DVector::from_iterator(
                n,
                (0..n).map(|i| if has_lo[i] { (-r_cl[i] - w_l[i] * dz[i]) / s_l[i] } else { 0.0 }),
            );
            let dw_u = DVector::from_iterator(
                n,
                (0..n).map(|i| if has_hi[i] { (-r_cu[i] + w_u[i] * dz[i]) / s_u[i] } else { 0.0 }),
            );
            (dz, -lam, dw_l, dw_u)
        };
        let max_step = |dz: &DVector<f64>, dw_l: &DVector<f64>, dw_u: &DVector<f64>| {
            let mut alpha: f64 = 1.0;
            for i in 0..n {
                if has_lo[i] {
                    if dz[i] < 0.0 {
                        alpha = alpha.min(-s_l[i] / dz[i]);
                    }
                    if dw_l[i] < 0.0 {
                        alpha = alpha.min(-w_l[i] / dw_l[i]);
                    }
                }
                if has_hi[i] {
                    if dz[i] > 0.0 {
                        alpha = alpha.min(s_u[i] / dz[i]);
                    }
                    if dw_u[i] < 0.0 {
                        alpha = alpha.min(-w_u[i] / dw_u[i]);
                    }
                }
            }
            alpha
        };

        let comp_l = s_l.component_mul(&w_l);
        let comp_u = s_u.component_mul(&w_u);
        let (dz, dnu, dw_l, dw_u) = if n_bounds == 0 {
            direction(&comp_l.map(|_| 0.0), &comp_u.map(|_| 0.0))
        } else {
            let mu = comp / n_bounds as f64;
            let mask_l = |v: DVector<f64>| DVector::from_iterator(n, (0..n).map(|i| if has_lo[i] { v[i] } else { 0.0 }));
            let mask_u = |v: DVector<f64>| DVector::from_iterator(n, (0..n).map(|i| if has_hi[i] { v[i] } else { 0.0 }));
            let comp_l = mask_l(comp_l);
            let comp_u = mask_u(comp_u);
            let (dz_a, _, dwl_a, dwu_a) = direction(&comp_l, &comp_u);
            let alpha_a = max_step(&dz_a, &dwl_a, &dwu_a);
            let (s_l_a, s_u_a) = (&s_l + &dz_a * alpha_a, &s_u - &dz_a * alpha_a);
            let mu_aff = (0..n)
                .map(|i| {
                    let lo = if has_lo[i] { s_l_a[i] * (w_l[i] + alpha_a * dwl_a[i]) } else { 0.0 };
                    let hi = if has_hi[i] { s_u_a[i] * (w_u[i] + alpha_a * dwu_a[i]) } else { 0.0 };
                    lo + hi
                })
                .sum::<f64>()
                / n_bounds as f64;
            let centering = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let target = centering * mu;
            let r_cl = mask_l(DVector::from_iterator(
                n,
                (0..n).map(|i| comp_l[i] + dz_a[i] * dwl_a[i] - target),
            ));
            let r_cu = mask_u(DVector::from_iterator(
                n,
                (0..n).map(|i| comp_u[i] - dz_a[i] * dwu_a[i] - target),
            ));
            let corrected = direction(&r_cl, &r_cu);
            // The second-order term can make Mehrotra's step cycle; compare it with a
            // plain centered Newton step and keep the one that reduces complementarity more.
            let plain_target = 0.1 * mu;
            let plain = direction(
                &mask_l(comp_l.map(|c| c - plain_target)),
                &mask_u(comp_u.map(|c| c - plain_target)),
            );
            let score = |d: &(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)| {
                let alpha = (0.995 * max_step(&d.0, &d.2, &d.3)).min(1.0);
                let after = (0..n)
                    .map(|i| {
                        let lo = if has_lo[i] { (s_l[i] + alpha * d.0[i]) * (w_l[i] + alpha * d.2[i]) } else { 0.0 };
                        let hi = if has_hi[i] { (s_u[i] - alpha * d.0[i]) * (w_u[i] + alpha * d.3[i]) } else { 0.0 };
                        lo + hi
                    })
                    .sum::<f64>();
                // Infeasibility shrinks by (1 - alpha) along any direction.
                after + (1.0 - alpha) * (rp + rd) * n_bounds as f64
            };
            if score(&plain) < score(&corrected) {
                plain
            } else {
                corrected
            }
        };
        let alpha = if n_bounds == 0 {
            1.0
        } else {
            (0.995 * max_step(&dz, &dw_l, &dw_u)).min(1.0)
        };
        if alpha < 1e-10 {
            short_steps += 1;
        } else {
            short_steps = 0;
        }
        z += &dz * alpha;
        nu += &dnu * alpha;
        w_l += &dw_l * alpha;
        w_u += &dw_u * alpha;
    }

    if status == QpStatus::Optimal && n_bounds > 0 {
        let bounds = Bounds {
            has_lo: &has_lo,
            has_hi: &has_hi,
        };
        if let Some(polished) = polish(p, &a, &b, &bounds, &z, &w_l, &w_u, tol) {
            (z, nu, w_l, w_u, kkt_residual) = polished;
        }
    }

    let (s_l, s_u) = slack(&z);
    let r_p = &a * &z - &b;
    let r_d = &p.h * &z + &p.f - a.tr_mul(&nu) - &w_l + &w_u;
    let mut gap = nu.dot(&r_p) + z.dot(&r_d);
    for i in 0..n {
        if has_lo[i] {
            gap += w_l[i] * s_l[i];
        }
        if has_hi[i] {
            gap += w_u[i] * s_u[i];
        }
    }
    Ok(QpSolution {
        objective: p.objective(&z),
        z,
        status,
        kkt_residual,
        iterations,
        nu: nu.rows(0, p.n_eq()).into_owned(),
        w_lower: w_l,
        w_upper: w_u,
        duality_gap: gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::GaussianNoise;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn free(n: usize) -> (DVector<f64>, DVector<f64>) {
        (DVector::from_element(n, f64::NEG_INFINITY), DVector::from_element(n, f64::INFINITY))
    }

    #[test]
    fn scalar_unconstrained() {
        let p = QpProblem::unconstrained(DMatrix::from_element(1, 1, 1.0), v(&[-1.0])).unwrap();
        let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-10);
        assert!((s.objective + 0.5).abs() < 1e-10);
    }

    #[test]
    fn projection_onto_hyperplane() {
        let (lb, ub) = free(2);
        let p = QpProblem::new(DMatrix::identity(2, 2), v(&[0., 0.]), DMatrix::from_row_slice(1, 2, &[1., 1.]), v(&[2.]), lb, ub)
            .unwrap();
        let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((&s.z - v(&[1., 1.])).amax() < 1e-10);
    }

    #[test]
    fn active_lower_bound() {
        // KKT by hand: z = 1 with multiplier w = 1 on the lower bound.
        let p = QpProblem::new(DMatrix::from_element(1, 1, 1.0), v(&[0.]), DMatrix::zeros(0, 1), v(&[]), v(&[1.]), v(&[3.]))
            .unwrap();
        let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-7);
        assert!((s.w_lower[0] - 1.0).abs() < 1e-6);
        assert!(s.duality_gap.abs() <= 10.0 * DEFAULT_TOL);
    }

    #[test]
    fn fixed_variables_and_offset() {
        let mut p = QpProblem::new(DMatrix::identity(2, 2), v(&[-4., 0.]), DMatrix::zeros(0, 2), v(&[]), v(&[2., -1.]), v(&[2., 1.]))
            .unwrap();
        p.offset = 10.0;
        let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((&s.z - v(&[2., 0.])).amax() < 1e-7);
        assert!((s.objective - (2.0 - 8.0 + 10.0)).abs() < 1e-7);
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let (lb, ub) = free(2);
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            v(&[0., 0.]),
            DMatrix::from_row_slice(2, 2, &[1., 1., 1., 1.]),
            v(&[1., 2.]),
            lb,
            ub,
        )
        .unwrap();
        assert_eq!(solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn bounds_contradicting_equalities_are_infeasible() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            v(&[0., 0.]),
            DMatrix::from_row_slice(1, 2, &[1., 1.]),
            v(&[5.]),
            v(&[0., 0.]),
            v(&[1., 1.]),
        )
        .unwrap();
        let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible, "{s:?}");
    }

    #[test]
    fn nonconvex_and_malformed_problems_are_errors() {
        let h = DMatrix::from_row_slice(2, 2, &[1., 0., 0., -1.]);
        let p = QpProblem::unconstrained(h, v(&[0., 0.])).unwrap();
        assert!(matches!(solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER), Err(Error::NotConvex { .. })));
        let asym = DMatrix::from_row_slice(2, 2, &[1., 0.5, 0., 1.]);
        assert!(QpProblem::unconstrained(asym, v(&[0., 0.])).is_err());
        assert!(QpProblem::new(DMatrix::identity(1, 1), v(&[0.]), DMatrix::zeros(0, 1), v(&[]), v(&[2.]), v(&[1.])).is_err());
    }

    #[test]
    fn singular_hessian_with_free_directions() {
        // min (z0 - 1)² with z1, z2 only tied by z1 + z2 = z0.
        let mut h = DMatrix::zeros(3, 3);
        h[(0, 0)] = 2.0;
        let (lb, ub) = free(3);
        let p = QpProblem::new(h, v(&[-2., 0., 0.]), DMatrix::from_row_slice(1, 3, &[-1., 1., 1.]), v(&[0.]), lb, ub).unwrap();
        let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-8);
        assert!((s.z[1] + s.z[2] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn eliminated_block_matches_dense_solution() {
        // Free diagonal block coupled to a bounded variable through H and A.
        let mut g = GaussianNoise::new(3);
        let n = 30;
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            h[(i, i)] = 1.0 + i as f64 * 0.1;
        }
        for i in 1..n {
            let c = 0.05 * g.sample();
            h[(0, i)] = c;
            h[(i, 0)] = c;
        }
        h[(0, 0)] = 10.0;
        let f = DVector::from_fn(n, |_, _| g.sample());
        let a = DMatrix::from_fn(3, n, |_, _| g.sample());
        let b = DVector::from_fn(3, |_, _| g.sample());
        let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(n, f64::INFINITY);
        lb[0] = -0.01;
        ub[0] = 0.01;
        let p = QpProblem::new(h.clone(), f.clone(), a.clone(), b.clone(), lb, ub).unwrap();
        let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        // Oracle: fix z0 at each bound / interior and solve the equality KKT system directly.
        let kkt_solve = |z0: Option<f64>| {
            let extra = usize::from(z0.is_some());
            let m = n + 3 + extra;
            let mut k = DMatrix::zeros(m, m);
            k.view_mut((0, 0), (n, n)).copy_from(&h);
            k.view_mut((n, 0), (3, n)).copy_from(&a);
            k.view_mut((0, n), (n, 3)).copy_from(&a.transpose());
            let mut rhs = DVector::zeros(m);
            rhs.rows_mut(0, n).copy_from(&-&f);
            rhs.rows_mut(n, 3).copy_from(&b);
            if let Some(v0) = z0 {
                k[(n + 3, 0)] = 1.0;
                k[(0, n + 3)] = 1.0;
                rhs[n + 3] = v0;
            }
            let x = k.lu().solve(&rhs).unwrap();
            x.rows(0, n).into_owned()
        };
        let free_sol = kkt_solve(None);
        let oracle = if free_sol[0].abs() <= 0.01 { free_sol } else { kkt_solve(Some(0.01f64.copysign(free_sol[0]))) };
        assert!((&s.z - &oracle).amax() < 1e-7, "{}", (&s.z - &oracle).amax());
    }

    #[test]
    fn dump_round_trip() {
        let mut p = QpProblem::new(DMatrix::identity(2, 2), v(&[1., 2.]), DMatrix::from_row_slice(1, 2, &[1., -1.]), v(&[0.5]), v(&[f64::NEG_INFINITY, 0.]), v(&[3., f64::INFINITY]))
            .unwrap();
        p.offset = 1.5;
        let dir = tempfile::tempdir().unwrap();
        p.dump(dir.path(), "step").unwrap();
        assert_eq!(QpProblem::load_dump(dir.path(), "step").unwrap(), p);
    }

    fn random_psd(n: usize, rank: usize, g: &mut GaussianNoise) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, rank, |_, _| g.sample());
        &m * m.transpose()
    }

    /// Exhaustive active-set oracle for a strictly convex QP with equality rows and box bounds.
    fn enumerate(p: &QpProblem) -> Option<DVector<f64>> {
        let n = p.n();
        let q = p.n_eq();
        let bounded: Vec<usize> = (0..n).filter(|&i| p.lb[i].is_finite() || p.ub[i].is_finite()).collect();
        let mut best: Option<(f64, DVector<f64>)> = None;
        let combos = 3usize.pow(bounded.len() as u32);
        for code in 0..combos {
            let mut c = code;
            let mut active: Vec<(usize, f64)> = Vec::new();
            let mut ok = true;
            for &i in &bounded {
                match c % 3 {
                    1 if p.lb[i].is_finite() => active.push((i, p.lb[i])),
                    2 if p.ub[i].is_finite() => active.push((i, p.ub[i])),
                    0 => {}
                    _ => ok = false,
                }
                c /= 3;
            }
            if !ok {
                continue;
            }
            let m = n + q + active.len();
            let mut k = DMatrix::zeros(m, m);
            k.view_mut((0, 0), (n, n)).copy_from(&p.h);
            k.view_mut((n, 0), (q, n)).copy_from(&p.a_eq);
            k.view_mut((0, n), (n, q)).copy_from(&p.a_eq.transpose());
            let mut rhs = DVector::zeros(m);
            rhs.rows_mut(0, n).copy_from(&-&p.f);
            rhs.rows_mut(n, q).copy_from(&p.b_eq);
            for (r, &(i, val)) in active.iter().enumerate() {
                k[(n + q + r, i)] = 1.0;
                k[(i, n + q + r)] = 1.0;
                rhs[n + q + r] = val;
            }
            let Some(x) = k.lu().solve(&rhs) else { continue };
            let z = x.rows(0, n).into_owned();
            if (0..n).any(|i| z[i] < p.lb[i] - 1e-9 || z[i] > p.ub[i] + 1e-9) {
                continue;
            }
            if (&p.a_eq * &z - &p.b_eq).amax() > 1e-9 || (0..n).any(|i| !z[i].is_finite()) {
                continue;
            }
            let obj = p.objective(&z);
            if best.as_ref().map_or(true, |(b, _)| obj < *b - 1e-12) {
                best = Some((obj, z));
            }
        }
        best.map(|(_, z)| z)
    }

    proptest! {
        #[test]
        fn matches_active_set_enumeration(n in 2usize..=6, q in 0usize..=2, nb in 0usize..=3, seed in any::<u64>()) {
            let mut g = GaussianNoise::new(seed);
            let mut h = random_psd(n, n, &mut g);
            for i in 0..n { h[(i, i)] += 0.1; }
            let f = DVector::from_fn(n, |_, _| 2.0 * g.sample());
            let q = q.min(n - 1);
            let a = DMatrix::from_fn(q, n, |_, _| g.sample());
            let b = DVector::from_fn(q, |_, _| 0.3 * g.sample());
            let (mut lb, mut ub) = free(n);
            for i in 0..nb.min(n) {
                let c = 0.5 * g.sample();
                lb[i] = c - 0.5;
                if g.sample() > -0.5 { ub[i] = c + 0.5; }
            }
            let p = QpProblem::new(h, f, a, b, lb, ub).unwrap();
            let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            if let Some(oracle) = enumerate(&p) {
                prop_assert_eq!(s.status, QpStatus::Optimal);
                prop_assert!((&s.z - &oracle).amax() <= 1e-6, "diff {}", (&s.z - &oracle).amax());
            } else {
                prop_assert_eq!(s.status, QpStatus::Infeasible);
            }
        }

        #[test]
        fn duality_gap_small_on_random_instances(n in 1usize..=50, rank_frac in 0.2f64..=1.0, seed in any::<u64>()) {
            let mut g = GaussianNoise::new(seed);
            let rank = ((n as f64 * rank_frac).ceil() as usize).max(1);
            let h = random_psd(n, rank, &mut g);
            let f = DVector::from_fn(n, |_, _| g.sample());
            let q = n / 5;
            let x0 = DVector::from_fn(n, |_, _| 0.5 * g.sample());
            let a = DMatrix::from_fn(q, n, |_, _| g.sample());
            let b = &a * &x0;
            // Bounded box around a feasible point keeps the problem bounded below.
            let lb = x0.map(|v| v - 1.0);
            let ub = x0.map(|v| v + 1.0);
            let p = QpProblem::new(h, f, a, b, lb, ub).unwrap();
            let s = solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            prop_assert_eq!(s.status, QpStatus::Optimal);
            prop_assert!(s.kkt_residual <= DEFAULT_TOL);
            prop_assert!((&p.a_eq * &s.z - &p.b_eq).amax() <= DEFAULT_TOL);
            prop_assert!(s.duality_gap.abs() <= 10.0 * DEFAULT_TOL, "gap {}", s.duality_gap);
        }
    }
}
