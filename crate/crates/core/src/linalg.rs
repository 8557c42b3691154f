//! Dense linear algebra: cross-covariance, truncated SVD, orthonormal basis
//! completion and principal-angle distances.

use nalgebra::DMatrix;

use crate::error::{LabError, Result};
use crate::model::PairedSamples;

pub type Matrix = DMatrix<f64>;

const ORTHONORMAL_TOL: f64 = 1e-8;

/// How the empirical cross-covariance is normalized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    /// `1/(n-1) Σ (xᵢ - x̄)(x̃ᵢ - x̃̄)ᵀ`
    #[default]
    Centered,
    /// `1/n Σ xᵢ x̃ᵢᵀ`
    Uncentered,
}

/// Empirical cross-covariance `Sₙ` (d × d̃) of the paired samples.
pub fn cross_covariance(samples: &PairedSamples, mode: CovMode) -> Result<Matrix> {
    let n = samples.len();
    let (d, dt) = (samples.d(), samples.d_tilde());
    let min_n = match mode {
        CovMode::Centered => 2,
        CovMode::Uncentered => 1,
    };
    if n < min_n {
        return Err(LabError::param(
            "n",
            format!("{mode:?} cross-covariance needs at least {min_n} samples, got {n}"),
        ));
    }

    let (mean_x, mean_xt) = match mode {
        CovMode::Centered => {
            let mut mx = vec![0.0; d];
            let mut mxt = vec![0.0; dt];
            for (x, xt) in samples.iter() {
                mx.iter_mut().zip(x).for_each(|(m, v)| *m += v);
                mxt.iter_mut().zip(xt).for_each(|(m, v)| *m += v);
            }
            mx.iter_mut().for_each(|m| *m /= n as f64);
            mxt.iter_mut().for_each(|m| *m /= n as f64);
            (mx, mxt)
        }
        CovMode::Uncentered => (vec![0.0; d], vec![0.0; dt]),
    };

    // Row-major accumulator; inner loop runs over the contiguous x̃ row.
    let mut acc = vec![0.0; d * dt];
    let mut cx = vec![0.0; d];
    let mut cxt = vec![0.0; dt];
    for (x, xt) in samples.iter() {
        for ((c, v), m) in cx.iter_mut().zip(x).zip(&mean_x) {
            *c = v - m;
        }
        for ((c, v), m) in cxt.iter_mut().zip(xt).zip(&mean_xt) {
            *c = v - m;
        }
        for (row, &a) in acc.chunks_exact_mut(dt).zip(&cx) {
            for (o, &b) in row.iter_mut().zip(&cxt) {
                *o += a * b;
            }
        }
    }
    let denom = match mode {
        CovMode::Centered => (n - 1) as f64,
        CovMode::Uncentered => n as f64,
    };
    Ok(DMatrix::from_row_slice(d, dt, &acc) / denom)
}

/// Top-`a` singular triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    /// m × a, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// n × a, orthonormal columns.
    pub v: Matrix,
}

impl TruncatedSvd {
    /// `U diag(S) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, s) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

/// Full SVD with singular values sorted in nonincreasing order and a
/// deterministic sign convention: the largest-magnitude entry (lowest index
/// on ties) of each left singular vector is positive.
///
/// Computed by one-sided Jacobi rotations, which stay accurate on exactly
/// rank-deficient inputs (noise-free cross-covariances) where the
/// bidiagonal QR iteration in nalgebra can lose several digits.
pub fn full_svd(m: &Matrix) -> TruncatedSvd {
    let k = m.nrows().min(m.ncols());
    if k == 0 {
        return TruncatedSvd {
            u: Matrix::zeros(m.nrows(), 0),
            s: Vec::new(),
            v: Matrix::zeros(m.ncols(), 0),
        };
    }
    let (u, s, v) = if m.nrows() >= m.ncols() {
        jacobi_svd(m)
    } else {
        let (u, s, v) = jacobi_svd(&m.transpose());
        (v, s, u)
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut out_u = Matrix::zeros(m.nrows(), k);
    let mut out_v = Matrix::zeros(m.ncols(), k);
    let mut out_s = Vec::with_capacity(k);
    for (j, &src) in order.iter().enumerate() {
        let mut uc = u.column(src).into_owned();
        let mut vc = v.column(src).into_owned();
        if sign_of_dominant(uc.as_slice()) < 0.0 {
            uc.neg_mut();
            vc.neg_mut();
        }
        out_u.set_column(j, &uc);
        out_v.set_column(j, &vc);
        out_s.push(s[src]);
    }
    TruncatedSvd { u: out_u, s: out_s, v: out_v }
}

/// One-sided (Hestenes) Jacobi SVD of a tall `m × n` matrix (`m ≥ n`).
/// Returns thin `U` (m × n), unsorted singular values and `V` (n × n).
fn jacobi_svd(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = Matrix::identity(n, n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut w, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let sv: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let tiny = smax * f64::EPSILON * m as f64;
    // Columns with (numerically) zero norm carry no direction; complete
    // them to an orthonormal set afterwards.
    let mut u = Matrix::zeros(m, n);
    let mut missing = Vec::new();
    for j in 0..n {
        if sv[j] > tiny && sv[j] > 0.0 {
            let col = w.column(j) / sv[j];
            u.set_column(j, &col);
        } else {
            missing.push(j);
        }
    }
    let mut filled: Vec<usize> = (0..n).filter(|j| !missing.contains(j)).collect();
    let mut e = 0;
    for j in missing {
        while e < m {
            let mut cand = nalgebra::DVector::<f64>::zeros(m);
            cand[e] = 1.0;
            e += 1;
            for _ in 0..2 {
                for &k in &filled {
                    let proj = u.column(k).dot(&cand);
                    cand.axpy(-proj, &u.column(k).into_owned(), 1.0);
                }
            }
            let norm = cand.norm();
            if norm > 1e-6 {
                u.set_column(j, &(cand / norm));
                filled.push(j);
                break;
            }
        }
    }
    (u, sv, v)
}

fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let a = m[(i, p)];
        let b = m[(i, q)];
        m[(i, p)] = c * a - s * b;
        m[(i, q)] = s * a + c * b;
    }
}

fn sign_of_dominant(v: &[f64]) -> f64 {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.is_empty() || v[best] >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Best rank-`a` approximation factors of `m`.
pub fn truncated_svd(m: &Matrix, a: usize) -> Result<TruncatedSvd> {
    let k = m.nrows().min(m.ncols());
    if a == 0 || a > k {
        return Err(LabError::param(
            "a",
            format!("rank must lie in 1..={k}, got {a}"),
        ));
    }
    let full = full_svd(m);
    Ok(TruncatedSvd {
        u: full.u.columns(0, a).into_owned(),
        s: full.s[..a].to_vec(),
        v: full.v.columns(0, a).into_owned(),
    })
}

/// Singular values in nonincreasing order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    full_svd(m).s
}

/// Operator (spectral) norm.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// `max |QᵀQ - I|` entrywise.
pub fn orthonormality_error(q: &Matrix) -> f64 {
    let g = q.transpose() * q;
    let k = g.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

fn require_orthonormal(name: &'static str, q: &Matrix) -> Result<()> {
    let err = orthonormality_error(q);
    if err > ORTHONORMAL_TOL {
        return Err(LabError::param(
            name,
            format!("columns not orthonormal (max |QᵀQ - I| = {err:e})"),
        ));
    }
    Ok(())
}

/// Modified Gram–Schmidt with one reorthogonalization pass. Each output
/// column is flipped so that its first nonzero entry is positive.
pub fn orthonormalize_columns(m: &Matrix) -> Result<Matrix> {
    let mut q = m.clone();
    for j in 0..q.ncols() {
        let norm0 = q.column(j).norm();
        for _ in 0..2 {
            for k in 0..j {
                let proj = q.column(k).dot(&q.column(j));
                let qk = q.column(k).into_owned();
                q.column_mut(j).axpy(-proj, &qk, 1.0);
            }
        }
        let norm = q.column(j).norm();
        if !(norm > 1e-10 * norm0.max(1e-300)) || norm == 0.0 {
            return Err(LabError::param(
                "m",
                format!("column {j} is linearly dependent on earlier columns"),
            ));
        }
        q.column_mut(j).scale_mut(1.0 / norm);
        if let Some(first) = q.column(j).iter().copied().find(|v| *v != 0.0) {
            if first < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
    }
    Ok(q)
}

/// Orthonormal basis `X⊥` (m × (m−k)) of the orthogonal complement of the
/// column span of `x` (m × k, orthonormal columns).
pub fn complete_basis(x: &Matrix) -> Result<Matrix> {
    require_orthonormal("x", x)?;
    let (m, k) = x.shape();
    if k == m {
        return Ok(Matrix::zeros(m, 0));
    }
    // QR of [X | I] gives a full orthogonal Q whose leading k columns span X.
    let mut aug = Matrix::zeros(m, k + m);
    aug.columns_mut(0, k).copy_from(x);
    aug.columns_mut(k, m).fill_with_identity();
    let q = aug.qr().q();
    let mut perp = q.columns(k, m - k).into_owned();
    for j in 0..perp.ncols() {
        if sign_of_dominant(perp.column(j).as_slice()) < 0.0 {
            perp.column_mut(j).neg_mut();
        }
    }
    Ok(perp)
}

/// Chordal distance `‖sin Θ(X, Y)‖_F = ‖X⊥ᵀ Y‖_F` between the column spans
/// of two orthonormal m × k matrices.
pub fn sin_theta_dist(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(LabError::param(
            "y",
            format!("shape mismatch: {:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    require_orthonormal("y", y)?;
    let perp = complete_basis(x)?;
    let k = x.ncols() as f64;
    Ok((perp.transpose() * y).norm().min(k.sqrt()))
}

/// Orthonormal basis of the row space of `g` (returned as columns), and
/// the numerical rank.
pub fn row_space_basis(g: &Matrix) -> (Matrix, usize) {
    let full = full_svd(g);
    let smax = full.s.first().copied().unwrap_or(0.0);
    let tol = smax * 1e-12 * g.nrows().max(g.ncols()) as f64;
    let rank = full.s.iter().filter(|&&s| s > tol && s > 0.0).count();
    (full.v.columns(0, rank).into_owned(), rank)
}
