//! Regularized linear contrastive loss and its closed-form minimizer.
//!
//! With similarities `s_ij = ⟨G xᵢ, G̃ x̃ⱼ⟩` the full-batch objective is
//!
//! ```text
//! L_ρ(G, G̃) = 1/(2n(n-1)) Σᵢ Σ_{j≠i} [(s_ij - s_ii) + (s_ji - s_ii)] + ρ/2 ‖GᵀG̃‖²_F
//! ```
//!
//! whose unregularized part equals `-Tr(G Sₙ G̃ᵀ)` for the centered
//! cross-covariance `Sₙ`. Minimizers are exactly the pairs whose product is
//! `(1/ρ)·SVD_r(Sₙ)`.

use nalgebra::DMatrix;

use crate::error::{LabError, Result};
use crate::linalg::{self, CovMode, Matrix};
use crate::model::PairedSamples;

/// A learned encoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    /// r × d
    pub g: Matrix,
    /// r × d̃
    pub g_tilde: Matrix,
    pub rho: f64,
}

impl Encoders {
    pub fn new(g: Matrix, g_tilde: Matrix, rho: f64) -> Result<Self> {
        if g.nrows() != g_tilde.nrows() {
            return Err(LabError::param(
                "g_tilde",
                format!("embedding dims differ: {} vs {}", g.nrows(), g_tilde.nrows()),
            ));
        }
        Ok(Self { g, g_tilde, rho })
    }

    /// Embedding dimension `r`.
    pub fn rank(&self) -> usize {
        self.g.nrows()
    }

    /// `GᵀG̃` (d × d̃), the only quantity the loss depends on.
    pub fn product(&self) -> Matrix {
        self.g.transpose() * &self.g_tilde
    }

    /// Replace `(G, G̃)` by `(AG, AG̃)`.
    pub fn rotated(&self, a: &Matrix) -> Encoders {
        Encoders {
            g: a * &self.g,
            g_tilde: a * &self.g_tilde,
            rho: self.rho,
        }
    }
}

fn check_shapes(g: &Matrix, g_tilde: &Matrix, samples: &PairedSamples) -> Result<()> {
    if g.nrows() != g_tilde.nrows() || g.ncols() != samples.d() || g_tilde.ncols() != samples.d_tilde() {
        return Err(LabError::param(
            "g",
            format!(
                "encoder shapes {:?}/{:?} do not fit data dims ({}, {})",
                g.shape(),
                g_tilde.shape(),
                samples.d(),
                samples.d_tilde()
            ),
        ));
    }
    Ok(())
}

fn regularizer(g: &Matrix, g_tilde: &Matrix, rho: f64) -> f64 {
    0.5 * rho * (g.transpose() * g_tilde).norm_squared()
}

/// Loss via the trace reduction `-Tr(G Sₙ G̃ᵀ) + ρ/2 ‖GᵀG̃‖²_F`.
pub fn loss(g: &Matrix, g_tilde: &Matrix, samples: &PairedSamples, rho: f64) -> Result<f64> {
    check_shapes(g, g_tilde, samples)?;
    if samples.len() < 2 {
        return Err(LabError::param("n", "the pairwise objective needs n >= 2"));
    }
    let s = linalg::cross_covariance(samples, CovMode::Centered)?;
    let l0 = -(g * s * g_tilde.transpose()).trace();
    Ok(l0 + regularizer(g, g_tilde, rho))
}

/// Loss evaluated directly from the n × n similarity grid. Quadratic in `n`;
/// meant for cross-checking [`loss`] on small inputs.
pub fn loss_pairwise(g: &Matrix, g_tilde: &Matrix, samples: &PairedSamples, rho: f64) -> Result<f64> {
    check_shapes(g, g_tilde, samples)?;
    let n = samples.len();
    if n < 2 {
        return Err(LabError::param("n", "the pairwise objective needs n >= 2"));
    }
    let emb: Vec<nalgebra::DVector<f64>> = (0..n)
        .map(|i| g * nalgebra::DVector::from_column_slice(samples.x(i)))
        .collect();
    let emb_t: Vec<nalgebra::DVector<f64>> = (0..n)
        .map(|i| g_tilde * nalgebra::DVector::from_column_slice(samples.x_tilde(i)))
        .collect();
    let sim = DMatrix::from_fn(n, n, |i, j| emb[i].dot(&emb_t[j]));
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j != i {
                total += (sim[(i, j)] - sim[(i, i)]) + (sim[(j, i)] - sim[(i, i)]);
            }
        }
    }
    let l0 = total / (2.0 * n as f64 * (n - 1) as f64);
    Ok(l0 + regularizer(g, g_tilde, rho))
}

/// Closed-form minimizer from a precomputed cross-covariance: the product
/// `(1/ρ)·U_r S_r V_rᵀ` split symmetrically as `G = ρ^{-1/2} S_r^{1/2} U_rᵀ`,
/// `G̃ = ρ^{-1/2} S_r^{1/2} V_rᵀ`.
pub fn solve_from_cross_covariance(s: &Matrix, r: usize, rho: f64) -> Result<Encoders> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(LabError::param("rho", format!("must be positive and finite, got {rho}")));
    }
    let svd = linalg::truncated_svd(s, r)?;
    let mut g = svd.u.transpose();
    let mut g_tilde = svd.v.transpose();
    for (i, sv) in svd.s.iter().enumerate() {
        let w = (sv / rho).sqrt();
        g.row_mut(i).scale_mut(w);
        g_tilde.row_mut(i).scale_mut(w);
    }
    Encoders::new(g, g_tilde, rho)
}

/// Minimize the contrastive loss on `samples` in closed form.
pub fn solve_closed_form(samples: &PairedSamples, r: usize, rho: f64, mode: CovMode) -> Result<Encoders> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(LabError::param("rho", format!("must be positive and finite, got {rho}")));
    }
    if r == 0 || r > samples.d().min(samples.d_tilde()) {
        return Err(LabError::param(
            "r",
            format!("need 1 <= r <= min(d, d_tilde), got {r}"),
        ));
    }
    if samples.len() < 2 {
        return Err(LabError::param("n", "closed-form solve needs n >= 2"));
    }
    let s = linalg::cross_covariance(samples, mode)?;
    solve_from_cross_covariance(&s, r, rho)
}
