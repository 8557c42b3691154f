//! Subspace-recovery error metrics.
//!
//! * `ssd` – separate sine distance: max over modalities of the chordal
//!   distance between the encoder row space and the true factor.
//! * `ccd` – cross-correlation distance `‖UŨᵀ − ÛŨ̂ᵀ‖_F`.
//! * `def3` – `‖UᵀÛ − ŨᵀŨ̂‖_F`.
//! * `lpe` – label prediction error, evaluated in closed form.
//!
//! `Û`, `Ũ̂` are the top-r left/right singular vectors of `GᵀG̃`.

use serde::{Deserialize, Serialize};

use crate::contrastive::Encoders;
use crate::error::{LabError, Result};
use crate::linalg::{self, Matrix};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Ssd,
    Ccd,
    Def3,
    Lpe,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Ssd, Metric::Ccd, Metric::Def3, Metric::Lpe];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ssd => "ssd",
            Metric::Ccd => "ccd",
            Metric::Def3 => "def3",
            Metric::Lpe => "lpe",
        }
    }
}

/// A metric value plus whether a rank-deficient input had to be patched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub rank_deficient: bool,
}

/// All four metrics for one solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub err_ssd: f64,
    pub err_ccd: f64,
    pub err_def3: f64,
    pub err_lpe: f64,
    pub rank_deficient: bool,
}

impl MetricReport {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Ssd => self.err_ssd,
            Metric::Ccd => self.err_ccd,
            Metric::Def3 => self.err_def3,
            Metric::Lpe => self.err_lpe,
        }
    }
}

fn check_consistent(enc: &Encoders, model: &ModelParams) -> Result<()> {
    if enc.g.ncols() != model.d || enc.g_tilde.ncols() != model.d_tilde || enc.rank() != model.r {
        return Err(LabError::param(
            "encoders",
            format!(
                "encoder shapes {:?}/{:?} inconsistent with model (r={}, d={}, d_tilde={})",
                enc.g.shape(),
                enc.g_tilde.shape(),
                model.r,
                model.d,
                model.d_tilde
            ),
        ));
    }
    Ok(())
}

/// Chordal distance between the row space of `g` and `truth`. A row space
/// of dimension `k < r` is compared on its `k` directions and each missing
/// direction counts as fully misaligned.
fn row_space_distance(g: &Matrix, truth: &Matrix) -> Result<MetricValue> {
    let r = truth.ncols();
    let (basis, k) = linalg::row_space_basis(g);
    let k = k.min(r);
    let basis = basis.columns(0, k).into_owned();
    if k == r {
        return Ok(MetricValue {
            value: linalg::sin_theta_dist(&basis, truth)?,
            rank_deficient: false,
        });
    }
    let perp = linalg::complete_basis(truth)?;
    let partial = (perp.transpose() * basis).norm_squared();
    Ok(MetricValue {
        value: (partial + (r - k) as f64).sqrt().min((r as f64).sqrt()),
        rank_deficient: true,
    })
}

/// `max{‖sinΘ(rsv(G), U)‖_F, ‖sinΘ(rsv(G̃), Ũ)‖_F}`.
pub fn err_ssd(enc: &Encoders, model: &ModelParams) -> Result<MetricValue> {
    check_consistent(enc, model)?;
    let a = row_space_distance(&enc.g, &model.u)?;
    let b = row_space_distance(&enc.g_tilde, &model.u_tilde)?;
    Ok(MetricValue {
        value: a.value.max(b.value),
        rank_deficient: a.rank_deficient || b.rank_deficient,
    })
}

/// `(Û, Ũ̂)` = top-r singular factors of `GᵀG̃`, plus a rank-deficiency flag.
pub fn product_factors(enc: &Encoders, r: usize) -> Result<(Matrix, Matrix, bool)> {
    let prod = enc.product();
    let svd = linalg::truncated_svd(&prod, r)?;
    let smax = svd.s[0];
    let deficient = smax == 0.0 || svd.s[r - 1] <= smax * 1e-12;
    Ok((svd.u, svd.v, deficient))
}

pub fn ccd_from_factors(u_hat: &Matrix, ut_hat: &Matrix, model: &ModelParams) -> f64 {
    (model.oracle_matrix() - u_hat * ut_hat.transpose()).norm()
}

pub fn def3_from_factors(u_hat: &Matrix, ut_hat: &Matrix, model: &ModelParams) -> f64 {
    (model.u.transpose() * u_hat - model.u_tilde.transpose() * ut_hat).norm()
}

/// `√(Tr(M)² + Tr(M²) + Tr(MᵀM))` with `M = UᵀÛŨ̂ᵀŨ − I_r`.
pub fn lpe_from_factors(u_hat: &Matrix, ut_hat: &Matrix, model: &ModelParams) -> f64 {
    let m = lpe_matrix(u_hat, ut_hat, model);
    lpe_from_matrix(&m)
}

pub fn lpe_matrix(u_hat: &Matrix, ut_hat: &Matrix, model: &ModelParams) -> Matrix {
    model.u.transpose() * u_hat * ut_hat.transpose() * &model.u_tilde - Matrix::identity(model.r, model.r)
}

pub fn lpe_from_matrix(m: &Matrix) -> f64 {
    let tr = m.trace();
    let tr_sq = (m * m).trace();
    let tr_tm = m.norm_squared();
    (tr * tr + tr_sq + tr_tm).max(0.0).sqrt()
}

fn with_factors(enc: &Encoders, model: &ModelParams, f: fn(&Matrix, &Matrix, &ModelParams) -> f64) -> Result<MetricValue> {
    check_consistent(enc, model)?;
    let (u_hat, ut_hat, deficient) = product_factors(enc, model.r)?;
    Ok(MetricValue {
        value: f(&u_hat, &ut_hat, model),
        rank_deficient: deficient,
    })
}

pub fn err_ccd(enc: &Encoders, model: &ModelParams) -> Result<MetricValue> {
    with_factors(enc, model, ccd_from_factors)
}

pub fn err_def3(enc: &Encoders, model: &ModelParams) -> Result<MetricValue> {
    with_factors(enc, model, def3_from_factors)
}

pub fn err_lpe(enc: &Encoders, model: &ModelParams) -> Result<MetricValue> {
    with_factors(enc, model, lpe_from_factors)
}

/// Every metric at once (one SVD of the product).
pub fn report(enc: &Encoders, model: &ModelParams) -> Result<MetricReport> {
    let ssd = err_ssd(enc, model)?;
    let (u_hat, ut_hat, deficient) = product_factors(enc, model.r)?;
    Ok(MetricReport {
        err_ssd: ssd.value,
        err_ccd: ccd_from_factors(&u_hat, &ut_hat, model),
        err_def3: def3_from_factors(&u_hat, &ut_hat, model),
        err_lpe: lpe_from_factors(&u_hat, &ut_hat, model),
        rank_deficient: ssd.rank_deficient || deficient,
    })
}
