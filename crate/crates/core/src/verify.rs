//! Property and invariant suite run by the `verify` command.
//!
//! Each check is self-contained, seeded and returns a pass/fail result with
//! a short human-readable detail line.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::contrastive::{self, Encoders};
use crate::error::Result;
use crate::experiments::{self, ExperimentConfig, Method};
use crate::filtering::{self, ScoreMatrix};
use crate::linalg::{self, CovMode, Matrix};
use crate::metrics;
use crate::model::{self, make_model};
use crate::rng::{stream, LabRng, Purpose, StreamKey};
use crate::score_stats;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn gaussian(rng: &mut LabRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn orthonormal(rng: &mut LabRng, rows: usize, cols: usize) -> Matrix {
    linalg::orthonormalize_columns(&gaussian(rng, rows, cols)).expect("Gaussian matrix has full rank")
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn orthonormality() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let m = make_model(seed, 12, 9, 5, 1.0, 1.0, 0.5)?;
        worst = worst.max(linalg::orthonormality_error(&m.u)).max(linalg::orthonormality_error(&m.u_tilde));
        let perp = linalg::complete_basis(&m.u)?;
        worst = worst.max((perp.transpose() * &m.u).amax());
    }
    Ok((worst < 1e-10, format!("max deviation {worst:.2e} over 100 models")))
}

fn sin_theta_oracle() -> Result<(bool, String)> {
    let mut rng = stream(11, Purpose::Verify, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let x = orthonormal(&mut rng, 5, 2);
        let y = orthonormal(&mut rng, 5, 2);
        let d = linalg::sin_theta_dist(&x, &y)?;
        let oracle: f64 = linalg::singular_values(&(x.transpose() * &y))
            .iter()
            .map(|s| s.clamp(-1.0, 1.0).acos().sin().powi(2))
            .sum::<f64>()
            .sqrt();
        let sym = linalg::sin_theta_dist(&y, &x)?;
        let q = orthonormal(&mut rng, 2, 2);
        let rot = linalg::sin_theta_dist(&(&x * &q), &y)?;
        worst = worst.max((d - oracle).abs()).max((d - sym).abs()).max((d - rot).abs());
    }
    Ok((worst < 1e-8, format!("max |dist - arccos oracle|, asymmetry, rotation gap = {worst:.2e}")))
}

fn wedin_weyl() -> Result<(bool, String)> {
    let mut rng = stream(12, Purpose::Verify, 0, 0);
    let (mut wedin_viol, mut weyl_viol) = (0, 0);
    let trials = 200;
    for t in 0..trials {
        let r = 3;
        let a = gaussian(&mut rng, 8, r) * gaussian(&mut rng, r, 6);
        let sv = linalg::singular_values(&a);
        let scale = 10f64.powf(-3.0 + 2.5 * (t as f64 / trials as f64));
        let e = gaussian(&mut rng, 8, 6) * scale;
        let e2 = linalg::spectral_norm(&e);
        let b = &a + &e;
        let svb = linalg::singular_values(&b);
        if sv.iter().zip(&svb).any(|(x, y)| (x - y).abs() > e2 + 1e-12) {
            weyl_viol += 1;
        }
        if e2 < sv[r - 1] {
            let ua = linalg::truncated_svd(&a, r)?.u;
            let ub = linalg::truncated_svd(&b, r)?.u;
            let bound = e.norm() / (sv[r - 1] - e2);
            if linalg::sin_theta_dist(&ua, &ub)? > bound + 1e-12 {
                wedin_viol += 1;
            }
        }
    }
    Ok((
        wedin_viol == 0 && weyl_viol == 0,
        format!("{trials} trials: {wedin_viol} Wedin and {weyl_viol} Weyl violations"),
    ))
}

fn loss_forms_and_rotation() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let m = make_model(seed, 4, 3, 2, 5.0, 5.0, 0.6)?;
        let ds = model::sample_dataset(&m, 12, &mut stream(seed, Purpose::Verify, 1, 0))?;
        let mut rng = stream(seed, Purpose::Verify, 2, 0);
        let g = gaussian(&mut rng, 2, 4);
        let gt = gaussian(&mut rng, 2, 3);
        let a = contrastive::loss(&g, &gt, ds.samples(), 0.9)?;
        let b = contrastive::loss_pairwise(&g, &gt, ds.samples(), 0.9)?;
        let q = orthonormal(&mut rng, 2, 2);
        let c = contrastive::loss(&(&q * &g), &(&q * &gt), ds.samples(), 0.9)?;
        let prod_gap = ((&q * &g).transpose() * (&q * &gt) - g.transpose() * &gt).amax();
        worst = worst.max((a - b).abs()).max((a - c).abs()).max(prod_gap);
    }
    Ok((worst < 1e-10, format!("max gap between loss forms / rotated loss = {worst:.2e}")))
}

fn closed_form_product() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let m = make_model(seed, 10, 8, 4, 100.0, 100.0, 0.5)?;
        let ds = model::sample_dataset(&m, 1000, &mut stream(seed, Purpose::Verify, 3, 0))?;
        let s = linalg::cross_covariance(ds.samples(), CovMode::Centered)?;
        for rho in [0.3, 1.0, 4.0] {
            let enc = contrastive::solve_from_cross_covariance(&s, 4, rho)?;
            let target = linalg::truncated_svd(&s, 4)?.reconstruct() / rho;
            worst = worst.max((enc.product() - &target).norm() / target.norm());
        }
    }
    Ok((worst < 1e-8, format!("max relative product error {worst:.2e}")))
}

fn rho_invariance() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let m = make_model(seed, 10, 8, 4, 1e2, 1e2, 0.4)?;
        let ds = model::sample_dataset(&m, 2000, &mut stream(seed, Purpose::Verify, 4, 0))?;
        let encs: Vec<Encoders> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&rho| contrastive::solve_closed_form(ds.samples(), 4, rho, CovMode::Centered))
            .collect::<Result<_>>()?;
        let bases: Vec<(Matrix, Matrix)> = encs
            .iter()
            .map(|e| (linalg::row_space_basis(&e.g).0, linalg::row_space_basis(&e.g_tilde).0))
            .collect();
        let reports: Vec<_> = encs.iter().map(|e| metrics::report(e, &m)).collect::<Result<_>>()?;
        for i in 0..3 {
            for j in 0..3 {
                worst = worst
                    .max(linalg::sin_theta_dist(&bases[i].0, &bases[j].0)?)
                    .max(linalg::sin_theta_dist(&bases[i].1, &bases[j].1)?)
                    .max((reports[i].err_ccd - reports[j].err_ccd).abs())
                    .max((reports[i].err_def3 - reports[j].err_def3).abs());
            }
        }
    }
    Ok((worst < 1e-8, format!("max subspace / ccd / def3 gap across rho = {worst:.2e}")))
}

fn metric_invariances() -> Result<(bool, String)> {
    let mut rng = stream(13, Purpose::Verify, 0, 0);
    let mut worst_rot: f64 = 0.0;
    let mut bound_ok = true;
    for seed in 0..50 {
        let m = make_model(seed, 9, 7, 3, 10.0, 10.0, 0.5)?;
        let enc = Encoders::new(gaussian(&mut rng, 3, 9), gaussian(&mut rng, 3, 7), 1.0)?;
        let q = orthonormal(&mut rng, 3, 3);
        let a = metrics::err_ssd(&enc, &m)?.value;
        let b = metrics::err_ssd(&enc.rotated(&q), &m)?.value;
        worst_rot = worst_rot.max((a - b).abs());
        let rep = metrics::report(&enc, &m)?;
        bound_ok &= rep.err_ssd >= 0.0
            && rep.err_ssd <= 3f64.sqrt() + 1e-12
            && rep.err_ccd >= 0.0
            && rep.err_def3 >= 0.0
            && rep.err_lpe >= 0.0;
        let uh = &m.u * &q;
        let uth = &m.u_tilde * &q;
        worst_rot = worst_rot
            .max(metrics::ccd_from_factors(&uh, &uth, &m))
            .max(metrics::def3_from_factors(&uh, &uth, &m));
    }
    Ok((
        worst_rot < 1e-10 && bound_ok,
        format!("max rotation gap {worst_rot:.2e}, range checks {}", if bound_ok { "ok" } else { "violated" }),
    ))
}

fn filter_monotone_and_scale_invariant() -> Result<(bool, String)> {
    let mut violations = 0;
    for seed in 0..20 {
        let m = make_model(seed, 10, 8, 4, 1e2, 1e2, 0.3)?;
        let ds = model::sample_dataset(&m, 2000, &mut stream(seed, Purpose::Verify, 5, 0))?;
        let mut rng = stream(seed, Purpose::Verify, 6, 0);
        let a = ScoreMatrix::new(gaussian(&mut rng, 10, 8))?;
        let s = filtering::scores(ds.samples(), &a)?;
        let mut thetas: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
        thetas.sort_by(f64::total_cmp);
        let sets: Vec<Vec<usize>> = thetas.iter().map(|&t| filtering::filter_scores(&s, t).selected_indices).collect();
        for w in sets.windows(2) {
            if !w[1].iter().all(|i| w[0].binary_search(i).is_ok()) {
                violations += 1;
            }
        }
        let lambda = 0.1 + rng.random::<f64>() * 10.0;
        let scaled = filtering::scores(ds.samples(), &a.scaled(lambda))?;
        for &t in &thetas {
            if filtering::filter_scores(&s, t).selected_indices != filtering::filter_scores(&scaled, lambda * t).selected_indices {
                violations += 1;
            }
        }
        for f in [0.05, 0.3, 0.7] {
            if filtering::select_top_fraction(&s, f)?.selected_indices
                != filtering::select_top_fraction(&scaled, f)?.selected_indices
            {
                violations += 1;
            }
        }
    }
    Ok((violations == 0, format!("{violations} monotonicity / scale-invariance violations")))
}

fn teacher_convergence() -> Result<(bool, String)> {
    let sizes = [1_000usize, 10_000, 100_000];
    let m = make_model(21, 10, 8, 4, 1e4, 1e4, 0.3)?;
    let oracle = m.oracle_matrix();
    let oracle = &oracle / linalg::spectral_norm(&oracle);
    let mut medians = Vec::new();
    for &n_t in &sizes {
        let gaps: Vec<f64> = (0..20u64)
            .map(|seed| {
                let ds = model::sample_dataset_keyed(&m, n_t, StreamKey::new(21, Purpose::Verify, n_t as u64, seed))?;
                let t = contrastive::solve_closed_form(ds.samples(), 4, 1.0, CovMode::Centered)?;
                let mt = t.product();
                Ok(linalg::spectral_norm(&(&mt / linalg::spectral_norm(&mt) - &oracle)))
            })
            .collect::<Result<_>>()?;
        medians.push(experiments::median(&gaps));
    }
    let ok = medians.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = medians.iter().map(|v| format!("{v:.3e}")).collect();
    Ok((ok, format!("median ‖M_T/‖M_T‖ − M_O/‖M_O‖‖₂ at n_T = 1e3, 1e4, 1e5: {}", shown.join(", "))))
}

fn determinism() -> Result<(bool, String)> {
    let m = make_model(3, 10, 8, 4, 1e4, 1e4, 0.3)?;
    let key = StreamKey::new(3, Purpose::Dataset, 0, 0);
    let same_data = model::sample_dataset_keyed(&m, 5000, key)? == model::sample_dataset_keyed(&m, 5000, key)?;
    let mut cfg = ExperimentConfig::desk(
        20_000,
        vec![1.0, 0.3, 0.05],
        vec![Method::NoFilter, Method::OracleFilter, Method::TeacherFilter],
    );
    cfg.seeds = vec![0, 1, 2, 3];
    cfg.record_timing = false;
    cfg.retention_fractions = vec![0.3];
    cfg.theta_policy = experiments::ThetaPolicy::Both;
    let cfg = cfg.validate()?;
    let mut runs = Vec::new();
    for threads in [1, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| crate::LabError::Config(e.to_string()))?;
        let res = pool.install(|| experiments::run_eta_sweep(&cfg))?;
        let draws = pool.install(|| score_stats::draw_scores(&m, score_stats::ScoreClass::Mixture, 100_000, 5));
        runs.push((res.records, draws));
    }
    let same_sweep = runs.windows(2).all(|w| w[0] == w[1]);
    Ok((
        same_data && same_sweep,
        format!("datasets identical: {same_data}; sweep + Monte-Carlo identical across 1/2/4 threads: {same_sweep}"),
    ))
}

fn mixture_identity() -> Result<(bool, String)> {
    let m = make_model(4, 10, 8, 4, 1e4, 1e4, 0.3)?;
    let draws = score_stats::ScoreDraws::new(&m, 200_000, 4)?;
    let mut worst: f64 = 0.0;
    let mut mono = true;
    let mut prev: Option<score_stats::TailStats> = None;
    for i in 0..10 {
        let theta = -4.0 + 1.5 * i as f64;
        let t = draws.tail(theta);
        let (gap, se) = t.mixture_gap();
        worst = worst.max(gap.abs() / se);
        if let Some(p) = prev {
            mono &= t.d0.p <= p.d0.p && t.d1.p <= p.d1.p;
            if let (Some(a), Some(b)) = (p.d0.e, t.d0.e) {
                mono &= b >= a;
            }
            if let (Some(a), Some(b)) = (p.d1.e, t.d1.e) {
                mono &= b >= a;
            }
        }
        prev = Some(t);
    }
    Ok((
        worst <= 4.0 && mono,
        format!("max |gap|/SE = {worst:.2} over 10 thresholds; tail monotonicity {}", if mono { "ok" } else { "violated" }),
    ))
}

fn moment_ordering() -> Result<(bool, String)> {
    let mut rng = stream(14, Purpose::Verify, 0, 0);
    let mut ok = true;
    for seed in 0..100 {
        let g = 10f64.powf(rng.random::<f64>() * 8.0 - 4.0);
        let gt = if seed % 5 == 0 { f64::INFINITY } else { 10f64.powf(rng.random::<f64>() * 8.0 - 4.0) };
        let t = score_stats::theory_moments(&make_model(seed, 5, 4, 2, g, gt, 0.5)?);
        ok &= t.var0 <= t.var1 && t.var1 <= 2.0 * t.var0;
    }
    Ok((ok, "var0 <= var1 <= 2 var0 on 100 random models".into()))
}

fn latent_cross_moment() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for (i, eta) in [0.05, 0.3, 0.9].into_iter().enumerate() {
        let m = make_model(5 + i as u64, 8, 6, 3, 10.0, 10.0, eta)?;
        let ds = model::sample_dataset(&m, 100_000, &mut stream(5, Purpose::Verify, 7, i as u64))?;
        let n = ds.n() as f64;
        let (mut sum, mut sq) = (Matrix::zeros(3, 3), Matrix::zeros(3, 3));
        for (x, xt) in ds.samples().iter() {
            let a = m.u.transpose() * nalgebra::DVector::from_column_slice(x);
            let b = m.u_tilde.transpose() * nalgebra::DVector::from_column_slice(xt);
            let outer = &a * b.transpose();
            sq += outer.component_mul(&outer);
            sum += outer;
        }
        let mean = &sum / n;
        for r in 0..3 {
            for c in 0..3 {
                let se = ((sq[(r, c)] / n - mean[(r, c)].powi(2)) / n).sqrt();
                let target = if r == c { eta } else { 0.0 };
                worst = worst.max((mean[(r, c)] - target).abs() / se);
            }
        }
    }
    Ok((worst <= 5.0, format!("max |E[(Uᵀx)(Ũᵀx̃)ᵀ] − ηI|/SE = {worst:.2}")))
}

fn envelope_report() -> Result<(bool, String)> {
    let m = make_model(6, 20, 20, 16, 1e4, 1e4, 0.5)?;
    let ts = [2.0, 4.0, 8.0, 12.0, 16.0];
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        for row in score_stats::clean_tail_vs_envelope(&m, &ts, 20_000, seed) {
            worst = worst.max(row.ratio);
        }
    }
    Ok((true, format!("reported only: calibration constant (max empirical/envelope over 20 seeds) = {worst:.3}")))
}

/// Run every check.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("orthonormality", orthonormality),
        check("sin_theta_oracle_symmetry_rotation", sin_theta_oracle),
        check("wedin_weyl", wedin_weyl),
        check("loss_forms_and_rotation_invariance", loss_forms_and_rotation),
        check("closed_form_product", closed_form_product),
        check("rho_invariance", rho_invariance),
        check("metric_invariances", metric_invariances),
        check("filter_monotonicity_scale_invariance", filter_monotone_and_scale_invariant),
        check("teacher_convergence", teacher_convergence),
        check("determinism_across_threads", determinism),
        check("mixture_identity_tail_monotonicity", mixture_identity),
        check("score_variance_ordering", moment_ordering),
        check("latent_cross_moment", latent_cross_moment),
        check("hanson_wright_envelope", envelope_report),
    ]
}
