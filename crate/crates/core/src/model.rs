//! The bimodal generative model with stochastic corruption.
//!
//! A pair is drawn as `x = U z + ξ`, `x̃ = Ũ z̃ + ξ̃` where with probability
//! `η` the two latents coincide (clean pair) and otherwise `z̃` is an
//! independent draw (corrupted pair). Noise is isotropic Gaussian with
//! precision `γ` (resp. `γ̃`); an infinite precision means no noise at all.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::linalg::{self, Matrix};
use crate::rng::{LabRng, StreamKey};

const ORTHONORMAL_TOL: f64 = 1e-10;

/// Ground-truth problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d: usize,
    pub d_tilde: usize,
    pub r: usize,
    pub eta: f64,
    /// Inverse noise variance of modality 1; `f64::INFINITY` means noise-free.
    pub gamma: f64,
    pub gamma_tilde: f64,
    pub u: Matrix,
    pub u_tilde: Matrix,
}

impl ModelParams {
    /// Build a model from explicit factors, validating every invariant.
    pub fn new(eta: f64, gamma: f64, gamma_tilde: f64, u: Matrix, u_tilde: Matrix) -> Result<Self> {
        let (d, r) = u.shape();
        let (d_tilde, r2) = u_tilde.shape();
        if r != r2 {
            return Err(LabError::param(
                "u_tilde",
                format!("latent dimensions differ: U has {r} columns, U_tilde has {r2}"),
            ));
        }
        check_dims(d, d_tilde, r)?;
        check_eta(eta)?;
        check_gamma("gamma", gamma)?;
        check_gamma("gamma_tilde", gamma_tilde)?;
        for (name, m) in [("u", &u), ("u_tilde", &u_tilde)] {
            let err = linalg::orthonormality_error(m);
            if err > ORTHONORMAL_TOL {
                return Err(LabError::param(
                    name,
                    format!("columns not orthonormal (max |QᵀQ - I| = {err:e})"),
                ));
            }
        }
        Ok(Self {
            d,
            d_tilde,
            r,
            eta,
            gamma,
            gamma_tilde,
            u,
            u_tilde,
        })
    }

    /// Same factors, different clean fraction.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        Ok(Self { eta, ..self.clone() })
    }

    /// Noise standard deviation of modality 1 (zero when `γ = ∞`).
    pub fn noise_std(&self) -> f64 {
        precision_to_std(self.gamma)
    }

    pub fn noise_std_tilde(&self) -> f64 {
        precision_to_std(self.gamma_tilde)
    }

    /// `γ⁻¹` with `∞ ↦ 0`.
    pub fn inv_gamma(&self) -> f64 {
        inverse_precision(self.gamma)
    }

    pub fn inv_gamma_tilde(&self) -> f64 {
        inverse_precision(self.gamma_tilde)
    }

    /// `(1 + γ⁻¹)(1 + γ̃⁻¹)`, the noise inflation factor that shows up in
    /// every variance and sample-size bound.
    pub fn noise_inflation(&self) -> f64 {
        (1.0 + self.inv_gamma()) * (1.0 + self.inv_gamma_tilde())
    }

    /// The oracle score matrix `U Ũᵀ`.
    pub fn oracle_matrix(&self) -> Matrix {
        &self.u * self.u_tilde.transpose()
    }

    /// Hex SHA-256 of the parameters, used for dataset provenance.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.d as u64, self.d_tilde as u64, self.r as u64] {
            h.update(v.to_le_bytes());
        }
        for v in [self.eta, self.gamma, self.gamma_tilde] {
            h.update(v.to_bits().to_le_bytes());
        }
        for v in self.u.iter().chain(self.u_tilde.iter()) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn precision_to_std(gamma: f64) -> f64 {
    if gamma.is_infinite() {
        0.0
    } else {
        gamma.recip().sqrt()
    }
}

fn inverse_precision(gamma: f64) -> f64 {
    if gamma.is_infinite() {
        0.0
    } else {
        gamma.recip()
    }
}

fn check_dims(d: usize, d_tilde: usize, r: usize) -> Result<()> {
    if d == 0 || d_tilde == 0 {
        return Err(LabError::param("d", "dimensions must be positive"));
    }
    if r == 0 || r > d.min(d_tilde) {
        return Err(LabError::param(
            "r",
            format!("need 1 <= r <= min(d, d_tilde) = {}, got {r}", d.min(d_tilde)),
        ));
    }
    Ok(())
}

pub(crate) fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(LabError::param("eta", format!("must lie in (0, 1], got {eta}")));
    }
    Ok(())
}

fn check_gamma(name: &'static str, gamma: f64) -> Result<()> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(LabError::param(name, format!("must be positive or +inf, got {gamma}")));
    }
    Ok(())
}

/// Draw a random instance: `U`, `Ũ` are Gram–Schmidt orthonormalized
/// standard-Gaussian matrices. Deterministic in `seed`.
pub fn make_model(
    seed: u64,
    d: usize,
    d_tilde: usize,
    r: usize,
    gamma: f64,
    gamma_tilde: f64,
    eta: f64,
) -> Result<ModelParams> {
    check_dims(d, d_tilde, r)?;
    let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Model, 0, 0);
    let mut gaussian = |rows: usize| {
        let m = DMatrix::from_fn(rows, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        linalg::orthonormalize_columns(&m)
    };
    let u = gaussian(d)?;
    let u_tilde = gaussian(d_tilde)?;
    ModelParams::new(eta, gamma, gamma_tilde, u, u_tilde)
}

/// A single observation. `clean_flag` is the hidden coin and is for
/// diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub x: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub clean_flag: bool,
}

/// Scratch space for drawing pairs without per-sample allocation.
struct Sampler<'m> {
    model: &'m ModelParams,
    z: Vec<f64>,
    z_tilde: Vec<f64>,
    std: f64,
    std_tilde: f64,
}

impl<'m> Sampler<'m> {
    fn new(model: &'m ModelParams) -> Self {
        Self {
            model,
            z: vec![0.0; model.r],
            z_tilde: vec![0.0; model.r],
            std: model.noise_std(),
            std_tilde: model.noise_std_tilde(),
        }
    }

    /// Writes one pair into the output slices and returns the clean flag.
    fn draw(&mut self, rng: &mut LabRng, x: &mut [f64], x_tilde: &mut [f64]) -> bool {
        let m = self.model;
        let clean = m.eta >= 1.0 || rng.random::<f64>() < m.eta;
        for v in self.z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        if clean {
            self.z_tilde.copy_from_slice(&self.z);
        } else {
            for v in self.z_tilde.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        embed(&m.u, &self.z, self.std, rng, x);
        embed(&m.u_tilde, &self.z_tilde, self.std_tilde, rng, x_tilde);
        clean
    }
}

/// `out = basis · latent + std · N(0, I)`; no noise draws when `std == 0`.
fn embed(basis: &Matrix, latent: &[f64], std: f64, rng: &mut LabRng, out: &mut [f64]) {
    let r = latent.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, l) in latent.iter().enumerate().take(r) {
            acc += basis[(i, k)] * l;
        }
        *o = acc;
    }
    if std > 0.0 {
        for o in out.iter_mut() {
            *o += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Draw one pair.
pub fn sample_pair(model: &ModelParams, rng: &mut LabRng) -> SamplePair {
    let mut x = vec![0.0; model.d];
    let mut x_tilde = vec![0.0; model.d_tilde];
    let clean_flag = Sampler::new(model).draw(rng, &mut x, &mut x_tilde);
    SamplePair {
        x,
        x_tilde,
        clean_flag,
    }
}

/// Paired observations without their clean/corrupt flags. Every training
/// and filtering routine takes this type, so no pipeline can peek at the
/// hidden coin.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSamples {
    d: usize,
    d_tilde: usize,
    x: Vec<f64>,
    x_tilde: Vec<f64>,
}

impl PairedSamples {
    /// Build from row-major buffers (`n·d` and `n·d̃` entries).
    pub fn from_rows(d: usize, d_tilde: usize, x: Vec<f64>, x_tilde: Vec<f64>) -> Result<Self> {
        if d == 0 || d_tilde == 0 {
            return Err(LabError::param("d", "dimensions must be positive"));
        }
        if x.len() % d != 0 || x_tilde.len() % d_tilde != 0 || x.len() / d != x_tilde.len() / d_tilde {
            return Err(LabError::param(
                "x",
                "buffers must hold the same number of complete rows",
            ));
        }
        Ok(Self {
            d,
            d_tilde,
            x,
            x_tilde,
        })
    }

    pub fn from_pairs<'a>(d: usize, d_tilde: usize, pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<Self> {
        let mut x = Vec::new();
        let mut x_tilde = Vec::new();
        for (a, b) in pairs {
            if a.len() != d || b.len() != d_tilde {
                return Err(LabError::param("pairs", "row length does not match dimensions"));
            }
            x.extend_from_slice(a);
            x_tilde.extend_from_slice(b);
        }
        Self::from_rows(d, d_tilde, x, x_tilde)
    }

    pub fn len(&self) -> usize {
        self.x.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d_tilde(&self) -> usize {
        self.d_tilde
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn x_tilde(&self, i: usize) -> &[f64] {
        &self.x_tilde[i * self.d_tilde..(i + 1) * self.d_tilde]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> + '_ {
        self.x.chunks_exact(self.d).zip(self.x_tilde.chunks_exact(self.d_tilde))
    }

    /// Rows `start..end` in order.
    pub fn slice(&self, start: usize, end: usize) -> PairedSamples {
        PairedSamples {
            d: self.d,
            d_tilde: self.d_tilde,
            x: self.x[start * self.d..end * self.d].to_vec(),
            x_tilde: self.x_tilde[start * self.d_tilde..end * self.d_tilde].to_vec(),
        }
    }

    /// The rows named by `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> PairedSamples {
        let mut x = Vec::with_capacity(indices.len() * self.d);
        let mut x_tilde = Vec::with_capacity(indices.len() * self.d_tilde);
        for &i in indices {
            x.extend_from_slice(self.x(i));
            x_tilde.extend_from_slice(self.x_tilde(i));
        }
        PairedSamples {
            d: self.d,
            d_tilde: self.d_tilde,
            x,
            x_tilde,
        }
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// `(master, purpose, point, trial)` of the generating stream, when known.
    pub stream: Option<(u64, u8, u64, u64)>,
    pub model_digest: String,
}

/// `n` i.i.d. pairs in generation order, plus their hidden flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: PairedSamples,
    clean_flags: Vec<bool>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.samples.len()
    }

    /// The flag-free view used by every training path.
    pub fn samples(&self) -> &PairedSamples {
        &self.samples
    }

    /// Hidden clean/corrupt coins. Diagnostics only.
    pub fn clean_flags(&self) -> &[bool] {
        &self.clean_flags
    }

    pub fn pair(&self, i: usize) -> SamplePair {
        SamplePair {
            x: self.samples.x(i).to_vec(),
            x_tilde: self.samples.x_tilde(i).to_vec(),
            clean_flag: self.clean_flags[i],
        }
    }

    pub fn clean_count(&self) -> usize {
        self.clean_flags.iter().filter(|&&c| c).count()
    }
}

/// Draw `n` pairs from `rng`.
pub fn sample_dataset(model: &ModelParams, n: usize, rng: &mut LabRng) -> Result<Dataset> {
    sample_dataset_inner(model, n, rng, None)
}

/// Draw `n` pairs from the stream named by `key`, recording it as provenance.
pub fn sample_dataset_keyed(model: &ModelParams, n: usize, key: StreamKey) -> Result<Dataset> {
    let mut rng = key.rng();
    sample_dataset_inner(
        model,
        n,
        &mut rng,
        Some((key.master, key.purpose as u8, key.point, key.trial)),
    )
}

fn sample_dataset_inner(
    model: &ModelParams,
    n: usize,
    rng: &mut LabRng,
    stream: Option<(u64, u8, u64, u64)>,
) -> Result<Dataset> {
    if n == 0 {
        return Err(LabError::param("n", "dataset needs at least one sample"));
    }
    let mut x = vec![0.0; n * model.d];
    let mut x_tilde = vec![0.0; n * model.d_tilde];
    let mut clean_flags = Vec::with_capacity(n);
    let mut sampler = Sampler::new(model);
    for (xr, xtr) in x.chunks_exact_mut(model.d).zip(x_tilde.chunks_exact_mut(model.d_tilde)) {
        clean_flags.push(sampler.draw(rng, xr, xtr));
    }
    Ok(Dataset {
        samples: PairedSamples::from_rows(model.d, model.d_tilde, x, x_tilde)?,
        clean_flags,
        provenance: Provenance {
            stream,
            model_digest: model.digest(),
        },
    })
}

/// Stream `n` pairs through `f` without materializing them. With
/// `clean = Some(c)` every pair has corruption status `c`; with `None` the
/// coin is tossed with probability `η`. Used by the Monte-Carlo estimators.
pub(crate) fn for_each_pair(
    model: &ModelParams,
    n: usize,
    clean: Option<bool>,
    rng: &mut LabRng,
    mut f: impl FnMut(&[f64], &[f64], bool),
) {
    let forced;
    let source = match clean {
        Some(c) => {
            forced = ModelParams {
                eta: if c { 1.0 } else { 0.0 },
                ..model.clone()
            };
            &forced
        }
        None => model,
    };
    let mut x = vec![0.0; model.d];
    let mut x_tilde = vec![0.0; model.d_tilde];
    let mut sampler = Sampler::new(source);
    for _ in 0..n {
        let c = sampler.draw(rng, &mut x, &mut x_tilde);
        f(&x, &x_tilde, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn fig3a(eta: f64) -> ModelParams {
        make_model(0, 10, 8, 4, 1e4, 1e4, eta).unwrap()
    }

    #[test]
    fn fig3a_instance_is_valid() {
        let m = fig3a(0.3);
        assert_eq!((m.d, m.d_tilde, m.r), (10, 8, 4));
        assert!(linalg::orthonormality_error(&m.u) < 1e-10);
        assert!(linalg::orthonormality_error(&m.u_tilde) < 1e-10);
    }

    #[test]
    fn one_dimensional_factors_are_unit() {
        let m = make_model(3, 1, 1, 1, 1.0, 1.0, 0.5).unwrap();
        assert!((m.u[(0, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((m.u_tilde[(0, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthonormal_for_many_seeds() {
        for seed in 0..50 {
            let m = make_model(seed, 12, 7, 5, 1.0, 2.0, 0.4).unwrap();
            assert!(linalg::orthonormality_error(&m.u) < 1e-10);
            assert!(linalg::orthonormality_error(&m.u_tilde) < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_model(0, 3, 2, 3, 1.0, 1.0, 0.5).is_err());
        assert!(make_model(0, 3, 2, 0, 1.0, 1.0, 0.5).is_err());
        assert!(make_model(0, 3, 2, 1, 1.0, 1.0, 0.0).is_err());
        assert!(make_model(0, 3, 2, 1, 1.0, 1.0, 1.5).is_err());
        assert!(make_model(0, 3, 2, 1, -1.0, 1.0, 0.5).is_err());
        assert!(make_model(0, 3, 2, 1, 1.0, f64::NAN, 0.5).is_err());
        assert!(make_model(0, 3, 2, 1, f64::INFINITY, f64::INFINITY, 0.5).is_ok());
    }

    #[test]
    fn eta_one_is_always_clean() {
        let m = fig3a(1.0);
        let mut rng = stream(1, Purpose::Verify, 0, 0);
        assert!((0..500).all(|_| sample_pair(&m, &mut rng).clean_flag));
    }

    #[test]
    fn noise_free_clean_pair_maps_exactly() {
        let m = make_model(2, 10, 8, 4, f64::INFINITY, f64::INFINITY, 1.0).unwrap();
        let mut rng = stream(1, Purpose::Verify, 0, 0);
        let p = sample_pair(&m, &mut rng);
        let x = nalgebra::DVector::from_vec(p.x.clone());
        let predicted = &m.u_tilde * (m.u.transpose() * x);
        for (a, b) in predicted.iter().zip(&p.x_tilde) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_covariance_of_x_matches_model() {
        // Population covariance of x is U Uᵀ + γ⁻¹ I.
        let m = fig3a(0.3);
        let n = 100_000;
        let ds = sample_dataset(&m, n, &mut stream(5, Purpose::Verify, 0, 0)).unwrap();
        let mut cov = DMatrix::<f64>::zeros(m.d, m.d);
        for (x, _) in ds.samples().iter() {
            for i in 0..m.d {
                for j in 0..m.d {
                    cov[(i, j)] += x[i] * x[j];
                }
            }
        }
        cov /= n as f64;
        let target = &m.u * m.u.transpose() + DMatrix::identity(m.d, m.d) * m.inv_gamma();
        let err = (cov - target).norm();
        assert!(err <= 5.0 * (m.d as f64 / n as f64).sqrt(), "err = {err}");
    }

    #[test]
    fn clean_count_concentrates() {
        let m = fig3a(0.3);
        let n = 10_000;
        let ds = sample_dataset(&m, n, &mut stream(9, Purpose::Verify, 0, 0)).unwrap();
        let expected = 0.3 * n as f64;
        let band = 4.0 * (n as f64 * 0.3 * 0.7).sqrt();
        assert!((ds.clean_count() as f64 - expected).abs() <= band);
    }

    #[test]
    fn single_pair_dataset_and_zero_rejected() {
        let m = fig3a(0.3);
        let mut rng = stream(0, Purpose::Verify, 0, 0);
        assert_eq!(sample_dataset(&m, 1, &mut rng).unwrap().n(), 1);
        assert!(sample_dataset(&m, 0, &mut rng).is_err());
    }

    #[test]
    fn datasets_are_reproducible() {
        let m = fig3a(0.3);
        let key = StreamKey::new(4, Purpose::Dataset, 2, 1);
        let a = sample_dataset_keyed(&m, 1000, key).unwrap();
        let b = sample_dataset_keyed(&m, 1000, key).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.provenance.model_digest, m.digest());
    }

    #[test]
    fn cross_moment_in_latent_coordinates_is_eta_identity() {
        // E[(Uᵀx)(Ũᵀx̃)ᵀ] = η I_r, checked entrywise within 5 standard errors.
        let eta = 0.05;
        let m = fig3a(eta);
        let n = 200_000;
        let ds = sample_dataset(&m, n, &mut stream(11, Purpose::Verify, 0, 0)).unwrap();
        let r = m.r;
        let mut sum = vec![0.0; r * r];
        let mut sq = vec![0.0; r * r];
        for (x, xt) in ds.samples().iter() {
            let a = m.u.transpose() * nalgebra::DVector::from_column_slice(x);
            let b = m.u_tilde.transpose() * nalgebra::DVector::from_column_slice(xt);
            for i in 0..r {
                for j in 0..r {
                    let v = a[i] * b[j];
                    sum[i * r + j] += v;
                    sq[i * r + j] += v * v;
                }
            }
        }
        for i in 0..r {
            for j in 0..r {
                let mean = sum[i * r + j] / n as f64;
                let var = sq[i * r + j] / n as f64 - mean * mean;
                let se = (var / n as f64).sqrt();
                let target = if i == j { eta } else { 0.0 };
                assert!((mean - target).abs() <= 5.0 * se, "({i},{j}) {mean} vs {target}");
            }
        }
    }
}
