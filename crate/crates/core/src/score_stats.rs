//! The oracle score distribution `D = ηD₁ + (1−η)D₀`: closed-form moments,
//! histograms, Monte-Carlo tail statistics and the conditional
//! cross-covariance `E[x x̃ᵀ | S > θ]`.
//!
//! Every threshold here is on the oracle scale (`A = UŨᵀ`, clean mean `r`).
//! A teacher-scale threshold `θ` corresponds to `θ·ρ_T/η` on this scale.
//!
//! Monte-Carlo draws are split into fixed-size shards, each with its own
//! derived stream, and reduced in shard order; results do not depend on the
//! number of worker threads.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::filtering::{self, ScoreMatrix};
use crate::linalg::Matrix;
use crate::model::{self, Dataset, ModelParams};
use crate::rng::{Purpose, StreamKey};

/// Conditional means are only reported with at least this many hits.
pub const MIN_HITS: usize = 30;
const SHARD: usize = 1 << 15;

/// Mean and variance of the clean (`D₁`) and corrupted (`D₀`) score laws.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ScoreMoments {
    pub mu0: f64,
    pub var0: f64,
    pub mu1: f64,
    pub var1: f64,
}

pub fn theory_moments(model: &ModelParams) -> ScoreMoments {
    let r = model.r as f64;
    let var0 = r * model.noise_inflation();
    ScoreMoments {
        mu0: 0.0,
        var0,
        mu1: r,
        var1: r + var0,
    }
}

/// Equal-width histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    /// Bin `values` into `n_bins` bins over `[lo, hi]`; the top edge is
    /// inclusive.
    pub fn with_range(values: &[f64], n_bins: usize, lo: f64, hi: f64) -> Self {
        let width = (hi - lo) / n_bins as f64;
        let bin_edges = (0..=n_bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0u64; n_bins];
        for &v in values {
            let b = (((v - lo) / width).floor() as isize).clamp(0, n_bins as isize - 1);
            counts[b as usize] += 1;
        }
        Self {
            bin_edges,
            counts,
            total: values.len() as u64,
        }
    }
}

/// Sample mean/variance with standard errors.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct GroupSummary {
    pub count: usize,
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
    /// Plug-in SE of the sample variance, `√((m₄ − s⁴)/n)`.
    pub se_var: f64,
}

impl GroupSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: f64::NAN,
                var: f64::NAN,
                se_mean: f64::NAN,
                se_var: f64::NAN,
            };
        }
        let nf = n as f64;
        let mean = values.iter().sum::<f64>() / nf;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)
        } else {
            0.0
        };
        let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / nf;
        Self {
            count: n,
            mean,
            var,
            se_mean: (var / nf).sqrt(),
            se_var: ((m4 - var * var).max(0.0) / nf).sqrt(),
        }
    }
}

/// Score histogram of a dataset, plus clean/corrupt sub-histograms on the
/// same bins (these read the hidden flags and are diagnostics only).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHistogram {
    pub all: Histogram,
    pub clean: Histogram,
    pub corrupt: Histogram,
    pub clean_summary: GroupSummary,
    pub corrupt_summary: GroupSummary,
}

impl ScoreHistogram {
    /// CSV with columns `bin_left, bin_right, count, subgroup`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["bin_left", "bin_right", "count", "subgroup"])?;
        for (name, h) in [("all", &self.all), ("clean", &self.clean), ("corrupt", &self.corrupt)] {
            for (i, c) in h.counts.iter().enumerate() {
                wtr.write_record([
                    format!("{:.16e}", h.bin_edges[i]),
                    format!("{:.16e}", h.bin_edges[i + 1]),
                    c.to_string(),
                    name.to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn empirical_score_hist(dataset: &Dataset, a: &ScoreMatrix, n_bins: usize) -> Result<ScoreHistogram> {
    if n_bins == 0 {
        return Err(LabError::param("n_bins", "need at least one bin"));
    }
    let s = filtering::scores(dataset.samples(), a)?;
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let flags = dataset.clean_flags();
    let clean: Vec<f64> = s.iter().zip(flags).filter(|(_, &c)| c).map(|(v, _)| *v).collect();
    let corrupt: Vec<f64> = s.iter().zip(flags).filter(|(_, &c)| !c).map(|(v, _)| *v).collect();
    Ok(ScoreHistogram {
        all: Histogram::with_range(&s, n_bins, lo, hi),
        clean: Histogram::with_range(&clean, n_bins, lo, hi),
        corrupt: Histogram::with_range(&corrupt, n_bins, lo, hi),
        clean_summary: GroupSummary::of(&clean),
        corrupt_summary: GroupSummary::of(&corrupt),
    })
}

/// Which score law to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreClass {
    Corrupt,
    Clean,
    Mixture,
}

impl ScoreClass {
    fn forced(self) -> Option<bool> {
        match self {
            ScoreClass::Corrupt => Some(false),
            ScoreClass::Clean => Some(true),
            ScoreClass::Mixture => None,
        }
    }

    fn point(self) -> u64 {
        match self {
            ScoreClass::Corrupt => 0,
            ScoreClass::Clean => 1,
            ScoreClass::Mixture => 2,
        }
    }
}

fn shard_sizes(n: usize) -> Vec<usize> {
    (0..n.div_ceil(SHARD)).map(|i| SHARD.min(n - i * SHARD)).collect()
}

/// `n` oracle scores from the given law, independent of thread count.
pub fn draw_scores(model: &ModelParams, class: ScoreClass, n: usize, seed: u64) -> Vec<f64> {
    let a = model.oracle_matrix();
    let key = StreamKey::new(seed, Purpose::MonteCarlo, class.point(), 0);
    let shards: Vec<Vec<f64>> = shard_sizes(n)
        .into_par_iter()
        .enumerate()
        .map(|(i, len)| {
            let mut rng = key.child(i as u64).rng();
            let mut out = Vec::with_capacity(len);
            model::for_each_pair(model, len, class.forced(), &mut rng, |x, xt, _| {
                out.push(filtering::score(x, xt, &a))
            });
            out
        })
        .collect();
    shards.concat()
}

/// Upper-tail probability `P(Z > θ)` and conditional mean `E[Z | Z > θ]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Tail {
    pub p: f64,
    pub se_p: f64,
    /// `None` when fewer than [`MIN_HITS`] draws exceed the threshold.
    pub e: Option<f64>,
    pub se_e: Option<f64>,
    pub hits: usize,
}

impl Tail {
    pub fn of(scores: &[f64], theta: f64) -> Self {
        let n = scores.len() as f64;
        let above: Vec<f64> = scores.iter().copied().filter(|&s| s > theta).collect();
        let hits = above.len();
        let p = hits as f64 / n;
        let (e, se_e) = if hits >= MIN_HITS {
            let g = GroupSummary::of(&above);
            (Some(g.mean), Some(g.se_mean))
        } else {
            (None, None)
        };
        Self {
            p,
            se_p: (p * (1.0 - p) / n).sqrt(),
            e,
            se_e,
            hits,
        }
    }
}

/// Tail statistics of `D₀`, `D₁` and the mixture at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TailStats {
    pub theta: f64,
    pub eta: f64,
    pub d0: Tail,
    pub d1: Tail,
    pub mix: Tail,
    /// Set when any conditional mean was withheld for lack of hits.
    pub low_sample: bool,
}

impl TailStats {
    pub fn p0(&self) -> f64 {
        self.d0.p
    }
    pub fn p1(&self) -> f64 {
        self.d1.p
    }
    pub fn p_mix(&self) -> f64 {
        self.mix.p
    }

    /// `P_mix − (ηP₁ + (1−η)P₀)` and its combined standard error.
    pub fn mixture_gap(&self) -> (f64, f64) {
        let eta = self.eta;
        let gap = self.mix.p - (eta * self.d1.p + (1.0 - eta) * self.d0.p);
        let se = (self.mix.se_p.powi(2) + (eta * self.d1.se_p).powi(2) + ((1.0 - eta) * self.d0.se_p).powi(2)).sqrt();
        (gap, se)
    }
}

/// Independent draws from `D₀`, `D₁` and the mixture, reusable across
/// thresholds.
#[derive(Debug, Clone)]
pub struct ScoreDraws {
    pub eta: f64,
    pub d0: Vec<f64>,
    pub d1: Vec<f64>,
    pub mix: Vec<f64>,
}

impl ScoreDraws {
    pub fn new(model: &ModelParams, mc_n: usize, seed: u64) -> Result<Self> {
        if mc_n < 1000 {
            return Err(LabError::param("mc_n", format!("need at least 1000 draws, got {mc_n}")));
        }
        Ok(Self {
            eta: model.eta,
            d0: draw_scores(model, ScoreClass::Corrupt, mc_n, seed),
            d1: draw_scores(model, ScoreClass::Clean, mc_n, seed),
            mix: draw_scores(model, ScoreClass::Mixture, mc_n, seed),
        })
    }

    pub fn tail(&self, theta: f64) -> TailStats {
        let d0 = Tail::of(&self.d0, theta);
        let d1 = Tail::of(&self.d1, theta);
        let mix = Tail::of(&self.mix, theta);
        TailStats {
            theta,
            eta: self.eta,
            low_sample: d0.e.is_none() || d1.e.is_none() || mix.e.is_none(),
            d0,
            d1,
            mix,
        }
    }
}

pub fn estimate_tail_stats(model: &ModelParams, theta: f64, mc_n: usize, seed: u64) -> Result<TailStats> {
    Ok(ScoreDraws::new(model, mc_n, seed)?.tail(theta))
}

/// Lower bounds on `(f₁(θ), f₀(θ))` where `f_c(θ) = E_c(θ)/r`, known at
/// `θ = 0` and `θ = r/2`.
pub fn f_lower_bounds(model: &ModelParams, theta: f64) -> Option<(f64, f64)> {
    let r = model.r as f64;
    if theta == 0.0 {
        Some((1.0, 2.0 / (std::f64::consts::PI * r) * model.noise_inflation().sqrt()))
    } else if theta == r / 2.0 {
        Some((1.0, 0.5))
    } else {
        None
    }
}

/// Monte-Carlo estimate of `E[x x̃ᵀ | S(x, x̃; UŨᵀ) > θ]` and how well it
/// matches the predicted `c·UŨᵀ` structure.
#[derive(Debug, Clone, PartialEq)]
pub struct CondCovReport {
    pub theta: f64,
    pub estimate: Matrix,
    pub draws: usize,
    pub hits: usize,
    /// `UᵀÊŨ` (r × r).
    pub aligned_block: Matrix,
    /// `‖Ê‖²_F − ‖UᵀÊŨ‖²_F`: squared mass outside the `U·Ũᵀ` block.
    pub off_mass: f64,
    /// Expected `off_mass` from Monte-Carlo noise alone (sum of squared
    /// standard errors of the off-block entries).
    pub off_mass_noise: f64,
    pub aligned_fraction: f64,
    /// `max |off-diagonal of UᵀÊŨ| / mean diagonal`.
    pub structure_ratio: f64,
    /// `tr(UᵀÊŨ)/r`, i.e. the conditional mean score over `r`.
    pub scalar: f64,
    pub scalar_se: f64,
    /// `η·f₁ + (1−η)·f₀` using the lower bounds, when known at this `θ`.
    pub scalar_lower_bound: Option<f64>,
    pub low_sample: bool,
}

#[derive(Clone)]
struct CondAcc {
    sum: Matrix,
    hits: usize,
    score_sum: f64,
    score_sq: f64,
    off_sq: f64,
}

impl CondAcc {
    fn new(d: usize, dt: usize) -> Self {
        Self {
            sum: Matrix::zeros(d, dt),
            hits: 0,
            score_sum: 0.0,
            score_sq: 0.0,
            off_sq: 0.0,
        }
    }

    fn merge(mut self, o: CondAcc) -> Self {
        self.sum += o.sum;
        self.hits += o.hits;
        self.score_sum += o.score_sum;
        self.score_sq += o.score_sq;
        self.off_sq += o.off_sq;
        self
    }
}

pub fn conditional_cross_cov(model: &ModelParams, theta: f64, mc_n: usize, seed: u64) -> Result<CondCovReport> {
    if mc_n < 1000 {
        return Err(LabError::param("mc_n", format!("need at least 1000 draws, got {mc_n}")));
    }
    let (d, dt, r) = (model.d, model.d_tilde, model.r);
    let key = StreamKey::new(seed, Purpose::MonteCarlo, 3, 0);
    let shards: Vec<CondAcc> = shard_sizes(mc_n)
        .into_par_iter()
        .enumerate()
        .map(|(i, len)| {
            let mut rng = key.child(i as u64).rng();
            let mut acc = CondAcc::new(d, dt);
            let mut zx = vec![0.0; r];
            let mut zt = vec![0.0; r];
            model::for_each_pair(model, len, None, &mut rng, |x, xt, _| {
                for k in 0..r {
                    zx[k] = model.u.column(k).iter().zip(x).map(|(a, b)| a * b).sum();
                    zt[k] = model.u_tilde.column(k).iter().zip(xt).map(|(a, b)| a * b).sum();
                }
                let s: f64 = zx.iter().zip(&zt).map(|(a, b)| a * b).sum();
                if s > theta {
                    acc.hits += 1;
                    acc.score_sum += s;
                    acc.score_sq += s * s;
                    for (j, b) in xt.iter().enumerate() {
                        let mut col = acc.sum.column_mut(j);
                        for (i, a) in x.iter().enumerate() {
                            col[i] += a * b;
                        }
                    }
                    let nx: f64 = x.iter().map(|v| v * v).sum();
                    let nt: f64 = xt.iter().map(|v| v * v).sum();
                    let px: f64 = zx.iter().map(|v| v * v).sum();
                    let pt: f64 = zt.iter().map(|v| v * v).sum();
                    acc.off_sq += nx * nt - px * pt;
                }
            });
            acc
        })
        .collect();
    let acc = shards.into_iter().fold(CondAcc::new(d, dt), CondAcc::merge);
    let h = acc.hits.max(1) as f64;
    let estimate = &acc.sum / h;
    let block = model.u.transpose() * &estimate * &model.u_tilde;
    let total = estimate.norm_squared();
    let aligned = block.norm_squared();
    let off_mass = (total - aligned).max(0.0);
    let off_mass_noise = (acc.off_sq / h - off_mass).max(0.0) / h;
    let diag_mean = block.diagonal().mean();
    let mut off_max: f64 = 0.0;
    for i in 0..r {
        for j in 0..r {
            if i != j {
                off_max = off_max.max(block[(i, j)].abs());
            }
        }
    }
    let mean_score = acc.score_sum / h;
    let var_score = (acc.score_sq / h - mean_score * mean_score).max(0.0) * h / (h - 1.0).max(1.0);
    let eta = model.eta;
    Ok(CondCovReport {
        theta,
        draws: mc_n,
        hits: acc.hits,
        aligned_fraction: if total > 0.0 { aligned / total } else { f64::NAN },
        structure_ratio: off_max / diag_mean,
        scalar: block.trace() / r as f64,
        scalar_se: (var_score / h).sqrt() / r as f64,
        scalar_lower_bound: f_lower_bounds(model, theta).map(|(f1, f0)| eta * f1 + (1.0 - eta) * f0),
        low_sample: acc.hits < MIN_HITS,
        estimate,
        aligned_block: block,
        off_mass,
        off_mass_noise,
    })
}

/// Clean-score tail frequency `P(|S − r| > t)` against the Hanson–Wright
/// shape `exp(−min(2t²/σ², √2·t/σ))` with `σ² = r(1 + v)` the clean-score
/// variance and `v` the noise inflation. The absolute constant is
/// unspecified, so only the ratio empirical/envelope is reported.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EnvelopeRow {
    pub t: f64,
    pub empirical: f64,
    pub envelope: f64,
    pub ratio: f64,
}

pub fn hanson_wright_envelope(model: &ModelParams, t: f64) -> f64 {
    let scale = model.r as f64 * (1.0 + model.noise_inflation());
    (-(2.0 * t * t / scale).min(2f64.sqrt() * t / scale.sqrt())).exp()
}

pub fn clean_tail_vs_envelope(model: &ModelParams, ts: &[f64], mc_n: usize, seed: u64) -> Vec<EnvelopeRow> {
    let clean = draw_scores(model, ScoreClass::Clean, mc_n, seed);
    let r = model.r as f64;
    ts.iter()
        .map(|&t| {
            let empirical = clean.iter().filter(|&&s| (s - r).abs() > t).count() as f64 / mc_n as f64;
            let envelope = hanson_wright_envelope(model, t);
            EnvelopeRow {
                t,
                empirical,
                envelope,
                ratio: empirical / envelope,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_model, sample_dataset};
    use crate::rng::stream;

    #[test]
    fn moments_match_closed_forms() {
        let m = make_model(0, 20, 20, 16, 1e4, 1e4, 0.5).unwrap();
        let t = theory_moments(&m);
        assert_eq!(t.mu1, 16.0);
        assert!((t.var0 - 16.0 * 1.0001f64.powi(2)).abs() < 1e-12);
        assert!((t.var1 - 16.0 - t.var0).abs() < 1e-12);
        let inf = make_model(0, 5, 5, 3, f64::INFINITY, f64::INFINITY, 0.5).unwrap();
        let t = theory_moments(&inf);
        assert_eq!((t.var0, t.var1), (3.0, 6.0));
        let mixed = make_model(0, 2, 2, 1, 1.0, f64::INFINITY, 0.5).unwrap();
        assert_eq!(theory_moments(&mixed).var0, 2.0);
    }

    #[test]
    fn variance_ordering_holds() {
        for (g, gt) in [(0.1, 0.2), (1.0, f64::INFINITY), (1e4, 1e4), (3.0, 0.5)] {
            let t = theory_moments(&make_model(1, 6, 6, 3, g, gt, 0.5).unwrap());
            assert!(t.var0 <= t.var1 && t.var1 <= 2.0 * t.var0);
        }
    }

    #[test]
    fn histogram_degenerate_cases() {
        let m = make_model(2, 6, 5, 2, 10.0, 10.0, 0.5).unwrap();
        let one = sample_dataset(&m, 1, &mut stream(2, Purpose::Dataset, 0, 0)).unwrap();
        let h = empirical_score_hist(&one, &ScoreMatrix::oracle(&m), 10).unwrap();
        assert_eq!(h.all.counts.iter().filter(|&&c| c > 0).count(), 1);
        let many = sample_dataset(&m, 100, &mut stream(2, Purpose::Dataset, 0, 1)).unwrap();
        let zero = ScoreMatrix::new(Matrix::zeros(6, 5)).unwrap();
        let h = empirical_score_hist(&many, &zero, 7).unwrap();
        let bin = h.all.counts.iter().position(|&c| c > 0).unwrap();
        assert_eq!(h.all.counts[bin], 100);
        assert!(h.all.bin_edges[bin] <= 0.0 && 0.0 <= h.all.bin_edges[bin + 1]);
        assert_eq!(h.clean.total + h.corrupt.total, 100);
    }

    #[test]
    fn tail_at_minus_infinity_is_unconditional() {
        let m = make_model(3, 8, 8, 4, 100.0, 100.0, 0.4).unwrap();
        let t = estimate_tail_stats(&m, f64::NEG_INFINITY, 200_000, 3).unwrap();
        assert_eq!((t.p0(), t.p1(), t.p_mix()), (1.0, 1.0, 1.0));
        let (e0, se0) = (t.d0.e.unwrap(), t.d0.se_e.unwrap());
        let (e1, se1) = (t.d1.e.unwrap(), t.d1.se_e.unwrap());
        assert!(e0.abs() < 4.0 * se0);
        assert!((e1 - 4.0).abs() < 4.0 * se1);
    }

    #[test]
    fn corrupted_law_is_symmetric_about_zero() {
        let m = make_model(4, 10, 8, 4, 1e4, 1e4, 0.3).unwrap();
        let t = estimate_tail_stats(&m, 0.0, 200_000, 4).unwrap();
        assert!((t.p0() - 0.5).abs() < 4.0 * t.d0.se_p);
        let bound = f_lower_bounds(&m, 0.0).unwrap().1;
        assert!(t.d0.e.unwrap() / 4.0 >= bound - 4.0 * t.d0.se_e.unwrap() / 4.0);
    }

    #[test]
    fn low_hit_counts_are_flagged() {
        let m = make_model(5, 6, 6, 2, 10.0, 10.0, 0.5).unwrap();
        let t = estimate_tail_stats(&m, 1e6, 2000, 5).unwrap();
        assert!(t.low_sample);
        assert!(t.d1.e.is_none());
        assert!(estimate_tail_stats(&m, 0.0, 999, 5).is_err());
    }

    #[test]
    fn noise_free_clean_conditional_block_is_identity() {
        let m = make_model(6, 6, 5, 3, f64::INFINITY, f64::INFINITY, 1.0).unwrap();
        let rep = conditional_cross_cov(&m, 0.0, 200_000, 6).unwrap();
        assert_eq!(rep.hits, 200_000);
        let se = 4.0 * (2.0f64 / rep.hits as f64).sqrt();
        assert!((&rep.aligned_block - Matrix::identity(3, 3)).amax() < 4.0 * se);
        assert!(rep.off_mass < 1e-20);
    }

    #[test]
    fn unconditional_cross_cov_is_eta_u_ut() {
        let m = make_model(7, 6, 5, 2, 100.0, 100.0, 0.35).unwrap();
        let rep = conditional_cross_cov(&m, f64::NEG_INFINITY, 400_000, 7).unwrap();
        assert!((rep.scalar - 0.35).abs() < 4.0 * rep.scalar_se);
        assert!((&rep.estimate - m.oracle_matrix() * 0.35).amax() < 0.02);
    }

    #[test]
    fn shard_layout_is_thread_independent() {
        let m = make_model(8, 6, 5, 2, 10.0, 10.0, 0.5).unwrap();
        let a = draw_scores(&m, ScoreClass::Mixture, 70_000, 1);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| draw_scores(&m, ScoreClass::Mixture, 70_000, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn histogram_csv_has_header_and_rows() {
        let m = make_model(9, 6, 5, 2, 10.0, 10.0, 0.5).unwrap();
        let ds = sample_dataset(&m, 50, &mut stream(9, Purpose::Dataset, 0, 0)).unwrap();
        let h = empirical_score_hist(&ds, &ScoreMatrix::oracle(&m), 4).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin_left,bin_right,count,subgroup\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 4);
    }
}
