//! Seeded, parallel experiment harness: η sweeps over the three pipelines,
//! log-log slope fits with regime splitting, the retention-fraction table,
//! the lower-bound probe and the metric comparison.
//!
//! Every dataset is drawn from a stream keyed by `(master_seed, η, seed, n)`
//! and every task is independent, so results are identical for any number
//! of worker threads.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::filtering::{self, ThetaSpec};
use crate::linalg::CovMode;
use crate::metrics::{self, Metric, MetricReport};
use crate::model::{self, make_model, ModelParams};
use crate::rng::{Purpose, StreamKey};

/// Training pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NoFilter,
    OracleFilter,
    TeacherFilter,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::NoFilter => "no_filter",
            Method::OracleFilter => "oracle_filter",
            Method::TeacherFilter => "teacher_filter",
        }
    }
}

/// Which threshold list a filtering method uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaPolicy {
    FixedValue,
    RetentionFraction,
    /// Both `theta_values` and `retention_fractions`.
    Both,
}

/// Validated experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub d: usize,
    pub d_tilde: usize,
    pub r: usize,
    pub gamma: f64,
    pub gamma_tilde: f64,
    /// Samples per trial (the teacher pipeline splits these in half).
    pub n: usize,
    /// Sorted descending, distinct, each in `(0, 1]`.
    pub eta_grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub theta_policy: ThetaPolicy,
    pub theta_values: Vec<f64>,
    pub retention_fractions: Vec<f64>,
    pub rho: f64,
    pub rho_teacher: f64,
    pub seeds: Vec<u64>,
    pub metric: Metric,
    pub cov_mode: CovMode,
    /// Seeds the ground-truth factors and every dataset stream.
    pub master_seed: u64,
    /// When false, `wall_ms` is recorded as 0 so outputs are byte-stable.
    pub record_timing: bool,
    /// Histogram bins for the score-histogram command.
    pub n_bins: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults around the `d=10, d̃=8, r=4, γ=γ̃=10⁴` instance.
    pub fn desk(n: usize, eta_grid: Vec<f64>, methods: Vec<Method>) -> Self {
        Self {
            d: 10,
            d_tilde: 8,
            r: 4,
            gamma: 1e4,
            gamma_tilde: 1e4,
            n,
            eta_grid,
            methods,
            theta_policy: ThetaPolicy::FixedValue,
            theta_values: vec![0.0],
            retention_fractions: Vec::new(),
            rho: 1.0,
            rho_teacher: 1.0,
            seeds: (0..20).collect(),
            metric: Metric::Ssd,
            cov_mode: CovMode::Centered,
            master_seed: 0,
            record_timing: true,
            n_bins: 60,
        }
    }

    /// Check every invariant, sorting the η grid descending.
    pub fn validate(mut self) -> Result<Self> {
        make_model(0, self.d, self.d_tilde, self.r, self.gamma, self.gamma_tilde, 1.0)?;
        if self.eta_grid.is_empty() {
            return Err(LabError::param("eta_grid", "must not be empty"));
        }
        for &e in &self.eta_grid {
            model::check_eta(e)?;
        }
        self.eta_grid.sort_by(|a, b| b.total_cmp(a));
        if self.eta_grid.windows(2).any(|w| w[0] == w[1]) {
            return Err(LabError::param("eta_grid", "values must be distinct"));
        }
        if self.n < 2 {
            return Err(LabError::param("n", format!("need n >= 2, got {}", self.n)));
        }
        if self.methods.is_empty() {
            return Err(LabError::param("methods", "must not be empty"));
        }
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        if m.len() != self.methods.len() {
            return Err(LabError::param("methods", "duplicate method"));
        }
        if self.seeds.is_empty() {
            return Err(LabError::param("seeds", "must not be empty"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(LabError::param("seeds", "seeds must be distinct"));
        }
        for (name, v) in [("rho", self.rho), ("rho_teacher", self.rho_teacher)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LabError::param(name, format!("must be positive and finite, got {v}")));
            }
        }
        if self.theta_values.iter().any(|t| t.is_nan()) {
            return Err(LabError::param("theta_values", "NaN threshold"));
        }
        if let Some(f) = self.retention_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(LabError::param("retention_fractions", format!("must lie in (0, 1], got {f}")));
        }
        let filtering = self.methods.iter().any(|m| *m != Method::NoFilter);
        let (need_fixed, need_frac) = match self.theta_policy {
            ThetaPolicy::FixedValue => (true, false),
            ThetaPolicy::RetentionFraction => (false, true),
            ThetaPolicy::Both => (true, true),
        };
        if filtering && need_fixed && self.theta_values.is_empty() {
            return Err(LabError::param("theta_values", "required by theta_policy"));
        }
        if filtering && need_frac && self.retention_fractions.is_empty() {
            return Err(LabError::param("retention_fractions", "required by theta_policy"));
        }
        if self.n_bins == 0 {
            return Err(LabError::param("n_bins", "must be positive"));
        }
        Ok(self)
    }

    /// The ground-truth instance at clean fraction `eta`.
    pub fn model(&self, eta: f64) -> Result<ModelParams> {
        make_model(self.master_seed, self.d, self.d_tilde, self.r, self.gamma, self.gamma_tilde, eta)
    }

    /// Thresholds applied by the filtering methods.
    pub fn thetas(&self) -> Vec<ThetaSpec> {
        let fixed = self.theta_values.iter().map(|&t| ThetaSpec::Fixed(t));
        let frac = self.retention_fractions.iter().map(|&f| ThetaSpec::Retention(f));
        match self.theta_policy {
            ThetaPolicy::FixedValue => fixed.collect(),
            ThetaPolicy::RetentionFraction => frac.collect(),
            ThetaPolicy::Both => fixed.chain(frac).collect(),
        }
    }

    /// Sample-size guard `n ≥ (10/η²)·max(d, d̃)·(1+γ⁻¹)(1+γ̃⁻¹)`.
    pub fn is_valid_point(&self, eta: f64) -> bool {
        let inv = |g: f64| if g.is_infinite() { 0.0 } else { 1.0 / g };
        let need = 10.0 / (eta * eta)
            * self.d.max(self.d_tilde) as f64
            * (1.0 + inv(self.gamma))
            * (1.0 + inv(self.gamma_tilde));
        self.n as f64 >= need
    }
}

/// Validity status of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Valid,
    /// Below the sample-size guard; kept but excluded from slope fits.
    OutOfRegime,
    /// The pipeline failed (e.g. filtering starvation).
    Failed,
}

impl Validity {
    pub fn name(self) -> &'static str {
        match self {
            Validity::Valid => "valid",
            Validity::OutOfRegime => "out_of_regime",
            Validity::Failed => "failed",
        }
    }
}

/// One (η, method, θ, seed) outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub eta: f64,
    pub method: Method,
    pub theta: ThetaSpec,
    pub seed: u64,
    /// All four metrics; `None` on failure.
    pub report: Option<MetricReport>,
    pub n_sel: usize,
    pub wall_ms: u64,
    pub validity: Validity,
    pub failure: Option<String>,
}

impl Record {
    pub fn theta_desc(&self) -> String {
        match self.method {
            Method::NoFilter => "none".into(),
            _ => self.theta.descriptor(),
        }
    }

    pub fn err(&self, metric: Metric) -> Option<f64> {
        self.report.map(|r| r.get(metric))
    }
}

/// Least-squares fit of `log₁₀ err` on `log₁₀ η`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// `None` when the response is constant.
    pub r_squared: Option<f64>,
    pub point_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    All,
    LargeEta,
    SmallEta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub method: Method,
    pub theta_desc: String,
    pub regime: Regime,
    #[serde(flatten)]
    pub fit: LogLogFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub metric: Metric,
    pub records: Vec<Record>,
    pub slope_fits: Vec<SlopeFit>,
}

/// Per-η summary of one (method, θ) series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub eta: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub count: usize,
    pub valid: bool,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

impl SweepResult {
    /// Distinct `(method, theta_desc)` series in first-appearance order.
    pub fn series_keys(&self) -> Vec<(Method, String)> {
        let mut keys: Vec<(Method, String)> = Vec::new();
        for r in &self.records {
            let k = (r.method, r.theta_desc());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys
    }

    /// Median and quartiles over seeds per η, η descending; failed records
    /// are skipped.
    pub fn series(&self, method: Method, theta_desc: &str) -> Vec<SeriesPoint> {
        let mut etas: Vec<f64> = Vec::new();
        for r in &self.records {
            if r.method == method && r.theta_desc() == theta_desc && !etas.contains(&r.eta) {
                etas.push(r.eta);
            }
        }
        etas.sort_by(|a, b| b.total_cmp(a));
        etas.into_iter()
            .filter_map(|eta| {
                let group: Vec<&Record> = self
                    .records
                    .iter()
                    .filter(|r| r.method == method && r.theta_desc() == theta_desc && r.eta == eta)
                    .collect();
                let mut errs: Vec<f64> = group.iter().filter_map(|r| r.err(self.metric)).collect();
                if errs.is_empty() {
                    return None;
                }
                errs.sort_by(f64::total_cmp);
                Some(SeriesPoint {
                    eta,
                    median: quantile(&errs, 0.5),
                    q25: quantile(&errs, 0.25),
                    q75: quantile(&errs, 0.75),
                    count: errs.len(),
                    valid: group.iter().all(|r| r.validity != Validity::OutOfRegime),
                })
            })
            .collect()
    }

    /// Per-η best (lowest median) among the given thresholds of `method`.
    pub fn tuned_series(&self, method: Method, theta_descs: &[String]) -> Vec<(SeriesPoint, String)> {
        let all: Vec<(String, Vec<SeriesPoint>)> = theta_descs
            .iter()
            .map(|d| (d.clone(), self.series(method, d)))
            .collect();
        let mut etas: Vec<f64> = all.iter().flat_map(|(_, s)| s.iter().map(|p| p.eta)).collect();
        etas.sort_by(|a, b| b.total_cmp(a));
        etas.dedup();
        etas.into_iter()
            .filter_map(|eta| {
                all.iter()
                    .filter_map(|(d, s)| s.iter().find(|p| p.eta == eta).map(|p| (*p, d.clone())))
                    .min_by(|a, b| a.0.median.total_cmp(&b.0.median))
            })
            .collect()
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.validity == Validity::Failed).count()
    }

    pub fn out_of_regime(&self) -> usize {
        self.records.iter().filter(|r| r.validity == Validity::OutOfRegime).count()
    }

    /// The same records re-scored under another metric.
    pub fn with_metric(&self, metric: Metric, r: usize) -> SweepResult {
        let mut out = SweepResult {
            metric,
            records: self.records.clone(),
            slope_fits: Vec::new(),
        };
        out.slope_fits = out.fit_slopes(r);
        out
    }

    /// Fits over valid medians for every series and regime with ≥ 3 points.
    pub fn fit_slopes(&self, r: usize) -> Vec<SlopeFit> {
        let mut fits = Vec::new();
        for (method, desc) in self.series_keys() {
            let pts: Vec<(f64, f64)> = self
                .series(method, &desc)
                .iter()
                .filter(|p| p.valid)
                .map(|p| (p.eta, p.median))
                .collect();
            let grid: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let regimes = split_regimes(&grid, r);
            for (regime, etas) in [
                (Regime::All, grid.clone()),
                (Regime::LargeEta, regimes.large),
                (Regime::SmallEta, regimes.small),
            ] {
                let sub: Vec<(f64, f64)> = pts.iter().copied().filter(|p| etas.contains(&p.0)).collect();
                if sub.len() < 3 {
                    continue;
                }
                if let Ok(fit) = fit_loglog_slope(&sub) {
                    fits.push(SlopeFit {
                        method,
                        theta_desc: desc.clone(),
                        regime,
                        fit,
                    });
                }
            }
        }
        fits
    }
}

/// OLS of `log₁₀ err` on `log₁₀ η`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(LabError::param("points", format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|(e, v)| !(*e > 0.0 && *v > 0.0 && e.is_finite() && v.is_finite())) {
        return Err(LabError::param("points", format!("values must be positive and finite, got {p:?}")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.log10()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(LabError::param("points", "η values must not all coincide"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 1e-24 {
        let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        Some(1.0 - sse / syy)
    } else {
        None
    };
    Ok(LogLogFit {
        slope,
        intercept,
        r_squared,
        point_count: points.len(),
    })
}

/// Partition of an η grid around the regime boundary `1/r²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regimes {
    pub boundary: f64,
    pub large: Vec<f64>,
    pub small: Vec<f64>,
    /// Within a factor 2 of the boundary; in neither regime.
    pub buffer: Vec<f64>,
}

/// Split at `η = 1/r²` with a factor-2 transition buffer. For `r = 1` the
/// boundary is 1 and the whole grid is small-regime.
pub fn split_regimes(eta_grid: &[f64], r: usize) -> Regimes {
    let boundary = 1.0 / (r * r) as f64;
    let mut out = Regimes {
        boundary,
        large: Vec::new(),
        small: Vec::new(),
        buffer: Vec::new(),
    };
    for &e in eta_grid {
        if boundary >= 1.0 || e < boundary / 2.0 {
            out.small.push(e);
        } else if e > boundary * 2.0 {
            out.large.push(e);
        } else {
            out.buffer.push(e);
        }
    }
    out
}

/// Stream for the dataset of one trial.
pub fn dataset_key(master: u64, eta: f64, seed: u64, n: usize) -> StreamKey {
    StreamKey::new(master, Purpose::Dataset, eta.to_bits(), seed).child(n as u64)
}

fn failure_record(eta: f64, method: Method, theta: ThetaSpec, seed: u64, e: &LabError) -> Record {
    let n_sel = match e {
        LabError::FilterStarvation { n_sel, .. } => *n_sel,
        _ => 0,
    };
    Record {
        eta,
        method,
        theta,
        seed,
        report: None,
        n_sel,
        wall_ms: 0,
        validity: Validity::Failed,
        failure: Some(e.to_string()),
    }
}

/// All pipelines of `cfg` on one dataset.
fn run_trial(cfg: &ExperimentConfig, model: &ModelParams, eta: f64, seed: u64, n: usize) -> Result<Vec<Record>> {
    let ds = model::sample_dataset_keyed(model, n, dataset_key(cfg.master_seed, eta, seed, n))?;
    let samples = ds.samples();
    let valid = if cfg.is_valid_point(eta) && n >= cfg.n {
        Validity::Valid
    } else {
        Validity::OutOfRegime
    };
    let timed = |start: Instant| if cfg.record_timing { start.elapsed().as_millis() as u64 } else { 0 };
    let mut out = Vec::new();
    let thetas = cfg.thetas();
    let (r, rho, mode) = (cfg.r, cfg.rho, cfg.cov_mode);
    for &method in &cfg.methods {
        match method {
            Method::NoFilter => {
                let start = Instant::now();
                let rec = filtering::run_no_filter(samples, r, rho, mode).and_then(|enc| metrics::report(&enc, model));
                out.push(match rec {
                    Ok(rep) => Record {
                        eta,
                        method,
                        theta: ThetaSpec::NONE,
                        seed,
                        report: Some(rep),
                        n_sel: n,
                        wall_ms: timed(start),
                        validity: valid,
                        failure: None,
                    },
                    Err(e) => failure_record(eta, method, ThetaSpec::NONE, seed, &e),
                });
            }
            Method::OracleFilter => {
                let oracle_scores = filtering::scores(samples, &filtering::ScoreMatrix::oracle(model))?;
                for &theta in &thetas {
                    let start = Instant::now();
                    let res = filtering::apply_theta(&oracle_scores, theta).and_then(|o| {
                        let enc = if o.n_sel == n {
                            filtering::run_no_filter(samples, r, rho, mode)
                        } else if o.n_sel < r + 1 {
                            Err(LabError::FilterStarvation {
                                n_sel: o.n_sel,
                                required: r + 1,
                            })
                        } else {
                            filtering::run_no_filter(&samples.select(&o.selected_indices), r, rho, mode)
                        }?;
                        Ok((metrics::report(&enc, model)?, o.n_sel))
                    });
                    out.push(match res {
                        Ok((rep, n_sel)) => Record {
                            eta,
                            method,
                            theta,
                            seed,
                            report: Some(rep),
                            n_sel,
                            wall_ms: timed(start),
                            validity: valid,
                            failure: None,
                        },
                        Err(e) => failure_record(eta, method, theta, seed, &e),
                    });
                }
            }
            Method::TeacherFilter => {
                let start = Instant::now();
                let stage = filtering::teacher_stage(samples, r, cfg.rho_teacher, mode);
                let stage_ms = timed(start);
                for &theta in &thetas {
                    let start = Instant::now();
                    let res = stage
                        .as_ref()
                        .map_err(|e| LabError::Config(e.to_string()))
                        .and_then(|s| s.student(theta, r, rho, mode))
                        .and_then(|run| Ok((metrics::report(&run.student, model)?, run.outcome.n_sel)));
                    out.push(match res {
                        Ok((rep, n_sel)) => Record {
                            eta,
                            method,
                            theta,
                            seed,
                            report: Some(rep),
                            n_sel,
                            wall_ms: stage_ms + timed(start),
                            validity: valid,
                            failure: None,
                        },
                        Err(e) => failure_record(eta, method, theta, seed, &e),
                    });
                }
            }
        }
    }
    Ok(out)
}

fn sweep_records(cfg: &ExperimentConfig, n: usize) -> Result<Vec<Record>> {
    let tasks: Vec<(f64, u64)> = cfg
        .eta_grid
        .iter()
        .flat_map(|&e| cfg.seeds.iter().map(move |&s| (e, s)))
        .collect();
    let base = cfg.model(1.0)?;
    let chunks: Vec<Result<Vec<Record>>> = tasks
        .par_iter()
        .map(|&(eta, seed)| run_trial(cfg, &base.with_eta(eta)?, eta, seed, n))
        .collect();
    let mut records = Vec::with_capacity(tasks.len() * cfg.methods.len());
    for c in chunks {
        records.extend(c?);
    }
    Ok(records)
}

/// Every `(η, method, θ, seed)` of the config, with slope fits.
pub fn run_eta_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let mut res = SweepResult {
        metric: cfg.metric,
        records: sweep_records(cfg, cfg.n)?,
        slope_fits: Vec::new(),
    };
    res.slope_fits = res.fit_slopes(cfg.r);
    Ok(res)
}

/// The sweep evaluated under all four metrics.
pub fn run_metric_comparison(cfg: &ExperimentConfig) -> Result<Vec<SweepResult>> {
    let base = run_eta_sweep(cfg)?;
    Ok(Metric::ALL.iter().map(|&m| base.with_metric(m, cfg.r)).collect())
}

/// One row of the retention table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub fraction: f64,
    pub mean_err: f64,
    /// Sample standard deviation over repeats.
    pub std_err: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub eta: f64,
    pub rows: Vec<ThresholdRow>,
    pub records: SweepResult,
}

/// Teacher filtering at each retention fraction, mean ± σ over seeds.
pub fn run_threshold_sweep(cfg: &ExperimentConfig) -> Result<ThresholdTable> {
    if cfg.eta_grid.len() != 1 {
        return Err(LabError::param("eta_grid", "threshold sweep needs exactly one η"));
    }
    if cfg.retention_fractions.is_empty() {
        return Err(LabError::param("retention_fractions", "must not be empty"));
    }
    let sweep_cfg = ExperimentConfig {
        methods: vec![Method::TeacherFilter],
        theta_policy: ThetaPolicy::RetentionFraction,
        ..cfg.clone()
    };
    let records = run_eta_sweep(&sweep_cfg)?;
    let rows = cfg
        .retention_fractions
        .iter()
        .map(|&f| {
            let desc = ThetaSpec::Retention(f).descriptor();
            let group: Vec<&Record> = records.records.iter().filter(|r| r.theta_desc() == desc).collect();
            let errs: Vec<f64> = group.iter().filter_map(|r| r.err(cfg.metric)).collect();
            let k = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / k;
            let var = if errs.len() > 1 {
                errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                f64::NAN
            };
            ThresholdRow {
                fraction: f,
                mean_err: mean,
                std_err: var.sqrt(),
                n_ok: errs.len(),
                n_failed: group.len() - errs.len(),
            }
        })
        .collect();
    Ok(ThresholdTable {
        eta: cfg.eta_grid[0],
        rows,
        records,
    })
}

/// Outcome of the hard-instance probe.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerBoundResult {
    pub sweep: SweepResult,
    pub doubled: SweepResult,
    /// Fit of medians over all valid η.
    pub fit: Option<LogLogFit>,
    /// Median over η of `median err(2n) / median err(n)`.
    pub doubling_ratio: f64,
    /// `err(η=1) / √(d·γ⁻¹/n)`, if η = 1 is on the grid.
    pub eta_one_constant: Option<f64>,
}

/// No-filter sweep on the `r = 1`, `γ̃ = ∞` instance, at `n` and `2n`.
pub fn run_lower_bound_probe(cfg: &ExperimentConfig) -> Result<LowerBoundResult> {
    if cfg.r != 1 {
        return Err(LabError::param("r", "the lower-bound probe needs r = 1"));
    }
    if !cfg.gamma_tilde.is_infinite() {
        return Err(LabError::param("gamma_tilde", "the lower-bound probe needs gamma_tilde = inf"));
    }
    if !cfg.gamma.is_finite() {
        return Err(LabError::param("gamma", "the lower-bound probe needs a finite gamma"));
    }
    let probe = ExperimentConfig {
        methods: vec![Method::NoFilter],
        ..cfg.clone()
    };
    let sweep = run_eta_sweep(&probe)?;
    let mut doubled = SweepResult {
        metric: cfg.metric,
        records: sweep_records(&probe, 2 * cfg.n)?,
        slope_fits: Vec::new(),
    };
    doubled.slope_fits = doubled.fit_slopes(1);
    let base = sweep.series(Method::NoFilter, "none");
    let twice = doubled.series(Method::NoFilter, "none");
    let ratios: Vec<f64> = base
        .iter()
        .zip(&twice)
        .filter(|(a, _)| a.valid)
        .map(|(a, b)| b.median / a.median)
        .collect();
    let fit = sweep
        .slope_fits
        .iter()
        .find(|f| f.regime == Regime::All)
        .map(|f| f.fit);
    let eta_one_constant = base
        .iter()
        .find(|p| p.eta == 1.0)
        .map(|p| p.median / (cfg.d as f64 / cfg.gamma / cfg.n as f64).sqrt());
    Ok(LowerBoundResult {
        fit,
        doubling_ratio: if ratios.is_empty() { f64::NAN } else { median(&ratios) },
        eta_one_constant,
        sweep,
        doubled,
    })
}

/// `count` geometrically spaced values from `hi` down to `lo`.
pub fn geometric_grid(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    let step = (lo / hi).ln() / (count - 1) as f64;
    (0..count)
        .map(|i| if i == count - 1 { lo } else { hi * (step * i as f64).exp() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_laws() {
        let grid = geometric_grid(1.0, 0.004, 8);
        let inv: Vec<(f64, f64)> = grid.iter().map(|&e| (e, 1.0 / e)).collect();
        assert!((fit_loglog_slope(&inv).unwrap().slope + 1.0).abs() < 1e-10);
        let sqrt: Vec<(f64, f64)> = grid.iter().map(|&e| (e, 1.0 / e.sqrt())).collect();
        assert!((fit_loglog_slope(&sqrt).unwrap().slope + 0.5).abs() < 1e-10);
        let flat: Vec<(f64, f64)> = grid.iter().map(|&e| (e, 3.0)).collect();
        let fit = fit_loglog_slope(&flat).unwrap();
        assert!(fit.slope.abs() < 1e-12);
        assert!(fit.r_squared.is_none());
    }

    #[test]
    fn slope_rejects_bad_points() {
        assert!(fit_loglog_slope(&[(1.0, 1.0), (0.5, 2.0)]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0), (0.5, 0.0), (0.1, 1.0)]).is_err());
        assert!(fit_loglog_slope(&[(0.5, 1.0), (0.5, 2.0), (0.5, 1.0)]).is_err());
    }

    #[test]
    fn regime_split() {
        let r4 = split_regimes(&[1.0, 0.1, 0.0625, 0.04, 0.01], 4);
        assert_eq!(r4.boundary, 0.0625);
        assert_eq!(r4.large, vec![1.0]);
        assert_eq!(r4.buffer, vec![0.1, 0.0625, 0.04]);
        assert_eq!(r4.small, vec![0.01]);
        let r1 = split_regimes(&[1.0, 0.5, 0.02], 1);
        assert_eq!(r1.small.len(), 3);
    }

    #[test]
    fn geometric_grid_endpoints() {
        let g = geometric_grid(1.0, 0.004, 8);
        assert_eq!((g[0], g[7]), (1.0, 0.004));
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    fn small_cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk(4000, vec![1.0, 0.5], vec![Method::NoFilter, Method::TeacherFilter]);
        c.seeds = vec![0, 1, 2];
        c.record_timing = false;
        c
    }

    #[test]
    fn config_validation() {
        assert!(small_cfg().validate().is_ok());
        let mut c = small_cfg();
        c.eta_grid = vec![0.5, 1.0];
        assert_eq!(c.validate().unwrap().eta_grid, vec![1.0, 0.5]);
        for bad in [
            ExperimentConfig { eta_grid: vec![], ..small_cfg() },
            ExperimentConfig { eta_grid: vec![0.0], ..small_cfg() },
            ExperimentConfig { seeds: vec![1, 1], ..small_cfg() },
            ExperimentConfig { rho: 0.0, ..small_cfg() },
            ExperimentConfig { r: 9, ..small_cfg() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn noise_free_clean_point_is_exact() {
        let mut c = small_cfg();
        c.gamma = f64::INFINITY;
        c.gamma_tilde = f64::INFINITY;
        c.eta_grid = vec![1.0];
        c.methods = vec![Method::NoFilter];
        let res = run_eta_sweep(&c.validate().unwrap()).unwrap();
        assert!(res.records.iter().all(|r| r.err(Metric::Ssd).unwrap() < 1e-6));
    }

    #[test]
    fn every_grid_cell_has_a_record() {
        let c = small_cfg().validate().unwrap();
        let res = run_eta_sweep(&c).unwrap();
        assert_eq!(res.records.len(), 2 * 3 * 2);
        assert_eq!(res.series_keys().len(), 2);
    }

    #[test]
    fn sweep_is_thread_count_independent() {
        let c = small_cfg().validate().unwrap();
        let a = run_eta_sweep(&c).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| run_eta_sweep(&c)).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn full_retention_equals_second_half_no_filter() {
        let mut c = small_cfg();
        c.eta_grid = vec![0.3];
        c.retention_fractions = vec![1.0, 0.001];
        let t = run_threshold_sweep(&c.clone().validate().unwrap()).unwrap();
        let model = c.model(0.3).unwrap();
        for (i, &seed) in c.seeds.iter().enumerate() {
            let ds = model::sample_dataset_keyed(&model, c.n, dataset_key(0, 0.3, seed, c.n)).unwrap();
            let half = ds.samples().slice(c.n / 2, c.n);
            let enc = filtering::run_no_filter(&half, 4, 1.0, CovMode::Centered).unwrap();
            let direct = metrics::err_ssd(&enc, &model).unwrap().value;
            let rec = &t.records.records[2 * i];
            assert_eq!(rec.theta, ThetaSpec::Retention(1.0));
            assert!((rec.err(Metric::Ssd).unwrap() - direct).abs() < 1e-12);
            assert_eq!(t.records.records[2 * i + 1].validity, Validity::Failed);
        }
        assert_eq!(t.rows[1].n_failed, 3);
    }

    #[test]
    fn lower_bound_probe_guards() {
        let c = small_cfg();
        assert!(run_lower_bound_probe(&c).is_err());
        let c = ExperimentConfig { r: 1, gamma_tilde: f64::INFINITY, ..small_cfg() };
        assert!(run_lower_bound_probe(&c).is_ok());
    }

    #[test]
    fn metric_comparison_on_shared_records() {
        let mut c = small_cfg();
        c.gamma = f64::INFINITY;
        c.gamma_tilde = f64::INFINITY;
        c.eta_grid = vec![1.0];
        c.methods = vec![Method::NoFilter];
        let all = run_metric_comparison(&c.validate().unwrap()).unwrap();
        assert_eq!(all.len(), 4);
        for res in &all {
            for r in &res.records {
                assert!(r.err(res.metric).unwrap() < 1e-6);
            }
        }
    }
}
