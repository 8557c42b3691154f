//! Score-based filtering and the three training pipelines: no filtering,
//! oracle filtering with `A = UŨᵀ`, and teacher-based train-filter-train.
//!
//! Selection is always `score > θ` (strict). Retention-fraction thresholds
//! are resolved by taking the top-k scores with a stable index order, so
//! ties never change the retained count.

use serde::{Deserialize, Serialize};

use crate::contrastive::{self, Encoders};
use crate::error::{LabError, Result};
use crate::linalg::{CovMode, Matrix};
use crate::model::{ModelParams, PairedSamples};

/// The bilinear scoring matrix `A` in `S(x, x̃; A) = xᵀ A x̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub a: Matrix,
}

impl ScoreMatrix {
    pub fn new(a: Matrix) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(LabError::param("a", "score matrix has non-finite entries"));
        }
        Ok(Self { a })
    }

    /// `UŨᵀ` (oracle scale: clean scores have mean `r`).
    pub fn oracle(model: &ModelParams) -> Self {
        Self { a: model.oracle_matrix() }
    }

    /// `G_TᵀG̃_T` of a trained teacher.
    pub fn teacher(teacher: &Encoders) -> Self {
        Self { a: teacher.product() }
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        Self { a: &self.a * lambda }
    }
}

/// How the filter threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ThetaSpec {
    /// Keep samples whose score is strictly above this value.
    Fixed(f64),
    /// Keep the top `⌈fraction·n⌉` samples.
    Retention(f64),
}

impl ThetaSpec {
    pub const NONE: ThetaSpec = ThetaSpec::Fixed(f64::NEG_INFINITY);

    /// Short label for result tables, e.g. `theta=0` or `keep=0.3`.
    pub fn descriptor(&self) -> String {
        match self {
            ThetaSpec::Fixed(t) if t.is_infinite() && *t < 0.0 => "theta=-inf".into(),
            ThetaSpec::Fixed(t) => format!("theta={t}"),
            ThetaSpec::Retention(f) => format!("keep={f}"),
        }
    }
}

/// Result of a filtering step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Ascending indices into the filtered sample set.
    pub selected_indices: Vec<usize>,
    pub n_sel: usize,
    pub threshold_used: f64,
    pub retention_fraction: f64,
}

impl FilterOutcome {
    fn from_indices(selected_indices: Vec<usize>, threshold_used: f64, total: usize) -> Self {
        let n_sel = selected_indices.len();
        Self {
            selected_indices,
            n_sel,
            threshold_used,
            retention_fraction: if total == 0 { 0.0 } else { n_sel as f64 / total as f64 },
        }
    }
}

/// `xᵀ A x̃`.
pub fn score(x: &[f64], x_tilde: &[f64], a: &Matrix) -> f64 {
    debug_assert_eq!(a.shape(), (x.len(), x_tilde.len()));
    let mut total = 0.0;
    for (j, xt) in x_tilde.iter().enumerate() {
        let col = a.column(j);
        let mut acc = 0.0;
        for (i, xi) in x.iter().enumerate() {
            acc += col[i] * xi;
        }
        total += acc * xt;
    }
    total
}

/// Scores of every pair in order.
pub fn scores(samples: &PairedSamples, a: &ScoreMatrix) -> Result<Vec<f64>> {
    if a.a.shape() != (samples.d(), samples.d_tilde()) {
        return Err(LabError::param(
            "a",
            format!(
                "score matrix is {:?}, data dims are ({}, {})",
                a.a.shape(),
                samples.d(),
                samples.d_tilde()
            ),
        ));
    }
    Ok(samples.iter().map(|(x, xt)| score(x, xt, &a.a)).collect())
}

/// Indices with `score > theta`.
pub fn filter_scores(scores: &[f64], theta: f64) -> FilterOutcome {
    let idx = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > theta)
        .map(|(i, _)| i)
        .collect();
    FilterOutcome::from_indices(idx, theta, scores.len())
}

/// Keep samples with `S(xᵢ, x̃ᵢ; A) > θ`.
pub fn filter_dataset(samples: &PairedSamples, a: &ScoreMatrix, theta: f64) -> Result<FilterOutcome> {
    Ok(filter_scores(&scores(samples, a)?, theta))
}

fn retained_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(LabError::param(
            "fraction",
            format!("retention fraction must lie in (0, 1], got {fraction}"),
        ));
    }
    // Guard against 0.07·100 = 7.000000000000001 rounding up to 8.
    let k = (fraction * n as f64 - 1e-9).ceil() as usize;
    Ok(k.clamp(1, n))
}

/// Score order: descending, ties by ascending index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Threshold whose strict-greater selection keeps `⌈fraction·n⌉` samples
/// when scores are distinct: the `(k+1)`-th largest score, or `-∞` when
/// everything is kept.
pub fn retention_to_threshold(scores: &[f64], fraction: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(LabError::param("scores", "need at least one score"));
    }
    let k = retained_count(scores.len(), fraction)?;
    if k == scores.len() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(scores[ranked(scores)[k]])
}

/// Top `⌈fraction·n⌉` samples by score, ties resolved toward lower indices.
pub fn select_top_fraction(scores: &[f64], fraction: f64) -> Result<FilterOutcome> {
    let threshold = retention_to_threshold(scores, fraction)?;
    let k = retained_count(scores.len(), fraction)?;
    let mut idx: Vec<usize> = ranked(scores).into_iter().take(k).collect();
    idx.sort_unstable();
    Ok(FilterOutcome::from_indices(idx, threshold, scores.len()))
}

/// Apply a threshold policy to precomputed scores.
pub fn apply_theta(scores: &[f64], theta: ThetaSpec) -> Result<FilterOutcome> {
    match theta {
        ThetaSpec::Fixed(t) => {
            if t.is_nan() {
                return Err(LabError::param("theta", "threshold is NaN"));
            }
            Ok(filter_scores(scores, t))
        }
        ThetaSpec::Retention(f) => select_top_fraction(scores, f),
    }
}

fn require_survivors(outcome: &FilterOutcome, r: usize) -> Result<()> {
    if outcome.n_sel < r + 1 {
        return Err(LabError::FilterStarvation {
            n_sel: outcome.n_sel,
            required: r + 1,
        });
    }
    Ok(())
}

fn train_on(samples: &PairedSamples, outcome: &FilterOutcome, r: usize, rho: f64, mode: CovMode) -> Result<Encoders> {
    require_survivors(outcome, r)?;
    if outcome.n_sel == samples.len() {
        contrastive::solve_closed_form(samples, r, rho, mode)
    } else {
        contrastive::solve_closed_form(&samples.select(&outcome.selected_indices), r, rho, mode)
    }
}

/// Closed-form solve on the whole dataset.
pub fn run_no_filter(samples: &PairedSamples, r: usize, rho: f64, mode: CovMode) -> Result<Encoders> {
    contrastive::solve_closed_form(samples, r, rho, mode)
}

/// Filter with `A = UŨᵀ`, then solve on the survivors.
pub fn run_oracle_filter(
    samples: &PairedSamples,
    model: &ModelParams,
    theta: ThetaSpec,
    r: usize,
    rho: f64,
    mode: CovMode,
) -> Result<(Encoders, FilterOutcome)> {
    let s = scores(samples, &ScoreMatrix::oracle(model))?;
    let outcome = apply_theta(&s, theta)?;
    let enc = train_on(samples, &outcome, r, rho, mode)?;
    Ok((enc, outcome))
}

/// Output of one train-filter-train run.
#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub student: Encoders,
    pub teacher: Encoders,
    /// Indices refer to the student half (sample `⌈n/2⌉ + i` of the input).
    pub outcome: FilterOutcome,
}

/// Teacher trained on the first `⌈n/2⌉` samples, plus the scored second half.
#[derive(Debug, Clone)]
pub struct TeacherStage {
    pub teacher: Encoders,
    pub pool: PairedSamples,
    pub pool_scores: Vec<f64>,
}

/// Train the teacher and score the student pool once, so several
/// thresholds can share it.
pub fn teacher_stage(samples: &PairedSamples, r: usize, rho_teacher: f64, mode: CovMode) -> Result<TeacherStage> {
    let n = samples.len();
    if n < 4 {
        return Err(LabError::param("n", format!("teacher filtering needs n >= 4, got {n}")));
    }
    let half = n.div_ceil(2);
    let teacher = contrastive::solve_closed_form(&samples.slice(0, half), r, rho_teacher, mode)?;
    let pool = samples.slice(half, n);
    let pool_scores = scores(&pool, &ScoreMatrix::teacher(&teacher))?;
    Ok(TeacherStage {
        teacher,
        pool,
        pool_scores,
    })
}

impl TeacherStage {
    /// Filter the pool at `theta` and train the student.
    pub fn student(&self, theta: ThetaSpec, r: usize, rho_student: f64, mode: CovMode) -> Result<TeacherRun> {
        let outcome = apply_theta(&self.pool_scores, theta)?;
        let student = train_on(&self.pool, &outcome, r, rho_student, mode)?;
        Ok(TeacherRun {
            student,
            teacher: self.teacher.clone(),
            outcome,
        })
    }
}

/// Train-filter-train with a single threshold.
pub fn run_teacher_filter(
    samples: &PairedSamples,
    theta: ThetaSpec,
    r: usize,
    rho_teacher: f64,
    rho_student: f64,
    mode: CovMode,
) -> Result<TeacherRun> {
    teacher_stage(samples, r, rho_teacher, mode)?.student(theta, r, rho_student, mode)
}
