//! Command-line plumbing: config ingestion, command dispatch, result files
//! and the run manifest.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

pub use config::{config_digest, config_echo, parse_config, parse_config_str};
pub use output::emit_plot_data;

use crate::error::{LabError, Result};
use crate::experiments::{self, ExperimentConfig};
use crate::filtering::ScoreMatrix;
use crate::model;
use crate::score_stats;
use crate::verify;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    EtaSweep,
    ThresholdSweep,
    LowerBound,
    ScoreHist,
    MetricCompare,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::EtaSweep => "eta-sweep",
            Command::ThresholdSweep => "threshold-sweep",
            Command::LowerBound => "lower-bound",
            Command::ScoreHist => "score-hist",
            Command::MetricCompare => "metric-compare",
            Command::Verify => "verify",
        }
    }
}

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    /// Everything ran and nothing was flagged.
    Success = 0,
    /// The run could not complete.
    Aborted = 1,
    /// Bad command line.
    Usage = 2,
    /// Completed, but some points failed or checks did not pass.
    Flagged = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// Written atomically to `manifest.json` at the end of every run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_digest: Option<String>,
    pub master_seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub status: ExitStatus,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
    pub summary: Value,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: ExitStatus,
    pub manifest: RunManifest,
}

struct Produced {
    files: Vec<PathBuf>,
    summary: Value,
    flagged: bool,
}

fn need(cfg: Option<&ExperimentConfig>, cmd: Command) -> Result<&ExperimentConfig> {
    cfg.ok_or_else(|| LabError::Config(format!("command `{}` needs --config", cmd.name())))
}

fn eta_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Produced> {
    let res = experiments::run_eta_sweep(cfg)?;
    let records = out.join("records.csv");
    output::write_records_csv(&records, &res)?;
    let fits = out.join("fits.json");
    let mut body = output::fits_json(&res);
    body["config"] = config_echo(cfg);
    output::write_json(&fits, &body)?;
    let mut files = vec![records, fits];
    files.extend(output::emit_plot_data(&res, out)?);
    Ok(Produced {
        files,
        summary: json!({"records": res.records.len(), "failed": res.failures(), "out_of_regime": res.out_of_regime()}),
        flagged: res.failures() > 0,
    })
}

fn threshold_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Produced> {
    let table = experiments::run_threshold_sweep(cfg)?;
    let csv = out.join("threshold.csv");
    output::write_threshold_csv(&csv, &table)?;
    let records = out.join("records.csv");
    output::write_records_csv(&records, &table.records)?;
    let summary = out.join("threshold.json");
    output::write_json(&summary, &json!({"eta": table.eta, "rows": table.rows, "config": config_echo(cfg)}))?;
    let failed = table.records.failures();
    Ok(Produced {
        files: vec![csv, records, summary],
        summary: json!({"rows": table.rows.len(), "failed": failed}),
        flagged: failed > 0,
    })
}

fn lower_bound(cfg: &ExperimentConfig, out: &Path) -> Result<Produced> {
    let res = experiments::run_lower_bound_probe(cfg)?;
    let records = out.join("records.csv");
    output::write_records_csv(&records, &res.sweep)?;
    let doubled = out.join("records_doubled.csv");
    output::write_records_csv(&doubled, &res.doubled)?;
    let summary = out.join("lower_bound.json");
    let mut body = output::lower_bound_json(&res);
    body["config"] = config_echo(cfg);
    output::write_json(&summary, &body)?;
    let failed = res.sweep.failures() + res.doubled.failures();
    Ok(Produced {
        files: vec![records, doubled, summary],
        summary: json!({"slope": res.fit.map(|f| f.slope), "doubling_ratio": res.doubling_ratio, "failed": failed}),
        flagged: failed > 0,
    })
}

fn score_hist(cfg: &ExperimentConfig, out: &Path) -> Result<Produced> {
    let eta = cfg.eta_grid[0];
    let m = cfg.model(eta)?;
    let seed = cfg.seeds[0];
    let ds = model::sample_dataset_keyed(&m, cfg.n, experiments::dataset_key(cfg.master_seed, eta, seed, cfg.n))?;
    let hist = score_stats::empirical_score_hist(&ds, &ScoreMatrix::oracle(&m), cfg.n_bins)?;
    let csv = out.join("histogram.csv");
    let mut buf = Vec::new();
    hist.write_csv(&mut buf)?;
    output::write_atomic(&csv, &buf)?;
    let theory = score_stats::theory_moments(&m);
    let z = |v: f64, t: f64, se: f64| (v - t) / se;
    let body = json!({
        "eta": eta,
        "n": cfg.n,
        "theory": theory,
        "clean": hist.clean_summary,
        "corrupt": hist.corrupt_summary,
        "z_scores": {
            "clean_mean": z(hist.clean_summary.mean, theory.mu1, hist.clean_summary.se_mean),
            "clean_var": z(hist.clean_summary.var, theory.var1, hist.clean_summary.se_var),
            "corrupt_mean": z(hist.corrupt_summary.mean, theory.mu0, hist.corrupt_summary.se_mean),
            "corrupt_var": z(hist.corrupt_summary.var, theory.var0, hist.corrupt_summary.se_var),
        },
        "config": config_echo(cfg),
    });
    let json_path = out.join("score_moments.json");
    output::write_json(&json_path, &body)?;
    Ok(Produced {
        files: vec![csv, json_path],
        summary: json!({"samples": cfg.n, "clean": hist.clean_summary.count}),
        flagged: false,
    })
}

fn metric_compare(cfg: &ExperimentConfig, out: &Path) -> Result<Produced> {
    let all = experiments::run_metric_comparison(cfg)?;
    let csv = out.join("metrics.csv");
    output::write_metric_records_csv(&csv, &all[0])?;
    let fits: Vec<Value> = all.iter().map(output::fits_json).collect();
    let json_path = out.join("metric_fits.json");
    output::write_json(&json_path, &json!({"per_metric": fits, "config": config_echo(cfg)}))?;
    Ok(Produced {
        files: vec![csv, json_path],
        summary: json!({"records": all[0].records.len(), "failed": all[0].failures()}),
        flagged: all[0].failures() > 0,
    })
}

fn run_verify(out: &Path) -> Result<Produced> {
    let checks = verify::run_all();
    let failed = checks.iter().filter(|c| !c.passed).count();
    let path = out.join("verify.json");
    output::write_json(&path, &json!({"checks": checks, "failed": failed}))?;
    Ok(Produced {
        files: vec![path],
        summary: json!({"checks": checks.len(), "failed": failed}),
        flagged: failed > 0,
    })
}

/// Run `cmd`, write its outputs and `manifest.json` into `out_dir`.
pub fn dispatch(cmd: Command, cfg: Option<&ExperimentConfig>, out_dir: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let produced = match cmd {
        Command::EtaSweep => eta_sweep(need(cfg, cmd)?, out_dir)?,
        Command::ThresholdSweep => threshold_sweep(need(cfg, cmd)?, out_dir)?,
        Command::LowerBound => lower_bound(need(cfg, cmd)?, out_dir)?,
        Command::ScoreHist => score_hist(need(cfg, cmd)?, out_dir)?,
        Command::MetricCompare => metric_compare(need(cfg, cmd)?, out_dir)?,
        Command::Verify => run_verify(out_dir)?,
    };
    let status = if produced.flagged {
        ExitStatus::Flagged
    } else {
        ExitStatus::Success
    };
    let name = |p: &PathBuf| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let manifest = RunManifest {
        command: cmd.name().into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_digest: cfg.map(config_digest),
        master_seed: cfg.map(|c| c.master_seed),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        status,
        outputs: produced.files.iter().map(name).collect(),
        summary: produced.summary,
    };
    output::write_json(&out_dir.join("manifest.json"), &serde_json::to_value(&manifest)?)?;
    Ok(RunOutcome { status, manifest })
}
