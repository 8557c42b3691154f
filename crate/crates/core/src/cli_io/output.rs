//! Result files. Floats are written with 17 significant digits so every
//! value round-trips exactly; all writes go through a temp file + rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{LabError, Result};
use crate::experiments::{LowerBoundResult, Method, SweepResult, ThresholdTable};
use crate::metrics::Metric;

/// `{:.16e}` with explicit spellings for non-finite values.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

/// Write `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| LabError::Io(e.into_error()))
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Records CSV: `eta, method, theta_desc, seed, err, n_sel, wall_ms,
/// valid_flag`. Failed records have an empty `err`.
pub fn write_records_csv(path: &Path, res: &SweepResult) -> Result<()> {
    let rows = res.records.iter().map(|r| {
        vec![
            fmt_f64(r.eta),
            r.method.name().to_string(),
            r.theta_desc(),
            r.seed.to_string(),
            r.err(res.metric).map(fmt_f64).unwrap_or_default(),
            r.n_sel.to_string(),
            r.wall_ms.to_string(),
            r.validity.name().to_string(),
        ]
    });
    let bytes = csv_bytes(
        &["eta", "method", "theta_desc", "seed", "err", "n_sel", "wall_ms", "valid_flag"],
        rows,
    )?;
    write_atomic(path, &bytes)
}

/// All four metrics per record.
pub fn write_metric_records_csv(path: &Path, res: &SweepResult) -> Result<()> {
    let rows = res.records.iter().map(|r| {
        let mut row = vec![
            fmt_f64(r.eta),
            r.method.name().to_string(),
            r.theta_desc(),
            r.seed.to_string(),
        ];
        for m in Metric::ALL {
            row.push(r.err(m).map(fmt_f64).unwrap_or_default());
        }
        row.push(r.n_sel.to_string());
        row.push(r.validity.name().to_string());
        row
    });
    let bytes = csv_bytes(
        &[
            "eta", "method", "theta_desc", "seed", "err_ssd", "err_ccd", "err_def3", "err_lpe", "n_sel", "valid_flag",
        ],
        rows,
    )?;
    write_atomic(path, &bytes)
}

pub fn fits_json(res: &SweepResult) -> Value {
    json!({
        "metric": res.metric,
        "records": res.records.len(),
        "failed": res.failures(),
        "out_of_regime": res.out_of_regime(),
        "slope_fits": res.slope_fits,
    })
}

/// Retention table: `fraction, mean_err, std_err, n_ok, n_failed`.
pub fn write_threshold_csv(path: &Path, table: &ThresholdTable) -> Result<()> {
    let rows = table.rows.iter().map(|r| {
        vec![
            fmt_f64(r.fraction),
            fmt_f64(r.mean_err),
            fmt_f64(r.std_err),
            r.n_ok.to_string(),
            r.n_failed.to_string(),
        ]
    });
    write_atomic(path, &csv_bytes(&["fraction", "mean_err", "std_err", "n_ok", "n_failed"], rows)?)
}

pub fn lower_bound_json(res: &LowerBoundResult) -> Value {
    json!({
        "fit": res.fit,
        "doubling_ratio": res.doubling_ratio,
        "eta_one_constant": res.eta_one_constant,
        "slope_fits": res.sweep.slope_fits,
        "doubled_slope_fits": res.doubled.slope_fits,
    })
}

/// Plot-ready series: one `plot_<method>.csv` per method with columns
/// `theta_desc, inv_eta, median_err, q25, q75`, and `plot_reference.csv`
/// holding lines of slope 1, 0.5 and 0 in `1/η`, anchored at the median of
/// the first series at its largest η.
pub fn emit_plot_data(res: &SweepResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let keys = res.series_keys();
    if keys.is_empty() || res.records.iter().all(|r| r.report.is_none()) {
        return Err(LabError::param("sweep_result", "nothing to plot"));
    }
    let mut methods: Vec<Method> = Vec::new();
    for (m, _) in &keys {
        if !methods.contains(m) {
            methods.push(*m);
        }
    }
    let mut written = Vec::new();
    let mut anchor: Option<(f64, f64)> = None;
    let mut inv_etas: Vec<f64> = Vec::new();
    for method in methods {
        let mut rows = Vec::new();
        for (_, desc) in keys.iter().filter(|(m, _)| *m == method) {
            for p in res.series(method, desc) {
                if anchor.is_none() {
                    anchor = Some((1.0 / p.eta, p.median));
                }
                if !inv_etas.contains(&(1.0 / p.eta)) {
                    inv_etas.push(1.0 / p.eta);
                }
                rows.push(vec![
                    desc.clone(),
                    fmt_f64(1.0 / p.eta),
                    fmt_f64(p.median),
                    fmt_f64(p.q25),
                    fmt_f64(p.q75),
                ]);
            }
        }
        let path = out_dir.join(format!("plot_{}.csv", method.name()));
        write_atomic(&path, &csv_bytes(&["theta_desc", "inv_eta", "median_err", "q25", "q75"], rows)?)?;
        written.push(path);
    }
    let (x0, y0) = anchor.ok_or_else(|| LabError::param("sweep_result", "nothing to plot"))?;
    inv_etas.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    for slope in [1.0, 0.5, 0.0] {
        for &x in &inv_etas {
            rows.push(vec![fmt_f64(slope), fmt_f64(x), fmt_f64(y0 * (x / x0).powf(slope))]);
        }
    }
    let path = out_dir.join("plot_reference.csv");
    write_atomic(&path, &csv_bytes(&["slope", "inv_eta", "err"], rows)?)?;
    written.push(path);
    Ok(written)
}
