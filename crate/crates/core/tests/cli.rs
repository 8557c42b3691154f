use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
[model]
d = 6
d_tilde = 5
r = 2
gamma = 100
gamma_tilde = 100

[sweep]
n = 4000
eta_grid = [1.0, 0.5, 0.25]
methods = ["no_filter", "oracle_filter", "teacher_filter"]
seeds = [0, 1, 2]
record_timing = false
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_filterlab"));
    c.env_remove("FILTERLAB_THREADS");
    c
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn shipped_configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn eta_sweep_writes_records_fits_plots_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let out = tmp.path().join("out");
    let o = run(&["eta-sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["records.csv", "fits.json", "plot_no_filter.csv", "plot_teacher_filter.csv", "plot_reference.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let text = fs::read_to_string(out.join("records.csv")).unwrap();
    // header + 3 η × 3 seeds × 3 methods
    assert_eq!(text.lines().count(), 1 + 27);
    let m = manifest(&out);
    assert_eq!(m["command"], "eta-sweep");
    assert_eq!(m["status"], "success");
    assert_eq!(m["config_digest"].as_str().unwrap().len(), 64);
    let fits: Value = serde_json::from_str(&fs::read_to_string(out.join("fits.json")).unwrap()).unwrap();
    assert_eq!(fits["config"]["model"]["r"], 2);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let mut texts = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("t{threads}"));
        let o = bin()
            .args(["eta-sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("FILTERLAB_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
        texts.push(fs::read(out.join("records.csv")).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn seed_override_changes_results_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run(&["eta-sweep", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    let o = run(&["eta-sweep", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "9"]);
    assert!(o.status.success());
    assert_eq!(manifest(&b)["master_seed"], 9);
    assert_ne!(fs::read(a.join("records.csv")).unwrap(), fs::read(b.join("records.csv")).unwrap());
}

#[test]
fn bad_config_aborts_with_machine_readable_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &format!("{SMALL}\n[filter]\nthreshold = 3\n"));
    let o = run(&["eta-sweep", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap();
    assert_eq!(err["status"], "aborted");
    assert!(err["error"].as_str().unwrap().contains("filter.threshold"));
}

#[test]
fn missing_config_for_sweep_aborts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["eta-sweep", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["eta-sweep"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn threshold_sweep_and_metric_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace("eta_grid = [1.0, 0.5, 0.25]", "eta_grid = [0.5]")
        + "\n[filter]\nretention_fractions = [0.2, 0.5, 1.0]\n";
    let cfg = write_config(tmp.path(), "t.toml", &text);
    let out = tmp.path().join("t");
    let o = run(&["threshold-sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("threshold.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "fraction,mean_err,std_err,n_ok,n_failed");
    assert_eq!(table.lines().count(), 4);

    let cfg = write_config(tmp.path(), "m.toml", SMALL);
    let out = tmp.path().join("m");
    let o = run(&["metric-compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("eta,method,theta_desc,seed,err_ssd,err_ccd,err_def3,err_lpe,n_sel,valid_flag"));
}

#[test]
fn lower_bound_and_score_hist() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace("r = 2", "r = 1").replace("gamma_tilde = 100", "gamma_tilde = \"inf\"");
    let cfg = write_config(tmp.path(), "l.toml", &text);
    let out = tmp.path().join("l");
    let o = run(&["lower-bound", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lb: Value = serde_json::from_str(&fs::read_to_string(out.join("lower_bound.json")).unwrap()).unwrap();
    assert!(lb["doubling_ratio"].as_f64().unwrap() > 0.0);
    assert!(out.join("records_doubled.csv").exists());

    let cfg = write_config(tmp.path(), "h.toml", SMALL);
    let out = tmp.path().join("h");
    let o = run(&["score-hist", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let hist = fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().next().unwrap(), "bin_left,bin_right,count,subgroup");
    let moments: Value = serde_json::from_str(&fs::read_to_string(out.join("score_moments.json")).unwrap()).unwrap();
    assert_eq!(moments["theory"]["mu1"], 2.0);
}

#[test]
fn verify_runs_without_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["verify", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let v: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(v["failed"], 0);
    assert!(manifest(tmp.path())["config_digest"].is_null());
}

#[test]
fn shipped_configs_parse() {
    let mut count = 0;
    for entry in fs::read_dir(shipped_configs()).unwrap() {
        let path = entry.unwrap().path();
        filterlab::cli_io::parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        count += 1;
    }
    assert_eq!(count, 5);
}
