//! Config files: TOML (default) or JSON, with keys either at top level or
//! grouped in `[model]`, `[sweep]` and `[filter]` sections.

use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::experiments::{ExperimentConfig, Method, ThetaPolicy};
use crate::linalg::CovMode;
use crate::metrics::Metric;

const SECTIONS: [&str; 3] = ["model", "sweep", "filter"];

const MODEL_KEYS: [&str; 5] = ["d", "d_tilde", "r", "gamma", "gamma_tilde"];
const SWEEP_KEYS: [&str; 10] = [
    "n",
    "eta_grid",
    "methods",
    "seeds",
    "metric",
    "cov_mode",
    "master_seed",
    "record_timing",
    "rho",
    "n_bins",
];
const FILTER_KEYS: [&str; 4] = ["theta_policy", "theta_values", "retention_fractions", "rho_teacher"];

fn known(key: &str) -> bool {
    MODEL_KEYS.contains(&key) || SWEEP_KEYS.contains(&key) || FILTER_KEYS.contains(&key)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NumOrText {
    Num(f64),
    Text(String),
}

/// Positive real or the string `"inf"`.
fn de_precision<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    match NumOrText::deserialize(d)? {
        NumOrText::Num(v) => Ok(v),
        NumOrText::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
            other => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {other:?}"))),
        },
    }
}

#[derive(Deserialize)]
struct RawConfig {
    d: usize,
    d_tilde: usize,
    r: usize,
    #[serde(deserialize_with = "de_precision")]
    gamma: f64,
    #[serde(deserialize_with = "de_precision")]
    gamma_tilde: f64,
    n: usize,
    eta_grid: Vec<f64>,
    methods: Vec<Method>,
    theta_policy: Option<ThetaPolicy>,
    theta_values: Option<Vec<f64>>,
    retention_fractions: Option<Vec<f64>>,
    rho: Option<f64>,
    rho_teacher: Option<f64>,
    seeds: Option<Vec<u64>>,
    metric: Option<Metric>,
    cov_mode: Option<CovMode>,
    master_seed: Option<u64>,
    record_timing: Option<bool>,
    n_bins: Option<usize>,
}

impl RawConfig {
    fn into_config(self) -> ExperimentConfig {
        let theta_policy = self.theta_policy.unwrap_or(match (&self.theta_values, &self.retention_fractions) {
            (Some(_), Some(_)) => ThetaPolicy::Both,
            (None, Some(_)) => ThetaPolicy::RetentionFraction,
            _ => ThetaPolicy::FixedValue,
        });
        let theta_values = self.theta_values.unwrap_or_else(|| match theta_policy {
            ThetaPolicy::RetentionFraction => Vec::new(),
            _ => vec![0.0],
        });
        ExperimentConfig {
            d: self.d,
            d_tilde: self.d_tilde,
            r: self.r,
            gamma: self.gamma,
            gamma_tilde: self.gamma_tilde,
            n: self.n,
            eta_grid: self.eta_grid,
            methods: self.methods,
            theta_policy,
            theta_values,
            retention_fractions: self.retention_fractions.unwrap_or_default(),
            rho: self.rho.unwrap_or(1.0),
            rho_teacher: self.rho_teacher.unwrap_or(1.0),
            seeds: self.seeds.unwrap_or_else(|| (0..20).collect()),
            metric: self.metric.unwrap_or_default(),
            cov_mode: self.cov_mode.unwrap_or_default(),
            master_seed: self.master_seed.unwrap_or(0),
            record_timing: self.record_timing.unwrap_or(true),
            n_bins: self.n_bins.unwrap_or(60),
        }
    }
}

/// TOML → JSON, keeping non-finite floats as strings (`"inf"`, `"-inf"`,
/// `"nan"`) since JSON numbers cannot carry them.
fn toml_to_json(v: toml::Value) -> Value {
    match v {
        toml::Value::String(s) => Value::String(s),
        toml::Value::Integer(i) => json!(i),
        toml::Value::Float(f) if f.is_finite() => json!(f),
        toml::Value::Float(f) if f.is_nan() => json!("nan"),
        toml::Value::Float(f) => json!(if f > 0.0 { "inf" } else { "-inf" }),
        toml::Value::Boolean(b) => Value::Bool(b),
        toml::Value::Datetime(d) => Value::String(d.to_string()),
        toml::Value::Array(a) => Value::Array(a.into_iter().map(toml_to_json).collect()),
        toml::Value::Table(t) => Value::Object(t.into_iter().map(|(k, v)| (k, toml_to_json(v))).collect()),
    }
}

/// Merge section contents into one flat map, rejecting duplicates and
/// collecting every unknown key.
fn flatten(root: Map<String, Value>) -> Result<Map<String, Value>> {
    let mut flat = Map::new();
    let mut unknown = Vec::new();
    let mut dupes = Vec::new();
    let mut insert = |key: String, path: String, value: Value, flat: &mut Map<String, Value>| {
        if !known(&key) {
            unknown.push(path);
        } else if flat.insert(key, value).is_some() {
            dupes.push(path);
        }
    };
    for (k, v) in root {
        match v {
            Value::Object(section) if SECTIONS.contains(&k.as_str()) => {
                for (sk, sv) in section {
                    let path = format!("{k}.{sk}");
                    insert(sk, path, sv, &mut flat);
                }
            }
            other => insert(k.clone(), k, other, &mut flat),
        }
    }
    if !unknown.is_empty() {
        return Err(LabError::Config(format!("unknown keys: {}", unknown.join(", "))));
    }
    if !dupes.is_empty() {
        return Err(LabError::Config(format!("keys given more than once: {}", dupes.join(", "))));
    }
    Ok(flat)
}

/// Parse and validate config text. `json` selects the JSON reader.
pub fn parse_config_str(text: &str, json: bool) -> Result<ExperimentConfig> {
    let root = if json {
        serde_json::from_str::<Value>(text).map_err(|e| LabError::Config(format!("invalid JSON: {e}")))?
    } else {
        let table: toml::Table = toml::from_str(text).map_err(|e| LabError::Config(format!("invalid TOML: {e}")))?;
        toml_to_json(toml::Value::Table(table))
    };
    let Value::Object(root) = root else {
        return Err(LabError::Config("top level must be a table/object".into()));
    };
    let flat = flatten(root)?;
    let raw: RawConfig =
        serde_json::from_value(Value::Object(flat)).map_err(|e| LabError::Config(e.to_string()))?;
    raw.into_config().validate().map_err(|e| match e {
        LabError::Parameter { name, reason } => LabError::Config(format!("field `{name}`: {reason}")),
        other => other,
    })
}

/// Read a config file; `.json` files (or text starting with `{`) are JSON.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
    let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) || text.trim_start().starts_with('{');
    parse_config_str(&text, json)
}

fn precision_value(v: f64) -> Value {
    if v.is_infinite() {
        json!("inf")
    } else {
        json!(v)
    }
}

/// Sectioned JSON echo of a config; `parse_config_str(echo, true)` returns
/// an equal config.
pub fn config_echo(cfg: &ExperimentConfig) -> Value {
    json!({
        "model": {
            "d": cfg.d,
            "d_tilde": cfg.d_tilde,
            "r": cfg.r,
            "gamma": precision_value(cfg.gamma),
            "gamma_tilde": precision_value(cfg.gamma_tilde),
        },
        "sweep": {
            "n": cfg.n,
            "eta_grid": cfg.eta_grid,
            "methods": cfg.methods,
            "seeds": cfg.seeds,
            "metric": cfg.metric,
            "cov_mode": cfg.cov_mode,
            "master_seed": cfg.master_seed,
            "record_timing": cfg.record_timing,
            "rho": cfg.rho,
            "n_bins": cfg.n_bins,
        },
        "filter": {
            "theta_policy": cfg.theta_policy,
            "theta_values": cfg.theta_values,
            "retention_fractions": cfg.retention_fractions,
            "rho_teacher": cfg.rho_teacher,
        },
    })
}

/// SHA-256 of the canonical (key-sorted, compact) echo.
pub fn config_digest(cfg: &ExperimentConfig) -> String {
    let text = serde_json::to_string(&config_echo(cfg)).expect("config echo serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
d = 10
d_tilde = 8
r = 4
gamma = 1e4
gamma_tilde = 10000
n = 1000
eta_grid = [0.5, 1.0]
methods = ["no_filter", "teacher_filter"]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str(MINIMAL, false).unwrap();
        assert_eq!(c.rho, 1.0);
        assert_eq!(c.rho_teacher, 1.0);
        assert_eq!(c.metric, Metric::Ssd);
        assert_eq!(c.seeds, (0..20).collect::<Vec<u64>>());
        assert_eq!(c.cov_mode, CovMode::Centered);
        assert_eq!(c.eta_grid, vec![1.0, 0.5]);
        assert_eq!(c.theta_values, vec![0.0]);
        assert_eq!(c.gamma_tilde, 1e4);
    }

    #[test]
    fn sectioned_and_infinite_precision() {
        let text = r#"
[model]
d = 10
d_tilde = 8
r = 1
gamma = 100
gamma_tilde = "inf"
[sweep]
n = 1000
eta_grid = [1.0]
methods = ["no_filter"]
seeds = [3, 4]
[filter]
retention_fractions = [0.5]
"#;
        let c = parse_config_str(text, false).unwrap();
        assert!(c.gamma_tilde.is_infinite());
        assert_eq!(c.theta_policy, ThetaPolicy::RetentionFraction);
        let toml_inf = text.replace("\"inf\"", "inf");
        assert!(parse_config_str(&toml_inf, false).unwrap().gamma_tilde.is_infinite());
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let text = format!("{MINIMAL}\nfoo = 1\n[sweep]\nbar = 2\n");
        let err = parse_config_str(&text, false).unwrap_err().to_string();
        assert!(err.contains("foo") && err.contains("sweep.bar"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = parse_config_str(&MINIMAL.replace("[0.5, 1.0]", "[0.0, 1.0]"), false).unwrap_err();
        assert!(err.to_string().contains("eta"), "{err}");
        let err = parse_config_str(&format!("{MINIMAL}seeds = [1, 1]\n"), false).unwrap_err();
        assert!(err.to_string().contains("seeds"), "{err}");
        let err = parse_config_str(&MINIMAL.replace("n = 1000\n", ""), false).unwrap_err();
        assert!(err.to_string().contains("`n`"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let mut c = parse_config_str(MINIMAL, false).unwrap();
        c.gamma = f64::INFINITY;
        c.eta_grid = vec![1.0, 0.1 + 0.2, 1e-3];
        c.retention_fractions = vec![0.1, 0.3];
        c.theta_policy = ThetaPolicy::Both;
        let text = serde_json::to_string_pretty(&config_echo(&c)).unwrap();
        let back = parse_config_str(&text, true).unwrap();
        assert_eq!(back, c);
        assert_eq!(config_digest(&back), config_digest(&c));
    }
}
