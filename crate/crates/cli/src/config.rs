//! Flat dotted-key training config.
//!
//! Sources are applied in order: built-in defaults, the TOML file, then
//! `ICDLAAT_*` environment variables, then command-line flags. A key such
//! as `arch.d_model` is written `ICDLAAT_ARCH__D_MODEL` in the environment.

use std::path::Path;

use icdlaat_core::trainer::TrainConfig;
use serde_json::Value;

use crate::error::{usage, Result};

pub const ENV_PREFIX: &str = "ICDLAAT_";

/// One `key = value` assignment with its origin, for error messages.
#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub key: String,
    pub value: toml::Value,
    pub source: String,
}

fn flatten(prefix: &str, table: &toml::Table, source: &str, out: &mut Vec<Setting>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, source, out),
            _ => out.push(Setting { key, value: v.clone(), source: source.to_string() }),
        }
    }
}

pub fn file_settings(path: &Path) -> Result<Vec<Setting>> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text.parse().map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let mut out = Vec::new();
    flatten("", &table, &path.display().to_string(), &mut out);
    Ok(out)
}

/// Parses a scalar the way TOML would; bare words become strings.
pub fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn env_settings(vars: impl IntoIterator<Item = (String, String)>) -> Vec<Setting> {
    let mut out: Vec<Setting> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some(Setting { key: rest.to_lowercase().replace("__", "."), value: parse_value(&v), source: format!("env {k}") })
        })
        .collect();
    out.sort_by(|a, b| a.key.cmp(&b.key));
    out
}

/// `key=value` from a `--set` flag.
pub fn parse_assignment(s: &str) -> std::result::Result<Setting, String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    Ok(Setting { key: k.trim().to_string(), value: parse_value(v.trim()), source: "--set".into() })
}

fn to_json(v: &toml::Value) -> Value {
    match v {
        toml::Value::String(s) => Value::String(s.clone()),
        toml::Value::Integer(i) => Value::from(*i),
        toml::Value::Float(f) => Value::from(*f),
        toml::Value::Boolean(b) => Value::Bool(*b),
        toml::Value::Datetime(d) => Value::String(d.to_string()),
        toml::Value::Array(a) => Value::Array(a.iter().map(to_json).collect()),
        toml::Value::Table(t) => Value::Object(t.iter().map(|(k, v)| (k.clone(), to_json(v))).collect()),
    }
}

/// Applies settings over the defaults; unknown keys and ill-typed values are
/// usage errors.
pub fn resolve(settings: &[Setting]) -> Result<TrainConfig> {
    let mut doc = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    for s in settings {
        let mut slot = &mut doc;
        for part in s.key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| usage(format!("unknown config key {:?} (from {})", s.key, s.source)))?;
        }
        *slot = to_json(&s.value);
    }
    let config: TrainConfig = serde_json::from_value(doc).map_err(|e| usage(format!("invalid config: {e}")))?;
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

/// Every key with its resolved value, for manifests and `--print-config`.
pub fn flat_view(config: &TrainConfig) -> Vec<(String, Value)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
        match v {
            Value::Object(o) => {
                for (k, v) in o {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            _ => out.push((prefix.to_string(), v.clone())),
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(config).expect("config serializes"), &mut out);
    out
}
