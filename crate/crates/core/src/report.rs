//! Deterministic text output: 9-significant-digit floats, JSON with sorted
//! keys, and file helpers.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Result, SuanError};

/// Significant digits kept in every float written to a report.
pub const SIG_DIGITS: usize = 9;

/// Rounds to 9 significant digits. Non-finite values pass through.
pub fn round_sig9(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.*e}", SIG_DIGITS - 1, v).parse().unwrap_or(v)
}

/// Shortest decimal that round-trips the 9-digit rounding of `v`.
pub fn fmt_f64(v: f64) -> String {
    let r = round_sig9(v);
    if r == 0.0 {
        return "0".into();
    }
    format!("{r}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn round_value(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_sig9(n.as_f64().unwrap_or_default());
            serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(round_value).collect()),
        // serde_json's default map is a BTreeMap, so keys come out sorted.
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, round_value(v))).collect()),
        other => other,
    }
}

/// Pretty JSON with sorted keys and rounded floats, newline-terminated.
pub fn to_report_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| SuanError::Serialize(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(&round_value(v)).map_err(|e| SuanError::Serialize(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SuanError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_report_json(value)?)
}

/// Writes CSV produced by `fill` into `path`.
pub fn write_csv_with(path: &Path, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    fs::write(path, buf).map_err(|e| SuanError::io(path, e))
}
