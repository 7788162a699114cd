//! Versioned JSON configuration. A file holds any subset of the pipeline
//! fields plus `schema_version`; missing fields take their defaults, unknown
//! keys are rejected, and dotted `key=value` overrides are applied last.

use std::path::Path;

use proca_core::pipeline::PipelineConfig;
use serde_json::{Map, Value};

use crate::error::{AppError, AppResult};

pub const SCHEMA_VERSION: u64 = 1;
const VERSION_KEY: &str = "schema_version";

fn defaults_value() -> Value {
    serde_json::to_value(PipelineConfig::default()).expect("default config serializes")
}

fn merge(base: &mut Value, patch: &Value, path: &str) -> AppResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(AppError::Config(format!("unknown key `{here}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// `value` as JSON when it parses, otherwise as a string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `dotted` inside `root`; every path segment must already exist.
pub fn set_dotted(root: &mut Value, dotted: &str, value: Value) -> AppResult<()> {
    let mut node = root;
    for part in dotted.split('.') {
        node = match node {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| AppError::Config(format!("unknown key `{dotted}`")))?;
    }
    *node = value;
    Ok(())
}

pub fn split_override(raw: &str) -> AppResult<(&str, &str)> {
    raw.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| AppError::Usage(format!("override `{raw}` is not key=value")))
}

/// Builds the effective config from an optional file document and overrides.
pub fn resolve(document: Option<&Value>, overrides: &[(String, Value)]) -> AppResult<PipelineConfig> {
    let mut value = defaults_value();
    if let Some(doc) = document {
        let Value::Object(obj) = doc else {
            return Err(AppError::Config("config must be a JSON object".into()));
        };
        let mut obj: Map<String, Value> = obj.clone();
        match obj.remove(VERSION_KEY) {
            Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION) => {}
            Some(other) => return Err(AppError::Config(format!("unsupported {VERSION_KEY} {other}"))),
            None => return Err(AppError::Config(format!("missing {VERSION_KEY}"))),
        }
        merge(&mut value, &Value::Object(obj), "")?;
    }
    for (key, v) in overrides {
        set_dotted(&mut value, key, v.clone())?;
    }
    let config: PipelineConfig = serde_json::from_value(value).map_err(|e| AppError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> AppResult<PipelineConfig> {
    let doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| AppError::Config(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str::<Value>(&text).map_err(|e| AppError::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    resolve(doc.as_ref(), overrides)
}

/// The full effective config as a versioned document.
pub fn to_document(config: &PipelineConfig) -> Value {
    let mut obj = Map::new();
    obj.insert(VERSION_KEY.into(), Value::from(SCHEMA_VERSION));
    if let Value::Object(fields) = serde_json::to_value(config).expect("config serializes") {
        obj.extend(fields);
    }
    Value::Object(obj)
}

pub fn to_pretty(config: &PipelineConfig) -> String {
    let mut s = serde_json::to_string_pretty(&to_document(config)).expect("config serializes");
    s.push('\n');
    s
}
