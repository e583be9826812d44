//! Layering of a JSON config file under command-line flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub fn read_config_file(path: Option<&Path>) -> CliResult<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = fs::read_to_string(path)?;
    match serde_json::from_str(&text)? {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::usage(format!("{}: config must be a JSON object", path.display()))),
    }
}

const TAGS: [&str; 2] = ["kind", "strategy"];

/// Recursively overlays `top` on `base`. Objects merge unless they carry
/// different variant tags; anything else is replaced.
pub fn merge(base: &mut Map<String, Value>, top: Map<String, Value>) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Object(b)), Value::Object(t)) if !retagged(b, &t) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn retagged(base: &Map<String, Value>, top: &Map<String, Value>) -> bool {
    TAGS.iter().any(|tag| matches!((base.get(*tag), top.get(*tag)), (Some(a), Some(b)) if a != b))
}

/// Deserializes `raw`, rejects keys the target type does not know, and
/// returns the value with its fully defaulted snapshot.
pub fn resolve<T: DeserializeOwned + Serialize>(raw: Map<String, Value>) -> CliResult<(T, Value)> {
    let raw = Value::Object(raw);
    let parsed: T = serde_json::from_value(raw.clone()).map_err(|e| CliError::usage(format!("config: {e}")))?;
    let snapshot = serde_json::to_value(&parsed)?;
    check_keys(&raw, &snapshot, "")?;
    Ok((parsed, snapshot))
}

fn check_keys(raw: &Value, resolved: &Value, at: &str) -> CliResult<()> {
    if let (Value::Object(r), Value::Object(s)) = (raw, resolved) {
        for (k, v) in r {
            let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
            match s.get(k) {
                None => return Err(CliError::usage(format!("unknown config key `{path}`"))),
                Some(sv) => check_keys(v, sv, &path)?,
            }
        }
    }
    Ok(())
}

/// Builder for flag overrides; `None` flags leave the config untouched.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
        }
        self
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> &mut Self {
        self.0.insert(key.to_string(), value);
        self
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.0
    }
}
