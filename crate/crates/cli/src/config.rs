//! JSON configs with dotted-key overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sonokey::{Error, Result};

/// Parses `key.path=value`; the value is read as JSON when it parses, else
/// taken as a string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override {s:?} is not key=value")))?;
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(Error::InvalidArgument(format!("override {s:?} has an empty key segment")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.split('.').map(str::to_string).collect(), value))
}

pub fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Map::new());
            } else {
                return Err(Error::InvalidArgument(format!(
                    "override {}: {} is not an object",
                    path.join("."),
                    path[..i].join(".")
                )));
            }
        }
        let obj = cur.as_object_mut().expect("checked above");
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        cur = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

/// Reads `path` (or starts from the type's defaults), applies overrides and
/// deserializes strictly; unknown keys are rejected.
pub fn load<T: DeserializeOwned + Serialize + Default>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut v = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                kind: "config",
                path: p.to_path_buf(),
                detail: e.to_string(),
            })?
        }
        None => serde_json::to_value(T::default())?,
    };
    for o in overrides {
        let (k, val) = parse_override(o)?;
        apply_override(&mut v, &k, val)?;
    }
    serde_json::from_value(v).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
}
