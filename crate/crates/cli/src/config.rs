//! Config resolution: built-in defaults < config file < `--set` overrides <
//! `--seed`. The resolved value is what gets written to the manifest.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub const TOOL: &str = "mamcl";

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    pub config: Value,
}

/// Recursively overlay `top` onto `base`; objects merge, anything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::config(format!("bad override key {path:?}")));
        }
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| {
                    CliError::config(format!("override {path}: {part:?} is not an array index"))
                })?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    CliError::config(format!("override {path}: index {idx} out of range ({len})"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(CliError::config(format!(
                    "override {path}: {part:?} is not inside an object"
                )))
            }
        };
    }
    Ok(())
}

/// `key=value`; the value is parsed as JSON when possible, else taken as a string.
pub fn parse_override(raw: &str) -> Result<(String, Value), CliError> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {raw:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Read a config file; a manifest written by an earlier run is unwrapped
/// to its resolved config and its `--seed`.
fn load_file(path: &Path, subcommand: &str) -> Result<(Value, Option<u64>), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let v: Value = serde_json::from_str(&text).map_err(|e| {
        CliError::config(format!(
            "config file {} is not valid JSON: {e}",
            path.display()
        ))
    })?;
    if v.get("tool").and_then(Value::as_str) == Some(TOOL) && v.get("config").is_some() {
        let m: Manifest = serde_json::from_value(v)
            .map_err(|e| CliError::config(format!("manifest {}: {e}", path.display())))?;
        if m.subcommand != subcommand {
            return Err(CliError::config(format!(
                "manifest {} was written by `{}`, not `{subcommand}`",
                path.display(),
                m.subcommand
            )));
        }
        return Ok((m.config, m.seed));
    }
    Ok((v, None))
}

pub struct Resolved<T> {
    pub typed: T,
    pub value: Value,
    pub seed: Option<u64>,
}

pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    subcommand: &str,
    file: Option<&PathBuf>,
    overrides: &[String],
    seed: Option<u64>,
    seed_keys: &[&str],
) -> Result<Resolved<T>, CliError> {
    let mut value = serde_json::to_value(defaults).expect("defaults serialise");
    let mut seed = seed;
    if let Some(path) = file {
        let (v, manifest_seed) = load_file(path, subcommand)?;
        merge(&mut value, v);
        seed = seed.or(manifest_seed);
    }
    for raw in overrides {
        let (k, v) = parse_override(raw)?;
        set_path(&mut value, &k, v)?;
    }
    if let Some(s) = seed {
        for key in seed_keys {
            set_path(&mut value, key, Value::from(s))?;
        }
    }
    let typed: T = serde_json::from_value(value.clone())
        .map_err(|e| CliError::config(format!("invalid config: {e}")))?;
    // Normalise through the typed form so the manifest holds every field.
    let value = serde_json::to_value(&typed).expect("config serialises");
    Ok(Resolved { typed, value, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_merge() {
        let mut v = serde_json::json!({"a": {"b": 1, "c": [1, 2]}, "d": "x"});
        merge(&mut v, serde_json::json!({"a": {"b": 2}}));
        set_path(&mut v, "a.c.1", Value::from(5)).unwrap();
        let (k, val) = parse_override("e.f=0.5").unwrap();
        set_path(&mut v, &k, val).unwrap();
        let (k, val) = parse_override("d=text").unwrap();
        set_path(&mut v, &k, val).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"a": {"b": 2, "c": [1, 5]}, "d": "text", "e": {"f": 0.5}})
        );
        assert!(parse_override("novalue").is_err());
        assert!(set_path(&mut v, "d.x", Value::Null).is_err());
    }
}
