//! Training configuration files: JSON objects with flat dotted keys
//! (`"architecture.base_width": 8`). Nested objects are accepted too and are
//! flattened before merging, so a run manifest's resolved config can be fed back in.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use harmonize_core::train::{LrSchedule, TrainConfig};
use serde_json::{Map, Value};

use crate::error::CliError;

pub type Flat = BTreeMap<String, Value>;

pub fn flatten(value: &Value) -> Flat {
    fn walk(prefix: &str, value: &Value, out: &mut Flat) {
        match value {
            Value::Object(map) if !map.is_empty() => {
                for (k, v) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), value.clone());
            }
        }
    }
    let mut out = Flat::new();
    walk("", value, &mut out);
    out
}

pub fn unflatten(flat: &Flat) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), value.clone());
    }
    Value::Object(root)
}

/// `key=value`; the value is parsed as JSON and falls back to a plain string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Reads a config file. A run manifest (an object with `command` and `config`)
/// contributes its `config` member.
pub fn read_config_file(path: &Path) -> Result<Flat, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::missing(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| {
        CliError::usage(format!("config {} is not valid JSON: {e}", path.display()))
    })?;
    let value = match value {
        Value::Object(mut map) if map.contains_key("command") && map.contains_key("config") => {
            map.remove("config").expect("checked")
        }
        v @ Value::Object(_) => v,
        _ => {
            return Err(CliError::usage(format!(
                "config {} must be a JSON object",
                path.display()
            )))
        }
    };
    Ok(flatten(&value))
}

/// Merges `layers` over the defaults, in order, and deserializes the result.
///
/// Setting only one of `architecture.input_size` / `augmentation.target_size`
/// sets both; setting `schedule.total_epochs` without `schedule.milestones`
/// rescales the reference milestones.
pub fn resolve(layers: &[Flat]) -> Result<TrainConfig, CliError> {
    let defaults = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let mut flat = flatten(&defaults);
    let mut set = BTreeMap::new();
    for layer in layers {
        for (key, value) in layer {
            if !flat.contains_key(key) {
                return Err(CliError::usage(format!("unknown config key `{key}`")));
            }
            set.insert(key.clone(), value.clone());
        }
    }
    let input = "architecture.input_size";
    let target = "augmentation.target_size";
    match (set.get(input).cloned(), set.get(target).cloned()) {
        (Some(v), None) => {
            set.insert(target.into(), v);
        }
        (None, Some(v)) => {
            set.insert(input.into(), v);
        }
        _ => {}
    }
    if let (Some(total), false) = (
        set.get("schedule.total_epochs"),
        set.contains_key("schedule.milestones"),
    ) {
        let total = total.as_u64().ok_or_else(|| {
            CliError::usage("schedule.total_epochs must be a non-negative integer")
        })?;
        let milestones = LrSchedule::scaled(total as usize).milestones;
        set.insert(
            "schedule.milestones".into(),
            serde_json::to_value(milestones).expect("list"),
        );
    }
    flat.extend(set);
    let config: TrainConfig = serde_json::from_value(unflatten(&flat))
        .map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
    config
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    Ok(config)
}
