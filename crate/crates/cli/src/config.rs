//! Layered run configuration: built-in defaults, then a JSON file, then flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::failure::Failure;

/// Reads a config file. A run manifest is accepted too, in which case its
/// recorded `config` block is used.
pub fn load_file(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !value.is_object() {
        return Err(Failure::usage(format!(
            "config {} must be a JSON object",
            path.display()
        )));
    }
    Ok(match value.get("config") {
        Some(inner) if value.get("command").is_some() => inner.clone(),
        _ => value,
    })
}

/// Recursively overlays `top` onto `base`; objects merge key by key, anything
/// else replaces.
pub fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t.clone(),
    }
}

/// `defaults` with the `section` of the file (if any) merged on top.
pub fn layered<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Value>,
    section: &str,
) -> Result<T, Failure> {
    let mut value = serde_json::to_value(defaults).expect("config types serialize");
    if let Some(overlay) = file.and_then(|f| f.get(section)) {
        merge(&mut value, overlay);
    }
    serde_json::from_value(value).map_err(|e| Failure::usage(format!("config section {section:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_is_deep() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, &json!({"b": {"d": 4}, "e": 5}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 2, "d": 4}, "e": 5}));
    }

    #[test]
    fn layered_keeps_unset_defaults() {
        let defaults = toa_core::synthetic::TrainConfig::short();
        let file = json!({"train": {"steps": 7}});
        let merged = layered(&defaults, Some(&file), "train").unwrap();
        assert_eq!(merged.steps, 7);
        assert_eq!(merged.batch_size, defaults.batch_size);
        assert_eq!(merged.learning_rate, defaults.learning_rate);
    }

    #[test]
    fn bad_types_are_usage_errors() {
        let defaults = toa_core::synthetic::TrainConfig::default();
        let err = layered(&defaults, Some(&json!({"train": {"steps": "many"}})), "train").unwrap_err();
        assert_eq!(err.code, 2);
    }
}
