use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::{CliError, Result};

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

/// Recursively copies the fields of `top` over `base`. Objects merge field by
/// field; any other value replaces what was there.
pub fn overlay(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Reads a JSON object from `path`, or an empty object without one.
pub fn read_file(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::Data(format!("config {} must be a JSON object", path.display())));
    }
    Ok(value)
}

/// Collects the flags that were given into a JSON object.
#[derive(Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("flag serializes"));
        }
        self
    }

    pub fn into_value(self) -> Value {
        Value::Object(self.0)
    }
}

/// Defaults, then the file, then the flags.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: &Value, flags: &Value, what: &str) -> Result<T> {
    let mut merged = serde_json::to_value(defaults).expect("defaults serialize");
    overlay(&mut merged, file);
    overlay(&mut merged, flags);
    serde_json::from_value(merged).map_err(|e| CliError::Data(format!("invalid {what} config: {e}")))
}

/// The resolved inputs of one run.
#[derive(Debug, Serialize)]
pub struct RunSnapshot<'a, C: Serialize> {
    pub command: &'a str,
    pub seed: Option<u64>,
    pub out: String,
    pub config: &'a C,
}

impl<C: Serialize> RunSnapshot<'_, C> {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self).expect("snapshot serializes");
        json.push('\n');
        write_file(&dir.join(SNAPSHOT_FILE), json.as_bytes())
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overlay_merges_objects_field_by_field() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        overlay(&mut base, &json!({"b": {"d": 4}, "e": 5}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 2, "d": 4}, "e": 5}));
        overlay(&mut base, &json!({"b": 0}));
        assert_eq!(base["b"], json!(0));
    }

    #[test]
    fn flags_win_over_file() {
        #[derive(Debug, PartialEq, Serialize, serde::Deserialize)]
        struct C {
            x: u32,
            y: u32,
            z: u32,
        }
        let defaults = C { x: 1, y: 2, z: 3 };
        let mut flags = Flags::default();
        flags.set("y", Some(20)).set::<u32>("z", None);
        let got = resolve(&defaults, &json!({"x": 10, "y": 11}), &flags.into_value(), "test").unwrap();
        assert_eq!(got, C { x: 10, y: 20, z: 3 });
    }
}
