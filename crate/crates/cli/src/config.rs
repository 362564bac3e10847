//! Run configuration: defaults, then an optional JSON file, then flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Environment variable consulted for the seed when neither a flag nor the
/// config file sets one.
pub const SEED_ENV: &str = "STORMNET_SEED";

/// Name of the file every command writes into its output directory.
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// Seed used when nothing else provides one.
pub fn default_seed() -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// Flag values that were actually given on the command line.
#[derive(Debug, Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set<V: Serialize>(&mut self, key: &str, value: Option<V>) -> &mut Self {
        if let Some(v) = value {
            self.0
                .insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
        }
        self
    }

    /// Sets `key` when `on` is true; for boolean switches that can only turn a setting on.
    pub fn switch(&mut self, key: &str, on: bool) -> &mut Self {
        if on {
            self.0.insert(key.to_string(), Value::Bool(true));
        }
        self
    }
}

fn object(v: Value, what: &str) -> Result<Map<String, Value>, CliError> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Usage(format!("{what} must be a JSON object"))),
    }
}

/// Layers `file` and `flags` over `defaults`. Keys unknown to `T` are
/// rejected, and a `command` key in the file must name this command.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Path>, flags: Flags) -> Result<T, CliError> {
    let mut merged = object(serde_json::to_value(&defaults).expect("config serializes"), "config")?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
        for (k, v) in object(parsed, "config file")? {
            let Some(slot) = merged.get_mut(&k) else {
                return Err(CliError::Usage(format!("unknown config key `{k}` in {}", path.display())));
            };
            if k == "command" && *slot != v {
                return Err(CliError::Usage(format!("config file is for command {v}, not {slot}")));
            }
            *slot = v;
        }
    }
    merged.extend(flags.0);
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Demo {
        command: String,
        seed: u64,
        rate: f64,
    }

    fn demo() -> Demo {
        Demo {
            command: "demo".into(),
            seed: 1,
            rate: 0.5,
        }
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 7, "rate": 0.25}"#).unwrap();
        let mut flags = Flags::default();
        flags.set("rate", Some(0.75));
        let r: Demo = resolve(demo(), Some(&path), flags).unwrap();
        assert_eq!((r.seed, r.rate), (7, 0.75));
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut flags = Flags::default();
        flags.set("seed", Some(9u64));
        let r: Demo = resolve(demo(), None, flags).unwrap();
        std::fs::write(&path, serde_json::to_string(&r).unwrap()).unwrap();
        let again: Demo = resolve(demo(), Some(&path), Flags::default()).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn unknown_keys_and_wrong_command_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"sed": 7}"#).unwrap();
        assert!(matches!(resolve(demo(), Some(&path), Flags::default()), Err(CliError::Usage(_))));
        std::fs::write(&path, r#"{"command": "train"}"#).unwrap();
        assert!(matches!(resolve(demo(), Some(&path), Flags::default()), Err(CliError::Usage(_))));
    }
}
