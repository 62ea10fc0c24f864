//! Run manifests written beside every command's outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub timestamp_unix: u64,
    pub argv: Vec<String>,
    /// Parsed flags, including defaults. Secret-looking values are redacted.
    pub config: Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Command-specific counts and notes.
    #[serde(default)]
    pub summary: Value,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[OsString], config: &impl Serialize) -> Result<Self, CliError> {
        let mut config = serde_json::to_value(config)?;
        redact(&mut config);
        Ok(Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            summary: Value::Null,
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn path_in(out_dir: &Path, command: &str) -> PathBuf {
        out_dir.join(format!("manifest-{command}.json"))
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let path = Self::path_in(out_dir, &self.command);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

fn is_secret_key(key: &str) -> bool {
    let k = key.to_ascii_lowercase();
    // `api_key_env` names a variable; it is not itself secret
    if k.ends_with("_env") {
        return false;
    }
    ["key", "token", "secret", "password", "authorization"]
        .iter()
        .any(|s| k.contains(s))
}

/// Replaces string values under secret-looking keys with `"[redacted]"`.
pub fn redact(value: &mut Value) {
    match value {
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if is_secret_key(k) && v.is_string() {
                    *v = Value::String("[redacted]".into());
                } else {
                    redact(v);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(redact),
        _ => {}
    }
}
