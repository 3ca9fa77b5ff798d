//! Config files, flag overlays, output locations and run manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Relative output directories resolve against this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "NOWCAST_OUTPUT_ROOT";
pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Bad invocation: reported with the usage text and exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    program: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a T,
}

/// Reads `--config`. A run manifest is accepted in place of a bare config
/// and contributes its `config` object; it must belong to `command`.
/// Returns the parsed config and the raw JSON for explicit-key checks.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<(T, Value)> {
    let Some(path) = path else {
        return Ok((T::default(), Value::Object(Default::default())));
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    if let Some(obj) = value.as_object() {
        if let (Some(cmd), Some(inner)) = (obj.get("command"), obj.get("config")) {
            let cmd = cmd.as_str().unwrap_or_default();
            if cmd != command {
                return Err(usage(format!(
                    "config conflict: {} is a `{cmd}` manifest, not `{command}`",
                    path.display()
                )));
            }
            value = inner.clone();
        }
    }
    let cfg = serde_json::from_value(value.clone()).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    Ok((cfg, value))
}

/// True if the raw config sets the key at `path`.
pub fn has_key(value: &Value, path: &[&str]) -> bool {
    let mut v = value;
    for k in path {
        match v.get(k) {
            Some(next) => v = next,
            None => return false,
        }
    }
    true
}

pub fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| usage(format!("missing --{flag} (flag or config)")))
}

/// An input that must already exist.
pub fn require_input(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    let p = require(value, flag)?;
    if !p.exists() {
        return Err(usage(format!("--{flag} {}: no such file or directory", p.display())));
    }
    Ok(p)
}

/// Output directory, placed under the output root when relative.
pub fn output_dir(value: Option<PathBuf>) -> Result<PathBuf> {
    let p = require(value, "out")?;
    let p = match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p,
    };
    fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
    Ok(p)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Records the fully resolved config; `--config <manifest>` replays it.
pub fn write_manifest<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<()> {
    write_json(
        &dir.join(MANIFEST_FILE),
        &Manifest {
            program: "nowcast",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
        },
    )
}
