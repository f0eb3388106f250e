//! Flat `key = value` config files plus command-line overrides.

use std::path::Path;

use acflow::RunConfig;

use crate::error::{CliError, Result};

/// Values given on the command line; applied after the file, in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub set: Vec<(String, String)>,
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in `{s}`"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Parses a config document. Missing keys take their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    for (i, line) in text.lines().enumerate() {
        if line.trim_start().starts_with('[') {
            return Err(CliError::Config(format!(
                "line {}: sections are not supported, the config is a flat list of keys",
                i + 1
            )));
        }
    }
    let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table()) {
        let line = text.lines().position(|l| l.trim_start().starts_with(key.as_str())).map_or(0, |i| i + 1);
        return Err(CliError::Config(format!("line {line}: `{key}` must be a scalar or an array")));
    }
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

/// Reads `path` (or starts from defaults), applies `overrides`, validates.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            parse_config(&text).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                other => other,
            })?
        }
        None => RunConfig::default(),
    };
    for (key, value) in &overrides.set {
        cfg = apply(&cfg, key, parse_value(value))?;
    }
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// TOML value if `raw` parses as one, otherwise the raw text as a string, so
/// `--set task=ring` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply(cfg: &RunConfig, key: &str, value: toml::Value) -> Result<RunConfig> {
    let mut table = toml::Table::try_from(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    match table.get_mut(key) {
        Some(slot) => *slot = value,
        None => return Err(CliError::Config(format!("unknown key `{key}`"))),
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(format!("invalid value for `{key}`: {e}")))
}

/// The effective configuration as a document that [`parse_config`] reads back
/// to the same value.
pub fn config_to_string(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))
}
