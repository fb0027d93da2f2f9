//! Config-file + command-line merging.
//!
//! A command's settings come from a flat TOML file (`--config`) with any
//! explicitly given flags written over it key by key, then deserialized into
//! the command's config struct. Flags and keys share names, so any run
//! expressible with flags is expressible with a file alone.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::Table;

/// A configuration problem; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn load(path: Option<&Path>) -> anyhow::Result<Table> {
    let Some(path) = path else {
        return Ok(Table::new());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    text.parse::<Table>()
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

/// Writes every flag that was given (non-`None`) over `table`.
pub fn apply<T: Serialize>(table: &mut Table, flags: &T) -> anyhow::Result<()> {
    let given = Table::try_from(flags).map_err(|e| ConfigError(format!("flags: {e}")))?;
    table.extend(given);
    Ok(())
}

/// Removes `keys` from `table` into a table of their own.
pub fn split(table: &mut Table, keys: &[&str]) -> Table {
    keys.iter()
        .filter_map(|k| table.remove(*k).map(|v| (k.to_string(), v)))
        .collect()
}

pub fn resolve<T: DeserializeOwned>(table: Table) -> anyhow::Result<T> {
    table
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError(e.message().to_string()).into())
}

pub fn parse_switch(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got `{s}`")),
    }
}
