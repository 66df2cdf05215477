//! Layered settings: command-line flags override the optional TOML config
//! file, which overrides built-in defaults.
//!
//! The config file holds global keys (`seed`, `threads`) at the top level and
//! one table per subcommand, keyed by the flag names:
//!
//! ```toml
//! seed = 7
//!
//! [train-proj]
//! lr = 0.001
//! out-dim = 64
//! ```

use std::fmt::Display;
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use toml::Table;

use crate::UsageError;

#[derive(Debug, Default)]
pub struct ConfigFile {
    globals: Table,
    sections: Table,
}

impl ConfigFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let table: Table = text
            .parse()
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        let (sections, globals) = table
            .into_iter()
            .map(|(k, v)| (k.replace('_', "-"), v))
            .partition(|(_, v)| v.is_table());
        Ok(Self { globals, sections })
    }

    /// Settings for one subcommand, including the globals.
    pub fn resolver(&self, command: &str) -> anyhow::Result<Resolver> {
        let mut values = self.globals.clone();
        if let Some(section) = self.sections.get(command) {
            let section = section.as_table().expect("partitioned on tables");
            values.extend(
                section
                    .iter()
                    .map(|(k, v)| (k.replace('_', "-"), v.clone())),
            );
        }
        for name in self.sections.keys() {
            if !crate::COMMANDS.contains(&name.as_str()) {
                return Err(UsageError(format!(
                    "config has a section for unknown command {name:?}"
                ))
                .into());
            }
        }
        Ok(Resolver {
            values,
            echo: Vec::new(),
        })
    }
}

/// Resolves each setting once and records the effective value.
#[derive(Debug)]
pub struct Resolver {
    values: Table,
    echo: Vec<(String, String)>,
}

impl Resolver {
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> anyhow::Result<T>
    where
        T: DeserializeOwned + Display,
    {
        let from_file = self.values.remove(key);
        let value = match (flag, from_file) {
            (Some(v), _) => v,
            (None, Some(v)) => v
                .try_into()
                .map_err(|e| UsageError(format!("config key {key:?}: {e}")))?,
            (None, None) => default,
        };
        self.echo.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    /// Like `get`, for values parsed from text (accepts TOML strings or
    /// numbers).
    pub fn parsed<T>(&mut self, key: &str, flag: Option<T>, default: T) -> anyhow::Result<T>
    where
        T: std::str::FromStr + Display,
        T::Err: Display,
    {
        let from_file = self.values.remove(key);
        let value = match (flag, from_file) {
            (Some(v), _) => v,
            (None, Some(toml::Value::String(s))) => s
                .parse()
                .map_err(|e| UsageError(format!("config key {key:?}: {e}")))?,
            (None, Some(v)) => v
                .to_string()
                .parse()
                .map_err(|e| UsageError(format!("config key {key:?}: {e}")))?,
            (None, None) => default,
        };
        self.echo.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    pub fn flag(&mut self, key: &str, flag: bool) -> anyhow::Result<bool> {
        self.get(key, flag.then_some(true), false)
    }

    /// Fails on config keys that no setting consumed.
    pub fn finish(self) -> anyhow::Result<Vec<(String, String)>> {
        if let Some(key) = self.values.keys().next() {
            return Err(UsageError(format!("unknown config key {key:?}")).into());
        }
        Ok(self.echo)
    }
}
