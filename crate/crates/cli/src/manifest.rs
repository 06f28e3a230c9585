use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use matte_core::util::sha256_file;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything needed to re-run a command. Written before any output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: &impl Serialize) -> Result<Self, CliError> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: argv.to_vec(),
            config: serde_json::to_value(config)?,
            seeds: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let hash = sha256_file(path)
            .map_err(|e| CliError::new(crate::error::Category::Io, format!("{}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
