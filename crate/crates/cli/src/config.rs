//! Run configuration: flags override the config file, which overrides the
//! built-in defaults.

use std::path::Path;

use matte_core::backend::{BackendConfig, BackendKind, SamplerConfig};
use matte_core::eval::EvalConfig;
use matte_core::inversion::InversionConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub inversion: InversionConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::toy(),
            inversion: InversionConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{what} {}: {e}", path.display())))
}

impl RunConfig {
    pub fn load(config: Option<&Path>, backend: Option<&str>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg: RunConfig = match config {
            Some(p) => read_json(p, "config")?,
            None => RunConfig::default(),
        };
        if let Some(b) = backend {
            cfg.backend = match b {
                "toy" => BackendConfig {
                    backend: BackendKind::Toy,
                    ..cfg.backend
                },
                "latent-diffusion" => BackendConfig {
                    backend: BackendKind::LatentDiffusion,
                    ..cfg.backend
                },
                path => read_json(Path::new(path), "backend config")?,
            };
        }
        if let Some(s) = seed {
            cfg.inversion.seed = s;
            cfg.sampler.seed = s;
            cfg.eval.seed = s;
        }
        Ok(cfg)
    }
}
