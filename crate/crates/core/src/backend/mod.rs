//! Diffusion backend interface and the deterministic CPU toy backend.
//!
//! A backend bundles a text encoder with learnable placeholder slots, a
//! denoiser that accepts one conditioning sequence per cross-attention
//! layer, a noise schedule and a latent codec. Sampling and inversion are
//! written against [`DiffusionBackend`] only.

mod sampler;
mod schedule;
mod text;
mod toy;

use std::path::PathBuf;

use image::RgbImage;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::Conditioning;
use crate::router::GridError;

pub use sampler::{
    ddim_timesteps, initial_latent, sample, sample_from, CapturedStep, CellEncodings, SampleOutput, SamplerConfig,
};
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use text::{tokenize, TextEncoderConfig, ToyTextEncoder, BOS, EOS};
pub use toy::{InjectionLog, InjectionRecord, ToyBackend, ToyConfig};

/// Latent tensor, `(channels, height, width)`.
pub type Latent = Array3<f64>;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("prompt has {tokens} tokens, context length is {max}")]
    PromptTooLong { tokens: usize, max: usize },
    #[error("unregistered placeholder {0}")]
    UnregisteredPlaceholder(String),
    #[error("`{0}` is not a placeholder token")]
    InvalidPlaceholder(String),
    #[error("word is empty")]
    EmptyWord,
    #[error("timestep {0} out of range")]
    TimestepOutOfRange(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected {expected} per-layer conditionings, got {got}")]
    LayerCountMismatch { expected: usize, got: usize },
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{steps} sampling steps exceed {max} timesteps")]
    TooManySteps { steps: usize, max: usize },
    #[error("invalid sampler config: {0}")]
    InvalidSampler(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}

/// Static facts about a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub n_cross_attention_layers: usize,
    /// Native attention-map resolution per layer.
    pub layer_resolutions: Vec<u32>,
    pub embedding_dim: usize,
    pub max_timestep: usize,
    /// `(channels, height, width)` of latents.
    pub latent_shape: [usize; 3],
    /// `(width, height)` of images accepted by the codec.
    pub image_size: [u32; 2],
    pub schedule: ScheduleParams,
}

/// Latent at a timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Latent,
    pub t: usize,
}

impl LatentState {
    pub fn new(z: Latent, t: usize, max_timestep: usize) -> Result<Self, BackendError> {
        if t >= max_timestep {
            return Err(BackendError::TimestepOutOfRange(t));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::NonFinite("latent".into()));
        }
        Ok(Self { z, t })
    }
}

/// Head-averaged cross-attention of one layer for one denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub resolution: usize,
    pub tokens: Vec<String>,
    /// `(token, y, x)` attention weights.
    pub weights: Array3<f32>,
}

/// The backend contract used by sampling, probing, inversion and
/// evaluation.
pub trait DiffusionBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn schedule(&self) -> &NoiseSchedule;

    fn tokenize(&self, text: &str) -> Vec<String>;

    /// Conditioning sequence for `prompt`; placeholders resolve to their
    /// current values.
    fn encode_text(&self, prompt: &str) -> Result<Conditioning, BackendError>;

    /// Mean input embedding of the tokens of `word`.
    fn token_embedding(&self, word: &str) -> Result<Array1<f64>, BackendError>;

    /// Sequence-pooled text embedding used for text-text similarity.
    fn pooled_text_embedding(&self, prompt: &str) -> Result<Array1<f64>, BackendError> {
        let c = self.encode_text(prompt)?;
        let rows = if c.len() > 2 { 1..c.len() - 1 } else { 0..c.len() };
        let n = rows.len() as f64;
        Ok(c.vectors.slice(ndarray::s![rows, ..]).sum_axis(ndarray::Axis(0)) / n)
    }

    /// Registers or overwrites a learnable placeholder embedding.
    fn set_placeholder(&mut self, token: &str, value: Array1<f64>) -> Result<(), BackendError>;

    fn placeholder(&self, token: &str) -> Option<&Array1<f64>>;

    /// Noise estimate given one conditioning sequence per layer.
    fn predict_noise(&self, z_t: &Latent, t: usize, conds: &[&Conditioning]) -> Result<Latent, BackendError>;

    /// As [`predict_noise`](Self::predict_noise), also returning each layer's
    /// attention weights.
    fn predict_noise_with_attention(
        &self,
        z_t: &Latent,
        t: usize,
        conds: &[&Conditioning],
    ) -> Result<(Latent, Vec<LayerAttention>), BackendError>;

    /// Vector-Jacobian product with respect to the conditionings.
    ///
    /// `loss_grad` maps the prediction to `dL/dprediction`; the return value
    /// is the prediction and `dL/dcond` for every layer (same shape as each
    /// conditioning's `vectors`).
    fn predict_noise_vjp(
        &self,
        z_t: &Latent,
        t: usize,
        conds: &[&Conditioning],
        loss_grad: &mut dyn FnMut(&Latent) -> Latent,
    ) -> Result<(Latent, Vec<Array2<f64>>), BackendError>;

    fn encode_image(&self, image: &RgbImage) -> Result<Latent, BackendError>;

    fn decode_latent(&self, z: &Latent) -> Result<RgbImage, BackendError>;

    /// Resizes an arbitrary image to the codec's input size.
    fn prepare_image(&self, image: &RgbImage) -> RgbImage {
        let [w, h] = self.descriptor().image_size;
        if image.dimensions() == (w, h) {
            image.clone()
        } else {
            image::imageops::resize(image, w, h, image::imageops::FilterType::Triangle)
        }
    }

    fn q_sample(&self, z0: &Latent, t: usize, noise: &Latent) -> Result<Latent, BackendError> {
        self.schedule().q_sample(z0, t, noise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "toy")]
    Toy,
    #[serde(rename = "latent-diffusion")]
    LatentDiffusion,
}

/// `{"backend": "toy" | "latent-diffusion", "weights_path": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
    #[serde(default)]
    pub toy: ToyConfig,
}

impl BackendConfig {
    pub fn toy() -> Self {
        Self {
            backend: BackendKind::Toy,
            weights_path: None,
            toy: ToyConfig::default(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn DiffusionBackend>, BackendError> {
        match self.backend {
            BackendKind::Toy => Ok(Box::new(ToyBackend::new(self.toy.clone()))),
            BackendKind::LatentDiffusion => Err(BackendError::Unavailable(format!(
                "no pretrained latent-diffusion adapter is compiled into this build (weights_path: {})",
                self.weights_path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "unset".into())
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_backend_config() {
        let cfg: BackendConfig = serde_json::from_str(r#"{"backend": "toy"}"#).unwrap();
        assert_eq!(cfg, BackendConfig::toy());
        let ld: BackendConfig =
            serde_json::from_str(r#"{"backend": "latent-diffusion", "weights_path": "/models/sd15"}"#).unwrap();
        assert!(matches!(ld.build(), Err(BackendError::Unavailable(_))));
    }

    #[test]
    fn latent_state_checks_range() {
        assert!(LatentState::new(Latent::zeros((1, 2, 2)), 1000, 1000).is_err());
        assert!(LatentState::new(Latent::from_elem((1, 2, 2), f64::NAN), 3, 1000).is_err());
        assert!(LatentState::new(Latent::zeros((1, 2, 2)), 999, 1000).is_ok());
    }
}
