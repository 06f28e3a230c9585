//! Routed DDIM sampling with classifier-free guidance.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{BackendError, DiffusionBackend, LayerAttention, Latent};
use crate::conditioning::Conditioning;
use crate::router::{ConditioningGrid, NUM_LAYERS};
use crate::util::{labeled_rng, normal_vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub capture_attention: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 7.5,
            seed: 0,
            capture_attention: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, max_timestep: usize) -> Result<(), BackendError> {
        if self.steps == 0 {
            return Err(BackendError::InvalidSampler("steps must be at least 1".into()));
        }
        if self.steps > max_timestep {
            return Err(BackendError::TooManySteps {
                steps: self.steps,
                max: max_timestep,
            });
        }
        if !self.guidance_scale.is_finite() {
            return Err(BackendError::InvalidSampler("guidance scale must be finite".into()));
        }
        Ok(())
    }
}

/// Conditional-branch attention of every layer at one denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedStep {
    pub t: usize,
    pub layers: Vec<LayerAttention>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub image: RgbImage,
    pub latent: Latent,
    pub timesteps: Vec<usize>,
    pub attention: Option<Vec<CapturedStep>>,
}

/// Evenly spaced descending timesteps starting at `max_timestep - 1`.
pub fn ddim_timesteps(steps: usize, max_timestep: usize) -> Result<Vec<usize>, BackendError> {
    if steps == 0 {
        return Err(BackendError::InvalidSampler("steps must be at least 1".into()));
    }
    if steps > max_timestep {
        return Err(BackendError::TooManySteps { steps, max: max_timestep });
    }
    let stride = max_timestep / steps;
    Ok((0..steps).map(|i| max_timestep - 1 - i * stride).collect())
}

/// Standard-normal starting latent for `seed`.
pub fn initial_latent(backend: &dyn DiffusionBackend, seed: u64) -> Latent {
    let [c, h, w] = backend.descriptor().latent_shape;
    let mut rng = labeled_rng(seed, "initial-latent");
    normal_vector(&mut rng, c * h * w, 1.0)
        .into_shape_with_order((c, h, w))
        .expect("sized")
}

/// Every cell of a grid encoded once, in the grid's row-major cell order.
#[derive(Debug, Clone)]
pub struct CellEncodings {
    cells: Vec<Conditioning>,
    n_stages: usize,
}

impl CellEncodings {
    pub fn new(backend: &dyn DiffusionBackend, grid: &ConditioningGrid) -> Result<Self, BackendError> {
        let dim = backend.descriptor().embedding_dim;
        let cells = grid
            .cells()
            .map(|(_, cell)| match (&cell.embedded, &cell.text) {
                (Some(c), _) if c.dim() != dim => Err(BackendError::DimensionMismatch {
                    expected: dim,
                    got: c.dim(),
                }),
                (Some(c), _) => Ok(c.clone()),
                (None, Some(text)) => backend.encode_text(text),
                (None, None) => Err(BackendError::Grid(crate::router::GridError::EmptyCell)),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            cells,
            n_stages: grid.stages().len(),
        })
    }

    /// The conditioning each layer receives at `t`.
    pub fn for_timestep<'a>(
        &'a self,
        grid: &ConditioningGrid,
        t: usize,
    ) -> Result<Vec<&'a Conditioning>, BackendError> {
        (1..=NUM_LAYERS)
            .map(|layer| {
                let (subset, stage) = grid.locate_index(layer, t)?;
                Ok(&self.cells[subset * self.n_stages + stage])
            })
            .collect()
    }
}

/// Runs the reverse process; layer `i` at timestep `t` receives
/// `grid.resolve(i, t)`.
pub fn sample(
    backend: &dyn DiffusionBackend,
    grid: &ConditioningGrid,
    config: &SamplerConfig,
) -> Result<SampleOutput, BackendError> {
    sample_from(backend, grid, config, initial_latent(backend, config.seed))
}

/// As [`sample`], from an explicit starting latent.
pub fn sample_from(
    backend: &dyn DiffusionBackend,
    grid: &ConditioningGrid,
    config: &SamplerConfig,
    mut z: Latent,
) -> Result<SampleOutput, BackendError> {
    let desc = backend.descriptor();
    if desc.n_cross_attention_layers != NUM_LAYERS {
        return Err(BackendError::LayerCountMismatch {
            expected: NUM_LAYERS,
            got: desc.n_cross_attention_layers,
        });
    }
    config.validate(desc.max_timestep)?;
    let timesteps = ddim_timesteps(config.steps, desc.max_timestep)?;
    let encodings = CellEncodings::new(backend, grid)?;
    let guided = config.guidance_scale != 1.0;
    let uncond = if guided { Some(backend.encode_text("")?) } else { None };
    let schedule = backend.schedule();
    let mut captured = config.capture_attention.then(Vec::new);

    for (i, &t) in timesteps.iter().enumerate() {
        let conds = encodings.for_timestep(grid, t)?;
        let eps_c = match captured.as_mut() {
            Some(steps) => {
                let (eps, layers) = backend.predict_noise_with_attention(&z, t, &conds)?;
                steps.push(CapturedStep { t, layers });
                eps
            }
            None => backend.predict_noise(&z, t, &conds)?,
        };
        let eps = match &uncond {
            Some(u) => {
                let eps_u = backend.predict_noise(&z, t, &vec![u; NUM_LAYERS])?;
                &eps_u + &((&eps_c - &eps_u) * config.guidance_scale)
            }
            None => eps_c,
        };
        let abar = schedule.alpha_bar(t)?;
        let abar_prev = match timesteps.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        let x0 = ((&z - &(&eps * (1.0 - abar).sqrt())) / abar.sqrt()).mapv(|v| v.clamp(-1.0, 1.0));
        z = &x0 * abar_prev.sqrt() + &eps * (1.0 - abar_prev).sqrt();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::NonFinite(format!("latent at t={t}")));
        }
    }
    Ok(SampleOutput {
        image: backend.decode_latent(&z)?,
        latent: z,
        timesteps,
        attention: captured,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyBackend, ToyConfig};
    use crate::router::{CellPrompt, GridMode, LayerPartition, StagePartition};

    #[test]
    fn timesteps_are_trailing_and_descending() {
        assert_eq!(ddim_timesteps(4, 1000).unwrap(), vec![999, 749, 499, 249]);
        assert_eq!(ddim_timesteps(1000, 1000).unwrap().last(), Some(&0));
        assert!(matches!(ddim_timesteps(1001, 1000), Err(BackendError::TooManySteps { .. })));
        assert!(ddim_timesteps(0, 1000).is_err());
    }

    #[test]
    fn same_seed_same_image() {
        let b = ToyBackend::new(ToyConfig::default());
        let grid = ConditioningGrid::uniform(CellPrompt::text("a red cube")).unwrap();
        let cfg = SamplerConfig {
            steps: 10,
            ..Default::default()
        };
        let a = sample(&b, &grid, &cfg).unwrap();
        let c = sample(&b, &grid, &cfg).unwrap();
        assert_eq!(a.image, c.image);
        assert_eq!(a.latent, c.latent);
    }

    #[test]
    fn routed_grid_changes_output() {
        let b = ToyBackend::new(ToyConfig::default());
        let uniform = ConditioningGrid::uniform(CellPrompt::text("a photo")).unwrap();
        let routed = ConditioningGrid::from_fn(
            GridMode::Joint,
            LayerPartition::canonical(),
            StagePartition::canonical(),
            |subset, _| CellPrompt::text(if subset == "coarse" { "a green dog" } else { "a photo" }),
        )
        .unwrap();
        let cfg = SamplerConfig {
            steps: 10,
            ..Default::default()
        };
        let a = sample(&b, &uniform, &cfg).unwrap();
        let c = sample(&b, &routed, &cfg).unwrap();
        assert_ne!(a.latent, c.latent);
    }

    #[test]
    fn captures_one_entry_per_step() {
        let b = ToyBackend::new(ToyConfig::default());
        let grid = ConditioningGrid::uniform(CellPrompt::text("a red cat")).unwrap();
        let cfg = SamplerConfig {
            steps: 5,
            capture_attention: true,
            ..Default::default()
        };
        let out = sample(&b, &grid, &cfg).unwrap();
        let cap = out.attention.unwrap();
        assert_eq!(cap.len(), 5);
        assert!(cap.iter().all(|s| s.layers.len() == 16));
        assert_eq!(cap[0].t, 999);
    }
}
