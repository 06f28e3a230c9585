use serde::{Deserialize, Serialize};

use super::{BackendError, Latent};

/// Noise-schedule parameters. Only the linear DDPM schedule is provided.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub beta_start: f64,
    pub beta_end: f64,
    pub num_timesteps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 0.02,
            num_timesteps: 1000,
        }
    }
}

/// Precomputed DDPM tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(params: ScheduleParams) -> Self {
        let n = params.num_timesteps;
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    params.beta_start
                } else {
                    params.beta_start + (params.beta_end - params.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        let alphas_cumprod = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Self {
            params,
            betas,
            alphas_cumprod,
        }
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, BackendError> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or(BackendError::TimestepOutOfRange(t))
    }

    /// Forward diffusion: `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * noise`.
    pub fn q_sample(&self, z0: &Latent, t: usize, noise: &Latent) -> Result<Latent, BackendError> {
        if z0.shape() != noise.shape() {
            return Err(BackendError::ShapeMismatch(format!(
                "noise shape {:?} differs from latent shape {:?}",
                noise.shape(),
                z0.shape()
            )));
        }
        let abar = self.alpha_bar(t)?;
        let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        Ok(z0 * a + noise * b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn first_alpha_bar_is_one_minus_beta_start() {
        let s = NoiseSchedule::linear(ScheduleParams::default());
        assert_eq!(s.len(), 1000);
        assert!((s.alpha_bar(0).unwrap() - (1.0 - 1e-4)).abs() < 1e-15);
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
        assert!(matches!(s.alpha_bar(1000), Err(BackendError::TimestepOutOfRange(1000))));
    }

    #[test]
    fn q_sample_near_identity_at_zero() {
        let s = NoiseSchedule::linear(ScheduleParams::default());
        let z0 = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c + y * 4 + x) as f64 / 10.0 - 1.0);
        let noise = Array3::from_elem((3, 4, 4), 0.5);
        let zt = s.q_sample(&z0, 0, &noise).unwrap();
        let max_diff = (&zt - &z0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff < 0.01, "{max_diff}");
    }

    #[test]
    fn zero_noise_scales_latent() {
        let s = NoiseSchedule::linear(ScheduleParams::default());
        let z0 = Array3::from_elem((3, 2, 2), 0.8);
        let zt = s.q_sample(&z0, 500, &Array3::zeros((3, 2, 2))).unwrap();
        let expect = s.alpha_bar(500).unwrap().sqrt() * 0.8;
        assert!(zt.iter().all(|v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn mismatched_noise_is_rejected() {
        let s = NoiseSchedule::linear(ScheduleParams::default());
        let err = s.q_sample(&Array3::zeros((3, 2, 2)), 10, &Array3::zeros((3, 2, 3)));
        assert!(matches!(err, Err(BackendError::ShapeMismatch(_))));
    }
}
