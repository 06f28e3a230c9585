//! A small, fully differentiable cross-attention denoiser on CPU.
//!
//! Each of the 16 layers average-pools `z_t` to its resolution, forms
//! queries from the pooled latent, a timestep embedding and a positional
//! table, attends over its own conditioning sequence, and contributes
//! `gain * upsample(attention output)` to a clean-latent estimate `x0_hat`.
//! The noise estimate is
//! `(z_t - sqrt(abar) * x0_hat) / sqrt(1 - abar + kappa)`.
//! All weights are drawn once from a fixed seed.

use std::sync::{Arc, Mutex};

use image::RgbImage;
use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::{
    BackendDescriptor, BackendError, DiffusionBackend, LayerAttention, Latent, NoiseSchedule, ScheduleParams,
    TextEncoderConfig, ToyTextEncoder,
};
use crate::conditioning::Conditioning;
use crate::router::{LayerPartition, NUM_LAYERS};
use crate::util::{labeled_rng, normal_vector};

const TIME_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub text: TextEncoderConfig,
    pub schedule: ScheduleParams,
    pub attention_dim: usize,
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Per-layer resolutions; each must divide `latent_size`.
    pub layer_resolutions: [usize; NUM_LAYERS],
    /// Contribution weight of each layer's output to `x0_hat`.
    pub layer_gains: [f64; NUM_LAYERS],
    pub query_scale: f64,
    pub value_scale: f64,
    pub kappa: f64,
    /// Constant added to `x0_hat`.
    pub x0_bias: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let partition = LayerPartition::canonical();
        let mut layer_gains = [0.0; NUM_LAYERS];
        let mut layer_resolutions = [0; NUM_LAYERS];
        for layer in 1..=NUM_LAYERS {
            let subset = &partition.subsets()[partition.locate(layer).expect("canonical")].id;
            layer_gains[layer - 1] = match subset.as_str() {
                crate::router::COARSE => 2.0,
                crate::router::MODERATE_DOWN | crate::router::MODERATE_UP => 0.1,
                _ => 0.05,
            };
            layer_resolutions[layer - 1] = (partition.resolutions()[layer - 1] / 8) as usize;
        }
        Self {
            seed: 0x7011_d1ff,
            text: TextEncoderConfig::default(),
            schedule: ScheduleParams::default(),
            attention_dim: 16,
            latent_channels: 3,
            latent_size: 16,
            layer_resolutions,
            layer_gains,
            query_scale: 0.7,
            value_scale: 1.0,
            kappa: 0.1,
            x0_bias: 0.5,
        }
    }
}

/// One conditioning delivered to one layer by one denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionRecord {
    pub t: usize,
    /// 1-based layer index.
    pub layer: usize,
    pub conditioning: Conditioning,
}

/// Shared sink for [`InjectionRecord`]s.
pub type InjectionLog = Arc<Mutex<Vec<InjectionRecord>>>;

#[derive(Debug, Clone)]
struct LayerWeights {
    res: usize,
    gain: f64,
    /// `(d_a, C)`
    a: Array2<f64>,
    /// `(d_a, TIME_DIM)`
    bt: Array2<f64>,
    /// `(P, d_a)`
    pos: Array2<f64>,
    /// `(d_a, D)`
    k: Array2<f64>,
    /// `(C, D)`
    v: Array2<f64>,
}

/// Cached forward quantities of one layer.
struct LayerForward {
    q: Array2<f64>,
    vals: Array2<f64>,
    alpha: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    config: ToyConfig,
    descriptor: BackendDescriptor,
    text: ToyTextEncoder,
    schedule: NoiseSchedule,
    layers: Vec<LayerWeights>,
    recorder: Option<InjectionLog>,
}

fn gaussian_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize, sigma: f64) -> Array2<f64> {
    normal_vector(rng, rows * cols, sigma)
        .into_shape_with_order((rows, cols))
        .expect("sized")
}

fn time_embedding(t: usize, max_t: usize) -> Array1<f64> {
    let x = t as f64 / max_t as f64 * std::f64::consts::PI;
    Array1::from(vec![x.sin(), x.cos(), (2.0 * x).sin(), (2.0 * x).cos()])
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Self {
        let d = config.text.embedding_dim;
        let da = config.attention_dim;
        let ch = config.latent_channels;
        let qs = config.query_scale;
        let layers = (0..NUM_LAYERS)
            .map(|i| {
                let res = config.layer_resolutions[i];
                let mut rng = labeled_rng(config.seed, &format!("layer{}", i + 1));
                LayerWeights {
                    res,
                    gain: config.layer_gains[i],
                    a: gaussian_matrix(&mut rng, da, ch, qs),
                    bt: gaussian_matrix(&mut rng, da, TIME_DIM, qs / 2.0),
                    pos: gaussian_matrix(&mut rng, res * res, da, qs / 2.0),
                    k: gaussian_matrix(&mut rng, da, d, 1.0),
                    v: gaussian_matrix(&mut rng, ch, d, config.value_scale),
                }
            })
            .collect();
        let schedule = NoiseSchedule::linear(config.schedule);
        let descriptor = BackendDescriptor {
            name: "toy".into(),
            n_cross_attention_layers: NUM_LAYERS,
            layer_resolutions: config.layer_resolutions.iter().map(|&r| r as u32).collect(),
            embedding_dim: d,
            max_timestep: config.schedule.num_timesteps,
            latent_shape: [ch, config.latent_size, config.latent_size],
            image_size: [config.latent_size as u32; 2],
            schedule: config.schedule,
        };
        Self {
            text: ToyTextEncoder::new(config.text.clone()),
            config,
            descriptor,
            schedule,
            layers,
            recorder: None,
        }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn text_encoder(&self) -> &ToyTextEncoder {
        &self.text
    }

    /// Installs (or removes) a sink that receives every per-layer
    /// conditioning passed to the denoiser.
    pub fn set_recorder(&mut self, log: Option<InjectionLog>) {
        self.recorder = log;
    }

    fn check_inputs(&self, z_t: &Latent, t: usize, conds: &[&Conditioning]) -> Result<(), BackendError> {
        let [c, h, w] = self.descriptor.latent_shape;
        if z_t.dim() != (c, h, w) {
            return Err(BackendError::ShapeMismatch(format!(
                "latent shape {:?}, expected {:?}",
                z_t.shape(),
                [c, h, w]
            )));
        }
        if t >= self.descriptor.max_timestep {
            return Err(BackendError::TimestepOutOfRange(t));
        }
        if conds.len() != NUM_LAYERS {
            return Err(BackendError::LayerCountMismatch {
                expected: NUM_LAYERS,
                got: conds.len(),
            });
        }
        for cond in conds {
            if cond.dim() != self.descriptor.embedding_dim {
                return Err(BackendError::DimensionMismatch {
                    expected: self.descriptor.embedding_dim,
                    got: cond.dim(),
                });
            }
            if cond.is_empty() {
                return Err(BackendError::ShapeMismatch("empty conditioning".into()));
            }
        }
        if let Some(log) = &self.recorder {
            let mut log = log.lock().expect("recorder poisoned");
            for (i, cond) in conds.iter().enumerate() {
                log.push(InjectionRecord {
                    t,
                    layer: i + 1,
                    conditioning: (*cond).clone(),
                });
            }
        }
        Ok(())
    }

    /// `(P, C)` average pool of `z` to `res x res`, row-major positions.
    fn pool(&self, z: &Latent, res: usize) -> Array2<f64> {
        let size = self.config.latent_size;
        let f = size / res;
        let ch = self.config.latent_channels;
        let mut out = Array2::zeros((res * res, ch));
        for c in 0..ch {
            for y in 0..size {
                for x in 0..size {
                    out[[(y / f) * res + x / f, c]] += z[[c, y, x]];
                }
            }
        }
        out / (f * f) as f64
    }

    fn layer_forward(&self, w: &LayerWeights, z_t: &Latent, tau: &Array1<f64>, cond: &Conditioning) -> LayerForward {
        let u = self.pool(z_t, w.res);
        let mut q = u.dot(&w.a.t()) + &w.pos;
        q += &w.bt.dot(tau);
        let keys = cond.vectors.dot(&w.k.t());
        let vals = cond.vectors.dot(&w.v.t());
        let scale = 1.0 / (self.config.attention_dim as f64).sqrt();
        let mut alpha = q.dot(&keys.t()) * scale;
        for mut row in alpha.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        LayerForward { q, vals, alpha }
    }

    fn forward(
        &self,
        z_t: &Latent,
        t: usize,
        conds: &[&Conditioning],
    ) -> Result<(Latent, Vec<LayerForward>), BackendError> {
        self.check_inputs(z_t, t, conds)?;
        let tau = time_embedding(t, self.descriptor.max_timestep);
        let size = self.config.latent_size;
        let mut x0 = Latent::from_elem(z_t.raw_dim(), self.config.x0_bias);
        let mut cache = Vec::with_capacity(NUM_LAYERS);
        for (w, cond) in self.layers.iter().zip(conds) {
            let fwd = self.layer_forward(w, z_t, &tau, cond);
            let out = fwd.alpha.dot(&fwd.vals);
            let f = size / w.res;
            for ((c, y, x), v) in x0.indexed_iter_mut() {
                *v += w.gain * out[[(y / f) * w.res + x / f, c]];
            }
            cache.push(fwd);
        }
        let abar = self.schedule.alpha_bar(t)?;
        let denom = (1.0 - abar + self.config.kappa).sqrt();
        let pred = (z_t - &(x0 * abar.sqrt())) / denom;
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::NonFinite("noise prediction".into()));
        }
        Ok((pred, cache))
    }
}

impl DiffusionBackend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        self.text.tokenize(text)
    }

    fn encode_text(&self, prompt: &str) -> Result<Conditioning, BackendError> {
        self.text.encode(prompt)
    }

    fn token_embedding(&self, word: &str) -> Result<Array1<f64>, BackendError> {
        self.text.token_embedding(word)
    }

    fn set_placeholder(&mut self, token: &str, value: Array1<f64>) -> Result<(), BackendError> {
        self.text.set_placeholder(token, value)
    }

    fn placeholder(&self, token: &str) -> Option<&Array1<f64>> {
        self.text.placeholder(token)
    }

    fn predict_noise(&self, z_t: &Latent, t: usize, conds: &[&Conditioning]) -> Result<Latent, BackendError> {
        Ok(self.forward(z_t, t, conds)?.0)
    }

    fn predict_noise_with_attention(
        &self,
        z_t: &Latent,
        t: usize,
        conds: &[&Conditioning],
    ) -> Result<(Latent, Vec<LayerAttention>), BackendError> {
        let (pred, cache) = self.forward(z_t, t, conds)?;
        let maps = cache
            .iter()
            .zip(&self.layers)
            .zip(conds)
            .map(|((fwd, w), cond)| {
                let r = w.res;
                let weights = Array3::from_shape_fn((cond.len(), r, r), |(j, y, x)| fwd.alpha[[y * r + x, j]] as f32);
                LayerAttention {
                    resolution: r,
                    tokens: cond.tokens.clone(),
                    weights,
                }
            })
            .collect();
        Ok((pred, maps))
    }

    fn predict_noise_vjp(
        &self,
        z_t: &Latent,
        t: usize,
        conds: &[&Conditioning],
        loss_grad: &mut dyn FnMut(&Latent) -> Latent,
    ) -> Result<(Latent, Vec<Array2<f64>>), BackendError> {
        let (pred, cache) = self.forward(z_t, t, conds)?;
        let g = loss_grad(&pred);
        if g.raw_dim() != pred.raw_dim() {
            return Err(BackendError::ShapeMismatch("loss gradient shape".into()));
        }
        let abar = self.schedule.alpha_bar(t)?;
        let dx0 = g * (-abar.sqrt() / (1.0 - abar + self.config.kappa).sqrt());
        let size = self.config.latent_size;
        let scale = 1.0 / (self.config.attention_dim as f64).sqrt();
        let grads = cache
            .iter()
            .zip(&self.layers)
            .map(|(fwd, w)| {
                let f = size / w.res;
                let mut dout = Array2::zeros((w.res * w.res, self.config.latent_channels));
                for ((c, y, x), v) in dx0.indexed_iter() {
                    dout[[(y / f) * w.res + x / f, c]] += w.gain * v;
                }
                let dvals = fwd.alpha.t().dot(&dout);
                let dalpha = dout.dot(&fwd.vals.t());
                let inner = (&fwd.alpha * &dalpha).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = &fwd.alpha * &(dalpha - &inner);
                let dkeys = ds.t().dot(&fwd.q) * scale;
                dvals.dot(&w.v) + dkeys.dot(&w.k)
            })
            .collect();
        Ok((pred, grads))
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Latent, BackendError> {
        let size = self.config.latent_size as u32;
        if image.dimensions() != (size, size) {
            return Err(BackendError::ShapeMismatch(format!(
                "image is {}x{}, toy codec takes {size}x{size}",
                image.width(),
                image.height()
            )));
        }
        if self.config.latent_channels != 3 {
            return Err(BackendError::ShapeMismatch("toy codec needs 3 latent channels".into()));
        }
        Ok(Latent::from_shape_fn((3, size as usize, size as usize), |(c, y, x)| {
            image.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        }))
    }

    fn decode_latent(&self, z: &Latent) -> Result<RgbImage, BackendError> {
        let [c, h, w] = self.descriptor.latent_shape;
        if z.dim() != (c, h, w) || c != 3 {
            return Err(BackendError::ShapeMismatch(format!("latent shape {:?}", z.shape())));
        }
        Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| (z[[ch, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        }))
    }
}
