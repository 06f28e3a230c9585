//! Attribute probing: sample with a routed grid while recording the
//! cross-attention of tracked words at every (layer, step), then aggregate
//! the maps per (layer, stage).

use std::fs;
use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array2, Array4, ArrayView2, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{sample, BackendError, DiffusionBackend, SamplerConfig};
use crate::router::{ConditioningGrid, GridError, StagePartition, NUM_LAYERS};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("tracked word `{0}` appears in no cell prompt")]
    AbsentToken(String),
    #[error("word `{0}` is not tracked in this stack")]
    UnknownToken(String),
    #[error("stacks differ in {0}")]
    Incompatible(&'static str),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ProbeSpec {
    pub grid: ConditioningGrid,
    /// Words whose attention is recorded; multi-piece words are matched as
    /// contiguous piece sequences.
    pub tracked: Vec<String>,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackMetadata {
    pub tokens: Vec<String>,
    pub timesteps: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub grid_sha256: String,
    pub seed: u64,
    /// Whether every map was rescaled to max 1.
    pub normalized: bool,
}

/// Cross-attention maps indexed by (layer, token, step).
///
/// `layers[i]` holds layer `i + 1` with shape `(tokens, steps, r, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapStack {
    pub meta: StackMetadata,
    pub layers: Vec<Array4<f32>>,
}

/// Start positions of every contiguous occurrence of `pieces` in `tokens`.
fn occurrences(tokens: &[String], pieces: &[String]) -> Vec<usize> {
    if pieces.is_empty() || pieces.len() > tokens.len() {
        return Vec::new();
    }
    (0..=tokens.len() - pieces.len())
        .filter(|&i| tokens[i..i + pieces.len()] == *pieces)
        .collect()
}

impl AttentionMapStack {
    pub fn n_steps(&self) -> usize {
        self.meta.timesteps.len()
    }

    pub fn token_index(&self, token: &str) -> Result<usize, ProbeError> {
        self.meta
            .tokens
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| ProbeError::UnknownToken(token.into()))
    }

    /// Map of `token` at 1-based `layer` and denoising step index `step`.
    pub fn map(&self, layer: usize, step: usize, token: &str) -> Result<ArrayView2<'_, f32>, ProbeError> {
        let k = self.token_index(token)?;
        let l = self.layers.get(layer.wrapping_sub(1)).ok_or(GridError::LayerOutOfRange(layer))?;
        Ok(l.slice(s![k, step, .., ..]))
    }

    /// Rescales every map to a maximum of 1; all-zero maps stay zero.
    pub fn normalize(&mut self) {
        for layer in &mut self.layers {
            for mut per_token in layer.outer_iter_mut() {
                for mut m in per_token.outer_iter_mut() {
                    let max = m.fold(0.0f32, |a, &b| a.max(b));
                    if max > 0.0 {
                        m.mapv_inplace(|v| v / max);
                    }
                }
            }
        }
        self.meta.normalized = true;
    }

    /// Appends the steps of `other`, which must track the same words.
    pub fn concat(&self, other: &Self) -> Result<Self, ProbeError> {
        if self.meta.tokens != other.meta.tokens {
            return Err(ProbeError::Incompatible("tracked tokens"));
        }
        if self.meta.resolutions != other.meta.resolutions {
            return Err(ProbeError::Incompatible("layer resolutions"));
        }
        if self.meta.normalized != other.meta.normalized {
            return Err(ProbeError::Incompatible("normalization"));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("same map shapes"))
            .collect();
        let mut meta = self.meta.clone();
        meta.timesteps.extend(&other.meta.timesteps);
        Ok(Self { meta, layers })
    }

    /// Writes `stack.json` plus one `layerNN.npy` of shape `(tokens, steps, r, r)` per layer.
    pub fn write_dir(&self, dir: &Path) -> Result<(), ProbeError> {
        fs::create_dir_all(dir)?;
        let meta = serde_json::to_string_pretty(&self.meta).map_err(std::io::Error::other)?;
        fs::write(dir.join("stack.json"), meta + "\n")?;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut f = std::io::BufWriter::new(fs::File::create(dir.join(format!("layer{:02}.npy", i + 1)))?);
            crate::npy::write_f32(&layer.clone().into_dyn(), &mut f)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, ProbeError> {
        let meta: StackMetadata =
            serde_json::from_str(&fs::read_to_string(dir.join("stack.json"))?).map_err(std::io::Error::other)?;
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        for i in 0..meta.resolutions.len() {
            let a = crate::npy::read_f32(std::io::BufReader::new(fs::File::open(
                dir.join(format!("layer{:02}.npy", i + 1)),
            )?))?;
            let r = meta.resolutions[i];
            let shape = IxDyn(&[meta.tokens.len(), meta.timesteps.len(), r, r]);
            if a.raw_dim() != shape {
                return Err(ProbeError::Incompatible("stored map shape"));
            }
            layers.push(a.into_dimensionality().expect("checked rank"));
        }
        Ok(Self { meta, layers })
    }
}

/// Samples `spec.grid` on `backend`, recording the attention of every
/// tracked word at every layer and step. A word's map is the elementwise max
/// over its pieces and occurrences; layers whose prompt lacks the word get a
/// zero map.
pub fn run_probe(spec: &ProbeSpec, backend: &dyn DiffusionBackend) -> Result<(RgbImage, AttentionMapStack), ProbeError> {
    let pieces: Vec<Vec<String>> = spec.tracked.iter().map(|w| backend.tokenize(w)).collect();
    let cell_tokens: Vec<Vec<String>> = spec
        .grid
        .cells()
        .map(|(_, cell)| match &cell.embedded {
            Some(c) => c.tokens.clone(),
            None => backend.tokenize(cell.text_or_empty()),
        })
        .collect();
    for (word, p) in spec.tracked.iter().zip(&pieces) {
        if !cell_tokens.iter().any(|toks| !occurrences(toks, p).is_empty()) {
            return Err(ProbeError::AbsentToken(word.clone()));
        }
    }

    let config = SamplerConfig {
        capture_attention: true,
        ..spec.sampler.clone()
    };
    let out = sample(backend, &spec.grid, &config)?;
    let captured = out.attention.expect("capture requested");
    let resolutions: Vec<usize> = backend.descriptor().layer_resolutions.iter().map(|&r| r as usize).collect();
    let mut layers: Vec<Array4<f32>> = resolutions
        .iter()
        .map(|&r| Array4::zeros((spec.tracked.len(), captured.len(), r, r)))
        .collect();
    for (step, cap) in captured.iter().enumerate() {
        for (l, att) in cap.layers.iter().enumerate() {
            for (k, p) in pieces.iter().enumerate() {
                let mut dst = layers[l].slice_mut(s![k, step, .., ..]);
                for start in occurrences(&att.tokens, p) {
                    for j in start..start + p.len() {
                        dst.zip_mut_with(&att.weights.index_axis(Axis(0), j), |d, &w| *d = d.max(w));
                    }
                }
            }
        }
    }
    let stack = AttentionMapStack {
        meta: StackMetadata {
            tokens: spec.tracked.clone(),
            timesteps: out.timesteps,
            resolutions,
            grid_sha256: sha256_hex(spec.grid.to_json().as_bytes()),
            seed: spec.sampler.seed,
            normalized: false,
        },
        layers,
    };
    Ok((out.image, stack))
}

/// Area-weighted 1-D resampling matrix; every row sums to 1.
fn area_weights(n_in: usize, n_out: usize) -> Array2<f64> {
    let mut w = Array2::zeros((n_out, n_in));
    let ratio = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
        for j in (lo.floor() as usize)..(hi.ceil() as usize).min(n_in) {
            let overlap = hi.min(j as f64 + 1.0) - lo.max(j as f64);
            if overlap > 0.0 {
                w[[i, j]] = overlap / ratio;
            }
        }
    }
    w
}

/// Resizes a map by area averaging. The mean value is preserved, so the
/// total mass scales exactly with the pixel count.
pub fn resample_area(map: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let wy = area_weights(h, out_h);
    let wx = area_weights(w, out_w);
    wy.dot(&map.mapv(f64::from)).dot(&wx.t())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub layer: usize,
    pub stage: String,
    pub n_maps: usize,
    /// Mean activation of the cell; `None` when no step falls in the stage.
    pub saliency: Option<f64>,
    #[serde(skip)]
    pub mean_map: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSummary {
    pub token: String,
    pub resolution: usize,
    /// Layer-major: cell `(layer, stage)` is at `(layer - 1) * n_stages + stage`.
    pub cells: Vec<SummaryCell>,
    pub n_stages: usize,
}

impl AttentionSummary {
    pub fn cell(&self, layer: usize, stage: usize) -> &SummaryCell {
        &self.cells[(layer - 1) * self.n_stages + stage]
    }
}

/// Mean map per (layer, stage) at the largest layer resolution, with its
/// mean activation as saliency.
pub fn summarize_attention(
    stack: &AttentionMapStack,
    token: &str,
    stages: &StagePartition,
) -> Result<AttentionSummary, ProbeError> {
    let k = stack.token_index(token)?;
    let res = stack.meta.resolutions.iter().copied().max().unwrap_or(0);
    let stage_of: Vec<usize> = stack
        .meta
        .timesteps
        .iter()
        .map(|&t| stages.locate(t))
        .collect::<Result<_, _>>()?;
    let mut cells = Vec::with_capacity(stack.layers.len() * stages.len());
    for (l, layer) in stack.layers.iter().enumerate() {
        for (si, stage) in stages.stages().iter().enumerate() {
            let mut acc = Array2::<f64>::zeros((res, res));
            let mut n = 0;
            for (step, _) in stage_of.iter().enumerate().filter(|(_, &s)| s == si) {
                acc += &resample_area(layer.slice(s![k, step, .., ..]), res, res);
                n += 1;
            }
            let mean_map = (n > 0).then(|| acc / n as f64);
            cells.push(SummaryCell {
                layer: l + 1,
                stage: stage.id.clone(),
                n_maps: n,
                saliency: mean_map.as_ref().map(|m| m.mean().unwrap_or(0.0)),
                mean_map,
            });
        }
    }
    Ok(AttentionSummary {
        token: token.into(),
        resolution: res,
        cells,
        n_stages: stages.len(),
    })
}

/// Black → red → yellow → white.
pub fn hot_ramp(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let ch = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(v), ch(v - 1.0), ch(v - 2.0)]
}

/// Renders `map` normalized by its own maximum, each value drawn as a
/// `scale`×`scale` block.
pub fn render_heatmap(map: &Array2<f64>, scale: u32) -> RgbImage {
    let max = map.fold(0.0f64, |a, &b| a.max(b));
    let (h, w) = map.dim();
    let scale = scale.max(1);
    RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let v = map[[(y / scale) as usize, (x / scale) as usize]];
        image::Rgb(hot_ramp(if max > 0.0 { v / max } else { 0.0 }))
    })
}
