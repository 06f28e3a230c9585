//! Learning attribute tokens from one reference image.
//!
//! Each step samples a timestep, noises the encoded reference, routes a
//! training prompt per (layer subset, stage) cell, and updates only the
//! tokens active at that timestep. The joint method learns `<c>`, `<o>`,
//! `<s>`, `<l>` with the color-style and object regularizers; the
//! `p16` (one token per layer) and `s10` (one token per tenth of the
//! timestep range) baselines use the reconstruction loss alone.

mod adam;
mod bundle;
mod losses;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use image::RgbImage;
use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::STYLES_TRAIN;
use crate::backend::{BackendError, DiffusionBackend, Latent};
use crate::conditioning::Conditioning;
use crate::palette::{extract_palette, palette_phrase, Palette, PaletteError};
use crate::prompt;
use crate::router::{
    Activity, ConditioningGrid, GridError, LayerPartition, StagePartition, TokenSchedule, COARSE, MODERATE_DOWN,
    MODERATE_UP, NUM_LAYERS, STAGE_T1, STAGE_T2, STAGE_T3,
};
use crate::util::{labeled_rng, normal_vector, sha256_hex};

pub use adam::{AdamParams, AdamState};
pub use bundle::{read_bundle, write_bundle, BundleHeader, BundleLine, TokenBundle, BUNDLE_FORMAT, BUNDLE_VERSION};
pub use losses::{
    color_style_grad, color_style_loss, compute_losses, object_grad, object_loss, reconstruction_loss, CsVariant,
    Losses, RegularizerInputs,
};

pub const TOKEN_C: &str = "<c>";
pub const TOKEN_O: &str = "<o>";
pub const TOKEN_S: &str = "<s>";
pub const TOKEN_L: &str = "<l>";

/// Prompt for cells with no active token.
pub const BARE_SCAFFOLD: &str = "a photo";

#[derive(Debug, Error)]
pub enum InversionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Palette(#[from] PaletteError),
    #[error("scaffold for cell {cell} has no slot for active token {token}")]
    MissingSlot { cell: String, token: String },
    #[error("invalid inversion config: {0}")]
    InvalidConfig(String),
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite {what} at step {step} (t={t})")]
    NonFinite { step: usize, t: usize, what: String },
    #[error("bundle: {0}")]
    Bundle(String),
}

/// Which token layout is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// `<c>`, `<o>`, `<s>`, `<l>` routed over layer subsets and stages.
    Matte,
    /// Sixteen tokens `<x1>`..`<x16>`, one per layer, constant over time.
    P16,
    /// Ten tokens `<y1>`..`<y10>`, one per timestep decile, shared by all layers.
    S10,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Matte => "matte",
            Method::P16 => "p16",
            Method::S10 => "s10",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "matte" => Ok(Method::Matte),
            "p16" => Ok(Method::P16),
            "s10" => Ok(Method::S10),
            other => Err(format!("unknown method `{other}` (expected matte, p16 or s10)")),
        }
    }
}

impl Method {
    pub fn partitions(self) -> (LayerPartition, StagePartition) {
        match self {
            Method::Matte => (LayerPartition::canonical(), StagePartition::canonical()),
            Method::P16 => (LayerPartition::per_layer(), StagePartition::single()),
            Method::S10 => (LayerPartition::single(), StagePartition::deciles()),
        }
    }

    pub fn default_activity(self) -> BTreeMap<String, Activity> {
        let mut tokens = BTreeMap::new();
        match self {
            Method::Matte => {
                let moderate = [MODERATE_DOWN, MODERATE_UP];
                tokens.insert(TOKEN_C.into(), Activity::new(moderate, [STAGE_T1, STAGE_T2]));
                tokens.insert(TOKEN_S.into(), Activity::new(moderate, [STAGE_T1, STAGE_T2]));
                tokens.insert(TOKEN_O.into(), Activity::new([COARSE], [STAGE_T2, STAGE_T3]));
                tokens.insert(TOKEN_L.into(), Activity::new([COARSE], [STAGE_T1]));
            }
            Method::P16 => {
                for l in 1..=NUM_LAYERS {
                    tokens.insert(format!("<x{l}>"), Activity::new([format!("L{l}").as_str()], ["all"]));
                }
            }
            Method::S10 => {
                for k in 1..=10 {
                    tokens.insert(format!("<y{k}>"), Activity::new(["all"], [format!("s{k}").as_str()]));
                }
            }
        }
        tokens
    }

    pub fn default_schedule(self) -> TokenSchedule {
        let (layers, stages) = self.partitions();
        TokenSchedule::new(layers, stages, self.default_activity()).expect("built-in schedule is valid")
    }

    /// Token names in a stable order: `c, o, s, l` or numeric.
    pub fn token_names(self) -> Vec<String> {
        match self {
            Method::Matte => [TOKEN_C, TOKEN_O, TOKEN_S, TOKEN_L].map(String::from).to_vec(),
            Method::P16 => (1..=NUM_LAYERS).map(|l| format!("<x{l}>")).collect(),
            Method::S10 => (1..=10).map(|k| format!("<y{k}>")).collect(),
        }
    }
}

/// How tokens start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenInit {
    /// `<o>` starts at the class word's embedding, the rest small random.
    ClassWord,
    /// Every token small random.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub lambda_cs: f64,
    pub lambda_o: f64,
    pub cs_variant: CsVariant,
    pub seed: u64,
    pub token_init: TokenInit,
    pub init_sigma: f64,
    pub palette_size: usize,
    pub phrase_colors: usize,
    pub adam: AdamParams,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            steps: 500,
            batch: 1,
            lambda_cs: 0.1,
            lambda_o: 0.1,
            cs_variant: CsVariant::Absolute,
            seed: 0,
            token_init: TokenInit::ClassWord,
            init_sigma: 0.01,
            palette_size: crate::palette::DEFAULT_PALETTE_SIZE,
            phrase_colors: crate::palette::DEFAULT_PHRASE_COLORS,
            adam: AdamParams::default(),
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<(), InversionError> {
        let bad = |m: &str| Err(InversionError::InvalidConfig(m.into()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.lambda_cs >= 0.0 && self.lambda_o >= 0.0) {
            return bad("lambda_cs and lambda_o must be non-negative");
        }
        if !(self.init_sigma.is_finite() && self.init_sigma >= 0.0) {
            return bad("init_sigma must be non-negative");
        }
        if self.palette_size == 0 || self.phrase_colors == 0 {
            return bad("palette_size and phrase_colors must be at least 1");
        }
        Ok(())
    }
}

/// Anchors for the regularizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_label: String,
    pub palette: Palette,
    pub palette_phrase: String,
    pub c_gt: Array1<f64>,
    pub o_gt: Array1<f64>,
    pub style_pool: Vec<String>,
}

impl GroundTruth {
    pub fn from_reference(
        backend: &dyn DiffusionBackend,
        reference: &RgbImage,
        class_label: &str,
        config: &InversionConfig,
    ) -> Result<Self, InversionError> {
        let class_label = class_label.trim();
        if class_label.is_empty() {
            return Err(InversionError::InvalidConfig("class label is empty".into()));
        }
        let palette = extract_palette(reference, config.palette_size)?;
        let phrase = palette_phrase(&palette, config.phrase_colors);
        Ok(Self {
            class_label: class_label.to_string(),
            c_gt: backend.token_embedding(&phrase)?,
            o_gt: backend.token_embedding(class_label)?,
            palette,
            palette_phrase: phrase,
            style_pool: STYLES_TRAIN.iter().map(|s| s.to_string()).collect(),
        })
    }
}

/// Per-cell prompt templates used during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaffolds {
    /// Keyed by `(subset id, stage id)`. Cells absent here, or with no
    /// active token, use [`BARE_SCAFFOLD`].
    pub cells: BTreeMap<(String, String), String>,
}

impl Scaffolds {
    pub fn for_method(method: Method) -> Self {
        let mut cells = BTreeMap::new();
        let (layers, stages) = method.partitions();
        for subset in layers.subsets() {
            for stage in stages.stages() {
                let key = (subset.id.clone(), stage.id.clone());
                let template = match method {
                    Method::Matte => match subset.id.as_str() {
                        MODERATE_DOWN | MODERATE_UP => Some("a <c> colored photo in <s> style".to_string()),
                        COARSE if stage.id == STAGE_T1 => Some("a photo in <l> layout".to_string()),
                        COARSE => Some("a photo of <o>".to_string()),
                        _ => None,
                    },
                    Method::P16 => Some(format!("a photo of <x{}>", &subset.id[1..])),
                    Method::S10 => Some(format!("a photo of <y{}>", &stage.id[1..])),
                };
                if let Some(t) = template {
                    cells.insert(key, t);
                }
            }
        }
        Self { cells }
    }
}

/// `(token, subset)` pairs active at `t`.
pub fn active_tokens(t: usize, schedule: &TokenSchedule) -> Result<BTreeSet<(String, String)>, InversionError> {
    Ok(schedule.active_at(t)?)
}

/// The routed training prompts at timestep `t`: each cell carries its
/// scaffold with exactly the tokens active in (subset, stage of `t`).
pub fn build_training_conditioning(
    t: usize,
    schedule: &TokenSchedule,
    scaffolds: &Scaffolds,
) -> Result<ConditioningGrid, InversionError> {
    let stages = schedule.stages();
    let stage_id = stages.stages()[stages.locate(t)?].id.clone();
    let mut texts = BTreeMap::new();
    for subset in schedule.layers().subsets() {
        let active: BTreeSet<&str> = schedule
            .tokens()
            .keys()
            .filter(|tok| schedule.is_active_in(tok, &subset.id, &stage_id))
            .map(String::as_str)
            .collect();
        let text = if active.is_empty() {
            BARE_SCAFFOLD.to_string()
        } else {
            let template = scaffolds
                .cells
                .get(&(subset.id.clone(), stage_id.clone()))
                .map(String::as_str)
                .unwrap_or(BARE_SCAFFOLD);
            let present = prompt::placeholders(template);
            if let Some(missing) = active.iter().find(|tok| !present.iter().any(|p| p == *tok)) {
                return Err(InversionError::MissingSlot {
                    cell: format!("{}.{stage_id}", subset.id),
                    token: missing.to_string(),
                });
            }
            prompt::retain_placeholders(template, |tok| active.contains(tok))
        };
        texts.insert(subset.id.clone(), text);
    }
    Ok(ConditioningGrid::from_fn(
        schedule.mode(),
        schedule.layers().clone(),
        stages.clone(),
        |subset, _| texts[subset].as_str().into(),
    )?)
}

/// Learned vectors with their activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSet {
    pub method: Method,
    pub values: BTreeMap<String, Array1<f64>>,
    pub activity: BTreeMap<String, Activity>,
}

impl TokenSet {
    pub fn schedule(&self) -> Result<TokenSchedule, InversionError> {
        let (layers, stages) = self.method.partitions();
        Ok(TokenSchedule::new(layers, stages, self.activity.clone())?)
    }

    pub fn install(&self, backend: &mut dyn DiffusionBackend) -> Result<(), InversionError> {
        for (tok, v) in &self.values {
            backend.set_placeholder(tok, v.clone())?;
        }
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&Array1<f64>> {
        self.values.get(token)
    }
}

/// One optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub l_r: f64,
    pub l_cs: Option<f64>,
    pub l_o: Option<f64>,
    pub l_inv: f64,
    pub active: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionOutput {
    pub tokens: TokenSet,
    pub log: TrainingLog,
    pub ground_truth: Option<GroundTruth>,
    pub config: InversionConfig,
    pub reference_sha256: String,
}

/// The random draws of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    pub t: usize,
    pub noise: Vec<Latent>,
    pub style: Option<String>,
}

/// Loss and the gradient of `L_inv` for every token (zeros for tokens
/// that do not enter the loss).
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub losses: Losses,
    pub active: BTreeSet<String>,
    pub grads: BTreeMap<String, Array1<f64>>,
}

/// Step-wise optimizer over a backend's placeholder slots.
pub struct Inverter<'a> {
    backend: &'a mut dyn DiffusionBackend,
    method: Method,
    schedule: TokenSchedule,
    scaffolds: Scaffolds,
    config: InversionConfig,
    ground_truth: Option<GroundTruth>,
    style_vectors: BTreeMap<String, Array1<f64>>,
    z0: Latent,
    rng: ChaCha8Rng,
    adam: BTreeMap<String, AdamState>,
    log: TrainingLog,
    reference_sha256: String,
}

impl<'a> Inverter<'a> {
    /// Prepares a run. `class_label` is required for the joint method and
    /// ignored by the baselines.
    pub fn new(
        backend: &'a mut dyn DiffusionBackend,
        reference: &RgbImage,
        class_label: Option<&str>,
        method: Method,
        config: InversionConfig,
    ) -> Result<Self, InversionError> {
        config.validate()?;
        let reference = backend.prepare_image(reference);
        let reference_sha256 = sha256_hex(reference.as_raw());
        let z0 = backend.encode_image(&reference)?;
        let ground_truth = match method {
            Method::Matte => {
                let label = class_label.ok_or_else(|| InversionError::InvalidConfig("class label required".into()))?;
                Some(GroundTruth::from_reference(&*backend, &reference, label, &config)?)
            }
            _ => None,
        };
        let mut style_vectors = BTreeMap::new();
        if let Some(gt) = &ground_truth {
            if gt.style_pool.is_empty() {
                return Err(InversionError::InvalidConfig("style pool is empty".into()));
            }
            for s in &gt.style_pool {
                style_vectors.insert(s.clone(), backend.token_embedding(s)?);
            }
        }
        let dim = backend.descriptor().embedding_dim;
        let mut init_rng = labeled_rng(config.seed, "token-init");
        let mut adam = BTreeMap::new();
        for tok in method.token_names() {
            let v = match (&ground_truth, config.token_init) {
                (Some(gt), TokenInit::ClassWord) if tok == TOKEN_O => gt.o_gt.clone(),
                _ => normal_vector(&mut init_rng, dim, config.init_sigma),
            };
            backend.set_placeholder(&tok, v)?;
            adam.insert(tok, AdamState::new(dim));
        }
        Ok(Self {
            backend,
            method,
            schedule: method.default_schedule(),
            scaffolds: Scaffolds::for_method(method),
            rng: labeled_rng(config.seed, "inversion"),
            config,
            ground_truth,
            style_vectors,
            z0,
            adam,
            log: TrainingLog::default(),
            reference_sha256,
        })
    }

    pub fn schedule(&self) -> &TokenSchedule {
        &self.schedule
    }

    pub fn scaffolds(&self) -> &Scaffolds {
        &self.scaffolds
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.ground_truth.as_ref()
    }

    pub fn backend(&self) -> &dyn DiffusionBackend {
        &*self.backend
    }

    pub fn reference_latent(&self) -> &Latent {
        &self.z0
    }

    pub fn steps_done(&self) -> usize {
        self.log.records.len()
    }

    /// Current token values.
    pub fn tokens(&self) -> TokenSet {
        let values = self
            .method
            .token_names()
            .into_iter()
            .map(|tok| {
                let v = self.backend.placeholder(&tok).expect("registered").clone();
                (tok, v)
            })
            .collect();
        TokenSet {
            method: self.method,
            values,
            activity: self.schedule.tokens().clone(),
        }
    }

    /// Draws the next step's timestep, noise and style.
    pub fn draw(&mut self) -> StepSample {
        let t = self.rng.random_range(0..self.backend.descriptor().max_timestep);
        let [c, h, w] = self.backend.descriptor().latent_shape;
        let noise = (0..self.config.batch)
            .map(|_| {
                normal_vector(&mut self.rng, c * h * w, 1.0)
                    .into_shape_with_order((c, h, w))
                    .expect("sized")
            })
            .collect();
        let style = self.ground_truth.as_ref().map(|gt| {
            let i = self.rng.random_range(0..gt.style_pool.len());
            gt.style_pool[i].clone()
        });
        StepSample { t, noise, style }
    }

    /// Loss and token gradients at the current values for a fixed draw.
    pub fn evaluate(&self, sample: &StepSample) -> Result<Evaluation, InversionError> {
        let t = sample.t;
        let grid = build_training_conditioning(t, &self.schedule, &self.scaffolds)?;
        let conds: Vec<Conditioning> = (1..=NUM_LAYERS)
            .map(|layer| Ok(self.backend.encode_text(grid.resolve(layer, t)?.text_or_empty())?))
            .collect::<Result<_, InversionError>>()?;
        let refs: Vec<&Conditioning> = conds.iter().collect();
        let dim = self.backend.descriptor().embedding_dim;
        let mut grads: BTreeMap<String, Array1<f64>> = self
            .method
            .token_names()
            .into_iter()
            .map(|tok| (tok, Array1::zeros(dim)))
            .collect();
        let batch = sample.noise.len() as f64;
        let mut preds = Vec::with_capacity(sample.noise.len());
        for eps in &sample.noise {
            let z_t = self.backend.q_sample(&self.z0, t, eps)?;
            let n = eps.len() as f64;
            let (pred, layer_grads) = self
                .backend
                .predict_noise_vjp(&z_t, t, &refs, &mut |p| (p - eps) * (2.0 / (n * batch)))?;
            for (cond, g) in conds.iter().zip(&layer_grads) {
                for (tok, acc) in grads.iter_mut() {
                    for j in cond.positions_of(tok) {
                        *acc += &g.row(j);
                    }
                }
            }
            preds.push(pred);
        }
        let active = self.schedule.active_tokens_at(t)?;
        let reg = match (&self.ground_truth, &sample.style) {
            (Some(gt), Some(style)) => Some(RegularizerInputs {
                c: active.contains(TOKEN_C).then(|| self.backend.placeholder(TOKEN_C)).flatten(),
                o: active.contains(TOKEN_O).then(|| self.backend.placeholder(TOKEN_O)).flatten(),
                style: &self.style_vectors[style],
                c_gt: &gt.c_gt,
                o_gt: &gt.o_gt,
            }),
            _ => None,
        };
        let losses = compute_losses(
            &sample.noise,
            &preds,
            reg,
            self.config.lambda_cs,
            self.config.lambda_o,
            self.config.cs_variant,
        )?;
        if let Some(r) = reg {
            if let Some(c) = r.c {
                let g = color_style_grad(c, r.style, r.c_gt, self.config.cs_variant)? * self.config.lambda_cs;
                *grads.get_mut(TOKEN_C).expect("c") += &g;
            }
            if let Some(o) = r.o {
                *grads.get_mut(TOKEN_O).expect("o") += &(object_grad(o, r.o_gt)? * self.config.lambda_o);
            }
        }
        Ok(Evaluation { losses, active, grads })
    }

    /// Runs one step with a fresh draw and returns its evaluation.
    pub fn step(&mut self) -> Result<Evaluation, InversionError> {
        let sample = self.draw();
        self.step_with(&sample)
    }

    /// Runs one step with the given draw.
    pub fn step_with(&mut self, sample: &StepSample) -> Result<Evaluation, InversionError> {
        let step = self.log.records.len();
        let eval = self.evaluate(sample)?;
        let l = &eval.losses;
        let finite = [Some(l.l_r), l.l_cs, l.l_o, Some(l.l_inv)].into_iter().flatten().all(f64::is_finite);
        if !finite {
            return Err(InversionError::NonFinite {
                step,
                t: sample.t,
                what: format!("loss {l:?}"),
            });
        }
        for tok in &eval.active {
            let g = &eval.grads[tok];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(InversionError::NonFinite {
                    step,
                    t: sample.t,
                    what: format!("gradient of {tok}"),
                });
            }
            let mut v = self.backend.placeholder(tok).expect("registered").clone();
            self.adam
                .get_mut(tok)
                .expect("state")
                .update(&mut v, g, self.config.lr, &self.config.adam);
            self.backend.set_placeholder(tok, v)?;
        }
        self.log.records.push(StepRecord {
            step,
            t: sample.t,
            l_r: l.l_r,
            l_cs: l.l_cs,
            l_o: l.l_o,
            l_inv: l.l_inv,
            active: eval.active.iter().cloned().collect(),
            style: sample.style.clone(),
        });
        Ok(eval)
    }

    pub fn finish(self) -> InversionOutput {
        InversionOutput {
            tokens: self.tokens(),
            log: self.log,
            ground_truth: self.ground_truth,
            config: self.config,
            reference_sha256: self.reference_sha256,
        }
    }
}

/// Joint-method inversion for `config.steps` steps. The backend keeps the
/// learned tokens afterwards.
pub fn invert(
    backend: &mut dyn DiffusionBackend,
    reference: &RgbImage,
    class_label: &str,
    config: &InversionConfig,
) -> Result<InversionOutput, InversionError> {
    run(backend, reference, Some(class_label), Method::Matte, config)
}

/// Baseline inversion (`p16` or `s10`) with the reconstruction loss only.
pub fn baseline_invert(
    backend: &mut dyn DiffusionBackend,
    reference: &RgbImage,
    method: Method,
    config: &InversionConfig,
) -> Result<InversionOutput, InversionError> {
    if method == Method::Matte {
        return Err(InversionError::InvalidConfig("baseline method must be p16 or s10".into()));
    }
    let config = InversionConfig {
        lambda_cs: 0.0,
        lambda_o: 0.0,
        token_init: TokenInit::Random,
        ..config.clone()
    };
    run(backend, reference, None, method, &config)
}

fn run(
    backend: &mut dyn DiffusionBackend,
    reference: &RgbImage,
    class_label: Option<&str>,
    method: Method,
    config: &InversionConfig,
) -> Result<InversionOutput, InversionError> {
    let mut inv = Inverter::new(backend, reference, class_label, method, config.clone())?;
    for _ in 0..config.steps {
        inv.step()?;
    }
    Ok(inv.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyBackend, ToyConfig};
    use crate::router::{FINE_DOWN, FINE_UP, STAGE_T4};

    fn reference() -> RgbImage {
        RgbImage::from_fn(16, 16, |x, y| {
            if y < 8 {
                image::Rgb([220, 30, 30])
            } else if x < 8 {
                image::Rgb([30, 30, 220])
            } else {
                image::Rgb([240, 240, 240])
            }
        })
    }

    fn texts(grid: &ConditioningGrid, t: usize) -> Vec<String> {
        (1..=16).map(|l| grid.resolve(l, t).unwrap().text_or_empty().to_string()).collect()
    }

    #[test]
    fn active_tokens_by_stage() {
        let s = Method::Matte.default_schedule();
        let pairs = |t| active_tokens(t, &s).unwrap();
        let expect: BTreeSet<(String, String)> = [
            (TOKEN_L, COARSE),
            (TOKEN_C, MODERATE_DOWN),
            (TOKEN_C, MODERATE_UP),
            (TOKEN_S, MODERATE_DOWN),
            (TOKEN_S, MODERATE_UP),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        assert_eq!(pairs(900), expect);
        assert_eq!(pairs(500), [(TOKEN_O.to_string(), COARSE.to_string())].into_iter().collect());
        assert!(pairs(100).is_empty());
        assert!(active_tokens(1000, &s).is_err());
    }

    #[test]
    fn training_prompts_follow_schedule() {
        let s = Method::Matte.default_schedule();
        let sc = Scaffolds::for_method(Method::Matte);
        let g = build_training_conditioning(900, &s, &sc).unwrap();
        assert_eq!(g.cell(COARSE, STAGE_T1).unwrap().text_or_empty(), "a photo in <l> layout");
        assert_eq!(g.cell(MODERATE_UP, STAGE_T1).unwrap().text_or_empty(), "a <c> colored photo in <s> style");
        assert_eq!(g.cell(FINE_DOWN, STAGE_T1).unwrap().text_or_empty(), "a photo");
        let g = build_training_conditioning(500, &s, &sc).unwrap();
        let at500 = texts(&g, 500);
        for (i, text) in at500.iter().enumerate() {
            let expect = if (6..=9).contains(&(i + 1)) { "a photo of <o>" } else { "a photo" };
            assert_eq!(text, expect);
        }
        let g = build_training_conditioning(100, &s, &sc).unwrap();
        assert!(texts(&g, 100).iter().all(|t| t == "a photo"));
        assert_eq!(g.cell(FINE_UP, STAGE_T4).unwrap().text_or_empty(), "a photo");
    }

    #[test]
    fn scaffold_without_slot_is_rejected() {
        let s = Method::Matte.default_schedule();
        let mut sc = Scaffolds::for_method(Method::Matte);
        sc.cells.insert((COARSE.into(), STAGE_T1.into()), "a photo".into());
        assert!(matches!(
            build_training_conditioning(950, &s, &sc),
            Err(InversionError::MissingSlot { ref token, .. }) if token == TOKEN_L
        ));
    }

    #[test]
    fn baseline_prompts() {
        let s = Method::P16.default_schedule();
        let g = build_training_conditioning(10, &s, &Scaffolds::for_method(Method::P16)).unwrap();
        assert_eq!(texts(&g, 10)[4], "a photo of <x5>");
        let s = Method::S10.default_schedule();
        let g = build_training_conditioning(250, &s, &Scaffolds::for_method(Method::S10)).unwrap();
        assert!(texts(&g, 250).iter().all(|t| t == "a photo of <y8>"));
    }

    #[test]
    fn class_word_init_puts_o_on_anchor() {
        let mut b = ToyBackend::new(ToyConfig::default());
        let inv = Inverter::new(&mut b, &reference(), Some("dog"), Method::Matte, InversionConfig::default()).unwrap();
        let gt = inv.ground_truth().unwrap().clone();
        assert_eq!(gt.palette_phrase, "red, white and blue colors");
        let toks = inv.tokens();
        assert_eq!(toks.get(TOKEN_O).unwrap(), &gt.o_gt);
        assert!(toks.get(TOKEN_C).unwrap().iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let mut b = ToyBackend::new(ToyConfig::default());
        let cfg = InversionConfig {
            steps: 0,
            ..Default::default()
        };
        let out = baseline_invert(&mut b, &reference(), Method::S10, &cfg).unwrap();
        assert_eq!(out.tokens.values.len(), 10);
        let mut b2 = ToyBackend::new(ToyConfig::default());
        let inv = Inverter::new(&mut b2, &reference(), None, Method::S10, InversionConfig {
            token_init: TokenInit::Random,
            lambda_cs: 0.0,
            lambda_o: 0.0,
            ..cfg
        })
        .unwrap();
        assert_eq!(inv.tokens(), out.tokens);
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn inactive_tokens_get_zero_gradient() {
        let mut b = ToyBackend::new(ToyConfig::default());
        let mut inv = Inverter::new(&mut b, &reference(), Some("dog"), Method::Matte, InversionConfig::default()).unwrap();
        for _ in 0..20 {
            let e = inv.step().unwrap();
            for (tok, g) in &e.grads {
                if !e.active.contains(tok) {
                    assert!(g.iter().all(|&v| v == 0.0), "{tok}");
                }
            }
        }
    }

    #[test]
    fn same_seed_same_log() {
        let cfg = InversionConfig {
            steps: 15,
            ..Default::default()
        };
        let mut b1 = ToyBackend::new(ToyConfig::default());
        let mut b2 = ToyBackend::new(ToyConfig::default());
        let a = invert(&mut b1, &reference(), "dog", &cfg).unwrap();
        let c = invert(&mut b2, &reference(), "dog", &cfg).unwrap();
        assert_eq!(a, c);
    }
}
