//! Evaluation: token-semantic similarity, pairwise disentanglement and the
//! loss ablation.
//!
//! Every protocol first produces per-image [`ImageRecord`]s and then derives
//! its report with [`aggregate`], so reports can be recomputed from the
//! persisted records alone.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use image::RgbImage;
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{COLORS, OBJECTS, STYLES_EVAL, STYLES_TRAIN};
use crate::backend::{sample, BackendError, DiffusionBackend, SamplerConfig};
use crate::inversion::{
    invert, InversionConfig, InversionError, InversionOutput, Method, TokenSet, TOKEN_C, TOKEN_L, TOKEN_O, TOKEN_S,
};
use crate::palette::{extract_palette, name_color, palette_phrase, PaletteError, COLOR_VOCABULARY};
use crate::router::{
    expand_prompt, CellPrompt, ConditioningGrid, ExpandPolicy, GridError, TokenSchedule, COARSE, NUM_LAYERS,
};
use crate::util::{labeled_rng, sha256_hex, unit_vector};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no candidates")]
    NoCandidates,
    #[error("encoder: {0}")]
    Encoder(String),
    #[error("no ground truth for {0}")]
    MissingGroundTruth(Attribute),
    #[error("invalid pair `{0}`")]
    InvalidPair(String),
    #[error("{method} output has no token {token} for held attribute {attribute}")]
    MissingHeldToken {
        method: Method,
        attribute: Attribute,
        token: String,
    },
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Inversion(#[from] InversionError),
    #[error(transparent)]
    Palette(#[from] PaletteError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::DimensionMismatch(a.len(), b.len()));
    }
    let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// A joint image-text embedding model.
pub trait JointEncoder: Send + Sync {
    fn embed_image(&self, image: &RgbImage) -> Result<Array1<f64>, EvalError>;
    fn embed_text(&self, text: &str) -> Result<Array1<f64>, EvalError>;
}

/// Index of the candidate whose text embedding is most cosine-similar to
/// `image_embedding`; ties go to the earlier candidate.
pub fn nn_index(
    image_embedding: &Array1<f64>,
    candidates: &[&str],
    encoder: &dyn JointEncoder,
) -> Result<usize, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let s = cosine(image_embedding, &encoder.embed_text(c)?)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

pub fn nn_label<'a>(image: &RgbImage, candidates: &[&'a str], encoder: &dyn JointEncoder) -> Result<&'a str, EvalError> {
    let e = encoder.embed_image(image)?;
    Ok(candidates[nn_index(&e, candidates, encoder)?])
}

/// Deterministic stand-in for a joint image-text encoder.
///
/// Axis 0 is a constant bias shared by every embedding, axes `1..=11` are
/// the color vocabulary (pixel shares for images, word counts for text),
/// and the remaining axes hold hashed word directions for text and a fixed
/// random projection of a 4×4 thumbnail for images.
#[derive(Debug, Clone)]
pub struct ToyClip {
    seed: u64,
    semantic_dim: usize,
    projection: Array2<f64>,
}

const THUMB: u32 = 4;
const STOPWORDS: [&str; 12] = [
    "a", "an", "the", "of", "in", "and", "photo", "colors", "colored", "style", "following", "layout",
];

impl Default for ToyClip {
    fn default() -> Self {
        Self::new(0xc11b, 32)
    }
}

impl ToyClip {
    pub fn new(seed: u64, semantic_dim: usize) -> Self {
        let mut rng = labeled_rng(seed, "clip-projection");
        let n_in = (THUMB * THUMB * 3) as usize;
        let mut projection = Array2::zeros((semantic_dim, n_in));
        for mut row in projection.rows_mut() {
            row.assign(&unit_vector(&mut rng, n_in));
        }
        Self {
            seed,
            semantic_dim,
            projection,
        }
    }

    pub fn dim(&self) -> usize {
        1 + COLORS.len() + self.semantic_dim
    }

    fn words(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| c.is_whitespace() || c == ',' || c == '.')
            .filter(|w| !w.is_empty() && !(w.starts_with('<') && w.ends_with('>')))
            .map(str::to_lowercase)
            .filter(|w| !STOPWORDS.contains(&w.as_str()))
    }
}

impl JointEncoder for ToyClip {
    fn embed_image(&self, image: &RgbImage) -> Result<Array1<f64>, EvalError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(EvalError::Encoder("empty image".into()));
        }
        let mut v = Array1::zeros(self.dim());
        v[0] = 0.1;
        let n = (image.width() * image.height()) as f64;
        for px in image.pixels() {
            let name = name_color(px.0);
            let k = COLOR_VOCABULARY.iter().position(|c| c.name == name).expect("vocabulary name");
            v[1 + k] += 1.0 / n;
        }
        let thumb = image::imageops::resize(image, THUMB, THUMB, image::imageops::FilterType::Triangle);
        let x = Array1::from_iter(thumb.pixels().flat_map(|p| p.0.map(|c| c as f64 / 255.0 - 0.5)));
        let sem = self.projection.dot(&x) * 0.5;
        v.slice_mut(ndarray::s![1 + COLORS.len()..]).assign(&sem);
        Ok(v)
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>, EvalError> {
        let mut v = Array1::zeros(self.dim());
        v[0] = 0.1;
        for w in Self::words(text) {
            match COLORS.iter().position(|c| *c == w) {
                Some(k) => v[1 + k] += 1.0,
                None => {
                    let mut rng = labeled_rng(self.seed, &format!("clip-word:{w}"));
                    let d = unit_vector(&mut rng, self.semantic_dim);
                    let mut tail = v.slice_mut(ndarray::s![1 + COLORS.len()..]);
                    tail += &d;
                }
            }
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Color,
    Object,
    Style,
    Layout,
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attribute::Color => "color",
            Attribute::Object => "object",
            Attribute::Style => "style",
            Attribute::Layout => "layout",
        })
    }
}

impl std::str::FromStr for Attribute {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "color" => Ok(Attribute::Color),
            "object" => Ok(Attribute::Object),
            "style" => Ok(Attribute::Style),
            "layout" => Ok(Attribute::Layout),
            _ => Err(EvalError::InvalidPair(s.into())),
        }
    }
}

impl Attribute {
    /// Learned token of the joint method.
    pub fn token(self) -> &'static str {
        match self {
            Attribute::Color => TOKEN_C,
            Attribute::Object => TOKEN_O,
            Attribute::Style => TOKEN_S,
            Attribute::Layout => TOKEN_L,
        }
    }

    /// Values swept when this attribute comes from the text prompt.
    pub fn sweep_list(self) -> &'static [&'static str] {
        match self {
            Attribute::Color => &COLORS,
            Attribute::Object => &OBJECTS,
            Attribute::Style => &STYLES_EVAL,
            Attribute::Layout => &[],
        }
    }

    /// Prompt describing `value` for this attribute alone.
    pub fn describe(self, value: &str) -> String {
        match self {
            Attribute::Color => format!("a {value} colored photo"),
            Attribute::Object => format!("a photo of {value}"),
            Attribute::Style => format!("a photo in {value} style"),
            Attribute::Layout => format!("a photo following layout {value}"),
        }
    }
}

/// An evaluation pair: the first attribute comes from the reference, the
/// second is swept through its vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub held: Attribute,
    pub swept: Attribute,
}

impl Pair {
    pub const ALL: [Pair; 6] = [
        Pair::new(Attribute::Layout, Attribute::Color),
        Pair::new(Attribute::Layout, Attribute::Object),
        Pair::new(Attribute::Layout, Attribute::Style),
        Pair::new(Attribute::Color, Attribute::Object),
        Pair::new(Attribute::Color, Attribute::Style),
        Pair::new(Attribute::Object, Attribute::Style),
    ];

    const fn new(held: Attribute, swept: Attribute) -> Self {
        Self { held, swept }
    }

    /// Prompt for the joint method with the held token and a swept value.
    fn joint_prompt(self, value: &str) -> String {
        let h = self.held.token();
        match (self.held, self.swept) {
            (Attribute::Layout, Attribute::Color) => format!("a {value} colored photo following layout {h}"),
            (Attribute::Layout, Attribute::Object) => format!("a photo of {value} following layout {h}"),
            (Attribute::Layout, Attribute::Style) => format!("a photo in {value} style following layout {h}"),
            (Attribute::Color, Attribute::Object) => format!("a {h} colored photo of {value}"),
            (Attribute::Color, Attribute::Style) => format!("a {h} colored photo in {value} style"),
            (Attribute::Object, Attribute::Style) => format!("a photo of {h} in {value} style"),
            _ => unreachable!("pairs are built from Pair::ALL"),
        }
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.held, self.swept)
    }
}

impl std::str::FromStr for Pair {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        Pair::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| EvalError::InvalidPair(s.into()))
    }
}

/// Ground-truth texts of a reference image. Layout has none.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTargets {
    /// Dominant-palette phrase, e.g. `red, blue and white colors`.
    pub color: Option<String>,
    pub object: Option<String>,
    pub style: Option<String>,
}

impl EvalTargets {
    /// Palette phrase from `reference`, the given class, and the style
    /// picked by nearest-neighbor lookup over the training style pool.
    pub fn from_reference(
        reference: &RgbImage,
        class_label: Option<&str>,
        encoder: &dyn JointEncoder,
        config: &InversionConfig,
    ) -> Result<Self, EvalError> {
        let palette = extract_palette(reference, config.palette_size)?;
        let styles: Vec<String> = STYLES_TRAIN.iter().map(|s| Attribute::Style.describe(s)).collect();
        let refs: Vec<&str> = styles.iter().map(String::as_str).collect();
        let style = STYLES_TRAIN[nn_index(&encoder.embed_image(reference)?, &refs, encoder)?];
        Ok(Self {
            color: Some(palette_phrase(&palette, config.phrase_colors)),
            object: class_label.map(|c| c.trim().to_string()).filter(|c| !c.is_empty()),
            style: Some(style.to_string()),
        })
    }

    pub fn get(&self, attribute: Attribute) -> Option<&str> {
        match attribute {
            Attribute::Color => self.color.as_deref(),
            Attribute::Object => self.object.as_deref(),
            Attribute::Style => self.style.as_deref(),
            Attribute::Layout => None,
        }
    }

    /// Descriptive prompt of the ground truth, if any.
    pub fn text(&self, attribute: Attribute) -> Option<String> {
        Some(match attribute {
            Attribute::Color => format!("a photo in {}", self.color.as_deref()?),
            a => a.describe(self.get(a)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Images per setting.
    pub n_images: usize,
    /// Image `i` uses sampler seed `seed + i`.
    pub seed: u64,
    pub sampler_steps: usize,
    pub guidance_scale: f64,
    /// Generation threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_images: 64,
            seed: 0,
            sampler_steps: 50,
            guidance_scale: 7.5,
            workers: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_images == 0 {
            return Err(EvalError::InvalidConfig("n_images must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(EvalError::InvalidConfig("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_images as u64).map(|i| self.seed + i).collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler_steps,
            guidance_scale: self.guidance_scale,
            seed,
            capture_attention: false,
        }
    }

    fn run<T: Send>(&self, job: impl FnOnce() -> T + Send) -> Result<T, EvalError> {
        match self.workers {
            None => Ok(job()),
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map(|pool| pool.install(job))
                .map_err(|e| EvalError::InvalidConfig(e.to_string())),
        }
    }
}

/// One persisted score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// `image_image`, `text_text` or `pair`, optionally prefixed by an
    /// ablation variant (`l_r_only.image_image`).
    pub metric: String,
    /// Token attribute or pair name.
    pub group: String,
    /// Swept value; empty when nothing is swept.
    pub setting: String,
    pub index: usize,
    pub seed: u64,
    pub score: f64,
    pub sim_swept: Option<f64>,
    pub sim_held: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub group: String,
    pub score: f64,
    pub n_images: usize,
    /// Space-separated sorted distinct seeds.
    pub seeds: String,
    pub config_hash: String,
}

fn record_key(r: &ImageRecord) -> (&str, &str, &str, usize) {
    (&r.metric, &r.group, &r.setting, r.index)
}

/// Report rows from per-image records: within each `(metric, group)` the
/// score is the mean over settings of the per-setting mean. Records are
/// sorted first, so the result does not depend on their order.
pub fn aggregate(records: &[ImageRecord], config_hash: &str) -> Vec<ReportRow> {
    let mut sorted: Vec<&ImageRecord> = records.iter().collect();
    sorted.sort_by(|a, b| record_key(a).cmp(&record_key(b)));
    let mut groups: BTreeMap<(&str, &str), BTreeMap<&str, Vec<&ImageRecord>>> = BTreeMap::new();
    for r in sorted {
        groups
            .entry((&r.metric, &r.group))
            .or_default()
            .entry(&r.setting)
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((metric, group), settings)| {
            let mut total = 0.0;
            let mut n = 0;
            let mut seeds = std::collections::BTreeSet::new();
            for recs in settings.values() {
                total += recs.iter().map(|r| r.score).sum::<f64>() / recs.len() as f64;
                n += recs.len();
                seeds.extend(recs.iter().map(|r| r.seed));
            }
            ReportRow {
                metric: metric.into(),
                group: group.into(),
                score: total / settings.len() as f64,
                n_images: n,
                seeds: seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
                config_hash: config_hash.into(),
            }
        })
        .collect()
}

pub fn write_records(records: &[ImageRecord], w: impl Write) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_records(r: impl Read) -> Result<Vec<ImageRecord>, EvalError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(EvalError::from)
}

pub fn write_report(rows: &[ReportRow], w: impl Write) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Samples one image per seed in parallel; results keep seed order.
fn generate(
    backend: &dyn DiffusionBackend,
    grid: &ConditioningGrid,
    config: &EvalConfig,
) -> Result<Vec<RgbImage>, EvalError> {
    let seeds = config.seeds();
    config.run(|| {
        seeds
            .par_iter()
            .map(|&s| Ok(sample(backend, grid, &config.sampler(s))?.image))
            .collect::<Result<Vec<_>, EvalError>>()
    })?
}

/// Token and ground-truth prompts of the token-semantic protocol.
pub fn semantic_prompts(attribute: Attribute, targets: &EvalTargets) -> Result<(String, String), EvalError> {
    let gt = targets.get(attribute).ok_or(EvalError::MissingGroundTruth(attribute))?;
    Ok(match attribute {
        Attribute::Color => ("a <c> colored photo".into(), format!("a {gt} colored photo")),
        Attribute::Object => ("a photo of <o>".into(), format!("a photo of {gt}")),
        Attribute::Style => ("a <s> style photo".into(), format!("a {gt} style photo")),
        Attribute::Layout => return Err(EvalError::MissingGroundTruth(attribute)),
    })
}

/// For each of color, object and style: `n` images from the token prompt
/// and `n` from the ground-truth prompt with matched seeds, scored by the
/// image-image cosine of each matched pair; plus the cosine between the two
/// prompts' pooled text embeddings.
pub fn token_semantic_eval(
    tokens: &TokenSet,
    targets: &EvalTargets,
    backend: &mut dyn DiffusionBackend,
    encoder: &dyn JointEncoder,
    config: &EvalConfig,
) -> Result<Vec<ImageRecord>, EvalError> {
    config.validate()?;
    tokens.install(backend)?;
    let backend: &dyn DiffusionBackend = backend;
    let schedule = tokens.schedule()?;
    let mut records = Vec::new();
    for attribute in [Attribute::Color, Attribute::Object, Attribute::Style] {
        let (tok_prompt, gt_prompt) = semantic_prompts(attribute, targets)?;
        let group = attribute.token().to_string();
        let tok_grid = expand_prompt(&tok_prompt, &schedule, ExpandPolicy::ActiveCellsOnly)?;
        let gt_grid = ConditioningGrid::uniform(CellPrompt::text(&gt_prompt))?;
        let tok_images = generate(backend, &tok_grid, config)?;
        let gt_images = generate(backend, &gt_grid, config)?;
        for (i, (a, b)) in tok_images.iter().zip(&gt_images).enumerate() {
            let score = cosine(&encoder.embed_image(a)?, &encoder.embed_image(b)?)?;
            records.push(ImageRecord {
                metric: "image_image".into(),
                group: group.clone(),
                setting: String::new(),
                index: i,
                seed: config.seed + i as u64,
                score,
                sim_swept: None,
                sim_held: None,
            });
        }
        let tt = cosine(
            &backend.pooled_text_embedding(&tok_prompt)?,
            &backend.pooled_text_embedding(&gt_prompt)?,
        )?;
        records.push(ImageRecord {
            metric: "text_text".into(),
            group,
            setting: String::new(),
            index: 0,
            seed: config.seed,
            score: tt,
            sim_swept: None,
            sim_held: None,
        });
    }
    Ok(records)
}

/// Layers (1-based) whose per-layer vectors carry `attribute` in the
/// per-layer baseline: coarse layers for object and layout, the rest for
/// color and style.
pub fn p16_retained_layers(attribute: Attribute) -> Vec<usize> {
    let coarse = crate::router::LayerPartition::canonical();
    let ci = coarse.index_of(COARSE).expect("canonical has coarse");
    let coarse_layers = &coarse.subsets()[ci].layers;
    (1..=NUM_LAYERS)
        .filter(|l| coarse_layers.contains(l) == matches!(attribute, Attribute::Object | Attribute::Layout))
        .collect()
}

/// Deciles (1-based) whose per-stage vectors carry `attribute` in the
/// per-stage baseline: the first four for color, style and layout, the
/// middle four for object.
pub fn s10_retained_stages(attribute: Attribute) -> Vec<usize> {
    match attribute {
        Attribute::Object => (5..=8).collect(),
        _ => (1..=4).collect(),
    }
}

/// Generation grid for `pair` with swept `value` under `method`.
pub fn pair_grid(tokens: &TokenSet, pair: Pair, value: &str) -> Result<ConditioningGrid, EvalError> {
    let schedule: TokenSchedule = tokens.schedule()?;
    let missing = |token: String| EvalError::MissingHeldToken {
        method: tokens.method,
        attribute: pair.held,
        token,
    };
    match tokens.method {
        Method::Matte => {
            let tok = pair.held.token();
            if tokens.get(tok).is_none() {
                return Err(missing(tok.into()));
            }
            Ok(expand_prompt(&pair.joint_prompt(value), &schedule, ExpandPolicy::ActiveCellsOnly)?)
        }
        method @ (Method::P16 | Method::S10) => {
            let text = pair.swept.describe(value);
            let retained: Vec<String> = match method {
                Method::P16 => p16_retained_layers(pair.held).iter().map(|l| format!("<x{l}>")).collect(),
                _ => s10_retained_stages(pair.held).iter().map(|k| format!("<y{k}>")).collect(),
            };
            if let Some(t) = retained.iter().find(|t| tokens.get(t).is_none()) {
                return Err(missing(t.clone()));
            }
            let (layers, stages) = method.partitions();
            Ok(ConditioningGrid::from_fn(schedule.mode(), layers, stages, |subset, stage| {
                let tok = match method {
                    Method::P16 => format!("<x{}>", subset.trim_start_matches('L')),
                    _ => format!("<y{}>", stage.trim_start_matches('s')),
                };
                if retained.contains(&tok) {
                    CellPrompt::text(format!("{tok} {text}"))
                } else {
                    CellPrompt::text(&text)
                }
            })?)
        }
    }
}

/// Held attribute from the learned tokens, swept attribute over its
/// vocabulary. Each image scores the mean of its image-text similarity to
/// the swept value and, when the held attribute has ground truth, to that
/// ground truth.
pub fn pair_disentanglement_eval(
    output: &InversionOutput,
    pair: Pair,
    targets: &EvalTargets,
    backend: &mut dyn DiffusionBackend,
    encoder: &dyn JointEncoder,
    config: &EvalConfig,
) -> Result<Vec<ImageRecord>, EvalError> {
    pair_disentanglement_eval_over(output, pair, pair.swept.sweep_list(), targets, backend, encoder, config)
}

/// As [`pair_disentanglement_eval`] with an explicit sweep list.
pub fn pair_disentanglement_eval_over(
    output: &InversionOutput,
    pair: Pair,
    sweep: &[&str],
    targets: &EvalTargets,
    backend: &mut dyn DiffusionBackend,
    encoder: &dyn JointEncoder,
    config: &EvalConfig,
) -> Result<Vec<ImageRecord>, EvalError> {
    config.validate()?;
    if sweep.is_empty() {
        return Err(EvalError::InvalidConfig("empty sweep".into()));
    }
    output.tokens.install(backend)?;
    let backend: &dyn DiffusionBackend = backend;
    let held_text = targets.text(pair.held);
    let held_emb = held_text.as_deref().map(|t| encoder.embed_text(t)).transpose()?;
    let mut records = Vec::new();
    for value in sweep {
        let grid = pair_grid(&output.tokens, pair, value)?;
        let swept_emb = encoder.embed_text(&pair.swept.describe(value))?;
        for (i, img) in generate(backend, &grid, config)?.iter().enumerate() {
            let e = encoder.embed_image(img)?;
            let sim_swept = cosine(&e, &swept_emb)?;
            let sim_held = held_emb.as_ref().map(|h| cosine(&e, h)).transpose()?;
            let score = match sim_held {
                Some(h) => (sim_swept + h) / 2.0,
                None => sim_swept,
            };
            records.push(ImageRecord {
                metric: format!("pair.{}", output.tokens.method),
                group: pair.to_string(),
                setting: value.to_string(),
                index: i,
                seed: config.seed + i as u64,
                score,
                sim_swept: Some(sim_swept),
                sim_held,
            });
        }
    }
    Ok(records)
}

pub const ABLATION_RECON_ONLY: &str = "l_r_only";
pub const ABLATION_FULL: &str = "full";

/// Inverts twice (reconstruction only, then the configured regularizer
/// weights) and runs the token-semantic protocol on each result. Metrics
/// are prefixed with the variant.
pub fn ablation_eval(
    reference: &RgbImage,
    class_label: &str,
    inversion: &InversionConfig,
    targets: &EvalTargets,
    backend: &mut dyn DiffusionBackend,
    encoder: &dyn JointEncoder,
    config: &EvalConfig,
) -> Result<Vec<ImageRecord>, EvalError> {
    let variants = [
        (
            ABLATION_RECON_ONLY,
            InversionConfig {
                lambda_cs: 0.0,
                lambda_o: 0.0,
                ..inversion.clone()
            },
        ),
        (ABLATION_FULL, inversion.clone()),
    ];
    let mut records = Vec::new();
    for (name, cfg) in variants {
        let out = invert(backend, reference, class_label, &cfg)?;
        for mut r in token_semantic_eval(&out.tokens, targets, backend, encoder, config)? {
            r.metric = format!("{name}.{}", r.metric);
            records.push(r);
        }
    }
    Ok(records)
}
