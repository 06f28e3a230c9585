use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use image::RgbImage;
use matte_core::attributes::OBJECTS;
use matte_core::backend::sample;
use matte_core::eval::{
    ablation_eval, aggregate, nn_label, pair_disentanglement_eval, token_semantic_eval, write_records, write_report,
    Attribute, EvalTargets, ImageRecord, Pair, ToyClip,
};
use matte_core::inversion::{baseline_invert, invert, read_bundle, write_bundle, Method, TokenBundle};
use matte_core::palette::{extract_palette, name_color, palette_phrase};
use matte_core::probe::{render_heatmap, run_probe, summarize_attention, ProbeSpec};
use matte_core::router::{expand_prompt, ConditioningGrid, ExpandPolicy, StagePartition};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::{Cli, Command, GlobalArgs};

const DEFAULT_OUT: &str = "matte-out";

#[derive(Debug, Args)]
pub struct InvertArgs {
    pub image: PathBuf,
    /// Object class of the reference; inferred by nearest-neighbor lookup
    /// over the object list when omitted.
    #[arg(long = "class")]
    pub class_label: Option<String>,
    #[arg(long, default_value = "matte")]
    pub mode: Method,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Prompt spread over the bundle's grid; each cell keeps only its active tokens.
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    pub prompt: Option<String>,
    /// Explicit grid document instead of a prompt.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Put every token in every cell.
    #[arg(long)]
    pub everywhere: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long, default_value = "image.png")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Comma-separated words to track.
    #[arg(long, value_delimiter = ',', required = true)]
    pub track: Vec<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Stage partition for the saliency table: `canonical` or `deciles`.
    #[arg(long, default_value = "canonical")]
    pub stages: String,
    /// Rescale every stored map to max 1.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Args)]
pub struct EvalCommon {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long = "class")]
    pub class_label: Option<String>,
    /// Images per setting.
    #[arg(long)]
    pub n: Option<usize>,
    /// Sampler steps per generated image.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Token-semantic image-image and text-text similarity.
    Tokens {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        common: EvalCommon,
    },
    /// Pairwise disentanglement scores.
    Pairs {
        #[arg(long)]
        bundle: PathBuf,
        /// A pair such as `color-object`, or `all`.
        #[arg(long, default_value = "all")]
        pair: String,
        #[command(flatten)]
        common: EvalCommon,
    },
    /// Reconstruction-only versus full-loss inversion.
    Ablation {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long)]
        inversion_steps: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct PaletteArgs {
    pub image: PathBuf,
    #[arg(long, default_value_t = matte_core::palette::DEFAULT_PALETTE_SIZE)]
    pub colors: usize,
    #[arg(long, default_value_t = matte_core::palette::DEFAULT_PHRASE_COLORS)]
    pub phrase_colors: usize,
}

pub fn dispatch(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.global.config.as_deref(), cli.global.backend.as_deref(), cli.global.seed)?;
    match cli.command {
        Command::Invert(a) => cmd_invert(a, cfg, &cli.global, argv),
        Command::Generate(a) => cmd_generate(a, cfg, &cli.global, argv),
        Command::Probe(a) => cmd_probe(a, cfg, &cli.global, argv),
        Command::Eval(e) => cmd_eval(e, cfg, &cli.global, argv),
        Command::Palette(a) => cmd_palette(a, cfg, &cli.global, argv),
    }
}

fn out_dir(g: &GlobalArgs) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn load_image(path: &Path) -> Result<RgbImage, CliError> {
    Ok(image::open(path)?.to_rgb8())
}

fn load_bundle(path: &Path) -> Result<TokenBundle, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::config(format!("bundle {}: {e}", path.display())))?;
    Ok(read_bundle(std::io::BufReader::new(f))?)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[derive(Serialize)]
struct WithArgs<'a, T: Serialize> {
    #[serde(flatten)]
    run: &'a RunConfig,
    command: T,
}

fn cmd_invert(a: InvertArgs, mut cfg: RunConfig, g: &GlobalArgs, argv: &[String]) -> Result<(), CliError> {
    if let Some(s) = a.steps {
        cfg.inversion.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.inversion.lr = lr;
    }
    cfg.inversion.validate()?;
    let reference = load_image(&a.image)?;
    let mut backend = cfg.backend.build()?;
    let class_label = match (&a.class_label, a.mode) {
        (Some(c), _) => Some(c.clone()),
        (None, Method::Matte) => {
            let prompts: Vec<String> = OBJECTS.iter().map(|o| Attribute::Object.describe(o)).collect();
            let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
            let picked = nn_label(&reference, &refs, &ToyClip::default())?;
            let idx = refs.iter().position(|p| *p == picked).expect("picked from list");
            eprintln!("inferred class: {}", OBJECTS[idx]);
            Some(OBJECTS[idx].to_string())
        }
        (None, _) => None,
    };

    let dir = out_dir(g);
    let bundle_path = dir.join("tokens.bin");
    let mut manifest = RunManifest::new(
        "invert",
        argv,
        &WithArgs {
            run: &cfg,
            command: serde_json::json!({"image": a.image, "class": class_label, "mode": a.mode}),
        },
    )?;
    manifest.seeds = vec![cfg.inversion.seed];
    manifest.input(&a.image)?;
    manifest.outputs = vec![bundle_path.clone()];
    manifest.write(&dir.join("manifest.json"))?;

    let out = match a.mode {
        Method::Matte => invert(backend.as_mut(), &reference, class_label.as_deref().unwrap_or(""), &cfg.inversion)?,
        m => baseline_invert(backend.as_mut(), &reference, m, &cfg.inversion)?,
    };
    let bundle = TokenBundle::from_output(&out, &backend.descriptor().name);
    let mut w = BufWriter::new(fs::File::create(&bundle_path)?);
    write_bundle(&bundle, &mut w)?;
    std::io::Write::flush(&mut w)?;
    if let (Some(first), Some(last)) = (out.log.records.first(), out.log.records.last()) {
        eprintln!("L_inv {:.4} -> {:.4} over {} steps", first.l_inv, last.l_inv, out.log.records.len());
    }
    eprintln!("wrote {}", bundle_path.display());
    Ok(())
}

fn cmd_generate(a: GenerateArgs, mut cfg: RunConfig, g: &GlobalArgs, argv: &[String]) -> Result<(), CliError> {
    if let Some(s) = a.steps {
        cfg.sampler.steps = s;
    }
    if let Some(gs) = a.guidance {
        cfg.sampler.guidance_scale = gs;
    }
    let bundle = load_bundle(&a.bundle)?;
    let tokens = bundle.tokens();
    let grid = match (&a.prompt, &a.spec) {
        (_, Some(spec)) => ConditioningGrid::from_json(&fs::read_to_string(spec)?)?,
        (Some(p), None) => {
            let policy = if a.everywhere {
                ExpandPolicy::Everywhere
            } else {
                ExpandPolicy::ActiveCellsOnly
            };
            expand_prompt(p, &tokens.schedule()?, policy)?
        }
        (None, None) => return Err(CliError::config("either --prompt or --spec is required")),
    };
    let mut backend = cfg.backend.build()?;
    if backend.descriptor().embedding_dim != bundle.header.dim {
        return Err(CliError::config(format!(
            "bundle dimension {} does not match backend dimension {}",
            bundle.header.dim,
            backend.descriptor().embedding_dim
        )));
    }
    cfg.sampler.validate(backend.descriptor().max_timestep)?;

    let dir = out_dir(g);
    let image_path = dir.join(&a.name);
    let mut manifest = RunManifest::new(
        "generate",
        argv,
        &WithArgs {
            run: &cfg,
            command: serde_json::json!({"bundle": a.bundle, "prompt": a.prompt, "spec": a.spec, "everywhere": a.everywhere}),
        },
    )?;
    manifest.seeds = vec![cfg.sampler.seed];
    manifest.input(&a.bundle)?;
    if let Some(s) = &a.spec {
        manifest.input(s)?;
    }
    manifest.outputs = vec![image_path.clone()];
    manifest.write(&dir.join("manifest.json"))?;

    tokens.install(backend.as_mut())?;
    let out = sample(backend.as_ref(), &grid, &cfg.sampler)?;
    save_png(&out.image, &image_path)?;
    eprintln!("wrote {}", image_path.display());
    Ok(())
}

fn cmd_probe(a: ProbeArgs, mut cfg: RunConfig, g: &GlobalArgs, argv: &[String]) -> Result<(), CliError> {
    if let Some(s) = a.steps {
        cfg.sampler.steps = s;
    }
    let stages = match a.stages.as_str() {
        "canonical" => StagePartition::canonical(),
        "deciles" => StagePartition::deciles(),
        other => return Err(CliError::config(format!("unknown stage partition `{other}`"))),
    };
    let grid = ConditioningGrid::from_json(&fs::read_to_string(&a.spec)?)?;
    let backend = cfg.backend.build()?;
    cfg.sampler.validate(backend.descriptor().max_timestep)?;

    let dir = out_dir(g);
    let mut manifest = RunManifest::new(
        "probe",
        argv,
        &WithArgs {
            run: &cfg,
            command: serde_json::json!({"spec": a.spec, "track": a.track, "stages": a.stages, "normalize": a.normalize}),
        },
    )?;
    manifest.seeds = vec![cfg.sampler.seed];
    manifest.input(&a.spec)?;
    manifest.outputs = vec![
        dir.join("image.png"),
        dir.join("stack"),
        dir.join("heatmaps"),
        dir.join("saliency.csv"),
    ];
    manifest.write(&dir.join("manifest.json"))?;

    let spec = ProbeSpec {
        grid,
        tracked: a.track.clone(),
        sampler: cfg.sampler.clone(),
    };
    let (image, mut stack) = run_probe(&spec, backend.as_ref())?;
    save_png(&image, &dir.join("image.png"))?;
    if a.normalize {
        stack.normalize();
    }
    stack.write_dir(&dir.join("stack"))?;

    let mut csv = String::from("token,layer,stage,n_maps,saliency\n");
    for word in &a.track {
        let summary = summarize_attention(&stack, word, &stages)?;
        let heat_dir = dir.join("heatmaps").join(word.replace(' ', "_"));
        fs::create_dir_all(&heat_dir)?;
        let scale = (64 / summary.resolution.max(1)).max(1) as u32;
        for cell in &summary.cells {
            let sal = cell.saliency.map(|s| s.to_string()).unwrap_or_default();
            csv.push_str(&format!("\"{word}\",{},{},{},{sal}\n", cell.layer, cell.stage, cell.n_maps));
            if let Some(m) = &cell.mean_map {
                save_png(&render_heatmap(m, scale), &heat_dir.join(format!("L{:02}_{}.png", cell.layer, cell.stage)))?;
            }
        }
    }
    fs::write(dir.join("saliency.csv"), csv)?;
    eprintln!("wrote probe outputs to {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    protocol: &'a str,
    config_hash: String,
    eval: &'a matte_core::eval::EvalConfig,
    seeds: Vec<u64>,
    targets: &'a EvalTargets,
    bundle_sha256: Option<String>,
    reference_sha256: String,
}

fn eval_paths(g: &GlobalArgs) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let report = g.out.clone().unwrap_or_else(|| Path::new(DEFAULT_OUT).join("report.csv"));
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report").to_string();
    let sib = |suffix: &str| report.with_file_name(format!("{stem}{suffix}"));
    (sib(".records.csv"), sib(".json"), sib(".manifest.json"), report)
}

fn cmd_eval(e: EvalCommand, mut cfg: RunConfig, g: &GlobalArgs, argv: &[String]) -> Result<(), CliError> {
    let (protocol, bundle_path, common) = match &e {
        EvalCommand::Tokens { bundle, common } => ("tokens", Some(bundle), common),
        EvalCommand::Pairs { bundle, common, .. } => ("pairs", Some(bundle), common),
        EvalCommand::Ablation { common, .. } => ("ablation", None, common),
    };
    if let Some(n) = common.n {
        cfg.eval.n_images = n;
    }
    if let Some(s) = common.steps {
        cfg.sampler.steps = s;
    }
    if let EvalCommand::Ablation {
        inversion_steps: Some(s),
        ..
    } = &e
    {
        cfg.inversion.steps = *s;
    }
    cfg.eval.sampler_steps = cfg.sampler.steps;
    cfg.eval.guidance_scale = cfg.sampler.guidance_scale;
    cfg.eval.validate()?;
    let pairs: Vec<Pair> = match &e {
        EvalCommand::Pairs { pair, .. } if pair == "all" => Pair::ALL.to_vec(),
        EvalCommand::Pairs { pair, .. } => vec![pair.parse()?],
        _ => Vec::new(),
    };

    let reference = load_image(&common.reference)?;
    let reference_sha = matte_core::util::sha256_file(&common.reference)?;
    let bundle = bundle_path.map(|p| load_bundle(p)).transpose()?;
    let mut backend = cfg.backend.build()?;
    let prepared = backend.prepare_image(&reference);
    if let Some(b) = &bundle {
        let prepared_sha = matte_core::util::sha256_hex(prepared.as_raw());
        if !b.header.reference_sha256.is_empty() && b.header.reference_sha256 != prepared_sha {
            return Err(CliError::config("reference image does not match the bundle"));
        }
    }
    let class_label = common
        .class_label
        .clone()
        .or_else(|| bundle.as_ref().and_then(|b| b.header.ground_truth.as_ref()).map(|gt| gt.class_label.clone()));
    let encoder = ToyClip::default();
    let targets = EvalTargets::from_reference(&prepared, class_label.as_deref(), &encoder, &cfg.inversion)?;

    let (records_path, sidecar_path, manifest_path, report_path) = eval_paths(g);
    let mut manifest = RunManifest::new(
        &format!("eval {protocol}"),
        argv,
        &WithArgs {
            run: &cfg,
            command: serde_json::json!({"reference": common.reference, "class": class_label, "bundle": bundle_path, "pairs": pairs.iter().map(|p| p.to_string()).collect::<Vec<_>>()}),
        },
    )?;
    manifest.seeds = cfg.eval.seeds();
    manifest.input(&common.reference)?;
    if let Some(p) = bundle_path {
        manifest.input(p)?;
    }
    manifest.outputs = vec![report_path.clone(), records_path.clone(), sidecar_path.clone()];
    manifest.write(&manifest_path)?;

    let records: Vec<ImageRecord> = match (&e, &bundle) {
        (EvalCommand::Tokens { .. }, Some(b)) => {
            token_semantic_eval(&b.tokens(), &targets, backend.as_mut(), &encoder, &cfg.eval)?
        }
        (EvalCommand::Pairs { .. }, Some(b)) => {
            let out = matte_core::inversion::InversionOutput {
                tokens: b.tokens(),
                log: b.log.clone(),
                ground_truth: b.header.ground_truth.clone(),
                config: b.header.config.clone(),
                reference_sha256: b.header.reference_sha256.clone(),
            };
            let mut all = Vec::new();
            for p in &pairs {
                all.extend(pair_disentanglement_eval(&out, *p, &targets, backend.as_mut(), &encoder, &cfg.eval)?);
            }
            all
        }
        (EvalCommand::Ablation { .. }, _) => {
            let class = class_label.ok_or_else(|| CliError::config("ablation needs --class"))?;
            ablation_eval(&prepared, &class, &cfg.inversion, &targets, backend.as_mut(), &encoder, &cfg.eval)?
        }
        _ => unreachable!("bundle loaded for tokens and pairs"),
    };

    let hash = cfg.eval.hash();
    let rows = aggregate(&records, &hash);
    write_records(&records, BufWriter::new(fs::File::create(&records_path)?))?;
    write_report(&rows, BufWriter::new(fs::File::create(&report_path)?))?;
    let sidecar = Sidecar {
        protocol,
        config_hash: hash,
        eval: &cfg.eval,
        seeds: cfg.eval.seeds(),
        targets: &targets,
        bundle_sha256: bundle_path.map(|p| matte_core::util::sha256_file(p)).transpose()?,
        reference_sha256: reference_sha,
    };
    fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    for r in &rows {
        println!("{}\t{}\t{:.4}\t(n={})", r.metric, r.group, r.score, r.n_images);
    }
    Ok(())
}

#[derive(Serialize)]
struct PaletteReport {
    entries: Vec<PaletteRow>,
    phrase: String,
}

#[derive(Serialize)]
struct PaletteRow {
    rgb: [u8; 3],
    hex: String,
    frequency: f64,
    name: &'static str,
}

fn cmd_palette(a: PaletteArgs, cfg: RunConfig, g: &GlobalArgs, argv: &[String]) -> Result<(), CliError> {
    if a.colors == 0 || a.phrase_colors == 0 {
        return Err(CliError::config("--colors and --phrase-colors must be at least 1"));
    }
    let img = load_image(&a.image)?;
    let dir = out_dir(g);
    let out_path = dir.join("palette.json");
    let mut manifest = RunManifest::new(
        "palette",
        argv,
        &WithArgs {
            run: &cfg,
            command: serde_json::json!({"image": a.image, "colors": a.colors, "phrase_colors": a.phrase_colors}),
        },
    )?;
    manifest.input(&a.image)?;
    manifest.outputs = vec![out_path.clone()];
    manifest.write(&dir.join("manifest.json"))?;

    let palette = extract_palette(&img, a.colors).map_err(|e| CliError::config(e.to_string()))?;
    let report = PaletteReport {
        entries: palette
            .entries
            .iter()
            .map(|e| PaletteRow {
                rgb: e.rgb,
                hex: format!("#{:02x}{:02x}{:02x}", e.rgb[0], e.rgb[1], e.rgb[2]),
                frequency: e.frequency,
                name: name_color(e.rgb),
            })
            .collect(),
        phrase: palette_phrase(&palette, a.phrase_colors),
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&out_path, &text)?;
    print!("{text}");
    Ok(())
}
