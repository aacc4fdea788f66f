use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use panelf::data::{
    build_manifest, classify_page, extract_panels, generate_shape_panels, generate_synthetic_corpus, image_to_tensor,
    list_pngs, max_channel_difference, DatasetManifest, ManifestRecord, PageClass, PageImage, PanelGrid,
    SyntheticKind, DEFAULT_CAPTION, DEFAULT_COLOR_THRESHOLD, DEFAULT_EDGE_HIGH, DEFAULT_EDGE_LOW,
};
use panelf::lora::{LoraSet, DEFAULT_RANK, DEFAULT_TARGETS};
use panelf::model::{AutoencoderConfig, UNetConfig};
use panelf::pipelines::{run_request, GenerationRequest, Mode, SeedMode, DEFAULT_STRENGTH};
use panelf::text::{evaluate_retrieval, train_toy_clip, ClipConfig, Vocab};
use panelf::train::{
    train_autoencoder, train_base, train_lora, Autoencoder, Checkpoint, CheckpointInfo, Dataset, DiffusionModel,
    ScheduleConfig, TrainConfig, TrainOutputs,
};
use panelf::{Error, Result};

#[derive(Parser)]
#[command(name = "panelf", version, about = "Comic-style diffusion fine-tuning and generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    BwPages,
    ColorPages,
    ShapePanels,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeedModeArg {
    Shared,
    Independent,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "in the style of CNH3000")]
    prompt: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Classify pages, drop colour ones, and cut the rest into panels.
    Prepare {
        #[arg(long)]
        pages: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_COLOR_THRESHOLD)]
        threshold: u8,
        /// rows,cols[,margin[,gutter]] in pixels.
        #[arg(long, default_value = "2,4")]
        grid: String,
    },
    /// One record per panel PNG, all with the same caption.
    Manifest {
        #[arg(long)]
        panels: PathBuf,
        #[arg(long, default_value = DEFAULT_CAPTION)]
        caption: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction training of the latent autoencoder.
    TrainAe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trains a base diffusion model from scratch.
    TrainUnet {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Autoencoder checkpoint; switches to latent diffusion.
        #[arg(long)]
        ae: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long)]
        lr_period: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        base_channels: usize,
        #[arg(long, default_value_t = 100)]
        timesteps: usize,
        /// Keep the final ᾱ near zero so that sampling can start from pure noise.
        #[arg(long, default_value_t = 1e-4)]
        beta_start: f64,
        #[arg(long, default_value_t = 0.02)]
        beta_end: f64,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tunes rank-k adapters and the keyword embedding on a frozen base.
    TrainLora {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RANK)]
        rank: usize,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        /// Defaults to steps / 2.
        #[arg(long)]
        lr_period: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Toy contrastive image/text model on a captioned corpus.
    TrainClip {
        /// Directory with PNGs and a manifest.jsonl.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes a deterministic synthetic corpus.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Caption for every shape panel instead of its shape name.
        #[arg(long)]
        caption: Option<String>,
        /// Light shapes on dark paper.
        #[arg(long)]
        invert: bool,
    },
    /// Text-to-image.
    Sample {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Partially noise an image and denoise it in the learned style.
    Img2img {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_STRENGTH)]
        strength: f64,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// img2img started from the input's edge map.
    Edge2img {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_STRENGTH)]
        strength: f64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = DEFAULT_EDGE_LOW)]
        edge_low: f64,
        #[arg(long, default_value_t = DEFAULT_EDGE_HIGH)]
        edge_high: f64,
    },
    /// Per-frame img2img over a directory of numbered PNG frames.
    Video {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, value_enum, default_value = "shared")]
        seed_mode: SeedModeArg,
        #[arg(long, default_value_t = DEFAULT_STRENGTH)]
        strength: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Gradient check of every differentiable primitive.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn manifest_base(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn prepare(pages: &Path, out: &Path, threshold: u8, grid: &str) -> Result<serde_json::Value> {
    let grid = PanelGrid::parse(grid)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut report = Vec::new();
    let (mut bw, mut color, mut panels) = (0, 0, 0);
    for path in list_pngs(pages)? {
        let page = PageImage::load_png(&path)?;
        let class = classify_page(&page, threshold);
        let mut written = 0;
        if class == PageClass::BlackWhite {
            bw += 1;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("page");
            for (i, panel) in extract_panels(&page, &grid)?.iter().enumerate() {
                panel.to_gray().save_png(&out.join(format!("{stem}_p{i}.png")))?;
                written += 1;
            }
        } else {
            color += 1;
        }
        panels += written;
        report.push(json!({
            "page": path.display().to_string(),
            "class": class,
            "max_channel_difference": max_channel_difference(&page),
            "panels": written,
        }));
    }
    let summary = json!({ "black_white_pages": bw, "color_pages": color, "panels": panels, "pages": report });
    write_json(&out.join("report.json"), &summary)?;
    Ok(json!({ "black_white_pages": bw, "color_pages": color, "panels": panels }))
}

fn synth(kind: SynthKind, count: usize, seed: u64, out: &Path, caption: Option<String>, invert: bool) -> Result<serde_json::Value> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let flip = |p: PageImage| -> Result<PageImage> {
        if !invert {
            return Ok(p);
        }
        let g = p.to_gray();
        PageImage::gray(g.width(), g.height(), g.pixels().iter().map(|v| 255 - v).collect())
    };
    let mut records = Vec::new();
    match kind {
        SynthKind::ShapePanels => {
            for (i, (p, shape)) in generate_shape_panels(count, seed)?.into_iter().enumerate() {
                let name = format!("shape_{i:05}.png");
                flip(p)?.save_png(&out.join(&name))?;
                records.push(ManifestRecord {
                    image: name,
                    caption: caption.clone().unwrap_or_else(|| shape.caption()),
                });
            }
            DatasetManifest { records }.write(&out.join("manifest.jsonl"))?;
        }
        SynthKind::BwPages | SynthKind::ColorPages => {
            let k = match kind {
                SynthKind::BwPages => SyntheticKind::BwPages,
                _ => SyntheticKind::ColorPages,
            };
            for (i, p) in generate_synthetic_corpus(k, count, seed)?.into_iter().enumerate() {
                flip(p)?.save_png(&out.join(format!("page_{i:05}.png")))?;
            }
        }
    }
    Ok(json!({ "written": count, "out": out.display().to_string() }))
}

fn train_clip(corpus: &Path, out: &Path, steps: usize, seed: u64) -> Result<serde_json::Value> {
    let manifest = DatasetManifest::read(&corpus.join("manifest.jsonl"))?;
    let pairs = manifest
        .image_paths(corpus)
        .iter()
        .zip(&manifest.records)
        .map(|(p, r)| Ok((image_to_tensor(&PageImage::load_png(p)?.to_gray())?, r.caption.clone())))
        .collect::<Result<Vec<_>>>()?;
    // Every fifth example is held out for retrieval.
    let (held, train): (Vec<_>, Vec<_>) = pairs.into_iter().enumerate().partition(|(i, _)| i % 5 == 4);
    let train: Vec<_> = train.into_iter().map(|(_, p)| p).collect();
    let held: Vec<_> = held.into_iter().map(|(_, p)| p).collect();
    let vocab = Vocab::default();
    let cfg = ClipConfig { steps, seed, ..Default::default() };
    let model = train_toy_clip(&train, &vocab, &cfg)?;
    let captions: Vec<String> = train.iter().map(|(_, c)| c.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let retrieval = if held.is_empty() { None } else { Some(evaluate_retrieval(&model, &held, &captions)?) };
    let info = CheckpointInfo {
        adapter_only: false,
        step: steps as u64,
        config: json!({ "kind": "clip", "clip": cfg, "vocab": vocab.to_text(), "retrieval": retrieval }),
    };
    Checkpoint { tensors: model.params, info }.save(out)?;
    Ok(json!({ "initial_loss": model.initial_loss, "final_loss": model.final_loss, "retrieval": retrieval }))
}

fn gen_request(mode: Mode, gen: GenArgs, input: Option<PathBuf>, strength: f64, count: usize) -> (PathBuf, GenerationRequest) {
    let mut req = GenerationRequest::new(mode, gen.prompt, gen.out);
    req.input_path = input;
    req.strength = strength;
    req.seed = gen.seed;
    req.count = count;
    (gen.ckpt, req)
}

fn generate(ckpt: &Path, req: &GenerationRequest) -> Result<serde_json::Value> {
    let bundle = panelf::train::ModelBundle::load(ckpt)?;
    let (paths, report) = run_request(&bundle, req)?;
    Ok(json!({
        "mode": req.mode,
        "strength": (req.mode != Mode::Txt2Img).then_some(req.strength),
        "written": paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "temporal": report,
    }))
}

fn run(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Prepare { pages, out, threshold, grid } => prepare(&pages, &out, threshold, &grid),
        Command::Manifest { panels, caption, out } => {
            let m = build_manifest(&panels, &caption)?;
            m.write(&out)?;
            Ok(json!({ "records": m.len() }))
        }
        Command::TrainAe { manifest, out, m, steps, lr, seed } => {
            let man = DatasetManifest::read(&manifest)?;
            let images = man
                .image_paths(manifest_base(&manifest))
                .iter()
                .map(|p| image_to_tensor(&PageImage::load_png(p)?.to_gray()))
                .collect::<Result<Vec<_>>>()?;
            // Every tenth panel is held out.
            let (held, train): (Vec<_>, Vec<_>) = images.into_iter().enumerate().partition(|(i, _)| i % 10 == 9);
            let train: Vec<_> = train.into_iter().map(|(_, t)| t).collect();
            let held: Vec<_> = held.into_iter().map(|(_, t)| t).collect();
            let cfg = AutoencoderConfig { m, ..Default::default() };
            let run = train_autoencoder(Autoencoder::new(cfg, seed)?, &train, &held, steps, 4, lr, seed)?;
            run.autoencoder.to_checkpoint(steps as u64)?.save(&out)?;
            Ok(json!({ "held_out_mse": run.held_out_mse, "final_loss": run.losses.last() }))
        }
        Command::TrainUnet { manifest, out, ae, steps, lr, lr_period, seed, base_channels, timesteps, beta_start, beta_end, log } => {
            let man = DatasetManifest::read(&manifest)?;
            let first = man
                .image_paths(manifest_base(&manifest))
                .first()
                .cloned()
                .ok_or_else(|| Error::Config("manifest has no records".into()))?;
            let size = PageImage::load_png(&first)?.width();
            let ae = ae.map(|p| Autoencoder::load(&p)).transpose()?;
            let mut unet = UNetConfig { base_channels, image_size: size, ..Default::default() };
            if let Some(a) = &ae {
                unet.in_channels = a.config.latent_channels;
                unet.image_size = size / a.config.factor();
            }
            let schedule = ScheduleConfig { steps: timesteps, beta_start, beta_end };
            let model = DiffusionModel::new(unet, schedule, Vocab::default(), ae, seed)?;
            let alpha_bar_t = model.schedule.alpha_bar(timesteps)?;
            if alpha_bar_t > 0.01 {
                log::warn!("alpha_bar_T = {alpha_bar_t:.3}: x_T keeps signal, so samples drawn from pure noise wash out");
            }
            let data = Dataset::from_manifest(&model, &man, manifest_base(&manifest))?;
            let mut cfg = TrainConfig::with_steps(steps);
            cfg.lr0 = lr;
            cfg.lr_period = lr_period.unwrap_or(cfg.lr_period);
            cfg.seed = seed;
            let outputs = TrainOutputs { log_path: log, checkpoint_dir: None };
            let report = train_base(&model, &data, &cfg, &outputs)?;
            model.save(&out, steps as u64)?;
            Ok(json!({
                "first_decile_loss": report.first_decile_mean(),
                "last_decile_loss": report.last_decile_mean(),
                "alpha_bar_T": alpha_bar_t,
            }))
        }
        Command::TrainLora {
            manifest,
            base,
            rank,
            steps,
            lr,
            lr_period,
            seed,
            out,
            batch_size,
            log,
            log_every,
            checkpoint_every,
            checkpoint_dir,
        } => {
            let model = DiffusionModel::load(&base)?;
            let man = DatasetManifest::read(&manifest)?;
            let data = Dataset::from_manifest(&model, &man, manifest_base(&manifest))?;
            let lora = LoraSet::attach(&model.unet, rank, DEFAULT_TARGETS, seed)?;
            let mut cfg = TrainConfig::with_steps(steps);
            cfg.lr0 = lr;
            cfg.lr_period = lr_period.unwrap_or(cfg.lr_period);
            cfg.seed = seed;
            cfg.batch_size = batch_size;
            cfg.log_every = log_every;
            cfg.checkpoint_every = checkpoint_every;
            let outputs = TrainOutputs { log_path: log, checkpoint_dir };
            let base_abs = fs::canonicalize(&base).unwrap_or(base);
            let run = train_lora(&model, &lora, &data, &cfg, &outputs, Some(&base_abs))?;
            run.checkpoint.save(&out)?;
            Ok(json!({
                "trainable_adapter_values": lora.trainable_count(),
                "first_decile_loss": run.report.first_decile_mean(),
                "last_decile_loss": run.report.last_decile_mean(),
            }))
        }
        Command::TrainClip { corpus, out, steps, seed } => train_clip(&corpus, &out, steps, seed),
        Command::Synth { kind, count, seed, out, caption, invert } => synth(kind, count, seed, &out, caption, invert),
        Command::Sample { gen, count } => {
            let (ckpt, req) = gen_request(Mode::Txt2Img, gen, None, 0.0, count);
            generate(&ckpt, &req)
        }
        Command::Img2img { gen, input, strength, count } => {
            let (ckpt, req) = gen_request(Mode::Img2Img, gen, Some(input), strength, count);
            generate(&ckpt, &req)
        }
        Command::Edge2img { gen, input, strength, count, edge_low, edge_high } => {
            let (ckpt, mut req) = gen_request(Mode::Edge2Img, gen, Some(input), strength, count);
            req.edge_low = edge_low;
            req.edge_high = edge_high;
            generate(&ckpt, &req)
        }
        Command::Video { gen, frames, seed_mode, strength, report } => {
            let (ckpt, mut req) = gen_request(Mode::Video, gen, Some(frames), strength, 1);
            req.seed_mode = match seed_mode {
                SeedModeArg::Shared => SeedMode::Shared,
                SeedModeArg::Independent => SeedMode::Independent,
            };
            let summary = generate(&ckpt, &req)?;
            write_json(&report, &summary["temporal"])?;
            Ok(summary)
        }
        Command::Gradcheck { seeds } => {
            let seeds: Vec<u64> = (0..seeds).collect();
            let outcomes = panelf_core::verify::run_suite(&seeds)?;
            let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed()).collect();
            for o in &failed {
                eprintln!("{} wrt {} seed {}: {:.3e} > {:.0e}", o.name, o.wrt, o.seed, o.max_rel_err, o.tolerance);
            }
            if failed.is_empty() {
                Ok(json!({ "checks": outcomes.len(), "failed": 0 }))
            } else {
                Err(Error::Config(format!("{} of {} gradient checks failed", failed.len(), outcomes.len())))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
