use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use infoseg::convcrf::CrfConfig;
use infoseg::eval::{miou, ConfusionMatrix, EvalError, EvalReport, RunSummary};
use infoseg::finetune::{load_checkpoint, save_checkpoint, TrainConfig, TrainScope, Vocab};
use infoseg::pipeline::{
    fit_few_shot, rank_dataset, run_eval, segment_images, support_split, top_layers,
    AttentionSource, EvalMode, FewShotConfig, PipelineConfig,
};
use infoseg::synth::{make_fixture, FixtureSpec};
use infoseg::tensor_io::{load_manifest, read_mask, read_raster, write_mask, write_raster};
use infoseg::{Error, ErrorKind, PromptManifest, RasterImage};
use serde_json::{json, Value};

/// Open-vocabulary segmentation from vision-language cross-attention.
#[derive(Parser, Debug)]
#[command(name = "infoseg", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Prompt manifest (JSON).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to host parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Number of InfoScore-ranked layers to ensemble.
    #[arg(long, global = true, default_value_t = 2)]
    top_k: usize,
    #[arg(long, global = true)]
    no_class_scores: bool,
    #[arg(long, global = true)]
    no_crf: bool,
    /// Max over all prompts of a class instead of the first one.
    #[arg(long, global = true)]
    multi_prompt: bool,
    /// Class softmax temperature.
    #[arg(long, global = true, default_value_t = 1.0)]
    temperature: f64,
    #[command(flatten)]
    crf: CrfArgs,
}

#[derive(Args, Debug)]
struct CrfArgs {
    #[arg(long, global = true)]
    crf_kernel: Option<usize>,
    #[arg(long, global = true)]
    crf_iters: Option<usize>,
    #[arg(long, global = true)]
    crf_w_app: Option<f64>,
    #[arg(long, global = true)]
    crf_w_smooth: Option<f64>,
    #[arg(long, global = true)]
    crf_theta_alpha: Option<f64>,
    #[arg(long, global = true)]
    crf_theta_beta: Option<f64>,
    #[arg(long, global = true)]
    crf_theta_gamma: Option<f64>,
    #[arg(long, global = true)]
    crf_compat: Option<f64>,
    /// Disable normalization of messages by local kernel mass.
    #[arg(long, global = true)]
    crf_no_normalize: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rank attention layers by InfoScore.
    Rank,
    /// Predict a mask per image.
    Segment {
        #[arg(long)]
        out: PathBuf,
        /// Use a fine-tuned checkpoint instead of the attention files.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Few-shot fine-tune the toy cross-attention model.
    Finetune {
        #[arg(long, default_value_t = 1)]
        shots: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Train only the prompt embeddings.
        #[arg(long)]
        embeddings_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Directory of `<image_id>.pgm` predictions.
        #[arg(long, conflicts_with_all = ["model", "shots"])]
        pred_dir: Option<PathBuf>,
        #[arg(long, conflicts_with = "shots")]
        model: Option<PathBuf>,
        /// Fine-tune per seed with this many shots and score held-out images.
        #[arg(long)]
        shots: Option<usize>,
        /// Comma-separated seeds; defaults to --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
    },
    /// Write a synthetic fixture.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long, default_value_t = 6)]
        layers: usize,
        /// Per-layer peak sharpness; overrides --layers.
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 3)]
        tokens: usize,
        #[arg(long, default_value_t = 16)]
        grid: usize,
        /// Raster pixels per patch side.
        #[arg(long, default_value_t = 1)]
        scale: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Class score of absent classes.
        #[arg(long, default_value_t = 0.0)]
        score_leak: f64,
        /// Absent classes attend to a decoy rectangle.
        #[arg(long)]
        decoys: bool,
        #[arg(long, default_value_t = 2)]
        max_regions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend a predicted mask over its raster.
    Overlay {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

impl Global {
    fn manifest(&self) -> Result<PromptManifest, Error> {
        let path = self
            .manifest
            .as_ref()
            .ok_or_else(|| usage("--manifest is required"))?;
        Ok(load_manifest(path)?)
    }

    fn pipeline(&self) -> PipelineConfig {
        let crf = (!self.no_crf).then(|| {
            let d = CrfConfig::default();
            let c = &self.crf;
            CrfConfig {
                kernel_size: c.crf_kernel.unwrap_or(d.kernel_size),
                iterations: c.crf_iters.unwrap_or(d.iterations),
                w_app: c.crf_w_app.unwrap_or(d.w_app),
                w_smooth: c.crf_w_smooth.unwrap_or(d.w_smooth),
                theta_alpha: c.crf_theta_alpha.unwrap_or(d.theta_alpha),
                theta_beta: c.crf_theta_beta.unwrap_or(d.theta_beta),
                theta_gamma: c.crf_theta_gamma.unwrap_or(d.theta_gamma),
                compat_weight: c.crf_compat.unwrap_or(d.compat_weight),
                normalize_kernel: !c.crf_no_normalize,
            }
        });
        PipelineConfig {
            top_k: self.top_k,
            use_class_scores: !self.no_class_scores,
            crf,
            multi_prompt: self.multi_prompt,
            temperature: self.temperature,
        }
    }
}

fn few_shot(shots: usize, lr: f64, epochs: usize) -> FewShotConfig {
    FewShotConfig {
        shots,
        train: TrainConfig {
            lr,
            epochs,
            ..TrainConfig::default()
        },
        ..FewShotConfig::default()
    }
}

fn report_json(report: &EvalReport) -> Value {
    let mut value = serde_json::to_value(report).expect("report serializes");
    let runs = report
        .runs
        .clone()
        .unwrap_or_else(|| RunSummary::from_runs(vec![report.miou]));
    value["runs"] = json!(runs.runs);
    value["mean"] = json!(runs.mean);
    value["std"] = json!(runs.std);
    value
}

fn cmd_rank(g: &Global) -> Result<Value, Error> {
    let manifest = g.manifest()?;
    let ranking = rank_dataset(&manifest, &g.pipeline(), AttentionSource::Files)?;
    let selected = top_layers(&ranking, g.top_k.min(ranking.ranking.len()))?;
    eprintln!(
        "ranked {} layers over {} images",
        ranking.layers.len(),
        manifest.images.len()
    );
    let mut value = serde_json::to_value(&ranking).expect("ranking serializes");
    value["top_k"] = json!(selected);
    Ok(value)
}

fn cmd_segment(g: &Global, out: &Path, model: Option<&Path>) -> Result<Value, Error> {
    let manifest = g.manifest()?;
    let cfg = g.pipeline();
    let all: Vec<usize> = (0..manifest.images.len()).collect();
    let checkpoint = model.map(load_checkpoint).transpose()?;
    let (preds, layers) = match &checkpoint {
        Some(ckpt) => {
            let prompts = Vocab::from_manifest(&manifest).prompts_for(&manifest)?;
            let source = AttentionSource::Model(&ckpt.model, &prompts);
            (
                segment_images(&manifest, &all, &cfg, source, &ckpt.top_k)?,
                ckpt.top_k.clone(),
            )
        }
        None => {
            let ranking = rank_dataset(&manifest, &cfg, AttentionSource::Files)?;
            let layers = top_layers(&ranking, cfg.top_k)?;
            (
                segment_images(&manifest, &all, &cfg, AttentionSource::Files, &layers)?,
                layers,
            )
        }
    };
    fs::create_dir_all(out).map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;
    let mut images = Vec::with_capacity(preds.len());
    for (entry, pred) in manifest.images.iter().zip(&preds) {
        let path = out.join(format!("{}.pgm", entry.image_id));
        write_mask(pred, &path)?;
        images.push(json!({"image_id": entry.image_id, "path": path}));
    }
    eprintln!("wrote {} masks to {}", preds.len(), out.display());
    Ok(json!({"layers": layers, "images": images}))
}

fn cmd_finetune(g: &Global, cfg: FewShotConfig, out: &Path) -> Result<Value, Error> {
    let manifest = g.manifest()?;
    let split = support_split(&manifest, cfg.shots, g.seed)?;
    let run = fit_few_shot(&manifest, &split, &g.pipeline(), &cfg, g.seed)?;
    save_checkpoint(&run.checkpoint, out)?;
    let first = run.report.losses.first().copied();
    let last = run.report.losses.last().copied();
    eprintln!("{} steps, loss {:?} -> {:?}", run.report.steps, first, last);
    Ok(json!({
        "top_k": run.checkpoint.top_k,
        "support": split.support,
        "steps": run.report.steps,
        "losses": run.report.losses,
        "out": out,
    }))
}

fn cmd_eval(
    g: &Global,
    pred_dir: Option<&Path>,
    model: Option<&Path>,
    shots: Option<usize>,
    seeds: &[u64],
    lr: f64,
    epochs: usize,
) -> Result<Value, Error> {
    let manifest = g.manifest()?;
    let seeds = if seeds.is_empty() {
        vec![g.seed]
    } else {
        seeds.to_vec()
    };
    let report = if let Some(dir) = pred_dir {
        let mut cm = ConfusionMatrix::new(manifest.n_classes());
        for entry in &manifest.images {
            let gt_path = entry
                .mask_path
                .as_ref()
                .ok_or_else(|| EvalError::MissingMask(entry.image_id.clone()))?;
            let pred = read_mask(dir.join(format!("{}.pgm", entry.image_id)))?;
            cm.accumulate(&pred, &read_mask(gt_path)?)?;
        }
        miou(&cm)?
    } else {
        let mode = match (model, shots) {
            (Some(path), _) => EvalMode::Checkpoint(load_checkpoint(path)?),
            (None, Some(shots)) => EvalMode::FewShot(few_shot(shots, lr, epochs)),
            (None, None) => EvalMode::TrainingFree,
        };
        run_eval(&manifest, &g.pipeline(), &seeds, &mode)?
    };
    eprintln!("mIoU {:.4} over {} images", report.miou, report.n_images);
    Ok(report_json(&report))
}

fn cmd_synth(spec: FixtureSpec, out: &Path) -> Result<Value, Error> {
    let path = make_fixture(&spec, out)?;
    eprintln!("wrote fixture to {}", out.display());
    Ok(json!({"manifest": path, "spec": serde_json::to_value(&spec).expect("spec serializes")}))
}

/// Distinct, saturated colour per label.
fn label_color(label: u8) -> [u8; 3] {
    let hue = (label as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

fn cmd_overlay(mask: &Path, raster: &Path, out: &Path, alpha: f64) -> Result<Value, Error> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(usage(format!("--alpha must be in [0, 1], got {alpha}")));
    }
    let mask = read_mask(mask)?;
    let mut image: RasterImage = read_raster(raster)?;
    if (mask.height, mask.width) != (image.height, image.width) {
        return Err(usage(format!(
            "mask is {}x{} but raster is {}x{}",
            mask.height, mask.width, image.height, image.width
        )));
    }
    let mut blended = 0usize;
    for row in 0..image.height {
        for col in 0..image.width {
            let label = mask.get(row, col);
            if label == 255 {
                continue;
            }
            let base = image.pixel(row, col);
            let tint = label_color(label);
            let mix = |a: u8, b: u8| ((1.0 - alpha) * a as f64 + alpha * b as f64).round() as u8;
            image.set_pixel(
                row,
                col,
                [
                    mix(base[0], tint[0]),
                    mix(base[1], tint[1]),
                    mix(base[2], tint[2]),
                ],
            );
            blended += 1;
        }
    }
    write_raster(&image, out)?;
    Ok(json!({"out": out, "blended_pixels": blended}))
}

fn run(cli: Cli) -> Result<Value, Error> {
    let g = &cli.global;
    match cli.command {
        Command::Rank => cmd_rank(g),
        Command::Segment { out, model } => cmd_segment(g, &out, model.as_deref()),
        Command::Finetune {
            shots,
            lr,
            epochs,
            batch_size,
            max_steps,
            embeddings_only,
            out,
        } => {
            let mut cfg = few_shot(shots, lr, epochs);
            cfg.train.batch_size = batch_size;
            cfg.train.max_steps = max_steps;
            if embeddings_only {
                cfg.scope = TrainScope::EmbeddingsOnly;
            }
            cmd_finetune(g, cfg, &out)
        }
        Command::Eval {
            pred_dir,
            model,
            shots,
            seeds,
            lr,
            epochs,
        } => cmd_eval(
            g,
            pred_dir.as_deref(),
            model.as_deref(),
            shots,
            &seeds,
            lr,
            epochs,
        ),
        Command::Synth {
            classes,
            images,
            layers,
            alpha,
            heads,
            tokens,
            grid,
            scale,
            noise,
            score_leak,
            decoys,
            max_regions,
            out,
        } => {
            let alpha = if alpha.is_empty() {
                FixtureSpec::decreasing_alpha(layers)
            } else {
                alpha
            };
            let spec = FixtureSpec {
                n_classes: classes,
                n_images: images,
                heads,
                tokens,
                grid,
                alpha,
                seed: g.seed,
                pixel_scale: scale,
                noise,
                score_leak,
                decoys,
                max_regions,
            };
            cmd_synth(spec, &out)
        }
        Command::Overlay {
            mask,
            raster,
            out,
            alpha,
        } => cmd_overlay(&mask, &raster, &out, alpha),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(2);
        }
    };
    if cli.global.jobs == Some(0) {
        eprintln!("error[usage]: --jobs must be >= 1");
        return ExitCode::from(2);
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs.unwrap_or(0))
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error[usage]: cannot start worker pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e.kind();
            let name = match kind {
                ErrorKind::Usage => "usage",
                ErrorKind::Data => "data",
                ErrorKind::Numeric => "numeric",
            };
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{name}]: {msg}");
            ExitCode::from(exit_code(kind))
        }
    }
}
