//! End-to-end orchestration: layer ranking, segmentation, few-shot
//! fine-tuning and multi-run evaluation over a manifest.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::convcrf::{crf_refine, upsample_bilinear, CrfConfig};
use crate::error::{Error, Result};
use crate::eval::{argmax_prediction, miou, ConfusionMatrix, EvalError, EvalReport, RunSummary};
use crate::finetune::{
    fit, Checkpoint, FitReport, Prompts, ToyModel, ToyModelConfig, TrainConfig, TrainExample,
    TrainScope, Vocab,
};
use crate::heatmap::{
    class_softmax_with_temperature, raw_class_heatmaps, ClassHeatmap, ImageAttention, ProbMap,
};
use crate::infoscore::{
    image_marginal, info_score_from_marginals, rank_layers, select_top_k, LayerRanking,
};
use crate::rescore::{ensemble_with_temperature, ClassScoreVector};
use crate::tensor_io::{read_mask, read_raster, LabelMask, PromptManifest, IGNORE_LABEL};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub top_k: usize,
    pub use_class_scores: bool,
    pub crf: Option<CrfConfig>,
    pub multi_prompt: bool,
    /// Softmax temperature applied to class heatmaps.
    pub temperature: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: 2,
            use_class_scores: true,
            crf: Some(CrfConfig::default()),
            multi_prompt: false,
            temperature: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Usage("top-k must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Usage(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if let Some(crf) = &self.crf {
            crf.validate()?;
        }
        Ok(())
    }
}

/// Where class heatmaps come from.
#[derive(Debug, Clone, Copy)]
pub enum AttentionSource<'a> {
    /// The ATNS files listed in the manifest.
    Files,
    /// A toy cross-attention model run on each raster.
    Model(&'a ToyModel, &'a Prompts),
}

/// Raw class heatmaps `[layer][class]` of manifest image `index`.
pub fn image_heatmaps(
    manifest: &PromptManifest,
    index: usize,
    cfg: &PipelineConfig,
    source: AttentionSource<'_>,
) -> Result<Vec<Vec<ClassHeatmap>>> {
    match source {
        AttentionSource::Files => {
            let attn = ImageAttention::load(manifest, index, cfg.multi_prompt)?;
            Ok(raw_class_heatmaps(&attn)?)
        }
        AttentionSource::Model(model, prompts) => {
            let raster = read_raster(&manifest.images[index].raster_path)?;
            Ok(model.heatmaps(&raster, prompts)?)
        }
    }
}

/// Label-free InfoScore ranking of every layer over the whole manifest.
pub fn rank_dataset(
    manifest: &PromptManifest,
    cfg: &PipelineConfig,
    source: AttentionSource<'_>,
) -> Result<LayerRanking> {
    cfg.validate()?;
    let per_image: Vec<Vec<_>> = (0..manifest.images.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<_>> {
            image_heatmaps(manifest, i, cfg, source)?
                .iter()
                .enumerate()
                .map(|(layer, maps)| {
                    let prob = class_softmax_with_temperature(maps, cfg.temperature)?;
                    Ok(image_marginal(&prob, layer))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let layers = per_image.first().map_or(0, Vec::len);
    if let Some(bad) = per_image.iter().position(|m| m.len() != layers) {
        return Err(Error::Usage(format!(
            "image {} has {} layers, expected {layers}",
            manifest.images[bad].image_id,
            per_image[bad].len()
        )));
    }
    let scores = (0..layers)
        .map(|l| {
            let marginals: Vec<_> = per_image.iter().map(|m| m[l].clone()).collect();
            info_score_from_marginals(l, &marginals)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rank_layers(&scores)?)
}

/// Picks the top-k layers, failing with a usage error if k exceeds the depth.
pub fn top_layers(ranking: &LayerRanking, k: usize) -> Result<Vec<usize>> {
    Ok(select_top_k(ranking, k)?)
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    /// Refined probabilities at raster resolution.
    pub prob: ProbMap,
    pub prediction: LabelMask,
}

/// Ensemble of `layers`, upsampled to the raster, optionally CRF-refined.
pub fn segment_image(
    manifest: &PromptManifest,
    index: usize,
    cfg: &PipelineConfig,
    source: AttentionSource<'_>,
    layers: &[usize],
) -> Result<Segmentation> {
    let entry = &manifest.images[index];
    let raw = image_heatmaps(manifest, index, cfg, source)?;
    let scores = if cfg.use_class_scores {
        ClassScoreVector::for_image(manifest, entry, cfg.multi_prompt)?
    } else {
        ClassScoreVector::ones(manifest.n_classes())
    };
    let coarse = ensemble_with_temperature(&raw, layers, &scores, cfg.temperature)?;
    let raster = read_raster(&entry.raster_path)?;
    let mut prob = upsample_bilinear(&coarse, raster.height, raster.width)?;
    if let Some(crf) = &cfg.crf {
        prob = crf_refine(&prob, &raster, crf)?;
    }
    let prediction = argmax_prediction(&prob);
    Ok(Segmentation { prob, prediction })
}

/// Predicted masks for `indices`, in the same order.
pub fn segment_images(
    manifest: &PromptManifest,
    indices: &[usize],
    cfg: &PipelineConfig,
    source: AttentionSource<'_>,
    layers: &[usize],
) -> Result<Vec<LabelMask>> {
    indices
        .par_iter()
        .map(|&i| Ok(segment_image(manifest, i, cfg, source, layers)?.prediction))
        .collect()
}

fn ground_truth(manifest: &PromptManifest, index: usize) -> Result<LabelMask> {
    let entry = &manifest.images[index];
    let path = entry
        .mask_path
        .as_ref()
        .ok_or_else(|| EvalError::MissingMask(entry.image_id.clone()))?;
    Ok(read_mask(path)?)
}

/// Confusion matrix of `predictions` against the ground truth of `indices`.
pub fn confusion(
    manifest: &PromptManifest,
    indices: &[usize],
    predictions: &[LabelMask],
) -> Result<ConfusionMatrix> {
    let n = manifest.n_classes();
    let parts: Vec<ConfusionMatrix> = indices
        .par_iter()
        .zip(predictions)
        .map(|(&i, pred)| {
            let mut cm = ConfusionMatrix::new(n);
            cm.accumulate(pred, &ground_truth(manifest, i)?)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(n);
    for part in &parts {
        total.merge(part)?;
    }
    Ok(total)
}

/// Support images drawn for a few-shot run and the images left for testing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SupportSplit {
    /// `(image index, class id)` pairs.
    pub support: Vec<(usize, usize)>,
    pub held_out: Vec<usize>,
}

/// Draws `shots` distinct images per foreground class, each containing that
/// class. Classes with no available image are skipped.
pub fn support_split(manifest: &PromptManifest, shots: usize, seed: u64) -> Result<SupportSplit> {
    if shots == 0 {
        return Err(Error::Usage("shots must be >= 1".into()));
    }
    let n = manifest.n_classes();
    let present: Vec<Vec<bool>> = (0..manifest.images.len())
        .into_par_iter()
        .map(|i| {
            let mask = ground_truth(manifest, i)?;
            let mut seen = vec![false; n];
            for &v in &mask.data {
                if let Some(s) = seen.get_mut(usize::from(v)) {
                    *s = true;
                }
            }
            Ok(seen)
        })
        .collect::<Result<_>>()?;
    let background = manifest.background_class();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = vec![false; manifest.images.len()];
    let mut support = Vec::new();
    for class in (0..n).filter(|&c| Some(c) != background) {
        let mut candidates: Vec<usize> = (0..manifest.images.len())
            .filter(|&i| present[i][class] && !used[i])
            .collect();
        candidates.shuffle(&mut rng);
        for &i in candidates.iter().take(shots) {
            used[i] = true;
            support.push((i, class));
        }
    }
    let held_out = (0..manifest.images.len()).filter(|&i| !used[i]).collect();
    Ok(SupportSplit { support, held_out })
}

/// Keeps `class` and the background; other foreground classes become the
/// background, or are ignored when the manifest has no background class.
pub fn support_mask(mask: &LabelMask, class: usize, background: Option<usize>) -> LabelMask {
    let replacement = background.map_or(IGNORE_LABEL, |b| b as u8);
    let data = mask
        .data
        .iter()
        .map(|&v| {
            let keep =
                v == IGNORE_LABEL || usize::from(v) == class || Some(usize::from(v)) == background;
            if keep {
                v
            } else {
                replacement
            }
        })
        .collect();
    LabelMask {
        height: mask.height,
        width: mask.width,
        data,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotConfig {
    pub shots: usize,
    pub model: ToyModelConfig,
    pub train: TrainConfig,
    pub scope: TrainScope,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            shots: 1,
            model: ToyModelConfig::default(),
            train: TrainConfig::default(),
            scope: TrainScope::EmbeddingsAndLayers,
        }
    }
}

/// Result of fitting the toy model on a support set.
#[derive(Debug, Clone)]
pub struct FewShotRun {
    pub checkpoint: Checkpoint,
    pub prompts: Prompts,
    pub report: FitReport,
}

/// Builds the toy model, ranks its layers without labels, and fine-tunes the
/// selected ones on the support images. `seed` drives both initialization
/// and minibatch order.
pub fn fit_few_shot(
    manifest: &PromptManifest,
    split: &SupportSplit,
    cfg: &PipelineConfig,
    few_shot: &FewShotConfig,
    seed: u64,
) -> Result<FewShotRun> {
    let vocab = Vocab::from_manifest(manifest);
    let prompts = vocab.prompts_for(manifest)?;
    let mut model = ToyModel::new(
        ToyModelConfig {
            seed,
            ..few_shot.model
        },
        vocab.len(),
    )?;
    let ranking = rank_dataset(manifest, cfg, AttentionSource::Model(&model, &prompts))?;
    let top_k = top_layers(&ranking, cfg.top_k)?;
    model.set_trainable(&prompts, &top_k, few_shot.scope)?;

    let grid = model.config().grid;
    let background = manifest.background_class();
    let examples = split
        .support
        .iter()
        .map(|&(i, class)| {
            let entry = &manifest.images[i];
            let image = read_raster(&entry.raster_path)?;
            let mask = support_mask(&ground_truth(manifest, i)?, class, background)
                .resample_nearest(grid, grid);
            Ok(TrainExample { image, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    let train = TrainConfig {
        seed,
        ..few_shot.train.clone()
    };
    let report = fit(&mut model, &examples, &prompts, &top_k, &train)?;
    Ok(FewShotRun {
        checkpoint: Checkpoint { model, top_k },
        prompts,
        report,
    })
}

#[derive(Debug, Clone)]
pub enum EvalMode {
    TrainingFree,
    FewShot(FewShotConfig),
    Checkpoint(Checkpoint),
}

fn average_reports(reports: &[EvalReport]) -> EvalReport {
    let mut per_class_iou = std::collections::BTreeMap::new();
    for class in reports[0].per_class_iou.keys() {
        let values: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.per_class_iou.get(class).copied().flatten())
            .collect();
        let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
        per_class_iou.insert(*class, mean);
    }
    let n = reports.len() as f64;
    let summary = RunSummary::from_runs(reports.iter().map(|r| r.miou).collect());
    EvalReport {
        per_class_iou,
        miou: summary.mean,
        pixel_accuracy: reports.iter().map(|r| r.pixel_accuracy).sum::<f64>() / n,
        n_images: reports[0].n_images,
        runs: Some(summary),
    }
}

/// One evaluation per seed, summarized as mean ± sample std of mIoU.
/// Training-free runs score every image; few-shot runs score the images not
/// drawn as support for that seed.
pub fn run_eval(
    manifest: &PromptManifest,
    cfg: &PipelineConfig,
    seeds: &[u64],
    mode: &EvalMode,
) -> Result<EvalReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    if let Some(entry) = manifest.images.iter().find(|e| e.mask_path.is_none()) {
        return Err(EvalError::MissingMask(entry.image_id.clone()).into());
    }
    let all: Vec<usize> = (0..manifest.images.len()).collect();
    let mut reports = Vec::with_capacity(seeds.len());
    match mode {
        EvalMode::TrainingFree => {
            let ranking = rank_dataset(manifest, cfg, AttentionSource::Files)?;
            let layers = top_layers(&ranking, cfg.top_k)?;
            let preds = segment_images(manifest, &all, cfg, AttentionSource::Files, &layers)?;
            let report = miou(&confusion(manifest, &all, &preds)?)?;
            reports.extend(seeds.iter().map(|_| report.clone()));
        }
        EvalMode::Checkpoint(checkpoint) => {
            let prompts = Vocab::from_manifest(manifest).prompts_for(manifest)?;
            let source = AttentionSource::Model(&checkpoint.model, &prompts);
            let preds = segment_images(manifest, &all, cfg, source, &checkpoint.top_k)?;
            let report = miou(&confusion(manifest, &all, &preds)?)?;
            reports.extend(seeds.iter().map(|_| report.clone()));
        }
        EvalMode::FewShot(few_shot) => {
            for &seed in seeds {
                let split = support_split(manifest, few_shot.shots, seed)?;
                if split.held_out.is_empty() {
                    return Err(Error::Usage("no images left after drawing support".into()));
                }
                let run = fit_few_shot(manifest, &split, cfg, few_shot, seed)?;
                let source = AttentionSource::Model(&run.checkpoint.model, &run.prompts);
                let preds = segment_images(
                    manifest,
                    &split.held_out,
                    cfg,
                    source,
                    &run.checkpoint.top_k,
                )?;
                reports.push(miou(&confusion(manifest, &split.held_out, &preds)?)?);
            }
        }
    }
    Ok(average_reports(&reports))
}
