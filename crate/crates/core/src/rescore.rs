//! Class-score re-weighting of raw heatmaps and top-K layer ensembling.

use std::collections::BTreeMap;

use crate::heatmap::{class_softmax_with_temperature, ClassHeatmap, HeatmapError, ProbMap};
use crate::tensor_io::{ClassEntry, ImageEntry, PromptManifest};

#[derive(Debug, thiserror::Error)]
pub enum RescoreError {
    #[error("no score for prompt {0:?}")]
    MissingScore(String),
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("{maps} heatmaps but {scores} class scores")]
    LengthMismatch { maps: usize, scores: usize },
    #[error("layer {0} has no heatmaps")]
    MissingLayer(usize),
    #[error("top-k layer set is empty")]
    EmptyTopK,
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
}

/// Presence score per class, each in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScoreVector(Vec<f64>);

impl ClassScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self, RescoreError> {
        if let Some(&bad) = scores
            .iter()
            .find(|s| !s.is_finite() || !(0.0..=1.0).contains(*s))
        {
            return Err(RescoreError::ScoreOutOfRange(bad));
        }
        Ok(Self(scores))
    }

    pub fn ones(n_classes: usize) -> Self {
        Self(vec![1.0; n_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Per-class scores for one manifest image. With `multi_prompt` off only
    /// each class's first prompt contributes.
    pub fn for_image(
        manifest: &PromptManifest,
        image: &ImageEntry,
        multi_prompt: bool,
    ) -> Result<Self, RescoreError> {
        let scores = manifest
            .classes
            .iter()
            .map(|class| {
                let take = if multi_prompt { class.prompts.len() } else { 1 };
                let per_prompt: BTreeMap<String, f64> = class
                    .prompts
                    .iter()
                    .take(take)
                    .filter_map(|p| {
                        image
                            .prompt_score(p, class)
                            .map(|s| (p.prompt_text.clone(), s))
                    })
                    .collect();
                let class = ClassEntry {
                    prompts: class.prompts[..take].to_vec(),
                    ..class.clone()
                };
                reduce_prompt_scores(&per_prompt, &class)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(scores)
    }
}

/// Max score over a class's prompts.
pub fn reduce_prompt_scores(
    per_prompt: &BTreeMap<String, f64>,
    class: &ClassEntry,
) -> Result<f64, RescoreError> {
    let mut best = f64::NEG_INFINITY;
    for prompt in &class.prompts {
        let score = *per_prompt
            .get(&prompt.prompt_text)
            .ok_or_else(|| RescoreError::MissingScore(prompt.prompt_text.clone()))?;
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(RescoreError::ScoreOutOfRange(score));
        }
        best = best.max(score);
    }
    if best == f64::NEG_INFINITY {
        return Err(RescoreError::MissingScore(class.class_name.clone()));
    }
    Ok(best)
}

/// Scales each class's raw heatmap by its score.
pub fn reweight(
    raw: &[ClassHeatmap],
    scores: &ClassScoreVector,
) -> Result<Vec<ClassHeatmap>, RescoreError> {
    if raw.len() != scores.len() {
        return Err(RescoreError::LengthMismatch {
            maps: raw.len(),
            scores: scores.len(),
        });
    }
    Ok(raw
        .iter()
        .zip(scores.as_slice())
        .map(|(map, &s)| ClassHeatmap {
            values: map.values.iter().map(|v| s * v).collect(),
            ..map.clone()
        })
        .collect())
}

/// Mean over layers of raw heatmaps, indexed `[class]` in the result.
pub fn mean_over_layers(
    per_layer_raw: &[Vec<ClassHeatmap>],
    top_k: &[usize],
) -> Result<Vec<ClassHeatmap>, RescoreError> {
    let (&first, _) = top_k.split_first().ok_or(RescoreError::EmptyTopK)?;
    let base = per_layer_raw
        .get(first)
        .ok_or(RescoreError::MissingLayer(first))?;
    let mut acc: Vec<ClassHeatmap> = base
        .iter()
        .map(|m| ClassHeatmap {
            values: vec![0.0; m.values.len()],
            ..m.clone()
        })
        .collect();
    for &layer in top_k {
        let maps = per_layer_raw
            .get(layer)
            .ok_or(RescoreError::MissingLayer(layer))?;
        if maps.len() != acc.len() {
            return Err(RescoreError::LengthMismatch {
                maps: maps.len(),
                scores: acc.len(),
            });
        }
        for (a, m) in acc.iter_mut().zip(maps) {
            if a.values.len() != m.values.len() {
                return Err(HeatmapError::DimMismatch(format!(
                    "layer {layer} class {} has {} values, expected {}",
                    m.class_id,
                    m.values.len(),
                    a.values.len()
                ))
                .into());
            }
            for (x, v) in a.values.iter_mut().zip(&m.values) {
                *x += v;
            }
        }
    }
    let k = top_k.len() as f64;
    for a in &mut acc {
        a.values.iter_mut().for_each(|v| *v /= k);
    }
    Ok(acc)
}

/// Re-weights the raw heatmaps of each top-K layer, averages them, and
/// applies the class softmax. `per_layer_raw` is indexed by layer.
pub fn ensemble(
    per_layer_raw: &[Vec<ClassHeatmap>],
    top_k: &[usize],
    scores: &ClassScoreVector,
) -> Result<ProbMap, RescoreError> {
    ensemble_with_temperature(per_layer_raw, top_k, scores, 1.0)
}

pub fn ensemble_with_temperature(
    per_layer_raw: &[Vec<ClassHeatmap>],
    top_k: &[usize],
    scores: &ClassScoreVector,
    temperature: f64,
) -> Result<ProbMap, RescoreError> {
    let mean = mean_over_layers(per_layer_raw, top_k)?;
    let weighted = reweight(&mean, scores)?;
    Ok(class_softmax_with_temperature(&weighted, temperature)?)
}
