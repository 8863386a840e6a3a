//! Label-free layer ranking by the ratio of dataset-level to mean image-level
//! entropy of predicted class marginals.
//!
//! A layer whose maps commit to few classes per image (low image entropy)
//! while still covering many classes across the dataset (high dataset
//! entropy) scores high.

use serde::Serialize;

use crate::heatmap::ProbMap;
use crate::numeric::{compensated_sum, CompensatedSum};

/// Guard on the image-entropy denominator.
pub const ENTROPY_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum InfoScoreError {
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("class count mismatch: expected {expected}, got {got}")]
    ClassCountMismatch { expected: usize, got: usize },
    #[error("layer {0} appears more than once")]
    DuplicateLayer(usize),
    #[error("k = {k} out of range for {layers} ranked layers")]
    KOutOfRange { k: usize, layers: usize },
}

/// Mean class distribution of one image at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMarginal {
    pub layer: usize,
    pub probs: Vec<f64>,
}

/// Entropy summary of one layer over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerScore {
    pub layer: usize,
    pub image_entropy: f64,
    pub dataset_entropy: f64,
    pub info_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRanking {
    pub layers: Vec<LayerScore>,
    /// Layer indices, best first.
    pub ranking: Vec<usize>,
}

/// Average of the per-pixel class distribution over the image.
pub fn image_marginal(prob: &ProbMap, layer: usize) -> ImageMarginal {
    let pixels = (prob.height() * prob.width()) as f64;
    let probs = (0..prob.n_classes())
        .map(|c| compensated_sum(prob.plane(c).iter().copied()) / pixels)
        .collect();
    ImageMarginal { layer, probs }
}

/// Shannon entropy in nats with `0 ln 0 = 0`, clamped to `[0, ln N]`.
pub fn entropy(dist: &[f64]) -> Result<f64, InfoScoreError> {
    if dist.is_empty() {
        return Err(InfoScoreError::NotADistribution("empty vector".into()));
    }
    if let Some(bad) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(InfoScoreError::NotADistribution(format!("entry {bad}")));
    }
    let total = compensated_sum(dist.iter().copied());
    if (total - 1.0).abs() > 1e-6 {
        return Err(InfoScoreError::NotADistribution(format!("sums to {total}")));
    }
    let h = compensated_sum(dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()));
    Ok(h.clamp(0.0, (dist.len() as f64).ln()))
}

/// Scores one layer from its per-image marginals.
pub fn info_score_from_marginals(
    layer: usize,
    marginals: &[ImageMarginal],
) -> Result<LayerScore, InfoScoreError> {
    let first = marginals.first().ok_or(InfoScoreError::EmptyDataset)?;
    let n_classes = first.probs.len();
    if let Some(bad) = marginals.iter().find(|m| m.probs.len() != n_classes) {
        return Err(InfoScoreError::ClassCountMismatch {
            expected: n_classes,
            got: bad.probs.len(),
        });
    }
    let count = marginals.len() as f64;
    let mut image_entropy = CompensatedSum::new();
    let mut dataset = vec![CompensatedSum::new(); n_classes];
    for m in marginals {
        image_entropy.add(entropy(&m.probs)?);
        for (acc, &p) in dataset.iter_mut().zip(&m.probs) {
            acc.add(p);
        }
    }
    let image_entropy = image_entropy.value() / count;
    let dataset_marginal: Vec<f64> = dataset.iter().map(|s| s.value() / count).collect();
    let dataset_entropy = entropy(&dataset_marginal)?;
    Ok(LayerScore {
        layer,
        image_entropy,
        dataset_entropy,
        info_score: dataset_entropy / image_entropy.max(ENTROPY_FLOOR),
    })
}

/// Scores one layer from the probability maps of every image in a dataset.
pub fn info_score(layer: usize, dataset: &[ProbMap]) -> Result<LayerScore, InfoScoreError> {
    if let Some(first) = dataset.first() {
        if let Some(bad) = dataset.iter().find(|p| p.n_classes() != first.n_classes()) {
            return Err(InfoScoreError::ClassCountMismatch {
                expected: first.n_classes(),
                got: bad.n_classes(),
            });
        }
    }
    let marginals: Vec<ImageMarginal> = dataset.iter().map(|p| image_marginal(p, layer)).collect();
    info_score_from_marginals(layer, &marginals)
}

/// Sorts layers by descending score; ties go to the lower layer index.
pub fn rank_layers(scores: &[LayerScore]) -> Result<LayerRanking, InfoScoreError> {
    let mut seen = std::collections::BTreeSet::new();
    for s in scores {
        if !seen.insert(s.layer) {
            return Err(InfoScoreError::DuplicateLayer(s.layer));
        }
    }
    let mut order: Vec<&LayerScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.info_score
            .total_cmp(&a.info_score)
            .then(a.layer.cmp(&b.layer))
    });
    let mut layers = scores.to_vec();
    layers.sort_by_key(|s| s.layer);
    Ok(LayerRanking {
        layers,
        ranking: order.iter().map(|s| s.layer).collect(),
    })
}

/// The first `k` layers of a ranking.
pub fn select_top_k(ranking: &LayerRanking, k: usize) -> Result<Vec<usize>, InfoScoreError> {
    if k == 0 || k > ranking.ranking.len() {
        return Err(InfoScoreError::KOutOfRange {
            k,
            layers: ranking.ranking.len(),
        });
    }
    Ok(ranking.ranking[..k].to_vec())
}
