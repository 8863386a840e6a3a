use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::adam::{Adam, AdamConfig};
use super::mat::Mat;
use super::model::{Gradients, Prompts, ToyModel};
use super::FinetuneError;
use crate::tensor_io::{LabelMask, RasterImage, IGNORE_LABEL};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ignore_index: u8,
    pub seed: u64,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            epochs: 5,
            batch_size: 2,
            ignore_index: IGNORE_LABEL,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(FinetuneError::BadTrainConfig(format!(
                "learning rate {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(FinetuneError::BadTrainConfig("batch size 0".into()));
        }
        Ok(())
    }
}

/// One labelled image. The mask must already be on the patch grid.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image: RasterImage,
    pub mask: LabelMask,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub steps: usize,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
}

/// Minibatch Adam over the model's trainable parameters.
pub fn fit(
    model: &mut ToyModel,
    examples: &[TrainExample],
    prompts: &Prompts,
    top_k: &[usize],
    config: &TrainConfig,
) -> Result<FitReport, FinetuneError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(FinetuneError::NoExamples);
    }
    let features: Vec<Mat> = examples
        .iter()
        .map(|e| model.image_features(&e.image))
        .collect::<Result<_, _>>()?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::new();
    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| losses.len() >= m) {
                break 'epochs;
            }
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&i| {
                    model
                        .loss_and_grad(
                            &features[i],
                            prompts,
                            &examples[i].mask,
                            top_k,
                            config.ignore_index,
                            true,
                        )
                        .map(|(loss, g)| (loss, g.expect("gradients requested")))
                })
                .collect::<Result<_, _>>()?;
            let mut iter = results.into_iter();
            let (mut loss, mut grads) = iter.next().expect("non-empty batch");
            for (l, g) in iter {
                loss += l;
                grads.add_assign(&g);
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n);
            losses.push(loss / n);
            adam.update(model, &grads);
        }
    }
    if model
        .params()
        .iter()
        .any(|p| p.data.iter().any(|v| !v.is_finite()))
    {
        return Err(FinetuneError::NonFinite("parameters after update".into()));
    }
    Ok(FitReport {
        steps: losses.len(),
        losses,
    })
}
