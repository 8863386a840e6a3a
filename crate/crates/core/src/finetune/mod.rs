//! Few-shot fine-tuning of a differentiable cross-attention stack.
//!
//! The real vision-language backbones are out of reach here, so the
//! optimisation runs against [`ToyModel`]: word embeddings attending over
//! frozen patch features. Gradients are written out by hand and verified
//! against finite differences in the tests.

mod adam;
mod checkpoint;
pub mod mat;
mod model;
mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use model::{
    ForwardPass, Gradients, ParamTensor, PromptTokens, Prompts, ToyModel, ToyModelConfig,
    TrainScope, Vocab, CLS_TOKEN, SEP_TOKEN,
};
pub use train::{fit, FitReport, TrainConfig, TrainExample};

use thiserror::Error;

use crate::tensor_io::FormatError;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("invalid training configuration: {0}")]
    BadTrainConfig(String),
    #[error("layer {layer} out of range for a {layers}-layer model")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("top-k layer set is empty")]
    EmptyTopK,
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("bad prompt: {0}")]
    BadPrompt(String),
    #[error("at least two classes are needed for a softmax")]
    SingleClass,
    #[error("image {height}x{width} is smaller than the {grid}x{grid} patch grid")]
    ImageTooSmall {
        height: usize,
        width: usize,
        grid: usize,
    },
    #[error("mask is {height}x{width}, expected the {grid}x{grid} patch grid")]
    MaskDims {
        height: usize,
        width: usize,
        grid: usize,
    },
    #[error("mask label {0} is not a class id")]
    LabelOutOfRange(u8),
    #[error("every mask pixel is ignored")]
    AllPixelsIgnored,
    #[error("no training examples")]
    NoExamples,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}
