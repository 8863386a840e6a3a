//! Open-vocabulary segmentation from the text-to-image cross-attention of
//! vision-language models.
//!
//! The crate turns raw attention dumps (ATNS files plus a JSON manifest) into
//! per-pixel class probabilities, ranks attention layers without labels using
//! an entropy ratio, re-weights and ensembles the best layers, refines with a
//! windowed mean-field CRF, and can fine-tune a small differentiable
//! cross-attention stack from a handful of labelled examples.

pub mod convcrf;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod heatmap;
pub mod infoscore;
pub mod numeric;
pub mod pipeline;
pub mod rescore;
pub mod synth;
pub mod tensor_io;

pub use error::{Error, ErrorKind, Result};
pub use heatmap::{ClassHeatmap, ProbMap};
pub use tensor_io::{AttentionStack, LabelMask, PromptManifest, RasterImage};
