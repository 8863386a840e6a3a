//! Crate-wide error type with a coarse classification used for exit codes.

use thiserror::Error;

use crate::convcrf::CrfError;
use crate::eval::EvalError;
use crate::finetune::FinetuneError;
use crate::heatmap::HeatmapError;
use crate::infoscore::InfoScoreError;
use crate::rescore::RescoreError;
use crate::synth::SynthError;
use crate::tensor_io::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid arguments or configuration.
    Usage,
    /// Malformed or inconsistent input data.
    Data,
    /// A computation produced non-finite or invalid numbers.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    InfoScore(#[from] InfoScoreError),
    #[error(transparent)]
    Rescore(#[from] RescoreError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Format(_) => ErrorKind::Data,
            Error::Heatmap(e) => heatmap_kind(e),
            Error::InfoScore(e) => match e {
                InfoScoreError::NotADistribution(_) => ErrorKind::Numeric,
                InfoScoreError::KOutOfRange { .. } | InfoScoreError::DuplicateLayer(_) => {
                    ErrorKind::Usage
                }
                _ => ErrorKind::Data,
            },
            Error::Rescore(e) => match e {
                RescoreError::Heatmap(h) => heatmap_kind(h),
                RescoreError::MissingLayer(_) | RescoreError::EmptyTopK => ErrorKind::Usage,
                _ => ErrorKind::Data,
            },
            Error::Crf(e) => match e {
                CrfError::BadConfig(_) | CrfError::BadTarget { .. } => ErrorKind::Usage,
                CrfError::NonFiniteIntermediate(_) => ErrorKind::Numeric,
                CrfError::DimMismatch { .. } => ErrorKind::Data,
            },
            Error::Finetune(e) => match e {
                FinetuneError::BadConfig(_)
                | FinetuneError::BadTrainConfig(_)
                | FinetuneError::LayerOutOfRange { .. }
                | FinetuneError::EmptyTopK => ErrorKind::Usage,
                FinetuneError::NonFinite(_) => ErrorKind::Numeric,
                _ => ErrorKind::Data,
            },
            Error::Eval(_) => ErrorKind::Data,
            Error::Synth(e) => match e {
                SynthError::BadSpec(_) => ErrorKind::Usage,
                SynthError::Format(_) => ErrorKind::Data,
            },
            Error::Usage(_) => ErrorKind::Usage,
        }
    }
}

fn heatmap_kind(e: &HeatmapError) -> ErrorKind {
    match e {
        HeatmapError::LayerOutOfRange { .. } => ErrorKind::Usage,
        HeatmapError::InvalidProbMap(_) => ErrorKind::Numeric,
        _ => ErrorKind::Data,
    }
}
