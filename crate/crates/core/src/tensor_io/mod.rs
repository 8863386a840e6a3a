//! On-disk formats: ATNS attention containers, netpbm masks and rasters, and
//! the JSON prompt manifest.

mod atns;
mod manifest;
mod pnm;

use std::path::PathBuf;

pub use atns::{
    decode_attention, encode_attention, read_attention, write_attention, AttentionStack,
    ATNS_HEADER_LEN, ATNS_MAGIC, ATNS_VERSION, DTYPE_F32,
};
pub use manifest::{
    load_manifest, save_manifest, ClassEntry, ImageEntry, PromptEntry, PromptManifest,
};
pub use pnm::{
    decode_mask, decode_raster, encode_mask, encode_raster, read_mask, read_raster, write_mask,
    write_raster, LabelMask, RasterImage, IGNORE_LABEL,
};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?} at offset {offset}")]
    BadMagic { offset: usize, found: [u8; 4] },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: usize, version: u8 },
    #[error("unsupported dtype {dtype} at offset {offset}")]
    UnsupportedDtype { offset: usize, dtype: u8 },
    #[error("invalid header field at offset {offset}: {reason}")]
    BadHeader { offset: usize, reason: String },
    #[error("truncated file: payload ends at offset {offset}, expected {expected} bytes")]
    TruncatedFile { offset: usize, expected: usize },
    #[error("trailing data at offset {offset}: expected exactly {expected} bytes")]
    TrailingBytes { offset: usize, expected: usize },
    #[error("non-finite value at offset {offset}")]
    NonFiniteValue { offset: usize },
    #[error("negative attention value at offset {offset}")]
    NegativeValue { offset: usize },
    #[error(
        "attention slice (layer {layer}, head {head}, token {token}) sums to {sum}, expected 1"
    )]
    NotNormalized {
        layer: usize,
        head: usize,
        token: usize,
        sum: f64,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad netpbm data: {0}")]
    BadFormat(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("manifest schema error at {0}")]
    Schema(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("class ids are not dense 0..N-1: {0:?}")]
    NonDenseClassIds(Vec<usize>),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}
