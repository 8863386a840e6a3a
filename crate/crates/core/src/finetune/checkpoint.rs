//! `ATNM` checkpoints: a small tagged-tensor container.
//!
//! Layout: `ATNM`, version byte, dtype byte (1 = f32), two zero bytes, a u32
//! tensor count, then per tensor a u16 name length, the UTF-8 name, a u32
//! rank, `rank` u32 dims and the f32 payload. Integers are little-endian.

use std::path::Path;

use super::model::{ParamTensor, ToyModel, ToyModelConfig};
use super::FinetuneError;
use crate::tensor_io::io_err;

const MAGIC: &[u8; 4] = b"ATNM";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;

/// A trained model together with the layers it was tuned for.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyModel,
    pub top_k: Vec<usize>,
}

fn meta(name: &str, values: &[usize]) -> ParamTensor {
    ParamTensor {
        name: name.into(),
        shape: vec![values.len()],
        data: values.iter().map(|&v| v as f64).collect(),
    }
}

pub fn encode_checkpoint(checkpoint: &Checkpoint) -> Vec<u8> {
    let model = &checkpoint.model;
    let cfg = model.config();
    let trainable: Vec<usize> = model.trainable_layers().iter().copied().collect();
    let mut tensors = vec![
        meta(
            "meta.config",
            &[
                cfg.d_model,
                cfg.n_heads,
                cfg.n_layers,
                cfg.grid,
                model.vocab_size(),
            ],
        ),
        meta("meta.top_k", &checkpoint.top_k),
        meta("meta.trainable_layers", &trainable),
    ];
    tensors.extend(model.params().iter().cloned());

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, 0, 0]);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &dim in &t.shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FinetuneError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FinetuneError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, FinetuneError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize, FinetuneError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

fn meta_values(tensor: &ParamTensor) -> Vec<usize> {
    tensor.data.iter().map(|&v| v as usize).collect()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FinetuneError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(FinetuneError::Checkpoint("bad magic".into()));
    }
    let header = r.take(4)?;
    if header[0] != VERSION || header[1] != DTYPE_F32 || header[2] != 0 || header[3] != 0 {
        return Err(FinetuneError::Checkpoint(format!(
            "unsupported header {header:?}"
        )));
    }
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = usize::from(r.u16()?);
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FinetuneError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank == 0 || rank > 4 {
            return Err(FinetuneError::Checkpoint(format!(
                "tensor {name} has rank {rank}"
            )));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FinetuneError::Checkpoint(format!("tensor {name} too large")))?;
        let data: Vec<f64> = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FinetuneError::Checkpoint(format!(
                "tensor {name} has non-finite values"
            )));
        }
        tensors.push(ParamTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(FinetuneError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let mut take_meta = |name: &str| -> Result<Vec<usize>, FinetuneError> {
        let i = tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| FinetuneError::Checkpoint(format!("missing {name}")))?;
        Ok(meta_values(&tensors.remove(i)))
    };
    let cfg = take_meta("meta.config")?;
    let top_k = take_meta("meta.top_k")?;
    let trainable = take_meta("meta.trainable_layers")?;
    let [d_model, n_heads, n_layers, grid, vocab_size] = cfg[..] else {
        return Err(FinetuneError::Checkpoint(
            "meta.config needs 5 values".into(),
        ));
    };
    let config = ToyModelConfig {
        d_model,
        n_heads,
        n_layers,
        grid,
        seed: 0,
    };
    let expected = ToyModel::new(config, vocab_size)?.params().len();
    if tensors.len() != expected {
        return Err(FinetuneError::Checkpoint(format!(
            "{} parameter tensors, expected {expected}",
            tensors.len()
        )));
    }
    let mut model = ToyModel::from_params(config, vocab_size, tensors)?;
    model.restore_trainable_layers(&trainable)?;
    if let Some(&bad) = top_k.iter().find(|&&l| l >= n_layers) {
        return Err(FinetuneError::LayerOutOfRange {
            layer: bad,
            layers: n_layers,
        });
    }
    Ok(Checkpoint { model, top_k })
}

pub fn save_checkpoint(
    checkpoint: &Checkpoint,
    path: impl AsRef<Path>,
) -> Result<(), FinetuneError> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(checkpoint)).map_err(io_err(path))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, FinetuneError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}
