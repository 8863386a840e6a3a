//! The ATNS v1 container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes  | field                          |
//! |--------|--------------------------------|
//! | 0..4   | magic `ATNS`                   |
//! | 4      | version, 1                     |
//! | 5      | dtype, 1 = f32 LE              |
//! | 6..8   | reserved, zero                 |
//! | 8..24  | L, H, T, P as u32              |
//! | 24..   | L·H·T·P·P f32 values, row-major |

use std::path::Path;

use super::{io_err, FormatError};

pub const ATNS_MAGIC: [u8; 4] = *b"ATNS";
pub const ATNS_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const ATNS_HEADER_LEN: usize = 24;

/// Raw cross-attention weights for one (image, prompt) pair, shaped
/// layers × heads × tokens × grid × grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    layers: usize,
    heads: usize,
    tokens: usize,
    grid: usize,
    values: Vec<f32>,
}

impl AttentionStack {
    pub fn new(
        layers: usize,
        heads: usize,
        tokens: usize,
        grid: usize,
        values: Vec<f32>,
    ) -> Result<Self, FormatError> {
        if layers == 0 || heads == 0 || tokens == 0 || grid == 0 {
            return Err(FormatError::ShapeMismatch(format!(
                "all dimensions must be >= 1, got {layers}x{heads}x{tokens}x{grid}x{grid}"
            )));
        }
        let expected = layers * heads * tokens * grid * grid;
        if values.len() != expected {
            return Err(FormatError::ShapeMismatch(format!(
                "expected {expected} values, got {}",
                values.len()
            )));
        }
        let stack = Self {
            layers,
            heads,
            tokens,
            grid,
            values,
        };
        stack.validate_values()?;
        Ok(stack)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access to the payload. Invariants are re-checked on write.
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    fn slice_offset(&self, layer: usize, head: usize, token: usize) -> usize {
        ((layer * self.heads + head) * self.tokens + token) * self.grid * self.grid
    }

    /// The grid × grid attention slice of one (layer, head, token).
    pub fn slice(&self, layer: usize, head: usize, token: usize) -> &[f32] {
        let start = self.slice_offset(layer, head, token);
        &self.values[start..start + self.grid * self.grid]
    }

    pub fn get(&self, layer: usize, head: usize, token: usize, row: usize, col: usize) -> f32 {
        self.slice(layer, head, token)[row * self.grid + col]
    }

    /// Checks that every slice sums to one within `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<(), FormatError> {
        for layer in 0..self.layers {
            for head in 0..self.heads {
                for token in 0..self.tokens {
                    let sum: f64 = self
                        .slice(layer, head, token)
                        .iter()
                        .map(|&v| f64::from(v))
                        .sum();
                    if (sum - 1.0).abs() > tol {
                        return Err(FormatError::NotNormalized {
                            layer,
                            head,
                            token,
                            sum,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn validate_values(&self) -> Result<(), FormatError> {
        for (i, &v) in self.values.iter().enumerate() {
            let offset = ATNS_HEADER_LEN + 4 * i;
            if !v.is_finite() {
                return Err(FormatError::NonFiniteValue { offset });
            }
            if v < 0.0 {
                return Err(FormatError::NegativeValue { offset });
            }
        }
        Ok(())
    }
}

pub fn encode_attention(stack: &AttentionStack) -> Result<Vec<u8>, FormatError> {
    stack.validate_values()?;
    let mut out = Vec::with_capacity(ATNS_HEADER_LEN + 4 * stack.values.len());
    out.extend_from_slice(&ATNS_MAGIC);
    out.push(ATNS_VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0, 0]);
    for dim in [stack.layers, stack.heads, stack.tokens, stack.grid] {
        let dim = u32::try_from(dim)
            .map_err(|_| FormatError::ShapeMismatch(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for v in &stack.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Parses an ATNS buffer. The header is fully validated, including the exact
/// payload length, before any value is decoded.
pub fn decode_attention(bytes: &[u8]) -> Result<AttentionStack, FormatError> {
    if bytes.len() < ATNS_HEADER_LEN {
        // Report the first header field that is present but wrong before
        // complaining about length.
        if bytes.len() >= 4 && bytes[..4] != ATNS_MAGIC {
            return Err(FormatError::BadMagic {
                offset: 0,
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(FormatError::TruncatedFile {
            offset: bytes.len(),
            expected: ATNS_HEADER_LEN,
        });
    }
    if bytes[..4] != ATNS_MAGIC {
        return Err(FormatError::BadMagic {
            offset: 0,
            found: bytes[..4].try_into().unwrap(),
        });
    }
    if bytes[4] != ATNS_VERSION {
        return Err(FormatError::UnsupportedVersion {
            offset: 4,
            version: bytes[4],
        });
    }
    if bytes[5] != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype {
            offset: 5,
            dtype: bytes[5],
        });
    }
    for offset in [6, 7] {
        if bytes[offset] != 0 {
            return Err(FormatError::BadHeader {
                offset,
                reason: format!("reserved byte is {}", bytes[offset]),
            });
        }
    }
    let mut dims = [0usize; 4];
    let mut count: u64 = 1;
    for (i, dim) in dims.iter_mut().enumerate() {
        let offset = 8 + 4 * i;
        let value = read_u32(bytes, offset);
        if value == 0 {
            return Err(FormatError::BadHeader {
                offset,
                reason: "dimension is zero".into(),
            });
        }
        let factor = if i == 3 {
            u64::from(value).checked_mul(u64::from(value))
        } else {
            Some(u64::from(value))
        };
        count =
            factor
                .and_then(|f| count.checked_mul(f))
                .ok_or_else(|| FormatError::BadHeader {
                    offset,
                    reason: "element count overflows".into(),
                })?;
        *dim = value as usize;
    }
    let expected = count
        .checked_mul(4)
        .and_then(|b| b.checked_add(ATNS_HEADER_LEN as u64))
        .and_then(|b| usize::try_from(b).ok())
        .ok_or_else(|| FormatError::BadHeader {
            offset: 8,
            reason: "payload size overflows".into(),
        })?;
    if bytes.len() < expected {
        return Err(FormatError::TruncatedFile {
            offset: bytes.len(),
            expected,
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            offset: expected,
            expected,
        });
    }

    let values = bytes[ATNS_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let [layers, heads, tokens, grid] = dims;
    AttentionStack::new(layers, heads, tokens, grid, values)
}

pub fn read_attention(path: impl AsRef<Path>) -> Result<AttentionStack, FormatError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_attention(&bytes)
}

pub fn write_attention(stack: &AttentionStack, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    let bytes = encode_attention(stack)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(layers: usize, heads: usize, tokens: usize, grid: usize) -> AttentionStack {
        let n = layers * heads * tokens * grid * grid;
        let values = (0..n).map(|i| (i % 7) as f32 * 0.125).collect();
        AttentionStack::new(layers, heads, tokens, grid, values).unwrap()
    }

    #[test]
    fn round_trip_keeps_dims_and_values() {
        let stack = sample(2, 2, 3, 4);
        let bytes = encode_attention(&stack).unwrap();
        assert_eq!(bytes.len(), 24 + 4 * 2 * 2 * 3 * 16);
        let back = decode_attention(&bytes).unwrap();
        assert_eq!(back, stack);
        assert_eq!(back.get(1, 1, 2, 3, 3), stack.values()[2 * 2 * 3 * 16 - 1]);
    }

    #[test]
    fn single_value_file_is_header_plus_one_float() {
        let stack = AttentionStack::new(1, 1, 1, 1, vec![1.0]).unwrap();
        let bytes = encode_attention(&stack).unwrap();
        assert_eq!(bytes.len(), 28);
        assert_eq!(&bytes[..8], b"ATNS\x01\x01\x00\x00");
        assert_eq!(
            &bytes[8..24],
            &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]
        );
        assert_eq!(&bytes[24..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn short_payload_is_truncated() {
        let bytes = encode_attention(&sample(2, 2, 3, 4)).unwrap();
        let err = decode_attention(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, FormatError::TruncatedFile { .. }), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode_attention(&sample(1, 1, 1, 2)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_attention(&bytes),
            Err(FormatError::BadMagic { offset: 0, .. })
        ));
    }

    #[test]
    fn nan_is_refused_at_write_time() {
        let mut stack = sample(1, 1, 2, 2);
        stack.values_mut()[5] = f32::NAN;
        let err = encode_attention(&stack).unwrap_err();
        assert!(matches!(err, FormatError::NonFiniteValue { offset } if offset == 24 + 20));
    }

    #[test]
    fn non_finite_payload_names_offset() {
        let mut bytes = encode_attention(&sample(1, 1, 1, 2)).unwrap();
        bytes[28..32].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            decode_attention(&bytes),
            Err(FormatError::NonFiniteValue { offset: 28 })
        ));
    }

    #[test]
    fn every_single_byte_header_corruption_is_rejected() {
        let bytes = encode_attention(&sample(2, 3, 2, 3)).unwrap();
        for pos in 0..ATNS_HEADER_LEN {
            for value in 0..=255u8 {
                if value == bytes[pos] {
                    continue;
                }
                let mut corrupt = bytes.clone();
                corrupt[pos] = value;
                assert!(
                    decode_attention(&corrupt).is_err(),
                    "byte {pos} = {value} accepted"
                );
            }
        }
    }

    #[test]
    fn normalization_check() {
        let stack = AttentionStack::new(1, 1, 1, 2, vec![0.25; 4]).unwrap();
        assert!(stack.check_normalized(1e-3).is_ok());
        let stack = AttentionStack::new(1, 1, 1, 2, vec![0.3; 4]).unwrap();
        assert!(matches!(
            stack.check_normalized(1e-3),
            Err(FormatError::NotNormalized { .. })
        ));
    }
}
