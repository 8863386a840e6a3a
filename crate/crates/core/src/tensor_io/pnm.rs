//! Binary netpbm: P5 label masks and P6 rasters, maxval 255 only.

use std::path::Path;

use super::{io_err, FormatError};

/// Mask value for pixels excluded from losses and evaluation.
pub const IGNORE_LABEL: u8 = 255;

/// An h × w map of class ids, `IGNORE_LABEL` marks ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, FormatError> {
        if data.len() != height * width {
            return Err(FormatError::DimensionMismatch(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    /// Rejects labels that are neither `< n_classes` nor ignore.
    pub fn check_classes(&self, n_classes: usize) -> Result<(), FormatError> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE_LABEL && usize::from(v) >= n_classes)
        {
            Some(v) => Err(FormatError::DimensionMismatch(format!(
                "label {v} out of range for {n_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour resample onto a `rows × cols` grid, sampling each
    /// cell's centre.
    pub fn resample_nearest(&self, rows: usize, cols: usize) -> LabelMask {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let src_r = ((2 * r + 1) * self.height) / (2 * rows);
            for c in 0..cols {
                let src_c = ((2 * c + 1) * self.width) / (2 * cols);
                data.push(self.get(src_r, src_c));
            }
        }
        LabelMask {
            height: rows,
            width: cols,
            data,
        }
    }
}

/// An h × w RGB image with interleaved 8-bit channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RasterImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, FormatError> {
        if data.len() != 3 * height * width {
            return Err(FormatError::DimensionMismatch(format!(
                "{height}x{width} raster needs {} bytes, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, height * width)
            .flatten()
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel colour scaled to [0, 1].
    pub fn unit_rgb(&self, row: usize, col: usize) -> [f64; 3] {
        self.pixel(row, col).map(|v| f64::from(v) / 255.0)
    }
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header, FormatError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(FormatError::BadFormat(format!(
            "expected magic {}, found {found:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Whitespace and comments before each field.
        let mut saw_separator = false;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => {
                    saw_separator = true;
                    pos += 1;
                }
                Some(b'#') => {
                    saw_separator = true;
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if !saw_separator {
            return Err(FormatError::BadFormat(format!(
                "missing separator at offset {pos}"
            )));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(FormatError::BadFormat(format!(
                "expected an integer at offset {start}"
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .unwrap();
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(FormatError::BadFormat(format!(
            "maxval must be 255, got {maxval}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(FormatError::BadFormat("zero image dimension".into()));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(FormatError::BadFormat(format!(
                "missing whitespace after maxval at offset {pos}"
            )))
        }
    }
    Ok(Header {
        width,
        height,
        data_offset: pos,
    })
}

fn take_payload(bytes: &[u8], header: &Header, channels: usize) -> Result<Vec<u8>, FormatError> {
    let expected = header.width * header.height * channels;
    let payload = &bytes[header.data_offset..];
    if payload.len() != expected {
        return Err(FormatError::BadFormat(format!(
            "expected {expected} pixel bytes, found {}",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

pub fn decode_mask(bytes: &[u8]) -> Result<LabelMask, FormatError> {
    let header = parse_header(bytes, b"P5")?;
    let data = take_payload(bytes, &header, 1)?;
    LabelMask::new(header.height, header.width, data)
}

pub fn encode_mask(mask: &LabelMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.data);
    out
}

pub fn decode_raster(bytes: &[u8]) -> Result<RasterImage, FormatError> {
    let header = parse_header(bytes, b"P6")?;
    let data = take_payload(bytes, &header, 3)?;
    RasterImage::new(header.height, header.width, data)
}

pub fn encode_raster(image: &RasterImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask, FormatError> {
    let path = path.as_ref();
    decode_mask(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    std::fs::write(path, encode_mask(mask)).map_err(io_err(path))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<RasterImage, FormatError> {
    let path = path.as_ref();
    decode_raster(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn write_raster(image: &RasterImage, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    std::fs::write(path, encode_raster(image)).map_err(io_err(path))
}
