//! `FVOL` feature volumes.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `FVOL` |
//! | 4     | version, `u32` = 1 |
//! | 4     | dtype code, `u32` = 0 (f32) |
//! | 12    | height, width, channels as `u32` |
//! | 4·H·W·C | values, row-major with channels fastest |
//! | 4 + n | optional: `u32` byte length then UTF-8 JSON provenance |

use std::path::Path;

use crate::error::{Error, Result};

pub const FVOL_MAGIC: &[u8; 4] = b"FVOL";
pub const FVOL_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub(crate) const HEADER_LEN: usize = 24;

/// Dense `height × width × channels` embedding map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
    provenance: Option<String>,
}

impl FeatureVolume {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!("volume dims must be >= 1, got {height}x{width}x{channels}")));
        }
        if values.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{channels} volume needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature value at index {i}")));
        }
        Ok(Self { height, width, channels, values, provenance: None })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Attaches JSON provenance (model name, image id, ...).
    pub fn with_provenance(mut self, provenance: &serde_json::Value) -> Self {
        self.provenance = Some(provenance.to_string());
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn provenance(&self) -> Option<&str> {
        self.provenance.as_deref()
    }

    /// Feature vector at `(row, col)`.
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(FVOL_MAGIC);
        for v in [FVOL_VERSION, DTYPE_F32, self.height as u32, self.width as u32, self.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(p) = &self.provenance {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            out.extend_from_slice(p.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, payload) = parse_header(bytes, FVOL_MAGIC, DTYPE_F32, 3)?;
        let (h, w, c) = (dims[0], dims[1], dims[2]);
        let n = h * w * c;
        let end = payload + 4 * n;
        if bytes.len() < end {
            return Err(Error::Truncated { expected: end, actual: bytes.len() });
        }
        let values: Vec<f32> = bytes[payload..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(payload + 4 * i, "non-finite feature value"));
        }
        let provenance = if bytes.len() == end {
            None
        } else {
            if bytes.len() < end + 4 {
                return Err(Error::Truncated { expected: end + 4, actual: bytes.len() });
            }
            let len = read_u32(bytes, end) as usize;
            let total = end + 4 + len;
            if bytes.len() != total {
                return Err(if bytes.len() < total {
                    Error::Truncated { expected: total, actual: bytes.len() }
                } else {
                    Error::format(total, format!("{} unexpected trailing bytes", bytes.len() - total))
                });
            }
            let text = std::str::from_utf8(&bytes[end + 4..total]).map_err(|e| Error::format(end + 4 + e.valid_up_to(), "provenance is not UTF-8"))?;
            serde_json::from_str::<serde_json::Value>(text).map_err(|e| Error::format(end + 4, format!("provenance is not JSON: {e}")))?;
            Some(text.to_string())
        };
        Ok(Self { height: h, width: w, channels: c, values, provenance })
    }
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Validates magic, version, dtype and `ndims` non-zero dims. Returns the
/// dims and the payload offset.
pub(crate) fn parse_header(bytes: &[u8], magic: &[u8; 4], dtype: u32, ndims: usize) -> Result<(Vec<usize>, usize)> {
    let header = 12 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Truncated { expected: header, actual: bytes.len() });
    }
    if &bytes[..4] != magic {
        return Err(Error::format(0, format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&bytes[..4]), String::from_utf8_lossy(magic))));
    }
    let version = read_u32(bytes, 4);
    if version != FVOL_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let code = read_u32(bytes, 8);
    if code != dtype {
        return Err(Error::format(8, format!("dtype code {code}, expected {dtype}")));
    }
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let d = read_u32(bytes, 12 + 4 * i) as usize;
        if d == 0 {
            return Err(Error::format(12 + 4 * i, "zero-sized dimension"));
        }
        dims.push(d);
    }
    Ok((dims, header))
}

pub fn read_feature_volume(path: impl AsRef<Path>) -> Result<FeatureVolume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureVolume::from_bytes(&bytes)
}

pub fn write_feature_volume(volume: &FeatureVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, volume.to_bytes()).map_err(|e| Error::io(path, e))
}
