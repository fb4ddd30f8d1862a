//! Label images, instance masks and grayscale images.
//!
//! Labels and instances are read from 8/16-bit grayscale PNG or from raw
//! files sharing the `FVOL` header discipline with a 2-D shape:
//! magic, version `u32`, dtype code `u32`, height `u32`, width `u32`, payload.
//! `.lbl` uses magic `LABL` and dtype 1 (`u16`); `.ins` uses `INST` and
//! dtype 2 (`u32`).

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::store::volume::{parse_header, FeatureVolume, FVOL_VERSION};

pub const LABEL_MAGIC: &[u8; 4] = b"LABL";
pub const INSTANCE_MAGIC: &[u8; 4] = b"INST";
pub const DTYPE_U16: u32 = 1;
pub const DTYPE_U32: u32 = 2;

/// Per-pixel class labels; 0 means unlabeled, `1..=K` are classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

/// Per-pixel instance ids; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
}

/// Single-channel image with `f32` intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl LabelImage {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        check_len(height, width, labels.len())?;
        Ok(Self { height, width, labels })
    }

    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self { height, width, labels: vec![0; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

impl InstanceMask {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        check_len(height, width, ids.len())?;
        Ok(Self { height, width, ids })
    }

    /// Pixel indices of every instance, ordered by ascending id.
    pub fn pixels_by_id(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in self.ids.iter().enumerate() {
            if id != 0 {
                out.entry(id).or_default().push(i);
            }
        }
        out
    }
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        check_len(height, width, pixels.len())?;
        Ok(Self { height, width, pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

fn check_len(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 || height * width != len {
        return Err(Error::Dimension(format!("{height}x{width} raster with {len} values")));
    }
    Ok(())
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn raw_header(magic: &[u8; 4], dtype: u32, height: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    for v in [FVOL_VERSION, dtype, height as u32, width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn raw_payload<'a>(bytes: &'a [u8], magic: &[u8; 4], dtype: u32, elem: usize) -> Result<(usize, usize, &'a [u8])> {
    let (dims, start) = parse_header(bytes, magic, dtype, 2)?;
    let end = start + elem * dims[0] * dims[1];
    if bytes.len() != end {
        return Err(if bytes.len() < end {
            Error::Truncated { expected: end, actual: bytes.len() }
        } else {
            Error::format(end, "unexpected trailing bytes")
        });
    }
    Ok((dims[0], dims[1], &bytes[start..end]))
}

/// Decoded PNG as (height, width, channel count, samples widened to u16).
struct DecodedPng {
    height: usize,
    width: usize,
    channels: usize,
    max_value: f32,
    samples: Vec<u16>,
}

fn decode_png(bytes: &[u8]) -> Result<DecodedPng> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Png("indexed colour is not supported".into())),
    };
    let (height, width) = (info.height as usize, info.width as usize);
    let n = height * width * channels;
    let (samples, max_value) = match info.bit_depth {
        png::BitDepth::Sixteen => (buf[..2 * n].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect(), 65535.0),
        png::BitDepth::Eight => (buf[..n].iter().map(|&b| b as u16).collect(), 255.0),
        other => return Err(Error::Png(format!("unsupported bit depth {other:?}"))),
    };
    Ok(DecodedPng { height, width, channels, max_value, samples })
}

fn encode_png_gray16(height: usize, width: usize, samples: impl Iterator<Item = u16>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        let data: Vec<u8> = samples.flat_map(|s| s.to_be_bytes()).collect();
        writer.write_image_data(&data).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

fn gray_png_samples(bytes: &[u8], what: &str) -> Result<(usize, usize, Vec<u16>)> {
    let png = decode_png(bytes)?;
    if png.channels != 1 {
        return Err(Error::Png(format!("{what} PNG must be single-channel grayscale")));
    }
    Ok((png.height, png.width, png.samples))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    match extension(path).as_str() {
        "png" => {
            let (h, w, s) = gray_png_samples(&bytes, "label")?;
            LabelImage::new(h, w, s)
        }
        _ => {
            let (h, w, payload) = raw_payload(&bytes, LABEL_MAGIC, DTYPE_U16, 2)?;
            LabelImage::new(h, w, payload.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect())
        }
    }
}

pub fn write_labels(labels: &LabelImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match extension(path).as_str() {
        "png" => encode_png_gray16(labels.height, labels.width, labels.labels.iter().copied())?,
        _ => {
            let mut out = raw_header(LABEL_MAGIC, DTYPE_U16, labels.height, labels.width);
            out.extend(labels.labels.iter().flat_map(|l| l.to_le_bytes()));
            out
        }
    };
    write_bytes(path, &bytes)
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<InstanceMask> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    match extension(path).as_str() {
        "png" => {
            let (h, w, s) = gray_png_samples(&bytes, "instance")?;
            InstanceMask::new(h, w, s.into_iter().map(u32::from).collect())
        }
        _ => {
            let (h, w, payload) = raw_payload(&bytes, INSTANCE_MAGIC, DTYPE_U32, 4)?;
            InstanceMask::new(h, w, payload.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
        }
    }
}

pub fn write_instances(mask: &InstanceMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = raw_header(INSTANCE_MAGIC, DTYPE_U32, mask.height, mask.width);
    out.extend(mask.ids.iter().flat_map(|l| l.to_le_bytes()));
    write_bytes(path, &out)
}

/// Reads a PNG (grayscale or RGB, alpha ignored, RGB averaged) scaled to
/// `[0, 1]`, or a single-channel `FVOL` file taken as-is.
pub fn read_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if extension(path) == "png" {
        let png = decode_png(&bytes)?;
        let colour = if png.channels >= 3 { 3 } else { 1 };
        let pixels = png
            .samples
            .chunks_exact(png.channels)
            .map(|px| px[..colour].iter().map(|&s| s as f32).sum::<f32>() / (colour as f32 * png.max_value))
            .collect();
        GrayImage::new(png.height, png.width, pixels)
    } else {
        let v = FeatureVolume::from_bytes(&bytes)?;
        if v.channels() != 1 {
            return Err(Error::invalid(format!("{}: image volume must have one channel", path.display())));
        }
        GrayImage::new(v.height(), v.width(), v.values().to_vec())
    }
}

/// Writes a 16-bit grayscale PNG; intensities are clamped to `[0, 1]`.
pub fn write_image_png(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let samples = image.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16);
    write_bytes(path.as_ref(), &encode_png_gray16(image.height, image.width, samples)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelImage::new(3, 4, vec![0, 1, 2, 3, 0, 0, 1, 65535, 7, 7, 7, 0]).unwrap();
        for name in ["a.png", "a.lbl"] {
            let p = dir.path().join(name);
            write_labels(&labels, &p).unwrap();
            assert_eq!(read_labels(&p).unwrap(), labels, "{name}");
        }
    }

    #[test]
    fn instances_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = InstanceMask::new(2, 3, vec![0, 70000, 70000, 5, 0, 9]).unwrap();
        let p = dir.path().join("m.ins");
        write_instances(&mask, &p).unwrap();
        assert_eq!(read_instances(&p).unwrap(), mask);
        let by_id = mask.pixels_by_id();
        assert_eq!(by_id.keys().copied().collect::<Vec<_>>(), vec![5, 9, 70000]);
    }

    #[test]
    fn raw_label_truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.lbl");
        write_labels(&LabelImage::unlabeled(4, 4), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Truncated { expected: 52, actual: 51 })));
    }

    #[test]
    fn image_png_scales_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::new(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let p = dir.path().join("i.png");
        write_image_png(&img, &p).unwrap();
        let back = read_image(&p).unwrap();
        for (a, b) in back.pixels.iter().zip(&img.pixels) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
