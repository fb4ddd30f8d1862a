//! Resampling of feature volumes and label rasters.
//!
//! Both use half-pixel centres (align-corners off): output index `d` maps to
//! source coordinate `(d + 0.5) · in / out − 0.5`.

use crate::store::raster::{InstanceMask, LabelImage};
use crate::store::volume::FeatureVolume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

/// Nearest source index for every output index along one axis.
pub fn nearest_indices(src_len: usize, dst_len: usize) -> Vec<usize> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| (((d as f64 + 0.5) * scale).floor() as usize).min(src_len - 1))
        .collect()
}

/// `(i0, i1, weight of i1)` for every output index along one axis.
fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Per-channel resize of a feature volume to `height × width`.
pub fn resize_features(v: &FeatureVolume, height: usize, width: usize, mode: ResizeMode) -> FeatureVolume {
    assert!(height >= 1 && width >= 1, "target dims must be positive");
    let c = v.channels();
    let src = v.values();
    let mut out = vec![0f32; height * width * c];
    match mode {
        ResizeMode::Nearest => {
            let rows = nearest_indices(v.height(), height);
            let cols = nearest_indices(v.width(), width);
            for (y, &sy) in rows.iter().enumerate() {
                for (x, &sx) in cols.iter().enumerate() {
                    out[(y * width + x) * c..(y * width + x + 1) * c].copy_from_slice(v.pixel(sy, sx));
                }
            }
        }
        ResizeMode::Bilinear => {
            let rows = bilinear_taps(v.height(), height);
            let cols = bilinear_taps(v.width(), width);
            let w = v.width();
            for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let dst = &mut out[(y * width + x) * c..(y * width + x + 1) * c];
                    let (a, b) = ((y0 * w + x0) * c, (y0 * w + x1) * c);
                    let (p, q) = ((y1 * w + x0) * c, (y1 * w + x1) * c);
                    for (k, d) in dst.iter_mut().enumerate() {
                        let top = (1.0 - fx) * src[a + k] + fx * src[b + k];
                        let bottom = (1.0 - fx) * src[p + k] + fx * src[q + k];
                        *d = (1.0 - fy) * top + fy * bottom;
                    }
                }
            }
        }
    }
    let mut resized = FeatureVolume::new(height, width, c, out).expect("resize keeps finite values");
    if let Some(p) = v.provenance() {
        if let Ok(json) = serde_json::from_str(p) {
            resized = resized.with_provenance(&json);
        }
    }
    resized
}

/// Nearest-neighbour projection of a label map onto a `height × width` grid.
/// Never produces a label absent from the input.
pub fn project_labels(labels: &LabelImage, height: usize, width: usize) -> LabelImage {
    let rows = nearest_indices(labels.height, height);
    let cols = nearest_indices(labels.width, width);
    let mut out = Vec::with_capacity(height * width);
    for &sy in &rows {
        for &sx in &cols {
            out.push(labels.get(sy, sx));
        }
    }
    LabelImage { height, width, labels: out }
}

pub fn project_instances(mask: &InstanceMask, height: usize, width: usize) -> InstanceMask {
    let rows = nearest_indices(mask.height, height);
    let cols = nearest_indices(mask.width, width);
    let mut out = Vec::with_capacity(height * width);
    for &sy in &rows {
        for &sx in &cols {
            out.push(mask.ids[sy * mask.width + sx]);
        }
    }
    InstanceMask { height, width, ids: out }
}
