//! Fixed sinusoidal encodings of 2-D positions.

use crate::error::{Error, Result};
use crate::probes::mask::Position;

/// Encodes each position into `dim` values, `dim` a multiple of 4. The first
/// half encodes the row and the second half the column, each as
/// interleaved `sin, cos` pairs with geometrically spaced frequencies.
pub fn sinusoidal_encoding(positions: &[Position], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::invalid(format!("encoding dimension must be a positive multiple of 4, got {dim}")));
    }
    let pairs = dim / 4;
    let freqs: Vec<f64> = (0..pairs).map(|i| 10000f64.powf(-(i as f64) / pairs as f64)).collect();
    let mut out = Vec::with_capacity(positions.len() * dim);
    for p in positions {
        for &coord in p {
            for &f in &freqs {
                out.push((coord * f).sin());
                out.push((coord * f).cos());
            }
        }
    }
    Ok(out)
}
