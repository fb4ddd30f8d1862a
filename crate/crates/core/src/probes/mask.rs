//! Gaussian locality mask for cross-attention.
//!
//! The mask is `M_ij = exp(-d_ij² / (2σ)) / (σ √(2π))`, with `σ` in the
//! position a variance would normally take. Multiplying softmax weights by
//! `M` and renormalising each row is the same as adding `ln M` to the
//! attention logits, and the `σ`-only factor cancels in the row
//! normalisation. The tape therefore adds `-d² / (2σ)` to the logits.

use crate::error::{Error, Result};

/// Point in feature-grid cell units, `[row, col]`.
pub type Position = [f64; 2];

/// Closed-form mask, row-major `queries.len() × features.len()`.
pub fn gaussian_attention_mask(queries: &[Position], features: &[Position], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    Ok(squared_distances(queries, features)
        .into_iter()
        .map(|d2| norm * (-d2 / (2.0 * sigma)).exp())
        .collect())
}

pub fn squared_distances(queries: &[Position], features: &[Position]) -> Vec<f64> {
    let mut out = Vec::with_capacity(queries.len() * features.len());
    for q in queries {
        for f in features {
            let (dr, dc) = (q[0] - f[0], q[1] - f[1]);
            out.push(dr * dr + dc * dc);
        }
    }
    out
}

/// Centres of a `rows × cols` grid whose cells are `cell` feature units
/// tall and wide.
pub fn grid_centers(rows: usize, cols: usize, cell: [f64; 2]) -> Vec<Position> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push([(r as f64 + 0.5) * cell[0], (c as f64 + 0.5) * cell[1]]);
        }
    }
    out
}

/// Maps a pixel coordinate of an `image` sized raster into feature-grid
/// units of a `grid` sized volume.
pub fn pixel_to_grid(row: f64, col: f64, image: (usize, usize), grid: (usize, usize)) -> Position {
    [
        (row + 0.5) * grid.0 as f64 / image.0 as f64,
        (col + 0.5) * grid.1 as f64 / image.1 as f64,
    ]
}
