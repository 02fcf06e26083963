//! Grayscale PGM rendering of square matrices.

use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Maps `[0, max]` linearly onto pixels `[255, 0]` (darker is larger).
/// An all-zero matrix renders white.
pub fn heatmap_pixels(matrix: &Tensor) -> Result<Vec<u8>> {
    if matrix.rank() != 2 || matrix.shape()[0] != matrix.shape()[1] {
        return Err(dim_err(format!("heatmap needs a square matrix, got {:?}", matrix.shape())));
    }
    if matrix.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation("heatmap values must be finite and non-negative".into()));
    }
    let max = matrix.data().iter().cloned().fold(0.0, f64::max);
    Ok(matrix
        .data()
        .iter()
        .map(|&v| if max == 0.0 { 255 } else { (255.0 * (1.0 - v / max)).round() as u8 })
        .collect())
}

/// Binary (P5) portable graymap.
pub fn heatmap_pgm(matrix: &Tensor) -> Result<Vec<u8>> {
    let pixels = heatmap_pixels(matrix)?;
    let n = matrix.shape()[0];
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

pub fn export_heatmap(matrix: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_pgm(matrix)?)?;
    Ok(())
}
