use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{point_cell, HeatmapGrid, Point, HEATMAP_SIZE};

/// Default Gaussian spread of ground-truth heatmaps, in grid cells.
pub const GT_SIGMA_CELLS: f64 = 3.0;

/// Peak-1 isotropic Gaussian on a `size`×`size` grid, centered on the cell
/// that contains `target`.
pub fn gaussian_grid(target: Point, size: usize, sigma_cells: f64) -> Result<Array2<f64>> {
    let (x, y) = target;
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::InvalidValue(format!(
            "target ({x}, {y}) outside [0, 1]^2"
        )));
    }
    if !(sigma_cells > 0.0 && sigma_cells.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "sigma must be positive, got {sigma_cells}"
        )));
    }
    let (r0, c0) = point_cell(target, size);
    let two_s2 = 2.0 * sigma_cells * sigma_cells;
    Ok(Array2::from_shape_fn((size, size), |(r, c)| {
        let dr = r as f64 - r0 as f64;
        let dc = c as f64 - c0 as f64;
        (-(dr * dr + dc * dc) / two_s2).exp()
    }))
}

/// Ground-truth target heatmap used as the pixel-wise BCE label.
pub fn build_gt_heatmap(target: Point, sigma_cells: f64) -> Result<HeatmapGrid> {
    HeatmapGrid::new(gaussian_grid(target, HEATMAP_SIZE, sigma_cells)?)
}
