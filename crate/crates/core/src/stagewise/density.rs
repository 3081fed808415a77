use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::image::{patch_count, Grid};

/// Counts of Gaussian centers per `cell × cell` block of a `width × height`
/// canvas. Centers outside the canvas are counted in the nearest border cell,
/// so the grid total always equals the set size.
pub fn density_map(set: &GaussianSet, width: usize, height: usize, cell: usize) -> Result<Grid<usize>> {
    if cell < 1 || width < 1 || height < 1 {
        return Err(Error::InvalidParameter(format!("density map needs cell >= 1 and a non-empty canvas (cell {cell}, {width}x{height})")));
    }
    let (rows, cols) = (patch_count(height, cell), patch_count(width, cell));
    let mut grid = Grid::filled(rows, cols, 0usize);
    for m in &set.mu {
        let c = ((m[0] / cell as f64).floor().max(0.0) as usize).min(cols - 1);
        let r = ((m[1] / cell as f64).floor().max(0.0) as usize).min(rows - 1);
        *grid.get_mut(r, c) += 1;
    }
    Ok(grid)
}

/// One row of a density map.
pub fn density_profile(grid: &Grid<usize>, row: usize) -> Result<Vec<usize>> {
    if row >= grid.rows() {
        return Err(Error::InvalidParameter(format!("profile row {row} outside {} rows", grid.rows())));
    }
    Ok((0..grid.cols()).map(|c| *grid.get(row, c)).collect())
}
