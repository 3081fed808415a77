//! Floating-point RGB images and small 2D grids.

use crate::error::{Error, Result};

/// Row-major H×W×3 image. Targets live in `[0, 1]`; renders and residuals
/// are signed and unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl ImageBuffer {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * CHANNELS] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// `f(row, col)` gives the pixel color.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_dims(&self, other: &ImageBuffer) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected_w: self.width,
                expected_h: self.height,
                got_w: other.width,
                got_h: other.height,
            })
        }
    }

    pub fn add(&self, other: &ImageBuffer) -> Result<ImageBuffer> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ImageBuffer) -> Result<ImageBuffer> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &ImageBuffer) -> Result<()> {
        self.check_dims(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn zip_with(&self, other: &ImageBuffer, f: impl Fn(f64, f64) -> f64) -> Result<ImageBuffer> {
        self.check_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(ImageBuffer { width: self.width, height: self.height, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, k: f64) -> ImageBuffer {
        self.map(|v| v * k)
    }

    pub fn clamped(&self) -> ImageBuffer {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &ImageBuffer) -> Result<f64> {
        self.check_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Copy of the rectangle `[row0, row0+h) × [col0, col0+w)`.
    pub fn crop(&self, row0: usize, col0: usize, w: usize, h: usize) -> Result<ImageBuffer> {
        if row0 + h > self.height || col0 + w > self.width {
            return Err(Error::InvalidParameter(format!(
                "crop {w}x{h}@({row0},{col0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(ImageBuffer::from_fn(w, h, |r, c| self.get(row0 + r, col0 + c)))
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at +0.5).
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let (a, b, c, d) = (self.get(y0, x0), self.get(y0, x1), self.get(y1, x0), self.get(y1, x1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] * (1.0 - tx) + b[k] * tx;
            let bot = c[k] * (1.0 - tx) + d[k] * tx;
            out[k] = top * (1.0 - ty) + bot * ty;
        }
        out
    }

    /// 2×2 box downsample; odd trailing rows/cols are dropped.
    pub fn downsample2(&self) -> ImageBuffer {
        let (w, h) = (self.width / 2, self.height / 2);
        ImageBuffer::from_fn(w, h, |r, c| {
            let mut acc = [0.0; 3];
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let p = self.get(2 * r + dr, 2 * c + dc);
                for k in 0..3 {
                    acc[k] += 0.25 * p[k];
                }
            }
            acc
        })
    }

    /// Single channel as a dense plane.
    pub fn channel(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(CHANNELS).copied().collect()
    }
}

/// Dense row-major grid, one cell per patch token.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    cells: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self { rows, cols, cells: vec![v; rows * cols] }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(rows: usize, cols: usize, cells: Vec<T>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} cells for a {rows}x{cols} grid", cells.len())));
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                cells.push(f(r, c));
            }
        }
        Self { rows, cols, cells }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> &T {
        &self.cells[r * self.cols + c]
    }

    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.cells[r * self.cols + c]
    }

    pub fn cells(&self) -> &[T] {
        &self.cells
    }

    pub fn iter_indexed(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        self.cells.iter().enumerate().map(move |(i, v)| (i / self.cols, i % self.cols, v))
    }
}

impl Grid<bool> {
    pub fn count_true(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }
}

/// Number of `p`-sized patches needed to cover `n` pixels.
pub fn patch_count(n: usize, p: usize) -> usize {
    n.div_ceil(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_pixel_centers() {
        let img = ImageBuffer::from_fn(4, 3, |r, c| [r as f64, c as f64, 0.0]);
        assert_eq!(img.sample_bilinear(2.5, 1.5), [1.0, 2.0, 0.0]);
        let mid = img.sample_bilinear(2.0, 1.5);
        assert!((mid[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn dims_checked() {
        let a = ImageBuffer::zeros(4, 4);
        let b = ImageBuffer::zeros(4, 5);
        assert!(matches!(a.sub(&b), Err(Error::DimensionMismatch { .. })));
        assert!(ImageBuffer::from_vec(2, 2, vec![0.0; 11]).is_err());
    }

    #[test]
    fn grid_shape() {
        assert_eq!(patch_count(28, 14), 2);
        assert_eq!(patch_count(29, 14), 3);
        let g = Grid::from_fn(2, 3, |r, c| r * 3 + c);
        assert_eq!(*g.get(1, 2), 5);
        assert_eq!(g.iter_indexed().last().map(|(r, c, _)| (r, c)), Some((1, 2)));
    }
}
