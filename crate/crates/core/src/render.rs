//! Tiled forward splatting and its analytic backward pass.
//!
//! Every pixel receives `Σ c_n · exp(-½ dᵀ Σ_n⁻¹ d)` over the Gaussians whose
//! `cutoff_sigmas` ellipse covers the pixel center. The same coverage test is
//! used by forward and backward, and per-pixel sums always run in ascending
//! Gaussian index, so results do not depend on tiling or thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{covariance_from_variances, GaussianSet, Sym2};
use crate::image::{ImageBuffer, CHANNELS};

/// Smallest standard deviation the renderer will draw, in pixels. Applied to
/// the rendered kernel only; stored parameters are untouched.
pub const MIN_RENDER_STD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub cutoff_sigmas: f64,
    pub tile_size: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { cutoff_sigmas: 3.0, tile_size: 16 }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_sigmas >= 1.0) || self.tile_size < 4 {
            return Err(Error::InvalidParameter(format!("bad render config {self:?}")));
        }
        Ok(())
    }
}

/// Gradients of a scalar loss with respect to every Gaussian attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub d_mu: Vec<[f64; 2]>,
    pub d_log_scale: Vec<[f64; 2]>,
    pub d_theta: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self { d_mu: vec![[0.0; 2]; n], d_log_scale: vec![[0.0; 2]; n], d_theta: vec![0.0; n], d_color: vec![[0.0; 3]; n] }
    }

    pub fn len(&self) -> usize {
        self.d_mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_mu.is_empty()
    }

    pub fn add_assign(&mut self, other: &GaussianGrads) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::ShapeMismatch(format!("grads of length {} and {}", self.len(), other.len())));
        }
        for i in 0..self.len() {
            for k in 0..2 {
                self.d_mu[i][k] += other.d_mu[i][k];
                self.d_log_scale[i][k] += other.d_log_scale[i][k];
            }
            self.d_theta[i] += other.d_theta[i];
            for k in 0..3 {
                self.d_color[i][k] += other.d_color[i][k];
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for i in 0..self.len() {
            self.d_mu[i].iter_mut().for_each(|v| *v *= k);
            self.d_log_scale[i].iter_mut().for_each(|v| *v *= k);
            self.d_theta[i] *= k;
            self.d_color[i].iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_mu.iter().flatten().chain(self.d_log_scale.iter().flatten()).chain(self.d_color.iter().flatten()).all(|v| v.is_finite())
            && self.d_theta.iter().all(|v| v.is_finite())
    }
}

/// Per-Gaussian data precomputed for rasterization.
#[derive(Debug, Clone, Copy)]
struct Splat {
    mu: [f64; 2],
    inv: Sym2,
    color: [f64; 3],
    /// Inclusive pixel bounds `[col0, col1] × [row0, row1]`.
    cols: (usize, usize),
    rows: (usize, usize),
    /// Inverse principal variances after flooring.
    u: [f64; 2],
    floored: [bool; 2],
    sin_cos: (f64, f64),
}

fn prepare(set: &GaussianSet, width: usize, height: usize, cfg: &RenderConfig) -> Vec<Option<Splat>> {
    let floor_var = MIN_RENDER_STD * MIN_RENDER_STD;
    (0..set.len())
        .map(|i| {
            let mut floored = [false; 2];
            let mut var = [0.0; 2];
            for k in 0..2 {
                let v = (2.0 * set.log_scale[i][k]).exp();
                if v < floor_var {
                    floored[k] = true;
                    var[k] = floor_var;
                } else {
                    var[k] = v;
                }
            }
            let theta = set.theta[i];
            let cov = covariance_from_variances(var[0], var[1], theta);
            let mu = set.mu[i];
            let rx = cfg.cutoff_sigmas * cov.sigma[0].sqrt() + 1e-9;
            let ry = cfg.cutoff_sigmas * cov.sigma[2].sqrt() + 1e-9;
            let cols = pixel_span(mu[0] - rx, mu[0] + rx, width)?;
            let rows = pixel_span(mu[1] - ry, mu[1] + ry, height)?;
            Some(Splat {
                mu,
                inv: cov.sigma_inv,
                color: set.color[i],
                cols,
                rows,
                u: [1.0 / var[0], 1.0 / var[1]],
                floored,
                sin_cos: theta.sin_cos(),
            })
        })
        .collect()
}

/// Pixels whose centers `k + 0.5` fall inside `[lo, hi]`, clipped to `[0, n)`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    if !(lo.is_finite() && hi.is_finite()) {
        return None;
    }
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(n as f64 - 1.0);
    if first > last {
        return None;
    }
    Some((first as usize, last as usize))
}

struct TileGrid {
    size: usize,
    tiles_x: usize,
    tiles_y: usize,
    /// Gaussian indices per tile, ascending.
    lists: Vec<Vec<u32>>,
}

impl TileGrid {
    fn build(splats: &[Option<Splat>], width: usize, height: usize, size: usize) -> Self {
        let tiles_x = width.div_ceil(size);
        let tiles_y = height.div_ceil(size);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (i, s) in splats.iter().enumerate() {
            let Some(s) = s else { continue };
            for ty in s.rows.0 / size..=s.rows.1 / size {
                for tx in s.cols.0 / size..=s.cols.1 / size {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        Self { size, tiles_x, tiles_y, lists }
    }

    /// Pixel bounds of tile `t`: `(row0, row1, col0, col1)`, exclusive ends.
    fn bounds(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (ty, tx) = (t / self.tiles_x, t % self.tiles_x);
        let r0 = ty * self.size;
        let c0 = tx * self.size;
        (r0, (r0 + self.size).min(height), c0, (c0 + self.size).min(width))
    }

    fn len(&self) -> usize {
        self.tiles_x * self.tiles_y
    }
}

#[inline]
fn mahalanobis(inv: &Sym2, dx: f64, dy: f64) -> f64 {
    inv[0] * dx * dx + 2.0 * inv[1] * dx * dy + inv[2] * dy * dy
}

/// Forward splatting. An empty set renders to zeros.
pub fn render(set: &GaussianSet, width: usize, height: usize, cfg: &RenderConfig) -> ImageBuffer {
    let mut out = ImageBuffer::zeros(width, height);
    if set.is_empty() || width == 0 || height == 0 {
        return out;
    }
    let splats = prepare(set, width, height, cfg);
    let grid = TileGrid::build(&splats, width, height, cfg.tile_size);
    let cut2 = cfg.cutoff_sigmas * cfg.cutoff_sigmas;

    let tiles: Vec<Vec<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|t| {
            let (r0, r1, c0, c1) = grid.bounds(t, width, height);
            let tw = c1 - c0;
            let mut buf = vec![0.0; (r1 - r0) * tw * CHANNELS];
            for &gi in &grid.lists[t] {
                let s = splats[gi as usize].as_ref().expect("binned splat");
                for r in s.rows.0.max(r0)..=s.rows.1.min(r1 - 1) {
                    let dy = r as f64 + 0.5 - s.mu[1];
                    for c in s.cols.0.max(c0)..=s.cols.1.min(c1 - 1) {
                        let dx = c as f64 + 0.5 - s.mu[0];
                        let m2 = mahalanobis(&s.inv, dx, dy);
                        if m2 > cut2 {
                            continue;
                        }
                        let a = (-0.5 * m2).exp();
                        let o = ((r - r0) * tw + (c - c0)) * CHANNELS;
                        for k in 0..CHANNELS {
                            buf[o + k] += s.color[k] * a;
                        }
                    }
                }
            }
            buf
        })
        .collect();

    let data = out.data_mut();
    for (t, buf) in tiles.iter().enumerate() {
        let (r0, r1, c0, c1) = grid.bounds(t, width, height);
        let tw = c1 - c0;
        for r in r0..r1 {
            let src = &buf[(r - r0) * tw * CHANNELS..(r - r0 + 1) * tw * CHANNELS];
            let dst = (r * width + c0) * CHANNELS;
            data[dst..dst + tw * CHANNELS].copy_from_slice(src);
        }
    }
    out
}

/// Max-abs of `render(a ∪ b) − render(a) − render(b)`.
pub fn render_additive_check(a: &GaussianSet, b: &GaussianSet, width: usize, height: usize, cfg: &RenderConfig) -> f64 {
    let both = crate::gaussian::merge_sets(a, b);
    let whole = render(&both, width, height, cfg);
    let ra = render(a, width, height, cfg);
    let rb = render(b, width, height, cfg);
    whole
        .data()
        .iter()
        .zip(ra.data())
        .zip(rb.data())
        .map(|((w, x), y)| (w - x - y).abs())
        .fold(0.0, f64::max)
}

/// Accumulated partials for one Gaussian before chaining through `Σ⁻¹`.
#[derive(Debug, Clone, Copy, Default)]
struct RawGrad {
    d_mu: [f64; 2],
    d_inv: [f64; 3],
    d_color: [f64; 3],
}

/// Gradients of `L = Σ_p ⟨d_output_p, C_p⟩` with respect to every attribute.
pub fn render_backward(set: &GaussianSet, d_output: &ImageBuffer, cfg: &RenderConfig) -> GaussianGrads {
    let (width, height) = (d_output.width(), d_output.height());
    let n = set.len();
    let mut grads = GaussianGrads::zeros(n);
    if n == 0 || width == 0 || height == 0 {
        return grads;
    }
    let splats = prepare(set, width, height, cfg);
    let grid = TileGrid::build(&splats, width, height, cfg.tile_size);
    let cut2 = cfg.cutoff_sigmas * cfg.cutoff_sigmas;
    let dout = d_output.data();

    let partials: Vec<Vec<RawGrad>> = (0..grid.len())
        .into_par_iter()
        .map(|t| {
            let (r0, r1, c0, c1) = grid.bounds(t, width, height);
            grid.lists[t]
                .iter()
                .map(|&gi| {
                    let s = splats[gi as usize].as_ref().expect("binned splat");
                    let mut g = RawGrad::default();
                    for r in s.rows.0.max(r0)..=s.rows.1.min(r1 - 1) {
                        let dy = r as f64 + 0.5 - s.mu[1];
                        for c in s.cols.0.max(c0)..=s.cols.1.min(c1 - 1) {
                            let dx = c as f64 + 0.5 - s.mu[0];
                            let m2 = mahalanobis(&s.inv, dx, dy);
                            if m2 > cut2 {
                                continue;
                            }
                            let a = (-0.5 * m2).exp();
                            let o = (r * width + c) * CHANNELS;
                            let up = [dout[o], dout[o + 1], dout[o + 2]];
                            let mut d_alpha = 0.0;
                            for k in 0..CHANNELS {
                                g.d_color[k] += up[k] * a;
                                d_alpha += up[k] * s.color[k];
                            }
                            // dL/d(m²)
                            let w = -0.5 * a * d_alpha;
                            g.d_inv[0] += w * dx * dx;
                            g.d_inv[1] += w * 2.0 * dx * dy;
                            g.d_inv[2] += w * dy * dy;
                            g.d_mu[0] += w * -2.0 * (s.inv[0] * dx + s.inv[1] * dy);
                            g.d_mu[1] += w * -2.0 * (s.inv[1] * dx + s.inv[2] * dy);
                        }
                    }
                    g
                })
                .collect()
        })
        .collect();

    let mut raw = vec![RawGrad::default(); n];
    for (t, list) in partials.iter().enumerate() {
        for (&gi, p) in grid.lists[t].iter().zip(list) {
            let acc = &mut raw[gi as usize];
            for k in 0..2 {
                acc.d_mu[k] += p.d_mu[k];
            }
            for k in 0..3 {
                acc.d_inv[k] += p.d_inv[k];
                acc.d_color[k] += p.d_color[k];
            }
        }
    }

    for (i, (r, s)) in raw.iter().zip(&splats).enumerate() {
        let Some(s) = s else { continue };
        grads.d_mu[i] = r.d_mu;
        grads.d_color[i] = r.d_color;
        let (sn, cs) = s.sin_cos;
        let [u1, u2] = s.u;
        let [da, db, dc] = r.d_inv;
        // Σ⁻¹ = R diag(u1, u2) Rᵀ; du_k/dlog_scale_k = −2 u_k unless floored.
        if !s.floored[0] {
            grads.d_log_scale[i][0] = (da * cs * cs + db * cs * sn + dc * sn * sn) * (-2.0 * u1);
        }
        if !s.floored[1] {
            grads.d_log_scale[i][1] = (da * sn * sn - db * cs * sn + dc * cs * cs) * (-2.0 * u2);
        }
        grads.d_theta[i] = da * 2.0 * cs * sn * (u2 - u1) + db * (cs * cs - sn * sn) * (u1 - u2) + dc * 2.0 * cs * sn * (u1 - u2);
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian2D;

    fn single(mu: [f64; 2], color: [f64; 3]) -> GaussianSet {
        GaussianSet::from_gaussians([Gaussian2D::new(mu, [1.0, 1.0], 0.0, color).unwrap()], 1)
    }

    #[test]
    fn empty_set_renders_black() {
        let img = render(&GaussianSet::new(), 8, 8, &RenderConfig::default());
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_form_values() {
        let set = single([3.5, 4.5], [1.0, 0.0, 0.0]);
        let img = render(&set, 8, 8, &RenderConfig::default());
        assert_eq!(img.get(4, 3), [1.0, 0.0, 0.0]);
        let right = img.get(4, 4);
        assert!((right[0] - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(right[1], 0.0);
        // 4 px away is beyond the 3σ cutoff
        assert_eq!(img.get(4, 7), [0.0; 3]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let set = single([3.2, 4.1], [0.3, -0.2, 0.5]);
        let g = render_backward(&set, &ImageBuffer::zeros(8, 8), &RenderConfig::default());
        assert_eq!(g, GaussianGrads::zeros(1));
    }

    #[test]
    fn mode_is_stationary() {
        let set = single([3.5, 4.5], [0.7, 0.1, -0.4]);
        let mut up = ImageBuffer::zeros(8, 8);
        up.set(4, 3, [1.0, 1.0, 1.0]);
        let g = render_backward(&set, &up, &RenderConfig::default());
        assert_eq!(g.d_color[0], [1.0, 1.0, 1.0]);
        assert_eq!(g.d_mu[0], [0.0, 0.0]);
    }

    #[test]
    fn off_canvas_gaussian_is_ignored() {
        let set = single([-50.0, -50.0], [1.0, 1.0, 1.0]);
        let img = render(&set, 8, 8, &RenderConfig::default());
        assert!(img.data().iter().all(|&v| v == 0.0));
        let g = render_backward(&set, &ImageBuffer::filled(8, 8, [1.0; 3]), &RenderConfig::default());
        assert_eq!(g, GaussianGrads::zeros(1));
    }

    #[test]
    fn tile_size_does_not_change_output() {
        let mut set = GaussianSet::new();
        for i in 0..20 {
            let f = i as f64;
            set.push(Gaussian2D::new([f * 1.7 % 30.0, f * 2.3 % 25.0], [1.0 + f * 0.1, 2.0], f * 0.4, [0.1 * f, -0.2, 0.3]).unwrap(), 1);
        }
        let a = render(&set, 30, 25, &RenderConfig { tile_size: 4, ..Default::default() });
        let b = render(&set, 30, 25, &RenderConfig { tile_size: 16, ..Default::default() });
        assert_eq!(a, b);
    }

    #[test]
    fn scale_floor_zeroes_log_scale_grad() {
        let set = GaussianSet::from_gaussians([Gaussian2D::new([4.0, 4.0], [0.1, 1.5], 0.2, [1.0; 3]).unwrap()], 1);
        let g = render_backward(&set, &ImageBuffer::filled(8, 8, [1.0; 3]), &RenderConfig::default());
        assert_eq!(g.d_log_scale[0][0], 0.0);
        assert!(g.d_log_scale[0][1] != 0.0);
    }
}
