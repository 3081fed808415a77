//! Reconstruction losses, image-quality metrics and patch quality maps.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03` and
//! a unit data range. The window is renormalized at image borders so the
//! dense index map has the same size as the image; it is computed per channel
//! and averaged.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{patch_count, Grid, ImageBuffer, CHANNELS};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub const L1_WEIGHT: f64 = 0.7;
pub const SSIM_WEIGHT: f64 = 0.3;

/// Standard MS-SSIM scale weights, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ssim_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l1: f64, ssim_term: f64) -> Self {
        Self { l1, ssim_term, total: L1_WEIGHT * l1 + SSIM_WEIGHT * ssim_term }
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable border-renormalized Gaussian filter over a `w×h` plane.
struct Blur {
    w: usize,
    h: usize,
    win: [f64; SSIM_WINDOW],
    norm_x: Vec<f64>,
    norm_y: Vec<f64>,
}

impl Blur {
    fn new(w: usize, h: usize) -> Self {
        let win = gaussian_window();
        let norm = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let s: f64 = (0..SSIM_WINDOW)
                        .filter(|&k| {
                            let j = i as isize + k as isize - (SSIM_WINDOW / 2) as isize;
                            j >= 0 && (j as usize) < n
                        })
                        .map(|k| win[k])
                        .sum();
                    1.0 / s
                })
                .collect()
        };
        Self { w, h, win, norm_x: norm(w), norm_y: norm(h) }
    }

    fn pass(&self, src: &[f64], horizontal: bool, adjoint: bool) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let half = (SSIM_WINDOW / 2) as isize;
        let mut out = vec![0.0; w * h];
        let (n, norm) = if horizontal { (w, &self.norm_x) } else { (h, &self.norm_y) };
        let lines = if horizontal { h } else { w };
        let idx = |line: usize, i: usize| if horizontal { line * w + i } else { i * w + line };
        for line in 0..lines {
            for i in 0..n {
                for k in 0..SSIM_WINDOW {
                    let j = i as isize + k as isize - half;
                    if j < 0 || j as usize >= n {
                        continue;
                    }
                    let j = j as usize;
                    if adjoint {
                        out[idx(line, j)] += self.win[k] * norm[i] * src[idx(line, i)];
                    } else {
                        out[idx(line, i)] += self.win[k] * norm[i] * src[idx(line, j)];
                    }
                }
            }
        }
        out
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(src, true, false), false, false)
    }

    fn adjoint(&self, src: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(src, false, true), true, true)
    }
}

/// Local statistics of one channel pair.
struct SsimStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

impl SsimStats {
    fn compute(blur: &Blur, x: &[f64], y: &[f64]) -> Self {
        let mx = blur.apply(x);
        let my = blur.apply(y);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let ex2 = blur.apply(&xx);
        let ey2 = blur.apply(&yy);
        let exy = blur.apply(&xy);
        let n = x.len();
        let (mut a1, mut a2, mut b1, mut b2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let vx = ex2[i] - mx[i] * mx[i];
            let vy = ey2[i] - my[i] * my[i];
            let cxy = exy[i] - mx[i] * my[i];
            a1[i] = 2.0 * mx[i] * my[i] + C1;
            a2[i] = 2.0 * cxy + C2;
            b1[i] = mx[i] * mx[i] + my[i] * my[i] + C1;
            b2[i] = vx + vy + C2;
        }
        Self { mx, my, a1, a2, b1, b2 }
    }

    fn ssim_at(&self, i: usize) -> f64 {
        (self.a1[i] * self.a2[i]) / (self.b1[i] * self.b2[i])
    }

    fn cs_at(&self, i: usize) -> f64 {
        self.a2[i] / self.b2[i]
    }
}

/// Dense SSIM index map (channel mean per pixel), row-major `W·H`.
pub fn ssim_map(a: &ImageBuffer, b: &ImageBuffer) -> Result<Vec<f64>> {
    a.check_dims(b)?;
    let blur = Blur::new(a.width(), a.height());
    let mut map = vec![0.0; a.pixel_count()];
    for k in 0..CHANNELS {
        let st = SsimStats::compute(&blur, &a.channel(k), &b.channel(k));
        for (i, m) in map.iter_mut().enumerate() {
            *m += st.ssim_at(i) / CHANNELS as f64;
        }
    }
    Ok(map)
}

pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let map = ssim_map(a, b)?;
    Ok(mean(&map))
}

/// SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &ImageBuffer, y: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    x.check_dims(y)?;
    let blur = Blur::new(x.width(), x.height());
    let n = x.pixel_count();
    let inv_count = 1.0 / (n * CHANNELS) as f64;
    let mut total = 0.0;
    let mut grad = ImageBuffer::zeros(x.width(), x.height());
    for k in 0..CHANNELS {
        let xc = x.channel(k);
        let yc = y.channel(k);
        let st = SsimStats::compute(&blur, &xc, &yc);
        // Upstream partials with respect to μx, E[x²] and E[xy].
        let (mut g_mx, mut g_ex2, mut g_exy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let s = st.ssim_at(i);
            total += s;
            let den = st.b1[i] * st.b2[i];
            let (mx, my) = (st.mx[i], st.my[i]);
            // A1 = 2μxμy + C1, A2 = 2(E[xy] − μxμy) + C2,
            // B1 = μx² + μy² + C1, B2 = E[x²] − μx² + E[y²] − μy² + C2
            let d_a1 = st.a2[i] / den;
            let d_a2 = st.a1[i] / den;
            let d_b1 = -s / st.b1[i];
            let d_b2 = -s / st.b2[i];
            g_mx[i] = inv_count * (d_a1 * 2.0 * my + d_a2 * (-2.0 * my) + d_b1 * 2.0 * mx + d_b2 * (-2.0 * mx));
            g_ex2[i] = inv_count * d_b2;
            g_exy[i] = inv_count * d_a2 * 2.0;
        }
        let t_mx = blur.adjoint(&g_mx);
        let t_ex2 = blur.adjoint(&g_ex2);
        let t_exy = blur.adjoint(&g_exy);
        let gd = grad.data_mut();
        for i in 0..n {
            gd[i * CHANNELS + k] = t_mx[i] + 2.0 * xc[i] * t_ex2[i] + yc[i] * t_exy[i];
        }
    }
    Ok((total * inv_count, grad))
}

/// Mean absolute error and its subgradient (zero at ties).
pub fn l1_with_grad(pred: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    pred.check_dims(target)?;
    let n = pred.data().len().max(1) as f64;
    let mut sum = 0.0;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, ImageBuffer::from_vec(pred.width(), pred.height(), data)?))
}

/// `0.7·L1 + 0.3·(1 − SSIM)`.
pub fn loss_render(pred: &ImageBuffer, target: &ImageBuffer) -> Result<LossBreakdown> {
    pred.check_dims(target)?;
    let l1 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.data().len().max(1) as f64;
    Ok(LossBreakdown::new(l1, 1.0 - ssim(pred, target)?))
}

/// Render loss plus its gradient with respect to `pred`.
pub fn loss_render_with_grad(pred: &ImageBuffer, target: &ImageBuffer) -> Result<(LossBreakdown, ImageBuffer)> {
    let (l1, g1) = l1_with_grad(pred, target)?;
    let (s, gs) = ssim_with_grad(pred, target)?;
    let grad = g1.zip_with(&gs, |a, b| L1_WEIGHT * a - SSIM_WEIGHT * b)?;
    Ok((LossBreakdown::new(l1, 1.0 - s), grad))
}

pub fn mse(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    pred.check_dims(target)?;
    let n = pred.data().len().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// PSNR in dB for unit-range images, capped at 100 dB.
pub fn psnr(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?))
}

/// Number of dyadic scales MS-SSIM uses for an image whose short side is `min_side`.
pub fn ms_ssim_scales(min_side: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len()).rev().find(|&m| min_side >= SSIM_WINDOW << (m - 1)).unwrap_or(1)
}

/// Multi-scale SSIM. Five scales need a short side of at least 176 px; smaller
/// images use fewer scales with the leading weights renormalized.
pub fn ms_ssim(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    pred.check_dims(target)?;
    let scales = ms_ssim_scales(pred.width().min(pred.height()));
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut x, mut y) = (pred.clone(), target.clone());
    let mut value = 1.0;
    for j in 0..scales {
        let blur = Blur::new(x.width(), x.height());
        let (mut cs, mut ss) = (0.0, 0.0);
        for k in 0..CHANNELS {
            let st = SsimStats::compute(&blur, &x.channel(k), &y.channel(k));
            for i in 0..x.pixel_count() {
                cs += st.cs_at(i);
                ss += st.ssim_at(i);
            }
        }
        let count = (x.pixel_count() * CHANNELS) as f64;
        let term = if j + 1 == scales { ss / count } else { cs / count };
        value *= term.max(0.0).powf(MS_SSIM_WEIGHTS[j] / wsum);
        if j + 1 < scales {
            x = x.downsample2();
            y = y.downsample2();
        }
    }
    Ok(value)
}

/// Patch-wise PSNR and pooled SSIM grids, one cell per `p×p` patch.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityMaps {
    pub patch_size: usize,
    pub psnr: Grid<f64>,
    pub ssim: Grid<f64>,
}

pub fn quality_maps(target: &ImageBuffer, recon: &ImageBuffer, patch_size: usize) -> Result<QualityMaps> {
    target.check_dims(recon)?;
    if patch_size < 2 {
        return Err(Error::InvalidParameter(format!("patch size {patch_size} < 2")));
    }
    let (w, h) = (target.width(), target.height());
    let (rows, cols) = (patch_count(h, patch_size), patch_count(w, patch_size));
    let smap = ssim_map(target, recon)?;
    let mut sq = vec![0.0; rows * cols];
    let mut ss = vec![0.0; rows * cols];
    let mut cnt = vec![0usize; rows * cols];
    for r in 0..h {
        for c in 0..w {
            let cell = (r / patch_size) * cols + c / patch_size;
            let (a, b) = (target.get(r, c), recon.get(r, c));
            for k in 0..CHANNELS {
                sq[cell] += (a[k] - b[k]) * (a[k] - b[k]);
            }
            ss[cell] += smap[r * w + c];
            cnt[cell] += 1;
        }
    }
    let psnr = Grid::from_vec(rows, cols, (0..rows * cols).map(|i| psnr_from_mse(sq[i] / (cnt[i] * CHANNELS) as f64)).collect())?;
    let ssim = Grid::from_vec(rows, cols, (0..rows * cols).map(|i| ss[i] / cnt[i] as f64).collect())?;
    Ok(QualityMaps { patch_size, psnr, ssim })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn identical_images() {
        let a = random_image(24, 20, 1);
        let l = loss_render(&a, &a).unwrap();
        assert_eq!(l.total, 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn constant_offset_closed_forms() {
        let t = ImageBuffer::filled(16, 16, [0.4, 0.5, 0.6]);
        let p = t.map(|v| v + 0.1);
        let l = loss_render(&p, &t).unwrap();
        assert!((l.l1 - 0.1).abs() < 1e-12);
        assert!((psnr(&p, &t).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_image(20, 17, 2);
        let b = random_image(20, 17, 3);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-7);
    }

    #[test]
    fn blur_adjoint_identity() {
        // ⟨W x, y⟩ = ⟨x, Wᵀ y⟩
        let blur = Blur::new(13, 9);
        let x = random_image(13, 9, 4).channel(0);
        let y = random_image(13, 9, 5).channel(1);
        let lhs: f64 = blur.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(blur.adjoint(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn render_loss_gradient_matches_finite_differences() {
        let t = random_image(32, 32, 6);
        // keep away from L1 ties
        let p = t.zip_with(&random_image(32, 32, 7), |a, b| a + 0.05 + 0.2 * b).unwrap();
        let (_, g) = loss_render_with_grad(&p, &t).unwrap();
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..60 {
            let i = rng.random_range(0..p.data().len());
            let mut plus = p.clone();
            plus.data_mut()[i] += h;
            let mut minus = p.clone();
            minus.data_mut()[i] -= h;
            let fd = (loss_render(&plus, &t).unwrap().total - loss_render(&minus, &t).unwrap().total) / (2.0 * h);
            let an = g.data()[i];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-9, "i={i} fd={fd} an={an}");
        }
    }

    #[test]
    fn psnr_cross_check_against_direct_sum() {
        let t = random_image(64, 64, 9);
        let p = random_image(64, 64, 10).zip_with(&t, |a, b| 0.9 * b + 0.1 * a).unwrap();
        let mut acc = 0.0f64;
        for r in 0..64 {
            for c in 0..64 {
                let (a, b) = (p.get(r, c), t.get(r, c));
                for k in 0..3 {
                    acc += (a[k] - b[k]).powi(2);
                }
            }
        }
        let reference = -10.0 * (acc / (64.0 * 64.0 * 3.0)).log10();
        assert!((psnr(&p, &t).unwrap() - reference).abs() < 0.01);
    }

    #[test]
    fn ms_ssim_scale_rule() {
        assert_eq!(ms_ssim_scales(176), 5);
        assert_eq!(ms_ssim_scales(175), 4);
        assert_eq!(ms_ssim_scales(64), 3);
        assert_eq!(ms_ssim_scales(5), 1);
    }

    #[test]
    fn quality_map_shape_and_corruption() {
        let t = random_image(28, 28, 11);
        let maps = quality_maps(&t, &t, 14).unwrap();
        assert_eq!(maps.psnr.dims(), (2, 2));
        assert!(maps.psnr.cells().iter().all(|&v| v == PSNR_CAP_DB));
        assert!(maps.ssim.cells().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let t = random_image(30, 23, 12);
        let mut bad = t.clone();
        for r in 7..14 {
            for c in 14..21 {
                bad.set(r, c, [0.0; 3]);
            }
        }
        let maps = quality_maps(&t, &bad, 7).unwrap();
        assert_eq!(maps.psnr.dims(), (4, 5));
        for (r, c, &v) in maps.psnr.iter_indexed() {
            if (r, c) == (1, 2) {
                assert!(v < 35.0);
            } else {
                assert_eq!(v, PSNR_CAP_DB);
            }
        }
    }

    #[test]
    fn patch_psnr_equals_psnr_of_extracted_patch() {
        let t = random_image(19, 17, 13);
        let p = random_image(19, 17, 14).zip_with(&t, |a, b| 0.7 * b + 0.3 * a).unwrap();
        let maps = quality_maps(&t, &p, 6).unwrap();
        for (r, c, &v) in maps.psnr.iter_indexed() {
            let (r0, c0) = (r * 6, c * 6);
            let (h, w) = ((r0 + 6).min(17) - r0, (c0 + 6).min(19) - c0);
            let direct = psnr(&p.crop(r0, c0, w, h).unwrap(), &t.crop(r0, c0, w, h).unwrap()).unwrap();
            assert!((v - direct).abs() < 1e-9);
        }
    }
}
