//! Test-only reference evaluators, written independently of the library's
//! tiled renderer.

use gsir_core::GaussianSet;

pub const FLOOR_STD: f64 = 0.3;

/// One primitive as a flat parameter vector:
/// `[mu_x, mu_y, log_s1, log_s2, theta, r, g, b]`.
pub type Params = [f64; 8];

pub fn params_of(set: &GaussianSet) -> Vec<Params> {
    (0..set.len())
        .map(|i| {
            [
                set.mu[i][0],
                set.mu[i][1],
                set.log_scale[i][0],
                set.log_scale[i][1],
                set.theta[i],
                set.color[i][0],
                set.color[i][1],
                set.color[i][2],
            ]
        })
        .collect()
}

/// Inverse covariance via explicit `M = R·S`, `Σ = M·Mᵀ`, adjugate inverse.
fn inverse_cov(p: &Params) -> [[f64; 2]; 2] {
    let s1 = p[2].exp().max(FLOOR_STD);
    let s2 = p[3].exp().max(FLOOR_STD);
    let (sn, cs) = p[4].sin_cos();
    let m = [[cs * s1, -sn * s2], [sn * s1, cs * s2]];
    let mut sig = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            sig[i][j] = m[i][0] * m[j][0] + m[i][1] * m[j][1];
        }
    }
    let det = sig[0][0] * sig[1][1] - sig[0][1] * sig[1][0];
    [[sig[1][1] / det, -sig[0][1] / det], [-sig[1][0] / det, sig[0][0] / det]]
}

fn mahal(p: &Params, x: f64, y: f64) -> f64 {
    let q = inverse_cov(p);
    let (dx, dy) = (x - p[0], y - p[1]);
    dx * (q[0][0] * dx + q[0][1] * dy) + dy * (q[1][0] * dx + q[1][1] * dy)
}

/// Coverage flags `[gaussian][row * w + col]` for the given cutoff.
pub fn coverage(ps: &[Params], w: usize, h: usize, cutoff: f64) -> Vec<Vec<bool>> {
    ps.iter()
        .map(|p| {
            (0..h * w)
                .map(|i| mahal(p, (i % w) as f64 + 0.5, (i / w) as f64 + 0.5) <= cutoff * cutoff)
                .collect()
        })
        .collect()
}

/// Direct per-pixel evaluation of the splatting sum. With `cover`, the
/// covered set per pixel is taken from it instead of being re-tested.
pub fn brute_render(ps: &[Params], w: usize, h: usize, cutoff: f64, cover: Option<&[Vec<bool>]>) -> Vec<f64> {
    let mut out = vec![0.0; w * h * 3];
    for (n, p) in ps.iter().enumerate() {
        for i in 0..w * h {
            let m2 = mahal(p, (i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            let inside = match cover {
                Some(c) => c[n][i],
                None => m2 <= cutoff * cutoff,
            };
            if inside {
                let a = (-0.5 * m2).exp();
                for k in 0..3 {
                    out[i * 3 + k] += p[5 + k] * a;
                }
            }
        }
    }
    out
}

/// Neumaier-compensated dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let v = x * y;
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Central finite-difference gradient of `Σ_p ⟨up_p, C_p⟩` with the covered
/// pixel sets frozen at the unperturbed parameters, so the truncation
/// boundary does not produce spurious jumps.
pub fn fd_gradient(ps: &[Params], up: &[f64], w: usize, h: usize, cutoff: f64, step: f64) -> Vec<Params> {
    let cover = coverage(ps, w, h, cutoff);
    let mut out = vec![[0.0; 8]; ps.len()];
    for n in 0..ps.len() {
        for k in 0..8 {
            let mut plus = ps.to_vec();
            plus[n][k] += step;
            let mut minus = ps.to_vec();
            minus[n][k] -= step;
            let fp = dot(&brute_render(&plus, w, h, cutoff, Some(&cover)), up);
            let fm = dot(&brute_render(&minus, w, h, cutoff, Some(&cover)), up);
            out[n][k] = (fp - fm) / (2.0 * step);
        }
    }
    out
}

/// Relative error with an absolute floor for vanishing gradients.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
    if numeric.abs() < abs_floor {
        return (analytic - numeric).abs() <= abs_floor;
    }
    (analytic - numeric).abs() <= rel * numeric.abs().max(analytic.abs())
}

/// Mean SSIM by direct 2D windowing: 11×11 Gaussian (σ = 1.5) restricted
/// to in-bounds pixels and renormalized, evaluated per channel and averaged.
pub fn ssim_direct(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g = |d: i64| (-(d * d) as f64 / (2.0 * 1.5 * 1.5)).exp();
    let mut total = 0.0;
    for ch in 0..3 {
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let (mut ws, mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -5..=5i64 {
                    for dx in -5..=5i64 {
                        let (y, x) = (r + dy, c + dx);
                        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                            continue;
                        }
                        let wt = g(dy) * g(dx);
                        let i = (y as usize * w + x as usize) * 3 + ch;
                        ws += wt;
                        mx += wt * a[i];
                        my += wt * b[i];
                        xx += wt * a[i] * a[i];
                        yy += wt * b[i] * b[i];
                        xy += wt * a[i] * b[i];
                    }
                }
                let (mx, my) = (mx / ws, my / ws);
                let vx = xx / ws - mx * mx;
                let vy = yy / ws - my * my;
                let cxy = xy / ws - mx * my;
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (3 * w * h) as f64
}

/// PSNR over all channels jointly, capped at 100 dB.
pub fn psnr_direct(a: &[f64], b: &[f64]) -> f64 {
    let se: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let mse = se / a.len() as f64;
    if mse <= 0.0 {
        return 100.0;
    }
    (10.0 * (1.0 / mse).log10()).min(100.0)
}
