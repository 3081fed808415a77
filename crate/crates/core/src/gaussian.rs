//! Gaussian primitives, stage-tagged collections and the rotation-scale
//! covariance.
//!
//! Coordinates are continuous pixel units with x to the right and y down;
//! pixel `(row, col)` has its center at `(col + 0.5, row + 0.5)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// One 2D Gaussian primitive. Opacity is folded into the signed `color`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D {
    pub mu: [f64; 2],
    pub log_scale: [f64; 2],
    pub theta: f64,
    pub color: [f64; 3],
}

impl Gaussian2D {
    /// Builds a primitive from linear scales (pixels). `theta` is canonicalized.
    pub fn new(mu: [f64; 2], scale: [f64; 2], theta: f64, color: [f64; 3]) -> Result<Self> {
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidParameter(format!("scales must be positive, got {scale:?}")));
        }
        Self::from_log_scale(mu, [scale[0].ln(), scale[1].ln()], theta, color)
    }

    pub fn from_log_scale(mu: [f64; 2], log_scale: [f64; 2], theta: f64, color: [f64; 3]) -> Result<Self> {
        let g = Self { mu, log_scale, theta: canonicalize_theta(theta), color };
        if !g.is_finite() {
            return Err(Error::InvalidParameter(format!("non-finite gaussian {g:?}")));
        }
        Ok(g)
    }

    pub fn scale(&self) -> [f64; 2] {
        [self.log_scale[0].exp(), self.log_scale[1].exp()]
    }

    pub fn covariance(&self) -> Result<Covariance2D> {
        build_covariance(self.log_scale, self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.log_scale).chain(&self.color).all(|v| v.is_finite())
            && self.theta.is_finite()
    }
}

/// Maps an angle onto `[0, π)`. An ellipse is unchanged by a half turn.
pub fn canonicalize_theta(theta: f64) -> f64 {
    let r = theta.rem_euclid(PI);
    // rem_euclid can round up to exactly π for tiny negative inputs.
    if r >= PI {
        0.0
    } else {
        r
    }
}

/// Symmetric 2x2 matrix stored as `[xx, xy, yy]`.
pub type Sym2 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance2D {
    pub sigma: Sym2,
    pub sigma_inv: Sym2,
    pub det: f64,
}

impl Covariance2D {
    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let [a, b, c] = self.sigma;
        let mean = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        [mean + rad, mean - rad]
    }
}

/// `Σ = (R S)(R S)ᵀ` with `R` the rotation by `theta` and `S = diag(exp(log_scale))`.
pub fn build_covariance(log_scale: [f64; 2], theta: f64) -> Result<Covariance2D> {
    if !(log_scale[0].is_finite() && log_scale[1].is_finite() && theta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "covariance inputs must be finite: log_scale={log_scale:?}, theta={theta}"
        )));
    }
    let v1 = (2.0 * log_scale[0]).exp();
    let v2 = (2.0 * log_scale[1]).exp();
    Ok(covariance_from_variances(v1, v2, theta))
}

/// Covariance from principal variances; shared with the renderer, which
/// floors the variances before calling this.
pub(crate) fn covariance_from_variances(v1: f64, v2: f64, theta: f64) -> Covariance2D {
    let (s, c) = theta.sin_cos();
    let sigma = [c * c * v1 + s * s * v2, c * s * (v1 - v2), s * s * v1 + c * c * v2];
    let (u1, u2) = (1.0 / v1, 1.0 / v2);
    let sigma_inv = [c * c * u1 + s * s * u2, c * s * (u1 - u2), s * s * u1 + c * c * u2];
    Covariance2D { sigma, sigma_inv, det: v1 * v2 }
}

/// Structure-of-arrays collection of primitives with a stage tag each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    pub mu: Vec<[f64; 2]>,
    pub log_scale: Vec<[f64; 2]>,
    pub theta: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub stage: Vec<u16>,
}

impl GaussianSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            mu: Vec::with_capacity(n),
            log_scale: Vec::with_capacity(n),
            theta: Vec::with_capacity(n),
            color: Vec::with_capacity(n),
            stage: Vec::with_capacity(n),
        }
    }

    pub fn from_gaussians<I: IntoIterator<Item = Gaussian2D>>(items: I, stage: u16) -> Self {
        let mut set = Self::new();
        for g in items {
            set.push(g, stage);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn push(&mut self, g: Gaussian2D, stage: u16) {
        self.mu.push(g.mu);
        self.log_scale.push(g.log_scale);
        self.theta.push(canonicalize_theta(g.theta));
        self.color.push(g.color);
        self.stage.push(stage);
    }

    pub fn get(&self, i: usize) -> Gaussian2D {
        Gaussian2D {
            mu: self.mu[i],
            log_scale: self.log_scale[i],
            theta: self.theta[i],
            color: self.color[i],
        }
    }

    pub fn set(&mut self, i: usize, g: Gaussian2D) {
        self.mu[i] = g.mu;
        self.log_scale[i] = g.log_scale;
        self.theta[i] = canonicalize_theta(g.theta);
        self.color[i] = g.color;
    }

    pub fn iter(&self) -> impl Iterator<Item = Gaussian2D> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Appends `other` after `self`, keeping stage tags.
    pub fn extend_from(&mut self, other: &GaussianSet) {
        self.mu.extend_from_slice(&other.mu);
        self.log_scale.extend_from_slice(&other.log_scale);
        self.theta.extend_from_slice(&other.theta);
        self.color.extend_from_slice(&other.color);
        self.stage.extend_from_slice(&other.stage);
    }

    /// Primitives whose stage tag is at most `stage`: the prefix set `G_stage`.
    pub fn prefix(&self, stage: u16) -> GaussianSet {
        self.filter(|_, s| s <= stage)
    }

    /// Primitives tagged with exactly `stage`.
    pub fn stage_only(&self, stage: u16) -> GaussianSet {
        self.filter(|_, s| s == stage)
    }

    fn filter(&self, keep: impl Fn(usize, u16) -> bool) -> GaussianSet {
        let mut out = GaussianSet::new();
        for i in 0..self.len() {
            if keep(i, self.stage[i]) {
                out.push(self.get(i), self.stage[i]);
            }
        }
        out
    }

    pub fn set_stage(&mut self, stage: u16) {
        self.stage.iter_mut().for_each(|s| *s = stage);
    }

    pub fn max_stage(&self) -> u16 {
        self.stage.iter().copied().max().unwrap_or(0)
    }

    /// Number of primitives per stage `1..=n_stages`.
    pub fn stage_counts(&self, n_stages: usize) -> Vec<usize> {
        let mut counts = vec![0; n_stages];
        for &s in &self.stage {
            if s >= 1 && (s as usize) <= n_stages {
                counts[s as usize - 1] += 1;
            }
        }
        counts
    }

    pub fn is_stage_sorted(&self) -> bool {
        self.stage.windows(2).all(|w| w[0] <= w[1])
    }

    /// Checks array lengths and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.mu.len();
        if [self.log_scale.len(), self.theta.len(), self.color.len(), self.stage.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::ShapeMismatch("gaussian set arrays differ in length".into()));
        }
        if let Some(i) = (0..n).find(|&i| !self.get(i).is_finite()) {
            return Err(Error::InvalidParameter(format!("gaussian {i} is not finite")));
        }
        Ok(())
    }

    /// Multiplies every color by `k`.
    pub fn scale_colors(&mut self, k: f64) {
        for c in &mut self.color {
            c.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn translate(&mut self, dx: f64, dy: f64) {
        for m in &mut self.mu {
            m[0] += dx;
            m[1] += dy;
        }
    }
}

/// `a ∪ b` with `a`'s primitives first.
pub fn merge_sets(a: &GaussianSet, b: &GaussianSet) -> GaussianSet {
    let mut out = GaussianSet::with_capacity(a.len() + b.len());
    out.extend_from(a);
    out.extend_from(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_sym_close(a: Sym2, b: Sym2, tol: f64) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn isotropic_covariance_ignores_rotation() {
        let c = build_covariance([0.0, 0.0], 0.7).unwrap();
        assert_sym_close(c.sigma, [1.0, 0.0, 1.0], 1e-12);
    }

    #[test]
    fn axis_aligned_and_quarter_turn() {
        let c = build_covariance([2f64.ln(), 0.0], 0.0).unwrap();
        assert_sym_close(c.sigma, [4.0, 0.0, 1.0], 1e-12);
        let c = build_covariance([2f64.ln(), 0.0], PI / 2.0).unwrap();
        assert_sym_close(c.sigma, [1.0, 0.0, 4.0], 1e-12);
    }

    #[test]
    fn non_finite_input_rejected() {
        assert!(build_covariance([f64::NAN, 0.0], 0.0).is_err());
        assert!(build_covariance([0.0, 0.0], f64::INFINITY).is_err());
    }

    #[test]
    fn canonical_theta_examples() {
        assert!((canonicalize_theta(PI + 0.3) - 0.3).abs() < 1e-12);
        assert!((canonicalize_theta(-0.1) - (PI - 0.1)).abs() < 1e-12);
        assert_eq!(canonicalize_theta(0.5), 0.5);
        assert_eq!(canonicalize_theta(PI), 0.0);
        assert_eq!(canonicalize_theta(-1e-18), 0.0);
    }

    #[test]
    fn merge_contract() {
        let empty = GaussianSet::new();
        assert!(merge_sets(&empty, &empty).is_empty());
        let g = Gaussian2D::new([1.0, 2.0], [1.0, 2.0], 0.3, [0.1, 0.2, 0.3]).unwrap();
        let a = GaussianSet::from_gaussians(vec![g; 3], 1);
        let b = GaussianSet::from_gaussians(vec![g; 5], 2);
        assert_eq!(merge_sets(&a, &empty), a);
        let m = merge_sets(&a, &b);
        assert_eq!(m.len(), 8);
        assert_eq!(m.stage, vec![1, 1, 1, 2, 2, 2, 2, 2]);
        assert!(m.is_stage_sorted());
        assert_eq!(m.prefix(1), a);
        assert_eq!(m.stage_counts(2), vec![3, 5]);
    }

    proptest! {
        #[test]
        fn eigenvalues_are_squared_scales(l1 in -3.0f64..3.0, l2 in -3.0f64..3.0, th in -10.0f64..10.0) {
            let c = build_covariance([l1, l2], th).unwrap();
            let mut want = [(2.0 * l1).exp(), (2.0 * l2).exp()];
            want.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let got = c.eigenvalues();
            for k in 0..2 {
                prop_assert!((got[k] - want[k]).abs() <= 1e-5 * want[k].max(1e-300) + 1e-12);
            }
            // Σ Σ⁻¹ = I
            let [a, b, d] = c.sigma;
            let [ia, ib, id] = c.sigma_inv;
            let p = [a * ia + b * ib, a * ib + b * id, b * ia + d * ib, b * ib + d * id];
            let scale = 1.0;
            prop_assert!((p[0] - 1.0).abs() < 1e-5 * scale);
            prop_assert!(p[1].abs() < 1e-5 * (a.abs() * ia.abs()).max(1.0));
            prop_assert!(p[2].abs() < 1e-5 * (a.abs() * ia.abs()).max(1.0));
            prop_assert!((p[3] - 1.0).abs() < 1e-5);
            prop_assert!(c.det > 0.0 && a + d > 0.0);
        }

        #[test]
        fn covariance_has_period_pi(l1 in -2.0f64..2.0, l2 in -2.0f64..2.0, th in -10.0f64..10.0, k in -3i32..3) {
            let a = build_covariance([l1, l2], th).unwrap();
            let b = build_covariance([l1, l2], th + k as f64 * PI).unwrap();
            let c = build_covariance([l1, l2], canonicalize_theta(th)).unwrap();
            for i in 0..3 {
                prop_assert!((a.sigma[i] - b.sigma[i]).abs() < 1e-6 * (1.0 + a.sigma[i].abs()));
                prop_assert!((a.sigma[i] - c.sigma[i]).abs() < 1e-6 * (1.0 + a.sigma[i].abs()));
            }
            let t = canonicalize_theta(th);
            prop_assert!((0.0..PI).contains(&t));
        }

        #[test]
        fn merge_is_associative(na in 0usize..6, nb in 0usize..6, nc in 0usize..6) {
            let mk = |n: usize, s: u16| {
                GaussianSet::from_gaussians(
                    (0..n).map(|i| Gaussian2D::new([i as f64, s as f64], [1.0, 1.0], 0.0, [0.0; 3]).unwrap()),
                    s,
                )
            };
            let (a, b, c) = (mk(na, 1), mk(nb, 2), mk(nc, 3));
            let left = merge_sets(&merge_sets(&a, &b), &c);
            let right = merge_sets(&a, &merge_sets(&b, &c));
            prop_assert_eq!(left.len(), na + nb + nc);
            prop_assert_eq!(left, right);
        }
    }
}
