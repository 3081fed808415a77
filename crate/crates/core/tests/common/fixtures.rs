//! Seeded scenes and trial setups shared by the property and acceptance tests.

use gsir_core::optim::{fit_set, FitConfig};
use gsir_core::rng::SeedStream;
use gsir_core::{render, Gaussian2D, GaussianSet, ImageBuffer, RenderConfig};
use rand::Rng;

/// `n` Gaussians with signed colors anywhere on a `w×h` canvas.
pub fn random_scene(seed: u64, n: usize, w: usize, h: usize) -> GaussianSet {
    let mut rng = SeedStream::new(seed).rng("scene", 0);
    let mut set = GaussianSet::new();
    for _ in 0..n {
        let g = Gaussian2D::new(
            [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)],
            [rng.random_range(0.8..4.0), rng.random_range(0.8..4.0)],
            rng.random_range(0.0..std::f64::consts::PI),
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        )
        .unwrap();
        set.push(g, 1);
    }
    set
}

/// Renders one random Gaussian on 32×32, perturbs a copy (scales ±20%,
/// centers ±2 px, colors ±0.2) and refits it for `steps` Adam steps.
/// Returns the final PSNR against the unperturbed rendering.
pub fn self_fit_trial(seed: u64, steps: usize) -> f64 {
    let mut rng = SeedStream::new(seed).rng("self-fit", 0);
    let g = Gaussian2D::new(
        [rng.random_range(12.0..20.0), rng.random_range(12.0..20.0)],
        [rng.random_range(2.0..5.0), rng.random_range(2.0..5.0)],
        rng.random_range(0.0..std::f64::consts::PI),
        [0, 1, 2].map(|_| rng.random_range(0.3..1.0)),
    )
    .unwrap();
    let target = render(&GaussianSet::from_gaussians([g], 1), 32, 32, &RenderConfig::default());
    let s = g.scale();
    let mut p = g;
    p.log_scale = [0, 1].map(|k| (s[k] * rng.random_range(0.8..1.2)).ln());
    p.mu = [0, 1].map(|k| g.mu[k] + rng.random_range(-2.0..2.0));
    p.color = [0, 1, 2].map(|k| g.color[k] + rng.random_range(-0.2..0.2));
    let fit = fit_set(GaussianSet::from_gaussians([p], 1), &target, steps, &FitConfig::default()).unwrap();
    fit.curve.last().unwrap().psnr
}

/// A refinement trial: `n` random positive Gaussians as the increment, half
/// of a natural crop as the previous render.
pub fn refine_setup(seed: u64, n: usize, size: usize) -> (GaussianSet, ImageBuffer, ImageBuffer, ImageBuffer) {
    let target = gsir_core::synthetic::natural_crop(1000 + seed, size, size);
    let prev = target.scale(0.5);
    let residual = target.sub(&prev).unwrap();
    let mut rng = SeedStream::new(seed).rng("refine-trial", 0);
    let s = size as f64;
    let mut delta = GaussianSet::new();
    for _ in 0..n {
        let g = Gaussian2D::new(
            [rng.random_range(0.0..s), rng.random_range(0.0..s)],
            [rng.random_range(1.0..6.0), rng.random_range(1.0..6.0)],
            rng.random_range(0.0..std::f64::consts::PI),
            [0, 1, 2].map(|_| rng.random_range(0.0..0.5)),
        )
        .unwrap();
        delta.push(g, 2);
    }
    (delta, residual, prev, target)
}
