mod common;

use common::fixtures::random_scene;
use common::oracle::{brute_render, fd_gradient, grad_close, params_of};
use gsir_core::gaussian::Gaussian2D;
use gsir_core::render::{render, render_additive_check, render_backward, RenderConfig};
use gsir_core::rng::SeedStream;
use gsir_core::{merge_sets, GaussianSet, ImageBuffer};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn matches_brute_force_forward() {
    let cfg = RenderConfig::default();
    for seed in 0..5 {
        let set = random_scene(seed, 30, 37, 29);
        let fast = render(&set, 37, 29, &cfg);
        let slow = brute_render(&params_of(&set), 37, 29, cfg.cutoff_sigmas, None);
        let diff = fast.data().iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "seed {seed}: {diff}");
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let cfg = RenderConfig::default();
    let (w, h) = (32, 32);
    for seed in 0..8 {
        let set = random_scene(100 + seed, 8, w, h);
        let mut rng = SeedStream::new(seed).rng("upstream", 0);
        let up = ImageBuffer::from_fn(w, h, |_, _| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let g = render_backward(&set, &up, &cfg);
        let fd = fd_gradient(&params_of(&set), up.data(), w, h, cfg.cutoff_sigmas, 1e-4);
        for i in 0..set.len() {
            let an = [
                g.d_mu[i][0],
                g.d_mu[i][1],
                g.d_log_scale[i][0],
                g.d_log_scale[i][1],
                g.d_theta[i],
                g.d_color[i][0],
                g.d_color[i][1],
                g.d_color[i][2],
            ];
            for k in 0..8 {
                assert!(grad_close(an[k], fd[i][k], 1e-4, 1e-8), "seed {seed} g{i} p{k}: analytic {} fd {}", an[k], fd[i][k]);
            }
        }
    }
}

#[test]
fn additivity_on_random_split() {
    let cfg = RenderConfig::default();
    let set = random_scene(7, 64, 32, 32);
    let (a, b) = (set.prefix(1).iter().take(20).collect::<Vec<_>>(), set.iter().skip(20).collect::<Vec<_>>());
    let a = GaussianSet::from_gaussians(a, 1);
    let b = GaussianSet::from_gaussians(b, 2);
    assert!(render_additive_check(&a, &b, 32, 32, &cfg) <= 1e-5);
    assert_eq!(render_additive_check(&GaussianSet::new(), &b, 32, 32, &cfg), 0.0);
    let one = GaussianSet::from_gaussians([set.get(0)], 1);
    assert!(render_additive_check(&one, &one, 32, 32, &cfg) <= 1e-6);
}

#[test]
fn render_is_deterministic() {
    let set = random_scene(9, 200, 64, 48);
    let a = render(&set, 64, 48, &RenderConfig::default());
    let b = render(&set, 64, 48, &RenderConfig::default());
    assert_eq!(a.data(), b.data());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = pool.install(|| render(&set, 64, 48, &RenderConfig::default()));
    assert_eq!(a.data(), c.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn color_homogeneity(seed in 0u64..1000, k in -3.0f64..3.0) {
        let cfg = RenderConfig::default();
        let set = random_scene(seed, 12, 24, 24);
        let mut scaled = set.clone();
        scaled.scale_colors(k);
        let a = render(&scaled, 24, 24, &cfg);
        let b = render(&set, 24, 24, &cfg).scale(k);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-12) + 1e-15);
        }
    }

    #[test]
    fn integer_translation_equivariance(seed in 0u64..1000, dx in -4i32..4, dy in -4i32..4) {
        let cfg = RenderConfig::default();
        let (w, h) = (40usize, 40usize);
        let mut rng = SeedStream::new(seed).rng("t", 0);
        let mut set = GaussianSet::new();
        for _ in 0..6 {
            set.push(Gaussian2D::new(
                [rng.random_range(14.0..26.0), rng.random_range(14.0..26.0)],
                [rng.random_range(0.8..2.0), rng.random_range(0.8..2.0)],
                rng.random_range(0.0..3.0),
                [1.0, -0.5, 0.25],
            ).unwrap(), 1);
        }
        let a = render(&set, w, h, &cfg);
        let mut moved = set.clone();
        moved.translate(dx as f64, dy as f64);
        let b = render(&moved, w, h, &cfg);
        for r in 6..34usize {
            for c in 6..34usize {
                let (r2, c2) = ((r as i32 + dy) as usize, (c as i32 + dx) as usize);
                let (p, q) = (a.get(r, c), b.get(r2, c2));
                for k in 0..3 {
                    prop_assert!((p[k] - q[k]).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn additivity_holds_for_any_split(seed in 0u64..1000, cut in 0usize..40) {
        let cfg = RenderConfig::default();
        let set = random_scene(seed, 40, 32, 32);
        let a = GaussianSet::from_gaussians(set.iter().take(cut), 1);
        let b = GaussianSet::from_gaussians(set.iter().skip(cut), 2);
        prop_assert!(render_additive_check(&a, &b, 32, 32, &cfg) <= 1e-5);
        let merged = merge_sets(&a, &b);
        prop_assert_eq!(merged.len(), 40);
    }
}
