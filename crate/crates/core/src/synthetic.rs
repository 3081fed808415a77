//! Deterministic procedural images used as fixtures, toy training corpora and
//! benchmark inputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::gaussian::{Gaussian2D, GaussianSet};
use crate::image::ImageBuffer;
use crate::render::{render, RenderConfig};
use crate::rng::SeedStream;

/// Lattice value noise with bilinear smoothstep interpolation.
struct ValueNoise {
    cells: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let values = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Self { cells, values }
    }

    /// `u, v` in `[0, 1]`.
    fn sample(&self, u: f64, v: f64) -> f64 {
        let n = self.cells as f64;
        let (x, y) = ((u * n).clamp(0.0, n - 1e-9), (v * n).clamp(0.0, n - 1e-9));
        let (i, j) = (x.floor() as usize, y.floor() as usize);
        let (fx, fy) = (smooth(x - i as f64), smooth(y - j as f64));
        let at = |a: usize, b: usize| self.values[b * (self.cells + 1) + a];
        let top = at(i, j) * (1.0 - fx) + at(i + 1, j) * fx;
        let bot = at(i, j + 1) * (1.0 - fx) + at(i + 1, j + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Fractal noise with roughly 1/f amplitude falloff.
struct Fbm {
    octaves: Vec<ValueNoise>,
}

impl Fbm {
    fn new(rng: &mut ChaCha8Rng, base: usize, octaves: usize) -> Self {
        Self { octaves: (0..octaves).map(|o| ValueNoise::new(rng, base << o)).collect() }
    }

    fn sample(&self, u: f64, v: f64) -> f64 {
        self.octaves.iter().enumerate().map(|(o, n)| n.sample(u, v) * 0.5f64.powi(o as i32)).sum::<f64>() * 0.5
    }
}

enum Shape {
    Disk { cx: f64, cy: f64, r: f64, color: [f64; 3] },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64, color: [f64; 3], shade: f64 },
    Stripes { cx: f64, cy: f64, r: f64, freq: f64, angle: f64, color: [f64; 3] },
}

fn rand_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base: f64 = rng.random_range(0.15..0.85);
    [
        (base + rng.random_range(-0.25..0.25)).clamp(0.05, 0.95),
        (base + rng.random_range(-0.25..0.25)).clamp(0.05, 0.95),
        (base + rng.random_range(-0.25..0.25)).clamp(0.05, 0.95),
    ]
}

/// A crop with natural-image structure: a smooth sky-like gradient, a
/// textured ground region with a soft horizon, a few hard-edged objects and
/// some fine periodic texture. Values lie in `[0, 1]`.
pub fn natural_crop(seed: u64, width: usize, height: usize) -> ImageBuffer {
    let mut rng = SeedStream::new(seed).rng("natural-crop", 0);
    let sky_top = [rng.random_range(0.35..0.6), rng.random_range(0.5..0.75), rng.random_range(0.7..0.95)];
    let sky_bot = [rng.random_range(0.6..0.85), rng.random_range(0.65..0.9), rng.random_range(0.75..0.95)];
    let ground = rand_color(&mut rng);
    let horizon: f64 = rng.random_range(0.35..0.6);
    let tilt: f64 = rng.random_range(-0.15..0.15);
    let texture = Fbm::new(&mut rng, 3, 5);
    let clouds = Fbm::new(&mut rng, 2, 3);
    let ridge = Fbm::new(&mut rng, 2, 4);
    let n_shapes = rng.random_range(3..6);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| match rng.random_range(0..3) {
            0 => Shape::Disk {
                cx: rng.random_range(0.1..0.9),
                cy: rng.random_range(0.2..0.95),
                r: rng.random_range(0.06..0.2),
                color: rand_color(&mut rng),
            },
            1 => {
                let (x0, y0) = (rng.random_range(0.0..0.75), rng.random_range(0.3..0.8));
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.random_range(0.1..0.3),
                    y1: y0 + rng.random_range(0.1..0.3),
                    color: rand_color(&mut rng),
                    shade: rng.random_range(-0.3..0.3),
                }
            }
            _ => Shape::Stripes {
                cx: rng.random_range(0.2..0.8),
                cy: rng.random_range(0.4..0.9),
                r: rng.random_range(0.08..0.18),
                freq: rng.random_range(12.0..24.0),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                color: rand_color(&mut rng),
            },
        })
        .collect();

    let aspect = height as f64 / width.max(1) as f64;
    ImageBuffer::from_fn(width, height, |r, c| {
        let u = (c as f64 + 0.5) / width as f64;
        let v = (r as f64 + 0.5) / height as f64;
        let h = horizon + tilt * (u - 0.5) + 0.08 * ridge.sample(u, 0.3);
        let mut px = if v < h {
            let t = v / h.max(1e-6);
            let cl = 0.06 * clouds.sample(u, v);
            [0, 1, 2].map(|k| sky_top[k] * (1.0 - t) + sky_bot[k] * t + cl)
        } else {
            let tex = texture.sample(u, v);
            let depth = 0.75 + 0.35 * (v - h) / (1.0 - h).max(1e-6);
            [0, 1, 2].map(|k| ground[k] * depth + 0.22 * tex)
        };
        for s in &shapes {
            match *s {
                Shape::Disk { cx, cy, r: rad, color } => {
                    let d = ((u - cx).powi(2) + ((v - cy) * aspect).powi(2)).sqrt();
                    if d < rad {
                        let lit = 1.0 - 0.4 * d / rad;
                        px = [0, 1, 2].map(|k| color[k] * lit);
                    }
                }
                Shape::Rect { x0, y0, x1, y1, color, shade } => {
                    if (x0..x1).contains(&u) && (y0..y1).contains(&v) {
                        let t = (u - x0) / (x1 - x0);
                        px = [0, 1, 2].map(|k| color[k] + shade * (t - 0.5));
                    }
                }
                Shape::Stripes { cx, cy, r: rad, freq, angle, color } => {
                    let (dx, dy) = (u - cx, (v - cy) * aspect);
                    if dx * dx + dy * dy < rad * rad {
                        let t = (dx * angle.cos() + dy * angle.sin()) * freq * std::f64::consts::TAU;
                        let s = 0.5 + 0.5 * t.sin();
                        px = [0, 1, 2].map(|k| color[k] * (0.55 + 0.45 * s));
                    }
                }
            }
        }
        px.map(|x| x.clamp(0.0, 1.0))
    })
}

/// The fixed five-crop evaluation corpus.
pub fn crop_corpus(width: usize, height: usize) -> Vec<ImageBuffer> {
    (1..=5).map(|seed| natural_crop(seed, width, height)).collect()
}

/// A scene rendered from `n` random Gaussians with positive colors; sums stay
/// within `[0, 1]`.
pub fn gaussian_scene(seed: u64, n: usize, width: usize, height: usize) -> (GaussianSet, ImageBuffer) {
    let mut rng = SeedStream::new(seed).rng("gaussian-scene", 0);
    let (w, h) = (width as f64, height as f64);
    let min_side = w.min(h);
    let mut set = GaussianSet::new();
    for _ in 0..n {
        let g = Gaussian2D::new(
            [rng.random_range(0.2 * w..0.8 * w), rng.random_range(0.2 * h..0.8 * h)],
            [rng.random_range(0.08..0.22) * min_side, rng.random_range(0.08..0.22) * min_side],
            rng.random_range(0.0..std::f64::consts::PI),
            [0, 1, 2].map(|_| rng.random_range(0.1..1.0) / n as f64),
        )
        .expect("finite scene parameters");
        set.push(g, 1);
    }
    let img = render(&set, width, height, &RenderConfig::default());
    (set, img)
}

/// Toy training corpus of random two-Gaussian scenes.
pub fn two_gaussian_corpus(count: usize, size: usize, seed: u64) -> Vec<ImageBuffer> {
    let s = SeedStream::new(seed).split("two-gaussian-corpus");
    (0..count).map(|i| gaussian_scene(s.root().wrapping_add(i as u64), 2, size, size).1).collect()
}
