//! Residual-to-Gaussian predictors. Each patch token yields one candidate.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, FormatError, Result};
use crate::gaussian::{canonicalize_theta, Gaussian2D, GaussianSet};
use crate::image::{patch_count, Grid, ImageBuffer, CHANNELS};
use crate::rng::SeedStream;

use super::control::StageMask;

/// Maps a residual image to a dense grid of candidate Gaussians.
pub trait Predictor {
    fn candidates(&self, stage: usize, residual: &ImageBuffer, patch: usize) -> Result<Grid<Gaussian2D>>;
}

/// Keeps the candidates of masked tokens, row-major, tagged with `stage`.
pub fn predict_increment(model: &dyn Predictor, residual: &ImageBuffer, mask: &StageMask, patch: usize, stage: usize) -> Result<GaussianSet> {
    let mut out = GaussianSet::new();
    if mask.count_true() == 0 {
        return Ok(out);
    }
    let cands = model.candidates(stage, residual, patch)?;
    if cands.dims() != mask.dims() {
        return Err(Error::GridMismatch {
            expected_rows: cands.rows(),
            expected_cols: cands.cols(),
            got_rows: mask.rows(),
            got_cols: mask.cols(),
        });
    }
    for (r, c, &on) in mask.iter_indexed() {
        if on {
            out.push(*cands.get(r, c), stage as u16);
        }
    }
    Ok(out)
}

/// Pixel bounds `(row0, row1, col0, col1)` of token `(r, c)`, clipped to the image.
pub fn token_bounds(r: usize, c: usize, patch: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    (r * patch, ((r + 1) * patch).min(height), c * patch, ((c + 1) * patch).min(width))
}

/// Fraction of a Gaussian's mass inside the 3σ cutoff ellipse.
const CUTOFF_MASS: f64 = 0.988_891_003_461_758_3; // 1 − exp(−4.5)

/// Training-free moment-matching predictor.
///
/// Per patch the residual energy `e = Σ_ch |r|` gives the center (energy
/// centroid), the covariance (energy-weighted second moments plus the pixel
/// footprint), and the orientation (principal axis). The color points along
/// the energy-weighted mean residual color, scaled so the kernel's integral
/// best matches the patch's residual mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicPredictor {
    /// Multiplier on the moment-matched standard deviations.
    pub spread: f64,
}

impl Default for HeuristicPredictor {
    fn default() -> Self {
        Self { spread: 2.0 }
    }
}

impl HeuristicPredictor {
    pub fn token(&self, residual: &ImageBuffer, r: usize, c: usize, patch: usize) -> Gaussian2D {
        let (w, h) = (residual.width(), residual.height());
        let (r0, r1, c0, c1) = token_bounds(r, c, patch, w, h);
        let (mut e_sum, mut mx, mut my) = (0.0, 0.0, 0.0);
        let mut mass = [0.0; 3];
        let mut wcol = [0.0; 3];
        for y in r0..r1 {
            for x in c0..c1 {
                let v = residual.get(y, x);
                let e = v.iter().map(|a| a.abs()).sum::<f64>();
                e_sum += e;
                mx += e * (x as f64 + 0.5);
                my += e * (y as f64 + 0.5);
                for k in 0..3 {
                    mass[k] += v[k];
                    wcol[k] += e * v[k];
                }
            }
        }
        let lo = 0.3f64.ln();
        let hi = (2.0 * patch as f64).ln();
        if e_sum <= 1e-12 {
            let mu = [0.5 * (c0 + c1) as f64, 0.5 * (r0 + r1) as f64];
            let ls = (patch as f64 / 4.0).ln().clamp(lo, hi);
            return Gaussian2D { mu, log_scale: [ls, ls], theta: 0.0, color: [0.0; 3] };
        }
        let mu = [mx / e_sum, my / e_sum];
        // Each pixel is a unit box, which adds 1/12 variance per axis.
        let (mut sxx, mut sxy, mut syy) = (1.0 / 12.0, 0.0, 1.0 / 12.0);
        for y in r0..r1 {
            for x in c0..c1 {
                let e = residual.get(y, x).iter().map(|a| a.abs()).sum::<f64>() / e_sum;
                let (dx, dy) = (x as f64 + 0.5 - mu[0], y as f64 + 0.5 - mu[1]);
                sxx += e * dx * dx;
                sxy += e * dx * dy;
                syy += e * dy * dy;
            }
        }
        let theta = canonicalize_theta(0.5 * (2.0 * sxy).atan2(sxx - syy));
        let mean = 0.5 * (sxx + syy);
        let rad = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
        let g2 = self.spread * self.spread;
        let (l1, l2) = (g2 * (mean + rad), g2 * (mean - rad).max(1e-12));
        let log_scale = [(0.5 * l1.ln()).clamp(lo, hi), (0.5 * l2.ln()).clamp(lo, hi)];
        let area = 2.0 * PI * (log_scale[0] + log_scale[1]).exp() * CUTOFF_MASS;
        let dir = wcol.map(|v| v / e_sum);
        let norm2: f64 = dir.iter().map(|v| v * v).sum();
        let color = if norm2 > 1e-24 {
            let k = dir.iter().zip(&mass).map(|(d, m)| d * m).sum::<f64>() / (norm2 * area);
            dir.map(|d| d * k)
        } else {
            [0.0; 3]
        };
        Gaussian2D { mu, log_scale, theta, color }
    }
}

impl Predictor for HeuristicPredictor {
    fn candidates(&self, _stage: usize, residual: &ImageBuffer, patch: usize) -> Result<Grid<Gaussian2D>> {
        let rows = patch_count(residual.height(), patch);
        let cols = patch_count(residual.width(), patch);
        Ok(Grid::from_fn(rows, cols, |r, c| self.token(residual, r, c, patch)))
    }
}

/// Raw outputs per token: μ offset (2, through a sigmoid scaled by the patch
/// size), log-scales (2), orientation (2, through `½·atan2`), color (3).
pub const TINY_OUTPUTS: usize = 9;

/// Per-stage linear map from a zero-padded `p·p·3` residual patch (plus a
/// bias input) to [`TINY_OUTPUTS`] raw outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLinear {
    patch: usize,
    n_stages: usize,
    /// Stage-major; each stage is `TINY_OUTPUTS × (inputs + 1)` row-major.
    weights: Vec<Vec<f64>>,
}

/// A token's input vector and raw outputs, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct TokenCache {
    pub row: usize,
    pub col: usize,
    pub input: Vec<f64>,
    pub raw: [f64; TINY_OUTPUTS],
}

const WEIGHTS_MAGIC: [u8; 4] = *b"GSTL";
const WEIGHTS_VERSION: u16 = 1;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl TinyLinear {
    pub fn inputs_for(patch: usize) -> usize {
        patch * patch * CHANNELS
    }

    /// Seeded initialization. Biases start at a patch-centered, isotropic
    /// Gaussian of σ = p/4; color weights start at the mass-matching average
    /// of the patch residual for that σ; all other weights are small noise.
    pub fn new(patch: usize, n_stages: usize, seed: u64) -> Result<Self> {
        if patch < 2 || n_stages < 1 {
            return Err(Error::InvalidParameter(format!("tiny predictor needs patch >= 2 and stages >= 1 (got {patch}, {n_stages})")));
        }
        let n_in = Self::inputs_for(patch);
        let stride = n_in + 1;
        let mut rng = SeedStream::new(seed).rng("tiny-linear-init", 0);
        let sigma = patch as f64 / 4.0;
        let color_gain = 1.0 / (2.0 * PI * sigma * sigma * CUTOFF_MASS);
        let mut stage = vec![0.0; TINY_OUTPUTS * stride];
        for o in 0..TINY_OUTPUTS {
            for j in 0..n_in {
                stage[o * stride + j] = rng.random_range(-1e-3..1e-3);
            }
        }
        stage[2 * stride + n_in] = sigma.ln();
        stage[3 * stride + n_in] = sigma.ln();
        stage[4 * stride + n_in] = 1.0;
        for k in 0..3 {
            for px in 0..patch * patch {
                stage[(6 + k) * stride + px * CHANNELS + k] += color_gain;
            }
        }
        Ok(Self { patch, n_stages, weights: vec![stage; n_stages] })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn n_stages(&self) -> usize {
        self.n_stages
    }

    pub fn n_inputs(&self) -> usize {
        Self::inputs_for(self.patch)
    }

    pub fn stage_weights(&self, stage: usize) -> &[f64] {
        &self.weights[stage - 1]
    }

    pub fn stage_weights_mut(&mut self, stage: usize) -> &mut [f64] {
        &mut self.weights[stage - 1]
    }

    pub fn params_per_stage(&self) -> usize {
        TINY_OUTPUTS * (self.n_inputs() + 1)
    }

    /// Copies stage `from`'s weights into stage `to`.
    pub fn copy_stage(&mut self, from: usize, to: usize) {
        let w = self.weights[from - 1].clone();
        self.weights[to - 1] = w;
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage < 1 || stage > self.n_stages {
            return Err(Error::StageBudgetExceeded { stage, budget: self.n_stages });
        }
        Ok(())
    }

    /// Zero-padded patch vectors for every token, row-major.
    pub fn patch_inputs(&self, residual: &ImageBuffer) -> Grid<Vec<f64>> {
        let p = self.patch;
        let (w, h) = (residual.width(), residual.height());
        Grid::from_fn(patch_count(h, p), patch_count(w, p), |r, c| {
            let mut v = vec![0.0; self.n_inputs()];
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (r * p + dy, c * p + dx);
                    if y < h && x < w {
                        let px = residual.get(y, x);
                        v[(dy * p + dx) * CHANNELS..(dy * p + dx + 1) * CHANNELS].copy_from_slice(&px);
                    }
                }
            }
            v
        })
    }

    pub fn raw_outputs(&self, stage: usize, input: &[f64]) -> [f64; TINY_OUTPUTS] {
        let w = &self.weights[stage - 1];
        let stride = input.len() + 1;
        let mut out = [0.0; TINY_OUTPUTS];
        for (o, v) in out.iter_mut().enumerate() {
            let row = &w[o * stride..(o + 1) * stride];
            *v = row[..input.len()].iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + row[input.len()];
        }
        out
    }

    /// Decodes raw outputs of token `(r, c)` into a primitive.
    pub fn decode(&self, raw: &[f64; TINY_OUTPUTS], r: usize, c: usize) -> Gaussian2D {
        let p = self.patch as f64;
        let mu = [c as f64 * p + p * sigmoid(raw[0]), r as f64 * p + p * sigmoid(raw[1])];
        let theta = canonicalize_theta(0.5 * raw[5].atan2(raw[4]));
        Gaussian2D { mu, log_scale: [raw[2], raw[3]], theta, color: [raw[6], raw[7], raw[8]] }
    }

    /// Candidates for masked tokens together with their caches.
    pub fn forward_masked(&self, stage: usize, residual: &ImageBuffer, mask: &StageMask) -> Result<(GaussianSet, Vec<TokenCache>)> {
        self.check_stage(stage)?;
        let inputs = self.patch_inputs(residual);
        if inputs.dims() != mask.dims() {
            return Err(Error::GridMismatch { expected_rows: inputs.rows(), expected_cols: inputs.cols(), got_rows: mask.rows(), got_cols: mask.cols() });
        }
        let mut set = GaussianSet::new();
        let mut caches = Vec::new();
        for (r, c, &on) in mask.iter_indexed() {
            if !on {
                continue;
            }
            let input = inputs.get(r, c).clone();
            let raw = self.raw_outputs(stage, &input);
            set.push(self.decode(&raw, r, c), stage as u16);
            caches.push(TokenCache { row: r, col: c, input, raw });
        }
        Ok((set, caches))
    }

    /// `∂L/∂raw` for one token from `∂L/∂(primitive)` laid out as
    /// `[mu_x, mu_y, log_s1, log_s2, theta, r, g, b]`.
    pub fn raw_grad(&self, cache: &TokenCache, d_gauss: &[f64; 8]) -> [f64; TINY_OUTPUTS] {
        let p = self.patch as f64;
        let raw = &cache.raw;
        let mut d_raw = [0.0; TINY_OUTPUTS];
        for k in 0..2 {
            let s = sigmoid(raw[k]);
            d_raw[k] = d_gauss[k] * p * s * (1.0 - s);
        }
        d_raw[2] = d_gauss[2];
        d_raw[3] = d_gauss[3];
        let r2 = (raw[4] * raw[4] + raw[5] * raw[5]).max(1e-24);
        d_raw[4] = d_gauss[4] * (-0.5 * raw[5] / r2);
        d_raw[5] = d_gauss[4] * (0.5 * raw[4] / r2);
        d_raw[6..9].copy_from_slice(&d_gauss[5..8]);
        d_raw
    }

    /// Accumulates `∂L/∂W` of `stage` for one token.
    pub fn backprop_token(&self, cache: &TokenCache, d_gauss: &[f64; 8], grad: &mut [f64]) {
        let d_raw = self.raw_grad(cache, d_gauss);
        let n_in = cache.input.len();
        let stride = n_in + 1;
        for (o, &d) in d_raw.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut grad[o * stride..(o + 1) * stride];
            for (g, x) in row[..n_in].iter_mut().zip(&cache.input) {
                *g += d * x;
            }
            row[n_in] += d;
        }
    }

    /// Adds `∂L/∂residual` for one token of `stage` into `d_residual`,
    /// dropping the zero-padded positions.
    pub fn backprop_input(&self, stage: usize, cache: &TokenCache, d_gauss: &[f64; 8], d_residual: &mut ImageBuffer) {
        let d_raw = self.raw_grad(cache, d_gauss);
        let w = &self.weights[stage - 1];
        let n_in = cache.input.len();
        let stride = n_in + 1;
        let p = self.patch;
        let (width, height) = (d_residual.width(), d_residual.height());
        for dy in 0..p {
            for dx in 0..p {
                let (y, x) = (cache.row * p + dy, cache.col * p + dx);
                if y >= height || x >= width {
                    continue;
                }
                let mut px = d_residual.get(y, x);
                for (k, v) in px.iter_mut().enumerate() {
                    let j = (dy * p + dx) * CHANNELS + k;
                    *v += d_raw.iter().enumerate().map(|(o, d)| d * w[o * stride + j]).sum::<f64>();
                }
                d_residual.set(y, x, px);
            }
        }
    }

    /// Flat little-endian weight file with a versioned header.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        w.write_all(&(self.patch as u16).to_le_bytes())?;
        w.write_all(&(self.n_stages as u16).to_le_bytes())?;
        w.write_all(&(TINY_OUTPUTS as u16).to_le_bytes())?;
        w.write_all(&(self.n_inputs() as u32).to_le_bytes())?;
        for stage in &self.weights {
            for v in stage {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Format(FormatError::Malformed(e.to_string())))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 2 + 2 + 2 + 2 + 4;
        if bytes.len() < HEADER {
            return Err(FormatError::Truncated { needed: HEADER, available: bytes.len() }.into());
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != WEIGHTS_MAGIC {
            return Err(FormatError::BadMagic { expected: WEIGHTS_MAGIC, found: magic }.into());
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(4);
        if version != WEIGHTS_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let patch = u16_at(6) as usize;
        let n_stages = u16_at(8) as usize;
        let outputs = u16_at(10) as usize;
        let n_in = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        if outputs != TINY_OUTPUTS || n_in != Self::inputs_for(patch) || patch < 2 || n_stages < 1 {
            return Err(FormatError::Malformed(format!("inconsistent weight header: patch {patch}, stages {n_stages}, outputs {outputs}, inputs {n_in}")).into());
        }
        let per_stage = TINY_OUTPUTS * (n_in + 1);
        let needed = HEADER + 8 * per_stage * n_stages;
        if bytes.len() < needed {
            return Err(FormatError::Truncated { needed, available: bytes.len() }.into());
        }
        if bytes.len() > needed {
            return Err(FormatError::Malformed(format!("{} trailing bytes after weights", bytes.len() - needed)).into());
        }
        let mut weights = Vec::with_capacity(n_stages);
        let mut off = HEADER;
        for _ in 0..n_stages {
            let mut stage = Vec::with_capacity(per_stage);
            for _ in 0..per_stage {
                stage.push(f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes")));
                off += 8;
            }
            weights.push(stage);
        }
        Ok(Self { patch, n_stages, weights })
    }
}

impl Predictor for TinyLinear {
    fn candidates(&self, stage: usize, residual: &ImageBuffer, patch: usize) -> Result<Grid<Gaussian2D>> {
        self.check_stage(stage)?;
        if patch != self.patch {
            return Err(Error::InvalidParameter(format!("model trained for patch {}, asked for {patch}", self.patch)));
        }
        let inputs = self.patch_inputs(residual);
        Ok(Grid::from_fn(inputs.rows(), inputs.cols(), |r, c| self.decode(&self.raw_outputs(stage, inputs.get(r, c)), r, c)))
    }
}
