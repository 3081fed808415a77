//! Adam over Gaussian parameter arrays, short-horizon increment refinement
//! and from-scratch fitting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{canonicalize_theta, Gaussian2D, GaussianSet};
use crate::image::ImageBuffer;
use crate::metrics::{l1_with_grad, loss_render, loss_render_with_grad, psnr, ssim_with_grad, LossBreakdown, L1_WEIGHT, SSIM_WEIGHT};
use crate::render::{render, render_backward, GaussianGrads, RenderConfig};
use crate::rng::SeedStream;

/// Per-attribute learning rates. `mu` is expressed in canvas-normalized
/// units: a step of `lr_mu` moves a center by `lr_mu · (W, H)` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub mu: f64,
    pub log_scale: f64,
    pub theta: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { mu: 5e-3, log_scale: 5e-3, theta: 5e-3, color: 1e-2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    #[default]
    Adam,
    /// Plain gradient descent with the same per-attribute rates.
    Sgd,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Number of scalar parameters per primitive.
pub const PARAMS_PER_GAUSSIAN: usize = 8;

/// Optimizer state owned together with one [`GaussianSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: LearningRates,
    pub rule: UpdateRule,
    /// Canvas size used to normalize center updates.
    pub canvas: [f64; 2],
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, lr: LearningRates, canvas: [f64; 2]) -> Self {
        Self::with_rule(n, lr, canvas, UpdateRule::Adam)
    }

    pub fn with_rule(n: usize, lr: LearningRates, canvas: [f64; 2], rule: UpdateRule) -> Self {
        Self { step: 0, lr, rule, canvas, m: vec![0.0; n * PARAMS_PER_GAUSSIAN], v: vec![0.0; n * PARAMS_PER_GAUSSIAN] }
    }

    pub fn len(&self) -> usize {
        self.m.len() / PARAMS_PER_GAUSSIAN
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Flattened parameter/gradient layout: mu(2), log_scale(2), theta, color(3).
fn param_views(g: &GaussianGrads, i: usize) -> [f64; PARAMS_PER_GAUSSIAN] {
    [
        g.d_mu[i][0],
        g.d_mu[i][1],
        g.d_log_scale[i][0],
        g.d_log_scale[i][1],
        g.d_theta[i],
        g.d_color[i][0],
        g.d_color[i][1],
        g.d_color[i][2],
    ]
}

/// One bias-corrected Adam (or plain GD) update; θ is re-canonicalized.
pub fn adam_step(set: &mut GaussianSet, grads: &GaussianGrads, state: &mut AdamState) -> Result<()> {
    if grads.len() != set.len() || state.len() != set.len() {
        return Err(Error::ShapeMismatch(format!(
            "set has {} primitives, grads {}, optimizer state {}",
            set.len(),
            grads.len(),
            state.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    let lr = state.lr;
    let rates = [lr.mu, lr.mu, lr.log_scale, lr.log_scale, lr.theta, lr.color, lr.color, lr.color];
    // d/d(normalized mu) = d/d(mu_px) · canvas
    let grad_scale = [state.canvas[0], state.canvas[1], 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
    let step_scale = grad_scale;
    for i in 0..set.len() {
        let g = param_views(grads, i);
        let mut delta = [0.0; PARAMS_PER_GAUSSIAN];
        for k in 0..PARAMS_PER_GAUSSIAN {
            let gk = g[k] * grad_scale[k];
            delta[k] = match state.rule {
                UpdateRule::Adam => {
                    let j = i * PARAMS_PER_GAUSSIAN + k;
                    state.m[j] = BETA1 * state.m[j] + (1.0 - BETA1) * gk;
                    state.v[j] = BETA2 * state.v[j] + (1.0 - BETA2) * gk * gk;
                    let mh = state.m[j] / bc1;
                    let vh = state.v[j] / bc2;
                    -rates[k] * mh / (vh.sqrt() + ADAM_EPS)
                }
                UpdateRule::Sgd => -rates[k] * gk,
            } * step_scale[k];
        }
        set.mu[i][0] += delta[0];
        set.mu[i][1] += delta[1];
        set.log_scale[i][0] += delta[2];
        set.log_scale[i][1] += delta[3];
        set.theta[i] = canonicalize_theta(set.theta[i] + delta[4]);
        for k in 0..3 {
            set.color[i][k] += delta[5 + k];
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub lr: LearningRates,
    pub rule: UpdateRule,
    pub render: RenderConfigSer,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { lr: LearningRates::default(), rule: UpdateRule::Adam, render: RenderConfigSer::default() }
    }
}

/// Serializable mirror of [`RenderConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfigSer {
    pub cutoff_sigmas: f64,
    pub tile_size: usize,
}

impl Default for RenderConfigSer {
    fn default() -> Self {
        let r = RenderConfig::default();
        Self { cutoff_sigmas: r.cutoff_sigmas, tile_size: r.tile_size }
    }
}

impl From<RenderConfigSer> for RenderConfig {
    fn from(r: RenderConfigSer) -> Self {
        RenderConfig { cutoff_sigmas: r.cutoff_sigmas, tile_size: r.tile_size }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_taken: usize,
}

/// Residual refinement loss for a candidate increment: L1 of the increment
/// render against the residual, SSIM of the accumulated render against the
/// target. Returns the loss and the image-space gradient w.r.t. the increment
/// render.
pub fn increment_loss(
    inc_render: &ImageBuffer,
    residual_target: &ImageBuffer,
    accumulated_prev: &ImageBuffer,
    target: &ImageBuffer,
) -> Result<(LossBreakdown, ImageBuffer)> {
    let (l1, g1) = l1_with_grad(inc_render, residual_target)?;
    let accumulated = accumulated_prev.add(inc_render)?;
    let (s, gs) = ssim_with_grad(&accumulated, target)?;
    let grad = g1.zip_with(&gs, |a, b| L1_WEIGHT * a - SSIM_WEIGHT * b)?;
    Ok((LossBreakdown::new(l1, 1.0 - s), grad))
}

/// Refines a copy of `delta` for `k` steps with previous-stage content held
/// fixed. The result is index-aligned with `delta`.
pub fn refine_increment(
    delta: &GaussianSet,
    residual_target: &ImageBuffer,
    accumulated_prev: &ImageBuffer,
    target: &ImageBuffer,
    k: usize,
    cfg: &RefineConfig,
) -> Result<(GaussianSet, RefineReport)> {
    if k < 1 {
        return Err(Error::InvalidSteps);
    }
    residual_target.check_dims(target)?;
    accumulated_prev.check_dims(target)?;
    let (w, h) = (target.width(), target.height());
    let rcfg: RenderConfig = cfg.render.into();
    let mut copy = delta.clone();
    let mut state = AdamState::with_rule(copy.len(), cfg.lr, [w as f64, h as f64], cfg.rule);
    let mut initial = f64::NAN;
    for step in 0..k {
        let img = render(&copy, w, h, &rcfg);
        let (loss, d_img) = increment_loss(&img, residual_target, accumulated_prev, target)?;
        if step == 0 {
            initial = loss.total;
        }
        let grads = render_backward(&copy, &d_img, &rcfg);
        adam_step(&mut copy, &grads, &mut state)?;
    }
    let img = render(&copy, w, h, &rcfg);
    let (last, _) = increment_loss(&img, residual_target, accumulated_prev, target)?;
    Ok((copy, RefineReport { initial_loss: initial, final_loss: last.total, steps_taken: k }))
}

/// One row of a loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l1: f64,
    pub ssim_term: f64,
    pub total: f64,
    pub psnr: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iteration,l1,ssim_term,total,psnr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.iteration, self.l1, self.ssim_term, self.total, self.psnr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub lr: LearningRates,
    pub render: RenderConfig,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { lr: LearningRates::default(), render: RenderConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub set: GaussianSet,
    /// Loss before each update; the last entry is the fitted set.
    pub curve: Vec<LossRecord>,
}

/// Random initialization for from-scratch fitting: uniform centers,
/// isotropic σ with `n · 2πσ² = W·H` so the kernels tile the canvas about
/// once, and colors sampled bilinearly from the target.
pub fn init_random(target: &ImageBuffer, n: usize, seed: u64) -> GaussianSet {
    let (w, h) = (target.width() as f64, target.height() as f64);
    let sigma = (w * h / (2.0 * std::f64::consts::PI * n as f64)).sqrt();
    let mut rng = SeedStream::new(seed).rng("fit-init", 0);
    let mut set = GaussianSet::with_capacity(n);
    for _ in 0..n {
        let mu = [rng.random::<f64>() * w, rng.random::<f64>() * h];
        let color = target.sample_bilinear(mu[0], mu[1]);
        set.push(Gaussian2D { mu, log_scale: [sigma.ln(); 2], theta: 0.0, color }, 1);
    }
    set
}

/// Fits `n` Gaussians to `target` by minimizing the render loss with Adam.
pub fn fit_from_scratch(target: &ImageBuffer, n: usize, iterations: usize, cfg: &FitConfig) -> Result<FitResult> {
    if n < 1 {
        return Err(Error::InvalidParameter("fit needs at least one gaussian".into()));
    }
    let set = init_random(target, n, cfg.seed);
    fit_set(set, target, iterations, cfg)
}

/// Optimizes an existing set against `target`; used by from-scratch fitting
/// and self-fit checks.
pub fn fit_set(mut set: GaussianSet, target: &ImageBuffer, iterations: usize, cfg: &FitConfig) -> Result<FitResult> {
    let (w, h) = (target.width(), target.height());
    let mut state = AdamState::new(set.len(), cfg.lr, [w as f64, h as f64]);
    let mut curve = Vec::with_capacity(iterations + 1);
    for it in 0..iterations {
        let img = render(&set, w, h, &cfg.render);
        let (loss, d_img) = loss_render_with_grad(&img, target)?;
        curve.push(record(it, &loss, &img, target)?);
        let grads = render_backward(&set, &d_img, &cfg.render);
        adam_step(&mut set, &grads, &mut state)?;
    }
    let img = render(&set, w, h, &cfg.render);
    curve.push(record(iterations, &loss_render(&img, target)?, &img, target)?);
    Ok(FitResult { set, curve })
}

fn record(iteration: usize, loss: &LossBreakdown, img: &ImageBuffer, target: &ImageBuffer) -> Result<LossRecord> {
    Ok(LossRecord { iteration, l1: loss.l1, ssim_term: loss.ssim_term, total: loss.total, psnr: psnr(img, target)? })
}
