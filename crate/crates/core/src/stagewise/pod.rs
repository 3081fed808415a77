//! Predict–Optimize–Distill training of [`TinyLinear`].

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::image::ImageBuffer;
use crate::metrics::quality_maps;
use crate::optim::{increment_loss, refine_increment, RefineConfig, UpdateRule, ADAM_EPS, BETA1, BETA2};
use crate::render::{render, render_backward, RenderConfig};
use crate::rng::SeedStream;

use super::control::{compute_stage_mask_for, StageControlConfig};
use super::predictor::{TinyLinear, TokenCache};

/// Per-attribute weights of the Gaussian-space regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub mu: f64,
    pub log_scale: f64,
    pub theta: f64,
    pub color: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self { mu: 1.0, log_scale: 1.0, theta: 0.5, color: 1.0 }
    }
}

/// Signed difference `a − b` wrapped to `(−π/2, π/2]`.
pub fn theta_delta(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    if d > PI / 2.0 {
        d - PI
    } else {
        d
    }
}

/// Period-π angular distance `min(|δ|, π − |δ|)`.
pub fn theta_distance(a: f64, b: f64) -> f64 {
    theta_delta(a, b).abs()
}

/// `Σ_n [w_μ‖Δμ‖² + w_s‖Δlog s‖² + w_θ d_θ² + w_c‖Δc‖²]` over index-aligned
/// primitives, with its gradient w.r.t. `pred` in layout
/// `[mu_x, mu_y, log_s1, log_s2, theta, r, g, b]`.
pub fn distill_loss_grad(pred: &GaussianSet, target: &GaussianSet, w: &DistillWeights) -> Result<(f64, Vec<[f64; 8]>)> {
    if pred.len() != target.len() {
        return Err(Error::Correspondence { predicted: pred.len(), target: target.len() });
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for i in 0..pred.len() {
        let mut g = [0.0; 8];
        for k in 0..2 {
            let d = pred.mu[i][k] - target.mu[i][k];
            loss += w.mu * d * d;
            g[k] = 2.0 * w.mu * d;
            let d = pred.log_scale[i][k] - target.log_scale[i][k];
            loss += w.log_scale * d * d;
            g[2 + k] = 2.0 * w.log_scale * d;
        }
        let d = theta_delta(pred.theta[i], target.theta[i]);
        loss += w.theta * d * d;
        g[4] = 2.0 * w.theta * d;
        for k in 0..3 {
            let d = pred.color[i][k] - target.color[i][k];
            loss += w.color * d * d;
            g[5 + k] = 2.0 * w.color * d;
        }
        grad.push(g);
    }
    Ok((loss, grad))
}

pub fn distill_loss(pred: &GaussianSet, target: &GaussianSet, w: &DistillWeights) -> Result<f64> {
    Ok(distill_loss_grad(pred, target, w)?.0)
}

/// Supervision signal for the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Regress onto a refined copy of the prediction.
    Pod,
    /// Backpropagate the residual render loss through the renderer.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PodConfig {
    pub steps: usize,
    /// Refinement steps `K`; 0 makes the target equal the prediction.
    pub refine_steps: usize,
    pub distill_weight: f64,
    /// `λ_i`; empty means uniform 1.
    pub stage_weights: Vec<f64>,
    /// Step at which each stage activates; empty means all at step 0.
    pub milestones: Vec<usize>,
    pub distill: DistillWeights,
    pub lr: f64,
    /// Refinement of the detached copy; plain gradient steps by default.
    pub refine: RefineConfig,
    pub seed: u64,
    pub eval_interval: usize,
    pub supervision: Supervision,
}

impl Default for PodConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            refine_steps: 10,
            distill_weight: 100.0,
            stage_weights: Vec::new(),
            milestones: Vec::new(),
            distill: DistillWeights::default(),
            lr: 5e-4,
            refine: RefineConfig { rule: UpdateRule::Sgd, ..RefineConfig::default() },
            seed: 0,
            eval_interval: 100,
            supervision: Supervision::Pod,
        }
    }
}

impl PodConfig {
    pub fn stage_weight(&self, stage: usize) -> f64 {
        self.stage_weights.get(stage - 1).copied().unwrap_or(1.0)
    }

    pub fn milestone(&self, stage: usize) -> usize {
        self.milestones.get(stage - 1).copied().unwrap_or(0)
    }

    pub fn validate(&self, n_stages: usize) -> Result<()> {
        if self.stage_weights.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidParameter("stage weights must be > 0".into()));
        }
        if !self.stage_weights.is_empty() && self.stage_weights.len() != n_stages {
            return Err(Error::InvalidParameter(format!("{} stage weights for {n_stages} stages", self.stage_weights.len())));
        }
        if !self.milestones.is_empty() && (self.milestones.len() != n_stages || self.milestones[0] != 0 || self.milestones.windows(2).any(|w| w[0] > w[1])) {
            return Err(Error::InvalidParameter("milestones must list one non-decreasing step per stage, starting at 0".into()));
        }
        if !(self.lr > 0.0) || !(self.distill_weight > 0.0) {
            return Err(Error::InvalidParameter("learning rate and distill weight must be > 0".into()));
        }
        Ok(())
    }
}

/// One training step's loss for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PodLogRecord {
    pub step: usize,
    pub stage: usize,
    pub image: usize,
    pub primitives: usize,
    /// Unweighted Gaussian-space loss, or the residual render loss in direct mode.
    pub loss: f64,
    /// `distill_weight · λ_i · loss` (direct mode: `λ_i · loss`).
    pub weighted: f64,
}

impl PodLogRecord {
    pub const CSV_HEADER: &'static str = "step,stage,image,primitives,loss,weighted";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.stage, self.image, self.primitives, self.loss, self.weighted)
    }
}

/// Corpus-wide evaluation over all stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean over images of `Σ_i λ_i · L_gaussian^(i)` (POD) or of the
    /// residual render losses (direct).
    pub loss: f64,
}

/// Adam over flat per-stage weight vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightAdam {
    pub t: Vec<u64>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl WeightAdam {
    pub fn new(n_stages: usize, per_stage: usize) -> Self {
        Self { t: vec![0; n_stages], m: vec![vec![0.0; per_stage]; n_stages], v: vec![vec![0.0; per_stage]; n_stages] }
    }

    pub fn step(&mut self, stage: usize, weights: &mut [f64], grad: &[f64], lr: f64) {
        let s = stage - 1;
        self.t[s] += 1;
        let t = self.t[s] as i32;
        let (b1, b2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for j in 0..weights.len() {
            let g = grad[j];
            self.m[s][j] = BETA1 * self.m[s][j] + (1.0 - BETA1) * g;
            self.v[s][j] = BETA2 * self.v[s][j] + (1.0 - BETA2) * g * g;
            weights[j] -= lr * (self.m[s][j] / b1) / ((self.v[s][j] / b2).sqrt() + ADAM_EPS);
        }
    }

    pub fn copy_stage(&mut self, from: usize, to: usize) {
        self.t[to - 1] = self.t[from - 1];
        self.m[to - 1] = self.m[from - 1].clone();
        self.v[to - 1] = self.v[from - 1].clone();
    }
}

/// Losses and weight gradients for one image across `stages` stages.
pub struct ImagePass {
    pub losses: Vec<(usize, usize, f64)>,
    pub grads: Vec<Vec<f64>>,
}

/// Runs stages `1..=stages` on `target` and accumulates per-stage gradients
/// of the chosen supervision loss. Later stages see the residual left by the
/// predicted (not refined) increments.
pub fn image_pass(model: &TinyLinear, target: &ImageBuffer, stages: usize, cfg: &PodConfig, control: &StageControlConfig, want_grad: bool) -> Result<ImagePass> {
    let (w, h) = (target.width(), target.height());
    let rcfg: RenderConfig = cfg.refine.render.into();
    let mut accumulated = ImageBuffer::zeros(w, h);
    let mut residual = target.clone();
    let mut losses = Vec::with_capacity(stages);
    let mut grads = vec![Vec::new(); stages];
    for stage in 1..=stages {
        let maps = quality_maps(target, &accumulated, control.patch_size)?;
        let mask = compute_stage_mask_for(&maps, control, w, h)?;
        let (pred, caches) = model.forward_masked(stage, &residual, &mask)?;
        if want_grad {
            grads[stage - 1] = vec![0.0; model.params_per_stage()];
        }
        if pred.is_empty() {
            losses.push((stage, 0, 0.0));
            continue;
        }
        let pred_img = render(&pred, w, h, &rcfg);
        let (loss, d_gauss) = match cfg.supervision {
            Supervision::Pod => {
                let refined = if cfg.refine_steps > 0 {
                    refine_increment(&pred, &residual, &accumulated, target, cfg.refine_steps, &cfg.refine)?.0
                } else {
                    pred.clone()
                };
                let (l, g) = distill_loss_grad(&pred, &refined, &cfg.distill)?;
                let k = cfg.distill_weight * cfg.stage_weight(stage);
                (l, g.into_iter().map(|v| v.map(|x| x * k)).collect::<Vec<_>>())
            }
            Supervision::Direct => {
                let (l, d_img) = increment_loss(&pred_img, &residual, &accumulated, target)?;
                let k = cfg.stage_weight(stage);
                let g = if want_grad { render_backward(&pred, &d_img, &rcfg) } else { crate::render::GaussianGrads::zeros(pred.len()) };
                let flat = (0..pred.len())
                    .map(|i| {
                        let (m, s, c) = (g.d_mu[i], g.d_log_scale[i], g.d_color[i]);
                        [m[0], m[1], s[0], s[1], g.d_theta[i], c[0], c[1], c[2]].map(|x| x * k)
                    })
                    .collect();
                (l.total, flat)
            }
        };
        if want_grad {
            backprop_stage(model, &caches, &d_gauss, &mut grads[stage - 1]);
        }
        losses.push((stage, pred.len(), loss));
        accumulated.add_assign(&pred_img)?;
        residual = target.sub(&accumulated)?;
    }
    Ok(ImagePass { losses, grads })
}

fn backprop_stage(model: &TinyLinear, caches: &[TokenCache], d_gauss: &[[f64; 8]], grad: &mut [f64]) {
    for (cache, d) in caches.iter().zip(d_gauss) {
        model.backprop_token(cache, d, grad);
    }
}

/// Resumable POD / direct-supervision trainer.
#[derive(Debug, Clone)]
pub struct PodTrainer {
    pub model: TinyLinear,
    pub cfg: PodConfig,
    pub control: StageControlConfig,
    pub adam: WeightAdam,
    pub step: usize,
    pub active: usize,
    pub log: Vec<PodLogRecord>,
    pub eval: Vec<EvalRecord>,
}

impl PodTrainer {
    pub fn new(model: TinyLinear, cfg: PodConfig, control: StageControlConfig) -> Result<Self> {
        control.validate()?;
        cfg.validate(control.n_stages)?;
        if model.n_stages() != control.n_stages || model.patch() != control.patch_size {
            return Err(Error::InvalidParameter(format!(
                "model has {} stages at patch {}, control wants {} at {}",
                model.n_stages(),
                model.patch(),
                control.n_stages,
                control.patch_size
            )));
        }
        let adam = WeightAdam::new(control.n_stages, model.params_per_stage());
        Ok(Self { model, cfg, control, adam, step: 0, active: 0, log: Vec::new(), eval: Vec::new() })
    }

    /// Activates every stage whose milestone is due, copying weights and
    /// optimizer moments from the previous stage.
    pub fn activate_due(&mut self) {
        while self.active < self.control.n_stages && self.cfg.milestone(self.active + 1) <= self.step {
            let next = self.active + 1;
            if next > 1 {
                self.model.copy_stage(next - 1, next);
                self.adam.copy_stage(next - 1, next);
            }
            self.active = next;
        }
    }

    /// Index of the corpus image used at `step`.
    pub fn image_for_step(&self, step: usize, corpus_len: usize) -> usize {
        SeedStream::new(self.cfg.seed).rng("pod-image", step as u64).random_range(0..corpus_len)
    }

    /// Corpus-wide loss with all stages.
    pub fn evaluate(&self, corpus: &[ImageBuffer]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut total = 0.0;
        for img in corpus {
            let pass = image_pass(&self.model, img, self.control.n_stages, &self.cfg, &self.control, false)?;
            total += pass.losses.iter().map(|&(s, _, l)| self.cfg.stage_weight(s) * l).sum::<f64>();
        }
        Ok(total / corpus.len() as f64)
    }

    fn maybe_eval(&mut self, corpus: &[ImageBuffer]) -> Result<()> {
        let due = self.step == 10 || self.step == self.cfg.steps || (self.cfg.eval_interval > 0 && self.step % self.cfg.eval_interval == 0);
        if due && self.eval.last().is_none_or(|e| e.step != self.step) {
            let loss = self.evaluate(corpus)?;
            self.eval.push(EvalRecord { step: self.step, loss });
        }
        Ok(())
    }

    /// One optimizer step on one corpus image.
    pub fn train_step(&mut self, corpus: &[ImageBuffer]) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if self.step == 0 {
            self.maybe_eval(corpus)?;
        }
        self.activate_due();
        let idx = self.image_for_step(self.step, corpus.len());
        let pass = image_pass(&self.model, &corpus[idx], self.active, &self.cfg, &self.control, true)?;
        for &(stage, n, loss) in &pass.losses {
            let k = match self.cfg.supervision {
                Supervision::Pod => self.cfg.distill_weight * self.cfg.stage_weight(stage),
                Supervision::Direct => self.cfg.stage_weight(stage),
            };
            self.log.push(PodLogRecord { step: self.step, stage, image: idx, primitives: n, loss, weighted: k * loss });
        }
        for (s, g) in pass.grads.iter().enumerate() {
            if g.iter().any(|v| *v != 0.0) {
                self.adam.step(s + 1, self.model.stage_weights_mut(s + 1), g, self.cfg.lr);
            }
        }
        self.step += 1;
        self.maybe_eval(corpus)
    }

    /// Trains until `cfg.steps`.
    pub fn run(&mut self, corpus: &[ImageBuffer]) -> Result<()> {
        self.run_until(corpus, self.cfg.steps)
    }

    pub fn run_until(&mut self, corpus: &[ImageBuffer], until: usize) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        while self.step < until.min(self.cfg.steps) {
            self.train_step(corpus)?;
        }
        Ok(())
    }
}

/// Trains `model` for `cfg.steps` steps and returns the trainer with its logs.
pub fn pod_train(model: TinyLinear, corpus: &[ImageBuffer], cfg: &PodConfig, control: &StageControlConfig) -> Result<PodTrainer> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut t = PodTrainer::new(model, cfg.clone(), *control)?;
    t.run(corpus)?;
    Ok(t)
}
