//! Multi-stage finetuning against the ground truth, optionally
//! quantization-aware.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{merge_sets, GaussianSet};
use crate::image::ImageBuffer;
use crate::metrics::{loss_render, loss_render_with_grad, psnr, quality_maps};
use crate::optim::RenderConfigSer;
use crate::quant::{derive_ranges, loss_q, loss_q_with_grad, QuantSpec, RangeStrategy, DEFAULT_GAMMA};
use crate::render::{render, render_backward, GaussianGrads, RenderConfig};
use crate::rng::SeedStream;

use super::control::{compute_stage_mask_for, StageControlConfig};
use super::pod::WeightAdam;
use super::predictor::{TinyLinear, TokenCache};

/// Quantization-aware term `L_q` added to the finetune objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantAware {
    pub strategy: RangeStrategy,
    pub base: QuantSpec,
    pub gamma: f64,
    pub weight: f64,
}

impl Default for QuantAware {
    fn default() -> Self {
        Self { strategy: RangeStrategy::Adaptive, base: QuantSpec::default_global_base(), gamma: DEFAULT_GAMMA, weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    /// `λ_i`; empty means uniform 1.
    pub stage_weights: Vec<f64>,
    pub seed: u64,
    pub render: RenderConfigSer,
    pub quant: Option<QuantAware>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 2e-4, stage_weights: Vec::new(), seed: 0, render: RenderConfigSer::default(), quant: None }
    }
}

impl FinetuneConfig {
    pub fn stage_weight(&self, stage: usize) -> f64 {
        self.stage_weights.get(stage - 1).copied().unwrap_or(1.0)
    }
}

/// Forward state of all stages on one image.
pub struct StageRun {
    pub increments: Vec<GaussianSet>,
    pub caches: Vec<Vec<TokenCache>>,
    /// Prefix renders `I_1..I_S`.
    pub prefixes: Vec<ImageBuffer>,
}

/// Runs every stage of `model` on `target`. Stages beyond `enabled` get an
/// all-false mask.
pub fn run_stages(model: &TinyLinear, target: &ImageBuffer, control: &StageControlConfig, rcfg: &RenderConfig, enabled: usize) -> Result<StageRun> {
    let (w, h) = (target.width(), target.height());
    let mut accumulated = ImageBuffer::zeros(w, h);
    let mut residual = target.clone();
    let mut run = StageRun { increments: Vec::new(), caches: Vec::new(), prefixes: Vec::new() };
    for stage in 1..=control.n_stages {
        let maps = quality_maps(target, &accumulated, control.patch_size)?;
        let mut mask = compute_stage_mask_for(&maps, control, w, h)?;
        if stage > enabled {
            mask = crate::image::Grid::filled(mask.rows(), mask.cols(), false);
        }
        let (delta, caches) = model.forward_masked(stage, &residual, &mask)?;
        if !delta.is_empty() {
            accumulated.add_assign(&render(&delta, w, h, rcfg))?;
            residual = target.sub(&accumulated)?;
        }
        run.increments.push(delta);
        run.caches.push(caches);
        run.prefixes.push(accumulated.clone());
    }
    Ok(run)
}

fn flatten(g: &GaussianGrads, i: usize) -> [f64; 8] {
    let (m, s, c) = (g.d_mu[i], g.d_log_scale[i], g.d_color[i]);
    [m[0], m[1], s[0], s[1], g.d_theta[i], c[0], c[1], c[2]]
}

/// Per-image finetune objective and its per-stage weight gradients.
pub struct FinetunePass {
    pub total: f64,
    /// `(stage, prefix render loss, prefix psnr)`.
    pub prefix: Vec<(usize, f64, f64)>,
    pub quant_loss: Option<f64>,
    pub grads: Vec<Vec<f64>>,
}

/// `L_ft = Σ_i λ_i · L_render(I_i, I_gt)` (plus `L_q` when configured) and
/// its exact gradient. Stage `j` is reached through every prefix `I_i`,
/// `i ≥ j`, both directly and through the residual inputs of later stages.
/// Masks are treated as constants.
pub fn finetune_pass(model: &TinyLinear, target: &ImageBuffer, control: &StageControlConfig, cfg: &FinetuneConfig, enabled: usize) -> Result<FinetunePass> {
    let rcfg: RenderConfig = cfg.render.into();
    let (w, h) = (target.width(), target.height());
    let run = run_stages(model, target, control, &rcfg, enabled)?;
    let s = control.n_stages;
    let mut total = 0.0;
    let mut prefix = Vec::with_capacity(s);
    let mut direct = Vec::with_capacity(s);
    for (i, img) in run.prefixes.iter().enumerate() {
        let (loss, g) = loss_render_with_grad(img, target)?;
        let lambda = cfg.stage_weight(i + 1);
        total += lambda * loss.total;
        prefix.push((i + 1, loss.total, psnr(img, target)?));
        direct.push(g.scale(lambda));
    }
    // Gradients w.r.t. each stage's primitives from the quantized term.
    let mut quant_loss = None;
    let mut quant_grads: Vec<Vec<[f64; 8]>> = run.increments.iter().map(|d| vec![[0.0; 8]; d.len()]).collect();
    if let Some(qa) = &cfg.quant {
        let full = run.increments.iter().fold(GaussianSet::new(), |acc, d| merge_sets(&acc, d));
        if !full.is_empty() {
            let spec = derive_ranges(&full, w, h, qa.strategy, &qa.base)?;
            let (lq, g) = loss_q_with_grad(&full, &spec, target, qa.gamma, &rcfg)?;
            total += qa.weight * lq.total;
            quant_loss = Some(lq.total);
            let mut offset = 0;
            for (j, qg) in quant_grads.iter_mut().enumerate() {
                for (t, v) in qg.iter_mut().enumerate() {
                    *v = flatten(&g, offset + t).map(|x| x * qa.weight);
                }
                offset += run.increments[j].len();
            }
        }
    }
    let mut grads = vec![vec![0.0; model.params_per_stage()]; s];
    // ∂L/∂I_j accumulated from the last stage backwards.
    let mut d_prefix = ImageBuffer::zeros(w, h);
    for j in (0..s).rev() {
        d_prefix.add_assign(&direct[j])?;
        let delta = &run.increments[j];
        let mut d_residual = ImageBuffer::zeros(w, h);
        if !delta.is_empty() {
            let g = render_backward(delta, &d_prefix, &rcfg);
            for (t, cache) in run.caches[j].iter().enumerate() {
                let mut d = flatten(&g, t);
                for (a, b) in d.iter_mut().zip(&quant_grads[j][t]) {
                    *a += b;
                }
                model.backprop_token(cache, &d, &mut grads[j]);
                model.backprop_input(j + 1, cache, &d, &mut d_residual);
            }
        }
        // E_{j−1} = I_gt − I_{j−1} feeds stage j.
        d_prefix = d_prefix.sub(&d_residual)?;
    }
    Ok(FinetunePass { total, prefix, quant_loss, grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinetuneLogRecord {
    pub step: usize,
    pub image: usize,
    pub stage: usize,
    pub prefix_loss: f64,
    pub prefix_psnr: f64,
}

impl FinetuneLogRecord {
    pub const CSV_HEADER: &'static str = "step,image,stage,prefix_loss,prefix_psnr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.image, self.stage, self.prefix_loss, self.prefix_psnr)
    }
}

/// Resumable finetune loop.
#[derive(Debug, Clone)]
pub struct FinetuneTrainer {
    pub model: TinyLinear,
    pub cfg: FinetuneConfig,
    pub control: StageControlConfig,
    pub adam: WeightAdam,
    pub step: usize,
    pub log: Vec<FinetuneLogRecord>,
}

impl FinetuneTrainer {
    pub fn new(model: TinyLinear, cfg: FinetuneConfig, control: StageControlConfig) -> Result<Self> {
        control.validate()?;
        if model.n_stages() != control.n_stages || model.patch() != control.patch_size {
            return Err(Error::InvalidParameter("model layout does not match the stage control config".into()));
        }
        if !(cfg.lr > 0.0) || cfg.stage_weights.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidParameter("learning rate and stage weights must be > 0".into()));
        }
        let adam = WeightAdam::new(control.n_stages, model.params_per_stage());
        Ok(Self { model, cfg, control, adam, step: 0, log: Vec::new() })
    }

    pub fn image_for_step(&self, step: usize, corpus_len: usize) -> usize {
        SeedStream::new(self.cfg.seed).rng("finetune-image", step as u64).random_range(0..corpus_len)
    }

    pub fn train_step(&mut self, corpus: &[ImageBuffer]) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let idx = self.image_for_step(self.step, corpus.len());
        let pass = finetune_pass(&self.model, &corpus[idx], &self.control, &self.cfg, self.control.n_stages)?;
        for &(stage, loss, p) in &pass.prefix {
            self.log.push(FinetuneLogRecord { step: self.step, image: idx, stage, prefix_loss: loss, prefix_psnr: p });
        }
        for (s, g) in pass.grads.iter().enumerate() {
            if g.iter().any(|v| *v != 0.0) {
                self.adam.step(s + 1, self.model.stage_weights_mut(s + 1), g, self.cfg.lr);
            }
        }
        self.step += 1;
        Ok(())
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

pub fn finetune_train(model: TinyLinear, corpus: &[ImageBuffer], cfg: &FinetuneConfig, control: &StageControlConfig) -> Result<FinetuneTrainer> {
    let mut t = FinetuneTrainer::new(model, cfg.clone(), *control)?;
    t.run_until(corpus, cfg.steps)?;
    Ok(t)
}

/// Mean over the corpus of each stage's prefix render loss.
pub fn prefix_losses(model: &TinyLinear, corpus: &[ImageBuffer], control: &StageControlConfig, rcfg: &RenderConfig) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut out = vec![0.0; control.n_stages];
    for img in corpus {
        let run = run_stages(model, img, control, rcfg, control.n_stages)?;
        for (o, p) in out.iter_mut().zip(&run.prefixes) {
            *o += loss_render(p, img)?.total / corpus.len() as f64;
        }
    }
    Ok(out)
}

/// Mean over the corpus of the render loss of the quantized final set.
pub fn quantized_loss(model: &TinyLinear, corpus: &[ImageBuffer], control: &StageControlConfig, rcfg: &RenderConfig, qa: &QuantAware) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for img in corpus {
        let run = run_stages(model, img, control, rcfg, control.n_stages)?;
        let full = run.increments.iter().fold(GaussianSet::new(), |acc, d| merge_sets(&acc, d));
        if full.is_empty() {
            total += loss_render(&ImageBuffer::zeros(img.width(), img.height()), img)?.total;
            continue;
        }
        let spec = derive_ranges(&full, img.width(), img.height(), qa.strategy, &qa.base)?;
        total += loss_q(&full, &spec, img, 0.0, rcfg)?.total;
    }
    Ok(total / corpus.len() as f64)
}
