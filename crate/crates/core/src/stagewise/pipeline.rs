use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{merge_sets, GaussianSet};
use crate::image::ImageBuffer;
use crate::metrics::{ms_ssim, psnr, quality_maps, QualityMaps};
use crate::optim::{refine_increment, RefineConfig};
use crate::render::{render, RenderConfig};

use super::control::{compute_stage_mask_for, StageControlConfig, StageMask};
use super::predictor::{predict_increment, Predictor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub control: StageControlConfig,
    /// Per-stage refinement steps applied to each increment; 0 disables it.
    pub refine_steps: usize,
    pub refine: RefineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { control: StageControlConfig::default(), refine_steps: 0, refine: RefineConfig::default() }
    }
}

/// Per-stage summary of a pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: usize,
    pub activated: usize,
    pub total: usize,
    pub psnr: f64,
    pub ms_ssim: f64,
}

/// `G_i`, `I_i = R(G_i)`, `E_i = I_gt − I_i` and the history that produced them.
#[derive(Debug, Clone)]
pub struct StagePipelineState {
    pub target: ImageBuffer,
    pub accumulated: GaussianSet,
    pub render: ImageBuffer,
    pub residual: ImageBuffer,
    pub increments: Vec<GaussianSet>,
    pub quality: Vec<QualityMaps>,
    pub masks: Vec<StageMask>,
    /// Number of completed stages.
    pub stage: usize,
}

impl StagePipelineState {
    /// Stage 0: empty set, black render, residual equal to the target.
    pub fn new(target: ImageBuffer) -> Self {
        let (w, h) = (target.width(), target.height());
        Self {
            residual: target.clone(),
            render: ImageBuffer::zeros(w, h),
            target,
            accumulated: GaussianSet::new(),
            increments: Vec::new(),
            quality: Vec::new(),
            masks: Vec::new(),
            stage: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.target.width()
    }

    pub fn height(&self) -> usize {
        self.target.height()
    }

    /// Activated primitives over candidate capacity.
    pub fn utilization(&self, control: &StageControlConfig) -> f64 {
        self.accumulated.len() as f64 / control.capacity(self.width(), self.height()) as f64
    }

    /// Runs one stage: quality maps on `I_{i−1}`, mask, gated prediction,
    /// optional refinement, then the union and incremental render update.
    pub fn run_stage(&mut self, model: &dyn Predictor, cfg: &PipelineConfig) -> Result<StageRecord> {
        cfg.control.validate()?;
        let stage = self.stage + 1;
        if stage > cfg.control.n_stages {
            return Err(Error::StageBudgetExceeded { stage, budget: cfg.control.n_stages });
        }
        let (w, h) = (self.width(), self.height());
        let p = cfg.control.patch_size;
        if p > w.min(h) {
            return Err(Error::InvalidParameter(format!("patch size {p} exceeds image side {}", w.min(h))));
        }
        let rcfg: RenderConfig = cfg.refine.render.into();
        let maps = quality_maps(&self.target, &self.render, p)?;
        let mask = compute_stage_mask_for(&maps, &cfg.control, w, h)?;
        let mut delta = predict_increment(model, &self.residual, &mask, p, stage)?;
        if cfg.refine_steps > 0 && !delta.is_empty() {
            delta = refine_increment(&delta, &self.residual, &self.render, &self.target, cfg.refine_steps, &cfg.refine)?.0;
        }
        if !delta.is_empty() {
            self.render.add_assign(&render(&delta, w, h, &rcfg))?;
            self.residual = self.target.sub(&self.render)?;
            self.accumulated = merge_sets(&self.accumulated, &delta);
        }
        let activated = delta.len();
        self.increments.push(delta);
        self.quality.push(maps);
        self.masks.push(mask);
        self.stage = stage;
        Ok(StageRecord {
            stage,
            activated,
            total: self.accumulated.len(),
            psnr: psnr(&self.render, &self.target)?,
            ms_ssim: ms_ssim(&self.render, &self.target)?,
        })
    }
}

/// Runs all configured stages on `target`.
pub fn run_pipeline(target: &ImageBuffer, model: &dyn Predictor, cfg: &PipelineConfig) -> Result<(StagePipelineState, Vec<StageRecord>)> {
    let mut state = StagePipelineState::new(target.clone());
    let mut records = Vec::with_capacity(cfg.control.n_stages);
    for _ in 0..cfg.control.n_stages {
        records.push(state.run_stage(model, cfg)?);
    }
    Ok((state, records))
}
