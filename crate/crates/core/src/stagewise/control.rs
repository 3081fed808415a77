use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{patch_count, Grid};
use crate::metrics::QualityMaps;

/// Fidelity thresholds and patch layout for Stage Control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageControlConfig {
    pub tau_psnr: f64,
    pub tau_ssim: f64,
    pub patch_size: usize,
    pub n_stages: usize,
}

impl Default for StageControlConfig {
    fn default() -> Self {
        Self { tau_psnr: 35.0, tau_ssim: 0.95, patch_size: 14, n_stages: 4 }
    }
}

impl StageControlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stages < 1 || self.n_stages > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!("n_stages must be in [1, 65535], got {}", self.n_stages)));
        }
        if self.patch_size < 2 {
            return Err(Error::InvalidParameter(format!("patch size must be >= 2, got {}", self.patch_size)));
        }
        if !self.tau_psnr.is_finite() || !self.tau_ssim.is_finite() {
            return Err(Error::InvalidParameter("thresholds must be finite".into()));
        }
        Ok(())
    }

    /// `(rows, cols)` of the token grid for a `width × height` image.
    pub fn grid_dims(&self, width: usize, height: usize) -> (usize, usize) {
        (patch_count(height, self.patch_size), patch_count(width, self.patch_size))
    }

    /// Candidate capacity over all stages: `S · rows · cols`.
    pub fn capacity(&self, width: usize, height: usize) -> usize {
        let (r, c) = self.grid_dims(width, height);
        self.n_stages * r * c
    }
}

/// One flag per patch token; `true` means the token spawns a primitive.
pub type StageMask = Grid<bool>;

/// `M(u) = [psnr(u) < τ_psnr ∨ ssim(u) < τ_ssim]`.
pub fn compute_stage_mask(maps: &QualityMaps, cfg: &StageControlConfig) -> Result<StageMask> {
    let (pr, pc) = maps.psnr.dims();
    let (sr, sc) = maps.ssim.dims();
    if maps.patch_size != cfg.patch_size || (pr, pc) != (sr, sc) {
        return Err(Error::GridMismatch { expected_rows: pr, expected_cols: pc, got_rows: sr, got_cols: sc });
    }
    Ok(Grid::from_fn(pr, pc, |r, c| *maps.psnr.get(r, c) < cfg.tau_psnr || *maps.ssim.get(r, c) < cfg.tau_ssim))
}

/// Like [`compute_stage_mask`], also checking the maps against an image size.
pub fn compute_stage_mask_for(maps: &QualityMaps, cfg: &StageControlConfig, width: usize, height: usize) -> Result<StageMask> {
    let (er, ec) = cfg.grid_dims(width, height);
    let (gr, gc) = maps.psnr.dims();
    if (er, ec) != (gr, gc) || maps.patch_size != cfg.patch_size {
        return Err(Error::GridMismatch { expected_rows: er, expected_cols: ec, got_rows: gr, got_cols: gc });
    }
    compute_stage_mask(maps, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageBuffer;
    use crate::metrics::quality_maps;
    use crate::synthetic::natural_crop;
    use proptest::prelude::*;

    #[test]
    fn perfect_reconstruction_activates_nothing() {
        let img = natural_crop(1, 42, 30);
        let cfg = StageControlConfig::default();
        let maps = quality_maps(&img, &img, cfg.patch_size).unwrap();
        assert_eq!(compute_stage_mask(&maps, &cfg).unwrap().count_true(), 0);
    }

    #[test]
    fn black_render_activates_everything() {
        let img = natural_crop(2, 64, 64);
        let cfg = StageControlConfig::default();
        let maps = quality_maps(&img, &ImageBuffer::zeros(64, 64), cfg.patch_size).unwrap();
        let mask = compute_stage_mask_for(&maps, &cfg, 64, 64).unwrap();
        assert_eq!(mask.count_true(), 25);
    }

    #[test]
    fn grid_mismatch_detected() {
        let img = natural_crop(1, 28, 28);
        let maps = quality_maps(&img, &img, 7).unwrap();
        let cfg = StageControlConfig { patch_size: 14, ..Default::default() };
        assert!(matches!(compute_stage_mask(&maps, &cfg), Err(Error::GridMismatch { .. })));
        let cfg = StageControlConfig { patch_size: 7, ..Default::default() };
        assert!(matches!(compute_stage_mask_for(&maps, &cfg, 35, 28), Err(Error::GridMismatch { .. })));
    }

    proptest! {
        #[test]
        fn activation_monotone_in_thresholds(
            psnr in proptest::collection::vec(0.0f64..100.0, 12),
            ssim in proptest::collection::vec(-1.0f64..1.0, 12),
            t1 in 0.0f64..60.0, dt in 0.0f64..20.0,
            s1 in 0.0f64..1.0, ds in 0.0f64..0.5,
        ) {
            let maps = QualityMaps {
                patch_size: 5,
                psnr: Grid::from_vec(3, 4, psnr).unwrap(),
                ssim: Grid::from_vec(3, 4, ssim).unwrap(),
            };
            let lo = StageControlConfig { tau_psnr: t1, tau_ssim: s1, patch_size: 5, n_stages: 4 };
            let hi_p = StageControlConfig { tau_psnr: t1 + dt, ..lo };
            let hi_s = StageControlConfig { tau_ssim: s1 + ds, ..lo };
            let base = compute_stage_mask(&maps, &lo).unwrap().count_true();
            prop_assert!(compute_stage_mask(&maps, &hi_p).unwrap().count_true() >= base);
            prop_assert!(compute_stage_mask(&maps, &hi_s).unwrap().count_true() >= base);
        }
    }
}
