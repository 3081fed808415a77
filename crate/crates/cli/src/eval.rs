//! `gsir eval`: full-image metrics plus per-patch quality maps.

use std::path::PathBuf;

use clap::Args;
use gsir_core::metrics::{ms_ssim, psnr, quality_maps, ssim};
use gsir_core::{Grid, ImageBuffer};
use serde::Serialize;

use crate::error::{ensure_finite, CliError, CliResult};
use crate::imageio::{load_image, write_file, write_pgm};

/// Heatmap range for PSNR maps, in dB.
pub const PSNR_MAP_RANGE: (f64, f64) = (0.0, 60.0);

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    pub recon: PathBuf,
    pub reference: PathBuf,
    #[arg(long, default_value_t = 14)]
    pub patch_size: usize,
    /// Directory for `psnr_map.{csv,pgm}` and `ssim_map.{csv,pgm}`.
    #[arg(long)]
    pub maps_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MapPaths {
    pub psnr_csv: String,
    pub psnr_pgm: String,
    pub ssim_csv: String,
    pub ssim_pgm: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub recon: String,
    pub reference: String,
    pub width: usize,
    pub height: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub patch_size: usize,
    pub maps: Option<MapPaths>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

pub fn metrics(recon: &ImageBuffer, reference: &ImageBuffer) -> CliResult<Metrics> {
    if !recon.same_dims(reference) {
        return Err(CliError::Usage(format!(
            "dimension mismatch: {}x{} vs {}x{}",
            recon.width(),
            recon.height(),
            reference.width(),
            reference.height()
        )));
    }
    Ok(Metrics {
        psnr: ensure_finite("psnr", psnr(recon, reference)?)?,
        ssim: ensure_finite("ssim", ssim(recon, reference)?)?,
        ms_ssim: ensure_finite("ms-ssim", ms_ssim(recon, reference)?)?,
    })
}

pub fn grid_csv(grid: &Grid<f64>) -> String {
    let mut out = String::new();
    for r in 0..grid.rows() {
        let row: Vec<String> = (0..grid.cols()).map(|c| grid.get(r, c).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn run(args: &EvalArgs) -> CliResult<EvalReport> {
    let recon = load_image(&args.recon)?;
    let reference = load_image(&args.reference)?;
    let m = metrics(&recon, &reference)?;
    if args.patch_size < 1 {
        return Err(CliError::Usage("patch size must be at least 1".into()));
    }
    let maps = match &args.maps_dir {
        Some(dir) => {
            let q = quality_maps(&reference, &recon, args.patch_size)?;
            let (rows, cols) = q.psnr.dims();
            let paths = MapPaths {
                psnr_csv: dir.join("psnr_map.csv").display().to_string(),
                psnr_pgm: dir.join("psnr_map.pgm").display().to_string(),
                ssim_csv: dir.join("ssim_map.csv").display().to_string(),
                ssim_pgm: dir.join("ssim_map.pgm").display().to_string(),
            };
            write_file(&dir.join("psnr_map.csv"), grid_csv(&q.psnr).as_bytes())?;
            write_file(&dir.join("ssim_map.csv"), grid_csv(&q.ssim).as_bytes())?;
            write_pgm(&dir.join("psnr_map.pgm"), q.psnr.cells(), rows, cols, PSNR_MAP_RANGE.0, PSNR_MAP_RANGE.1)?;
            write_pgm(&dir.join("ssim_map.pgm"), q.ssim.cells(), rows, cols, 0.0, 1.0)?;
            Some(paths)
        }
        None => None,
    };
    Ok(EvalReport {
        recon: args.recon.display().to_string(),
        reference: args.reference.display().to_string(),
        width: recon.width(),
        height: recon.height(),
        psnr: m.psnr,
        ssim: m.ssim,
        ms_ssim: m.ms_ssim,
        patch_size: args.patch_size,
        maps,
    })
}
