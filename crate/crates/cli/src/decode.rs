//! `gsir decode`: bitstream to PNG, optionally one image per stage prefix.

use std::path::{Path, PathBuf};

use clap::Args;
use gsir_core::quant::decode_bitstream;
use gsir_core::{render, GaussianSet, ImageBuffer, RenderConfig};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::imageio::{read_file, save_image};

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Input `.gsir` stream.
    pub input: PathBuf,
    /// Output image (PNG, or PPM by extension).
    #[arg(short, long)]
    pub output: PathBuf,
    /// Also write `<stem>_stage<i>.png` for every stage prefix, next to the output.
    #[arg(long)]
    pub prefix: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecodeReport {
    pub input: String,
    pub width: u32,
    pub height: u32,
    pub n_stages: usize,
    pub stage_counts: Vec<u32>,
    pub strategy: String,
    pub bits_per_primitive: usize,
    pub output: String,
    pub prefixes: Vec<String>,
}

/// Decoded primitives and the final render.
pub struct Decoded {
    pub set: GaussianSet,
    pub n_stages: usize,
    pub image: ImageBuffer,
}

pub fn decode_bytes(bytes: &[u8]) -> CliResult<(Decoded, gsir_core::quant::StreamMeta, gsir_core::quant::QuantSpec)> {
    let (set, spec, meta) = decode_bitstream(bytes)?;
    let (w, h) = (meta.width as usize, meta.height as usize);
    let image = render(&set, w, h, &RenderConfig::default());
    Ok((Decoded { set, n_stages: meta.n_stages(), image }, meta, spec))
}

/// Renders of `G_1 … G_S`.
pub fn prefix_renders(set: &GaussianSet, n_stages: usize, w: usize, h: usize) -> Vec<ImageBuffer> {
    (1..=n_stages).map(|s| render(&set.prefix(s as u16), w, h, &RenderConfig::default())).collect()
}

pub fn prefix_path(output: &Path, stage: usize) -> PathBuf {
    let stem = output.file_stem().unwrap_or_default().to_string_lossy();
    let ext = output.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "png".into());
    output.with_file_name(format!("{stem}_stage{stage}.{ext}"))
}

pub fn run(args: &DecodeArgs) -> CliResult<DecodeReport> {
    let bytes = read_file(&args.input)?;
    let (dec, meta, spec) = decode_bytes(&bytes).map_err(|e| match e {
        CliError::Format(m) => CliError::Format(format!("{}: {m}", args.input.display())),
        other => other,
    })?;
    save_image(&dec.image, &args.output)?;
    let mut prefixes = Vec::new();
    if args.prefix {
        let (w, h) = (meta.width as usize, meta.height as usize);
        for (i, img) in prefix_renders(&dec.set, dec.n_stages, w, h).iter().enumerate() {
            let path = prefix_path(&args.output, i + 1);
            save_image(img, &path)?;
            prefixes.push(path.display().to_string());
        }
    }
    Ok(DecodeReport {
        input: args.input.display().to_string(),
        width: meta.width,
        height: meta.height,
        n_stages: meta.n_stages(),
        stage_counts: meta.stage_counts.clone(),
        strategy: meta.strategy.name().to_string(),
        bits_per_primitive: spec.bits_per_primitive(),
        output: args.output.display().to_string(),
        prefixes,
    })
}
