//! `gsir encode`: stage-wise pipeline, quantization and bitstream output.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::Args;
use gsir_core::metrics::{ms_ssim, psnr};
use gsir_core::quant::{derive_ranges, encode_bitstream, roundtrip, QuantSpec, RangeStrategy};
use gsir_core::stagewise::{run_pipeline, HeuristicPredictor, PipelineConfig, Predictor, StageControlConfig, StagePipelineState, StageRecord, TinyLinear};
use gsir_core::{render, ImageBuffer, RenderConfig};
use serde::Serialize;

use crate::error::{ensure_finite, CliError, CliResult};
use crate::imageio::{load_image, read_file, write_file};

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorChoice {
    Heuristic,
    Tiny(PathBuf),
}

impl FromStr for PredictorChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "heuristic" => Ok(Self::Heuristic),
            Some(("tiny", path)) if !path.is_empty() => Ok(Self::Tiny(PathBuf::from(path))),
            _ => Err(format!("unknown predictor '{s}', expected 'heuristic' or 'tiny:<weights path>'")),
        }
    }
}

impl std::fmt::Display for PredictorChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Heuristic => write!(f, "heuristic"),
            Self::Tiny(p) => write!(f, "tiny:{}", p.display()),
        }
    }
}

/// Five per-attribute widths (μx, μy, log-scale, θ, color) or one for all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitWidths(pub [u8; 5]);

impl FromStr for BitWidths {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<u8> = s.split(',').map(|p| p.trim().parse::<u8>().map_err(|e| format!("bad bit width '{p}': {e}"))).collect::<Result<_, _>>()?;
        let bits = match parts.as_slice() {
            [b] => [*b; 5],
            [a, b, c, d, e] => [*a, *b, *c, *d, *e],
            _ => return Err(format!("expected 1 or 5 comma-separated widths, got {}", parts.len())),
        };
        if bits.iter().any(|b| !(1..=16).contains(b)) {
            return Err(format!("bit widths must lie in [1, 16], got {bits:?}"));
        }
        Ok(Self(bits))
    }
}

#[derive(Debug, Clone, Args)]
pub struct EncodeArgs {
    /// Input PNG or PPM (8 or 16 bit).
    pub input: PathBuf,
    /// Output bitstream.
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 14)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
    #[arg(long, default_value_t = 35.0)]
    pub tau_psnr: f64,
    #[arg(long, default_value_t = 0.95)]
    pub tau_ssim: f64,
    /// `heuristic` or `tiny:<weights path>`.
    #[arg(long, default_value = "heuristic")]
    pub predictor: PredictorChoice,
    /// Standard-deviation multiplier of the heuristic predictor.
    #[arg(long, default_value_t = 2.0)]
    pub spread: f64,
    /// Per-stage refinement steps after prediction; 0 disables refinement.
    #[arg(long, default_value_t = 0)]
    pub refine_steps: usize,
    #[arg(long, default_value = "adaptive")]
    pub strategy: RangeStrategy,
    /// `b` or `bx,by,bs,bt,bc`.
    #[arg(long, default_value = "16,16,12,8,8")]
    pub bits: BitWidths,
    /// JSON quantization spec used as the global base range.
    #[arg(long)]
    pub global_base: Option<PathBuf>,
    /// Recorded in the report; the encoder itself draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Everything the encoder needs besides the image.
#[derive(Debug, Clone)]
pub struct EncodeOptions {
    pub pipeline: PipelineConfig,
    pub predictor: PredictorChoice,
    pub spread: f64,
    pub strategy: RangeStrategy,
    pub base: QuantSpec,
}

impl EncodeOptions {
    pub fn from_args(args: &EncodeArgs) -> CliResult<Self> {
        let control = StageControlConfig { tau_psnr: args.tau_psnr, tau_ssim: args.tau_ssim, patch_size: args.patch_size, n_stages: args.stages };
        control.validate()?;
        if !(args.spread > 0.0 && args.spread.is_finite()) {
            return Err(CliError::Usage(format!("spread must be positive, got {}", args.spread)));
        }
        let base = match &args.global_base {
            Some(path) => serde_json::from_slice::<QuantSpec>(&read_file(path)?)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
            None => QuantSpec::default_global_base(),
        }
        .with_bits(args.bits.0);
        base.validate()?;
        Ok(Self {
            pipeline: PipelineConfig { control, refine_steps: args.refine_steps, ..Default::default() },
            predictor: args.predictor.clone(),
            spread: args.spread,
            strategy: args.strategy,
            base,
        })
    }

    pub fn with_defaults() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            predictor: PredictorChoice::Heuristic,
            spread: 2.0,
            strategy: RangeStrategy::Adaptive,
            base: QuantSpec::default_global_base(),
        }
    }

    pub fn load_predictor(&self) -> CliResult<Box<dyn Predictor>> {
        match &self.predictor {
            PredictorChoice::Heuristic => Ok(Box::new(HeuristicPredictor { spread: self.spread })),
            PredictorChoice::Tiny(path) => {
                let model = TinyLinear::from_bytes(&read_file(path)?).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
                let c = &self.pipeline.control;
                if model.patch() != c.patch_size || model.n_stages() < c.n_stages {
                    return Err(CliError::Usage(format!(
                        "weights {} have patch {} and {} stages; encoder wants patch {} and {} stages",
                        path.display(),
                        model.patch(),
                        model.n_stages(),
                        c.patch_size,
                        c.n_stages
                    )));
                }
                Ok(Box::new(model))
            }
        }
    }
}

/// In-memory encode result.
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub state: StagePipelineState,
    pub records: Vec<StageRecord>,
    pub spec: QuantSpec,
    /// Render of the dequantized set.
    pub quantized: ImageBuffer,
}

pub fn encode_buffer(img: &ImageBuffer, opts: &EncodeOptions) -> CliResult<Encoded> {
    let (w, h) = (img.width(), img.height());
    let p = opts.pipeline.control.patch_size;
    if p > w.min(h) {
        return Err(CliError::Usage(format!("patch size {p} exceeds the image's short side ({w}x{h})")));
    }
    let model = opts.load_predictor()?;
    let (state, records) = run_pipeline(img, model.as_ref(), &opts.pipeline)?;
    let set = &state.accumulated;
    let spec = if set.is_empty() { opts.base } else { derive_ranges(set, w, h, opts.strategy, &opts.base)? };
    let bytes = encode_bitstream(set, &spec, w, h, opts.pipeline.control.n_stages, opts.strategy)?;
    let rcfg: RenderConfig = opts.pipeline.refine.render.into();
    let quantized = render(&roundtrip(set, &spec, w, h)?, w, h, &rcfg);
    Ok(Encoded { bytes, state, records, spec, quantized })
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: usize,
    pub activated: usize,
    pub total: usize,
    /// Activated tokens over the tokens of one stage.
    pub utilization: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EncodeReport {
    pub input: String,
    pub output: String,
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub n_stages: usize,
    pub tau_psnr: f64,
    pub tau_ssim: f64,
    pub predictor: String,
    pub refine_steps: usize,
    pub strategy: String,
    pub seed: u64,
    pub bits: [u8; 5],
    pub bits_per_primitive: usize,
    pub stages: Vec<StageReport>,
    pub total_primitives: usize,
    pub capacity: usize,
    pub utilization: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub psnr_quantized: f64,
    pub ms_ssim_quantized: f64,
    pub bytes: usize,
    pub bpp: f64,
    pub wall_time_ms: f64,
}

pub fn run(args: &EncodeArgs) -> CliResult<EncodeReport> {
    let start = Instant::now();
    let opts = EncodeOptions::from_args(args)?;
    let img = load_image(&args.input)?;
    let enc = encode_buffer(&img, &opts)?;
    write_file(&args.output, &enc.bytes)?;
    let report = build_report(args, &opts, &img, &enc, start.elapsed().as_secs_f64() * 1e3)?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok(report)
}

fn build_report(args: &EncodeArgs, opts: &EncodeOptions, img: &ImageBuffer, enc: &Encoded, wall_ms: f64) -> CliResult<EncodeReport> {
    let (w, h) = (img.width(), img.height());
    let control = &opts.pipeline.control;
    let per_stage = control.capacity(w, h) / control.n_stages;
    let stages = enc
        .records
        .iter()
        .map(|r| {
            Ok(StageReport {
                stage: r.stage,
                activated: r.activated,
                total: r.total,
                utilization: r.activated as f64 / per_stage as f64,
                psnr: ensure_finite("stage psnr", r.psnr)?,
                ms_ssim: ensure_finite("stage ms-ssim", r.ms_ssim)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(EncodeReport {
        input: args.input.display().to_string(),
        output: args.output.display().to_string(),
        width: w,
        height: h,
        patch_size: control.patch_size,
        n_stages: control.n_stages,
        tau_psnr: control.tau_psnr,
        tau_ssim: control.tau_ssim,
        predictor: opts.predictor.to_string(),
        refine_steps: opts.pipeline.refine_steps,
        strategy: opts.strategy.name().to_string(),
        seed: args.seed,
        bits: opts.base.attrs.map(|a| a.bits),
        bits_per_primitive: enc.spec.bits_per_primitive(),
        stages,
        total_primitives: enc.state.accumulated.len(),
        capacity: control.capacity(w, h),
        utilization: enc.state.utilization(control),
        psnr: ensure_finite("psnr", psnr(&enc.state.render, img)?)?,
        ms_ssim: ensure_finite("ms-ssim", ms_ssim(&enc.state.render, img)?)?,
        psnr_quantized: ensure_finite("quantized psnr", psnr(&enc.quantized, img)?)?,
        ms_ssim_quantized: ensure_finite("quantized ms-ssim", ms_ssim(&enc.quantized, img)?)?,
        bytes: enc.bytes.len(),
        bpp: enc.bytes.len() as f64 * 8.0 / (w * h) as f64,
        wall_time_ms: wall_ms,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numeric(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}
