//! `gsir bench`: desk-scale ablation suites written as CSV tables.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use gsir_core::metrics::{ms_ssim, psnr, ssim};
use gsir_core::optim::{fit_from_scratch, FitConfig, LossRecord};
use gsir_core::quant::{calibrate_global_base, derive_ranges, encode_bitstream, roundtrip, QuantSpec, RangeStrategy, DEFAULT_BITS};
use gsir_core::stagewise::{pod_train, run_pipeline, HeuristicPredictor, PipelineConfig, PodConfig, PodLogRecord, StageControlConfig, Supervision, TinyLinear};
use gsir_core::synthetic::{crop_corpus, natural_crop, two_gaussian_corpus};
use gsir_core::{render, ImageBuffer, RenderConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure_finite, CliError, CliResult};
use crate::imageio::{write_file, Corpus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    StagewiseVsOneshot,
    Thresholds,
    QuantVariants,
    PodVsDirect,
    FitBaseline,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::StagewiseVsOneshot => "stagewise-vs-oneshot",
            Suite::Thresholds => "thresholds",
            Suite::QuantVariants => "quant-variants",
            Suite::PodVsDirect => "pod-vs-direct",
            Suite::FitBaseline => "fit-baseline",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(value_enum)]
    pub suite: Suite,
    /// Image directory; defaults to the five procedural crops.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Side of the procedural crops.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output directory for the CSV tables.
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 14)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
    #[arg(long, default_value_t = 10)]
    pub refine_steps: usize,
    #[arg(long, default_value_t = 2.0)]
    pub spread: f64,
    /// Training steps for pod-vs-direct.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Primitives for fit-baseline.
    #[arg(long, default_value_t = 500)]
    pub gaussians: usize,
    /// Iterations for fit-baseline.
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub suite: String,
    pub images: Vec<String>,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

/// Held-out crops used to calibrate the global range base.
pub const CALIBRATION_SEEDS: std::ops::RangeInclusive<u64> = 101..=116;

/// Global base from the heuristic pipeline's output on held-out crops.
pub fn calibrated_global_base(cfg: &PipelineConfig, model: &HeuristicPredictor, size: usize, bits: [u8; 5]) -> CliResult<QuantSpec> {
    let sets = CALIBRATION_SEEDS
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&s| Ok((run_pipeline(&natural_crop(s, size, size), model, cfg)?.0.accumulated, size, size)))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(calibrate_global_base(&sets, bits)?)
}

fn pipeline_cfg(args: &BenchArgs, patch: usize, stages: usize) -> PipelineConfig {
    PipelineConfig {
        control: StageControlConfig { patch_size: patch, n_stages: stages, ..Default::default() },
        refine_steps: args.refine_steps,
        ..Default::default()
    }
}

fn load_corpus(args: &BenchArgs) -> CliResult<Corpus> {
    let c = match &args.corpus {
        Some(dir) => Corpus::load_dir(dir)?,
        None => Corpus::from_images("crop", crop_corpus(args.size, args.size)),
    };
    if c.images.is_empty() {
        return Err(CliError::Usage("empty corpus".into()));
    }
    Ok(c)
}

fn save_csv(args: &BenchArgs, name: &str, body: &str, outputs: &mut Vec<String>) -> CliResult<()> {
    let path = args.out.join(name);
    write_file(&path, body.as_bytes())?;
    outputs.push(path.display().to_string());
    Ok(())
}

pub fn run(args: &BenchArgs) -> CliResult<BenchReport> {
    if !(args.spread > 0.0) {
        return Err(CliError::Usage("spread must be positive".into()));
    }
    let mut outputs = Vec::new();
    let (images, summary) = match args.suite {
        Suite::StagewiseVsOneshot => stagewise_vs_oneshot(args, &mut outputs)?,
        Suite::Thresholds => thresholds(args, &mut outputs)?,
        Suite::QuantVariants => quant_variants(args, &mut outputs)?,
        Suite::PodVsDirect => pod_vs_direct(args, &mut outputs)?,
        Suite::FitBaseline => fit_baseline(args, &mut outputs)?,
    };
    Ok(BenchReport { suite: args.suite.name().into(), images, outputs, summary })
}

type SuiteOut = CliResult<(Vec<String>, serde_json::Value)>;

/// Progressive stages versus a single stage with about the same candidate
/// capacity (patch `p/√S`).
fn stagewise_vs_oneshot(args: &BenchArgs, outputs: &mut Vec<String>) -> SuiteOut {
    let corpus = load_corpus(args)?;
    let model = HeuristicPredictor { spread: args.spread };
    let prog = pipeline_cfg(args, args.patch_size, args.stages);
    let one_patch = ((args.patch_size as f64 / (args.stages as f64).sqrt()).round() as usize).max(2);
    let one = pipeline_cfg(args, one_patch, 1);
    let rows = corpus
        .images
        .par_iter()
        .map(|img| {
            let (_, p) = run_pipeline(img, &model, &prog)?;
            let (_, o) = run_pipeline(img, &model, &one)?;
            Ok((p, o))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut csv = String::from("image,mode,patch_size,stage,primitives,psnr,ms_ssim\n");
    let (mut mean_prog, mut mean_one) = (0.0, 0.0);
    for (name, (p, o)) in corpus.names.iter().zip(&rows) {
        for r in o {
            writeln!(csv, "{name},oneshot,{one_patch},{},{},{},{}", r.stage, r.total, r.psnr, r.ms_ssim).unwrap();
        }
        for r in p {
            writeln!(csv, "{name},progressive,{},{},{},{},{}", args.patch_size, r.stage, r.total, r.psnr, r.ms_ssim).unwrap();
        }
        mean_prog += p.last().map_or(0.0, |r| r.psnr) / rows.len() as f64;
        mean_one += o.last().map_or(0.0, |r| r.psnr) / rows.len() as f64;
    }
    save_csv(args, "stagewise_vs_oneshot.csv", &csv, outputs)?;
    Ok((corpus.names, serde_json::json!({ "mean_psnr_progressive": mean_prog, "mean_psnr_oneshot": mean_one, "oneshot_patch_size": one_patch })))
}

/// The τ grid, plus vacuous zero thresholds.
pub const TAU_GRID: [(f64, f64); 4] = [(0.0, 0.0), (30.0, 0.90), (35.0, 0.95), (40.0, 0.98)];

fn thresholds(args: &BenchArgs, outputs: &mut Vec<String>) -> SuiteOut {
    let corpus = load_corpus(args)?;
    let model = HeuristicPredictor { spread: args.spread };
    let mut csv = String::from("image,tau_psnr,tau_ssim,stage,activated,total,utilization,psnr\n");
    let mut monotone = true;
    for (name, img) in corpus.names.iter().zip(&corpus.images) {
        let runs = TAU_GRID
            .par_iter()
            .map(|&(tp, ts)| {
                let mut cfg = pipeline_cfg(args, args.patch_size, args.stages);
                cfg.control.tau_psnr = tp;
                cfg.control.tau_ssim = ts;
                let (state, recs) = run_pipeline(img, &model, &cfg)?;
                Ok((tp, ts, state.utilization(&cfg.control), recs))
            })
            .collect::<CliResult<Vec<_>>>()?;
        let mut prev = 0;
        for (tp, ts, util, recs) in &runs {
            for r in recs {
                writeln!(csv, "{name},{tp},{ts},{},{},{},{util},{}", r.stage, r.activated, r.total, r.psnr).unwrap();
            }
            let total = recs.last().map_or(0, |r| r.total);
            if *tp > 0.0 {
                monotone &= total >= prev;
                prev = total;
            }
        }
    }
    save_csv(args, "thresholds.csv", &csv, outputs)?;
    Ok((corpus.names, serde_json::json!({ "activated_monotone": monotone })))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantRow {
    pub bits_per_primitive: usize,
    pub bytes: usize,
    pub psnr: f64,
    pub ms_ssim: f64,
}

/// Quantizes `set` with `strategy` and scores the dequantized render.
pub fn quant_row(img: &ImageBuffer, set: &gsir_core::GaussianSet, n_stages: usize, strategy: RangeStrategy, base: &QuantSpec) -> CliResult<QuantRow> {
    let (w, h) = (img.width(), img.height());
    let spec = derive_ranges(set, w, h, strategy, base)?;
    let bytes = encode_bitstream(set, &spec, w, h, n_stages, strategy)?.len();
    let r = render(&roundtrip(set, &spec, w, h)?, w, h, &RenderConfig::default());
    Ok(QuantRow { bits_per_primitive: spec.bits_per_primitive(), bytes, psnr: psnr(&r, img)?, ms_ssim: ms_ssim(&r, img)? })
}

fn quant_variants(args: &BenchArgs, outputs: &mut Vec<String>) -> SuiteOut {
    let corpus = load_corpus(args)?;
    let model = HeuristicPredictor { spread: args.spread };
    let cfg = pipeline_cfg(args, args.patch_size, args.stages);
    let base = calibrated_global_base(&cfg, &model, args.size, DEFAULT_BITS)?;
    write_file(&args.out.join("global_base.json"), serde_json::to_string_pretty(&base).expect("spec serializes").as_bytes())?;
    outputs.push(args.out.join("global_base.json").display().to_string());
    let variants = [("raw", None, 0u8), ("per_image", Some(RangeStrategy::PerImage), 0), ("global", Some(RangeStrategy::Global), 0), ("adaptive", Some(RangeStrategy::Adaptive), 0), ("per_image_16bit", Some(RangeStrategy::PerImage), 16), ("global_16bit", Some(RangeStrategy::Global), 16), ("adaptive_16bit", Some(RangeStrategy::Adaptive), 16)];
    let per_image = corpus
        .images
        .par_iter()
        .map(|img| {
            let (state, _) = run_pipeline(img, &model, &cfg)?;
            let set = &state.accumulated;
            variants
                .iter()
                .map(|&(_, strat, bits)| match strat {
                    None => Ok(QuantRow { bits_per_primitive: 64 * 8, bytes: set.len() * 64, psnr: psnr(&state.render, img)?, ms_ssim: ms_ssim(&state.render, img)? }),
                    Some(s) => {
                        let b = if bits > 0 { base.with_uniform_bits(bits) } else { base };
                        quant_row(img, set, cfg.control.n_stages, s, &b)
                    }
                })
                .collect::<CliResult<Vec<_>>>()
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut csv = String::from("image,variant,bits_per_primitive,bytes,bpp,psnr,ms_ssim\n");
    let mut means = vec![(0.0, 0.0, 0.0); variants.len()];
    let n = corpus.images.len() as f64;
    for ((name, img), rows) in corpus.names.iter().zip(&corpus.images).zip(&per_image) {
        let px = (img.width() * img.height()) as f64;
        for ((v, ..), (row, m)) in variants.iter().zip(rows.iter().zip(means.iter_mut())) {
            let bpp = row.bytes as f64 * 8.0 / px;
            writeln!(csv, "{name},{v},{},{},{bpp},{},{}", row.bits_per_primitive, row.bytes, row.psnr, row.ms_ssim).unwrap();
            m.0 += bpp / n;
            m.1 += ensure_finite("psnr", row.psnr)? / n;
            m.2 += row.ms_ssim / n;
        }
    }
    for ((v, ..), m) in variants.iter().zip(&means) {
        writeln!(csv, "mean,{v},,,{},{},{}", m.0, m.1, m.2).unwrap();
    }
    save_csv(args, "quant_variants.csv", &csv, outputs)?;
    let summary: serde_json::Map<String, serde_json::Value> = variants.iter().zip(&means).map(|((v, ..), m)| (format!("mean_psnr_{v}"), serde_json::json!(m.1))).collect();
    Ok((corpus.names, serde_json::Value::Object(summary)))
}

/// Toy training setup shared by the POD suites: 2 stages at p=14 on
/// random two-Gaussian 16×16 scenes.
pub fn toy_pod_setup(steps: usize, seed: u64) -> (Vec<ImageBuffer>, PodConfig, StageControlConfig) {
    let control = StageControlConfig { patch_size: 14, n_stages: 2, ..Default::default() };
    let cfg = PodConfig { steps, milestones: vec![0, steps / 4], seed, ..Default::default() };
    (two_gaussian_corpus(16, 16, seed), cfg, control)
}

fn pod_vs_direct(args: &BenchArgs, outputs: &mut Vec<String>) -> SuiteOut {
    let (corpus, cfg, control) = toy_pod_setup(args.steps, args.seed);
    let runs = [Supervision::Pod, Supervision::Direct]
        .par_iter()
        .map(|&sup| {
            let cfg = PodConfig { supervision: sup, ..cfg.clone() };
            Ok(pod_train(TinyLinear::new(14, 2, args.seed)?, &corpus, &cfg, &control)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut summary = serde_json::Map::new();
    for (name, t) in ["pod", "direct"].iter().zip(&runs) {
        let mut csv = format!("{}\n", PodLogRecord::CSV_HEADER);
        for r in &t.log {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        save_csv(args, &format!("{name}_curve.csv"), &csv, outputs)?;
        let mut eval = String::from("step,loss\n");
        for e in &t.eval {
            writeln!(eval, "{},{}", e.step, e.loss).unwrap();
        }
        save_csv(args, &format!("{name}_eval.csv"), &eval, outputs)?;
        summary.insert(format!("{name}_finite"), serde_json::json!(t.log.iter().all(|r| r.loss.is_finite())));
        summary.insert(format!("{name}_final_eval"), serde_json::json!(t.eval.last().map(|e| e.loss)));
    }
    let names = (1..=corpus.len()).map(|i| format!("toy{i}")).collect();
    Ok((names, serde_json::Value::Object(summary)))
}

fn fit_baseline(args: &BenchArgs, outputs: &mut Vec<String>) -> SuiteOut {
    let corpus = load_corpus(args)?;
    let fcfg = FitConfig { seed: args.seed, ..Default::default() };
    let fits = corpus.images.iter().map(|img| Ok(fit_from_scratch(img, args.gaussians, args.iterations, &fcfg)?)).collect::<CliResult<Vec<_>>>()?;
    let mut table = String::from("image,gaussians,iterations,psnr,ssim,ms_ssim,loss\n");
    let mut curves = format!("image,{}\n", LossRecord::CSV_HEADER);
    let mut mean = 0.0;
    for ((name, img), fit) in corpus.names.iter().zip(&corpus.images).zip(&fits) {
        let r = render(&fit.set, img.width(), img.height(), &RenderConfig::default());
        let last = fit.curve.last().expect("curve has the final entry");
        writeln!(table, "{name},{},{},{},{},{},{}", args.gaussians, args.iterations, last.psnr, ssim(&r, img)?, ms_ssim(&r, img)?, last.total).unwrap();
        for rec in &fit.curve {
            writeln!(curves, "{name},{}", rec.csv_row()).unwrap();
        }
        mean += ensure_finite("fit psnr", last.psnr)? / fits.len() as f64;
    }
    save_csv(args, "fit_baseline.csv", &table, outputs)?;
    save_csv(args, "fit_curves.csv", &curves, outputs)?;
    Ok((corpus.names, serde_json::json!({ "mean_psnr": mean })))
}
