//! `gsir train`: POD or finetune runs with checkpoints and resume.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use gsir_core::stagewise::{
    EvalRecord, FinetuneConfig, FinetuneLogRecord, FinetuneTrainer, PodConfig, PodLogRecord, PodTrainer, StageControlConfig, TinyLinear,
    WeightAdam,
};
use gsir_core::synthetic::two_gaussian_corpus;
use gsir_core::ImageBuffer;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::imageio::{read_file, write_file, Corpus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Pod,
    Finetune,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub mode: TrainMode,
    /// Directory of PNG/PPM training images.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub corpus: Option<PathBuf>,
    /// Random two-Gaussian corpus `count:size:seed` instead of a directory.
    #[arg(long)]
    pub synthetic: Option<String>,
    /// TOML config with optional `[control]`, `[pod]` and `[finetune]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output weights file.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Per-step loss CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Start from these weights instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Write a checkpoint every N steps; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Checkpoint path; defaults to `<out>.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub control: StageControlConfig,
    pub pod: PodConfig,
    pub finetune: FinetuneConfig,
    /// Seed of the fresh model's weights.
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            control: StageControlConfig { n_stages: 2, ..Default::default() },
            pod: PodConfig::default(),
            finetune: FinetuneConfig::default(),
            init_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("{origin}: {e}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub mode: String,
    pub steps: usize,
    pub final_step: usize,
    pub resumed_from: Option<usize>,
    pub weights: String,
    pub log: String,
    pub eval_log: Option<String>,
    pub checkpoints: Vec<String>,
    pub final_eval_loss: Option<f64>,
}

pub fn parse_synthetic(spec: &str) -> CliResult<Vec<ImageBuffer>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || CliError::Usage(format!("--synthetic expects count:size:seed, got '{spec}'"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let count: usize = parts[0].parse().map_err(|_| bad())?;
    let size: usize = parts[1].parse().map_err(|_| bad())?;
    let seed: u64 = parts[2].parse().map_err(|_| bad())?;
    if count == 0 || size == 0 {
        return Err(bad());
    }
    Ok(two_gaussian_corpus(count, size, seed))
}

const CKPT_MAGIC: [u8; 4] = *b"GSCK";
const CKPT_VERSION: u16 = 1;

/// Trainer state needed to continue a run bit-identically. Logs are kept
/// as the CSV bodies written so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: TrainMode,
    pub step: usize,
    pub active: usize,
    pub model: TinyLinear,
    pub adam: WeightAdam,
    pub log_csv: String,
    pub eval_csv: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.push(match self.mode {
            TrainMode::Pod => 0,
            TrainMode::Finetune => 1,
        });
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        out.extend_from_slice(&(self.active as u32).to_le_bytes());
        let model = self.model.to_bytes();
        out.extend_from_slice(&(model.len() as u64).to_le_bytes());
        out.extend_from_slice(&model);
        out.extend_from_slice(&(self.adam.t.len() as u32).to_le_bytes());
        for s in 0..self.adam.t.len() {
            out.extend_from_slice(&self.adam.t[s].to_le_bytes());
            out.extend_from_slice(&(self.adam.m[s].len() as u64).to_le_bytes());
            for v in self.adam.m[s].iter().chain(&self.adam.v[s]) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for text in [&self.log_csv, &self.eval_csv] {
            out.extend_from_slice(&(text.len() as u64).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(CliError::Format("not a training checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != CKPT_VERSION {
            return Err(CliError::Format(format!("unsupported checkpoint version {version}")));
        }
        let mode = match r.take(1)?[0] {
            0 => TrainMode::Pod,
            1 => TrainMode::Finetune,
            m => return Err(CliError::Format(format!("unknown checkpoint mode {m}"))),
        };
        let step = r.u64()? as usize;
        let active = u32::from_le_bytes(r.array()?) as usize;
        let len = r.u64()? as usize;
        let model = TinyLinear::from_bytes(r.take(len)?)?;
        let n = u32::from_le_bytes(r.array()?) as usize;
        let mut adam = WeightAdam::new(0, 0);
        for _ in 0..n {
            adam.t.push(r.u64()?);
            let per = r.u64()? as usize;
            let m = (0..per).map(|_| r.f64()).collect::<CliResult<Vec<_>>>()?;
            let v = (0..per).map(|_| r.f64()).collect::<CliResult<Vec<_>>>()?;
            adam.m.push(m);
            adam.v.push(v);
        }
        let mut texts = Vec::new();
        for _ in 0..2 {
            let len = r.u64()? as usize;
            texts.push(String::from_utf8(r.take(len)?.to_vec()).map_err(|e| CliError::Format(format!("checkpoint log: {e}")))?);
        }
        if r.pos != bytes.len() {
            return Err(CliError::Format("trailing bytes in checkpoint".into()));
        }
        if n != model.n_stages() || adam.m.iter().any(|m| m.len() != model.params_per_stage()) {
            return Err(CliError::Format("checkpoint optimizer state does not match its model".into()));
        }
        let eval_csv = texts.pop().unwrap_or_default();
        let log_csv = texts.pop().unwrap_or_default();
        Ok(Self { mode, step, active, model, adam, log_csv, eval_csv })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CliError::Format(format!("truncated checkpoint: needed {} bytes, have {}", self.pos + n, self.bytes.len())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> CliResult<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn csv_rows<T>(records: &[T], row: impl Fn(&T) -> String) -> String {
    records.iter().map(|r| row(r) + "\n").collect()
}

/// Either trainer behind one interface.
enum Trainer {
    Pod(PodTrainer),
    Finetune(FinetuneTrainer),
}

impl Trainer {
    fn step(&self) -> usize {
        match self {
            Trainer::Pod(t) => t.step,
            Trainer::Finetune(t) => t.step,
        }
    }

    fn run_until(&mut self, corpus: &[ImageBuffer], until: usize) -> CliResult<()> {
        match self {
            Trainer::Pod(t) => t.run_until(corpus, until)?,
            Trainer::Finetune(t) => t.run_until(corpus, until)?,
        }
        Ok(())
    }

    fn log_csv(&self) -> String {
        match self {
            Trainer::Pod(t) => csv_rows(&t.log, PodLogRecord::csv_row),
            Trainer::Finetune(t) => csv_rows(&t.log, FinetuneLogRecord::csv_row),
        }
    }

    fn eval_csv(&self) -> String {
        match self {
            Trainer::Pod(t) => csv_rows(&t.eval, |e: &EvalRecord| format!("{},{}", e.step, e.loss)),
            Trainer::Finetune(_) => String::new(),
        }
    }

    fn checkpoint(&self, mode: TrainMode, prior_log: &str, prior_eval: &str) -> Checkpoint {
        let (model, adam, active) = match self {
            Trainer::Pod(t) => (t.model.clone(), t.adam.clone(), t.active),
            Trainer::Finetune(t) => (t.model.clone(), t.adam.clone(), t.control.n_stages),
        };
        Checkpoint {
            mode,
            step: self.step(),
            active,
            model,
            adam,
            log_csv: format!("{prior_log}{}", self.log_csv()),
            eval_csv: format!("{prior_eval}{}", self.eval_csv()),
        }
    }

    /// Weights to publish: stages whose milestone has been reached are
    /// initialized even if no step has trained them yet.
    fn final_model(&self) -> TinyLinear {
        match self {
            Trainer::Pod(t) => {
                let mut t = t.clone();
                t.activate_due();
                t.model
            }
            Trainer::Finetune(t) => t.model.clone(),
        }
    }
}

pub fn run(args: &TrainArgs) -> CliResult<TrainReport> {
    let cfg = match &args.config {
        Some(path) => TrainConfig::parse(&String::from_utf8_lossy(&read_file(path)?), &path.display().to_string())?,
        None => TrainConfig::default(),
    };
    cfg.control.validate()?;
    let corpus = match (&args.corpus, &args.synthetic) {
        (Some(dir), _) => Corpus::load_dir(dir)?.images,
        (None, Some(spec)) => parse_synthetic(spec)?,
        (None, None) => return Err(CliError::Usage("either --corpus or --synthetic is required".into())),
    };
    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".log.csv"));
    let eval_path = with_suffix(&log_path, ".eval.csv");
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| with_suffix(&args.out, ".ckpt"));

    let (mut trainer, prior_log, prior_eval, resumed_from) = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::from_bytes(&read_file(path)?)?;
            if ck.mode != args.mode {
                return Err(CliError::Usage(format!("checkpoint {} was written by a {:?} run", path.display(), ck.mode)));
            }
            let step = ck.step;
            let trainer = build_trainer(args.mode, &cfg, ck.model.clone())?;
            let trainer = match trainer {
                Trainer::Pod(mut t) => {
                    t.adam = ck.adam;
                    t.step = ck.step;
                    t.active = ck.active;
                    Trainer::Pod(t)
                }
                Trainer::Finetune(mut t) => {
                    t.adam = ck.adam;
                    t.step = ck.step;
                    Trainer::Finetune(t)
                }
            };
            (trainer, ck.log_csv, ck.eval_csv, Some(step))
        }
        None => {
            let model = match &args.init {
                Some(path) => TinyLinear::from_bytes(&read_file(path)?).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?,
                None => TinyLinear::new(cfg.control.patch_size, cfg.control.n_stages, cfg.init_seed)?,
            };
            (build_trainer(args.mode, &cfg, model)?, String::new(), String::new(), None)
        }
    };

    let total = match args.mode {
        TrainMode::Pod => cfg.pod.steps,
        TrainMode::Finetune => cfg.finetune.steps,
    };
    let mut checkpoints = Vec::new();
    while trainer.step() < total {
        let next = if args.checkpoint_every > 0 { ((trainer.step() / args.checkpoint_every) + 1) * args.checkpoint_every } else { total };
        trainer.run_until(&corpus, next.min(total))?;
        if args.checkpoint_every > 0 && trainer.step() % args.checkpoint_every == 0 {
            write_file(&ckpt_path, &trainer.checkpoint(args.mode, &prior_log, &prior_eval).to_bytes())?;
            checkpoints.push(format!("{}@{}", ckpt_path.display(), trainer.step()));
        }
    }

    let model = trainer.final_model();
    write_file(&args.out, &model.to_bytes())?;
    let header = match args.mode {
        TrainMode::Pod => PodLogRecord::CSV_HEADER,
        TrainMode::Finetune => FinetuneLogRecord::CSV_HEADER,
    };
    write_file(&log_path, format!("{header}\n{prior_log}{}", trainer.log_csv()).as_bytes())?;
    let (eval_log, final_eval_loss) = match &trainer {
        Trainer::Pod(t) => {
            write_file(&eval_path, format!("step,loss\n{prior_eval}{}", trainer.eval_csv()).as_bytes())?;
            let prior = prior_eval.lines().last().and_then(|l| l.split(',').nth(1)).and_then(|v| v.parse().ok());
            (Some(eval_path.display().to_string()), t.eval.last().map(|e| e.loss).or(prior))
        }
        Trainer::Finetune(_) => (None, None),
    };
    Ok(TrainReport {
        mode: format!("{:?}", args.mode).to_lowercase(),
        steps: total,
        final_step: trainer.step(),
        resumed_from,
        weights: args.out.display().to_string(),
        log: log_path.display().to_string(),
        eval_log,
        checkpoints,
        final_eval_loss,
    })
}

fn build_trainer(mode: TrainMode, cfg: &TrainConfig, model: TinyLinear) -> CliResult<Trainer> {
    Ok(match mode {
        TrainMode::Pod => Trainer::Pod(PodTrainer::new(model, cfg.pod.clone(), cfg.control)?),
        TrainMode::Finetune => Trainer::Finetune(FinetuneTrainer::new(model, cfg.finetune.clone(), cfg.control)?),
    })
}
