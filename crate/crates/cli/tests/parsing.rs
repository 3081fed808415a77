use gsir_cli::encode::{BitWidths, PredictorChoice};
use gsir_cli::error::CliError;
use gsir_cli::train::{parse_synthetic, Checkpoint, TrainConfig, TrainMode};
use gsir_core::stagewise::{TinyLinear, WeightAdam};

fn checkpoint() -> Checkpoint {
    let model = TinyLinear::new(6, 3, 4).unwrap();
    let mut adam = WeightAdam::new(3, model.params_per_stage());
    adam.t = vec![5, 2, 0];
    adam.m[0][3] = -0.25;
    adam.v[1][0] = 1e-9;
    Checkpoint { mode: TrainMode::Pod, step: 7, active: 2, model, adam, log_csv: "1,1,0,36,0.5,50\n".into(), eval_csv: String::new() }
}

#[test]
fn checkpoint_roundtrip_and_strictness() {
    let ck = checkpoint();
    let bytes = ck.to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CliError::Format(_))), "cut at {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(CliError::Format(_))));
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CliError::Format(_))));
}

#[test]
fn bit_width_forms() {
    assert_eq!("12".parse::<BitWidths>().unwrap(), BitWidths([12; 5]));
    assert_eq!("16, 16,12,8,8".parse::<BitWidths>().unwrap(), BitWidths([16, 16, 12, 8, 8]));
    assert!("8,8".parse::<BitWidths>().is_err());
    assert!("x".parse::<BitWidths>().is_err());
}

#[test]
fn predictor_choice_forms() {
    assert_eq!("heuristic".parse::<PredictorChoice>().unwrap(), PredictorChoice::Heuristic);
    let tiny: PredictorChoice = "tiny:w/model.bin".parse().unwrap();
    assert_eq!(tiny.to_string(), "tiny:w/model.bin");
    assert!("tiny:".parse::<PredictorChoice>().is_err());
    assert!("vit".parse::<PredictorChoice>().is_err());
}

#[test]
fn synthetic_corpus_spec() {
    let c = parse_synthetic("3:16:9").unwrap();
    assert_eq!(c.len(), 3);
    assert!(c.iter().all(|i| i.width() == 16 && i.height() == 16));
    assert_eq!(parse_synthetic("3:16:9").unwrap()[2].data(), c[2].data());
    for bad in ["3:16", "0:16:1", "3:0:1", "a:b:c", "1:2:3:4"] {
        assert!(matches!(parse_synthetic(bad), Err(CliError::Usage(_))), "{bad}");
    }
}

#[test]
fn train_config_tables() {
    let cfg = TrainConfig::parse("init_seed = 4\n[control]\npatch_size = 7\nn_stages = 3\ntau_psnr = 30.0\ntau_ssim = 0.9\n[pod]\nsteps = 10\nmilestones = [0, 2, 4]\n", "t").unwrap();
    assert_eq!((cfg.control.patch_size, cfg.control.n_stages, cfg.init_seed), (7, 3, 4));
    assert_eq!(cfg.pod.milestones, vec![0, 2, 4]);
    assert_eq!(cfg.finetune.steps, 500);
    let default = TrainConfig::parse("", "t").unwrap();
    assert_eq!(default.control.n_stages, 2);
    assert!(TrainConfig::parse("seed = 1\n", "t").is_err());
    assert!(TrainConfig::parse("[pod]\nsteps = -1\n", "t").is_err());
}
