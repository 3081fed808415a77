use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gsir_cli::decode::decode_bytes;
use gsir_cli::encode::{encode_buffer, EncodeOptions};
use gsir_cli::imageio::{load_image, save_image};
use gsir_core::metrics::psnr;
use gsir_core::stagewise::TinyLinear;
use gsir_core::synthetic::natural_crop;
use gsir_core::ImageBuffer;
use serde_json::Value;

fn gsir(args: &[&str]) -> Output {
    gsir_env(args, &[])
}

fn gsir_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gsir"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("gsir runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn schema_check(name: &str, report: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}_report.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let v = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = v.iter_errors(report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name} report violates its schema: {errors:?}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_png(dir: &Path, name: &str, img: &ImageBuffer) -> PathBuf {
    let path = dir.join(name);
    save_image(img, &path).unwrap();
    path
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn encode_decode_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_png(dir.path(), "in.png", &natural_crop(3, 48, 40));
    let gsir_path = dir.path().join("out.gsir");
    let rec = dir.path().join("rec.png");
    let enc = ok_json(&gsir(&["encode", p(&input), "-o", p(&gsir_path), "--refine-steps", "3"]));
    schema_check("encode", &enc);
    assert_eq!(enc["bytes"].as_u64().unwrap(), std::fs::metadata(&gsir_path).unwrap().len());
    assert_eq!(enc["bits_per_primitive"], 88);
    let total = enc["total_primitives"].as_u64().unwrap();
    assert!(total > 0 && total <= enc["capacity"].as_u64().unwrap());

    let dec = ok_json(&gsir(&["decode", p(&gsir_path), "-o", p(&rec)]));
    schema_check("decode", &dec);
    assert_eq!((dec["width"].as_u64(), dec["height"].as_u64()), (Some(48), Some(40)));
    assert_eq!(dec["stage_counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum::<u64>(), total);

    let ev = ok_json(&gsir(&["eval", p(&rec), p(&input)]));
    schema_check("eval", &ev);
    let q = enc["psnr_quantized"].as_f64().unwrap();
    assert!((ev["psnr"].as_f64().unwrap() - q).abs() < 0.5, "eval {} vs encoder {q}", ev["psnr"]);
}

#[test]
fn sixteen_bit_stream_matches_unquantized_render() {
    let img = natural_crop(4, 40, 40);
    let mut opts = EncodeOptions::with_defaults();
    opts.pipeline.refine_steps = 3;
    opts.base = opts.base.with_uniform_bits(16);
    let enc = encode_buffer(&img, &opts).unwrap();
    let (dec, meta, spec) = decode_bytes(&enc.bytes).unwrap();
    assert_eq!(spec.bits_per_primitive(), 16 * 8);
    assert_eq!(meta.count(), enc.state.accumulated.len());
    let db = psnr(&dec.image, &enc.state.render).unwrap();
    assert!(db >= 55.0, "16-bit decode at {db} dB");
}

#[test]
fn prefix_outputs_one_image_per_stage() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_png(dir.path(), "in.png", &natural_crop(5, 32, 32));
    let g = dir.path().join("a.gsir");
    ok_json(&gsir(&["encode", p(&input), "-o", p(&g), "--stages", "4"]));
    let out = dir.path().join("rec.ppm");
    let dec = ok_json(&gsir(&["decode", p(&g), "-o", p(&out), "--prefix"]));
    let prefixes: Vec<&str> = dec["prefixes"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(prefixes.len(), 4);
    for (i, f) in prefixes.iter().enumerate() {
        assert!(f.ends_with(&format!("rec_stage{}.ppm", i + 1)), "{f}");
        assert!(Path::new(f).exists());
    }
    let last = load_image(Path::new(prefixes[3])).unwrap();
    assert_eq!(psnr(&last, &load_image(&out).unwrap()).unwrap(), 100.0);
}

#[test]
fn eval_reference_values() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_png(dir.path(), "a.png", &ImageBuffer::filled(20, 12, [100.0 / 255.0; 3]));
    let b = write_png(dir.path(), "b.png", &ImageBuffer::filled(20, 12, [151.0 / 255.0; 3]));
    let same = ok_json(&gsir(&["eval", p(&a), p(&a)]));
    assert_eq!(same["psnr"].as_f64(), Some(100.0));
    assert!((same["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let off = ok_json(&gsir(&["eval", p(&a), p(&b)]));
    let expect = -20.0 * 0.2f64.log10();
    assert!((off["psnr"].as_f64().unwrap() - expect).abs() < 1e-9, "{off}");

    let maps = dir.path().join("maps");
    let ev = ok_json(&gsir(&["eval", p(&a), p(&b), "--patch-size", "4", "--maps-dir", p(&maps)]));
    schema_check("eval", &ev);
    let csv = std::fs::read_to_string(maps.join("psnr_map.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().all(|l| l.split(',').count() == 5));
    let pgm = std::fs::read(maps.join("ssim_map.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
}

#[test]
fn zero_thresholds_stop_after_first_stage() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_png(dir.path(), "in.png", &natural_crop(6, 42, 42));
    let g = dir.path().join("z.gsir");
    let enc = ok_json(&gsir(&["encode", p(&input), "-o", p(&g), "--tau-psnr", "0", "--tau-ssim", "0"]));
    let stages = enc["stages"].as_array().unwrap();
    let first = stages[0]["total"].clone();
    for s in &stages[1..] {
        assert_eq!(s["activated"], 0);
        assert_eq!(s["total"], first);
    }
}

#[test]
fn flat_gray_image_encodes() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_png(dir.path(), "gray.png", &ImageBuffer::filled(28, 28, [0.5; 3]));
    let g = dir.path().join("g.gsir");
    let enc = ok_json(&gsir(&["encode", p(&input), "-o", p(&g)]));
    schema_check("encode", &enc);
    for k in ["psnr", "ms_ssim", "psnr_quantized", "bpp"] {
        assert!(enc[k].as_f64().unwrap().is_finite(), "{k}");
    }
    ok_json(&gsir(&["decode", p(&g), "-o", p(&dir.path().join("g.png"))]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.gsir");
    std::fs::write(&bad, b"NOPE\x01\x00rest").unwrap();
    let out = dir.path().join("x.png");
    assert_eq!(gsir(&["decode", p(&bad), "-o", p(&out)]).status.code(), Some(4));
    assert_eq!(gsir(&["decode", p(&dir.path().join("missing.gsir")), "-o", p(&out)]).status.code(), Some(3));
    assert_eq!(gsir(&["encode"]).status.code(), Some(2));
    let input = write_png(dir.path(), "in.png", &natural_crop(7, 16, 16));
    let g = dir.path().join("a.gsir");
    assert_eq!(gsir(&["encode", p(&input), "-o", p(&g), "--patch-size", "20"]).status.code(), Some(2));
    assert_eq!(gsir(&["encode", p(&input), "-o", p(&g), "--bits", "0"]).status.code(), Some(2));
    assert_eq!(gsir_env(&["eval", p(&input), p(&input)], &[("GSIR_THREADS", "zero")]).status.code(), Some(2));
    ok_json(&gsir_env(&["eval", p(&input), p(&input)], &[("GSIR_THREADS", "1")]));
    let txt = dir.path().join("img.txt");
    std::fs::write(&txt, b"not an image").unwrap();
    assert_eq!(gsir(&["encode", p(&txt), "-o", p(&g)]).status.code(), Some(4));
    let small = write_png(dir.path(), "s.png", &natural_crop(7, 8, 8));
    assert_eq!(gsir(&["eval", p(&small), p(&input)]).status.code(), Some(2));
}

#[test]
fn train_zero_steps_publishes_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "init_seed = 3\n[pod]\nsteps = 0\n");
    let w = dir.path().join("w.bin");
    let rep = ok_json(&gsir(&["train", "pod", "--synthetic", "2:16:1", "--config", p(&cfg), "-o", p(&w)]));
    schema_check("train", &rep);
    assert_eq!(rep["final_step"], 0);
    let mut fresh = TinyLinear::new(14, 2, 3).unwrap();
    fresh.copy_stage(1, 2);
    assert_eq!(std::fs::read(&w).unwrap(), fresh.to_bytes());
    let log = std::fs::read_to_string(dir.path().join("w.bin.log.csv")).unwrap();
    assert_eq!(log.lines().collect::<Vec<_>>(), ["step,stage,image,primitives,loss,weighted"]);
}

#[test]
fn train_resume_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let full = write_config(d, "full.toml", "[pod]\nsteps = 12\nmilestones = [0, 6]\neval_interval = 4\nrefine_steps = 2\n");
    let half = write_config(d, "half.toml", "[pod]\nsteps = 8\nmilestones = [0, 6]\neval_interval = 4\nrefine_steps = 2\n");
    let train = |extra: &[&str]| gsir(&[&["train", "pod", "--synthetic", "3:16:2"][..], extra].concat());
    let straight = d.join("straight.bin");
    ok_json(&train(&["--config", p(&full), "-o", p(&straight)]));
    let first = d.join("first.bin");
    let r1 = ok_json(&train(&["--config", p(&half), "-o", p(&first), "--checkpoint-every", "4"]));
    assert_eq!(r1["checkpoints"].as_array().unwrap().len(), 2);
    let resumed = d.join("resumed.bin");
    let ckpt = d.join("first.bin.ckpt");
    let r2 = ok_json(&train(&["--config", p(&full), "-o", p(&resumed), "--resume", p(&ckpt)]));
    assert_eq!(r2["resumed_from"], 8);
    assert_eq!(r2["final_step"], 12);
    for suffix in ["", ".log.csv", ".log.csv.eval.csv"] {
        let a = std::fs::read(format!("{}{suffix}", straight.display())).unwrap();
        let b = std::fs::read(format!("{}{suffix}", resumed.display())).unwrap();
        assert_eq!(a, b, "{suffix}");
    }

    let ft = d.join("ft.bin");
    let wrong_mode = gsir(&["train", "finetune", "--synthetic", "3:16:2", "--config", p(&full), "-o", p(&ft), "--resume", p(&ckpt)]);
    assert_eq!(wrong_mode.status.code(), Some(2));
    std::fs::write(&ckpt, b"GSCK junk").unwrap();
    assert_eq!(train(&["-o", p(&ft), "--resume", p(&ckpt)]).status.code(), Some(4));
}

#[test]
fn published_weights_copy_due_stages() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |steps: usize| {
        let cfg = write_config(d, &format!("c{steps}.toml"), &format!("[pod]\nsteps = {steps}\nmilestones = [0, 5]\nrefine_steps = 1\n"));
        let w = d.join(format!("w{steps}.bin"));
        ok_json(&gsir(&["train", "pod", "--synthetic", "2:16:4", "--config", p(&cfg), "-o", p(&w)]));
        TinyLinear::from_bytes(&std::fs::read(&w).unwrap()).unwrap()
    };
    let early = run(4);
    assert_ne!(early.stage_weights(1), early.stage_weights(2));
    let due = run(5);
    assert_eq!(due.stage_weights(1), due.stage_weights(2));
}

#[test]
fn finetune_from_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let init = d.join("init.bin");
    std::fs::write(&init, TinyLinear::new(14, 2, 9).unwrap().to_bytes()).unwrap();
    let cfg = write_config(d, "f.toml", "[finetune]\nsteps = 3\n");
    let out = d.join("ft.bin");
    let rep = ok_json(&gsir(&["train", "finetune", "--synthetic", "2:16:5", "--config", p(&cfg), "--init", p(&init), "-o", p(&out)]));
    schema_check("train", &rep);
    let log = std::fs::read_to_string(d.join("ft.bin.log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,image,stage,prefix_loss,prefix_psnr"));
    assert!(log.lines().count() > 1);
    assert_ne!(std::fs::read(&out).unwrap(), std::fs::read(&init).unwrap());
    let bad = write_config(d, "bad.toml", "[finetune]\nstepz = 3\n");
    assert_eq!(gsir(&["train", "finetune", "--synthetic", "2:16:5", "--config", p(&bad), "-o", p(&out)]).status.code(), Some(2));
}

#[test]
fn tiny_predictor_encodes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let w = d.join("tiny.bin");
    std::fs::write(&w, TinyLinear::new(8, 3, 1).unwrap().to_bytes()).unwrap();
    let input = write_png(d, "in.png", &natural_crop(8, 24, 24));
    let g = d.join("t.gsir");
    let pred = format!("tiny:{}", p(&w));
    let enc = ok_json(&gsir(&["encode", p(&input), "-o", p(&g), "--predictor", &pred, "--patch-size", "8", "--stages", "3"]));
    assert_eq!(enc["stages"].as_array().unwrap().len(), 3);
    let mismatch = gsir(&["encode", p(&input), "-o", p(&g), "--predictor", &pred, "--patch-size", "8", "--stages", "4"]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn bench_suites_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let cases: [(&str, &[&str], &[&str]); 5] = [
        ("stagewise-vs-oneshot", &["--size", "32", "--refine-steps", "1"], &["stagewise_vs_oneshot.csv"]),
        ("thresholds", &["--size", "32", "--refine-steps", "1"], &["thresholds.csv"]),
        ("quant-variants", &["--size", "32", "--refine-steps", "1"], &["quant_variants.csv", "global_base.json"]),
        ("pod-vs-direct", &["--steps", "8"], &["pod_curve.csv", "direct_curve.csv", "pod_eval.csv", "direct_eval.csv"]),
        ("fit-baseline", &["--size", "32", "--gaussians", "10", "--iterations", "5"], &["fit_baseline.csv", "fit_curves.csv"]),
    ];
    for (suite, extra, files) in cases {
        let rep = ok_json(&gsir(&[&["bench", suite, "-o", p(&out)][..], extra].concat()));
        schema_check("bench", &rep);
        for f in files {
            let body = std::fs::read_to_string(out.join(f)).unwrap();
            assert!(body.lines().count() > 1, "{suite}: {f} is empty");
        }
    }
    let q = std::fs::read_to_string(out.join("quant_variants.csv")).unwrap();
    assert_eq!(q.lines().filter(|l| l.starts_with("mean,")).count(), 7);
    let curve = std::fs::read_to_string(out.join("direct_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("step,stage,image,primitives,loss,weighted"));
}
