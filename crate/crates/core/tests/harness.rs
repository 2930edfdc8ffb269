use std::fs;
use std::path::{Path, PathBuf};

use bevseg::harness::checkpoint;
use bevseg::harness::eval::{eval_command, evaluate, Predictor};
use bevseg::harness::predict::predict_render;
use bevseg::harness::train::{format_log, prepare_samples, train, RunDir, LOG_HEADER};
use bevseg::harness::RunConfig;
use bevseg::model::{forward, init_params, symbolic_shapes, Preset};
use bevseg::scene::{generate_scenes, load_scene, ClassPalette, Dataset, Sample, SceneSampler};
use bevseg::tensor::Tape;
use bevseg::Error;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

fn quick_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.batch_size = 2;
    cfg.epochs = 2;
    cfg.max_steps = 3;
    cfg.seed = 5;
    cfg.lambda = 0.1;
    cfg.data_dir = dir.join("data");
    cfg.out_dir = dir.join("run");
    cfg
}

fn samples(n: usize, cfg: &RunConfig) -> Vec<Sample> {
    let palette = ClassPalette::default();
    prepare_samples(generate_scenes(cfg.seed, n, &SceneSampler::default()), &palette, &cfg.model(&palette))
}

#[test]
fn zero_learning_rate_keeps_checkpoint_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(dir.path());
    cfg.lr = 0.0;
    cfg.weight_decay = 0.0;
    train(&cfg, &samples(3, &cfg), &ClassPalette::default(), Some(RunDir { path: &cfg.out_dir })).unwrap();
    let init = fs::read(cfg.out_dir.join("init.ckpt")).unwrap();
    assert_eq!(init, fs::read(cfg.out_dir.join("final.ckpt")).unwrap());
    assert_eq!(init, fs::read(cfg.out_dir.join("epoch_0001.ckpt")).unwrap());
}

#[test]
fn run_directory_reproduces_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let palette = ClassPalette::default();
    let data = samples(3, &cfg);
    let first = train(&cfg, &data, &palette, Some(RunDir { path: &cfg.out_dir })).unwrap();
    let log = fs::read_to_string(cfg.out_dir.join("loss.csv")).unwrap();
    assert!(log.starts_with(&format!("{LOG_HEADER}\n")));
    assert_eq!(log.lines().count(), 4);
    assert_eq!(log, format_log(&first.log));

    // Everything needed to rerun is in the echoed config.
    let echoed = RunConfig::load(&cfg.out_dir.join("config.txt")).unwrap();
    assert_eq!(echoed, cfg);
    let again = train(&echoed, &samples(3, &echoed), &palette, None).unwrap();
    assert_eq!(format_log(&again.log), log);
    assert!(first.log.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn checkpoint_round_trips_byte_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let params = init_params(&cfg.model(&ClassPalette::default()), 3).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    checkpoint::save(&a, &cfg.to_text(), &params).unwrap();
    let loaded = checkpoint::load(&a).unwrap();
    assert_eq!(loaded.config, cfg.to_text());
    checkpoint::save(&b, &loaded.config, &loaded.params).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    for ((na, ta), (nb, tb)) in params.iter().zip(loaded.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
}

#[test]
fn divergent_training_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(dir.path());
    cfg.lr = 1e30;
    cfg.max_steps = 4;
    let err = train(&cfg, &samples(2, &cfg), &ClassPalette::default(), None).unwrap_err();
    assert!(matches!(&err, Error::Verification(m) if m.contains("step")), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn eval_is_repeatable_and_truth_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(dir.path());
    Dataset::generate(&cfg.data_dir, 1, 2, 3, &SceneSampler::default()).unwrap();
    let (truth, _) = eval_command(&cfg, None, true).unwrap();
    assert!(truth.per_class.iter().flatten().all(|v| *v == 1.0));

    let ck = dir.path().join("m.ckpt");
    let params = init_params(&cfg.model(&ClassPalette::default()), 9).unwrap();
    checkpoint::save(&ck, &cfg.to_text(), &params).unwrap();
    let (_, a) = eval_command(&cfg, Some(&ck), false).unwrap();
    let (_, b) = eval_command(&cfg, Some(&ck), false).unwrap();
    assert_eq!(a, b);
    assert!(a.contains("CS Mean") && a.contains("iou.mean="));

    // A checkpoint for another preset does not load against this one.
    cfg.preset = Preset::VitB16;
    assert!(matches!(eval_command(&cfg, Some(&ck), false), Err(Error::Config(_))));
}

#[test]
fn accumulated_iou_equals_single_pass() {
    let cfg = RunConfig::default();
    let palette = ClassPalette::default();
    let data = samples(4, &cfg);
    let whole = evaluate(&data, &palette, &cfg.grid, 0.5, &Predictor::IpmNearestClass).unwrap();
    let mut parts = evaluate(&data[..1], &palette, &cfg.grid, 0.5, &Predictor::IpmNearestClass).unwrap();
    parts
        .merge(&evaluate(&data[1..], &palette, &cfg.grid, 0.5, &Predictor::IpmNearestClass).unwrap())
        .unwrap();
    assert_eq!(parts, whole);
}

#[test]
fn symbolic_shapes_agree_with_forward_pass() {
    let cfg = RunConfig::default();
    let palette = ClassPalette::default();
    let model = cfg.model(&palette);
    let params = init_params(&model, 0).unwrap();
    let sample = &samples(1, &cfg)[0];
    let mut tape = Tape::new();
    let trace = forward(&mut tape, &params, &model, &sample.input()).unwrap();
    assert_eq!(trace.shapes(&tape, &model), symbolic_shapes(&model).unwrap());
}

fn check_golden(name: &str, bytes: &[u8]) {
    let path = PathBuf::from(FIXTURES).join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, bytes).unwrap();
    }
    let want = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e} (set UPDATE_GOLDEN=1 to create)", path.display()));
    assert!(want == bytes, "{name} differs from the committed fixture");
}

#[test]
fn golden_prediction_pixmaps() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.out_dir = dir.path().to_path_buf();
    let palette = ClassPalette::default();
    let model = cfg.model(&palette);
    let scene = load_scene(&PathBuf::from(FIXTURES).join("golden.scene")).unwrap();
    let sample = Sample::build(scene, &palette, &cfg.grid, model.encoder.width, model.encoder.height);
    let params = init_params(&model, 0).unwrap();
    let written = predict_render(&params, &cfg, &sample, &palette, dir.path()).unwrap();
    let names: Vec<String> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), palette.len() + 2);
    assert_eq!(names[0], "golden_input.ppm");
    assert_eq!(names.last().unwrap(), "golden_composite.ppm");
    for layer in ["input", "car", "composite"] {
        let bytes = fs::read(dir.path().join(format!("golden_{layer}.ppm"))).unwrap();
        check_golden(&format!("golden_{layer}.ppm"), &bytes);
    }
}
