use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bevseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn bevseg")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn shapes_prints_desk_pyramid() {
    let dir = tempfile::tempdir().unwrap();
    let o = bevseg(dir.path(), &["shapes", "--preset", "vit-desk"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for (i, side) in [64, 32, 16, 8, 4].iter().enumerate() {
        assert!(text.contains(&format!("fused.{i}")) && text.contains(&format!("32×{side}×{side}")), "{text}");
    }
    assert!(text.contains("probs            6×78×80"), "{text}");
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bevseg(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(bevseg(dir.path(), &["shapes", "--preset", "vit-x"]).status.code(), Some(1));
    assert_eq!(bevseg(dir.path(), &["--help"]).status.code(), Some(0));
    // No dataset under ./data.
    assert_eq!(bevseg(dir.path(), &["train"]).status.code(), Some(2));
    assert_eq!(bevseg(dir.path(), &["eval", "--checkpoint", "none.ckpt"]).status.code(), Some(2));
    assert_eq!(bevseg(dir.path(), &["shapes", "--set", "lr=fast"]).status.code(), Some(2));
}

#[test]
fn gradcheck_reports_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bevseg(dir.path(), &["gradcheck", "--ops-only"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("19 checks, 0 failed"));

    let bad = bevseg(dir.path(), &["gradcheck", "--ops-only", "--inject-fault", "layer_norm"]);
    assert_eq!(bad.status.code(), Some(3));
    let text = stdout(&bad);
    let failing: Vec<&str> = text.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failing.len(), 1, "{text}");
    assert!(failing[0].starts_with("layer_norm"));
}

#[test]
fn generate_render_and_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "seed = 4\ndata.train_scenes = 2\ndata.val_scenes = 2\n").unwrap();
    let g = bevseg(dir.path(), &["generate", "--config", "run.cfg", "--seed", "6"]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let manifest = fs::read_to_string(dir.path().join("data/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 5);

    // The command-line seed wins over the config file's.
    let scene = fs::read_to_string(dir.path().join("data/scenes/0000.scene")).unwrap();
    let lib = bevseg::scene::generate_scenes(6, 1, &bevseg::scene::SceneSampler::default());
    assert_eq!(scene, bevseg::scene::scene_to_string(&lib[0]));

    let r = bevseg(dir.path(), &["render", "--scene", "data/scenes/0001.scene", "--out", "pix"]);
    assert!(r.status.success());
    let ppm = fs::read(dir.path().join("pix/0001_input.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n128 128\n255\n"));
    assert_eq!(ppm.len(), 15 + 3 * 128 * 128);

    let e = bevseg(dir.path(), &["eval", "--config", "run.cfg", "--truth"]);
    assert!(e.status.success());
    assert!(stdout(&e).contains("iou.mean=1\n"), "{}", stdout(&e));
}
