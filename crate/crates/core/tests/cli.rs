use std::fs;
use std::path::Path;

use hinet::cli::main_with;
use hinet::imageio::save_png;
use hinet::model::{save_checkpoint, Checkpoint};
use hinet::{Hinet, HinetConfig, RngState, Shape4, Tensor};

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(std::iter::once("hinet").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn png(path: &Path, h: usize, w: usize) {
    let mut rng = RngState::new(h as u64 * 31 + w as u64);
    let t = Tensor::from_fn(Shape4::new(1, 3, h, w).unwrap(), |_, _, _, _| rng.below(256) as f32 / 255.0);
    save_png(&t, path).unwrap();
}

fn checkpoint(path: &Path, cfg: HinetConfig) {
    let net: Hinet = Hinet::build(cfg, &mut RngState::new(2)).unwrap();
    save_checkpoint(&Checkpoint::from_model(&net), path).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn infer_reports_padding_and_per_file_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let imgs = d.join("imgs");
    fs::create_dir(&imgs).unwrap();
    png(&imgs.join("a.png"), 32, 16);
    png(&imgs.join("b.png"), 20, 17);
    fs::write(imgs.join("c.png"), b"not a png").unwrap();
    checkpoint(&d.join("m.bin"), HinetConfig::tiny(2));

    let out = d.join("out");
    let (code, stdout, stderr) = run(&["infer", "--input", s(&imgs), "--checkpoint", s(&d.join("m.bin")), "--out-dir", s(&out)]);
    assert_eq!(code, 1, "{stderr}");
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("a.png") && lines[0].ends_with("32x16 padded=false"));
    assert!(lines[1].contains("b.png") && lines[1].ends_with("20x17 padded=true"));
    assert!(stderr.contains("c.png"));
    assert!(out.join("a.png").exists() && out.join("b.png").exists());

    let (code, _, _) = run(&["infer", "--input", s(&imgs.join("a.png")), "--ensemble", s(&d.join("m.bin")), "--out-dir", s(&out)]);
    assert_eq!(code, 0);
}

#[test]
fn infer_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    png(&d.join("x.png"), 24, 40);
    checkpoint(&d.join("m.bin"), HinetConfig::tiny(2));
    for o in ["o1", "o2"] {
        assert_eq!(run(&["infer", "--tta", "--input", s(&d.join("x.png")), "--ensemble", s(&d.join("m.bin")), "--out-dir", s(&d.join(o))]).0, 0);
    }
    assert_eq!(fs::read(d.join("o1/x.png")).unwrap(), fs::read(d.join("o2/x.png")).unwrap());
}

#[test]
fn infer_rejects_mismatched_checkpoints_and_configs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    png(&d.join("x.png"), 16, 16);
    checkpoint(&d.join("a.bin"), HinetConfig::tiny(2));
    checkpoint(&d.join("b.bin"), HinetConfig::tiny(4));
    let both = format!("{},{}", s(&d.join("a.bin")), s(&d.join("b.bin")));
    let (code, _, err) = run(&["infer", "--input", s(&d.join("x.png")), "--ensemble", &both, "--out-dir", s(&d.join("o"))]);
    assert_eq!(code, 2);
    assert!(err.contains("different model config"), "{err}");
    let (code, _, err) = run(&["infer", "--input", s(&d.join("x.png")), "--ensemble", s(&d.join("a.bin")), "--out-dir", s(&d.join("o")), "base_width=8"]);
    assert_eq!(code, 2);
    assert!(err.contains("base_width"), "{err}");
}

#[test]
fn train_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("file"), "").unwrap();
    let (code, _, err) = run(&["train", "--out-dir", s(&d.join("file/sub")), "base_width=2", "steps=1", "batch=1"]);
    assert_eq!(code, 2);
    assert!(err.contains("cannot create output directory"), "{err}");

    fs::write(d.join("bad.bin"), b"HINETCKP\x01").unwrap();
    let (code, _, err) = run(&["train", "--out-dir", s(&d.join("o")), "--resume", s(&d.join("bad.bin"))]);
    assert_eq!(code, 2);
    assert!(err.contains("cannot resume from") && err.contains("truncated"), "{err}");

    let (code, _, err) = run(&["train", "--out-dir", s(&d.join("o")), "stepz=3"]);
    assert_eq!(code, 2);
    assert!(err.contains("unknown key `stepz`"), "{err}");
}

#[test]
fn resume_rejects_conflicting_settings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = d.join("o");
    let base = ["train", "--out-dir", s(&o), "base_width=2", "steps=4", "batch=1", "patch=16", "image_size=16", "checkpoint_every=2"];
    let (code, out, err) = run(&base);
    assert_eq!(code, 0, "{err}");
    assert!(out.lines().last().unwrap().starts_with("done step=4 "));
    let ck = o.join("ckpt_000002.bin");
    let (code, _, err) = run(&["train", "--out-dir", s(&o), "--resume", s(&ck), "steps=8"]);
    assert_eq!(code, 2);
    assert!(err.contains("steps = 8 but the checkpoint has 4"), "{err}");
}

#[test]
fn gradcheck_filter_and_precision() {
    let (code, out, _) = run(&["gradcheck", "--precision", "f64", "--filter", "sigmoid"]);
    assert_eq!(code, 0);
    assert!(out.lines().next().unwrap().starts_with("PASS sigmoid"));
    assert!(out.contains("f64: 1 passed, 0 failed"));
    assert_eq!(run(&["gradcheck", "--filter", "no_such_case"]).0, 2);
    assert_eq!(run(&["gradcheck", "--precision", "f16"]).0, 2);
}

#[test]
fn analyze_rejects_invalid_configs() {
    let (code, _, err) = run(&["analyze", "base_width=3"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error: "));
    let (code, out, _) = run(&["analyze", "--input", "2x3x64x64", "stages=1"]);
    assert_eq!(code, 0);
    assert!(out.contains("input=2x3x64x64") && out.contains("sam=0"));
}
