mod common;

use avatar_cli::{cli_dispatch, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
use avatar_core::imageio::RgbImage;
use common::{run_args, s, small_checkpoint, small_dataset, TRAIN_TOML};

#[test]
fn train_eval_render_animate_edit_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = run_args(&["synth", "--out", s(&root.join("data")), "--frames", "5", "--size", "16x16"]).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(meta["classes"], 7);
    let data = root.join("data");

    let cfg = root.join("train.toml");
    std::fs::write(&cfg, TRAIN_TOML).unwrap();
    let run = root.join("run");
    run_args(&["train", "--data", s(&data), "--out", s(&run), "--config", s(&cfg)]).unwrap();
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists() && run.join("warmup.ckpt").exists());

    for split in ["novel_view", "novel_pose"] {
        let out = run_args(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", split]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v["psnr"].is_f64() && v["ssim"].is_f64() && v["frames"].as_u64().unwrap() > 0, "{out}");
    }

    let png = root.join("orbit.png");
    run_args(&["render", "--checkpoint", s(&ckpt), "--orbit", "30,10,3", "--size", "64x64", "--out", s(&png)]).unwrap();
    let img = RgbImage::load_png(&png).unwrap();
    assert_eq!((img.width, img.height), (64, 64));

    let png = root.join("frame.png");
    let cams = data.join("cameras.json");
    run_args(&["render", "--checkpoint", s(&ckpt), "--camera", s(&cams), "--frame", "1", "--out", s(&png)]).unwrap();
    assert_eq!(RgbImage::load_png(&png).unwrap().width, 16);

    let anim = root.join("anim");
    let out = run_args(&[
        "animate", "--checkpoint", s(&ckpt), "--poses", s(&data.join("poses.json")), "--out", s(&anim), "--size", "16x16",
    ])
    .unwrap();
    assert!(out.contains("\"frames\":5"));
    assert!(anim.join("000004.png").exists());

    let before = std::fs::read(data.join("frames/000000.png")).unwrap();
    let edited_ckpt = root.join("edited.ckpt");
    let out = run_args(&[
        "edit", "--checkpoint", s(&ckpt), "--data", s(&data), "--prompt", "Make the illumination very dim",
        "--unfreeze", "texture.shading", "--steps", "4", "--period", "1", "--out", s(&edited_ckpt),
    ])
    .unwrap();
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["edited_frames"].as_array().unwrap().len(), 4);
    assert!(edited_ckpt.exists() && data.join("edits.json").exists());
    assert_eq!(std::fs::read(data.join("originals/frames/000000.png")).unwrap(), before);
    let dimmed = RgbImage::load_png(&data.join("frames/000000.png")).unwrap();
    let orig = RgbImage::decode_png(&before).unwrap();
    let ratio = dimmed.data.iter().sum::<f32>() / orig.data.iter().sum::<f32>();
    assert!((ratio - 0.5).abs() < 0.01, "{ratio}");

    // A second session edits from the retained originals, not the dimmed images.
    run_args(&[
        "edit", "--checkpoint", s(&edited_ckpt), "--data", s(&data), "--prompt", "Make the illumination very dim",
        "--unfreeze", "texture.shading", "--steps", "1", "--period", "1", "--out", s(&edited_ckpt),
    ])
    .unwrap();
    assert_eq!(std::fs::read(data.join("originals/frames/000000.png")).unwrap(), before);
    let again = RgbImage::load_png(&data.join("frames/000000.png")).unwrap();
    assert_eq!(again, dimmed);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let ckpt = small_checkpoint(dir.path(), &data);
    assert_eq!(cli_dispatch(["avatar", "eval", "--bogus"]), EXIT_CONFIG);
    assert_eq!(cli_dispatch(["avatar"]), EXIT_CONFIG);
    assert_eq!(cli_dispatch(["avatar", "--help"]), EXIT_OK);
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(
        cli_dispatch(["avatar", "eval", "--checkpoint", s(&missing), "--data", s(&data), "--split", "novel_view"]),
        EXIT_CONFIG
    );
    assert_eq!(
        cli_dispatch(["avatar", "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "sideways"]),
        EXIT_CONFIG
    );
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "warmup_steps = 0\njoint_steps = 0\n").unwrap();
    let out = dir.path().join("run");
    assert_eq!(
        cli_dispatch(["avatar", "train", "--data", s(&data), "--out", s(&out), "--config", s(&bad_cfg)]),
        EXIT_CONFIG
    );
    std::fs::write(&bad_cfg, "learning_rate = 1\n").unwrap();
    assert_eq!(
        cli_dispatch(["avatar", "train", "--data", s(&data), "--out", s(&out), "--config", s(&bad_cfg)]),
        EXIT_CONFIG
    );
    let edit = |prompt: &str, unfreeze: &str| {
        cli_dispatch([
            "avatar", "edit", "--checkpoint", s(&ckpt), "--data", s(&data), "--prompt", prompt, "--unfreeze",
            unfreeze, "--steps", "1", "--out", s(&out),
        ])
    };
    assert_eq!(edit("Make it sparkle", "texture.shading"), EXIT_CONFIG);
    assert_eq!(edit("Make the illumination very dim", "texture.sparkle"), EXIT_CONFIG);

    // Output path occupied by a file: fails while working, not while parsing.
    let blocked = dir.path().join("blocked");
    std::fs::write(&blocked, b"x").unwrap();
    let good_cfg = dir.path().join("good.toml");
    std::fs::write(&good_cfg, TRAIN_TOML).unwrap();
    assert_eq!(
        cli_dispatch(["avatar", "train", "--data", s(&data), "--out", s(&blocked), "--config", s(&good_cfg)]),
        EXIT_RUNTIME
    );
}

#[test]
fn stdio_editor_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let ckpt = small_checkpoint(dir.path(), &data);
    // Echoes the render back through the wire protocol.
    let script = dir.path().join("echo_editor.py");
    std::fs::write(
        &script,
        "import sys, json\nfor line in sys.stdin:\n    r = json.loads(line)\n    print(json.dumps({'v': 1, 'edited_png_b64': r['render_png_b64']}), flush=True)\n",
    )
    .unwrap();
    let editor = format!("stdio:python3 {}", s(&script));
    let out = run_args(&[
        "edit", "--checkpoint", s(&ckpt), "--data", s(&data), "--prompt", "anything", "--unfreeze",
        "texture.albedo", "--editor", &editor, "--steps", "2", "--period", "1", "--out", s(&dir.path().join("e.ckpt")),
    ])
    .unwrap();
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["edited_frames"].as_array().unwrap().len(), 2);
    assert!(v["events"].as_array().unwrap().iter().all(|e| e["ok"] == true));
}
