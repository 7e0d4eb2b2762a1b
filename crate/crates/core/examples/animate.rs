//! Drives a trained avatar with a pose sequence from a fixed camera.
//!
//! `cargo run --release --example animate -- checkpoint poses.json out_dir`

use std::path::PathBuf;

use avatar_core::renderer::{render_novel, Camera};
use avatar_core::rig::load_pose_sequence;
use avatar_core::trainer::TrainState;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "oracle_run/final.ckpt".into()));
    let poses = PathBuf::from(args.next().unwrap_or_else(|| "oracle_data/poses.json".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "animation".into()));
    std::fs::create_dir_all(&out)?;
    let state = TrainState::load(&ckpt)?;
    let seq = load_pose_sequence(&poses)?;
    seq.validate_for(&state.model.skeleton)?;
    let cam = Camera::orbit(64, 64, 90.0, 0.4, 0.1, 3.0, [0.0, 0.05, 0.0])?;
    let frames = render_novel(&state.model, &cam, &seq)?;
    for (pose, buffers) in seq.poses.iter().zip(&frames) {
        buffers.rgb_image().save_png(&out.join(format!("{:06}.png", pose.frame)))?;
    }
    println!("rendered {} poses at {} fps into {}", frames.len(), seq.fps, out.display());
    Ok(())
}
