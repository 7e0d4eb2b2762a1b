//! Renders a trained checkpoint around an orbit and writes colour, albedo,
//! shading and label images plus a raw buffer dump per view.
//!
//! `cargo run --release --example render_views -- checkpoint out_dir [views]`

use std::f64::consts::TAU;
use std::path::PathBuf;

use avatar_core::imageio::{LabelMap, RgbImage};
use avatar_core::renderer::{render_buffers, Camera};
use avatar_core::rig::Pose;
use avatar_core::trainer::TrainState;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "oracle_run/final.ckpt".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "views".into()));
    let views: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(8);
    std::fs::create_dir_all(&out)?;
    let state = TrainState::load(&ckpt)?;
    let model = &state.model;
    let pose = Pose::rest(model.skeleton.len());
    for k in 0..views {
        let yaw = TAU * k as f64 / views as f64;
        let cam = Camera::orbit(64, 64, 90.0, yaw, 0.15, 3.0, [0.0, 0.05, 0.0])?;
        let b = render_buffers(model, &cam, &pose, None)?;
        b.rgb_image().save_png(&out.join(format!("rgb_{k:02}.png")))?;
        b.albedo_image().save_png(&out.join(format!("albedo_{k:02}.png")))?;
        RgbImage::from_data(b.width, b.height, b.shading.clone())?.save_png(&out.join(format!("shading_{k:02}.png")))?;
        let labels = LabelMap {
            width: b.width,
            height: b.height,
            labels: b.labels(),
        };
        std::fs::write(out.join(format!("labels_{k:02}.png")), labels.encode_png()?)?;
        b.to_raw().save(&out.join(format!("buffers_{k:02}.bin")))?;
        let coverage = b.alpha.iter().filter(|a| **a > 0.5).count();
        println!("view {k}: yaw {:.0} deg, {coverage} foreground pixels", yaw.to_degrees());
    }
    Ok(())
}
