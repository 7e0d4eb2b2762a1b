//! Runs a prompt-driven edit with the oracle editor while only the chosen
//! parameter groups train, then reports what changed.
//!
//! `cargo run --release --example edit_session -- checkpoint data_dir [prompt] [group...]`

use std::path::PathBuf;

use avatar_core::dataset::{Dataset, SupervisionFrame};
use avatar_core::language_brush::{
    export_albedo_atlas, group_checksums, iterative_dataset_update, EditSession, FreezeMask, OracleEditor, DIM_PROMPT,
};
use avatar_core::trainer::{render_frame, TrainState};

fn mean_intensity(state: &TrainState, frames: &[&SupervisionFrame]) -> Result<f64, Box<dyn std::error::Error>> {
    let mut sum = 0.0;
    let mut n = 0;
    for f in frames {
        let b = render_frame(&state.model, f)?;
        for (px, a) in b.alpha.iter().enumerate() {
            if *a >= 0.5 {
                sum += b.rgb[px * 3..px * 3 + 3].iter().map(|v| *v as f64).sum::<f64>();
                n += 3;
            }
        }
    }
    Ok(sum / n as f64)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "oracle_run/final.ckpt".into()));
    let data = PathBuf::from(args.next().unwrap_or_else(|| "oracle_data".into()));
    let prompt = args.next().unwrap_or_else(|| DIM_PROMPT.into());
    let mut groups: Vec<String> = args.collect();
    if groups.is_empty() {
        groups.push("texture.shading".into());
    }
    let mut state = TrainState::load(&ckpt)?;
    let mut ds = Dataset::load(&data)?;
    let train_ids = ds.meta.train.clone();
    let probe: Vec<SupervisionFrame> = ds.frames.iter().filter(|f| train_ids.contains(&f.id)).take(4).cloned().collect();
    let probe: Vec<&SupervisionFrame> = probe.iter().collect();

    let before = mean_intensity(&state, &probe)?;
    let atlas = export_albedo_atlas(&state.model, 16)?;
    let sums = group_checksums(&state.model.store);

    let mask = FreezeMask::all_except(&state.model.store, &groups)?;
    let editable: Vec<&SupervisionFrame> = ds.frames.iter().filter(|f| train_ids.contains(&f.id)).collect();
    let mut session = EditSession::new(prompt.clone(), mask, Box::new(OracleEditor), 10, &editable)?;
    iterative_dataset_update(&mut session, &mut state, &mut ds.frames, &train_ids, 1000)?;

    let after = mean_intensity(&state, &probe)?;
    let drift = atlas
        .iter()
        .flatten()
        .zip(export_albedo_atlas(&state.model, 16)?.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("prompt {prompt:?}, trained groups {groups:?}");
    println!("foreground intensity {before:.4} -> {after:.4} (ratio {:.3})", after / before);
    println!("albedo atlas max change {drift:.2e}");
    for (group, sum) in group_checksums(&state.model.store) {
        let changed = sums.iter().any(|(g, s)| *g == group && *s != sum);
        println!("  {group:20} {}", if changed { "changed" } else { "unchanged" });
    }
    Ok(())
}
