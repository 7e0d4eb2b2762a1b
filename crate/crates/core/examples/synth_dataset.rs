//! Generates the procedural oracle dataset.
//!
//! `cargo run --example synth_dataset -- out_dir [frames]`

use std::path::PathBuf;

use avatar_core::synth_oracle::{generate_dataset, OracleDatasetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "oracle_data".into()));
    let frames = args.next().map(|s| s.parse()).transpose()?.unwrap_or(60);
    let cfg = OracleDatasetConfig {
        frames,
        ..Default::default()
    };
    let meta = generate_dataset(&cfg, &out)?;
    println!(
        "wrote {} frames to {} ({} train, {} novel-pose, {} classes)",
        frames,
        out.display(),
        meta.train.len(),
        meta.novel_pose.len(),
        meta.classes
    );
    Ok(())
}
