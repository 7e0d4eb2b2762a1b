#![allow(dead_code)]

use std::path::{Path, PathBuf};

use avatar_cli::commands::{run, Cli};
use avatar_cli::CliError;
use avatar_core::dataset::Dataset;
use avatar_core::synth_oracle::{generate_dataset, OracleDatasetConfig};
use avatar_core::trainer::{TrainConfig, TrainState};
use clap::Parser;

pub const TRAIN_TOML: &str = r#"
seed = 3
warmup_steps = 3
joint_steps = 2
rays_per_batch = 24
patch_size = 4
samples_per_ray = 8
smoothness_points = 8

[model.canonical]
classes = 7
"#;

pub fn small_dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let cfg = OracleDatasetConfig {
        frames: 5,
        width: 16,
        height: 16,
        focal: 22.5,
        novel_view_frames: 2,
        ..Default::default()
    };
    generate_dataset(&cfg, &data).unwrap();
    data
}

/// Untrained model for the small dataset, saved as a checkpoint.
pub fn small_checkpoint(dir: &Path, data: &Path) -> PathBuf {
    let ds = Dataset::load(data).unwrap();
    let cfg = TrainConfig::from_toml(TRAIN_TOML).unwrap();
    let state = TrainState::new(cfg, ds.skeleton.clone(), &ds.meta.train).unwrap();
    let path = dir.join("model.ckpt");
    state.save(&path).unwrap();
    path
}

/// Runs a command line and captures stdout.
pub fn run_args(args: &[&str]) -> Result<String, CliError> {
    let cli = Cli::try_parse_from(std::iter::once("avatar").chain(args.iter().copied()))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = Vec::new();
    run(cli, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
