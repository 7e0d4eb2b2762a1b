//! Trains on a generated oracle dataset and reports held-out metrics.
//!
//! `cargo run --release --example train_oracle -- data_dir out_dir [warmup joint]`

use std::path::PathBuf;
use std::time::Instant;

use avatar_core::dataset::Dataset;
use avatar_core::synth_oracle::{generate_dataset, OracleDatasetConfig};
use avatar_core::trainer::{evaluate, run_schedule, ScheduleOptions, TrainConfig, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let data = PathBuf::from(args.next().unwrap_or_else(|| "oracle_data".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "oracle_run".into()));
    if !data.join("cameras.json").exists() {
        generate_dataset(&OracleDatasetConfig::default(), &data)?;
    }
    let mut cfg = TrainConfig::default();
    cfg.model.canonical.classes = 7;
    if let (Some(w), Some(j)) = (args.next(), args.next()) {
        cfg.warmup_steps = w.parse()?;
        cfg.joint_steps = j.parse()?;
    }
    cfg.apply_env()?;
    let ds = Dataset::load(&data)?;
    let frames = ds.training_frames();
    let mut state = TrainState::new(cfg, ds.skeleton.clone(), &ds.meta.train)?;
    let t0 = Instant::now();
    let mut last = Instant::now();
    let opts = ScheduleOptions {
        out_dir: Some(out.clone()),
        ..Default::default()
    };
    let total = state.config.total_steps();
    let mut done = 0;
    while done < total {
        let chunk = (done + 100).min(total);
        let logs = run_schedule(
            &mut state,
            &frames,
            &ScheduleOptions {
                stop_at: Some(chunk),
                ..opts.clone()
            },
        )?;
        done = state.step;
        let l = logs.last().unwrap();
        println!(
            "step {:5} {:?} rec {:.5} reg {:?} mask {:?} samples {} ({:.3}s/step)",
            state.step,
            l.phase,
            l.rec,
            l.reg.map(|v| (v * 1e4).round() / 1e4),
            l.mask.map(|v| (v * 1e4).round() / 1e4),
            l.samples,
            last.elapsed().as_secs_f64() / 100.0
        );
        last = Instant::now();
    }
    println!("trained {} steps in {:.1}s", total, t0.elapsed().as_secs_f64());
    let nv = Dataset::load(&data.join("novel_view"))?;
    let novel_view = evaluate(&state.model, &nv.frames.iter().collect::<Vec<_>>())?;
    let novel_pose = evaluate(&state.model, &ds.novel_pose_frames())?;
    let train = evaluate(&state.model, &frames)?;
    println!("train      {}", serde_json::to_string(&train)?);
    println!("novel_view {}", serde_json::to_string(&novel_view)?);
    println!("novel_pose {}", serde_json::to_string(&novel_pose)?);
    Ok(())
}
