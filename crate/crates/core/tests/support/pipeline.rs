//! Small end-to-end runs: dataset reproducibility, seeded training and
//! checkpoint persistence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use avatar_core::checkpoint::Checkpoint;
use avatar_core::dataset::Dataset;
use avatar_core::imageio::RgbImage;
use avatar_core::rig::load_pose_sequence;
use avatar_core::synth_oracle::{generate_dataset, load_cameras, render_ground_truth, OracleDatasetConfig, OracleFigure};
use avatar_core::trainer::{render_frame, run_schedule, ScheduleOptions, TrainConfig, TrainState};

pub fn tiny_oracle(frames: usize, size: u32) -> OracleDatasetConfig {
    OracleDatasetConfig {
        frames,
        width: size,
        height: size,
        focal: size as f64 * 90.0 / 64.0,
        novel_view_frames: 2,
        ..Default::default()
    }
}

/// A few-step schedule on a narrow model.
pub fn tiny_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        warmup_steps: 4,
        joint_steps: 4,
        rays_per_batch: 48,
        samples_per_ray: 16,
        smoothness_points: 16,
        ..Default::default()
    };
    cfg.model.canonical.hidden = 16;
    cfg.model.canonical.feature_dim = 8;
    cfg.model.canonical.head_hidden = 8;
    cfg.model.canonical.classes = 7;
    cfg.model.texture.hidden = 16;
    cfg.model.texture.feature_dim = 8;
    cfg.model.texture.albedo_hidden = 8;
    cfg.model.texture.shading_hidden = 8;
    cfg.nonrigid_warmup = 2;
    cfg
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct DatasetReproduction {
    pub files: usize,
    /// Files whose bytes differ between two generations with one seed.
    pub differing_files: Vec<PathBuf>,
    pub rerendered_frames: usize,
    /// Frames whose re-render from the stored cameras and poses differs.
    pub mismatched_frames: Vec<i64>,
}

impl DatasetReproduction {
    pub fn passed(&self) -> bool {
        self.files > 0 && self.rerendered_frames > 0 && self.differing_files.is_empty() && self.mismatched_frames.is_empty()
    }
}

/// Generates the dataset twice, then re-renders every stored frame from its
/// own `cameras.json`, `poses.json` and `figure.json`.
pub fn dataset_reproduction(config: &OracleDatasetConfig) -> DatasetReproduction {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(config, a.path()).unwrap();
    generate_dataset(config, b.path()).unwrap();
    let fa = files_under(a.path());
    let fb = files_under(b.path());
    let mut rep = DatasetReproduction {
        files: fa.len(),
        ..Default::default()
    };
    for (k, v) in &fa {
        if fb.get(k) != Some(v) {
            rep.differing_files.push(k.clone());
        }
    }
    rep.differing_files.extend(fb.keys().filter(|k| !fa.contains_key(*k)).cloned());

    let figure: OracleFigure =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("figure.json")).unwrap()).unwrap();
    for split in [a.path().to_path_buf(), a.path().join("novel_view")] {
        let cams = load_cameras(&split.join("cameras.json")).unwrap();
        let poses = load_pose_sequence(&split.join("poses.json")).unwrap();
        for rec in cams {
            let pose = poses.find(rec.id).unwrap();
            let frame = render_ground_truth(&figure, &rec.camera, pose).unwrap();
            let stored = std::fs::read(split.join("frames").join(format!("{:06}.png", rec.id))).unwrap();
            rep.rerendered_frames += 1;
            if frame.rgb.encode_png().unwrap() != stored {
                rep.mismatched_frames.push(rec.id);
            }
        }
    }
    rep
}

#[derive(Debug, Default)]
pub struct Persistence {
    /// Two runs with one seed produce identical checkpoint bytes.
    pub seeded_runs_identical: bool,
    /// A different seed produces a different checkpoint.
    pub other_seed_differs: bool,
    /// save -> load -> save reproduces the bytes.
    pub round_trip_identical: bool,
    /// A reloaded checkpoint renders the same pixels.
    pub round_trip_render_identical: bool,
    /// Stop, save, reload and continue equals one uninterrupted run.
    pub resume_identical: bool,
}

impl Persistence {
    pub fn passed(&self) -> bool {
        self.seeded_runs_identical
            && self.other_seed_differs
            && self.round_trip_identical
            && self.round_trip_render_identical
            && self.resume_identical
    }
}

fn train_bytes(cfg: &TrainConfig, ds: &Dataset) -> (TrainState, Vec<u8>) {
    let mut st = TrainState::new(cfg.clone(), ds.skeleton.clone(), &ds.meta.train).unwrap();
    run_schedule(&mut st, &ds.training_frames(), &ScheduleOptions::default()).unwrap();
    let bytes = st.checkpoint().to_bytes();
    (st, bytes)
}

pub fn persistence(seed: u64) -> Persistence {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_dataset(&tiny_oracle(6, 16), &data).unwrap();
    let ds = Dataset::load(&data).unwrap();
    let cfg = tiny_train_config(seed);
    let frames = ds.training_frames();

    let (st, first) = train_bytes(&cfg, &ds);
    let (_, second) = train_bytes(&cfg, &ds);
    let (_, other) = train_bytes(&tiny_train_config(seed + 1), &ds);

    let path = dir.path().join("run.ckpt");
    st.save(&path).unwrap();
    let loaded = TrainState::load(&path).unwrap();
    let round_trip_identical = loaded.checkpoint().to_bytes() == first && Checkpoint::load(&path).unwrap().to_bytes() == first;
    let render = |s: &TrainState| -> Vec<RgbImage> {
        frames.iter().take(2).map(|f| render_frame(&s.model, f).unwrap().rgb_image()).collect()
    };
    let round_trip_render_identical = render(&st) == render(&loaded);

    let out = dir.path().join("interrupted");
    let mut part = TrainState::new(cfg.clone(), ds.skeleton.clone(), &ds.meta.train).unwrap();
    let stop = ScheduleOptions {
        out_dir: Some(out.clone()),
        stop_at: Some(cfg.warmup_steps + 1),
        ..Default::default()
    };
    run_schedule(&mut part, &frames, &stop).unwrap();
    drop(part);
    let mut resumed = TrainState::load(&out.join(avatar_core::trainer::LATEST_CHECKPOINT)).unwrap();
    run_schedule(&mut resumed, &frames, &ScheduleOptions::default()).unwrap();

    Persistence {
        seeded_runs_identical: first == second,
        other_seed_differs: first != other,
        round_trip_identical,
        round_trip_render_identical,
        resume_identical: resumed.checkpoint().to_bytes() == first,
    }
}
