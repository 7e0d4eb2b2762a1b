//! Two-phase optimisation: configuration, batching, the training step, the
//! schedule, checkpoint conversion and held-out evaluation.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, RngState, TensorRecord};
use crate::dataset::SupervisionFrame;
use crate::diffkernel::{Adam, Graph, KernelError, Tensor};
use crate::model::{AvatarModel, ModelConfig};
use crate::objectives::{
    loss_mask, loss_reg, loss_rec, loss_smoothness, psnr, sample_ball, ssim, total_loss, LossComponents,
    LossWeights, MetricError, MetricReport, PatchPair, Phase, RecInputs, RegInputs,
};
use crate::renderer::{generate_rays, pose_stage, render_buffers, render_rays, RenderError, RenderedBuffers};
use crate::rig::Skeleton;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "RECALAB_SEED";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame {frame} has no uv/semantic labels, required during warm-up")]
    MissingLabels { frame: i64 },
    #[error("non-finite loss at step {step} on frame {frame} ({} rays); batch pixels: {pixels:?}", pixels.len())]
    NonFinite {
        step: u64,
        frame: i64,
        pixels: Vec<(u32, u32)>,
    },
    #[error("no training frames")]
    NoFrames,
}

impl TrainError {
    pub fn is_config(&self) -> bool {
        matches!(self, TrainError::Config(_) | TrainError::MissingLabels { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub warmup_steps: u64,
    pub joint_steps: u64,
    pub lr_warmup: f64,
    pub lr_joint: f64,
    /// Scattered rays per step; the patch comes on top.
    pub rays_per_batch: usize,
    /// Share of scattered rays drawn from the dilated foreground.
    pub foreground_fraction: f64,
    /// Side of the square patch for the perceptual term, 0 to disable.
    pub patch_size: usize,
    pub samples_per_ray: usize,
    /// Step at which the non-rigid offset field switches on.
    pub nonrigid_warmup: u64,
    /// Expected image width and height; checked against the data if set.
    pub resolution: Option<[u32; 2]>,
    /// Foreground dilation radius in pixels for the photometric term.
    pub mask_dilation: u32,
    pub smoothness_points: usize,
    pub smoothness_radius: f64,
    /// Learning-rate multiplier for the per-frame pose corrections. At full
    /// rate they absorb per-frame appearance error that held-out frames
    /// cannot share.
    pub pose_residual_lr_scale: f64,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            warmup_steps: 3000,
            joint_steps: 3000,
            lr_warmup: 5e-4,
            lr_joint: 1e-4,
            rays_per_batch: 512,
            foreground_fraction: 0.75,
            patch_size: 8,
            samples_per_ray: 48,
            nonrigid_warmup: 1000,
            resolution: None,
            mask_dilation: 3,
            smoothness_points: 128,
            smoothness_radius: 0.01,
            pose_residual_lr_scale: 0.1,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a TOML file and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<(), TrainError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| TrainError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.warmup_steps + self.joint_steps == 0 {
            return bad("at least one training step is required");
        }
        if !(self.lr_warmup > 0.0) || !(self.lr_joint > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.rays_per_batch == 0 {
            return bad("rays_per_batch must be positive");
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return bad("foreground_fraction must lie in [0,1]");
        }
        if self.samples_per_ray == 0 {
            return bad("samples_per_ray must be positive");
        }
        if !(self.pose_residual_lr_scale >= 0.0) {
            return bad("pose_residual_lr_scale must be non-negative");
        }
        if !(self.smoothness_radius > 0.0) {
            return bad("smoothness_radius must be positive");
        }
        self.loss.validate().map_err(TrainError::Config)?;
        self.model_config().validate().map_err(TrainError::Config)
    }

    /// Model configuration with the trainer-level overrides applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.render.samples_per_ray = self.samples_per_ray;
        m.deformation.nonrigid_warmup = self.nonrigid_warmup;
        m
    }

    pub fn total_steps(&self) -> u64 {
        self.warmup_steps + self.joint_steps
    }

    pub fn phase(&self, step: u64) -> Phase {
        if step < self.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Joint
        }
    }

    pub fn lr(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Warmup => self.lr_warmup,
            Phase::Joint => self.lr_joint,
        }
    }
}

/// Loss values from one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub phase: Phase,
    pub frame: i64,
    pub total: f64,
    pub rec: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg_u: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<f64>,
    pub samples: usize,
}

/// Pixels rendered in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub frame: usize,
    /// Scattered rays followed by the patch, row-major.
    pub pixels: Vec<(u32, u32)>,
    pub patch: Option<(usize, usize)>,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub model: AvatarModel,
    pub adam: Adam,
    /// Optimizer steps taken.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

fn restore_rng(s: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(s.seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos);
    rng
}

impl TrainState {
    /// Fresh model; `training_frames` receive learnable pose corrections.
    pub fn new(config: TrainConfig, skeleton: Skeleton, training_frames: &[i64]) -> Result<Self, TrainError> {
        config.validate()?;
        let model = AvatarModel::new(config.model_config(), skeleton, training_frames, config.seed)?;
        let adam = Adam::new(&model.store);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            rng,
        })
    }

    pub fn phase(&self) -> Phase {
        self.config.phase(self.step)
    }

    /// Replaces the frozen group set; unknown names are rejected.
    pub fn set_frozen<S: AsRef<str>>(&mut self, groups: &[S]) -> Result<(), TrainError> {
        self.model.store.set_frozen(groups)?;
        Ok(())
    }

    /// Freezes every group except `unfrozen`.
    pub fn unfreeze_only<S: AsRef<str>>(&mut self, unfrozen: &[S]) -> Result<(), TrainError> {
        let known: Vec<String> = self.model.store.groups().iter().map(|s| s.to_string()).collect();
        for u in unfrozen {
            if !known.iter().any(|k| k == u.as_ref()) {
                return Err(KernelError::UnknownGroup {
                    name: u.as_ref().to_string(),
                    valid: known,
                }
                .into());
            }
        }
        let frozen: Vec<&String> = known
            .iter()
            .filter(|k| !unfrozen.iter().any(|u| u.as_ref() == k.as_str()))
            .collect();
        self.model.store.set_frozen(&frozen)?;
        Ok(())
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        self.model.store.frozen()
    }

    /// Draws the next batch: a random frame, scattered rays biased toward
    /// the dilated foreground, and one patch around a foreground pixel.
    pub fn sample_batch(&mut self, frames: &[&SupervisionFrame]) -> Result<Batch, TrainError> {
        if frames.is_empty() {
            return Err(TrainError::NoFrames);
        }
        let fi = self.rng.gen_range(0..frames.len());
        let f = frames[fi];
        let (w, h) = (f.width(), f.height());
        let fg: Vec<u32> = f
            .dilated_mask(self.config.mask_dilation)
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i as u32))
            .collect();
        let n = self.config.rays_per_batch;
        let n_fg = if fg.is_empty() {
            0
        } else {
            (n as f64 * self.config.foreground_fraction).round() as usize
        };
        let mut pixels = Vec::with_capacity(n + self.config.patch_size.pow(2));
        for k in 0..n {
            let i = if k < n_fg {
                fg[self.rng.gen_range(0..fg.len())]
            } else {
                self.rng.gen_range(0..w * h)
            };
            pixels.push((i % w, i / w));
        }
        let p = self.config.patch_size as u32;
        let patch = if p > 0 && p <= w && p <= h {
            let centre = fg.choose(&mut self.rng).copied().unwrap_or_else(|| self.rng.gen_range(0..w * h));
            let x0 = (centre % w).saturating_sub(p / 2).min(w - p);
            let y0 = (centre / w).saturating_sub(p / 2).min(h - p);
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    pixels.push((x, y));
                }
            }
            Some((n, p as usize))
        } else {
            None
        };
        Ok(Batch { frame: fi, pixels, patch })
    }

    /// One optimisation step on a freshly sampled batch.
    pub fn train_step(&mut self, frames: &[&SupervisionFrame]) -> Result<StepLog, TrainError> {
        let batch = self.sample_batch(frames)?;
        self.step_on(frames[batch.frame], &batch)
    }

    /// One optimisation step on a given batch.
    pub fn step_on(&mut self, frame: &SupervisionFrame, batch: &Batch) -> Result<StepLog, TrainError> {
        let phase = self.phase();
        let non_finite = |step| TrainError::NonFinite {
            step,
            frame: frame.id,
            pixels: batch.pixels.clone(),
        };
        let labels = match phase {
            Phase::Warmup => match (&frame.uv, &frame.labels) {
                (Some(uv), Some(l)) => Some((uv, l)),
                _ => return Err(TrainError::MissingLabels { frame: frame.id }),
            },
            Phase::Joint => None,
        };
        let w = frame.width();
        let idx: Vec<usize> = batch.pixels.iter().map(|&(x, y)| (y * w + x) as usize).collect();
        let n = idx.len();
        let model = &self.model;
        let mut g = Graph::<f32>::new();
        let rays = generate_rays(&frame.camera, &batch.pixels)?;
        let stage = pose_stage(&mut g, model, &frame.pose, model.residual_row(frame.id))?;
        let keep = phase == Phase::Warmup && self.config.smoothness_points > 0;
        let out = render_rays(&mut g, model, &stage, &rays, Some(&mut self.rng), keep).map_err(|e| match e {
            RenderError::Kernel(KernelError::NonFinite { .. }) => non_finite(self.step),
            e => e.into(),
        })?;
        let target = Tensor::new(
            vec![n, 3],
            idx.iter().flat_map(|&i| frame.rgb.data[3 * i..3 * i + 3].iter().copied()).collect(),
        )?;
        let target = g.constant(target)?;
        let dilated = frame.dilated_mask(self.config.mask_dilation);
        let fg = Tensor::new(vec![n, 1], idx.iter().map(|&i| if dilated[i] { 1.0 } else { 0.0 }).collect())?;
        let fg = g.constant(fg)?;
        let patch = match batch.patch {
            Some((start, side)) => {
                let pred = g.slice_rows(out.rgb, start, start + side * side)?;
                let tgt = g.slice_rows(target, start, start + side * side)?;
                Some(PatchPair {
                    pred,
                    target: tgt,
                    width: side,
                    height: side,
                })
            }
            None => None,
        };
        let w_loss = &self.config.loss;
        let rec = loss_rec(
            &mut g,
            &RecInputs {
                pred: out.rgb,
                target,
                foreground: Some(fg),
                patch,
            },
            w_loss,
        )?;
        let mut comps = LossComponents {
            rec: Some(rec),
            ..Default::default()
        };
        let mut log_reg = None;
        let mut smt_value = None;
        match phase {
            Phase::Warmup => {
                let (uv, lab) = labels.expect("checked above");
                let tu: Vec<f32> = idx.iter().map(|&i| uv.0[i]).collect();
                let tv: Vec<f32> = idx.iter().map(|&i| uv.1[i]).collect();
                let tl: Vec<u8> = idx.iter().map(|&i| lab[i]).collect();
                let smoothness = match out.canonical_points {
                    Some(pts) if w_loss.smt > 0.0 => {
                        let all = g.value(pts);
                        let m = self.config.smoothness_points.min(all.rows());
                        let rows = rand::seq::index::sample(&mut self.rng, all.rows(), m).into_vec();
                        let points = Tensor::new(vec![m, 3], rows.iter().flat_map(|&r| all.row(r).to_vec()).collect())?;
                        let jitter = sample_ball(&mut self.rng, m, self.config.smoothness_radius);
                        let jitter = Tensor::new(vec![m, 3], jitter.iter().flatten().map(|&v| v as f32).collect())?;
                        let dirs = random_directions(&mut self.rng, m);
                        let s = loss_smoothness(&mut g, &model.store, &model.canonical, &points, &dirs, &jitter)?;
                        smt_value = Some(g.value(s).item() as f64);
                        Some(s)
                    }
                    _ => None,
                };
                let reg = loss_reg(
                    &mut g,
                    &RegInputs {
                        u: out.u,
                        v: out.v,
                        semantics: out.semantics,
                        target_u: &tu,
                        target_v: &tv,
                        labels: &tl,
                        smoothness,
                    },
                    w_loss,
                )?;
                log_reg = Some([reg.u, reg.v, reg.s].map(|v| g.value(v).item() as f64));
                comps.reg = Some(reg.total);
            }
            Phase::Joint => {
                let m = Tensor::new(vec![n, 1], idx.iter().map(|&i| frame.mask[i]).collect())?;
                let m = g.constant(m)?;
                comps.mask = Some(loss_mask(&mut g, out.alpha, m)?);
            }
        }
        let (total, report) = total_loss(&mut g, &comps, w_loss, phase)?;
        if !report.total.is_finite() {
            return Err(non_finite(self.step));
        }
        let grads = g.backward(total)?;
        if grads.iter().any(|(_, t)| !t.is_finite()) {
            return Err(non_finite(self.step));
        }
        let lr = self.config.lr(phase);
        let residual = self.model.residual.as_ref().map(|r| r.id);
        let scale = self.config.pose_residual_lr_scale;
        self.adam
            .step_with(&mut self.model.store, &grads, |id| if Some(id) == residual { lr * scale } else { lr });
        let log = StepLog {
            step: self.step,
            phase,
            frame: frame.id,
            total: report.total,
            rec: report.rec.unwrap_or(0.0),
            reg: report.reg,
            reg_u: log_reg.map(|r| r[0]),
            reg_v: log_reg.map(|r| r[1]),
            reg_s: log_reg.map(|r| r[2]),
            smoothness: smt_value,
            mask: report.mask,
            samples: out.samples,
        };
        self.step += 1;
        self.model.step = self.step;
        Ok(log)
    }

    /// Trains until `target` steps have been taken, calling `on_step`
    /// after each step.
    pub fn run_until(
        &mut self,
        frames: &[&SupervisionFrame],
        target: u64,
        mut on_step: impl FnMut(&TrainState, &StepLog) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while self.step < target {
            let log = self.train_step(frames)?;
            on_step(self, &log)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.model.store;
        Checkpoint {
            config_json: serde_json::to_string(&self.config).expect("config serializes"),
            skeleton_json: serde_json::to_string(&self.model.skeleton).expect("skeleton serializes"),
            step: self.step,
            model_step: self.model.step,
            rng: rng_state(&self.rng),
            frozen: store.frozen().iter().cloned().collect(),
            residual_frames: self.model.residual.as_ref().map(|r| r.frames.clone()).unwrap_or_default(),
            tensors: store
                .ids()
                .map(|id| {
                    let t = store.tensor(id);
                    let m = self.adam.moments(id);
                    TensorRecord {
                        name: store.name(id).to_string(),
                        group: store.group_of(id).to_string(),
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                        adam_t: m.t,
                        adam_m: m.m.clone(),
                        adam_v: m.v.clone(),
                    }
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.checkpoint().save(path)?)
    }

    /// Rebuilds the full training state from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let config: TrainConfig =
            serde_json::from_str(&ckpt.config_json).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
        let skeleton: Skeleton = serde_json::from_str(&ckpt.skeleton_json)
            .map_err(|e| CheckpointError::Malformed(format!("skeleton: {e}")))?;
        let mut state = Self::new(config, skeleton, &ckpt.residual_frames)?;
        state.load_params(ckpt)?;
        state.step = ckpt.step;
        state.model.step = ckpt.model_step;
        state.rng = restore_rng(&ckpt.rng);
        state.model.store.set_frozen(&ckpt.frozen)?;
        Ok(state)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Copies parameters and optimizer moments into the current model.
    /// Every tensor is checked before anything is written.
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        let store = &self.model.store;
        let mut plan = Vec::new();
        for id in store.ids() {
            let name = store.name(id);
            let rec = ckpt
                .tensor(name)
                .ok_or_else(|| CheckpointError::MissingTensor { name: name.to_string() })?;
            if rec.shape != store.tensor(id).shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: store.tensor(id).shape().to_vec(),
                    found: rec.shape.clone(),
                }
                .into());
            }
            plan.push((id, rec));
        }
        for (id, rec) in plan {
            self.model.store.tensor_mut(id).data_mut().copy_from_slice(&rec.data);
            let m = self.adam.moments_mut(id);
            m.t = rec.adam_t;
            m.m.clone_from(&rec.adam_m);
            m.v.clone_from(&rec.adam_v);
        }
        Ok(())
    }
}

fn random_directions(rng: &mut impl Rng, m: usize) -> Tensor<f32> {
    let data = (0..m)
        .flat_map(|_| {
            let p = sample_ball(rng, 1, 1.0)[0];
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-9);
            p.map(|v| (v / n) as f32)
        })
        .collect();
    Tensor::new(vec![m, 3], data).expect("shape matches")
}

/// Where a schedule writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct ScheduleOptions {
    pub out_dir: Option<PathBuf>,
    /// Periodic checkpoint interval.
    pub checkpoint_every: Option<u64>,
    /// Stop early after this many total steps (for interrupted runs).
    pub stop_at: Option<u64>,
    /// Print progress every this many steps.
    pub log_every: Option<u64>,
}

pub const WARMUP_CHECKPOINT: &str = "warmup.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";

/// Checks that every training frame can supervise the warm-up phase.
pub fn check_warmup_labels(config: &TrainConfig, frames: &[&SupervisionFrame]) -> Result<(), TrainError> {
    if config.warmup_steps == 0 {
        return Ok(());
    }
    match frames.iter().find(|f| f.uv.is_none() || f.labels.is_none()) {
        Some(f) => Err(TrainError::MissingLabels { frame: f.id }),
        None => Ok(()),
    }
}

/// Runs (or resumes) the two-phase schedule. With an output directory, the
/// warm-up snapshot, periodic and final checkpoints and a JSONL loss log are
/// written there.
pub fn run_schedule(
    state: &mut TrainState,
    frames: &[&SupervisionFrame],
    opts: &ScheduleOptions,
) -> Result<Vec<StepLog>, TrainError> {
    if frames.is_empty() {
        return Err(TrainError::NoFrames);
    }
    if state.step < state.config.warmup_steps {
        check_warmup_labels(&state.config, frames)?;
    }
    if let Some([w, h]) = state.config.resolution {
        if let Some(f) = frames.iter().find(|f| (f.width(), f.height()) != (w, h)) {
            return Err(TrainError::Config(format!(
                "frame {} is {}x{}, config expects {w}x{h}",
                f.id,
                f.width(),
                f.height()
            )));
        }
    }
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join(METRICS_LOG))?,
            )
        }
        None => None,
    };
    let total = state.config.total_steps();
    let target = opts.stop_at.map_or(total, |s| s.min(total));
    let warmup = state.config.warmup_steps;
    let mut logs = Vec::new();
    state.run_until(frames, target, |st, log| {
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(log).expect("log serializes"))?;
        }
        if let Some(k) = opts.log_every.filter(|&k| k > 0) {
            if st.step % k == 0 {
                log::info!(
                    "step {} {:?} loss {:.5} rec {:.5} reg {:?} mask {:?}",
                    st.step,
                    log.phase,
                    log.total,
                    log.rec,
                    log.reg,
                    log.mask
                );
            }
        }
        if let Some(dir) = &opts.out_dir {
            if st.step == warmup && warmup > 0 {
                st.save(&dir.join(WARMUP_CHECKPOINT))?;
            }
            if opts.checkpoint_every.is_some_and(|k| k > 0 && st.step % k == 0) {
                st.save(&dir.join(LATEST_CHECKPOINT))?;
            }
        }
        logs.push(log.clone());
        Ok(())
    })?;
    if let Some(dir) = &opts.out_dir {
        if state.step == total {
            state.save(&dir.join(FINAL_CHECKPOINT))?;
        } else {
            state.save(&dir.join(LATEST_CHECKPOINT))?;
        }
    }
    Ok(logs)
}

/// Full-frame render of a supervision frame from its own camera and pose.
pub fn render_frame(model: &AvatarModel, frame: &SupervisionFrame) -> Result<RenderedBuffers, TrainError> {
    Ok(render_buffers(model, &frame.camera, &frame.pose, model.residual_row(frame.id))?)
}

/// Mean PSNR/SSIM of full renders against the frames.
pub fn evaluate(model: &AvatarModel, frames: &[&SupervisionFrame]) -> Result<MetricReport, TrainError> {
    let scores: Vec<Result<(f64, f64), TrainError>> = frames
        .par_iter()
        .map(|f| {
            let img = render_frame(model, f)?.rgb_image();
            Ok((psnr(&img, &f.rgb)?, ssim(&img, &f.rgb)?))
        })
        .collect();
    let mut p = 0.0;
    let mut s = 0.0;
    for r in &scores {
        let (a, b) = r.as_ref().map_err(|e| TrainError::Config(e.to_string()))?;
        p += a;
        s += b;
    }
    let n = frames.len().max(1) as f64;
    Ok(MetricReport {
        psnr: p / n,
        ssim: s / n,
        frames: frames.len(),
    })
}
