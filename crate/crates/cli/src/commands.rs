//! Subcommand definitions and their implementations.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use avatar_core::checkpoint::Checkpoint;
use avatar_core::dataset::{Dataset, DatasetError, SupervisionFrame};
use avatar_core::imageio::{ImageError, RgbImage};
use avatar_core::language_brush::{
    editor_from_spec, iterative_dataset_update, EditError, EditSession, FreezeMask, OracleEditor,
    DEFAULT_UPDATE_PERIOD,
};
use avatar_core::renderer::{render_buffers, Camera, RenderError};
use avatar_core::rig::{load_pose_sequence, Pose};
use avatar_core::synth_oracle::{generate_dataset, OracleDatasetConfig};
use avatar_core::texture_fields::ShadingMode;
use avatar_core::trainer::{evaluate, run_schedule, ScheduleOptions, TrainConfig, TrainError, TrainState};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Focal length per pixel of image width used when none is given
/// (90 px at 64 px wide).
pub const DEFAULT_FOCAL_PER_PIXEL: f64 = 90.0 / 64.0;
pub const DEFAULT_ORBIT_TARGET: [f64; 3] = [0.0, 0.05, 0.0];
pub const DEFAULT_SIZE: u32 = 64;
pub const ORIGINALS_DIR: &str = "originals";
pub const EDIT_LOG: &str = "edits.json";

#[derive(Debug, Parser)]
#[command(name = "avatar", version, about = "Train, render, animate and edit neural avatars")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic oracle dataset.
    Synth(SynthArgs),
    /// Run the two-phase training schedule.
    Train(TrainArgs),
    /// Render one image from a checkpoint.
    Render(RenderArgs),
    /// Render a pose sequence from a fixed camera.
    Animate(AnimateArgs),
    /// Print held-out PSNR/SSIM as JSON.
    Eval(EvalArgs),
    /// Run a prompt-driven edit session on a dataset.
    Edit(EditArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<[u32; 2]>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for checkpoints and the loss log.
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint; its configuration is used.
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub joint_steps: Option<u64>,
    /// Stop after this many total steps and write latest.ckpt.
    #[arg(long)]
    pub stop_at: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    /// Ablation: colour is albedo alone.
    #[arg(long)]
    pub no_shading: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orbit {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ViewArgs {
    /// Camera file: a camera object or a cameras.json list (use with --frame).
    #[arg(long, conflicts_with = "orbit")]
    pub camera: Option<PathBuf>,
    /// Orbit camera as YAW,PITCH,DISTANCE (degrees, degrees, metres).
    #[arg(long, value_parser = parse_orbit)]
    pub orbit: Option<Orbit>,
    /// Image size as WIDTHxHEIGHT for orbit cameras.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<[u32; 2]>,
    /// Focal length in pixels for orbit cameras.
    #[arg(long)]
    pub focal: Option<f64>,
    /// Orbit target as X,Y,Z.
    #[arg(long, value_parser = parse_vec3)]
    pub target: Option<[f64; 3]>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub view: ViewArgs,
    /// Frame id: selects the camera entry and the pose.
    #[arg(long)]
    pub frame: Option<i64>,
    /// Dataset directory for frame cameras and poses.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write the full buffer dump here.
    #[arg(long)]
    pub buffers: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pose sequence JSON.
    #[arg(long)]
    pub poses: PathBuf,
    /// Output directory for numbered PNGs.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub view: ViewArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Split {
    NovelView,
    NovelPose,
    Train,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; edited frames replace its images and the
    /// originals are kept under originals/.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Comma-separated parameter groups left trainable.
    #[arg(long, value_delimiter = ',', required = true)]
    pub unfreeze: Vec<String>,
    /// oracle, identity, stdio:<command> or http:<url>.
    #[arg(long, default_value = "oracle")]
    pub editor: String,
    #[arg(long, default_value_t = 300)]
    pub steps: u64,
    #[arg(long, default_value_t = DEFAULT_UPDATE_PERIOD)]
    pub period: u64,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Cap on edits per frame.
    #[arg(long)]
    pub max_passes: Option<u32>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset for frame poses and edit sessions.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
}

fn parse_size(s: &str) -> Result<[u32; 2], String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let w: u32 = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h: u32 = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok([w, h])
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number {p:?}")))
        .collect::<Result<_, _>>()?;
    let arr: [f64; N] = v.try_into().map_err(|_| format!("expected {N} comma-separated numbers"))?;
    if arr.iter().any(|x| !x.is_finite()) {
        return Err("values must be finite".into());
    }
    Ok(arr)
}

fn parse_orbit(s: &str) -> Result<Orbit, String> {
    let [yaw_deg, pitch_deg, distance] = parse_floats::<3>(s)?;
    if distance <= 0.0 {
        return Err("distance must be positive".into());
    }
    Ok(Orbit {
        yaw_deg,
        pitch_deg,
        distance,
    })
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    parse_floats::<3>(s)
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_config() {
            config_err(e)
        } else {
            runtime_err(e)
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        config_err(e)
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        runtime_err(e)
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        runtime_err(e)
    }
}

impl From<EditError> for CliError {
    fn from(e: EditError) -> Self {
        match e {
            EditError::UnsupportedPrompt { .. } | EditError::Period | EditError::Kernel(_) => config_err(e),
            EditError::Protocol(ref m) if m.starts_with("unknown editor") => config_err(e),
            EditError::Train(t) => t.into(),
            e => runtime_err(e),
        }
    }
}

/// Loads a checkpoint given on the command line. Unreadable or corrupt
/// files are input errors.
pub fn load_state(path: &Path) -> Result<TrainState, CliError> {
    let ckpt = Checkpoint::load(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    TrainState::from_checkpoint(&ckpt).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Render(a) => render(a, out),
        Command::Animate(a) => animate(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Edit(a) => edit(a, out),
        Command::Serve(a) => serve(a, out),
    }
}

fn print_json(out: &mut dyn Write, v: &impl Serialize) -> Result<(), CliError> {
    let s = serde_json::to_string(v).map_err(runtime_err)?;
    writeln!(out, "{s}").map_err(runtime_err)
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            toml::from_str::<OracleDatasetConfig>(&text).map_err(config_err)?
        }
        None => OracleDatasetConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.frames {
        cfg.frames = n;
    }
    if let Some([w, h]) = a.size {
        cfg.focal *= w as f64 / cfg.width as f64;
        cfg.width = w;
        cfg.height = h;
    }
    cfg.validate().map_err(config_err)?;
    let meta = generate_dataset(&cfg, &a.out).map_err(runtime_err)?;
    print_json(out, &meta)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ds = Dataset::load(&a.data)?;
    let mut state = match &a.resume {
        Some(p) => load_state(p)?,
        None => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => {
                    let mut c = TrainConfig::default();
                    c.apply_env()?;
                    c
                }
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.warmup_steps {
                cfg.warmup_steps = n;
            }
            if let Some(n) = a.joint_steps {
                cfg.joint_steps = n;
            }
            if a.no_shading {
                cfg.model.texture.shading = ShadingMode::Off;
            }
            if cfg.model.canonical.classes != ds.meta.classes {
                log::info!("using {} semantic classes from the dataset", ds.meta.classes);
                cfg.model.canonical.classes = ds.meta.classes;
            }
            TrainState::new(cfg, ds.skeleton.clone(), &ds.meta.train)?
        }
    };
    let frames = ds.training_frames();
    let opts = ScheduleOptions {
        out_dir: Some(a.out.clone()),
        checkpoint_every: a.checkpoint_every,
        stop_at: a.stop_at,
        log_every: Some(a.log_every),
    };
    let logs = run_schedule(&mut state, &frames, &opts)?;
    print_json(
        out,
        &serde_json::json!({
            "step": state.step,
            "total_steps": state.config.total_steps(),
            "last": logs.last(),
            "out": a.out,
        }),
    )
}

#[derive(Deserialize)]
struct CameraEntry {
    id: i64,
    camera: Camera,
}

/// Reads a single camera object or picks `frame` from a cameras.json list.
fn read_camera(path: &Path, frame: Option<i64>) -> Result<Camera, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if let Ok(cam) = serde_json::from_str::<Camera>(&text) {
        return Ok(cam);
    }
    let list: Vec<CameraEntry> =
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let id = frame.ok_or_else(|| config_err("camera list needs --frame"))?;
    list.into_iter()
        .find(|c| c.id == id)
        .map(|c| c.camera)
        .ok_or_else(|| config_err(format!("no camera for frame {id} in {}", path.display())))
}

/// Orbit camera with CLI defaults filled in.
pub fn orbit_camera(
    orbit: Orbit,
    size: Option<[u32; 2]>,
    focal: Option<f64>,
    target: Option<[f64; 3]>,
) -> Result<Camera, RenderError> {
    let [w, h] = size.unwrap_or([DEFAULT_SIZE; 2]);
    Camera::orbit(
        w,
        h,
        focal.unwrap_or(DEFAULT_FOCAL_PER_PIXEL * w as f64),
        orbit.yaw_deg.to_radians(),
        orbit.pitch_deg.to_radians(),
        orbit.distance,
        target.unwrap_or(DEFAULT_ORBIT_TARGET),
    )
}

fn view_camera(view: &ViewArgs, state: &TrainState, frame_camera: Option<&Camera>, frame: Option<i64>) -> Result<Camera, CliError> {
    let size = view.size.or(state.config.resolution);
    if let Some(p) = &view.camera {
        read_camera(p, frame)
    } else if let Some(o) = view.orbit {
        orbit_camera(o, size, view.focal, view.target).map_err(config_err)
    } else if let Some(c) = frame_camera {
        Ok(c.clone())
    } else {
        Err(config_err("one of --camera, --orbit or --frame with --data is required"))
    }
}

fn render(a: RenderArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let state = load_state(&a.checkpoint)?;
    let ds = a.data.as_deref().map(Dataset::load).transpose()?;
    let frame: Option<&SupervisionFrame> = match (a.frame, &ds) {
        (Some(id), Some(ds)) => Some(ds.frame(id).ok_or_else(|| config_err(format!("no frame {id} in dataset")))?),
        _ => None,
    };
    let camera = view_camera(&a.view, &state, frame.map(|f| &f.camera), a.frame)?;
    let pose = match (frame, a.frame, &a.view.camera) {
        (Some(f), _, _) => f.pose.clone(),
        (None, Some(id), Some(cam_path)) => {
            let seq_path = cam_path.with_file_name("poses.json");
            let seq = load_pose_sequence(&seq_path).map_err(|e| config_err(format!("{}: {e}", seq_path.display())))?;
            seq.find(id)
                .cloned()
                .ok_or_else(|| config_err(format!("no pose for frame {id} in {}", seq_path.display())))?
        }
        _ => Pose::rest(state.model.skeleton.len()),
    };
    let row = a.frame.and_then(|id| state.model.residual_row(id));
    let buffers = render_buffers(&state.model, &camera, &pose, row)?;
    buffers.rgb_image().save_png(&a.out)?;
    if let Some(p) = &a.buffers {
        buffers.to_raw().save(p)?;
    }
    print_json(
        out,
        &serde_json::json!({"out": a.out, "width": camera.width, "height": camera.height}),
    )
}

fn animate(a: AnimateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let state = load_state(&a.checkpoint)?;
    let seq = load_pose_sequence(&a.poses).map_err(|e| config_err(format!("{}: {e}", a.poses.display())))?;
    seq.validate_for(&state.model.skeleton).map_err(config_err)?;
    let view = ViewArgs {
        orbit: a.view.orbit.or(if a.view.camera.is_none() {
            Some(Orbit {
                yaw_deg: 0.0,
                pitch_deg: 8.0,
                distance: 3.0,
            })
        } else {
            None
        }),
        ..a.view.clone()
    };
    let camera = view_camera(&view, &state, None, None)?;
    std::fs::create_dir_all(&a.out).map_err(runtime_err)?;
    for (k, pose) in seq.poses.iter().enumerate() {
        let img = render_buffers(&state.model, &camera, pose, None)?.rgb_image();
        img.save_png(&a.out.join(format!("{k:06}.png")))?;
    }
    print_json(out, &serde_json::json!({"frames": seq.poses.len(), "fps": seq.fps, "out": a.out}))
}

/// Frames of one evaluation split.
pub fn split_frames(data: &Path, split: Split) -> Result<Vec<SupervisionFrame>, CliError> {
    Ok(match split {
        Split::NovelView => Dataset::load(&data.join("novel_view"))?.frames,
        Split::NovelPose => {
            let ds = Dataset::load(data)?;
            ds.novel_pose_frames().into_iter().cloned().collect()
        }
        Split::Train => {
            let ds = Dataset::load(data)?;
            ds.training_frames().into_iter().cloned().collect()
        }
    })
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let state = load_state(&a.checkpoint)?;
    let frames = split_frames(&a.data, a.split)?;
    if frames.is_empty() {
        return Err(config_err(format!("split {:?} has no frames", a.split)));
    }
    let report = evaluate(&state.model, &frames.iter().collect::<Vec<_>>())?;
    print_json(out, &report)
}

fn frame_png(dir: &Path, id: i64) -> PathBuf {
    dir.join("frames").join(format!("{id:06}.png"))
}

fn edit(a: EditArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.editor == "oracle" {
        OracleEditor::check_prompt(&a.prompt)?;
    }
    let mut state = load_state(&a.checkpoint)?;
    let mut ds = Dataset::load(&a.data)?;
    let mask = FreezeMask::all_except(&state.model.store, &a.unfreeze).map_err(config_err)?;
    let originals_dir = a.data.join(ORIGINALS_DIR);
    // A previous session's originals are the true unedited images.
    for f in ds.frames.iter_mut() {
        let p = frame_png(&originals_dir, f.id);
        if p.exists() {
            f.rgb = RgbImage::load_png(&p)?;
        }
    }
    let train_ids = ds.meta.train.clone();
    let editor = editor_from_spec(&a.editor)?;
    let editable: Vec<&SupervisionFrame> = ds.frames.iter().filter(|f| train_ids.contains(&f.id)).collect();
    let mut session = EditSession::new(a.prompt.clone(), mask, editor, a.period, &editable)?;
    session.lr = a.lr;
    session.max_passes = a.max_passes;
    // Reload the current (possibly edited) images for training.
    for f in ds.frames.iter_mut() {
        f.rgb = RgbImage::load_png(&frame_png(&a.data, f.id))?;
    }
    let logs = iterative_dataset_update(&mut session, &mut state, &mut ds.frames, &train_ids, a.steps)?;
    state.save(&a.out)?;

    let edited: Vec<i64> = session.passes.keys().copied().collect();
    std::fs::create_dir_all(originals_dir.join("frames")).map_err(runtime_err)?;
    for &id in &edited {
        let keep = frame_png(&originals_dir, id);
        if !keep.exists() {
            std::fs::copy(frame_png(&a.data, id), &keep).map_err(runtime_err)?;
        }
        let f = ds.frame(id).expect("edited frame exists");
        f.rgb.save_png(&frame_png(&a.data, id))?;
    }
    let summary = serde_json::json!({
        "prompt": a.prompt,
        "editor": session.editor.name(),
        "unfrozen": session.mask.unfrozen(&state.model.store),
        "steps": a.steps,
        "period": a.period,
        "edited_frames": edited,
        "events": session.events,
        "last": logs.last(),
        "checkpoint": a.out,
    });
    std::fs::write(
        a.data.join(EDIT_LOG),
        serde_json::to_string_pretty(&summary).map_err(runtime_err)?,
    )
    .map_err(runtime_err)?;
    print_json(out, &summary)
}

fn serve(a: ServeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let state = load_state(&a.checkpoint)?;
    let ds = a.data.as_deref().map(Dataset::load).transpose()?;
    let app = crate::serve::AppState::start(state, ds);
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Runtime::new().map_err(runtime_err)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| runtime_err(format!("bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(runtime_err)?;
        writeln!(out, "listening on http://{local}").map_err(runtime_err)?;
        out.flush().map_err(runtime_err)?;
        axum::serve(listener, crate::serve::router(app)).await.map_err(runtime_err)
    })
}
