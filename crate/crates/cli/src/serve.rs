//! HTTP API. Renders read an immutable model snapshot; freeze and edit
//! commands go through one control channel to a trainer thread, which
//! commits a new snapshot after every update period.

use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use avatar_core::dataset::{Dataset, DatasetMeta, SupervisionFrame};
use avatar_core::language_brush::{
    editor_from_spec, iterative_dataset_update, EditError, EditSession, FreezeMask, OracleEditor,
    DEFAULT_UPDATE_PERIOD,
};
use avatar_core::model::AvatarModel;
use avatar_core::objectives::Phase;
use avatar_core::renderer::{render_buffers, Camera, RenderedBuffers};
use avatar_core::rig::{Pose, Skeleton};
use avatar_core::trainer::{StepLog, TrainState};
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use crate::commands::{orbit_camera, Orbit};

/// A committed, read-only model.
pub struct Snapshot {
    pub model: AvatarModel,
    pub step: u64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Losses {
    pub total: f64,
    pub rec: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<f64>,
}

impl From<&StepLog> for Losses {
    fn from(l: &StepLog) -> Self {
        Self {
            total: l.total,
            rec: l.rec,
            reg: l.reg,
            mask: l.mask,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EditStatus {
    pub prompt: String,
    pub editor: String,
    pub period: u64,
    pub active: bool,
    pub steps: u64,
    pub frames_edited: usize,
    pub cursor: usize,
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Status {
    pub step: u64,
    pub phase: Phase,
    pub losses: Option<Losses>,
    pub frozen: Vec<String>,
    pub edit_session: Option<EditStatus>,
}

#[derive(Debug, Deserialize)]
pub struct FreezeRequest {
    pub groups: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct EditRequestBody {
    pub prompt: String,
    #[serde(default = "default_editor")]
    pub editor: String,
    #[serde(default = "default_period")]
    pub period: u64,
    /// Stop after this many steps; runs until stopped otherwise.
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub lr: Option<f64>,
}

fn default_editor() -> String {
    "oracle".into()
}

fn default_period() -> u64 {
    DEFAULT_UPDATE_PERIOD
}

/// Error reply with a JSON body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

enum Control {
    Freeze(Vec<String>, oneshot::Sender<Result<Vec<String>, ApiError>>),
    StartEdit(EditRequestBody, oneshot::Sender<Result<(), ApiError>>),
    StopEdit(oneshot::Sender<bool>),
}

struct FrameInfo {
    id: i64,
    camera: Camera,
    pose: Pose,
}

pub struct AppState {
    snapshot: RwLock<Arc<Snapshot>>,
    status: Mutex<Status>,
    control: Mutex<mpsc::Sender<Control>>,
    skeleton: Skeleton,
    fps: Option<f64>,
    meta: Option<DatasetMeta>,
    frames: Vec<FrameInfo>,
}

impl AppState {
    /// Publishes the initial snapshot and starts the trainer thread.
    pub fn start(state: TrainState, dataset: Option<Dataset>) -> Arc<Self> {
        let (tx, rx) = mpsc::channel();
        let frames = dataset
            .as_ref()
            .map(|d| {
                d.frames
                    .iter()
                    .map(|f| FrameInfo {
                        id: f.id,
                        camera: f.camera.clone(),
                        pose: f.pose.clone(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        let app = Arc::new(Self {
            snapshot: RwLock::new(Arc::new(Snapshot {
                model: state.model.clone(),
                step: state.step,
            })),
            status: Mutex::new(Status {
                step: state.step,
                phase: state.phase(),
                losses: None,
                frozen: state.frozen().iter().cloned().collect(),
                edit_session: None,
            }),
            control: Mutex::new(tx),
            skeleton: state.model.skeleton.clone(),
            fps: dataset.as_ref().map(|d| d.fps),
            meta: dataset.as_ref().map(|d| d.meta.clone()),
            frames,
        });
        let worker = Worker {
            app: Arc::downgrade(&app),
            state,
            data: dataset.map(|d| (d.frames, d.meta.train)),
            session: None,
            remaining: None,
        };
        thread::spawn(move || worker.run(rx));
        app
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn status(&self) -> Status {
        self.status.lock().expect("status lock").clone()
    }

    async fn send<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Control) -> Result<T, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.control
            .lock()
            .expect("control lock")
            .send(make(tx))
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "trainer stopped"))?;
        rx.await
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "trainer stopped"))
    }

    fn frame(&self, id: i64) -> Result<&FrameInfo, ApiError> {
        self.frames
            .iter()
            .find(|f| f.id == id)
            .ok_or_else(|| ApiError::bad_request(format!("unknown frame {id}")))
    }
}

struct Worker {
    app: std::sync::Weak<AppState>,
    state: TrainState,
    data: Option<(Vec<SupervisionFrame>, Vec<i64>)>,
    session: Option<EditSession>,
    remaining: Option<u64>,
}

impl Worker {
    fn run(mut self, rx: mpsc::Receiver<Control>) {
        loop {
            let msg = if self.session.is_some() {
                match rx.try_recv() {
                    Ok(m) => Some(m),
                    Err(mpsc::TryRecvError::Empty) => None,
                    Err(mpsc::TryRecvError::Disconnected) => return,
                }
            } else {
                match rx.recv_timeout(Duration::from_millis(500)) {
                    Ok(m) => Some(m),
                    Err(mpsc::RecvTimeoutError::Timeout) => {
                        if self.app.strong_count() == 0 {
                            return;
                        }
                        continue;
                    }
                    Err(mpsc::RecvTimeoutError::Disconnected) => return,
                }
            };
            if let Some(m) = msg {
                self.handle(m);
                continue;
            }
            self.edit_chunk();
        }
    }

    fn handle(&mut self, msg: Control) {
        match msg {
            Control::Freeze(groups, reply) => {
                let r = if self.session.is_some() {
                    Err(ApiError::new(StatusCode::CONFLICT, "cannot change the freeze mask during an edit session"))
                } else {
                    self.freeze(&groups)
                };
                let _ = reply.send(r);
            }
            Control::StartEdit(req, reply) => {
                let _ = reply.send(self.start_edit(req));
            }
            Control::StopEdit(reply) => {
                let was = self.session.is_some();
                self.finish(None);
                let _ = reply.send(was);
            }
        }
    }

    fn freeze(&mut self, groups: &[String]) -> Result<Vec<String>, ApiError> {
        let store = &mut self.state.model.store;
        let mask = FreezeMask::new(store, groups).map_err(|_| {
            let valid: Vec<&str> = store.groups();
            ApiError {
                status: StatusCode::BAD_REQUEST,
                body: json!({
                    "error": "unknown parameter group",
                    "unknown": groups.iter().filter(|g| !valid.contains(&g.as_str())).collect::<Vec<_>>(),
                    "valid_groups": valid,
                }),
            }
        })?;
        avatar_core::language_brush::apply_freeze(store, &mask)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let frozen: Vec<String> = mask.frozen.into_iter().collect();
        self.update_status(|s| s.frozen = frozen.clone());
        Ok(frozen)
    }

    fn start_edit(&mut self, req: EditRequestBody) -> Result<(), ApiError> {
        if self.session.is_some() {
            return Err(ApiError::new(StatusCode::CONFLICT, "an edit session is already active"));
        }
        let Some((frames, train)) = &self.data else {
            return Err(ApiError::bad_request("server was started without a dataset"));
        };
        if req.period == 0 {
            return Err(ApiError::bad_request("period must be at least 1"));
        }
        if req.lr.is_some_and(|lr| !lr.is_finite() || lr <= 0.0) {
            return Err(ApiError::bad_request("lr must be positive"));
        }
        if req.editor == "oracle" {
            OracleEditor::check_prompt(&req.prompt).map_err(|e| ApiError::bad_request(e.to_string()))?;
        }
        let frozen: Vec<String> = self.state.frozen().iter().cloned().collect();
        let mask = FreezeMask::new(&self.state.model.store, &frozen).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let editor = editor_from_spec(&req.editor).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let editable: Vec<&SupervisionFrame> = frames.iter().filter(|f| train.contains(&f.id)).collect();
        let mut session = EditSession::new(req.prompt.clone(), mask, editor, req.period, &editable)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        session.lr = req.lr;
        let status = EditStatus {
            prompt: req.prompt,
            editor: session.editor.name(),
            period: req.period,
            active: true,
            steps: 0,
            frames_edited: 0,
            cursor: 0,
            failures: 0,
            error: None,
        };
        self.session = Some(session);
        self.remaining = req.steps;
        self.update_status(|s| s.edit_session = Some(status.clone()));
        Ok(())
    }

    fn edit_chunk(&mut self) {
        let (Some(session), Some((frames, train))) = (self.session.as_mut(), self.data.as_mut()) else {
            return;
        };
        let n = self.remaining.map_or(session.period, |r| r.min(session.period));
        let result = iterative_dataset_update(session, &mut self.state, frames, train, n);
        if let Some(r) = self.remaining.as_mut() {
            *r -= n;
        }
        match result {
            Ok(logs) => {
                let losses = logs.last().map(Losses::from);
                let (edited, cursor, failures) = (
                    session.passes.len(),
                    session.cursor,
                    session.consecutive_failures,
                );
                self.commit();
                self.update_status(|s| {
                    if losses.is_some() {
                        s.losses = losses.clone();
                    }
                    if let Some(e) = s.edit_session.as_mut() {
                        e.steps += n;
                        e.frames_edited = edited;
                        e.cursor = cursor;
                        e.failures = failures;
                    }
                });
                if self.remaining == Some(0) {
                    self.finish(None);
                }
            }
            Err(e) => {
                log::error!("edit session stopped: {e}");
                self.commit();
                self.finish(Some(e));
            }
        }
    }

    fn finish(&mut self, error: Option<EditError>) {
        if self.session.take().is_none() {
            return;
        }
        self.remaining = None;
        self.update_status(|s| {
            if let Some(e) = s.edit_session.as_mut() {
                e.active = false;
                e.error = error.as_ref().map(|e| e.to_string());
            }
        });
    }

    fn commit(&self) {
        let Some(app) = self.app.upgrade() else { return };
        let snap = Arc::new(Snapshot {
            model: self.state.model.clone(),
            step: self.state.step,
        });
        *app.snapshot.write().expect("snapshot lock") = snap;
    }

    fn update_status(&self, f: impl FnOnce(&mut Status)) {
        let Some(app) = self.app.upgrade() else { return };
        let mut s = app.status.lock().expect("status lock");
        s.step = self.state.step;
        s.phase = self.state.phase();
        f(&mut s);
    }
}

#[derive(Debug, Deserialize)]
pub struct RenderQuery {
    #[serde(default)]
    pub yaw: f64,
    #[serde(default = "default_pitch")]
    pub pitch: f64,
    #[serde(default = "default_dist")]
    pub dist: f64,
    pub frame: Option<i64>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub focal: Option<f64>,
}

fn default_pitch() -> f64 {
    8.0
}

fn default_dist() -> f64 {
    3.0
}

#[derive(Debug, Deserialize)]
pub struct RenderBody {
    pub camera: Camera,
    #[serde(default)]
    pub frame: Option<i64>,
}

#[derive(Debug, Deserialize)]
pub struct BuffersQuery {
    pub frame: Option<i64>,
    pub yaw: Option<f64>,
    pub pitch: Option<f64>,
    pub dist: Option<f64>,
}

fn pose_for(app: &AppState, frame: Option<i64>) -> Result<Pose, ApiError> {
    match frame {
        Some(id) => Ok(app.frame(id)?.pose.clone()),
        None => Ok(Pose::rest(app.skeleton.len())),
    }
}

fn default_size(app: &AppState) -> (u32, u32) {
    app.frames
        .first()
        .map_or((64, 64), |f| (f.camera.width, f.camera.height))
}

const MAX_SIDE: u32 = 1024;

fn orbit_from_query(app: &AppState, q: &RenderQuery) -> Result<Camera, ApiError> {
    let (dw, dh) = default_size(app);
    let (w, h) = (q.width.unwrap_or(dw), q.height.unwrap_or(dh));
    if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
        return Err(ApiError::bad_request(format!("image size must be within 1..={MAX_SIDE}")));
    }
    if ![q.yaw, q.pitch, q.dist].iter().all(|v| v.is_finite()) || q.dist <= 0.0 {
        return Err(ApiError::bad_request("yaw, pitch and dist must be finite with dist > 0"));
    }
    let focal = q.focal.or_else(|| {
        app.frames
            .first()
            .map(|f| f.camera.fx * w as f64 / f.camera.width as f64)
    });
    orbit_camera(
        Orbit {
            yaw_deg: q.yaw,
            pitch_deg: q.pitch,
            distance: q.dist,
        },
        Some([w, h]),
        focal,
        None,
    )
    .map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn render_snapshot(
    app: &Arc<AppState>,
    camera: Camera,
    frame: Option<i64>,
) -> Result<RenderedBuffers, ApiError> {
    let pose = pose_for(app, frame)?;
    let snap = app.snapshot();
    tokio::task::spawn_blocking(move || {
        let row = frame.and_then(|id| snap.model.residual_row(id));
        render_buffers(&snap.model, &camera, &pose, row)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

fn png_response(buffers: &RenderedBuffers) -> Result<Response, ApiError> {
    let png = buffers
        .rgb_image()
        .encode_png()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn get_render(State(app): State<Arc<AppState>>, Query(q): Query<RenderQuery>) -> Result<Response, ApiError> {
    let camera = orbit_from_query(&app, &q)?;
    png_response(&render_snapshot(&app, camera, q.frame).await?)
}

async fn post_render(State(app): State<Arc<AppState>>, Json(body): Json<RenderBody>) -> Result<Response, ApiError> {
    body.camera.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    if body.camera.width > MAX_SIDE || body.camera.height > MAX_SIDE {
        return Err(ApiError::bad_request(format!("image size must be within 1..={MAX_SIDE}")));
    }
    png_response(&render_snapshot(&app, body.camera, body.frame).await?)
}

async fn get_buffers(State(app): State<Arc<AppState>>, Query(q): Query<BuffersQuery>) -> Result<Response, ApiError> {
    let orbit_given = q.yaw.is_some() || q.pitch.is_some() || q.dist.is_some();
    let camera = match q.frame {
        Some(id) if !orbit_given => app.frame(id)?.camera.clone(),
        _ => orbit_from_query(
            &app,
            &RenderQuery {
                yaw: q.yaw.unwrap_or(0.0),
                pitch: q.pitch.unwrap_or(default_pitch()),
                dist: q.dist.unwrap_or(default_dist()),
                frame: q.frame,
                width: None,
                height: None,
                focal: None,
            },
        )?,
    };
    let buffers = render_snapshot(&app, camera, q.frame).await?;
    let layout = format!(
        "u,v,alpha,depth,rgb.r,rgb.g,rgb.b,albedo.r,albedo.g,albedo.b,shading.r,shading.g,shading.b,{}",
        (0..buffers.classes).map(|c| format!("semantic.{c}")).collect::<Vec<_>>().join(",")
    );
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (header::HeaderName::from_static("x-buffer-channels"), layout),
        ],
        buffers.to_raw().to_bytes(),
    )
        .into_response())
}

async fn get_poses(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let joints: Vec<&str> = app.skeleton.joints().iter().map(|j| j.name.as_str()).collect();
    let frames: Vec<i64> = app.frames.iter().map(|f| f.id).collect();
    Json(json!({
        "fps": app.fps,
        "joints": joints,
        "frames": frames,
        "train": app.meta.as_ref().map(|m| m.train.clone()),
        "novel_pose": app.meta.as_ref().map(|m| m.novel_pose.clone()),
    }))
}

async fn get_status(State(app): State<Arc<AppState>>) -> Json<Status> {
    Json(app.status())
}

async fn post_freeze(
    State(app): State<Arc<AppState>>,
    Json(req): Json<FreezeRequest>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let frozen = app.send(|tx| Control::Freeze(req.groups, tx)).await??;
    let unfrozen: Vec<String> = app
        .snapshot()
        .model
        .store
        .groups()
        .into_iter()
        .filter(|g| !frozen.iter().any(|f| f == g))
        .map(str::to_string)
        .collect();
    Ok(Json(json!({ "frozen": frozen, "unfrozen": unfrozen })))
}

async fn post_edit(
    State(app): State<Arc<AppState>>,
    Json(req): Json<EditRequestBody>,
) -> Result<Json<Status>, ApiError> {
    app.send(|tx| Control::StartEdit(req, tx)).await??;
    Ok(Json(app.status()))
}

async fn post_edit_stop(State(app): State<Arc<AppState>>) -> Result<Json<serde_json::Value>, ApiError> {
    let stopped = app.send(Control::StopEdit).await?;
    Ok(Json(json!({ "stopped": stopped, "status": app.status() })))
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/render", get(get_render).post(post_render))
        .route("/api/poses", get(get_poses))
        .route("/api/status", get(get_status))
        .route("/api/freeze", post(post_freeze))
        .route("/api/edit", post(post_edit))
        .route("/api/edit/stop", post(post_edit_stop))
        .route("/api/buffers", get(get_buffers))
        .with_state(app)
}
