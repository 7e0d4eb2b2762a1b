//! Prompt-driven editing: freeze masks that route gradients into chosen
//! modules, the editor wire protocol and clients, a deterministic oracle
//! editor, and the iterative dataset update loop.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Provenance, SupervisionFrame};
use crate::diffkernel::{Graph, KernelError, ParamStore, Tensor};
use crate::imageio::{hsv_to_rgb, rgb_to_hsv, ImageError, LabelMap, RgbImage};
use crate::model::AvatarModel;
use crate::trainer::{render_frame, StepLog, TrainError, TrainState};

pub const DIM_PROMPT: &str = "Make the illumination very dim";
pub const RED_SHIRT_PROMPT: &str = "Turn his T-shirt red";
pub const ORACLE_PROMPTS: [&str; 2] = [DIM_PROMPT, RED_SHIRT_PROMPT];
/// Semantic label of the torso in the oracle figure.
pub const TORSO_LABEL: u8 = 1;
pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_UPDATE_PERIOD: u64 = 10;
pub const DEFAULT_MAX_FAILURES: usize = 5;

#[derive(Debug, Error)]
pub enum EditError {
    #[error("unsupported oracle prompt {prompt:?}; supported: {supported:?}")]
    UnsupportedPrompt { prompt: String, supported: Vec<String> },
    #[error("editor failed: {0}")]
    Editor(String),
    #[error("editor protocol: {0}")]
    Protocol(String),
    #[error("edited image is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    Resolution {
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("edit session aborted after {0} consecutive editor failures")]
    Aborted(usize),
    #[error("update period must be at least 1")]
    Period,
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Parameter groups excluded from optimisation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub frozen: BTreeSet<String>,
}

impl FreezeMask {
    /// Validated against the registry; unknown names are rejected with the
    /// list of valid groups.
    pub fn new<S: AsRef<str>>(store: &ParamStore, frozen: &[S]) -> Result<Self, KernelError> {
        let valid: Vec<String> = store.groups().iter().map(|s| s.to_string()).collect();
        let mut set = BTreeSet::new();
        for f in frozen {
            let f = f.as_ref();
            if !valid.iter().any(|v| v == f) {
                return Err(KernelError::UnknownGroup {
                    name: f.to_string(),
                    valid,
                });
            }
            set.insert(f.to_string());
        }
        Ok(Self { frozen: set })
    }

    /// Freezes every group except `unfrozen`.
    pub fn all_except<S: AsRef<str>>(store: &ParamStore, unfrozen: &[S]) -> Result<Self, KernelError> {
        let valid: Vec<String> = store.groups().iter().map(|s| s.to_string()).collect();
        for u in unfrozen {
            if !valid.iter().any(|v| v == u.as_ref()) {
                return Err(KernelError::UnknownGroup {
                    name: u.as_ref().to_string(),
                    valid,
                });
            }
        }
        let frozen: Vec<&String> = valid
            .iter()
            .filter(|v| !unfrozen.iter().any(|u| u.as_ref() == v.as_str()))
            .collect();
        Self::new(store, &frozen)
    }

    pub fn unfrozen(&self, store: &ParamStore) -> Vec<String> {
        store
            .groups()
            .into_iter()
            .filter(|g| !self.frozen.contains(*g))
            .map(str::to_string)
            .collect()
    }
}

/// Installs the mask on the model; frozen groups then enter every tape as
/// constants and are skipped by the optimizer.
pub fn apply_freeze(store: &mut ParamStore, mask: &FreezeMask) -> Result<(), KernelError> {
    let names: Vec<&String> = mask.frozen.iter().collect();
    store.set_frozen(&names)
}

/// Per-group CRC32 of parameter values.
pub fn group_checksums(store: &ParamStore) -> BTreeMap<String, u32> {
    store
        .groups()
        .into_iter()
        .map(|g| (g.to_string(), store.group_checksum(g)))
        .collect()
}

/// Decoded editor input.
#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest {
    pub prompt: String,
    pub frame_id: i64,
    pub render: RgbImage,
    pub original: RgbImage,
    pub labels: LabelMap,
}

/// Protocol v1 request line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub v: u32,
    pub prompt: String,
    pub frame_id: i64,
    pub render_png_b64: String,
    pub original_png_b64: String,
    pub labels_png_b64: String,
}

/// Protocol v1 response line: exactly one of the two payload fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub v: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_png_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EditRequest {
    pub fn to_wire(&self) -> Result<WireRequest, EditError> {
        Ok(WireRequest {
            v: PROTOCOL_VERSION,
            prompt: self.prompt.clone(),
            frame_id: self.frame_id,
            render_png_b64: B64.encode(self.render.encode_png()?),
            original_png_b64: B64.encode(self.original.encode_png()?),
            labels_png_b64: B64.encode(self.labels.encode_png()?),
        })
    }

    pub fn from_wire(w: &WireRequest) -> Result<Self, EditError> {
        if w.v != PROTOCOL_VERSION {
            return Err(EditError::Protocol(format!("unsupported protocol version {}", w.v)));
        }
        let png = |s: &str| B64.decode(s).map_err(|e| EditError::Protocol(e.to_string()));
        Ok(Self {
            prompt: w.prompt.clone(),
            frame_id: w.frame_id,
            render: RgbImage::decode_png(&png(&w.render_png_b64)?)?,
            original: RgbImage::decode_png(&png(&w.original_png_b64)?)?,
            labels: LabelMap::decode_png(&png(&w.labels_png_b64)?)?,
        })
    }
}

impl WireResponse {
    pub fn ok(image: &RgbImage) -> Result<Self, EditError> {
        Ok(Self {
            v: PROTOCOL_VERSION,
            edited_png_b64: Some(B64.encode(image.encode_png()?)),
            error: None,
        })
    }

    pub fn err(message: impl Into<String>) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            edited_png_b64: None,
            error: Some(message.into()),
        }
    }

    pub fn into_image(self) -> Result<RgbImage, EditError> {
        if self.v != PROTOCOL_VERSION {
            return Err(EditError::Protocol(format!("unsupported protocol version {}", self.v)));
        }
        match (self.edited_png_b64, self.error) {
            (_, Some(e)) => Err(EditError::Editor(e)),
            (Some(b), None) => {
                let bytes = B64.decode(b).map_err(|e| EditError::Protocol(e.to_string()))?;
                Ok(RgbImage::decode_png(&bytes)?)
            }
            (None, None) => Err(EditError::Protocol("response has neither image nor error".into())),
        }
    }
}

pub trait Editor: Send {
    fn name(&self) -> String;
    fn edit(&mut self, req: &EditRequest) -> Result<RgbImage, EditError>;
}

/// Multiplies every channel by 0.5.
pub fn dim(image: &RgbImage) -> RgbImage {
    RgbImage {
        width: image.width,
        height: image.height,
        data: image.data.iter().map(|v| v * 0.5).collect(),
    }
}

/// Pixels labelled `label` get a red hue with saturation raised to at
/// least 0.6; value is preserved.
pub fn recolor_red(image: &RgbImage, labels: &LabelMap, label: u8) -> RgbImage {
    let mut out = image.clone();
    for (i, &l) in labels.labels.iter().enumerate() {
        if l != label {
            continue;
        }
        let px = &mut out.data[3 * i..3 * i + 3];
        let [_, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
        px.copy_from_slice(&hsv_to_rgb([0.0, s.max(0.6), v]));
    }
    out
}

/// Deterministic stand-in for an instruction-following image editor. Rules
/// apply to the original frame, so repeated passes do not compound.
#[derive(Clone, Debug, Default)]
pub struct OracleEditor;

impl OracleEditor {
    pub fn check_prompt(prompt: &str) -> Result<(), EditError> {
        if ORACLE_PROMPTS.contains(&prompt) {
            Ok(())
        } else {
            Err(EditError::UnsupportedPrompt {
                prompt: prompt.into(),
                supported: ORACLE_PROMPTS.iter().map(|s| s.to_string()).collect(),
            })
        }
    }
}

/// The oracle rule for one prompt.
pub fn oracle_edit(prompt: &str, image: &RgbImage, labels: &LabelMap) -> Result<RgbImage, EditError> {
    OracleEditor::check_prompt(prompt)?;
    if (labels.width, labels.height) != (image.width, image.height) {
        return Err(EditError::Resolution {
            want_w: image.width,
            want_h: image.height,
            got_w: labels.width,
            got_h: labels.height,
        });
    }
    Ok(if prompt == DIM_PROMPT {
        dim(image)
    } else {
        recolor_red(image, labels, TORSO_LABEL)
    })
}

impl Editor for OracleEditor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn edit(&mut self, req: &EditRequest) -> Result<RgbImage, EditError> {
        oracle_edit(&req.prompt, &req.original, &req.labels)
    }
}

/// Returns the render unchanged (control runs).
#[derive(Clone, Debug, Default)]
pub struct IdentityEditor;

impl Editor for IdentityEditor {
    fn name(&self) -> String {
        "identity".into()
    }

    fn edit(&mut self, req: &EditRequest) -> Result<RgbImage, EditError> {
        Ok(req.render.clone())
    }
}

/// Child process speaking one JSON object per line on stdin/stdout.
pub struct StdioEditor {
    command: String,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl StdioEditor {
    /// Spawns `command` through the shell.
    pub fn spawn(command: &str) -> Result<Self, EditError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            command: command.into(),
            child,
            stdin,
            stdout,
        })
    }
}

impl Editor for StdioEditor {
    fn name(&self) -> String {
        format!("stdio:{}", self.command)
    }

    fn edit(&mut self, req: &EditRequest) -> Result<RgbImage, EditError> {
        let line = serde_json::to_string(&req.to_wire()?).map_err(|e| EditError::Protocol(e.to_string()))?;
        writeln!(self.stdin, "{line}")?;
        self.stdin.flush()?;
        let mut resp = String::new();
        if self.stdout.read_line(&mut resp)? == 0 {
            return Err(EditError::Editor("editor process closed its output".into()));
        }
        let resp: WireResponse = serde_json::from_str(&resp).map_err(|e| EditError::Protocol(e.to_string()))?;
        resp.into_image()
    }
}

impl Drop for StdioEditor {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Editor service reached with `POST {base}/edit`.
pub struct HttpEditor {
    base: String,
    agent: ureq::Agent,
}

impl HttpEditor {
    pub fn new(base: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent,
        }
    }
}

impl Editor for HttpEditor {
    fn name(&self) -> String {
        format!("http:{}", self.base)
    }

    fn edit(&mut self, req: &EditRequest) -> Result<RgbImage, EditError> {
        let body = serde_json::to_string(&req.to_wire()?).map_err(|e| EditError::Protocol(e.to_string()))?;
        let mut resp = self
            .agent
            .post(&format!("{}/edit", self.base))
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| EditError::Editor(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| EditError::Editor(e.to_string()))?;
        let resp: WireResponse = serde_json::from_str(&text).map_err(|e| EditError::Protocol(e.to_string()))?;
        resp.into_image()
    }
}

/// Parses `oracle`, `identity`, `stdio:<command>` or `http:<url>`.
pub fn editor_from_spec(spec: &str) -> Result<Box<dyn Editor>, EditError> {
    if spec == "oracle" {
        Ok(Box::new(OracleEditor))
    } else if spec == "identity" {
        Ok(Box::new(IdentityEditor))
    } else if let Some(cmd) = spec.strip_prefix("stdio:") {
        Ok(Box::new(StdioEditor::spawn(cmd)?))
    } else if let Some(url) = spec.strip_prefix("http:") {
        let url = if url.starts_with("//") { format!("http:{url}") } else { url.to_string() };
        Ok(Box::new(HttpEditor::new(&url)))
    } else {
        Err(EditError::Protocol(format!(
            "unknown editor {spec:?}; use oracle, identity, stdio:<cmd> or http:<url>"
        )))
    }
}

/// One entry of the edit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditEvent {
    pub step: u64,
    pub frame: i64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct EditSession {
    pub prompt: String,
    pub mask: FreezeMask,
    pub editor: Box<dyn Editor>,
    /// Training steps between frame replacements.
    pub period: u64,
    /// Position in `frame_ids` of the next frame to edit.
    pub cursor: usize,
    /// Editable frames, visited cyclically.
    pub frame_ids: Vec<i64>,
    /// Cap on edits per frame; `None` keeps cycling.
    pub max_passes: Option<u32>,
    /// Learning rate during the session; `None` uses the joint-phase rate.
    pub lr: Option<f64>,
    pub max_failures: usize,
    pub consecutive_failures: usize,
    pub passes: BTreeMap<i64, u32>,
    /// Unedited frame colours, kept for editor requests.
    pub originals: BTreeMap<i64, RgbImage>,
    pub events: Vec<EditEvent>,
}

impl EditSession {
    pub fn new(
        prompt: impl Into<String>,
        mask: FreezeMask,
        editor: Box<dyn Editor>,
        period: u64,
        frames: &[&SupervisionFrame],
    ) -> Result<Self, EditError> {
        if period == 0 {
            return Err(EditError::Period);
        }
        Ok(Self {
            prompt: prompt.into(),
            mask,
            editor,
            period,
            cursor: 0,
            frame_ids: frames.iter().map(|f| f.id).collect(),
            max_passes: None,
            lr: None,
            max_failures: DEFAULT_MAX_FAILURES,
            consecutive_failures: 0,
            passes: BTreeMap::new(),
            originals: frames.iter().map(|f| (f.id, f.rgb.clone())).collect(),
            events: Vec::new(),
        })
    }

    fn exhausted(&self) -> bool {
        self.max_passes.is_some_and(|m| {
            self.frame_ids
                .iter()
                .all(|id| self.passes.get(id).copied().unwrap_or(0) >= m)
        })
    }

    /// Renders, edits and replaces the frame at the cursor, then advances.
    /// Editor failures are logged and counted, not propagated, until the
    /// consecutive-failure limit is hit.
    pub fn update_one(
        &mut self,
        model: &AvatarModel,
        frames: &mut [SupervisionFrame],
        step: u64,
    ) -> Result<(), EditError> {
        if self.frame_ids.is_empty() || self.exhausted() {
            return Ok(());
        }
        let id = self.frame_ids[self.cursor];
        self.cursor = (self.cursor + 1) % self.frame_ids.len();
        if self.max_passes.is_some_and(|m| self.passes.get(&id).copied().unwrap_or(0) >= m) {
            return Ok(());
        }
        let Some(frame) = frames.iter_mut().find(|f| f.id == id) else {
            return Ok(());
        };
        let buffers = render_frame(model, frame)?;
        let render = buffers.rgb_image().quantized();
        let labels = LabelMap {
            width: frame.width(),
            height: frame.height(),
            labels: frame.labels.clone().unwrap_or_else(|| buffers.labels()),
        };
        let original = self.originals.get(&id).cloned().unwrap_or_else(|| frame.rgb.clone());
        let req = EditRequest {
            prompt: self.prompt.clone(),
            frame_id: id,
            render,
            original: original.quantized(),
            labels,
        };
        let result = self.editor.edit(&req).and_then(|img| {
            if (img.width, img.height) != (frame.width(), frame.height()) {
                Err(EditError::Resolution {
                    want_w: frame.width(),
                    want_h: frame.height(),
                    got_w: img.width,
                    got_h: img.height,
                })
            } else {
                Ok(img)
            }
        });
        match result {
            Ok(img) => {
                frame.rgb = img;
                frame.provenance = Provenance::Edited;
                *self.passes.entry(id).or_insert(0) += 1;
                self.consecutive_failures = 0;
                self.events.push(EditEvent {
                    step,
                    frame: id,
                    ok: true,
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("edit of frame {id} failed: {e}");
                self.consecutive_failures += 1;
                self.events.push(EditEvent {
                    step,
                    frame: id,
                    ok: false,
                    error: Some(e.to_string()),
                });
                if self.consecutive_failures >= self.max_failures {
                    return Err(EditError::Aborted(self.consecutive_failures));
                }
            }
        }
        Ok(())
    }
}

/// Runs `steps` training steps with periodic frame replacement. The mask
/// is applied first; `frames` holds the whole dataset and `train_ids`
/// selects what is trained on.
pub fn iterative_dataset_update(
    session: &mut EditSession,
    state: &mut TrainState,
    frames: &mut [SupervisionFrame],
    train_ids: &[i64],
    steps: u64,
) -> Result<Vec<StepLog>, EditError> {
    apply_freeze(&mut state.model.store, &session.mask)?;
    let saved = (state.config.lr_warmup, state.config.lr_joint);
    if let Some(lr) = session.lr {
        state.config.lr_warmup = lr;
        state.config.lr_joint = lr;
    }
    let result = (|| {
        let mut logs = Vec::with_capacity(steps as usize);
        for k in 0..steps {
            if k % session.period == 0 {
                session.update_one(&state.model, frames, state.step)?;
            }
            let train: Vec<&SupervisionFrame> = frames.iter().filter(|f| train_ids.contains(&f.id)).collect();
            logs.push(state.train_step(&train)?);
        }
        Ok(logs)
    })();
    (state.config.lr_warmup, state.config.lr_joint) = saved;
    result
}

/// Albedo over a `res x res` UV grid for each semantic class, with a
/// one-hot class distribution. Returns `[classes][res*res*3]`.
pub fn export_albedo_atlas(model: &AvatarModel, res: usize) -> Result<Vec<Vec<f32>>, KernelError> {
    let c = model.classes();
    let n = res * res;
    let mut out = Vec::with_capacity(c);
    for class in 0..c {
        let mut g = Graph::<f32>::new();
        let coord = |i: usize| (i as f32 + 0.5) / res as f32;
        let u = g.constant(Tensor::new(vec![n, 1], (0..n).map(|i| coord(i % res)).collect())?)?;
        let v = g.constant(Tensor::new(vec![n, 1], (0..n).map(|i| coord(i / res)).collect())?)?;
        let mut s = vec![0.0f32; n * c];
        for r in 0..n {
            s[r * c + class] = 1.0;
        }
        let s = g.constant(Tensor::new(vec![n, c], s)?)?;
        let t = model.texture.feature(&mut g, &model.store, u, v, s)?;
        let a = model.texture.albedo(&mut g, &model.store, t)?;
        out.push(g.value(a).data().to_vec());
    }
    Ok(out)
}
