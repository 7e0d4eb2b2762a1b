//! On-disk sequences: frames, masks, optional UV and semantic labels,
//! cameras and poses.
//!
//! Layout of a sequence directory:
//!
//! ```text
//! frames/000000.png      RGB
//! masks/000000.png       grayscale foreground
//! uvs/000000.bin         raw buffer, channels u, v      (optional)
//! semantics/000000.png   indexed class labels            (optional)
//! cameras.json           [{"id", "camera"}]
//! poses.json             pose sequence
//! skeleton.json          joint tree
//! dataset.json           classes and splits               (optional)
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageio::{GrayImage, ImageError, LabelMap, RawBuffer, RgbImage};
use crate::renderer::Camera;
use crate::rig::{load_pose_sequence, Pose, RigError, Skeleton};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: ImageError },
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error("json at {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("frame {frame}: {message}")]
    Frame { frame: i64, message: String },
    #[error("dataset: {0}")]
    Invalid(String),
}

/// Class count and frame-id splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub classes: usize,
    pub train: Vec<i64>,
    /// Frames whose poses never appear in training.
    pub novel_pose: Vec<i64>,
    pub background: [f64; 3],
}

/// Where a frame's colour came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Edited,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionFrame {
    pub id: i64,
    pub rgb: RgbImage,
    /// Foreground in `[0,1]`, one value per pixel.
    pub mask: Vec<f32>,
    pub uv: Option<(Vec<f32>, Vec<f32>)>,
    pub labels: Option<Vec<u8>>,
    pub camera: Camera,
    pub pose: Pose,
    pub provenance: Provenance,
}

impl SupervisionFrame {
    pub fn width(&self) -> u32 {
        self.rgb.width
    }

    pub fn height(&self) -> u32 {
        self.rgb.height
    }

    /// Mask grown by `radius` pixels (square neighbourhood).
    pub fn dilated_mask(&self, radius: u32) -> Vec<bool> {
        let (w, h) = (self.width() as i64, self.height() as i64);
        let r = radius as i64;
        let mut out = vec![false; self.mask.len()];
        for y in 0..h {
            for x in 0..w {
                if self.mask[(y * w + x) as usize] < 0.5 {
                    continue;
                }
                for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                        out[(yy * w + xx) as usize] = true;
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Deserialize)]
struct CameraEntry {
    id: i64,
    camera: Camera,
}

pub struct Dataset {
    pub root: PathBuf,
    pub skeleton: Skeleton,
    pub meta: DatasetMeta,
    pub fps: f64,
    pub frames: Vec<SupervisionFrame>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn image_err(path: &Path) -> impl FnOnce(ImageError) -> DatasetError + '_ {
    move |source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, DatasetError> {
    std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Dataset {
    /// Loads a sequence. `skeleton.json` is looked up in `dir`, then in its
    /// parent, so held-out splits stored in subdirectories load directly.
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let skel_path = [dir.join("skeleton.json"), dir.join("../skeleton.json")]
            .into_iter()
            .find(|p| p.exists())
            .ok_or_else(|| DatasetError::Invalid(format!("no skeleton.json in {}", dir.display())))?;
        let skeleton: Skeleton = read_json(&skel_path)?;
        let seq = load_pose_sequence(&dir.join("poses.json"))?;
        seq.validate_for(&skeleton)?;
        let cams: Vec<CameraEntry> = read_json(&dir.join("cameras.json"))?;
        let mut frames = Vec::with_capacity(cams.len());
        for entry in cams {
            let pose = seq.find(entry.id).cloned().ok_or_else(|| DatasetError::Frame {
                frame: entry.id,
                message: "no pose for camera entry".into(),
            })?;
            frames.push(load_frame(dir, entry.id, entry.camera, pose)?);
        }
        if frames.is_empty() {
            return Err(DatasetError::Invalid(format!("no frames in {}", dir.display())));
        }
        let meta_path = dir.join("dataset.json");
        let meta = if meta_path.exists() {
            read_json(&meta_path)?
        } else {
            DatasetMeta {
                classes: skeleton.len() + 1,
                train: frames.iter().map(|f| f.id).collect(),
                novel_pose: Vec::new(),
                background: [1.0; 3],
            }
        };
        Ok(Self {
            root: dir.to_path_buf(),
            skeleton,
            meta,
            fps: seq.fps,
            frames,
        })
    }

    pub fn frame(&self, id: i64) -> Option<&SupervisionFrame> {
        self.frames.iter().find(|f| f.id == id)
    }

    pub fn frame_mut(&mut self, id: i64) -> Option<&mut SupervisionFrame> {
        self.frames.iter_mut().find(|f| f.id == id)
    }

    pub fn training_frames(&self) -> Vec<&SupervisionFrame> {
        self.frames.iter().filter(|f| self.meta.train.contains(&f.id)).collect()
    }

    pub fn novel_pose_frames(&self) -> Vec<&SupervisionFrame> {
        self.frames.iter().filter(|f| self.meta.novel_pose.contains(&f.id)).collect()
    }
}

fn load_frame(dir: &Path, id: i64, camera: Camera, pose: Pose) -> Result<SupervisionFrame, DatasetError> {
    camera.validate().map_err(|e| DatasetError::Frame {
        frame: id,
        message: e.to_string(),
    })?;
    let name = format!("{id:06}");
    let rgb_path = dir.join("frames").join(format!("{name}.png"));
    let rgb = RgbImage::load_png(&rgb_path).map_err(image_err(&rgb_path))?;
    if (rgb.width, rgb.height) != (camera.width, camera.height) {
        return Err(DatasetError::Frame {
            frame: id,
            message: format!(
                "image is {}x{}, camera is {}x{}",
                rgb.width, rgb.height, camera.width, camera.height
            ),
        });
    }
    let n = rgb.pixels();
    let mask_path = dir.join("masks").join(format!("{name}.png"));
    let mask = GrayImage::decode_png(&read_bytes(&mask_path)?).map_err(image_err(&mask_path))?;
    if mask.data.len() != n {
        return Err(DatasetError::Frame {
            frame: id,
            message: "mask size differs from image".into(),
        });
    }
    let uv_path = dir.join("uvs").join(format!("{name}.bin"));
    let uv = if uv_path.exists() {
        let raw = RawBuffer::load(&uv_path).map_err(image_err(&uv_path))?;
        if raw.channels != 2 || raw.data.len() != 2 * n {
            return Err(DatasetError::Frame {
                frame: id,
                message: "uv buffer must hold 2 channels at image size".into(),
            });
        }
        Some((raw.channel(0), raw.channel(1)))
    } else {
        None
    };
    let sem_path = dir.join("semantics").join(format!("{name}.png"));
    let labels = if sem_path.exists() {
        let map = LabelMap::decode_png(&read_bytes(&sem_path)?).map_err(image_err(&sem_path))?;
        if map.labels.len() != n {
            return Err(DatasetError::Frame {
                frame: id,
                message: "semantic map size differs from image".into(),
            });
        }
        Some(map.labels)
    } else {
        None
    };
    Ok(SupervisionFrame {
        id,
        rgb,
        mask: mask.data,
        uv,
        labels,
        camera,
        pose,
        provenance: Provenance::Original,
    })
}
