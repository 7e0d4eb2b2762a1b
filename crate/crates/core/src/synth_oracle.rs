//! Procedural ground truth: an articulated capsule figure with a known UV
//! atlas, a smooth procedural albedo and a directional Lambertian light.
//!
//! Kinematics, cameras and intersection here are written against nalgebra
//! directly and do not touch the neural renderer, so every comparison
//! against this module is a comparison between independent implementations.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Isometry3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetMeta;
use crate::imageio::{GrayImage, ImageError, LabelMap, RawBuffer, RgbImage};
use crate::rig::{Capsule, Pose, PoseSequence, RigError, Skeleton};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid oracle config: {0}")]
    Config(String),
}

/// Axis-aligned rectangle `[u0,u1] x [v0,v1]` inside the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub u0: f64,
    pub u1: f64,
    pub v0: f64,
    pub v1: f64,
}

impl Chart {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u0 && u <= self.u1 && v >= self.v0 && v <= self.v1
    }

    fn map(&self, s: f64, t: f64) -> (f64, f64) {
        (self.u0 + s * (self.u1 - self.u0), self.v0 + t * (self.v1 - self.v0))
    }

    fn local(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.u0) / (self.u1 - self.u0), (v - self.v0) / (self.v1 - self.v0))
    }

    fn overlaps(&self, o: &Chart) -> bool {
        self.u0 < o.u1 && o.u0 < self.u1 && self.v0 < o.v1 && o.v0 < self.v1
    }
}

/// Smooth per-part albedo: a base colour modulated by a low-frequency wave
/// over the part's local chart coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartTexture {
    pub base: [f64; 3],
    pub amplitude: f64,
    pub freq_s: f64,
    pub freq_t: f64,
    pub phase: f64,
}

impl PartTexture {
    pub fn albedo(&self, s: f64, t: f64) -> [f64; 3] {
        let w = (2.0 * PI * (self.freq_s * s + self.freq_t * t) + self.phase).cos();
        let k = 1.0 + self.amplitude * w;
        self.base.map(|c| (c * k).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFigure {
    pub skeleton: Skeleton,
    pub charts: Vec<Chart>,
    pub textures: Vec<PartTexture>,
    /// Unit direction toward the light.
    pub light: [f64; 3],
    pub k_diffuse: f64,
    pub k_ambient: f64,
}

/// `k_a * albedo + k_d * max(0, n.l) * albedo`.
pub fn lambertian(albedo: [f64; 3], normal: [f64; 3], light: [f64; 3], k_d: f64, k_a: f64) -> [f64; 3] {
    let ndl = (normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2]).max(0.0);
    albedo.map(|a| k_a * a + k_d * ndl * a)
}

impl OracleFigure {
    /// Six capsules on a 3x2 atlas grid with gaps between charts.
    pub fn six_part(seed: u64) -> Self {
        let skeleton = Skeleton::six_part();
        let gap = 0.02;
        let charts = (0..6)
            .map(|k| {
                let (i, j) = ((k % 3) as f64, (k / 3) as f64);
                Chart {
                    u0: i / 3.0 + gap,
                    u1: (i + 1.0) / 3.0 - gap,
                    v0: j / 2.0 + gap,
                    v1: (j + 1.0) / 2.0 - gap,
                }
            })
            .collect();
        let bases = [
            [0.2, 0.35, 0.75],
            [0.85, 0.68, 0.55],
            [0.3, 0.65, 0.35],
            [0.8, 0.72, 0.25],
            [0.45, 0.35, 0.3],
            [0.55, 0.35, 0.65],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let textures = bases
            .iter()
            .map(|b| PartTexture {
                base: b.map(|c| c + rng.gen_range(-0.04..0.04)),
                amplitude: rng.gen_range(0.15..0.3),
                freq_s: rng.gen_range(1..=2) as f64,
                freq_t: rng.gen_range(0..=1) as f64,
                phase: rng.gen_range(0.0..2.0 * PI),
            })
            .collect();
        let l = Vector3::new(0.8, 0.45, 0.4).normalize();
        Self {
            skeleton,
            charts,
            textures,
            light: [l.x, l.y, l.z],
            k_diffuse: 0.8,
            k_ambient: 0.2,
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let j = self.skeleton.len();
        if self.charts.len() != j || self.textures.len() != j {
            return Err(OracleError::Config("one chart and texture per bone required".into()));
        }
        for (a, ca) in self.charts.iter().enumerate() {
            for cb in &self.charts[a + 1..] {
                if ca.overlaps(cb) {
                    return Err(OracleError::Config("uv charts overlap".into()));
                }
            }
        }
        let n = (self.light[0].powi(2) + self.light[1].powi(2) + self.light[2].powi(2)).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(OracleError::Config("light direction must be unit".into()));
        }
        Ok(())
    }

    /// Semantic classes including background.
    pub fn classes(&self) -> usize {
        self.skeleton.len() + 1
    }

    /// Local chart coordinates of a canonical point on bone `k`'s capsule:
    /// axial position including the caps, and the folded angle around the
    /// axis (mirror-symmetric, so there is no seam).
    pub fn chart_coords(&self, k: usize, p: [f64; 3]) -> (f64, f64) {
        let c = &self.skeleton.joints()[k].capsule;
        let a = Vector3::from(c.a);
        let axis = Vector3::from(c.b) - a;
        let len = axis.norm();
        let dir = axis / len;
        let rel = Vector3::from(p) - a;
        let h = rel.dot(&dir);
        let s = ((h + c.radius) / (len + 2.0 * c.radius)).clamp(0.0, 1.0);
        let helper = if dir.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        let e1 = dir.cross(&helper).normalize();
        let e2 = dir.cross(&e1);
        let radial = rel - dir * h;
        let phi = radial.dot(&e2).atan2(radial.dot(&e1));
        (s, phi.abs() / PI)
    }

    pub fn uv(&self, k: usize, p: [f64; 3]) -> (f64, f64) {
        let (s, t) = self.chart_coords(k, p);
        self.charts[k].map(s, t)
    }

    pub fn albedo_at(&self, k: usize, p: [f64; 3]) -> [f64; 3] {
        let (s, t) = self.chart_coords(k, p);
        self.textures[k].albedo(s, t)
    }

    /// Albedo looked up by atlas coordinates; `None` outside every chart.
    pub fn albedo_uv(&self, u: f64, v: f64) -> Option<(usize, [f64; 3])> {
        self.charts.iter().position(|c| c.contains(u, v)).map(|k| {
            let (s, t) = self.charts[k].local(u, v);
            (k, self.textures[k].albedo(s, t))
        })
    }

    /// Bone-to-world isometries mapping canonical points of bone `k` into
    /// the posed figure.
    pub fn bone_isometries(&self, pose: &Pose) -> Result<Vec<Isometry3<f64>>, OracleError> {
        let joints = self.skeleton.joints();
        if pose.rotations.len() != joints.len() {
            return Err(RigError::JointCount {
                expected: joints.len(),
                got: pose.rotations.len(),
            }
            .into());
        }
        let mut world: Vec<Isometry3<f64>> = Vec::with_capacity(joints.len());
        let mut rest: Vec<Vector3<f64>> = Vec::with_capacity(joints.len());
        for (j, joint) in joints.iter().enumerate() {
            let local_rot = UnitQuaternion::from_scaled_axis(Vector3::from(pose.rotations[j]));
            let off = Vector3::from(joint.offset);
            let (w, r) = match joint.parent {
                None => (
                    Isometry3::from_parts(Translation3::from(off + Vector3::from(pose.root_translation)), local_rot),
                    off,
                ),
                Some(p) => (
                    world[p] * Isometry3::from_parts(Translation3::from(off), local_rot),
                    rest[p] + off,
                ),
            };
            world.push(w);
            rest.push(r);
        }
        Ok(world
            .iter()
            .zip(&rest)
            .map(|(w, r)| w * Translation3::from(-r))
            .collect())
    }
}

/// Closest positive hit of a ray with a capsule, as ray parameter and
/// outward normal.
pub fn intersect_capsule(c: &Capsule, o: Vector3<f64>, d: Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let pa = Vector3::from(c.a);
    let pb = Vector3::from(c.b);
    let r = c.radius;
    let ba = pb - pa;
    let oa = o - pa;
    let baba = ba.dot(&ba);
    let bard = ba.dot(&d);
    let baoa = ba.dot(&oa);
    let rdoa = d.dot(&oa);
    let oaoa = oa.dot(&oa);
    let a = baba - bard * bard;
    let b = baba * rdoa - baoa * bard;
    let cc = baba * oaoa - baoa * baoa - r * r * baba;
    let mut best: Option<f64> = None;
    if a.abs() > 1e-14 {
        let h = b * b - a * cc;
        if h >= 0.0 {
            let t = (-b - h.sqrt()) / a;
            let y = baoa + t * bard;
            if y > 0.0 && y < baba && t > 0.0 {
                best = Some(t);
            }
        }
    }
    if best.is_none() {
        // Caps.
        for center in [pa, pb] {
            let oc = o - center;
            let b = d.dot(&oc);
            let h = b * b - (oc.dot(&oc) - r * r);
            if h >= 0.0 {
                let t = -b - h.sqrt();
                if t > 0.0 && best.is_none_or(|bt| t < bt) {
                    best = Some(t);
                }
            }
        }
    }
    let t = best?;
    let p = o + d * t;
    let h = ((p - pa).dot(&ba) / baba).clamp(0.0, 1.0);
    let n = (p - (pa + ba * h)) / r;
    Some((t, n.normalize()))
}

/// Pinhole camera in the on-disk `cameras.json` schema: world-to-camera
/// rotation (row-major) and translation, pixel-unit intrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: i64,
    pub camera: CameraRecord,
}

pub fn load_cameras(path: &Path) -> Result<Vec<FrameRecord>, OracleError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Looking at `target` from an orbit position.
pub fn oracle_camera(width: u32, height: u32, focal: f64, yaw: f64, pitch: f64, distance: f64, target: [f64; 3]) -> CameraRecord {
    let t = Vector3::from(target);
    let eye = t + Vector3::new(pitch.cos() * yaw.sin(), pitch.sin(), pitch.cos() * yaw.cos()) * distance;
    let z = (t - eye).normalize();
    let x = z.cross(&Vector3::y()).normalize();
    let y = z.cross(&x);
    let rot = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]));
    let tr = -(rot * eye);
    let m = rot.matrix();
    CameraRecord {
        width,
        height,
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        rotation: [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ],
        translation: [tr.x, tr.y, tr.z],
    }
}

/// Ground-truth supervision for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleFrame {
    pub rgb: RgbImage,
    pub mask: Vec<f32>,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    /// Bone index + 1, 0 for background.
    pub labels: Vec<u8>,
}

/// First surface hit along a world ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    pub bone: usize,
    pub t: f64,
    pub world: [f64; 3],
    pub canonical: [f64; 3],
    pub normal: [f64; 3],
}

fn camera_ray(cam: &CameraRecord, x: f64, y: f64) -> (Vector3<f64>, Vector3<f64>) {
    let r = nalgebra::Matrix3::from_fn(|i, j| cam.rotation[i][j]);
    let t = Vector3::from(cam.translation);
    let origin = -(r.transpose() * t);
    let dc = Vector3::new((x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0).normalize();
    (origin, r.transpose() * dc)
}

pub fn trace(figure: &OracleFigure, bones: &[Isometry3<f64>], o: Vector3<f64>, d: Vector3<f64>) -> Option<SurfaceHit> {
    let mut best: Option<SurfaceHit> = None;
    for (k, iso) in bones.iter().enumerate() {
        let inv = iso.inverse();
        let lo = inv * Point3::from(o);
        let ld = inv * d;
        let cap = &figure.skeleton.joints()[k].capsule;
        if let Some((t, n)) = intersect_capsule(cap, lo.coords, ld) {
            if best.is_none_or(|b| t < b.t) {
                let pc = lo.coords + ld * t;
                let pw = o + d * t;
                let nw = iso.rotation * n;
                best = Some(SurfaceHit {
                    bone: k,
                    t,
                    world: [pw.x, pw.y, pw.z],
                    canonical: [pc.x, pc.y, pc.z],
                    normal: [nw.x, nw.y, nw.z],
                });
            }
        }
    }
    best
}

/// Analytic render: closest capsule hit per pixel centre.
pub fn render_ground_truth(figure: &OracleFigure, camera: &CameraRecord, pose: &Pose) -> Result<OracleFrame, OracleError> {
    let bones = figure.bone_isometries(pose)?;
    let (w, h) = (camera.width, camera.height);
    let n = (w * h) as usize;
    let mut out = OracleFrame {
        rgb: RgbImage::new(w, h, [1.0; 3]),
        mask: vec![0.0; n],
        u: vec![0.0; n],
        v: vec![0.0; n],
        labels: vec![0; n],
    };
    for y in 0..h {
        for x in 0..w {
            let (o, d) = camera_ray(camera, x as f64 + 0.5, y as f64 + 0.5);
            let Some(hit) = trace(figure, &bones, o, d) else { continue };
            let i = (y * w + x) as usize;
            let albedo = figure.albedo_at(hit.bone, hit.canonical);
            let c = lambertian(albedo, hit.normal, figure.light, figure.k_diffuse, figure.k_ambient);
            out.rgb.set(x, y, c.map(|v| v as f32));
            let (u, v) = figure.uv(hit.bone, hit.canonical);
            out.u[i] = u as f32;
            out.v[i] = v as f32;
            out.mask[i] = 1.0;
            out.labels[i] = (hit.bone + 1) as u8;
        }
    }
    Ok(out)
}

/// Hit for an arbitrary image position; used to track surface points.
pub fn trace_pixel(figure: &OracleFigure, camera: &CameraRecord, pose: &Pose, x: f64, y: f64) -> Result<Option<SurfaceHit>, OracleError> {
    let bones = figure.bone_isometries(pose)?;
    let (o, d) = camera_ray(camera, x, y);
    Ok(trace(figure, &bones, o, d))
}

/// Procedural limb motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnimationSpec {
    /// Full motion cycles over the sequence.
    pub cycles: f64,
    pub root_yaw: f64,
    pub arm_swing: f64,
    pub leg_swing: f64,
    pub head_nod: f64,
    pub bob: f64,
}

impl Default for AnimationSpec {
    fn default() -> Self {
        Self {
            cycles: 3.0,
            root_yaw: 0.6,
            arm_swing: 0.6,
            leg_swing: 0.45,
            head_nod: 0.2,
            bob: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitSpec {
    pub distance: f64,
    /// Degrees above the horizon.
    pub pitch_deg: f64,
    pub yaw_start_deg: f64,
    pub revolutions: f64,
    pub target: [f64; 3],
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            distance: 3.0,
            pitch_deg: 8.0,
            yaw_start_deg: 0.0,
            revolutions: 1.0,
            target: [0.0, 0.05, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleDatasetConfig {
    pub seed: u64,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub fps: f64,
    pub orbit: OrbitSpec,
    pub animation: AnimationSpec,
    /// Every n-th frame (id % n == n-1) is held out as a novel pose.
    pub holdout_every: usize,
    /// Novel-view cameras: yaw offset from the training camera and pitch.
    pub novel_view_yaw_offset_deg: f64,
    pub novel_view_pitch_deg: f64,
    /// Number of training poses re-rendered from the novel-view cameras.
    pub novel_view_frames: usize,
}

impl Default for OracleDatasetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            frames: 60,
            width: 64,
            height: 64,
            focal: 90.0,
            fps: 30.0,
            orbit: OrbitSpec::default(),
            animation: AnimationSpec::default(),
            holdout_every: 5,
            novel_view_yaw_offset_deg: 45.0,
            novel_view_pitch_deg: 18.0,
            novel_view_frames: 12,
        }
    }
}

impl OracleDatasetConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.frames == 0 {
            return Err(OracleError::Config("frames must be at least 1".into()));
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) || !(self.fps > 0.0) {
            return Err(OracleError::Config("resolution, focal and fps must be positive".into()));
        }
        if self.holdout_every < 2 {
            return Err(OracleError::Config("holdout_every must be at least 2".into()));
        }
        Ok(())
    }

    pub fn is_held_out(&self, id: i64) -> bool {
        id.rem_euclid(self.holdout_every as i64) == self.holdout_every as i64 - 1
    }

    pub fn pose(&self, id: i64) -> Pose {
        let a = &self.animation;
        let phase = 2.0 * PI * a.cycles * id as f64 / self.frames as f64;
        let (s, c) = phase.sin_cos();
        let mut rotations = vec![[0.0; 3]; 6];
        rotations[0] = [0.0, a.root_yaw * s, 0.0];
        rotations[1] = [a.head_nod * (2.0 * phase).sin(), 0.0, 0.0];
        rotations[2] = [0.0, 0.4 * a.arm_swing * c, a.arm_swing * s];
        rotations[3] = [0.0, -0.4 * a.arm_swing * c, a.arm_swing * s];
        rotations[4] = [a.leg_swing * s, 0.0, 0.0];
        rotations[5] = [-a.leg_swing * s, 0.0, 0.0];
        Pose {
            frame: id,
            root_translation: [0.0, a.bob * (2.0 * phase).sin(), 0.0],
            rotations,
        }
    }

    pub fn camera(&self, id: i64) -> CameraRecord {
        let o = &self.orbit;
        let yaw = o.yaw_start_deg.to_radians() + 2.0 * PI * o.revolutions * id as f64 / self.frames as f64;
        oracle_camera(self.width, self.height, self.focal, yaw, o.pitch_deg.to_radians(), o.distance, o.target)
    }

    pub fn novel_view_camera(&self, id: i64) -> CameraRecord {
        let o = &self.orbit;
        let yaw = o.yaw_start_deg.to_radians()
            + 2.0 * PI * o.revolutions * id as f64 / self.frames as f64
            + self.novel_view_yaw_offset_deg.to_radians();
        oracle_camera(
            self.width,
            self.height,
            self.focal,
            yaw,
            self.novel_view_pitch_deg.to_radians(),
            o.distance,
            o.target,
        )
    }

    /// Training frame ids re-rendered for the novel-view split, spread
    /// evenly over the sequence.
    pub fn novel_view_ids(&self) -> Vec<i64> {
        let train: Vec<i64> = (0..self.frames as i64).filter(|&i| !self.is_held_out(i)).collect();
        let k = self.novel_view_frames.min(train.len()).max(1);
        (0..k).map(|i| train[i * train.len() / k]).collect()
    }
}

fn write_split(dir: &Path, figure: &OracleFigure, fps: f64, frames: &[(i64, CameraRecord, Pose)]) -> Result<(), OracleError> {
    for sub in ["frames", "masks", "uvs", "semantics"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let mut cams = Vec::with_capacity(frames.len());
    for (id, cam, pose) in frames {
        let f = render_ground_truth(figure, cam, pose)?;
        let name = format!("{id:06}");
        f.rgb.save_png(&dir.join("frames").join(format!("{name}.png")))?;
        let mask = GrayImage {
            width: cam.width,
            height: cam.height,
            data: f.mask.clone(),
        };
        std::fs::write(dir.join("masks").join(format!("{name}.png")), mask.encode_png()?)?;
        let uv = RawBuffer {
            width: cam.width,
            height: cam.height,
            channels: 2,
            data: f.u.iter().zip(&f.v).flat_map(|(&u, &v)| [u, v]).collect(),
        };
        uv.save(&dir.join("uvs").join(format!("{name}.bin")))?;
        let labels = LabelMap {
            width: cam.width,
            height: cam.height,
            labels: f.labels.clone(),
        };
        std::fs::write(dir.join("semantics").join(format!("{name}.png")), labels.encode_png()?)?;
        cams.push(FrameRecord {
            id: *id,
            camera: cam.clone(),
        });
    }
    std::fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&cams)?)?;
    let seq = PoseSequence {
        fps,
        poses: frames.iter().map(|f| f.2.clone()).collect(),
    };
    crate::rig::save_pose_sequence(&seq, &dir.join("poses.json"))?;
    Ok(())
}

/// Writes the training sequence at `out` and the novel-view split at
/// `out/novel_view`. Deterministic for a fixed config.
pub fn generate_dataset(config: &OracleDatasetConfig, out: &Path) -> Result<DatasetMeta, OracleError> {
    config.validate()?;
    let figure = OracleFigure::six_part(config.seed);
    figure.validate()?;
    let ids: Vec<i64> = (0..config.frames as i64).collect();
    let main: Vec<(i64, CameraRecord, Pose)> = ids.iter().map(|&i| (i, config.camera(i), config.pose(i))).collect();
    write_split(out, &figure, config.fps, &main)?;
    let novel: Vec<(i64, CameraRecord, Pose)> = config
        .novel_view_ids()
        .into_iter()
        .map(|i| (i, config.novel_view_camera(i), config.pose(i)))
        .collect();
    write_split(&out.join("novel_view"), &figure, config.fps, &novel)?;
    let meta = DatasetMeta {
        classes: figure.classes(),
        train: ids.iter().copied().filter(|&i| !config.is_held_out(i)).collect(),
        novel_pose: ids.iter().copied().filter(|&i| config.is_held_out(i)).collect(),
        background: [1.0; 3],
    };
    std::fs::write(out.join("dataset.json"), serde_json::to_string_pretty(&meta)?)?;
    std::fs::write(out.join("skeleton.json"), serde_json::to_string_pretty(&figure.skeleton)?)?;
    std::fs::write(out.join("figure.json"), serde_json::to_string_pretty(&figure)?)?;
    std::fs::write(out.join("oracle.json"), serde_json::to_string_pretty(config)?)?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambertian_closed_form() {
        let l = [0.0, 0.0, 1.0];
        assert_eq!(lambertian([1.0; 3], l, l, 0.8, 0.2), [1.0; 3]);
        let back = lambertian([0.5, 0.25, 1.0], [0.0, 0.0, -1.0], l, 0.8, 0.2);
        assert_eq!(back, [0.2 * 0.5, 0.2 * 0.25, 0.2 * 1.0]);
    }

    #[test]
    fn charts_are_disjoint_and_light_is_unit() {
        OracleFigure::six_part(3).validate().unwrap();
    }

    #[test]
    fn capsule_hit_side_and_cap() {
        let c = Capsule {
            a: [0.0, 0.0, 0.0],
            b: [0.0, 1.0, 0.0],
            radius: 0.25,
        };
        let (t, n) = intersect_capsule(&c, Vector3::new(0.0, 0.5, 3.0), Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert!((t - 2.75).abs() < 1e-12);
        assert!((n - Vector3::z()).norm() < 1e-12);
        let (t, n) = intersect_capsule(&c, Vector3::new(0.0, 3.0, 0.0), Vector3::new(0.0, -1.0, 0.0)).unwrap();
        assert!((t - 1.75).abs() < 1e-12);
        assert!((n - Vector3::y()).norm() < 1e-12);
        assert!(intersect_capsule(&c, Vector3::new(1.0, 0.5, 3.0), Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn emitted_uvs_lie_in_hit_chart() {
        let cfg = OracleDatasetConfig {
            width: 32,
            height: 32,
            focal: 45.0,
            ..Default::default()
        };
        let fig = OracleFigure::six_part(cfg.seed);
        for id in [0, 7, 13] {
            let f = render_ground_truth(&fig, &cfg.camera(id), &cfg.pose(id)).unwrap();
            let mut hits = 0;
            for i in 0..f.labels.len() {
                if f.labels[i] > 0 {
                    hits += 1;
                    let chart = fig.charts[f.labels[i] as usize - 1];
                    assert!(chart.contains(f.u[i] as f64, f.v[i] as f64));
                }
            }
            assert!(hits > 50, "figure visible in frame {id}");
        }
    }

    #[test]
    fn rest_bones_are_identity() {
        let fig = OracleFigure::six_part(1);
        for iso in fig.bone_isometries(&Pose::rest(6)).unwrap() {
            let p = iso * Point3::new(0.3, -0.2, 0.1);
            assert!((p.coords - Vector3::new(0.3, -0.2, 0.1)).norm() < 1e-12);
        }
    }
}
