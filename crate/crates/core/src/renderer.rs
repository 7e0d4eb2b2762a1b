//! Pinhole cameras, ray sampling, volume compositing of U/V/S/alpha and the
//! per-pixel texture stage that turns composited buffers into colour.
//!
//! Cameras follow the OpenCV convention: `x_cam = R x_world + t`, the camera
//! looks down `+z`, `x` points right and `y` down. Pixel `(i, j)` has its
//! centre at image coordinates `(i + 0.5, j + 0.5)`.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkernel::{CustomOp, Graph, KernelError, Real, Tensor, Unary, Var};
use crate::imageio::{ImageError, RawBuffer, RgbImage};
use crate::model::AvatarModel;
use crate::rig::{
    corrected_rotations_on_graph, forward_kinematics_on_graph, skinning_transforms, Capsule,
    GraphTransforms, Pose, PoseSequence, RigError,
};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    OutOfBounds { x: f64, y: f64, width: u32, height: u32 },
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("samples on ray {ray} are not depth-ordered")]
    Unordered { ray: usize },
    #[error("buffer layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    /// Samples farther than this from every posed capsule are skipped.
    pub cull_margin: f64,
    pub background: [f64; 3],
    /// Rays per tape when rendering whole images.
    pub chunk_rays: usize,
    /// Smoothing used when renormalizing composited semantics.
    pub semantic_epsilon: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 48,
            cull_margin: 0.08,
            background: [1.0; 3],
            chunk_rays: 512,
            semantic_epsilon: 1e-3,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.samples_per_ray == 0 || self.chunk_rays == 0 {
            return Err("render.samples_per_ray and render.chunk_rays must be positive".into());
        }
        if !(self.cull_margin > 0.0) || !(self.semantic_epsilon > 0.0) {
            return Err("render.cull_margin and render.semantic_epsilon must be positive".into());
        }
        Ok(())
    }
}

pub const DEFAULT_NEAR: f64 = 0.05;
pub const DEFAULT_FAR: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RenderError::Camera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::Camera("empty image".into()));
        }
        let r = self.rotation;
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot(r[a], r[b]) - want).abs() > 1e-6 {
                    return Err(RenderError::Camera("rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` with world `up` pointing up in the image.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
    ) -> Result<Self, RenderError> {
        let z = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let rotation = [x, y, z];
        let translation = [-dot(x, eye), -dot(y, eye), -dot(z, eye)];
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera on a sphere around `target`. Yaw 0 looks from `+z`; positive
    /// pitch raises the camera.
    pub fn orbit(
        width: u32,
        height: u32,
        focal: f64,
        yaw: f64,
        pitch: f64,
        distance: f64,
        target: [f64; 3],
    ) -> Result<Self, RenderError> {
        if !(distance > 0.0) {
            return Err(RenderError::Camera("orbit distance must be positive".into()));
        }
        let eye = [
            target[0] + distance * pitch.cos() * yaw.sin(),
            target[1] + distance * pitch.sin(),
            target[2] + distance * pitch.cos() * yaw.cos(),
        ];
        Self::look_at(
            width,
            height,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            eye,
            target,
            [0.0, 1.0, 0.0],
        )
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation;
        let t = self.translation;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// Image coordinates of a world point, `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let r = self.rotation;
        let c = [
            dot(r[0], p) + self.translation[0],
            dot(r[1], p) + self.translation[1],
            dot(r[2], p) + self.translation[2],
        ];
        if c[2] <= 0.0 {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy))
    }

    /// Unit world direction through image coordinates `(x, y)`.
    pub fn direction(&self, x: f64, y: f64) -> [f64; 3] {
        let d = normalize([(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0]);
        let r = self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub fn all_pixels(&self) -> Vec<(u32, u32)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
    pub pixels: Vec<(u32, u32)>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> RayBatch {
        RayBatch {
            origins: self.origins[start..end].to_vec(),
            directions: self.directions[start..end].to_vec(),
            near: self.near[start..end].to_vec(),
            far: self.far[start..end].to_vec(),
            pixels: self.pixels[start..end].to_vec(),
        }
    }
}

/// Rays through pixel centres.
pub fn generate_rays(camera: &Camera, pixels: &[(u32, u32)]) -> Result<RayBatch, RenderError> {
    let pts: Vec<(f64, f64)> = pixels
        .iter()
        .map(|&(x, y)| (x as f64 + 0.5, y as f64 + 0.5))
        .collect();
    generate_rays_at(camera, &pts)
}

/// Rays through arbitrary image coordinates inside the image.
pub fn generate_rays_at(camera: &Camera, points: &[(f64, f64)]) -> Result<RayBatch, RenderError> {
    let origin = camera.center();
    let mut batch = RayBatch {
        origins: Vec::with_capacity(points.len()),
        directions: Vec::with_capacity(points.len()),
        near: Vec::with_capacity(points.len()),
        far: Vec::with_capacity(points.len()),
        pixels: Vec::with_capacity(points.len()),
    };
    for &(x, y) in points {
        let inside = x >= 0.0 && y >= 0.0 && x < camera.width as f64 && y < camera.height as f64;
        if !inside {
            return Err(RenderError::OutOfBounds {
                x,
                y,
                width: camera.width,
                height: camera.height,
            });
        }
        batch.origins.push(origin);
        batch.directions.push(camera.direction(x, y));
        batch.near.push(DEFAULT_NEAR);
        batch.far.push(DEFAULT_FAR);
        batch.pixels.push((x as u32, y as u32));
    }
    Ok(batch)
}

/// Per-ray compositing over variable-length, depth-ordered sample segments.
///
/// Inputs are densities `[n,1]` and values `[n,V]`; the output is `[R, V+1]`
/// holding the composited values followed by alpha.
pub struct Composite {
    offsets: Arc<Vec<usize>>,
    deltas: Vec<f64>,
}

impl Composite {
    pub fn new(offsets: Vec<usize>, depths: &[f64], deltas: Vec<f64>) -> Result<Self, RenderError> {
        let n = offsets.last().copied().unwrap_or(0);
        if depths.len() != n || deltas.len() != n || offsets.first().copied().unwrap_or(0) != 0 {
            return Err(RenderError::Layout("composite offsets do not match samples".into()));
        }
        for (ray, w) in offsets.windows(2).enumerate() {
            if w[0] > w[1] {
                return Err(RenderError::Layout("composite offsets must be increasing".into()));
            }
            let seg = &depths[w[0]..w[1]];
            if seg.windows(2).any(|p| !(p[0] < p[1])) || deltas[w[0]..w[1]].iter().any(|d| !(*d > 0.0)) {
                return Err(RenderError::Unordered { ray });
            }
        }
        Ok(Self {
            offsets: Arc::new(offsets),
            deltas,
        })
    }

    pub fn rays(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Weights and transmittances of one segment.
    fn weights(&self, sigma: &[f64], start: usize) -> (Vec<f64>, Vec<f64>) {
        let mut depth = 0.0f64;
        let mut w = Vec::with_capacity(sigma.len());
        let mut trans = Vec::with_capacity(sigma.len());
        for (k, &s) in sigma.iter().enumerate() {
            let tau = s * self.deltas[start + k];
            let t = (-depth).exp();
            trans.push(t);
            w.push(t * -(-tau).exp_m1());
            depth += tau;
        }
        (w, trans)
    }
}

impl<T: Real> CustomOp<T> for Composite {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, KernelError> {
        let (sigma, values) = (inputs[0], inputs[1]);
        let n = self.deltas.len();
        if sigma.shape() != [n, 1] || values.rows() != n {
            return Err(KernelError::ShapeMismatch {
                op: "composite".into(),
                left: sigma.shape().to_vec(),
                right: values.shape().to_vec(),
            });
        }
        let vc = values.cols();
        let mut out = vec![T::zero(); self.rays() * (vc + 1)];
        for (r, seg) in self.offsets.windows(2).enumerate() {
            let s: Vec<f64> = sigma.data()[seg[0]..seg[1]].iter().map(|v| v.to_f64_lossy()).collect();
            let (w, _) = self.weights(&s, seg[0]);
            let row = &mut out[r * (vc + 1)..(r + 1) * (vc + 1)];
            let mut acc = vec![0.0f64; vc + 1];
            for (k, wk) in w.iter().enumerate() {
                for (c, a) in acc[..vc].iter_mut().enumerate() {
                    *a += wk * values.get(seg[0] + k, c).to_f64_lossy();
                }
                acc[vc] += wk;
            }
            for (o, a) in row.iter_mut().zip(acc) {
                *o = T::from_f64_lossy(a);
            }
        }
        Tensor::new(vec![self.rays(), vc + 1], out)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (sigma, values) = (inputs[0], inputs[1]);
        let vc = values.cols();
        let mut gs = vec![T::zero(); sigma.len()];
        let mut gv = vec![T::zero(); values.len()];
        for (r, seg) in self.offsets.windows(2).enumerate() {
            let s: Vec<f64> = sigma.data()[seg[0]..seg[1]].iter().map(|v| v.to_f64_lossy()).collect();
            let (w, trans) = self.weights(&s, seg[0]);
            let gr: Vec<f64> = grad.row(r).iter().map(|v| v.to_f64_lossy()).collect();
            // d loss / d w_k
            let gw: Vec<f64> = (0..w.len())
                .map(|k| {
                    let i = seg[0] + k;
                    (0..vc).map(|c| gr[c] * values.get(i, c).to_f64_lossy()).sum::<f64>() + gr[vc]
                })
                .collect();
            let mut suffix = 0.0;
            for k in (0..w.len()).rev() {
                let i = seg[0] + k;
                let delta = self.deltas[i];
                let e = (-s[k] * delta).exp();
                gs[i] = T::from_f64_lossy(delta * (trans[k] * e * gw[k] - suffix));
                suffix += w[k] * gw[k];
                for c in 0..vc {
                    gv[i * vc + c] = T::from_f64_lossy(w[k] * gr[c]);
                }
            }
        }
        vec![
            Some(Tensor::new(sigma.shape().to_vec(), gs).expect("finite gradient")),
            Some(Tensor::new(values.shape().to_vec(), gv).expect("finite gradient")),
        ]
    }
}

/// Sample points kept after culling, grouped by ray.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    pub positions: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
    pub offsets: Vec<usize>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Capsules moved into observation space by the given pose.
pub fn posed_capsules(model_capsules: &[Capsule], skeleton: &crate::rig::Skeleton, pose: &Pose) -> Result<Vec<Capsule>, RigError> {
    let tr = skinning_transforms(skeleton, pose)?;
    Ok(model_capsules
        .iter()
        .zip(&tr)
        .map(|(c, t)| {
            let a = t.apply(nalgebra::Vector3::from(c.a));
            let b = t.apply(nalgebra::Vector3::from(c.b));
            Capsule {
                a: [a.x, a.y, a.z],
                b: [b.x, b.y, b.z],
                radius: c.radius,
            }
        })
        .collect())
}

fn ray_box(o: [f64; 3], d: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Stratified samples clipped to the posed body's bounding box and culled to
/// a shell of `margin` around the posed capsules. With `jitter = None` each
/// bin is sampled at its midpoint.
pub fn sample_rays(
    rays: &RayBatch,
    capsules: &[Capsule],
    samples: usize,
    margin: f64,
    mut jitter: Option<&mut dyn rand::RngCore>,
) -> SampleSet {
    let pad = |c: &Capsule| c.radius + margin;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in capsules {
        for a in 0..3 {
            lo[a] = lo[a].min(c.a[a].min(c.b[a]) - pad(c));
            hi[a] = hi[a].max(c.a[a].max(c.b[a]) + pad(c));
        }
    }
    let mut set = SampleSet {
        offsets: vec![0],
        ..Default::default()
    };
    for r in 0..rays.len() {
        let (o, d) = (rays.origins[r], rays.directions[r]);
        if let Some((t0, t1)) = ray_box(o, d, lo, hi) {
            let near = t0.max(rays.near[r]);
            let far = t1.min(rays.far[r]);
            if far > near {
                let step = (far - near) / samples as f64;
                for i in 0..samples {
                    let xi = match jitter.as_mut() {
                        Some(rng) => rng.gen_range(0.0..1.0),
                        None => 0.5,
                    };
                    let t = near + (i as f64 + xi) * step;
                    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                    let near_body = capsules.iter().any(|c| c.distance(p) < margin);
                    if near_body {
                        set.positions.push(p);
                        set.directions.push(d);
                        set.depths.push(t);
                        set.deltas.push(step);
                    }
                }
            }
        }
        set.offsets.push(set.positions.len());
    }
    set
}

/// Corrected pose on a tape.
pub struct PoseStage {
    pub rotations: Var,
    /// `[1, 3J]`
    pub embed: Var,
    pub transforms: GraphTransforms,
    /// Corrected pose values read back from the tape.
    pub corrected: Pose,
}

pub fn pose_stage<T: Real>(
    g: &mut Graph<T>,
    model: &AvatarModel,
    pose: &Pose,
    residual_row: Option<usize>,
) -> Result<PoseStage, RenderError> {
    let j = model.skeleton.len();
    if pose.rotations.len() != j {
        return Err(RigError::JointCount {
            expected: j,
            got: pose.rotations.len(),
        }
        .into());
    }
    let res = match (&model.residual, residual_row) {
        (Some(p), Some(row)) => {
            let all = g.param(&model.store, p.id);
            Some(g.slice_rows(all, row, row + 1)?)
        }
        _ => None,
    };
    let rotations = corrected_rotations_on_graph(g, pose, res, model.config.pose_residual_bound)?;
    let embed = g.gather(rotations, Arc::new((0..3 * j).collect()), vec![1, 3 * j])?;
    let transforms = forward_kinematics_on_graph(g, &model.skeleton, rotations, pose.root_translation)?;
    let vals = g.value(rotations);
    let corrected = Pose {
        frame: pose.frame,
        root_translation: pose.root_translation,
        rotations: (0..j)
            .map(|k| [0, 1, 2].map(|a| vals.get(k, a).to_f64_lossy()))
            .collect(),
    };
    Ok(PoseStage {
        rotations,
        embed,
        transforms,
        corrected,
    })
}

/// Tape handles for one batch of rays. Per-ray outputs are `[R, *]`.
pub struct RayOutputs {
    pub u: Var,
    pub v: Var,
    /// Composited (not renormalized) semantic probabilities `[R,C]`.
    pub semantics: Var,
    pub alpha: Var,
    pub depth: Var,
    pub albedo: Var,
    pub shading: Var,
    pub rgb: Var,
    pub samples: usize,
    /// Per-sample canonical points and their semantic probabilities, for the
    /// smoothness term.
    pub canonical_points: Option<Var>,
    pub sample_semantics: Option<Var>,
}

pub struct PixelShading {
    pub albedo: Var,
    pub shading: Var,
    pub rgb: Var,
}

/// Texture lookup and shading from composited buffers. Depends on the 3D
/// fields only through its inputs.
#[allow(clippy::too_many_arguments)]
pub fn shade_pixels<T: Real>(
    g: &mut Graph<T>,
    model: &AvatarModel,
    u: Var,
    v: Var,
    semantics: Var,
    alpha: Var,
    directions: Var,
    pose_embed: Var,
) -> Result<PixelShading, RenderError> {
    let c = model.classes();
    let eps = model.config.render.semantic_epsilon;
    let smoothed = g.add_scalar(semantics, T::from_f64_lossy(eps / c as f64));
    let denom = g.add_scalar(alpha, T::from_f64_lossy(eps));
    let inv = g.unary(denom, Unary::Recip)?;
    let s_norm = g.mul_col(smoothed, inv)?;
    let t = model.texture.feature(g, &model.store, u, v, s_norm)?;
    let shaded = model.texture.shade(g, &model.store, t, directions, pose_embed)?;
    let r = g.value(alpha).rows();
    let bg = model.config.render.background;
    let bg_rows = Tensor::new(
        vec![r, 3],
        (0..r).flat_map(|_| bg.map(T::from_f64_lossy)).collect(),
    )?;
    let bg_rows = g.constant(bg_rows)?;
    let neg_alpha = g.scale(alpha, -T::one());
    let one_minus = g.add_scalar(neg_alpha, T::one());
    let fg = g.mul_col(shaded.color, alpha)?;
    let back = g.mul_col(bg_rows, one_minus)?;
    let rgb = g.add(fg, back)?;
    Ok(PixelShading {
        albedo: shaded.albedo,
        shading: shaded.shading,
        rgb,
    })
}

fn rows_tensor<T: Real>(rows: &[[f64; 3]]) -> Result<Tensor<T>, KernelError> {
    Tensor::new(
        vec![rows.len(), 3],
        rows.iter().flat_map(|r| r.map(T::from_f64_lossy)).collect(),
    )
}

/// Renders a batch of rays on the tape: sample, deform, evaluate the
/// canonical fields, composite, then shade per pixel.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<T: Real>(
    g: &mut Graph<T>,
    model: &AvatarModel,
    stage: &PoseStage,
    rays: &RayBatch,
    jitter: Option<&mut dyn rand::RngCore>,
    keep_samples: bool,
) -> Result<RayOutputs, RenderError> {
    let cfg = &model.config.render;
    let c = model.classes();
    let capsules = posed_capsules(&model.skeleton.capsules(), &model.skeleton, &stage.corrected)?;
    let set = sample_rays(rays, &capsules, cfg.samples_per_ray, cfg.cull_margin, jitter);
    let r = rays.len();
    let mut canonical_points = None;
    let mut sample_semantics = None;
    let composited = if set.is_empty() {
        g.constant(Tensor::zeros(&[r, 2 + c + 2]))?
    } else {
        let x = g.constant(rows_tensor(&set.positions)?)?;
        let deformed = model
            .deformation
            .deform(g, &model.store, &stage.transforms, stage.embed, x, model.step)?;
        let feat = model.canonical.volume.evaluate(g, &model.store, deformed.x_canonical)?;
        let on_body = g.constant(deformed.inverse.on_body_column())?;
        let sigma = g.mul(feat.sigma, on_body)?;
        let dirs = g.constant(rows_tensor(&set.directions)?)?;
        let uvs = model.canonical.uvs.evaluate(g, &model.store, feat.feature, dirs)?;
        let probs = g.softmax(uvs.logits);
        let depth = g.constant(Tensor::new(
            vec![set.len(), 1],
            set.depths.iter().map(|&d| T::from_f64_lossy(d)).collect(),
        )?)?;
        let values = g.concat_cols(&[uvs.u, uvs.v, probs, depth])?;
        let op = Composite::new(set.offsets.clone(), &set.depths, set.deltas.clone())?;
        if keep_samples {
            canonical_points = Some(deformed.x_canonical);
            sample_semantics = Some(probs);
        }
        g.custom(&[sigma, values], Arc::new(op))?
    };
    let u = g.slice_cols(composited, 0, 1)?;
    let v = g.slice_cols(composited, 1, 2)?;
    let semantics = g.slice_cols(composited, 2, 2 + c)?;
    let depth = g.slice_cols(composited, 2 + c, 3 + c)?;
    let alpha = g.slice_cols(composited, 3 + c, 4 + c)?;
    let pix_dirs = g.constant(rows_tensor(&rays.directions)?)?;
    let shaded = shade_pixels(g, model, u, v, semantics, alpha, pix_dirs, stage.embed)?;
    Ok(RayOutputs {
        u,
        v,
        semantics,
        alpha,
        depth,
        albedo: shaded.albedo,
        shading: shaded.shading,
        rgb: shaded.rgb,
        samples: set.len(),
        canonical_points,
        sample_semantics,
    })
}

/// Per-pixel render products for a full image.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedBuffers {
    pub width: u32,
    pub height: u32,
    pub classes: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub alpha: Vec<f32>,
    pub depth: Vec<f32>,
    /// Three values per pixel.
    pub rgb: Vec<f32>,
    pub albedo: Vec<f32>,
    /// Three values per pixel; scalar shading is replicated.
    pub shading: Vec<f32>,
    /// `classes` values per pixel, composited and not renormalized.
    pub semantics: Vec<f32>,
}

/// Channels before the semantic block in a buffer dump:
/// u, v, alpha, depth, rgb(3), albedo(3), shading(3).
pub const BUFFER_FIXED_CHANNELS: u32 = 13;

impl RenderedBuffers {
    fn empty(width: u32, height: u32, classes: usize) -> Self {
        let n = (width * height) as usize;
        Self {
            width,
            height,
            classes,
            u: vec![0.0; n],
            v: vec![0.0; n],
            alpha: vec![0.0; n],
            depth: vec![0.0; n],
            rgb: vec![0.0; 3 * n],
            albedo: vec![0.0; 3 * n],
            shading: vec![0.0; 3 * n],
            semantics: vec![0.0; classes * n],
        }
    }

    pub fn rgb_image(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.rgb.clone(),
        }
    }

    pub fn albedo_image(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.albedo.clone(),
        }
    }

    /// Most probable class per pixel (0 where alpha < 0.5).
    pub fn labels(&self) -> Vec<u8> {
        (0..self.alpha.len())
            .map(|i| {
                if self.alpha[i] < 0.5 {
                    return 0;
                }
                let s = &self.semantics[i * self.classes..(i + 1) * self.classes];
                s.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |b, (k, &p)| if p > b.1 { (k, p) } else { b })
                    .0 as u8
            })
            .collect()
    }

    pub fn to_raw(&self) -> RawBuffer {
        let ch = BUFFER_FIXED_CHANNELS as usize + self.classes;
        let n = self.alpha.len();
        let mut data = Vec::with_capacity(n * ch);
        for i in 0..n {
            data.extend([self.u[i], self.v[i], self.alpha[i], self.depth[i]]);
            data.extend_from_slice(&self.rgb[3 * i..3 * i + 3]);
            data.extend_from_slice(&self.albedo[3 * i..3 * i + 3]);
            data.extend_from_slice(&self.shading[3 * i..3 * i + 3]);
            data.extend_from_slice(&self.semantics[i * self.classes..(i + 1) * self.classes]);
        }
        RawBuffer {
            width: self.width,
            height: self.height,
            channels: ch as u32,
            data,
        }
    }

    pub fn from_raw(raw: &RawBuffer) -> Result<Self, RenderError> {
        if raw.channels <= BUFFER_FIXED_CHANNELS {
            return Err(RenderError::Layout(format!("{} channels is too few", raw.channels)));
        }
        let classes = (raw.channels - BUFFER_FIXED_CHANNELS) as usize;
        let mut out = Self::empty(raw.width, raw.height, classes);
        for (i, px) in raw.data.chunks_exact(raw.channels as usize).enumerate() {
            out.u[i] = px[0];
            out.v[i] = px[1];
            out.alpha[i] = px[2];
            out.depth[i] = px[3];
            out.rgb[3 * i..3 * i + 3].copy_from_slice(&px[4..7]);
            out.albedo[3 * i..3 * i + 3].copy_from_slice(&px[7..10]);
            out.shading[3 * i..3 * i + 3].copy_from_slice(&px[10..13]);
            out.semantics[i * classes..(i + 1) * classes].copy_from_slice(&px[13..]);
        }
        Ok(out)
    }
}

struct ChunkResult {
    start: usize,
    u: Vec<f32>,
    v: Vec<f32>,
    alpha: Vec<f32>,
    depth: Vec<f32>,
    rgb: Vec<f32>,
    albedo: Vec<f32>,
    shading: Vec<f32>,
    semantics: Vec<f32>,
}

fn expand3(t: &Tensor<f32>) -> Vec<f32> {
    if t.cols() == 3 {
        t.data().to_vec()
    } else {
        t.data().iter().flat_map(|&m| [m, m, m]).collect()
    }
}

fn chunk_bounds(n: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(chunk))
        .map(|i| (i * chunk, ((i + 1) * chunk).min(n)))
        .collect()
}

/// Renders every pixel of `camera` with deterministic midpoint sampling.
/// Chunks run in parallel; results are assembled by pixel index.
pub fn render_buffers(
    model: &AvatarModel,
    camera: &Camera,
    pose: &Pose,
    residual_row: Option<usize>,
) -> Result<RenderedBuffers, RenderError> {
    camera.validate()?;
    let rays = generate_rays(camera, &camera.all_pixels())?;
    let chunks = chunk_bounds(rays.len(), model.config.render.chunk_rays);
    let results: Vec<Result<ChunkResult, RenderError>> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let mut g = Graph::<f32>::new();
            let stage = pose_stage(&mut g, model, pose, residual_row)?;
            let out = render_rays(&mut g, model, &stage, &rays.slice(start, end), None, false)?;
            Ok(ChunkResult {
                start,
                u: g.value(out.u).data().to_vec(),
                v: g.value(out.v).data().to_vec(),
                alpha: g.value(out.alpha).data().to_vec(),
                depth: g.value(out.depth).data().to_vec(),
                rgb: g.value(out.rgb).data().to_vec(),
                albedo: g.value(out.albedo).data().to_vec(),
                shading: expand3(g.value(out.shading)),
                semantics: g.value(out.semantics).data().to_vec(),
            })
        })
        .collect();
    let c = model.classes();
    let mut buf = RenderedBuffers::empty(camera.width, camera.height, c);
    for res in results {
        let ch = res?;
        let (s, n) = (ch.start, ch.u.len());
        buf.u[s..s + n].copy_from_slice(&ch.u);
        buf.v[s..s + n].copy_from_slice(&ch.v);
        buf.alpha[s..s + n].copy_from_slice(&ch.alpha);
        buf.depth[s..s + n].copy_from_slice(&ch.depth);
        buf.rgb[3 * s..3 * (s + n)].copy_from_slice(&ch.rgb);
        buf.albedo[3 * s..3 * (s + n)].copy_from_slice(&ch.albedo);
        buf.shading[3 * s..3 * (s + n)].copy_from_slice(&ch.shading);
        buf.semantics[c * s..c * (s + n)].copy_from_slice(&ch.semantics);
    }
    Ok(buf)
}

/// Recomputes colour from dumped U, V, S and alpha with the same chunking
/// as [`render_buffers`].
pub fn shade_from_buffers(
    model: &AvatarModel,
    camera: &Camera,
    pose: &Pose,
    residual_row: Option<usize>,
    buffers: &RenderedBuffers,
) -> Result<RgbImage, RenderError> {
    let rays = generate_rays(camera, &camera.all_pixels())?;
    if buffers.alpha.len() != rays.len() || buffers.classes != model.classes() {
        return Err(RenderError::Layout("buffers do not match camera or model".into()));
    }
    let c = buffers.classes;
    let chunks = chunk_bounds(rays.len(), model.config.render.chunk_rays);
    let parts: Vec<Result<Vec<f32>, RenderError>> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let n = e - s;
            let mut g = Graph::<f32>::new();
            let stage = pose_stage(&mut g, model, pose, residual_row)?;
            let col = |g: &mut Graph<f32>, v: &[f32]| g.constant(Tensor::new(vec![n, 1], v.to_vec())?);
            let u = col(&mut g, &buffers.u[s..e])?;
            let v = col(&mut g, &buffers.v[s..e])?;
            let alpha = col(&mut g, &buffers.alpha[s..e])?;
            let sem = g.constant(Tensor::new(vec![n, c], buffers.semantics[c * s..c * e].to_vec())?)?;
            let dirs = g.constant(rows_tensor(&rays.directions[s..e])?)?;
            let out = shade_pixels(&mut g, model, u, v, sem, alpha, dirs, stage.embed)?;
            Ok(g.value(out.rgb).data().to_vec())
        })
        .collect();
    let mut data = Vec::with_capacity(rays.len() * 3);
    for p in parts {
        data.extend(p?);
    }
    Ok(RgbImage::from_data(camera.width, camera.height, data)?)
}

/// One independent render per pose in the sequence.
pub fn render_novel(
    model: &AvatarModel,
    camera: &Camera,
    sequence: &PoseSequence,
) -> Result<Vec<RenderedBuffers>, RenderError> {
    sequence
        .poses
        .iter()
        .map(|p| render_buffers(model, camera, p, None))
        .collect()
}
