//! Skeletons, poses, forward kinematics and pose-sequence files.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::diffkernel::{Graph, KernelError, Real, SparseMap, Tensor, Unary, Var};

/// Capsule in canonical (rest) coordinates: segment `a..b` inflated by `radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

impl Capsule {
    /// Signed distance from `p` to the capsule surface.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        let a = Vector3::from(self.a);
        let ba = Vector3::from(self.b) - a;
        let pa = Vector3::from(p) - a;
        let denom = ba.norm_squared();
        let h = if denom > 0.0 {
            (pa.dot(&ba) / denom).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (pa - ba * h).norm() - self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest-pose offset from the parent joint (from the origin for the root).
    pub offset: [f64; 3],
    pub capsule: Capsule,
}

#[derive(Debug, Error)]
pub enum RigError {
    #[error("joint {joint}: {message}")]
    InvalidSkeleton { joint: usize, message: String },
    #[error("pose has {got} joints, skeleton has {expected}")]
    JointCount { expected: usize, got: usize },
    #[error("pose file frame {frame:?}, field {field}: {message}")]
    Schema {
        frame: Option<usize>,
        field: String,
        message: String,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Joint tree rooted at joint 0. Parents always precede their children.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    joints: Vec<Joint>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>) -> Result<Self, RigError> {
        for (i, j) in joints.iter().enumerate() {
            let bad = |m: &str| RigError::InvalidSkeleton {
                joint: i,
                message: m.to_string(),
            };
            match (i, j.parent) {
                (0, None) => {}
                (0, Some(_)) => return Err(bad("root must not have a parent")),
                (_, None) => return Err(bad("only joint 0 may be a root")),
                (_, Some(p)) if p >= i => return Err(bad("parent must precede child")),
                _ => {}
            }
            let finite = j.offset.iter().chain(&j.capsule.a).chain(&j.capsule.b).all(|v| v.is_finite());
            if !finite || !(j.capsule.radius > 0.0) {
                return Err(bad("offsets and capsule must be finite with positive radius"));
            }
        }
        if joints.is_empty() {
            return Err(RigError::InvalidSkeleton {
                joint: 0,
                message: "empty skeleton".into(),
            });
        }
        Ok(Self { joints })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn capsules(&self) -> Vec<Capsule> {
        self.joints.iter().map(|j| j.capsule).collect()
    }

    /// Rest-pose joint positions.
    pub fn rest_positions(&self) -> Vec<[f64; 3]> {
        let mut out: Vec<[f64; 3]> = Vec::with_capacity(self.joints.len());
        for j in &self.joints {
            let base = j.parent.map_or([0.0; 3], |p| out[p]);
            out.push([
                base[0] + j.offset[0],
                base[1] + j.offset[1],
                base[2] + j.offset[2],
            ]);
        }
        out
    }

    /// Six-part capsule figure: torso, head, two arms, two legs (T-pose, y up).
    pub fn six_part() -> Self {
        let cap = |a: [f64; 3], b: [f64; 3], radius| Capsule { a, b, radius };
        let joint = |name: &str, parent, offset, capsule| Joint {
            name: name.to_string(),
            parent,
            offset,
            capsule,
        };
        Self::new(vec![
            joint("torso", None, [0.0, 0.0, 0.0], cap([0.0, 0.0, 0.0], [0.0, 0.42, 0.0], 0.16)),
            joint("head", Some(0), [0.0, 0.6, 0.0], cap([0.0, 0.68, 0.0], [0.0, 0.76, 0.0], 0.12)),
            joint("left_arm", Some(0), [0.2, 0.48, 0.0], cap([0.24, 0.48, 0.0], [0.7, 0.48, 0.0], 0.06)),
            joint("right_arm", Some(0), [-0.2, 0.48, 0.0], cap([-0.24, 0.48, 0.0], [-0.7, 0.48, 0.0], 0.06)),
            joint("left_leg", Some(0), [0.09, -0.08, 0.0], cap([0.09, -0.12, 0.0], [0.09, -0.78, 0.0], 0.075)),
            joint("right_leg", Some(0), [-0.09, -0.08, 0.0], cap([-0.09, -0.12, 0.0], [-0.09, -0.78, 0.0], 0.075)),
        ])
        .expect("six-part skeleton is valid")
    }

    /// 24-joint tree with the SMPL joint ordering and approximate adult rest
    /// offsets (meters).
    pub fn smpl24() -> Self {
        #[rustfmt::skip]
        let spec: [(&str, Option<usize>, [f64; 3], f64); 24] = [
            ("pelvis", None, [0.0, 0.0, 0.0], 0.11),
            ("left_hip", Some(0), [0.06, -0.09, 0.0], 0.08),
            ("right_hip", Some(0), [-0.06, -0.09, 0.0], 0.08),
            ("spine1", Some(0), [0.0, 0.11, -0.02], 0.11),
            ("left_knee", Some(1), [0.04, -0.38, 0.0], 0.06),
            ("right_knee", Some(2), [-0.04, -0.38, 0.0], 0.06),
            ("spine2", Some(3), [0.0, 0.13, 0.0], 0.12),
            ("left_ankle", Some(4), [-0.01, -0.4, -0.04], 0.045),
            ("right_ankle", Some(5), [0.01, -0.4, -0.04], 0.045),
            ("spine3", Some(6), [0.0, 0.05, 0.02], 0.12),
            ("left_foot", Some(7), [0.03, -0.06, 0.12], 0.035),
            ("right_foot", Some(8), [-0.03, -0.06, 0.12], 0.035),
            ("neck", Some(9), [0.0, 0.21, -0.03], 0.05),
            ("left_collar", Some(9), [0.07, 0.11, -0.01], 0.05),
            ("right_collar", Some(9), [-0.07, 0.11, -0.01], 0.05),
            ("head", Some(12), [0.0, 0.09, 0.05], 0.1),
            ("left_shoulder", Some(13), [0.11, 0.04, -0.01], 0.05),
            ("right_shoulder", Some(14), [-0.11, 0.04, -0.01], 0.05),
            ("left_elbow", Some(16), [0.26, -0.01, -0.02], 0.04),
            ("right_elbow", Some(17), [-0.26, -0.01, -0.02], 0.04),
            ("left_wrist", Some(18), [0.25, 0.01, 0.0], 0.035),
            ("right_wrist", Some(19), [-0.25, 0.01, 0.0], 0.035),
            ("left_hand", Some(20), [0.08, -0.01, -0.01], 0.03),
            ("right_hand", Some(21), [-0.08, -0.01, -0.01], 0.03),
        ];
        // Positions first, then a capsule from each joint toward its first child.
        let mut pos: Vec<[f64; 3]> = Vec::new();
        for (_, parent, off, _) in &spec {
            let base = parent.map_or([0.0; 3], |p| pos[p]);
            pos.push([base[0] + off[0], base[1] + off[1], base[2] + off[2]]);
        }
        let joints = spec
            .iter()
            .enumerate()
            .map(|(i, (name, parent, off, r))| {
                let child = spec.iter().position(|s| s.1 == Some(i));
                let end = match child {
                    Some(c) => pos[c],
                    None => [pos[i][0], pos[i][1] + 0.05, pos[i][2]],
                };
                // Pull the end in a little so neighbouring capsules do not coincide.
                let b = [
                    pos[i][0] + 0.85 * (end[0] - pos[i][0]),
                    pos[i][1] + 0.85 * (end[1] - pos[i][1]),
                    pos[i][2] + 0.85 * (end[2] - pos[i][2]),
                ];
                Joint {
                    name: name.to_string(),
                    parent: *parent,
                    offset: *off,
                    capsule: Capsule {
                        a: pos[i],
                        b,
                        radius: *r,
                    },
                }
            })
            .collect();
        Self::new(joints).expect("smpl24 skeleton is valid")
    }
}

/// Rotation part plus translation, mapping local to world: `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Per-frame skeletal configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub frame: i64,
    pub root_translation: [f64; 3],
    /// Axis-angle per joint, radians.
    pub rotations: Vec<[f64; 3]>,
}

impl Pose {
    pub fn rest(joints: usize) -> Self {
        Self {
            frame: 0,
            root_translation: [0.0; 3],
            rotations: vec![[0.0; 3]; joints],
        }
    }

    /// Flattened axis-angle vector (the pose embedding).
    pub fn embedding(&self) -> Vec<f64> {
        self.rotations.iter().flatten().copied().collect()
    }
}

/// Wraps an axis-angle vector so its magnitude does not exceed pi.
/// Returns the normalized vector and whether it changed.
pub fn normalize_axis_angle(aa: [f64; 3]) -> ([f64; 3], bool) {
    let theta = (aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]).sqrt();
    if theta <= PI {
        return (aa, false);
    }
    let wrapped = theta - 2.0 * PI * (theta / (2.0 * PI)).round();
    let s = wrapped / theta;
    ([aa[0] * s, aa[1] * s, aa[2] * s], true)
}

pub fn rotation_from_axis_angle(aa: [f64; 3]) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(Vector3::from(aa)).into_inner()
}

/// World transform of every joint. The root joint gets the root translation
/// on top of its rest position.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<RigidTransform>, RigError> {
    if pose.rotations.len() != skeleton.len() {
        return Err(RigError::JointCount {
            expected: skeleton.len(),
            got: pose.rotations.len(),
        });
    }
    let mut out: Vec<RigidTransform> = Vec::with_capacity(skeleton.len());
    for (j, joint) in skeleton.joints().iter().enumerate() {
        let local_rot = rotation_from_axis_angle(pose.rotations[j]);
        let world = match joint.parent {
            None => RigidTransform {
                rotation: local_rot,
                translation: Vector3::from(joint.offset) + Vector3::from(pose.root_translation),
            },
            Some(p) => {
                let parent = out[p];
                RigidTransform {
                    rotation: parent.rotation * local_rot,
                    translation: parent.apply(Vector3::from(joint.offset)),
                }
            }
        };
        out.push(world);
    }
    Ok(out)
}

/// Maps canonical points of bone `k` to observation space:
/// `x_obs = R_k (x_can - rest_k) + p_k`.
pub fn skinning_transforms(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<RigidTransform>, RigError> {
    let world = forward_kinematics(skeleton, pose)?;
    let rest = skeleton.rest_positions();
    Ok(world
        .iter()
        .zip(rest)
        .map(|(w, r)| RigidTransform {
            rotation: w.rotation,
            translation: w.translation - w.rotation * Vector3::from(r),
        })
        .collect())
}

/// Learnable per-frame axis-angle corrections, bounded componentwise by `rho`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseResidual {
    pub deltas: Vec<[f64; 3]>,
    pub rho: f64,
}

pub const DEFAULT_RESIDUAL_BOUND: f64 = 0.2;

/// `pose + clamp(residual, -rho, rho)` per joint.
pub fn correct_pose(pose: &Pose, residual: &PoseResidual) -> Result<Pose, RigError> {
    if residual.deltas.len() != pose.rotations.len() {
        return Err(RigError::JointCount {
            expected: pose.rotations.len(),
            got: residual.deltas.len(),
        });
    }
    let rho = residual.rho;
    let rotations = pose
        .rotations
        .iter()
        .zip(&residual.deltas)
        .map(|(r, d)| {
            [
                r[0] + d[0].clamp(-rho, rho),
                r[1] + d[1].clamp(-rho, rho),
                r[2] + d[2].clamp(-rho, rho),
            ]
        })
        .collect();
    Ok(Pose {
        frame: pose.frame,
        root_translation: pose.root_translation,
        rotations,
    })
}

/// Corrected rotations on the tape: `base + clamp(residual_row, -rho, rho)`,
/// reshaped to `[J, 3]`. `residual_row` is `[1, 3J]` or `None`.
pub fn corrected_rotations_on_graph<T: Real>(
    g: &mut Graph<T>,
    pose: &Pose,
    residual_row: Option<Var>,
    rho: f64,
) -> Result<Var, KernelError> {
    let j = pose.rotations.len();
    let base = g.constant(Tensor::new(
        vec![j, 3],
        pose.rotations
            .iter()
            .flatten()
            .map(|&v| T::from_f64_lossy(v))
            .collect(),
    )?)?;
    let Some(res) = residual_row else {
        return Ok(base);
    };
    let clamped = g.clamp(res, T::from_f64_lossy(-rho), T::from_f64_lossy(rho));
    let reshaped = g.gather(clamped, Arc::new((0..3 * j).collect()), vec![j, 3])?;
    g.add(base, reshaped)
}

fn skew_map<T: Real>() -> Arc<SparseMap<T>> {
    let one = T::one();
    let neg = -T::one();
    // A = [[0,-z,y],[z,0,-x],[-y,x,0]] from aa = [x,y,z]
    Arc::new(SparseMap::from_rows(
        vec![
            vec![],
            vec![(2, neg)],
            vec![(1, one)],
            vec![(2, one)],
            vec![],
            vec![(0, neg)],
            vec![(1, neg)],
            vec![(0, one)],
            vec![],
        ],
        vec![3, 3],
    ))
}

/// Rodrigues on the tape from a `[1,3]` axis-angle row, smooth at zero.
pub fn rotation_on_graph<T: Real>(g: &mut Graph<T>, aa: Var) -> Result<Var, KernelError> {
    let sq = g.square(aa)?;
    let theta2 = g.row_sums(sq);
    let a_coef = g.unary(theta2, Unary::SincOfSq)?;
    let b_coef = g.unary(theta2, Unary::CosTermOfSq)?;
    let skew = g.sparse_map(aa, skew_map())?;
    let skew2 = g.matmul(skew, skew)?;
    let a3 = g.broadcast_rows(a_coef, 3)?;
    let b3 = g.broadcast_rows(b_coef, 3)?;
    let t1 = g.mul_col(skew, a3)?;
    let t2 = g.mul_col(skew2, b3)?;
    let eye = g.constant(Tensor::new(
        vec![3, 3],
        [1., 0., 0., 0., 1., 0., 0., 0., 1.]
            .iter()
            .map(|&v| T::from_f64_lossy(v))
            .collect(),
    )?)?;
    let r = g.add(eye, t1)?;
    g.add(r, t2)
}

/// Skinning transforms on the tape. For bone `k`, `rotations[k]` is the
/// world rotation `R_k` (`[3,3]`) and `positions[k]` the posed joint position
/// (`[1,3]`), so a canonical row `x` maps to `(x - rest_k) R_k^T + p_k`.
pub struct GraphTransforms {
    pub rotations: Vec<Var>,
    pub positions: Vec<Var>,
    pub rest: Vec<[f64; 3]>,
}

pub fn forward_kinematics_on_graph<T: Real>(
    g: &mut Graph<T>,
    skeleton: &Skeleton,
    rotations: Var,
    root_translation: [f64; 3],
) -> Result<GraphTransforms, KernelError> {
    let mut rots: Vec<Var> = Vec::with_capacity(skeleton.len());
    let mut pos: Vec<Var> = Vec::with_capacity(skeleton.len());
    let row = |v: [f64; 3]| Tensor::new(vec![1, 3], v.iter().map(|&x| T::from_f64_lossy(x)).collect());
    for (j, joint) in skeleton.joints().iter().enumerate() {
        let aa = g.slice_rows(rotations, j, j + 1)?;
        let local = rotation_on_graph(g, aa)?;
        match joint.parent {
            None => {
                let t = [
                    joint.offset[0] + root_translation[0],
                    joint.offset[1] + root_translation[1],
                    joint.offset[2] + root_translation[2],
                ];
                rots.push(local);
                pos.push(g.constant(row(t)?)?);
            }
            Some(p) => {
                let world = g.matmul(rots[p], local)?;
                let off = g.constant(row(joint.offset)?)?;
                let rt = g.transpose(rots[p]);
                let moved = g.matmul(off, rt)?;
                let pj = g.add(pos[p], moved)?;
                rots.push(world);
                pos.push(pj);
            }
        }
    }
    Ok(GraphTransforms {
        rotations: rots,
        positions: pos,
        rest: skeleton.rest_positions(),
    })
}

/// Ordered poses with a frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub fps: f64,
    pub poses: Vec<Pose>,
}

impl PoseSequence {
    pub fn find(&self, frame: i64) -> Option<&Pose> {
        self.poses.iter().find(|p| p.frame == frame)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "fps": self.fps,
            "frames": self.poses.iter().map(|p| json!({
                "id": p.frame,
                "root_t": p.root_translation,
                "rotations": p.rotations,
            })).collect::<Vec<_>>(),
        })
    }

    /// Parses and validates the pose-sequence JSON. Rotations with magnitude
    /// above pi are wrapped (with a logged warning).
    pub fn from_json(v: &Value) -> Result<Self, RigError> {
        let err = |frame: Option<usize>, field: &str, message: &str| RigError::Schema {
            frame,
            field: field.to_string(),
            message: message.to_string(),
        };
        let fps = v
            .get("fps")
            .and_then(Value::as_f64)
            .ok_or_else(|| err(None, "fps", "missing or not a number"))?;
        if !(fps > 0.0) {
            return Err(err(None, "fps", "must be positive"));
        }
        let frames = v
            .get("frames")
            .and_then(Value::as_array)
            .ok_or_else(|| err(None, "frames", "missing or not an array"))?;
        let mut poses = Vec::with_capacity(frames.len());
        let mut joints: Option<usize> = None;
        for (i, f) in frames.iter().enumerate() {
            let id = f
                .get("id")
                .and_then(Value::as_i64)
                .ok_or_else(|| err(Some(i), "id", "missing or not an integer"))?;
            let vec3 = |val: &Value, field: &str| -> Result<[f64; 3], RigError> {
                let arr = val
                    .as_array()
                    .filter(|a| a.len() == 3)
                    .ok_or_else(|| err(Some(i), field, "expected an array of 3 numbers"))?;
                let mut out = [0.0; 3];
                for (o, x) in out.iter_mut().zip(arr) {
                    *o = x
                        .as_f64()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| err(Some(i), field, "expected finite numbers"))?;
                }
                Ok(out)
            };
            let root = vec3(
                f.get("root_t").ok_or_else(|| err(Some(i), "root_t", "missing"))?,
                "root_t",
            )?;
            let rots = f
                .get("rotations")
                .and_then(Value::as_array)
                .ok_or_else(|| err(Some(i), "rotations", "missing or not an array"))?;
            let expected = *joints.get_or_insert(rots.len());
            if rots.len() != expected {
                return Err(err(
                    Some(i),
                    "rotations",
                    &format!("expected {expected} joint entries, found {}", rots.len()),
                ));
            }
            let mut rotations = Vec::with_capacity(rots.len());
            for (j, r) in rots.iter().enumerate() {
                let aa = vec3(r, &format!("rotations[{j}]"))?;
                let (aa, wrapped) = normalize_axis_angle(aa);
                if wrapped {
                    log::warn!("frame {id} joint {j}: axis-angle magnitude above pi, wrapped");
                }
                rotations.push(aa);
            }
            if let Some(prev) = poses.last().map(|p: &Pose| p.frame) {
                if id <= prev {
                    return Err(err(Some(i), "id", "frame ids must be strictly increasing"));
                }
            }
            poses.push(Pose {
                frame: id,
                root_translation: root,
                rotations,
            });
        }
        Ok(Self { fps, poses })
    }

    pub fn validate_for(&self, skeleton: &Skeleton) -> Result<(), RigError> {
        for (i, p) in self.poses.iter().enumerate() {
            if p.rotations.len() != skeleton.len() {
                return Err(RigError::Schema {
                    frame: Some(i),
                    field: "rotations".into(),
                    message: format!(
                        "expected {} joint entries, found {}",
                        skeleton.len(),
                        p.rotations.len()
                    ),
                });
            }
        }
        Ok(())
    }
}

pub fn load_pose_sequence(path: &Path) -> Result<PoseSequence, RigError> {
    let text = std::fs::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text)?;
    PoseSequence::from_json(&v)
}

pub fn save_pose_sequence(seq: &PoseSequence, path: &Path) -> Result<(), RigError> {
    std::fs::write(path, serde_json::to_string_pretty(&seq.to_json())?)?;
    Ok(())
}
