//! Backward deformation from observation space to canonical space: inverse
//! linear blend skinning driven by a canonical blend-weight field, followed by
//! a bounded pose-conditioned non-rigid offset.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{
    encoded_dim, positional_encode, Activation, CustomOp, Graph, KernelError, Mlp, OutputInit,
    ParamStore, Real, Tensor, Var,
};
use crate::rig::{Capsule, GraphTransforms};

pub const GROUP_WEIGHTS: &str = "deformation.weights";
pub const GROUP_NONRIGID: &str = "deformation.nonrigid";

/// Selected weights summing below this mark a sample as off-body.
pub const OFF_BODY_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationConfig {
    /// Upper bound on the non-rigid offset norm, meters.
    pub delta_max: f64,
    pub weight_bands: usize,
    pub weight_hidden: usize,
    /// Capsule prior temperature, meters.
    pub weight_temperature: f64,
    /// Distance from every bone at which the free-space class takes over.
    pub free_space_margin: f64,
    /// Bound on the learned logit residual added to the capsule prior.
    pub weight_residual_bound: f64,
    pub nonrigid_bands: usize,
    pub nonrigid_hidden: usize,
    /// Step before which the non-rigid offset is forced to zero.
    pub nonrigid_warmup: u64,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self {
            delta_max: 0.1,
            weight_bands: 2,
            weight_hidden: 16,
            weight_temperature: 0.01,
            free_space_margin: 0.1,
            weight_residual_bound: 3.0,
            nonrigid_bands: 3,
            nonrigid_hidden: 32,
            nonrigid_warmup: 1000,
        }
    }
}

impl DeformationConfig {
    pub fn validate(&self) -> Result<(), String> {
        let pos = [
            ("delta_max", self.delta_max),
            ("weight_temperature", self.weight_temperature),
            ("free_space_margin", self.free_space_margin),
            ("weight_residual_bound", self.weight_residual_bound),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("deformation.{name} must be positive"));
            }
        }
        if self.weight_hidden == 0 || self.nonrigid_hidden == 0 {
            return Err("deformation hidden widths must be positive".into());
        }
        Ok(())
    }
}

/// Signed distance from every row of `x` (`[n,3]`) to each capsule surface,
/// producing `[n, J]`.
pub struct CapsuleDistance {
    capsules: Vec<Capsule>,
}

impl CapsuleDistance {
    pub fn new(capsules: Vec<Capsule>) -> Self {
        Self { capsules }
    }

    pub fn capsules(&self) -> &[Capsule] {
        &self.capsules
    }

    /// Distance and unit gradient direction for one point and capsule.
    fn eval(c: &Capsule, p: [f64; 3]) -> (f64, [f64; 3]) {
        let ba = [c.b[0] - c.a[0], c.b[1] - c.a[1], c.b[2] - c.a[2]];
        let pa = [p[0] - c.a[0], p[1] - c.a[1], p[2] - c.a[2]];
        let denom = ba[0] * ba[0] + ba[1] * ba[1] + ba[2] * ba[2];
        let h = if denom > 0.0 {
            ((pa[0] * ba[0] + pa[1] * ba[1] + pa[2] * ba[2]) / denom).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let r = [pa[0] - ba[0] * h, pa[1] - ba[1] * h, pa[2] - ba[2] * h];
        let len = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        let dir = if len > 1e-12 {
            [r[0] / len, r[1] / len, r[2] / len]
        } else {
            [0.0; 3]
        };
        (len - c.radius, dir)
    }
}

impl<T: Real> CustomOp<T> for CapsuleDistance {
    fn name(&self) -> &'static str {
        "capsule_distance"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, KernelError> {
        let x = inputs[0];
        if x.cols() != 3 {
            return Err(KernelError::ShapeMismatch {
                op: "capsule_distance".into(),
                left: x.shape().to_vec(),
                right: vec![x.rows(), 3],
            });
        }
        let j = self.capsules.len();
        let mut out = Vec::with_capacity(x.rows() * j);
        for r in 0..x.rows() {
            let p = row3(x.row(r));
            for c in &self.capsules {
                out.push(T::from_f64_lossy(Self::eval(c, p).0));
            }
        }
        Tensor::new(vec![x.rows(), j], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let j = self.capsules.len();
        let mut gx = vec![T::zero(); x.len()];
        for r in 0..x.rows() {
            let p = row3(x.row(r));
            for (k, c) in self.capsules.iter().enumerate() {
                let gk = grad.data()[r * j + k].to_f64_lossy();
                if gk == 0.0 {
                    continue;
                }
                let (_, dir) = Self::eval(c, p);
                for a in 0..3 {
                    gx[r * 3 + a] = gx[r * 3 + a] + T::from_f64_lossy(gk * dir[a]);
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), gx).expect("finite gradient"))]
    }
}

fn row3<T: Real>(r: &[T]) -> [f64; 3] {
    [r[0].to_f64_lossy(), r[1].to_f64_lossy(), r[2].to_f64_lossy()]
}

/// Canonical skinning weights over `J` bones plus a free-space class.
///
/// Logits are a capsule-distance prior (`-d_k / tau` per bone, a constant
/// `-margin / tau` for free space) plus a bounded learned residual whose
/// output layer starts at zero, so the rest body is skinned by its nearest
/// capsules at step 0.
#[derive(Clone)]
pub struct BlendWeightField {
    mlp: Mlp,
    distance: Arc<CapsuleDistance>,
    bands: usize,
    temperature: f64,
    margin: f64,
    bound: f64,
}

impl BlendWeightField {
    pub fn new(
        store: &mut ParamStore,
        capsules: Vec<Capsule>,
        cfg: &DeformationConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, KernelError> {
        let j = capsules.len();
        let mlp = Mlp::new(
            store,
            "blend_weights",
            GROUP_WEIGHTS,
            &[encoded_dim(3, cfg.weight_bands, true), cfg.weight_hidden, j + 1],
            Activation::Relu,
            Activation::Tanh,
            OutputInit {
                weight_scale: 0.0,
                bias: None,
            },
            rng,
        )?;
        Ok(Self {
            mlp,
            distance: Arc::new(CapsuleDistance::new(capsules)),
            bands: cfg.weight_bands,
            temperature: cfg.weight_temperature,
            margin: cfg.free_space_margin,
            bound: cfg.weight_residual_bound,
        })
    }

    pub fn bones(&self) -> usize {
        self.distance.capsules().len()
    }

    /// Logits `[n, J+1]` at canonical points `[n, 3]`.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var, KernelError> {
        let n = g.value(x).rows();
        let d = g.custom(&[x], self.distance.clone())?;
        let bone_prior = g.scale(d, T::from_f64_lossy(-1.0 / self.temperature));
        let free = g.constant(Tensor::full(&[n, 1], T::from_f64_lossy(-self.margin / self.temperature)))?;
        let prior = g.concat_cols(&[bone_prior, free])?;
        let enc = positional_encode(g, x, self.bands, true)?;
        let res = self.mlp.apply(g, store, enc)?;
        let res = g.scale(res, T::from_f64_lossy(self.bound));
        g.add(prior, res)
    }

    pub fn probabilities<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var, KernelError> {
        let l = self.logits(g, store, x)?;
        Ok(g.softmax(l))
    }
}

/// Where observation-space skinning weights come from.
pub enum WeightSource<'a> {
    /// Evaluate the canonical field at each bone's candidate point and
    /// renormalize the matching entries.
    Field(&'a BlendWeightField),
    /// Observation-space weights `[n, J]` supplied directly (rows sum to 1).
    Given(Var),
}

pub struct InverseMap {
    /// Skeletally unposed points `[n, 3]`.
    pub x_skel: Var,
    /// Renormalized observation-space weights `[n, J]`.
    pub weights: Var,
    /// Samples whose selected weights vanish; their density must be zeroed.
    pub off_body: Vec<bool>,
}

impl InverseMap {
    /// `[n,1]` column with 0 at off-body rows and 1 elsewhere.
    pub fn on_body_column<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.off_body.len(), 1],
            self.off_body
                .iter()
                .map(|&o| if o { T::zero() } else { T::one() })
                .collect(),
        )
        .expect("finite mask")
    }
}

/// Candidate canonical points for every bone: `(x - p_k) R_k + rest_k`.
pub fn bone_candidates<T: Real>(
    g: &mut Graph<T>,
    transforms: &GraphTransforms,
    x: Var,
) -> Result<Vec<Var>, KernelError> {
    let mut out = Vec::with_capacity(transforms.rotations.len());
    for k in 0..transforms.rotations.len() {
        let neg_p = g.scale(transforms.positions[k], -T::one());
        let centered = g.add_row(x, neg_p)?;
        let local = g.matmul(centered, transforms.rotations[k])?;
        let rest = g.constant(Tensor::new(
            vec![1, 3],
            transforms.rest[k].iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )?)?;
        out.push(g.add_row(local, rest)?);
    }
    Ok(out)
}

/// `x_skel = sum_k w_k(x) * inverse_k(x)` for observation points `x` (`[n,3]`).
pub fn skeletal_inverse_map<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore,
    transforms: &GraphTransforms,
    x: Var,
    source: WeightSource<'_>,
) -> Result<InverseMap, KernelError> {
    let n = g.value(x).rows();
    let j = transforms.rotations.len();
    let cands = bone_candidates(g, transforms, x)?;
    let (weights, off_body) = match source {
        WeightSource::Given(w) => {
            if g.shape(w) != [n, j] {
                return Err(KernelError::ShapeMismatch {
                    op: "skeletal_inverse_map weights".into(),
                    left: g.shape(w).to_vec(),
                    right: vec![n, j],
                });
            }
            (w, vec![false; n])
        }
        WeightSource::Field(field) => {
            if field.bones() != j {
                return Err(KernelError::ShapeMismatch {
                    op: "blend weight bones".into(),
                    left: vec![field.bones()],
                    right: vec![j],
                });
            }
            let stacked = g.concat_rows(&cands)?;
            let probs = field.probabilities(g, store, stacked)?;
            // Entry k of block k, laid out as [n, J].
            let idx: Vec<usize> = (0..n)
                .flat_map(|i| (0..j).map(move |k| (k * n + i) * (j + 1) + k))
                .collect();
            let selected = g.gather(probs, Arc::new(idx), vec![n, j])?;
            let total = g.row_sums(selected);
            let off_body: Vec<bool> = g
                .value(total)
                .data()
                .iter()
                .map(|s| s.to_f64_lossy() < OFF_BODY_THRESHOLD)
                .collect();
            let floor = T::from_f64_lossy(OFF_BODY_THRESHOLD);
            let safe = g.clamp(total, floor, T::max_value());
            let inv = g.unary(safe, crate::diffkernel::Unary::Recip)?;
            (g.mul_col(selected, inv)?, off_body)
        }
    };
    let mut x_skel: Option<Var> = None;
    for (k, cand) in cands.iter().enumerate() {
        let wk = g.slice_cols(weights, k, k + 1)?;
        let term = g.mul_col(*cand, wk)?;
        x_skel = Some(match x_skel {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(InverseMap {
        x_skel: x_skel.expect("skeleton has at least one joint"),
        weights,
        off_body,
    })
}

/// Pose-conditioned offset in canonical space, `||dx|| <= delta_max`.
#[derive(Clone)]
pub struct NonRigidField {
    mlp: Mlp,
    bands: usize,
    delta_max: f64,
    warmup: u64,
}

impl NonRigidField {
    pub fn new(
        store: &mut ParamStore,
        pose_dim: usize,
        cfg: &DeformationConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, KernelError> {
        let mlp = Mlp::new(
            store,
            "nonrigid",
            GROUP_NONRIGID,
            &[
                encoded_dim(3, cfg.nonrigid_bands, true) + pose_dim,
                cfg.nonrigid_hidden,
                cfg.nonrigid_hidden,
                3,
            ],
            Activation::Relu,
            Activation::Tanh,
            OutputInit {
                weight_scale: 0.0,
                bias: None,
            },
            rng,
        )?;
        Ok(Self {
            mlp,
            bands: cfg.nonrigid_bands,
            delta_max: cfg.delta_max,
            warmup: cfg.nonrigid_warmup,
        })
    }

    pub fn active(&self, step: u64) -> bool {
        step >= self.warmup
    }

    pub fn delta_max(&self) -> f64 {
        self.delta_max
    }

    /// Offsets `[n,3]`; each component is bounded by `delta_max / sqrt(3)`.
    pub fn offsets<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x_skel: Var,
        pose_embed: Var,
    ) -> Result<Var, KernelError> {
        let n = g.value(x_skel).rows();
        let enc = positional_encode(g, x_skel, self.bands, true)?;
        let pose = g.broadcast_rows(pose_embed, n)?;
        let input = g.concat_cols(&[enc, pose])?;
        let raw = self.mlp.apply(g, store, input)?;
        Ok(g.scale(raw, T::from_f64_lossy(self.delta_max / 3f64.sqrt())))
    }
}

#[derive(Clone)]
pub struct Deformation {
    pub weights: BlendWeightField,
    pub nonrigid: NonRigidField,
}

pub struct Deformed {
    pub x_canonical: Var,
    pub inverse: InverseMap,
}

impl Deformation {
    pub fn new(
        store: &mut ParamStore,
        capsules: Vec<Capsule>,
        cfg: &DeformationConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, KernelError> {
        let pose_dim = 3 * capsules.len();
        Ok(Self {
            weights: BlendWeightField::new(store, capsules, cfg, rng)?,
            nonrigid: NonRigidField::new(store, pose_dim, cfg, rng)?,
        })
    }

    /// `x_c = x_skel + dx(x_skel, pose)`, with `dx = 0` before the warm-up step.
    /// `pose_embed` is the `[1, 3J]` corrected axis-angle row.
    pub fn deform<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        transforms: &GraphTransforms,
        pose_embed: Var,
        x: Var,
        step: u64,
    ) -> Result<Deformed, KernelError> {
        let inverse = skeletal_inverse_map(g, store, transforms, x, WeightSource::Field(&self.weights))?;
        let x_canonical = if self.nonrigid.active(step) {
            let dx = self.nonrigid.offsets(g, store, inverse.x_skel, pose_embed)?;
            g.add(inverse.x_skel, dx)?
        } else {
            inverse.x_skel
        };
        Ok(Deformed { x_canonical, inverse })
    }
}
