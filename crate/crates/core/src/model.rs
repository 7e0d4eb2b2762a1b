//! The full avatar: skeleton, deformation, canonical and texture fields, and
//! per-frame pose corrections, all sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical_fields::{CanonicalConfig, CanonicalFields};
use crate::deformation::{Deformation, DeformationConfig};
use crate::diffkernel::{KernelError, ParamId, ParamStore, Tensor};
use crate::renderer::RenderConfig;
use crate::rig::{Pose, Skeleton, DEFAULT_RESIDUAL_BOUND};
use crate::texture_fields::{TextureConfig, TextureFields};

pub const GROUP_POSE: &str = "pose.residual";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub deformation: DeformationConfig,
    pub canonical: CanonicalConfig,
    pub texture: TextureConfig,
    pub render: RenderConfig,
    /// Componentwise clamp on learned pose corrections, radians.
    pub pose_residual_bound: f64,
    pub learn_pose_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            deformation: DeformationConfig::default(),
            canonical: CanonicalConfig::default(),
            texture: TextureConfig::default(),
            render: RenderConfig::default(),
            pose_residual_bound: DEFAULT_RESIDUAL_BOUND,
            learn_pose_residual: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.deformation.validate()?;
        self.canonical.validate()?;
        self.texture.validate()?;
        self.render.validate()?;
        if !(self.pose_residual_bound >= 0.0) {
            return Err("pose_residual_bound must be non-negative".into());
        }
        Ok(())
    }
}

/// Rows of the `pose.residual` tensor, one per training frame id.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseResidualParam {
    pub id: ParamId,
    pub frames: Vec<i64>,
}

#[derive(Clone)]
pub struct AvatarModel {
    pub config: ModelConfig,
    pub skeleton: Skeleton,
    pub store: ParamStore,
    pub deformation: Deformation,
    pub canonical: CanonicalFields,
    pub texture: TextureFields,
    pub residual: Option<PoseResidualParam>,
    /// Optimizer steps taken; gates the non-rigid field.
    pub step: u64,
}

impl AvatarModel {
    /// Builds freshly initialized fields. `training_frames` lists the frame
    /// ids that get a learnable pose correction.
    pub fn new(
        config: ModelConfig,
        skeleton: Skeleton,
        training_frames: &[i64],
        seed: u64,
    ) -> Result<Self, KernelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let capsules = skeleton.capsules();
        let deformation = Deformation::new(&mut store, capsules.clone(), &config.deformation, &mut rng)?;
        let canonical = CanonicalFields::new(&mut store, capsules, &config.canonical, &mut rng)?;
        let texture = TextureFields::new(
            &mut store,
            config.canonical.classes,
            3 * skeleton.len(),
            &config.texture,
            &mut rng,
        )?;
        let residual = if config.learn_pose_residual && !training_frames.is_empty() {
            let id = store.add(
                "pose.residual",
                GROUP_POSE,
                Tensor::zeros(&[training_frames.len(), 3 * skeleton.len()]),
            )?;
            Some(PoseResidualParam {
                id,
                frames: training_frames.to_vec(),
            })
        } else {
            None
        };
        Ok(Self {
            config,
            skeleton,
            store,
            deformation,
            canonical,
            texture,
            residual,
            step: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.canonical.classes
    }

    pub fn residual_row(&self, frame: i64) -> Option<usize> {
        self.residual
            .as_ref()
            .and_then(|r| r.frames.iter().position(|&f| f == frame))
    }

    /// Pose with the learned correction for `frame` applied (plain values).
    pub fn corrected_pose(&self, pose: &Pose) -> Pose {
        let Some((res, row)) = self.residual.as_ref().zip(self.residual_row(pose.frame)) else {
            return pose.clone();
        };
        let t = self.store.tensor(res.id);
        let rho = self.config.pose_residual_bound;
        let mut out = pose.clone();
        for (j, r) in out.rotations.iter_mut().enumerate() {
            for (a, ra) in r.iter_mut().enumerate() {
                let d = t.get(row, 3 * j + a) as f64;
                *ra += d.clamp(-rho, rho);
            }
        }
        out
    }
}
