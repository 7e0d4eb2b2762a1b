//! Neural texture over the UV atlas, split into an albedo branch and a
//! shading branch whose product is the pixel colour.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{
    encoded_dim, positional_encode, Activation, Graph, KernelError, Mlp, OutputInit, ParamStore,
    Real, Tensor, Var,
};

pub const GROUP_CORE: &str = "texture.core";
pub const GROUP_ALBEDO: &str = "texture.albedo";
pub const GROUP_SHADING: &str = "texture.shading";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShadingMode {
    /// One gray multiplier per pixel.
    Scalar,
    /// Per-channel multiplier.
    Rgb,
    /// Shading fixed to 1, colour is albedo alone.
    Off,
}

impl ShadingMode {
    pub fn channels(self) -> usize {
        match self {
            ShadingMode::Rgb => 3,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureConfig {
    pub uv_bands: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub albedo_hidden: usize,
    pub shading_hidden: usize,
    pub direction_bands: usize,
    pub shading: ShadingMode,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            uv_bands: 6,
            feature_dim: 16,
            hidden: 64,
            albedo_hidden: 32,
            shading_hidden: 32,
            direction_bands: 2,
            shading: ShadingMode::Scalar,
        }
    }
}

impl TextureConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.feature_dim == 0 || self.hidden == 0 || self.albedo_hidden == 0 || self.shading_hidden == 0 {
            return Err("texture widths must be positive".into());
        }
        Ok(())
    }
}

/// `ln(e - 1)`, the softplus pre-activation giving exactly 1.
pub const UNIT_SOFTPLUS_BIAS: f32 = 0.541_324_8;

#[derive(Clone)]
pub struct TextureFields {
    core: Mlp,
    albedo: Mlp,
    shading: Mlp,
    uv_bands: usize,
    direction_bands: usize,
    mode: ShadingMode,
}

pub struct Shaded {
    /// `[n,3]` in `[0,1]`
    pub albedo: Var,
    /// `[n,1]` or `[n,3]`, non-negative
    pub shading: Var,
    /// `albedo * shading`, `[n,3]`
    pub color: Var,
}

impl TextureFields {
    pub fn new(
        store: &mut ParamStore,
        classes: usize,
        pose_dim: usize,
        cfg: &TextureConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, KernelError> {
        let core = Mlp::new(
            store,
            "texture.core",
            GROUP_CORE,
            &[encoded_dim(2, cfg.uv_bands, true) + classes, cfg.hidden, cfg.hidden, cfg.feature_dim],
            Activation::Relu,
            Activation::None,
            OutputInit::default(),
            rng,
        )?;
        let albedo = Mlp::new(
            store,
            "texture.albedo",
            GROUP_ALBEDO,
            &[cfg.feature_dim, cfg.albedo_hidden, 3],
            Activation::Relu,
            Activation::Sigmoid,
            OutputInit::default(),
            rng,
        )?;
        let m = cfg.shading.channels();
        let shading = Mlp::new(
            store,
            "texture.shading",
            GROUP_SHADING,
            &[
                cfg.feature_dim + encoded_dim(3, cfg.direction_bands, true) + pose_dim,
                cfg.shading_hidden,
                m,
            ],
            Activation::Relu,
            Activation::Softplus,
            OutputInit {
                weight_scale: 0.05,
                bias: Some(vec![UNIT_SOFTPLUS_BIAS; m]),
            },
            rng,
        )?;
        Ok(Self {
            core,
            albedo,
            shading,
            uv_bands: cfg.uv_bands,
            direction_bands: cfg.direction_bands,
            mode: cfg.shading,
        })
    }

    pub fn mode(&self) -> ShadingMode {
        self.mode
    }

    pub fn albedo_head(&self) -> &Mlp {
        &self.albedo
    }

    /// Texture feature from `u`, `v` (`[n,1]` each) and a semantic
    /// distribution `[n,C]`.
    pub fn feature<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        u: Var,
        v: Var,
        semantics: Var,
    ) -> Result<Var, KernelError> {
        let uv = g.concat_cols(&[u, v])?;
        let enc = positional_encode(g, uv, self.uv_bands, true)?;
        let input = g.concat_cols(&[enc, semantics])?;
        self.core.apply(g, store, input)
    }

    pub fn albedo<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, t: Var) -> Result<Var, KernelError> {
        self.albedo.apply(g, store, t)
    }

    /// Albedo, shading and their product. `direction` is `[n,3]`,
    /// `pose_embed` is a `[1,P]` row shared by all rows.
    pub fn shade<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        t: Var,
        direction: Var,
        pose_embed: Var,
    ) -> Result<Shaded, KernelError> {
        let n = g.value(t).rows();
        let albedo = self.albedo(g, store, t)?;
        let shading = match self.mode {
            ShadingMode::Off => g.constant(Tensor::full(&[n, 1], T::one()))?,
            _ => {
                let enc = positional_encode(g, direction, self.direction_bands, true)?;
                let pose = g.broadcast_rows(pose_embed, n)?;
                let input = g.concat_cols(&[t, enc, pose])?;
                self.shading.apply(g, store, input)?
            }
        };
        let color = match self.mode {
            ShadingMode::Off => albedo,
            ShadingMode::Scalar => g.mul_col(albedo, shading)?,
            ShadingMode::Rgb => g.mul(albedo, shading)?,
        };
        Ok(Shaded { albedo, shading, color })
    }
}
