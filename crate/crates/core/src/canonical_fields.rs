//! Canonical feature volume (density and feature vector) and the UV and
//! semantic heads that read it.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deformation::CapsuleDistance;
use crate::diffkernel::{
    encoded_dim, positional_encode, Activation, Graph, KernelError, Mlp, OutputInit, ParamStore,
    Real, Var,
};
use crate::rig::Capsule;

pub const GROUP_FEATURE: &str = "canonical.feature";
pub const GROUP_UVS: &str = "canonical.uvs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CanonicalConfig {
    pub position_bands: usize,
    pub direction_bands: usize,
    pub hidden: usize,
    pub layers: usize,
    pub feature_dim: usize,
    pub head_hidden: usize,
    /// Semantic classes including background.
    pub classes: usize,
    /// Feed the view direction into the UV and semantic heads. Off by
    /// default: on a monocular orbit it lets UVS vary with the camera and
    /// costs held-out views.
    pub use_view_direction: bool,
    /// Slope of the capsule density prior, per meter.
    pub density_prior_slope: f64,
    /// Prior pre-activation on the capsule surface.
    pub density_prior_offset: f64,
}

impl Default for CanonicalConfig {
    fn default() -> Self {
        Self {
            position_bands: 6,
            direction_bands: 2,
            hidden: 64,
            layers: 3,
            feature_dim: 32,
            head_hidden: 32,
            classes: 25,
            use_view_direction: false,
            density_prior_slope: 1000.0,
            density_prior_offset: 6.0,
        }
    }
}

impl CanonicalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden == 0 || self.layers == 0 || self.feature_dim == 0 || self.head_hidden == 0 {
            return Err("canonical widths and depth must be positive".into());
        }
        if self.classes < 2 {
            return Err("canonical.classes must be at least 2".into());
        }
        if !(self.density_prior_slope >= 0.0) || !self.density_prior_offset.is_finite() {
            return Err("canonical density prior must be finite and non-negative".into());
        }
        Ok(())
    }

    fn direction_dim(&self) -> usize {
        if self.use_view_direction {
            encoded_dim(3, self.direction_bands, true)
        } else {
            0
        }
    }
}

/// Maps canonical points to density `sigma >= 0` and a feature vector.
///
/// `sigma = softplus(raw + offset - slope * d_min)` where `d_min` is the
/// distance to the nearest rest capsule; the learned raw output starts small
/// so the initial volume is the capsule body.
#[derive(Clone)]
pub struct FeatureVolume {
    trunk: Mlp,
    density: Mlp,
    feature: Mlp,
    distance: Arc<CapsuleDistance>,
    bands: usize,
    slope: f64,
    offset: f64,
}

pub struct FeatureOutput {
    /// `[n, 1]`
    pub sigma: Var,
    /// `[n, F]`
    pub feature: Var,
}

impl FeatureVolume {
    pub fn new(
        store: &mut ParamStore,
        capsules: Vec<Capsule>,
        cfg: &CanonicalConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, KernelError> {
        let mut dims = vec![encoded_dim(3, cfg.position_bands, true)];
        dims.extend(std::iter::repeat_n(cfg.hidden, cfg.layers));
        let trunk = Mlp::new(
            store,
            "feature.trunk",
            GROUP_FEATURE,
            &dims,
            Activation::Relu,
            Activation::Relu,
            OutputInit::default(),
            rng,
        )?;
        let density = Mlp::new(
            store,
            "feature.density",
            GROUP_FEATURE,
            &[cfg.hidden, 1],
            Activation::None,
            Activation::None,
            OutputInit {
                weight_scale: 0.05,
                bias: None,
            },
            rng,
        )?;
        let feature = Mlp::new(
            store,
            "feature.out",
            GROUP_FEATURE,
            &[cfg.hidden, cfg.feature_dim],
            Activation::None,
            Activation::None,
            OutputInit::default(),
            rng,
        )?;
        Ok(Self {
            trunk,
            density,
            feature,
            distance: Arc::new(CapsuleDistance::new(capsules)),
            bands: cfg.position_bands,
            slope: cfg.density_prior_slope,
            offset: cfg.density_prior_offset,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.out_dim()
    }

    /// Fixed prior pre-activation at canonical points `[n,3]`.
    pub fn prior<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, KernelError> {
        let d = g.custom(&[x], self.distance.clone())?;
        let dmin = g.min_cols(d);
        let s = g.scale(dmin, T::from_f64_lossy(-self.slope));
        Ok(g.add_scalar(s, T::from_f64_lossy(self.offset)))
    }

    pub fn evaluate<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<FeatureOutput, KernelError> {
        let enc = positional_encode(g, x, self.bands, true)?;
        let h = self.trunk.apply(g, store, enc)?;
        let raw = self.density.apply(g, store, h)?;
        let prior = self.prior(g, x)?;
        let pre = g.add(raw, prior)?;
        let sigma = g.softplus(pre);
        let feature = self.feature.apply(g, store, h)?;
        Ok(FeatureOutput { sigma, feature })
    }
}

/// U, V and semantic heads over `(f, encoded d)`.
#[derive(Clone)]
pub struct UvsHeads {
    u: Mlp,
    v: Mlp,
    s: Mlp,
    bands: usize,
    use_direction: bool,
}

pub struct UvsOutput {
    /// `[n,1]` in `[0,1]`
    pub u: Var,
    pub v: Var,
    /// `[n,C]`
    pub logits: Var,
}

impl UvsHeads {
    pub fn new(store: &mut ParamStore, cfg: &CanonicalConfig, rng: &mut impl Rng) -> Result<Self, KernelError> {
        let din = cfg.feature_dim + cfg.direction_dim();
        let head = |store: &mut ParamStore, name: &str, out: usize, act, rng: &mut _| {
            Mlp::new(
                store,
                name,
                GROUP_UVS,
                &[din, cfg.head_hidden, out],
                Activation::Relu,
                act,
                OutputInit::default(),
                rng,
            )
        };
        Ok(Self {
            u: head(store, "uvs.u", 1, Activation::Sigmoid, rng)?,
            v: head(store, "uvs.v", 1, Activation::Sigmoid, rng)?,
            s: head(store, "uvs.s", cfg.classes, Activation::None, rng)?,
            bands: cfg.direction_bands,
            use_direction: cfg.use_view_direction,
        })
    }

    pub fn classes(&self) -> usize {
        self.s.out_dim()
    }

    pub fn semantic_head(&self) -> &Mlp {
        &self.s
    }

    /// `feature` is `[n,F]`, `direction` `[n,3]` unit rows.
    pub fn evaluate<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        feature: Var,
        direction: Var,
    ) -> Result<UvsOutput, KernelError> {
        let input = if self.use_direction {
            let enc = positional_encode(g, direction, self.bands, true)?;
            g.concat_cols(&[feature, enc])?
        } else {
            feature
        };
        Ok(UvsOutput {
            u: self.u.apply(g, store, input)?,
            v: self.v.apply(g, store, input)?,
            logits: self.s.apply(g, store, input)?,
        })
    }
}

#[derive(Clone)]
pub struct CanonicalFields {
    pub volume: FeatureVolume,
    pub uvs: UvsHeads,
}

impl CanonicalFields {
    pub fn new(
        store: &mut ParamStore,
        capsules: Vec<Capsule>,
        cfg: &CanonicalConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, KernelError> {
        Ok(Self {
            volume: FeatureVolume::new(store, capsules, cfg, rng)?,
            uvs: UvsHeads::new(store, cfg, rng)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::Tensor;
    use crate::rig::Skeleton;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fields(seed: u64, cfg: &CanonicalConfig) -> (ParamStore, CanonicalFields) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = CanonicalFields::new(&mut store, Skeleton::six_part().capsules(), cfg, &mut rng).unwrap();
        (store, f)
    }

    fn unit_dirs(n: usize, rng: &mut impl Rng) -> Tensor<f64> {
        let mut d = Vec::new();
        for _ in 0..n {
            let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            d.extend(v.iter().map(|x| x / l));
        }
        Tensor::new(vec![n, 3], d).unwrap()
    }

    #[test]
    fn far_points_are_empty_at_init() {
        let (store, f) = fields(1, &CanonicalConfig::default());
        let sk = Skeleton::six_part();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let caps = sk.capsules();
        let mut pts = Vec::new();
        while pts.len() < 3 * 200 {
            let p = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            if caps.iter().map(|c| c.distance(p)).fold(f64::INFINITY, f64::min) >= 1.0 {
                pts.extend(p);
            }
        }
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![200, 3], pts).unwrap()).unwrap();
        let out = f.volume.evaluate(&mut g, &store, x).unwrap();
        assert!(g.value(out.sigma).data().iter().all(|&s| (0.0..0.01).contains(&s)));
    }

    #[test]
    fn heads_stay_in_range() {
        let (store, f) = fields(2, &CanonicalConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let feat = Tensor::new(vec![30, 32], (0..960).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap();
        let fv = g.constant(feat).unwrap();
        let d = g.constant(unit_dirs(30, &mut rng)).unwrap();
        let out = f.uvs.evaluate(&mut g, &store, fv, d).unwrap();
        for v in [out.u, out.v] {
            assert!(g.value(v).data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
        let p = g.softmax(out.logits);
        for r in 0..30 {
            let s: f64 = g.value(p).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_semantic_head_is_uniform() {
        let (mut store, f) = fields(4, &CanonicalConfig::default());
        for id in f.uvs.semantic_head().params() {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let fv = g.constant(Tensor::full(&[4, 32], 0.3)).unwrap();
        let d = g.constant(unit_dirs(4, &mut rng)).unwrap();
        let out = f.uvs.evaluate(&mut g, &store, fv, d).unwrap();
        let p = g.softmax(out.logits);
        assert!(g.value(p).data().iter().all(|&x| (x - 0.04).abs() < 1e-12));
    }

    #[test]
    fn view_direction_can_be_dropped() {
        let cfg = CanonicalConfig {
            use_view_direction: false,
            classes: 7,
            ..Default::default()
        };
        let (store, f) = fields(6, &cfg);
        let mut g = Graph::<f64>::new();
        let fv = g.constant(Tensor::full(&[2, 32], 0.1)).unwrap();
        let d1 = g.constant(Tensor::new(vec![2, 3], vec![0., 0., 1., 1., 0., 0.]).unwrap()).unwrap();
        let out = f.uvs.evaluate(&mut g, &store, fv, d1).unwrap();
        assert_eq!(g.value(out.u).get(0, 0), g.value(out.u).get(1, 0));
        assert_eq!(f.uvs.classes(), 7);
    }

    #[test]
    fn view_direction_reaches_the_heads_when_enabled() {
        let cfg = CanonicalConfig {
            use_view_direction: true,
            classes: 7,
            ..Default::default()
        };
        let (store, f) = fields(6, &cfg);
        let mut g = Graph::<f64>::new();
        let fv = g.constant(Tensor::full(&[2, 32], 0.1)).unwrap();
        let d = g.constant(Tensor::new(vec![2, 3], vec![0., 0., 1., 1., 0., 0.]).unwrap()).unwrap();
        let out = f.uvs.evaluate(&mut g, &store, fv, d).unwrap();
        assert_ne!(g.value(out.u).get(0, 0), g.value(out.u).get(1, 0));
    }
}
