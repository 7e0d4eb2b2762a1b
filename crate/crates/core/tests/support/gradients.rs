//! Randomized finite-difference checks over every differentiable stage.

use std::sync::Arc;

use avatar_core::canonical_fields::{CanonicalConfig, CanonicalFields};
use avatar_core::deformation::{skeletal_inverse_map, Deformation, DeformationConfig, WeightSource};
use avatar_core::diffkernel::gradcheck::{check_input, check_params, GradCheckReport};
use avatar_core::diffkernel::{positional_encode, Activation, Graph, KernelError, Mlp, OutputInit, ParamStore, Tensor, Var};
use avatar_core::model::{AvatarModel, ModelConfig};
use avatar_core::objectives::{
    cross_entropy, gradient_difference, loss_mask, loss_rec, loss_reg, loss_smoothness, renormalize_semantics,
    row_normalize, total_loss, weighted_mse, LossComponents, LossWeights, PatchPair, Phase, RecInputs, RegInputs,
};
use avatar_core::renderer::{generate_rays, pose_stage, render_rays, Camera, Composite};
use avatar_core::rig::{corrected_rotations_on_graph, forward_kinematics_on_graph, Pose, Skeleton};
use avatar_core::texture_fields::{ShadingMode, TextureConfig, TextureFields};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIELD_TOLERANCE: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-4;
/// Share of probed coordinates, over the whole suite, allowed to land on a
/// ReLU or min kink and be skipped.
pub const MAX_KINK_SHARE: f64 = 0.01;

pub fn kink_share(trials: &[Trial]) -> f64 {
    let kinks: usize = trials.iter().map(|t| t.report.kinks).sum();
    let checked: usize = trials.iter().map(|t| t.report.checked).sum();
    kinks as f64 / (kinks + checked).max(1) as f64
}
const STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Trial {
    pub category: &'static str,
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl Trial {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_relative_error <= self.tolerance
    }
}

type Res<T> = Result<T, KernelError>;

fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `sum(v * W)` with a fixed random `W`, so every output entry matters.
fn probe(g: &mut Graph<f64>, v: Var, w: &Tensor<f64>) -> Res<Var> {
    let c = g.constant(w.clone())?;
    let p = g.mul(v, c)?;
    Ok(g.sum(p))
}

fn probe_weights(g_shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random(g_shape[0], g_shape[1], -1.0, 1.0, &mut rng)
}

/// Adds `probe(v)` terms for several outputs; weights are derived from `seed`.
fn probe_all(g: &mut Graph<f64>, vars: &[Var], seed: u64) -> Res<Var> {
    let mut total = g.scalar(0.0);
    for (k, &v) in vars.iter().enumerate() {
        let w = probe_weights(g.shape(v), seed.wrapping_add(k as u64 * 7919));
        let p = probe(g, v, &w)?;
        total = g.add(total, p)?;
    }
    Ok(total)
}

/// Moves every parameter off its initial value. Zero-initialised biases
/// otherwise park narrow ReLU layers exactly on their kink.
pub fn jitter_params(store: &mut ParamStore, amount: f32, rng: &mut impl Rng) {
    for id in all_params(store) {
        for v in store.tensor_mut(id).data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

fn all_params(store: &ParamStore) -> Vec<avatar_core::diffkernel::ParamId> {
    store.ids().collect()
}

fn encoding_trial(rng: &mut ChaCha8Rng) -> Res<Trial> {
    let (n, d, bands) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..7));
    let include = rng.gen_bool(0.5);
    let x = random(n, d, -1.0, 1.0, rng);
    let seed = rng.gen();
    let report = check_input(&x, STEP, |g, x| {
        let e = positional_encode(g, x, bands, include)?;
        probe_all(g, &[e], seed)
    })?;
    Ok(Trial {
        category: "encoders",
        name: format!("positional_encode n={n} d={d} bands={bands} input={include}"),
        report,
        tolerance: FIELD_TOLERANCE,
    })
}

const ACTIVATIONS: [Activation; 5] = [
    Activation::Relu,
    Activation::Sigmoid,
    Activation::Softplus,
    Activation::Tanh,
    Activation::None,
];

fn mlp_trial(rng: &mut ChaCha8Rng) -> Res<Trial> {
    let depth = rng.gen_range(2..5);
    let dims: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..7)).collect();
    let hidden = ACTIVATIONS[rng.gen_range(0..5)];
    let output = ACTIVATIONS[rng.gen_range(0..5)];
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", "g", &dims, hidden, output, OutputInit::default(), rng)?;
    jitter_params(&mut store, 0.1, rng);
    let x = random(rng.gen_range(1..5), dims[0], -1.0, 1.0, rng);
    let seed = rng.gen();
    let mut report = check_params(&store, &mlp.params(), STEP, 4, rng, |g| {
        let xi = g.constant(x.clone())?;
        let y = mlp.apply(g, &store, xi)?;
        probe_all(g, &[y], seed)
    })?;
    report.merge(check_input(&x, STEP, |g, xi| {
        let y = mlp.apply(g, &store, xi)?;
        probe_all(g, &[y], seed)
    })?);
    Ok(Trial {
        category: "mlps",
        name: format!("mlp dims={dims:?} hidden={hidden:?} output={output:?}"),
        report,
        tolerance: FIELD_TOLERANCE,
    })
}

pub fn random_pose(j: usize, scale: f64, rng: &mut impl Rng) -> Pose {
    let mut p = Pose::rest(j);
    for r in p.rotations.iter_mut() {
        *r = [0, 1, 2].map(|_| rng.gen_range(-scale..scale));
    }
    p.root_translation = [0, 1, 2].map(|_| rng.gen_range(-0.1..0.1));
    p
}

fn kinematics_trial(rng: &mut ChaCha8Rng) -> Res<Trial> {
    let sk = Skeleton::six_part();
    let j = sk.len();
    let pose = random_pose(j, 1.0, rng);
    let residual = random(1, 3 * j, -0.15, 0.15, rng);
    let seed = rng.gen();
    let report = check_input(&residual, STEP, |g, res| {
        let rot = corrected_rotations_on_graph(g, &pose, Some(res), 0.2)?;
        let tr = forward_kinematics_on_graph(g, &sk, rot, pose.root_translation)?;
        let mut outs = tr.rotations.clone();
        outs.extend(tr.positions.iter().copied());
        probe_all(g, &outs, seed)
    })?;
    Ok(Trial {
        category: "deformation",
        name: "pose correction + forward kinematics".into(),
        report,
        tolerance: FIELD_TOLERANCE,
    })
}

/// Points within the capsules (between 20% and 100% of the radius from
/// the axis), so every point has support from some bone.
pub fn body_points(sk: &Skeleton, n: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let caps = sk.capsules();
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let c = caps[rng.gen_range(0..caps.len())];
        let t: f64 = rng.gen_range(0.1..0.9);
        let dir: [f64; 3] = loop {
            let d = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0f64));
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.1 && norm <= 1.0 {
                break d.map(|v| v / norm);
            }
        };
        let r = c.radius * rng.gen_range(0.2..1.0);
        for (a, d) in dir.iter().enumerate() {
            data.push(c.a[a] + t * (c.b[a] - c.a[a]) + r * d);
        }
    }
    Tensor::new(vec![n, 3], data).unwrap()
}

fn deformation_trial(rng: &mut ChaCha8Rng, k: usize) -> Res<Trial> {
    let sk = Skeleton::six_part();
    let mut store = ParamStore::new();
    let cfg = DeformationConfig {
        weight_hidden: 8,
        nonrigid_hidden: 8,
        ..Default::default()
    };
    let def = Deformation::new(&mut store, sk.capsules(), &cfg, rng)?;
    jitter_params(&mut store, 0.05, rng);
    let pose = random_pose(sk.len(), 0.2, rng);
    let x = body_points(&sk, rng.gen_range(2..6), rng);
    let seed = rng.gen();
    let step = if k.is_multiple_of(2) { 10_000 } else { 0 };
    let build = |g: &mut Graph<f64>, xi: Var| -> Res<Var> {
        let rot = corrected_rotations_on_graph(g, &pose, None, 0.2)?;
        let tr = forward_kinematics_on_graph(g, &sk, rot, pose.root_translation)?;
        let emb = g.gather(rot, Arc::new((0..3 * sk.len()).collect()), vec![1, 3 * sk.len()])?;
        let out = def.deform(g, &store, &tr, emb, xi, step)?;
        probe_all(g, &[out.x_canonical, out.inverse.weights], seed)
    };
    let mut report = check_input(&x, STEP, build)?;
    report.merge(check_params(&store, &all_params(&store), STEP, 3, rng, |g| {
        let xi = g.constant(x.clone())?;
        build(g, xi)
    })?);
    // Given weights path.
    let w = random(x.rows(), sk.len(), 0.0, 1.0, rng);
    report.merge(check_input(&w, STEP, |g, wi| {
        let rot = corrected_rotations_on_graph(g, &pose, None, 0.2)?;
        let tr = forward_kinematics_on_graph(g, &sk, rot, pose.root_translation)?;
        let xi = g.constant(x.clone())?;
        let inv = skeletal_inverse_map(g, &store, &tr, xi, WeightSource::Given(wi))?;
        probe_all(g, &[inv.x_skel], seed)
    })?);
    // Pose correction flowing through skinning and the non-rigid field.
    let residual = random(1, 3 * sk.len(), -0.15, 0.15, rng);
    report.merge(check_input(&residual, STEP, |g, res| {
        let rot = corrected_rotations_on_graph(g, &pose, Some(res), 0.2)?;
        let tr = forward_kinematics_on_graph(g, &sk, rot, pose.root_translation)?;
        let emb = g.gather(rot, Arc::new((0..3 * sk.len()).collect()), vec![1, 3 * sk.len()])?;
        let xi = g.constant(x.clone())?;
        let out = def.deform(g, &store, &tr, emb, xi, step)?;
        probe_all(g, &[out.x_canonical], seed)
    })?);
    Ok(Trial {
        category: "deformation",
        name: format!("inverse skinning + non-rigid (active={})", step > 0),
        report,
        tolerance: FIELD_TOLERANCE,
    })
}

fn small_canonical(classes: usize) -> CanonicalConfig {
    CanonicalConfig {
        hidden: 12,
        layers: 2,
        feature_dim: 6,
        head_hidden: 8,
        classes,
        ..Default::default()
    }
}

fn canonical_trial(rng: &mut ChaCha8Rng) -> Res<Trial> {
    let sk = Skeleton::six_part();
    let mut store = ParamStore::new();
    let cfg = CanonicalConfig {
        use_view_direction: rng.gen_bool(0.5),
        ..small_canonical(7)
    };
    let fields = CanonicalFields::new(&mut store, sk.capsules(), &cfg, rng)?;
    jitter_params(&mut store, 0.05, rng);
    let x = body_points(&sk, rng.gen_range(2..5), rng);
    let dirs = random(x.rows(), 3, -1.0, 1.0, rng);
    let seed = rng.gen();
    let build = |g: &mut Graph<f64>, xi: Var| -> Res<Var> {
        let f = fields.volume.evaluate(g, &store, xi)?;
        let d = g.constant(dirs.clone())?;
        let uvs = fields.uvs.evaluate(g, &store, f.feature, d)?;
        let probs = g.softmax(uvs.logits);
        probe_all(g, &[f.sigma, f.feature, uvs.u, uvs.v, probs], seed)
    };
    let mut report = check_input(&x, STEP, build)?;
    // Density values are large near the body, so parameter probes use a
    // wider step to stay clear of roundoff.
    report.merge(check_params(&store, &all_params(&store), 1e-5, 3, rng, |g| {
        let xi = g.constant(x.clone())?;
        build(g, xi)
    })?);
    Ok(Trial {
        category: "canonical fields",
        name: format!("density, feature and uvs heads (view={})", cfg.use_view_direction),
        report,
        tolerance: FIELD_TOLERANCE,
    })
}

fn texture_trial(rng: &mut ChaCha8Rng, k: usize) -> Res<Trial> {
    let mode = [ShadingMode::Scalar, ShadingMode::Rgb, ShadingMode::Off][k % 3];
    let classes = 7;
    let mut store = ParamStore::new();
    let cfg = TextureConfig {
        feature_dim: 6,
        hidden: 12,
        albedo_hidden: 8,
        shading_hidden: 8,
        shading: mode,
        ..Default::default()
    };
    let tex = TextureFields::new(&mut store, classes, 18, &cfg, rng)?;
    jitter_params(&mut store, 0.05, rng);
    let n = rng.gen_range(2..5);
    let x = random(n, 2 + classes, 0.0, 1.0, rng);
    let dirs = random(n, 3, -1.0, 1.0, rng);
    let pose = random(1, 18, -0.5, 0.5, rng);
    let seed = rng.gen();
    let build = |g: &mut Graph<f64>, xi: Var| -> Res<Var> {
        let u = g.slice_cols(xi, 0, 1)?;
        let v = g.slice_cols(xi, 1, 2)?;
        let s = g.slice_cols(xi, 2, 2 + classes)?;
        let t = tex.feature(g, &store, u, v, s)?;
        let d = g.constant(dirs.clone())?;
        let p = g.constant(pose.clone())?;
        let sh = tex.shade(g, &store, t, d, p)?;
        probe_all(g, &[sh.albedo, sh.shading, sh.color], seed)
    };
    let mut report = check_input(&x, STEP, build)?;
    report.merge(check_params(&store, &all_params(&store), STEP, 3, rng, |g| {
        let xi = g.constant(x.clone())?;
        build(g, xi)
    })?);
    Ok(Trial {
        category: "texture",
        name: format!("texture feature, albedo, shading ({mode:?})"),
        report,
        tolerance: FIELD_TOLERANCE,
    })
}

fn compositing_trial(rng: &mut ChaCha8Rng) -> Res<Trial> {
    let rays = rng.gen_range(1..4);
    let mut offsets = vec![0];
    let mut depths = Vec::new();
    let mut deltas = Vec::new();
    for _ in 0..rays {
        let m = rng.gen_range(0..6);
        let mut t = rng.gen_range(1.0..2.0);
        for _ in 0..m {
            let dt = rng.gen_range(0.01..0.2);
            depths.push(t);
            deltas.push(dt);
            t += dt;
        }
        offsets.push(depths.len());
    }
    let n = depths.len();
    if n == 0 {
        return compositing_trial(rng);
    }
    let vc = rng.gen_range(1..5);
    let op = Arc::new(Composite::new(offsets, &depths, deltas).expect("valid layout"));
    let mut x = random(n, 1 + vc, -1.0, 1.0, rng);
    for i in 0..n {
        x.data_mut()[i * (1 + vc)] = rng.gen_range(0.0..20.0);
    }
    let seed = rng.gen();
    let report = check_input(&x, STEP, |g, xi| {
        let sigma = g.slice_cols(xi, 0, 1)?;
        let values = g.slice_cols(xi, 1, 1 + vc)?;
        let out = g.custom(&[sigma, values], op.clone())?;
        probe_all(g, &[out], seed)
    })?;
    Ok(Trial {
        category: "compositing",
        name: format!("composite rays={rays} samples={n} channels={vc}"),
        report,
        tolerance: FIELD_TOLERANCE,
    })
}

pub fn tiny_model_config() -> ModelConfig {
    let mut m = ModelConfig {
        canonical: small_canonical(7),
        ..Default::default()
    };
    m.deformation.weight_hidden = 8;
    m.deformation.nonrigid_hidden = 8;
    m.deformation.nonrigid_warmup = 0;
    m.texture.feature_dim = 6;
    m.texture.hidden = 12;
    m.texture.albedo_hidden = 8;
    m.texture.shading_hidden = 8;
    m.render.samples_per_ray = 10;
    m
}

fn render_trial(rng: &mut ChaCha8Rng) -> Res<Trial> {
    let mut model = AvatarModel::new(tiny_model_config(), Skeleton::six_part(), &[3], rng.gen())?;
    jitter_params(&mut model.store, 0.02, rng);
    model.step = 5;
    let mut pose = random_pose(6, 0.3, rng);
    pose.frame = 3;
    let cam = Camera::orbit(16, 16, 22.0, rng.gen_range(-1.0..1.0), 0.1, 3.0, [0.0, 0.05, 0.0]).expect("camera");
    let pixels: Vec<(u32, u32)> = (0..3).map(|_| (rng.gen_range(6..10), rng.gen_range(3..13))).collect();
    let rays = generate_rays(&cam, &pixels).expect("rays");
    let seed = rng.gen();
    // Sample placement follows the posed bounds and is not differentiated,
    // so the pose correction is checked through skinning instead.
    let ids: Vec<_> = all_params(&model.store)
        .into_iter()
        .filter(|&id| model.store.group_of(id) != "pose.residual")
        .collect();
    // The loss sums many samples, so a wider step keeps roundoff below
    // the tolerance on gradients near the relative-error floor.
    let report = check_params(&model.store, &ids, 1e-5, 2, rng, |g| {
        let stage = pose_stage(g, &model, &pose, Some(0)).map_err(|e| KernelError::NonFinite { op: e.to_string() })?;
        let out = render_rays(g, &model, &stage, &rays, None, false)
            .map_err(|e| KernelError::NonFinite { op: e.to_string() })?;
        probe_all(g, &[out.rgb, out.u, out.v, out.semantics, out.alpha], seed)
    })?;
    Ok(Trial {
        category: "compositing",
        name: "end-to-end ray render over all parameter groups".into(),
        report,
        tolerance: FIELD_TOLERANCE,
    })
}

fn loss_trial(rng: &mut ChaCha8Rng, k: usize) -> Res<Trial> {
    let w = LossWeights::default();
    let n = rng.gen_range(2..7);
    let c = 5;
    let seed: u64 = rng.gen();
    let (name, report) = match k % 10 {
        0 => {
            let x = random(n, 3, 0.0, 1.0, rng);
            let t = random(n, 3, 0.0, 1.0, rng);
            let fg = Tensor::new(vec![n, 1], (0..n).map(|i| (i % 2) as f64).collect()).unwrap();
            let weighted = rng.gen_bool(0.5);
            let r = check_input(&x, STEP, |g, xi| {
                let ti = g.constant(t.clone())?;
                let f = if weighted { Some(g.constant(fg.clone())?) } else { None };
                weighted_mse(g, xi, ti, f)
            })?;
            (format!("weighted_mse weighted={weighted}"), r)
        }
        1 => {
            let (wd, ht, scales) = (rng.gen_range(2..9), rng.gen_range(2..9), rng.gen_range(1..4));
            let x = random(wd * ht, 3, 0.0, 1.0, rng);
            let t = random(wd * ht, 3, 0.0, 1.0, rng);
            let r = check_input(&x, STEP, |g, xi| {
                let ti = g.constant(t.clone())?;
                gradient_difference(g, xi, ti, wd, ht, scales)
            })?;
            (format!("gradient_difference {wd}x{ht} scales={scales}"), r)
        }
        2 => {
            let side = 4;
            let x = random(n + side * side, 3, 0.0, 1.0, rng);
            let t = random(n + side * side, 3, 0.0, 1.0, rng);
            let r = check_input(&x, STEP, |g, xi| {
                let ti = g.constant(t.clone())?;
                let pred = g.slice_rows(xi, 0, n)?;
                let target = g.slice_rows(ti, 0, n)?;
                let pp = g.slice_rows(xi, n, n + side * side)?;
                let pt = g.slice_rows(ti, n, n + side * side)?;
                let inputs = RecInputs {
                    pred,
                    target,
                    foreground: None,
                    patch: Some(PatchPair {
                        pred: pp,
                        target: pt,
                        width: side,
                        height: side,
                    }),
                };
                loss_rec(g, &inputs, &w)
            })?;
            ("loss_rec with patch".into(), r)
        }
        3 => {
            let s = random(n, c, 0.05, 1.0, rng);
            let labels: Vec<Option<u8>> = (0..n).map(|i| (i % 3 != 0).then(|| rng.gen_range(1..c as u8))).collect();
            let r = check_input(&s, STEP, |g, si| {
                let p = row_normalize(g, si)?;
                cross_entropy(g, p, &labels)
            })?;
            ("cross_entropy of row-normalised semantics".into(), r)
        }
        4 => {
            let x = random(n, 2 + c + 1, 0.05, 1.0, rng);
            let tu: Vec<f32> = (0..n).map(|_| rng.gen()).collect();
            let tv: Vec<f32> = (0..n).map(|_| rng.gen()).collect();
            let labels: Vec<u8> = (0..n).map(|i| if i == 0 { 0 } else { rng.gen_range(1..c as u8) }).collect();
            let r = check_input(&x, STEP, |g, xi| {
                let u = g.slice_cols(xi, 0, 1)?;
                let v = g.slice_cols(xi, 1, 2)?;
                let s = g.slice_cols(xi, 2, 2 + c)?;
                let sm = g.slice_cols(xi, 2 + c, 3 + c)?;
                let smt = g.mean(sm);
                let inputs = RegInputs {
                    u,
                    v,
                    semantics: s,
                    target_u: &tu,
                    target_v: &tv,
                    labels: &labels,
                    smoothness: Some(smt),
                };
                Ok(loss_reg(g, &inputs, &w)?.total)
            })?;
            ("loss_reg with smoothness".into(), r)
        }
        5 => {
            let a = random(n, 1, 0.01, 0.99, rng);
            let m = Tensor::new(vec![n, 1], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            let r = check_input(&a, STEP, |g, ai| {
                let mi = g.constant(m.clone())?;
                loss_mask(g, ai, mi)
            })?;
            ("loss_mask".into(), r)
        }
        6 => {
            let sk = Skeleton::six_part();
            let mut store = ParamStore::new();
            let fields = CanonicalFields::new(&mut store, sk.capsules(), &small_canonical(c), rng)?;
            let pts = body_points(&sk, n, rng);
            let dirs = random(n, 3, -1.0, 1.0, rng);
            let jit = random(n, 3, -0.01, 0.01, rng);
            let r = check_params(&store, &all_params(&store), STEP, 3, rng, |g| {
                loss_smoothness(g, &store, &fields, &pts, &dirs, &jit)
            })?;
            ("loss_smoothness".into(), r)
        }
        7 | 8 => {
            let phase = if k % 10 == 7 { Phase::Warmup } else { Phase::Joint };
            let x = random(1, 3, 0.0, 1.0, rng);
            let r = check_input(&x, STEP, |g, xi| {
                let parts: Vec<Var> = (0..3).map(|i| g.slice_cols(xi, i, i + 1)).collect::<Res<_>>()?;
                let comps = LossComponents {
                    rec: Some(g.sum(parts[0])),
                    reg: Some(g.sum(parts[1])),
                    mask: Some(g.sum(parts[2])),
                };
                let sq = g.square(xi)?;
                let extra = g.sum(sq);
                let (t, _) = total_loss(g, &comps, &w, phase)?;
                g.add(t, extra)
            })?;
            (format!("total_loss {phase:?}"), r)
        }
        _ => {
            let x = random(n, c + 1, 0.01, 1.0, rng);
            let eps = 1e-3;
            let r = check_input(&x, STEP, |g, xi| {
                let s = g.slice_cols(xi, 0, c)?;
                let a = g.slice_cols(xi, c, c + 1)?;
                let p = renormalize_semantics(g, s, a, eps)?;
                probe_all(g, &[p], seed)
            })?;
            ("renormalize_semantics".into(), r)
        }
    };
    Ok(Trial {
        category: "losses",
        name,
        report,
        tolerance: LOSS_TOLERANCE,
    })
}

/// Runs the whole suite. `scale` multiplies the per-category trial counts
/// (1 gives 118 trials).
pub fn run_suite(seed: u64, scale: usize) -> Res<Vec<Trial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..12 * scale {
        out.push(encoding_trial(&mut rng)?);
    }
    for _ in 0..12 * scale {
        out.push(mlp_trial(&mut rng)?);
    }
    for _ in 0..8 * scale {
        out.push(kinematics_trial(&mut rng)?);
    }
    for k in 0..12 * scale {
        out.push(deformation_trial(&mut rng, k)?);
    }
    for _ in 0..10 * scale {
        out.push(canonical_trial(&mut rng)?);
    }
    for k in 0..12 * scale {
        out.push(texture_trial(&mut rng, k)?);
    }
    for _ in 0..12 * scale {
        out.push(compositing_trial(&mut rng)?);
    }
    for _ in 0..4 * scale {
        out.push(render_trial(&mut rng)?);
    }
    for k in 0..30 * scale {
        out.push(loss_trial(&mut rng, k)?);
    }
    Ok(out)
}
