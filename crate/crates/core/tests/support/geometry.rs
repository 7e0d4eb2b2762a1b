//! Compositing and deformation properties checked against brute-force and
//! closed-form references.

use std::sync::Arc;

use avatar_core::deformation::{skeletal_inverse_map, BlendWeightField, DeformationConfig, WeightSource};
use avatar_core::diffkernel::{Graph, ParamStore, Tensor};
use avatar_core::renderer::Composite;
use avatar_core::rig::{
    corrected_rotations_on_graph, forward_kinematics_on_graph, skinning_transforms, Capsule, Joint, Pose, Skeleton,
};
use avatar_core::synth_oracle::{trace_pixel, OracleDatasetConfig, OracleFigure};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, Default)]
pub struct CompositingStats {
    pub rays: usize,
    pub samples: usize,
    pub min_weight: f64,
    pub max_weight_sum: f64,
    /// Largest gap to the product-of-survivals reference.
    pub max_transmittance_error: f64,
}

/// Random rays with random densities and spacings. Values are one-hot per
/// sample, so the composited output exposes each weight directly.
pub fn compositing_stats(seed: u64, rays: usize) -> CompositingStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = CompositingStats {
        rays,
        min_weight: f64::INFINITY,
        ..Default::default()
    };
    for _ in 0..rays {
        let m = rng.gen_range(1..40);
        let mut depths = Vec::with_capacity(m);
        let mut deltas = Vec::with_capacity(m);
        let mut t = rng.gen_range(0.5..2.0);
        for _ in 0..m {
            let dt = rng.gen_range(1e-3..0.3);
            depths.push(t);
            deltas.push(dt);
            t += dt;
        }
        // Mix empty space, moderate and near-opaque densities.
        let sigma: Vec<f64> = (0..m)
            .map(|_| match rng.gen_range(0..3) {
                0 => 0.0,
                1 => rng.gen_range(0.0..5.0),
                _ => rng.gen_range(0.0..500.0),
            })
            .collect();
        let op = Arc::new(Composite::new(vec![0, m], &depths, deltas.clone()).expect("ordered samples"));
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::new(vec![m, 1], sigma.clone()).unwrap()).unwrap();
        let mut eye = vec![0.0; m * m];
        for k in 0..m {
            eye[k * m + k] = 1.0;
        }
        let v = g.constant(Tensor::new(vec![m, m], eye).unwrap()).unwrap();
        let out = g.custom(&[s, v], op).unwrap();
        let row = g.value(out).row(0).to_vec();
        let weights = &row[..m];
        let alpha = row[m];
        stats.samples += m;
        stats.max_weight_sum = stats.max_weight_sum.max(alpha);
        // Reference: survive every earlier segment, then stop in this one.
        let mut survive = 1.0f64;
        for k in 0..m {
            let stop = 1.0 - (-sigma[k] * deltas[k]).exp();
            let w_ref = survive * stop;
            survive *= 1.0 - stop;
            stats.min_weight = stats.min_weight.min(weights[k]);
            stats.max_transmittance_error = stats.max_transmittance_error.max((weights[k] - w_ref).abs());
        }
        stats.max_transmittance_error = stats.max_transmittance_error.max((alpha - (1.0 - survive)).abs());
    }
    stats
}

#[derive(Clone, Debug, Default)]
pub struct DeformationStats {
    /// Rest pose, learned-field weights: `|x_skel - x|`.
    pub identity_error: f64,
    /// One-bone skeleton under a random rigid pose vs the closed-form inverse.
    pub single_bone_error: f64,
    pub surface_points: usize,
    /// Posed oracle surface mapped back with the oracle's bone assignment.
    pub surface_max_error: f64,
    /// Same points with weights from the initial blend field, which blends
    /// neighbouring bones along seams. Reported, not bounded.
    pub prior_field_mean_error: f64,
    pub prior_field_max_error: f64,
}

fn max_row_error(a: &Tensor<f64>, b: &[[f64; 3]]) -> f64 {
    b.iter()
        .enumerate()
        .flat_map(|(i, p)| (0..3).map(move |c| (a.get(i, c) - p[c]).abs()))
        .fold(0.0, f64::max)
}

pub fn deformation_stats(seed: u64) -> DeformationStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = DeformationStats::default();
    let sk = Skeleton::six_part();
    let mut store = ParamStore::new();
    let field = BlendWeightField::new(&mut store, sk.capsules(), &DeformationConfig::default(), &mut rng).unwrap();

    // Identity: rest pose maps every on-body point onto itself.
    let pts: Vec<[f64; 3]> = sk
        .capsules()
        .iter()
        .flat_map(|c| {
            let c = *c;
            (0..40).map(move |i| {
                let t = i as f64 / 39.0;
                [c.a[0] + t * (c.b[0] - c.a[0]), c.a[1] + t * (c.b[1] - c.a[1]), c.a[2] + t * (c.b[2] - c.a[2])]
            })
        })
        .map(|p| [0, 1, 2].map(|a| p[a] + rng.gen_range(-0.02..0.02)))
        .collect();
    let pose = Pose::rest(sk.len());
    let mut g = Graph::<f64>::new();
    let rot = corrected_rotations_on_graph(&mut g, &pose, None, 0.2).unwrap();
    let tr = forward_kinematics_on_graph(&mut g, &sk, rot, pose.root_translation).unwrap();
    let x = g.constant(Tensor::new(vec![pts.len(), 3], pts.concat()).unwrap()).unwrap();
    let inv = skeletal_inverse_map(&mut g, &store, &tr, x, WeightSource::Field(&field)).unwrap();
    let on_body: Vec<[f64; 3]> = pts.iter().zip(&inv.off_body).filter(|(_, o)| !**o).map(|(p, _)| *p).collect();
    let xs = g.value(inv.x_skel);
    stats.identity_error = pts
        .iter()
        .zip(&inv.off_body)
        .enumerate()
        .filter(|(_, (_, o))| !**o)
        .flat_map(|(i, (p, _))| (0..3).map(move |c| (xs.get(i, c) - p[c]).abs()))
        .fold(0.0, f64::max);
    assert!(!on_body.is_empty());

    // Single bone: weights are identically one, so the map is the rigid inverse.
    let one = Skeleton::new(vec![Joint {
        name: "root".into(),
        parent: None,
        offset: [0.1, 0.9, -0.2],
        capsule: Capsule {
            a: [0.1, 0.6, -0.2],
            b: [0.1, 1.2, -0.2],
            radius: 0.15,
        },
    }])
    .unwrap();
    let mut pose1 = Pose::rest(1);
    pose1.rotations[0] = [0, 1, 2].map(|_| rng.gen_range(-1.5..1.5));
    pose1.root_translation = [0, 1, 2].map(|_| rng.gen_range(-0.5..0.5));
    let world = skinning_transforms(&one, &pose1).unwrap();
    let pts1: Vec<[f64; 3]> = (0..50).map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0))).collect();
    let mut g = Graph::<f64>::new();
    let rot = corrected_rotations_on_graph(&mut g, &pose1, None, 0.2).unwrap();
    let tr = forward_kinematics_on_graph(&mut g, &one, rot, pose1.root_translation).unwrap();
    let x = g.constant(Tensor::new(vec![pts1.len(), 3], pts1.concat()).unwrap()).unwrap();
    let w = g.constant(Tensor::full(&[pts1.len(), 1], 1.0)).unwrap();
    let inv = skeletal_inverse_map(&mut g, &ParamStore::new(), &tr, x, WeightSource::Given(w)).unwrap();
    let expect: Vec<[f64; 3]> = pts1
        .iter()
        .map(|p| {
            let q = world[0].inverse().apply(Vector3::from(*p));
            [q.x, q.y, q.z]
        })
        .collect();
    stats.single_bone_error = max_row_error(g.value(inv.x_skel), &expect);

    // Surface round-trip on oracle views of animated frames.
    let cfg = OracleDatasetConfig::default();
    let figure = OracleFigure::six_part(cfg.seed);
    let j = figure.skeleton.len();
    let mut oracle_errors = Vec::new();
    let mut prior_errors = Vec::new();
    for id in [3i64, 17, 31, 44] {
        let (cam, pose) = (cfg.camera(id), cfg.pose(id));
        let mut hits = Vec::new();
        for y in (0..cam.height).step_by(2) {
            for x in (0..cam.width).step_by(2) {
                if let Some(hit) = trace_pixel(&figure, &cam, &pose, x as f64 + 0.5, y as f64 + 0.5).unwrap() {
                    hits.push(hit);
                }
            }
        }
        let n = hits.len();
        let worlds: Vec<f64> = hits.iter().flat_map(|h| h.world).collect();
        let mut onehot = vec![0.0; n * j];
        for (i, h) in hits.iter().enumerate() {
            onehot[i * j + h.bone] = 1.0;
        }
        let mut g = Graph::<f64>::new();
        let rot = corrected_rotations_on_graph(&mut g, &pose, None, 0.2).unwrap();
        let tr = forward_kinematics_on_graph(&mut g, &figure.skeleton, rot, pose.root_translation).unwrap();
        let x = g.constant(Tensor::new(vec![n, 3], worlds).unwrap()).unwrap();
        let w = g.constant(Tensor::new(vec![n, j], onehot).unwrap()).unwrap();
        let by_oracle = skeletal_inverse_map(&mut g, &store, &tr, x, WeightSource::Given(w)).unwrap();
        let by_field = skeletal_inverse_map(&mut g, &store, &tr, x, WeightSource::Field(&field)).unwrap();
        let dist = |t: &Tensor<f64>, i: usize, p: [f64; 3]| (0..3).map(|c| (t.get(i, c) - p[c]).powi(2)).sum::<f64>().sqrt();
        for (i, h) in hits.iter().enumerate() {
            oracle_errors.push(dist(g.value(by_oracle.x_skel), i, h.canonical));
            prior_errors.push(dist(g.value(by_field.x_skel), i, h.canonical));
        }
    }
    stats.surface_points = oracle_errors.len();
    stats.surface_max_error = oracle_errors.iter().copied().fold(0.0, f64::max);
    stats.prior_field_max_error = prior_errors.iter().copied().fold(0.0, f64::max);
    stats.prior_field_mean_error = prior_errors.iter().sum::<f64>() / prior_errors.len().max(1) as f64;
    stats
}
