//! Measurements on trained models against the oracle figure: UVS fidelity,
//! albedo/shading disentanglement and edit routing.

use avatar_core::dataset::SupervisionFrame;
use avatar_core::diffkernel::Graph;
use avatar_core::imageio::rgb_to_hsv;
use avatar_core::language_brush::{
    export_albedo_atlas, iterative_dataset_update, EditSession, Editor, FreezeMask, TORSO_LABEL,
};
use avatar_core::model::AvatarModel;
use avatar_core::rig::Pose;
use avatar_core::renderer::{generate_rays_at, pose_stage, render_rays, Camera, RenderedBuffers};
use avatar_core::synth_oracle::{lambertian, trace_pixel, CameraRecord, OracleFigure};
use avatar_core::trainer::{evaluate, render_frame, TrainState};

pub fn record_of(c: &Camera) -> CameraRecord {
    CameraRecord {
        width: c.width,
        height: c.height,
        fx: c.fx,
        fy: c.fy,
        cx: c.cx,
        cy: c.cy,
        rotation: c.rotation,
        translation: c.translation,
    }
}

#[derive(Clone, Debug, Default)]
pub struct UvsFidelity {
    pub body_pixels: usize,
    pub uv_mae: f64,
    pub semantic_accuracy: f64,
}

/// Rendered (u, v) and labels against the oracle buffers on foreground pixels.
pub fn uvs_fidelity(model: &AvatarModel, frames: &[&SupervisionFrame]) -> UvsFidelity {
    let (mut n, mut err, mut hits) = (0usize, 0.0f64, 0usize);
    for f in frames {
        let (Some((u, v)), Some(labels)) = (&f.uv, &f.labels) else {
            continue;
        };
        let b = render_frame(model, f).unwrap();
        let pred = b.labels();
        for i in 0..f.mask.len() {
            if f.mask[i] < 0.5 {
                continue;
            }
            n += 1;
            err += ((b.u[i] - u[i]).abs() + (b.v[i] - v[i]).abs()) as f64 / 2.0;
            hits += (pred[i] == labels[i]) as usize;
        }
    }
    UvsFidelity {
        body_pixels: n,
        uv_mae: err / n.max(1) as f64,
        semantic_accuracy: hits as f64 / n.max(1) as f64,
    }
}

#[derive(Clone, Debug, Default)]
pub struct Disentanglement {
    pub views: usize,
    /// Surface points visible in every view.
    pub points: usize,
    /// Mean over points of the per-channel albedo standard deviation.
    pub albedo_std: [f64; 3],
    /// Pearson correlation between per-point deviations of the rendered
    /// colour and of the oracle Lambertian colour.
    pub color_correlation: f64,
    /// RMS of the per-point colour deviations, oracle and rendered.
    pub truth_variation: f64,
    pub render_variation: f64,
    /// Same correlation between the shading output and the oracle's
    /// `k_a + k_d max(0, n.l)` factor.
    pub shading_correlation: f64,
}

impl Disentanglement {
    pub fn max_albedo_std(&self) -> f64 {
        self.albedo_std.iter().copied().fold(0.0, f64::max)
    }
}

/// One tracked view: camera, pose and the residual row applied to it.
pub struct View<'a> {
    pub camera: &'a Camera,
    pub pose: &'a Pose,
    pub residual_row: Option<usize>,
}

impl<'a> View<'a> {
    pub fn of(model: &AvatarModel, f: &'a SupervisionFrame) -> Self {
        Self {
            camera: &f.camera,
            pose: &f.pose,
            residual_row: model.residual_row(f.id),
        }
    }
}

/// Canonical surface points seen from the first view are posed into every
/// view, kept if the oracle sees the same point there, and rendered at
/// their exact sub-pixel position.
pub fn disentanglement(model: &AvatarModel, figure: &OracleFigure, views: &[View<'_>]) -> Disentanglement {
    let first = &views[0];
    let cam0 = record_of(first.camera);
    let mut seeds = Vec::new();
    for y in 0..cam0.height {
        for x in 0..cam0.width {
            if let Some(hit) = trace_pixel(figure, &cam0, first.pose, x as f64 + 0.5, y as f64 + 0.5).unwrap() {
                seeds.push(hit);
            }
        }
    }
    // Per seed and view: the projected position and the oracle colour.
    let mut tracks: Vec<Vec<Track>> = vec![Vec::new(); seeds.len()];
    for view in views {
        let cam = record_of(view.camera);
        let bones = figure.bone_isometries(view.pose).unwrap();
        for (s, hit) in seeds.iter().enumerate() {
            let world = bones[hit.bone] * nalgebra::Point3::from(hit.canonical);
            let Some((x, y)) = view.camera.project([world.x, world.y, world.z]) else {
                continue;
            };
            if x < 0.0 || y < 0.0 || x >= cam.width as f64 || y >= cam.height as f64 {
                continue;
            }
            let Some(seen) = trace_pixel(figure, &cam, view.pose, x, y).unwrap() else {
                continue;
            };
            let gap = (0..3).map(|a| (seen.canonical[a] - hit.canonical[a]).powi(2)).sum::<f64>().sqrt();
            if seen.bone != hit.bone || gap > 1e-6 {
                continue;
            }
            let albedo = figure.albedo_at(hit.bone, hit.canonical);
            let color = lambertian(albedo, seen.normal, figure.light, figure.k_diffuse, figure.k_ambient);
            let factor = lambertian([1.0; 3], seen.normal, figure.light, figure.k_diffuse, figure.k_ambient)[0];
            tracks[s].push((x, y, color, factor));
        }
    }
    let full: Vec<usize> = (0..seeds.len()).filter(|&s| tracks[s].len() == views.len()).collect();

    // Rendered albedo and colour per (point, view).
    let mut albedo = vec![vec![[0.0f64; 3]; views.len()]; full.len()];
    let mut rgb = vec![vec![[0.0f64; 3]; views.len()]; full.len()];
    let mut shading = vec![vec![0.0f64; views.len()]; full.len()];
    for (v, view) in views.iter().enumerate() {
        let pts: Vec<(f64, f64)> = full.iter().map(|&s| (tracks[s][v].0, tracks[s][v].1)).collect();
        let rays = generate_rays_at(view.camera, &pts).unwrap();
        let mut g = Graph::<f64>::new();
        let stage = pose_stage(&mut g, model, view.pose, view.residual_row).unwrap();
        let out = render_rays(&mut g, model, &stage, &rays, None, false).unwrap();
        let (a, c, m) = (g.value(out.albedo), g.value(out.rgb), g.value(out.shading));
        for k in 0..full.len() {
            shading[k][v] = m.get(k, 0);
            albedo[k][v] = [a.get(k, 0), a.get(k, 1), a.get(k, 2)];
            rgb[k][v] = [c.get(k, 0), c.get(k, 1), c.get(k, 2)];
        }
    }

    let mean = |xs: &[[f64; 3]], c: usize| xs.iter().map(|p| p[c]).sum::<f64>() / xs.len() as f64;
    let mut std = [0.0; 3];
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    let (mut mxy, mut mxx, mut myy) = (0.0, 0.0, 0.0);
    for (k, &s) in full.iter().enumerate() {
        let mm = shading[k].iter().sum::<f64>() / views.len() as f64;
        let mf = tracks[s].iter().map(|t| t.3).sum::<f64>() / views.len() as f64;
        for v in 0..views.len() {
            let (dx, dy) = (shading[k][v] - mm, tracks[s][v].3 - mf);
            mxy += dx * dy;
            mxx += dx * dx;
            myy += dy * dy;
        }
        let truth: Vec<[f64; 3]> = tracks[s].iter().map(|t| t.2).collect();
        for c in 0..3 {
            let m = mean(&albedo[k], c);
            let var = albedo[k].iter().map(|p| (p[c] - m).powi(2)).sum::<f64>() / views.len() as f64;
            std[c] += var.sqrt() / full.len() as f64;
            let (mr, mt) = (mean(&rgb[k], c), mean(&truth, c));
            for v in 0..views.len() {
                let (dx, dy) = (rgb[k][v][c] - mr, truth[v][c] - mt);
                sxy += dx * dy;
                sxx += dx * dx;
                syy += dy * dy;
            }
        }
    }
    Disentanglement {
        views: views.len(),
        points: full.len(),
        albedo_std: std,
        color_correlation: sxy / (sxx * syy).sqrt().max(f64::MIN_POSITIVE),
        truth_variation: (syy / (3 * views.len() * full.len()).max(1) as f64).sqrt(),
        render_variation: (sxx / (3 * views.len() * full.len()).max(1) as f64).sqrt(),
        shading_correlation: mxy / (mxx * myy).sqrt().max(f64::MIN_POSITIVE),
    }
}

/// Groups trained by the red-shirt edit.
pub const TEXTURE_GROUPS: [&str; 3] = ["texture.core", "texture.albedo", "texture.shading"];

pub struct EditRun {
    pub before: Vec<RenderedBuffers>,
    pub after: Vec<RenderedBuffers>,
    pub atlas_drift: f64,
    pub psnr_before: f64,
    pub psnr_after: f64,
    pub state: TrainState,
}

/// Projected pixel, oracle colour and shading factor of a point in one view.
type Track = (f64, f64, [f64; 3], f64);

/// One edit session from `state`, rendered on `eval` before and after.
#[allow(clippy::too_many_arguments)]
pub fn run_edit(
    mut state: TrainState,
    frames: &[SupervisionFrame],
    train_ids: &[i64],
    eval: &[&SupervisionFrame],
    prompt: &str,
    editor: Box<dyn Editor>,
    unfrozen: &[&str],
    steps: u64,
    period: u64,
) -> EditRun {
    let render = |s: &TrainState| -> Vec<RenderedBuffers> { eval.iter().map(|f| render_frame(&s.model, f).unwrap()).collect() };
    let before = render(&state);
    let atlas = export_albedo_atlas(&state.model, 16).unwrap();
    let psnr_before = evaluate(&state.model, eval).unwrap().psnr;

    let mut frames = frames.to_vec();
    let mask = FreezeMask::all_except(&state.model.store, unfrozen).unwrap();
    let editable: Vec<&SupervisionFrame> = frames.iter().filter(|f| train_ids.contains(&f.id)).collect();
    let mut session = EditSession::new(prompt, mask, editor, period, &editable).unwrap();
    iterative_dataset_update(&mut session, &mut state, &mut frames, train_ids, steps).unwrap();

    let after = render(&state);
    let atlas_after = export_albedo_atlas(&state.model, 16).unwrap();
    let atlas_drift = atlas
        .iter()
        .flatten()
        .zip(atlas_after.iter().flatten())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    let psnr_after = evaluate(&state.model, eval).unwrap().psnr;
    EditRun {
        before,
        after,
        atlas_drift,
        psnr_before,
        psnr_after,
        state,
    }
}

fn foreground_mean(b: &[RenderedBuffers], eval: &[&SupervisionFrame]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (buf, f) in b.iter().zip(eval) {
        for (i, m) in f.mask.iter().enumerate() {
            if *m >= 0.5 {
                sum += buf.rgb[3 * i..3 * i + 3].iter().map(|v| *v as f64).sum::<f64>() / 3.0;
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

/// Mean foreground intensity after the edit over before.
pub fn intensity_ratio(run: &EditRun, eval: &[&SupervisionFrame]) -> f64 {
    foreground_mean(&run.after, eval) / foreground_mean(&run.before, eval)
}

/// Largest change of the u, v, alpha and semantic buffers.
pub fn uvs_drift(run: &EditRun) -> f64 {
    let mut d = 0.0f64;
    for (a, b) in run.before.iter().zip(&run.after) {
        for (x, y) in [(&a.u, &b.u), (&a.v, &b.v), (&a.alpha, &b.alpha), (&a.semantics, &b.semantics)] {
            for (p, q) in x.iter().zip(y) {
                d = d.max((p - q).abs() as f64);
            }
        }
    }
    d
}

/// Circular mean hue in degrees (0 is red) over oracle torso pixels, and
/// the pixel count.
pub fn torso_hue(buffers: &[RenderedBuffers], eval: &[&SupervisionFrame]) -> (f64, usize) {
    let (mut s, mut c, mut n) = (0.0, 0.0, 0usize);
    for (b, f) in buffers.iter().zip(eval) {
        let Some(labels) = &f.labels else { continue };
        for (i, &l) in labels.iter().enumerate() {
            if l != TORSO_LABEL || f.mask[i] < 0.5 {
                continue;
            }
            let [h, _, _] = rgb_to_hsv([b.rgb[3 * i], b.rgb[3 * i + 1], b.rgb[3 * i + 2]]);
            let rad = h as f64 * std::f64::consts::TAU;
            s += rad.sin();
            c += rad.cos();
            n += 1;
        }
    }
    let deg = s.atan2(c).to_degrees();
    (deg, n)
}
