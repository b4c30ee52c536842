//! Depth synthesis from an implicit SDF: a decoder over tri-plane point
//! features, logistic-density volume rendering with importance resampling,
//! and the L1 depth loss with gradients for the decoder.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Vec3, Workspace};
use crate::io::{Tensor, TensorFile};
use crate::nn::{sigmoid, Adam, Cache, Mlp, NnError};
use crate::scene::{Camera, DepthImage, Scene};
use crate::triplane::TriPlaneVolume;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("non-finite depth loss at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Guard added to the density denominator.
const ALPHA_EPS: f64 = 1e-10;
/// Denominator floor of the expected depth.
const DEPTH_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub rays_per_batch: usize,
    pub uniform_samples: usize,
    pub importance_rounds: usize,
    pub importance_samples: usize,
    /// Rays whose total weight stays below this report no hit.
    pub no_hit_threshold: f64,
    /// Initial half-width of the training depth window, in uniform sample spacings.
    pub initial_window_spacings: f64,
    /// Fraction of training over which the window relaxes to the full chord.
    pub relax_fraction: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            rays_per_batch: 128,
            uniform_samples: 64,
            importance_rounds: 4,
            importance_samples: 32,
            no_hit_threshold: 1e-3,
            initial_window_spacings: 3.0,
            relax_fraction: 0.5,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.uniform_samples < 2 || self.rays_per_batch == 0 || (self.importance_rounds > 0 && self.importance_samples == 0) {
            return Err(RenderError::Config("sample counts must be positive (at least 2 uniform)".into()));
        }
        Ok(())
    }
}

/// Signed distance in workspace-normalized units.
pub trait SdfField: Sync {
    fn sdf(&self, p: &Vec3) -> f64;
}

/// Sharpness used with [`AnalyticField`]. The exact SDF has no learned `s`;
/// at 400 the logistic width is under a millimeter, so silhouettes and
/// contact creases do not smear the expected depth.
pub const BYPASS_SHARPNESS: f64 = 400.0;

/// Analytic scene distance, bypassing features and decoder.
pub struct AnalyticField<'a> {
    pub scene: &'a Scene,
    pub workspace: Workspace,
}

impl SdfField for AnalyticField<'_> {
    fn sdf(&self, p: &Vec3) -> f64 {
        self.scene.sdf(p) / self.workspace.size
    }
}

/// MLP from a point feature to an SDF value, plus the logistic sharpness `s`
/// kept in log space so it stays positive.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfDecoder {
    pub mlp: Mlp,
    pub log_s: f64,
}

impl SdfDecoder {
    pub fn seeded(point_dim: usize, hidden: usize, seed: u64) -> Self {
        Self {
            mlp: Mlp::seeded(point_dim, hidden, 2, 1, seed),
            log_s: 20f64.ln(),
        }
    }

    pub fn sharpness(&self) -> f64 {
        self.log_s.exp()
    }

    pub fn decode_sdf(&self, feature: &[f64]) -> Result<f64, RenderError> {
        Ok(self.mlp.forward(feature)?[0])
    }

    pub fn param_count(&self) -> usize {
        self.mlp.params.len() + 1
    }

    pub fn to_tensor_file(&self, feature_dim: u32, provenance: &str) -> TensorFile {
        let extra = vec![Tensor {
            name: "log_s".into(),
            shape: vec![1],
            data: vec![self.log_s as f32],
        }];
        self.mlp.to_tensor_file("sdf_decoder", feature_dim, provenance, extra)
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self, RenderError> {
        if file.kind != "sdf_decoder" {
            return Err(RenderError::Config(format!("expected decoder weights, found {:?}", file.kind)));
        }
        let log_s = file
            .get("log_s")
            .and_then(|t| t.data.first())
            .ok_or_else(|| RenderError::Config("missing tensor log_s".into()))?;
        Ok(Self {
            mlp: Mlp::from_tensor_file(file)?,
            log_s: *log_s as f64,
        })
    }
}

/// Decoder evaluated on tri-plane features.
pub struct DecoderField<'a> {
    pub planes: &'a TriPlaneVolume,
    pub decoder: &'a SdfDecoder,
}

impl SdfField for DecoderField<'_> {
    fn sdf(&self, p: &Vec3) -> f64 {
        let f = self.planes.query_point(p);
        self.decoder.mlp.forward(&f).map(|o| o[0]).unwrap_or(f64::NAN)
    }
}

/// Compositing result along one ray. `weights[i]` belongs to the interval
/// `[t[i], t[i+1]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RayRender {
    pub t: Vec<f64>,
    pub sdf: Vec<f64>,
    pub alpha: Vec<f64>,
    pub weights: Vec<f64>,
    pub weight_sum: f64,
    /// Expected distance along the ray, `None` for a miss.
    pub distance: Option<f64>,
}

/// Opacities, transmittance-weighted contributions and the expected interval
/// midpoint for samples `t` (sorted) with distances `sdf`.
pub fn composite(t: &[f64], sdf: &[f64], s: f64, no_hit_threshold: f64) -> RayRender {
    let n = t.len();
    let cdf: Vec<f64> = sdf.iter().map(|d| sigmoid(s * d)).collect();
    let mut alpha = Vec::with_capacity(n.saturating_sub(1));
    let mut weights = Vec::with_capacity(n.saturating_sub(1));
    let mut transmittance = 1.0;
    let mut sum = 0.0;
    let mut num = 0.0;
    for i in 0..n.saturating_sub(1) {
        let a = ((cdf[i] - cdf[i + 1]) / (cdf[i] + ALPHA_EPS)).max(0.0);
        let w = transmittance * a;
        transmittance *= 1.0 - a;
        alpha.push(a);
        weights.push(w);
        sum += w;
        num += w * 0.5 * (t[i] + t[i + 1]);
    }
    let distance = (sum >= no_hit_threshold).then(|| num / sum.max(DEPTH_EPS));
    RayRender {
        t: t.to_vec(),
        sdf: sdf.to_vec(),
        alpha,
        weights,
        weight_sum: sum,
        distance,
    }
}

/// Stratified bin midpoints on `[near, far]` followed by deterministic
/// inverse-CDF resampling rounds toward the current weights.
pub fn sample_ray(field: &dyn SdfField, origin: &Vec3, dir: &Vec3, near: f64, far: f64, s: f64, cfg: &RenderConfig) -> (Vec<f64>, Vec<f64>) {
    let m = cfg.uniform_samples;
    let step = (far - near) / m as f64;
    let mut t: Vec<f64> = (0..m).map(|i| near + (i as f64 + 0.5) * step).collect();
    let mut sdf: Vec<f64> = t.iter().map(|ti| field.sdf(&(origin + dir * *ti))).collect();
    for _ in 0..cfg.importance_rounds {
        let r = composite(&t, &sdf, s, cfg.no_hit_threshold);
        let pdf: Vec<f64> = r.weights.iter().map(|w| w + 1e-5).collect();
        let total: f64 = pdf.iter().sum();
        let k = cfg.importance_samples;
        let mut fresh = Vec::with_capacity(k);
        let mut acc = 0.0;
        let mut interval = 0;
        for j in 0..k {
            let u = (j as f64 + 0.5) / k as f64 * total;
            while interval + 1 < pdf.len() && acc + pdf[interval] < u {
                acc += pdf[interval];
                interval += 1;
            }
            let frac = ((u - acc) / pdf[interval]).clamp(0.0, 1.0);
            let ti = t[interval] + frac * (t[interval + 1] - t[interval]);
            fresh.push(ti.clamp(near, far));
        }
        let fresh_sdf: Vec<f64> = fresh.iter().map(|ti| field.sdf(&(origin + dir * *ti))).collect();
        let mut merged: Vec<(f64, f64)> = t.into_iter().zip(sdf).chain(fresh.into_iter().zip(fresh_sdf)).collect();
        merged.sort_by(|a, b| a.0.total_cmp(&b.0));
        (t, sdf) = merged.into_iter().unzip();
    }
    (t, sdf)
}

pub fn render_ray(field: &dyn SdfField, origin: &Vec3, dir: &Vec3, near: f64, far: f64, s: f64, cfg: &RenderConfig) -> RayRender {
    let (t, sdf) = sample_ray(field, origin, dir, near, far, s, cfg);
    composite(&t, &sdf, s, cfg.no_hit_threshold)
}

/// Renders a full depth image; each ray covers its chord through the workspace.
pub fn render_depth_implicit(field: &dyn SdfField, camera: &Camera, workspace: &Workspace, s: f64, cfg: &RenderConfig) -> DepthImage {
    let k = camera.intrinsics;
    let origin = camera.origin();
    let depth = (0..k.width * k.height)
        .into_par_iter()
        .map(|i| {
            let ray = camera.pixel_ray((i % k.width) as f64, (i / k.width) as f64);
            let scale = ray.norm();
            let dir = ray / scale;
            let Some((t0, t1)) = workspace.aabb().line_interval(&origin, &dir) else {
                return f64::INFINITY;
            };
            let near = t0.max(1e-6);
            if t1 <= near {
                return f64::INFINITY;
            }
            render_ray(field, &origin, &dir, near, t1, s, cfg)
                .distance
                .map_or(f64::INFINITY, |t| t / scale)
        })
        .collect();
    DepthImage {
        width: k.width,
        height: k.height,
        depth,
        camera: *camera,
    }
}

/// Mean absolute error over pairs where both depths are finite, and its
/// (sub)gradient w.r.t. the rendered depths (0 at zero residual).
pub fn depth_loss(rendered: &[f64], truth: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(rendered.len(), truth.len());
    let valid: Vec<bool> = rendered.iter().zip(truth).map(|(a, b)| a.is_finite() && b.is_finite()).collect();
    let n = valid.iter().filter(|v| **v).count();
    if n == 0 {
        log::warn!("depth loss over an empty mask");
        return (0.0, vec![0.0; rendered.len()]);
    }
    let mut loss = 0.0;
    let grad = rendered
        .iter()
        .zip(truth)
        .zip(&valid)
        .map(|((a, b), ok)| {
            if !ok {
                return 0.0;
            }
            let r = a - b;
            loss += r.abs() / n as f64;
            if r > 0.0 {
                1.0 / n as f64
            } else if r < 0.0 {
                -1.0 / n as f64
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad)
}

/// Gradient of the expected distance w.r.t. the per-sample SDF values and
/// the sharpness `s`, with sample positions held fixed.
pub fn distance_gradient(r: &RayRender, s: f64) -> (Vec<f64>, f64) {
    let n = r.t.len();
    let mut dsdf = vec![0.0; n];
    if n < 2 {
        return (dsdf, 0.0);
    }
    let sum = r.weight_sum;
    let mid: Vec<f64> = (0..n - 1).map(|i| 0.5 * (r.t[i] + r.t[i + 1])).collect();
    let num: f64 = r.weights.iter().zip(&mid).map(|(w, m)| w * m).sum();
    // dD/dw_i for D = num / max(sum, eps)
    let g: Vec<f64> = if sum > DEPTH_EPS {
        mid.iter().map(|m| (m - num / sum) / sum).collect()
    } else {
        mid.iter().map(|m| m / DEPTH_EPS).collect()
    };
    // dD/dalpha_k = T_k (g_k - R_k), R_k = g_{k+1} a_{k+1} + (1 - a_{k+1}) R_{k+1}
    let m = n - 1;
    let mut trans = vec![1.0; m];
    for k in 1..m {
        trans[k] = trans[k - 1] * (1.0 - r.alpha[k - 1]);
    }
    let mut dalpha = vec![0.0; m];
    let mut rest = 0.0;
    for k in (0..m).rev() {
        dalpha[k] = trans[k] * (g[k] - rest);
        rest = g[k] * r.alpha[k] + (1.0 - r.alpha[k]) * rest;
    }
    let cdf: Vec<f64> = r.sdf.iter().map(|d| sigmoid(s * d)).collect();
    let mut dcdf = vec![0.0; n];
    for k in 0..m {
        let raw = (cdf[k] - cdf[k + 1]) / (cdf[k] + ALPHA_EPS);
        if raw <= 0.0 {
            continue;
        }
        let den = cdf[k] + ALPHA_EPS;
        dcdf[k] += dalpha[k] * (cdf[k + 1] + ALPHA_EPS) / (den * den);
        dcdf[k + 1] -= dalpha[k] / den;
    }
    let mut ds = 0.0;
    for i in 0..n {
        let dx = dcdf[i] * cdf[i] * (1.0 - cdf[i]);
        dsdf[i] = dx * s;
        ds += dx * r.sdf[i];
    }
    (dsdf, ds)
}

/// One supervised ray: world origin and unit direction, camera-depth factor
/// (`depth = distance · depth_scale`), ground-truth camera depth and the
/// workspace chord `[t_in, t_out]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthRay {
    pub origin: Vec3,
    pub dir: Vec3,
    pub depth_scale: f64,
    pub depth: f64,
    pub chord: (f64, f64),
}

/// Hit pixels of a depth image whose rays cross the workspace.
pub fn depth_rays(image: &DepthImage, workspace: &Workspace) -> Vec<DepthRay> {
    let cam = &image.camera;
    let origin = cam.origin();
    let mut out = Vec::new();
    for v in 0..image.height {
        for u in 0..image.width {
            let Some(d) = image.get(u, v) else {
                continue;
            };
            let ray = cam.pixel_ray(u as f64, v as f64);
            let scale = ray.norm();
            let dir = ray / scale;
            let Some((t0, t1)) = workspace.aabb().line_interval(&origin, &dir) else {
                continue;
            };
            let t_hit = d * scale;
            if t1 <= t0.max(0.0) || t_hit < t0 || t_hit > t1 {
                continue;
            }
            out.push(DepthRay {
                origin,
                dir,
                depth_scale: 1.0 / scale,
                depth: d,
                chord: (t0.max(1e-6), t1),
            });
        }
    }
    out
}

/// Training window around the true hit: `±initial_window_spacings` uniform
/// spacings at the start, relaxed linearly to the whole chord once
/// `progress` reaches `relax_fraction`.
pub fn near_far_schedule(ray: &DepthRay, progress: f64, cfg: &RenderConfig) -> (f64, f64) {
    let (t0, t1) = ray.chord;
    let spacing = (t1 - t0) / cfg.uniform_samples as f64;
    let hit = ray.depth / ray.depth_scale;
    let lambda = if cfg.relax_fraction > 0.0 {
        (progress / cfg.relax_fraction).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let half = cfg.initial_window_spacings * spacing;
    let near = ((1.0 - lambda) * (hit - half) + lambda * t0).max(t0);
    let far = ((1.0 - lambda) * (hit + half) + lambda * t1).min(t1);
    (near, far)
}

/// Renders one ray through the decoder and, given `dL/d(depth)`, accumulates
/// the parameter gradient (MLP parameters then `log_s`). Returns the camera
/// depth, or `None` when the ray misses.
pub fn render_and_backprop(
    planes: &TriPlaneVolume,
    decoder: &SdfDecoder,
    ray: &DepthRay,
    near: f64,
    far: f64,
    cfg: &RenderConfig,
    dl_ddepth: impl Fn(f64) -> f64,
    grad: &mut [f64],
) -> Option<f64> {
    let s = decoder.sharpness();
    let field = DecoderField { planes, decoder };
    let r = render_ray(&field, &ray.origin, &ray.dir, near, far, s, cfg);
    let depth = r.distance? * ray.depth_scale;
    let g = dl_ddepth(depth) * ray.depth_scale;
    if g == 0.0 {
        return Some(depth);
    }
    let (dsdf, ds) = distance_gradient(&r, s);
    let mut cache = Cache::default();
    let np = decoder.mlp.params.len();
    for (t, d) in r.t.iter().zip(&dsdf) {
        if *d == 0.0 {
            continue;
        }
        let f = planes.query_point(&(ray.origin + ray.dir * *t));
        decoder.mlp.forward_cached(&f, &mut cache).ok()?;
        decoder.mlp.backward(&cache, &[g * d], &mut grad[..np]);
    }
    grad[np] += g * ds * s;
    Some(depth)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 2e-4,
            hidden: 128,
            seed: 0,
        }
    }
}

/// Adam on the L1 depth loss over random ray batches drawn from
/// `(planes, rays)` scenes. Returns the decoder and per-step batch losses.
pub fn train_decoder(
    scenes: &[(TriPlaneVolume, Vec<DepthRay>)],
    render: &RenderConfig,
    cfg: &DecoderTrainConfig,
) -> Result<(SdfDecoder, Vec<f64>), RenderError> {
    render.validate()?;
    let pool: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, (_, rays))| (0..rays.len()).map(move |r| (s, r)))
        .collect();
    let Some((first, _)) = scenes.first() else {
        return Err(RenderError::Config("no training scenes".into()));
    };
    if pool.is_empty() {
        return Err(RenderError::Config("no supervised rays".into()));
    }
    let mut decoder = SdfDecoder::seeded(first.point_dim(), cfg.hidden, cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, decoder.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let batch: Vec<(usize, usize)> = pool.choose_multiple(&mut rng, render.rays_per_batch).copied().collect();
        let chunk = batch.len().div_ceil(8).max(1);
        let partial = batch
            .par_chunks(chunk)
            .map(|rays| {
                let mut grad = vec![0.0; decoder.param_count()];
                let mut loss = 0.0f64;
                let mut count = 0usize;
                for (s, r) in rays {
                    let (planes, list) = &scenes[*s];
                    let ray = &list[*r];
                    let (near, far) = near_far_schedule(ray, progress, render);
                    let sign = |d: f64| (d - ray.depth).signum() * f64::from(d != ray.depth);
                    if let Some(d) = render_and_backprop(planes, &decoder, ray, near, far, render, sign, &mut grad) {
                        loss += (d - ray.depth).abs();
                        count += 1;
                    }
                }
                (loss, count, grad)
            })
            .collect::<Vec<_>>();
        let count: usize = partial.iter().map(|p| p.1).sum();
        if count == 0 {
            losses.push(0.0);
            continue;
        }
        let scale = 1.0 / count as f64;
        let mut grad = vec![0.0f64; decoder.param_count()];
        let mut loss = 0.0f64;
        for (l, _, g) in partial {
            loss += l * scale;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(RenderError::NonFinite(step));
        }
        let np = decoder.mlp.params.len();
        let mut params = decoder.mlp.params.clone();
        params.push(decoder.log_s);
        adam.step(&mut params, &grad);
        decoder.log_s = params[np];
        params.truncate(np);
        decoder.mlp.params = params;
        losses.push(loss);
    }
    Ok((decoder, losses))
}
