use nalgebra::Point3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::geometry::{look_at, Pose, Vec3};

/// Pinhole intrinsics. Pixel `(u, v)` has its center at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            width: 96,
            height: 72,
            fx: 110.0,
            fy: 110.0,
            cx: 47.5,
            cy: 35.5,
        }
    }
}

impl Intrinsics {
    pub fn is_valid(&self) -> bool {
        self.width > 0 && self.height > 0 && self.fx > 0.0 && self.fy > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World-from-camera transform.
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn looking_at(intrinsics: Intrinsics, eye: Vec3, target: Vec3) -> Self {
        Self::new(intrinsics, look_at(eye, target))
    }

    pub fn origin(&self) -> Vec3 {
        self.pose.translation.vector
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.pose.rotation * Vec3::z()
    }

    /// World-space ray direction through pixel `(u, v)`, scaled so that its
    /// camera-frame z component is 1: `origin + depth · ray` is the surface point.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let local = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        self.pose.rotation * local
    }

    /// Projects a world point to `(u, v, z)` with `z` the camera-frame depth.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.pose.inverse_transform_point(&Point3::from(*p));
        if c.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// A ray hits once `|sdf| < hit_epsilon` (meters).
    pub hit_epsilon: f64,
    pub max_steps: usize,
    /// Far plane as camera-frame depth (meters).
    pub far: f64,
    /// Standard deviation of optional Gaussian depth jitter (meters); 0 disables.
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            hit_epsilon: 1e-4,
            max_steps: 128,
            far: 2.0,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }
}

/// Which surface a camera ray hit first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Owner {
    Support,
    Object(usize),
}

/// Depth image in meters (camera-frame z). Misses are stored as `f64::INFINITY`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub camera: Camera,
}

impl DepthImage {
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let d = self.depth[v * self.width + u];
        d.is_finite().then_some(d)
    }

    pub fn hit_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }

    /// World point seen at pixel `(u, v)`, if any.
    pub fn backproject(&self, u: usize, v: usize) -> Option<Vec3> {
        let d = self.get(u, v)?;
        Some(self.camera.origin() + self.camera.pixel_ray(u as f64, v as f64) * d)
    }
}

/// Sphere-traces one ray. `dir` must be unit length; returns the hit distance
/// along `dir` and the surface owner.
pub fn trace_ray(scene: &Scene, origin: &Vec3, dir: &Vec3, max_t: f64, cfg: &TraceConfig) -> Option<(f64, Owner)> {
    let mut t = 0.0;
    for _ in 0..cfg.max_steps {
        let p = origin + dir * t;
        let (d, owner) = scene.closest(&p);
        if d.abs() < cfg.hit_epsilon {
            return Some((t, owner));
        }
        t += d;
        if t > max_t || t < 0.0 {
            return None;
        }
    }
    None
}

fn trace_pixel(scene: &Scene, camera: &Camera, u: usize, v: usize, cfg: &TraceConfig) -> Option<(f64, Owner)> {
    let ray = camera.pixel_ray(u as f64, v as f64);
    let scale = ray.norm();
    let dir = ray / scale;
    // camera-frame depth = distance / |ray|
    let (t, owner) = trace_ray(scene, &camera.origin(), &dir, cfg.far * scale, cfg)?;
    let depth = t / scale;
    (depth > 0.0 && depth <= cfg.far).then_some((depth, owner))
}

pub fn render_depth(scene: &Scene, camera: &Camera, cfg: &TraceConfig) -> DepthImage {
    let k = camera.intrinsics;
    let mut depth: Vec<f64> = (0..k.width * k.height)
        .into_par_iter()
        .map(|i| {
            trace_pixel(scene, camera, i % k.width, i / k.width, cfg)
                .map(|(d, _)| d)
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    if cfg.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
        let normal = Normal::new(0.0, cfg.noise_std).expect("finite noise std");
        for d in depth.iter_mut().filter(|d| d.is_finite()) {
            *d = (*d + normal.sample(&mut rng)).clamp(1e-6, cfg.far);
        }
    }
    DepthImage {
        width: k.width,
        height: k.height,
        depth,
        camera: *camera,
    }
}

/// Per-pixel owner of the first hit (row-major).
pub fn render_owners(scene: &Scene, camera: &Camera, cfg: &TraceConfig) -> Vec<Option<Owner>> {
    let k = camera.intrinsics;
    (0..k.width * k.height)
        .into_par_iter()
        .map(|i| trace_pixel(scene, camera, i % k.width, i / k.width, cfg).map(|(_, o)| o))
        .collect()
}
