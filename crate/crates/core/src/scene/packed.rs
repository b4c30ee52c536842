use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Scene, SceneError, SdfPrimitive, Shape};
use crate::geometry::{pose, yaw, Vec3};

/// Sampling ranges for packed tabletop scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedConfig {
    pub support_height: f64,
    /// Object centers are drawn from `[min, max]²` in the support plane.
    pub placement_min: f64,
    pub placement_max: f64,
    /// Minimum gap between footprint bounding circles.
    pub gap: f64,
    pub attempts_per_object: usize,
    pub max_rounds: usize,
    pub box_probability: f64,
    pub cylinder_probability: f64,
    pub box_half_xy: (f64, f64),
    pub box_half_z: (f64, f64),
    pub cylinder_radius: (f64, f64),
    pub cylinder_half_height: (f64, f64),
    pub sphere_radius: (f64, f64),
}

impl Default for PackedConfig {
    fn default() -> Self {
        Self {
            support_height: 0.05,
            placement_min: 0.07,
            placement_max: 0.23,
            gap: 0.001,
            attempts_per_object: 100,
            max_rounds: 1000,
            box_probability: 0.45,
            cylinder_probability: 0.40,
            box_half_xy: (0.015, 0.035),
            box_half_z: (0.02, 0.05),
            cylinder_radius: (0.015, 0.03),
            cylinder_half_height: (0.02, 0.05),
            sphere_radius: (0.02, 0.035),
        }
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, cfg: &PackedConfig) -> Shape {
    let u: f64 = rng.random();
    let mut range = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
    if u < cfg.box_probability {
        Shape::Box {
            half_extents: [range(cfg.box_half_xy), range(cfg.box_half_xy), range(cfg.box_half_z)],
        }
    } else if u < cfg.box_probability + cfg.cylinder_probability {
        Shape::Cylinder {
            radius: range(cfg.cylinder_radius),
            half_height: range(cfg.cylinder_half_height),
        }
    } else {
        Shape::Sphere {
            radius: range(cfg.sphere_radius),
        }
    }
}

/// Places `count` upright objects on the support plane by rejection sampling
/// of footprint circles. A pure function of `(seed, count, cfg)`; the target
/// defaults to object 0 until [`super::select_target`] picks one.
pub fn generate_packed_scene(seed: u64, count: usize, cfg: &PackedConfig) -> Result<Scene, SceneError> {
    if !(3..=8).contains(&count) {
        return Err(SceneError::InvalidObjectCount(count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_rounds {
        let mut placed: Vec<(SdfPrimitive, f64)> = Vec::with_capacity(count);
        'objects: for _ in 0..count {
            let shape = sample_shape(&mut rng, cfg);
            let radius = shape.footprint_radius();
            for _ in 0..cfg.attempts_per_object {
                let x = rng.random_range(cfg.placement_min..=cfg.placement_max);
                let y = rng.random_range(cfg.placement_min..=cfg.placement_max);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let center = Vec3::new(x, y, cfg.support_height + shape.half_height());
                let free = placed.iter().all(|(p, r)| {
                    let c = p.center();
                    (c.x - x).hypot(c.y - y) >= r + radius + cfg.gap
                });
                if free {
                    placed.push((SdfPrimitive::new(shape, pose(center, yaw(angle)))?, radius));
                    continue 'objects;
                }
            }
            break;
        }
        if placed.len() == count {
            return Scene::new(placed.into_iter().map(|(p, _)| p).collect(), cfg.support_height, 0);
        }
    }
    Err(SceneError::GenerationFailed(cfg.max_rounds))
}

/// A box target under a bridge: two pillars on the local ±x sides carry a
/// 6 cm slab 1.5 cm above the target. The slab is thicker than the fingers
/// are long, so top-down grasps cannot straddle it, and ±x approaches hit the
/// pillars. The open ±y sides leave room for fully opened fingers. The assembly yaw,
/// position and target size are drawn from `seed`. Target is object 0.
pub fn generate_bridge_scene(seed: u64, support_height: f64) -> Result<Scene, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hx = rng.random_range(0.015..0.02);
    let hy = rng.random_range(0.015..0.02);
    let hz = rng.random_range(0.02..0.03);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let cx = 0.15 + rng.random_range(-0.01..0.01);
    let cy = 0.15 + rng.random_range(-0.01..0.01);
    let rot = yaw(angle);
    let at = |local: Vec3| Vec3::new(cx, cy, 0.0) + rot * local;

    let slab_bottom = 2.0 * hz + 0.015;
    let (inner, pillar_half, slab_half_z) = (0.065, 0.0075, 0.03);
    let depth = hy + 0.005;
    let mut prims = vec![SdfPrimitive::new(
        Shape::Box { half_extents: [hx, hy, hz] },
        pose(at(Vec3::new(0.0, 0.0, support_height + hz)), rot),
    )?];
    for side in [-1.0, 1.0] {
        prims.push(SdfPrimitive::new(
            Shape::Box { half_extents: [pillar_half, depth, slab_bottom * 0.5] },
            pose(at(Vec3::new(side * (inner + pillar_half), 0.0, support_height + slab_bottom * 0.5)), rot),
        )?);
    }
    prims.push(SdfPrimitive::new(
        Shape::Box { half_extents: [inner + 2.0 * pillar_half, depth, slab_half_z] },
        pose(at(Vec3::new(0.0, 0.0, support_height + slab_bottom + slab_half_z)), rot),
    )?);
    Scene::new(prims, support_height, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_counts() {
        let cfg = PackedConfig::default();
        assert!(matches!(generate_packed_scene(1, 2, &cfg), Err(SceneError::InvalidObjectCount(2))));
        assert!(generate_packed_scene(1, 9, &cfg).is_err());
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = PackedConfig::default();
        let a = generate_packed_scene(7, 5, &cfg).unwrap();
        let b = generate_packed_scene(7, 5, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_packed_scene(8, 5, &cfg).unwrap());
    }

    #[test]
    fn impossible_layout_fails() {
        let cfg = PackedConfig {
            placement_min: 0.15,
            placement_max: 0.15,
            max_rounds: 3,
            ..PackedConfig::default()
        };
        assert!(matches!(generate_packed_scene(0, 3, &cfg), Err(SceneError::GenerationFailed(3))));
    }

    #[test]
    fn objects_rest_on_plane_without_overlap() {
        let cfg = PackedConfig::default();
        for seed in 0..20 {
            let scene = generate_packed_scene(seed, 3 + (seed as usize % 6), &cfg).unwrap();
            assert!(scene.max_interpenetration(0.002) <= 1e-3);
            for prim in &scene.primitives {
                let lowest = prim.aabb().min.z;
                assert!((lowest - cfg.support_height).abs() < 1e-9, "seed {seed}: {lowest}");
            }
        }
    }
}
