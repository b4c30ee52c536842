//! Analytic tabletop scenes, the sphere-traced depth camera and the grasp
//! feasibility oracle that stands in for physical grasp trials.

mod camera;
mod gripper;
mod io;
mod packed;
mod primitive;

pub use camera::{
    render_depth, render_owners, trace_ray, Camera, DepthImage, Intrinsics, Owner, TraceConfig,
};
pub use gripper::{
    antipodal_contacts, box_clear, grasp_feasible, gripper_boxes, Contacts, FailureReason,
    GraspVerdict, GripperConfig, OrientedBox,
};
pub use io::{scene_from_json, scene_to_json, SCENE_FORMAT_VERSION};
pub use packed::{generate_bridge_scene, generate_packed_scene, PackedConfig};
pub use primitive::{SdfPrimitive, Shape};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Vec3};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("target index {index} out of range for {count} primitives")]
    InvalidTarget { index: usize, count: usize },
    #[error("object count {0} outside the supported range [3, 8]")]
    InvalidObjectCount(usize),
    #[error("packed scene generation failed after {0} rejection rounds")]
    GenerationFailed(usize),
    #[error("scene document: {0}")]
    Format(String),
}

/// Collection of posed primitives resting on a horizontal support plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<SdfPrimitive>,
    /// Height of the support plane `z = support_height` (meters).
    pub support_height: f64,
    pub target: usize,
    pub target_bbox: Aabb,
}

impl Scene {
    pub fn new(primitives: Vec<SdfPrimitive>, support_height: f64, target: usize) -> Result<Self, SceneError> {
        let count = primitives.len();
        if count > 0 && target >= count {
            return Err(SceneError::InvalidTarget { index: target, count });
        }
        let target_bbox = primitives
            .get(target)
            .map(|p| p.aabb())
            .unwrap_or(Aabb::new(Vec3::zeros(), Vec3::zeros()));
        Ok(Self {
            primitives,
            support_height,
            target,
            target_bbox,
        })
    }

    pub fn set_target(&mut self, index: usize) -> Result<(), SceneError> {
        let prim = self.primitives.get(index).ok_or(SceneError::InvalidTarget {
            index,
            count: self.primitives.len(),
        })?;
        self.target = index;
        self.target_bbox = prim.aabb();
        Ok(())
    }

    pub fn target_primitive(&self) -> &SdfPrimitive {
        &self.primitives[self.target]
    }

    /// Signed distance to the whole scene, support plane included.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.primitives
            .iter()
            .fold(p.z - self.support_height, |d, prim| d.min(prim.sdf(p)))
    }

    /// Distance to everything except primitive `skip` (the support plane is kept).
    pub fn sdf_excluding(&self, p: &Vec3, skip: usize) -> f64 {
        self.primitives
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .fold(p.z - self.support_height, |d, (_, prim)| d.min(prim.sdf(p)))
    }

    pub fn target_sdf(&self, p: &Vec3) -> f64 {
        self.primitives[self.target].sdf(p)
    }

    /// Distance and owner of the closest surface.
    pub fn closest(&self, p: &Vec3) -> (f64, Owner) {
        let mut best = (p.z - self.support_height, Owner::Support);
        for (i, prim) in self.primitives.iter().enumerate() {
            let d = prim.sdf(p);
            if d < best.0 {
                best = (d, Owner::Object(i));
            }
        }
        best
    }

    /// Largest pairwise interpenetration depth, estimated on a regular grid of
    /// the given spacing over each pair's bounding-box overlap.
    pub fn max_interpenetration(&self, spacing: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.primitives.iter().enumerate() {
            for b in &self.primitives[i + 1..] {
                let Some(overlap) = a.aabb().intersection(&b.aabb()) else {
                    continue;
                };
                let e = overlap.extent();
                let n = |x: f64| ((x / spacing).ceil() as usize).max(1);
                let (nx, ny, nz) = (n(e.x), n(e.y), n(e.z));
                for k in 0..=nz {
                    for j in 0..=ny {
                        for l in 0..=nx {
                            let p = overlap.min
                                + Vec3::new(
                                    e.x * l as f64 / nx as f64,
                                    e.y * j as f64 / ny as f64,
                                    e.z * k as f64 / nz as f64,
                                );
                            let depth = (-a.sdf(&p)).min(-b.sdf(&p));
                            worst = worst.max(depth);
                        }
                    }
                }
            }
        }
        worst
    }
}

/// Index of the object with the fewest visible pixels in the given view,
/// together with the per-object counts. Ties go to the lowest index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSelection {
    pub index: usize,
    pub visible_pixels: Vec<usize>,
}

impl TargetSelection {
    pub fn target_hidden(&self) -> bool {
        self.visible_pixels[self.index] == 0
    }
}

pub fn select_target(scene: &Scene, initial_view: &Camera, trace: &TraceConfig) -> TargetSelection {
    let owners = render_owners(scene, initial_view, trace);
    let mut counts = vec![0usize; scene.primitives.len()];
    for owner in owners.iter().flatten() {
        if let Owner::Object(i) = owner {
            counts[*i] += 1;
        }
    }
    let index = counts
        .iter()
        .enumerate()
        .min_by_key(|(i, c)| (**c, *i))
        .map(|(i, _)| i)
        .unwrap_or(0);
    TargetSelection {
        index,
        visible_pixels: counts,
    }
}
