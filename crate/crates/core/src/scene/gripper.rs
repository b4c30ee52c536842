//! Analytic grasp feasibility: antipodal contacts, gripper-body clearance and a
//! collision-free approach sweep. Replaces simulated grasp trials.

use serde::{Deserialize, Serialize};

use super::Scene;
use crate::geometry::Vec3;
use crate::grasp::Grasp;

/// Parallel-jaw gripper dimensions (meters) and checker tolerances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperConfig {
    pub finger_length: f64,
    /// Finger extent orthogonal to both the closing axis and the approach.
    pub finger_width: f64,
    pub finger_thickness: f64,
    pub palm_thickness: f64,
    /// How far the fingertips reach past the grasp center along the approach.
    pub tip_depth: f64,
    pub max_opening: f64,
    pub clearance: f64,
    /// Maximum angle between one contact normal and the reversed other one.
    pub normal_tolerance_deg: f64,
    /// Step of the contact march along the closing axis.
    pub march_step: f64,
    /// Resolution of the gripper-body collision test.
    pub collision_step: f64,
}

impl Default for GripperConfig {
    fn default() -> Self {
        Self {
            finger_length: 0.05,
            finger_width: 0.02,
            finger_thickness: 0.01,
            palm_thickness: 0.01,
            tip_depth: 0.01,
            max_opening: 0.08,
            clearance: 0.001,
            normal_tolerance_deg: 30.0,
            march_step: 0.001,
            collision_step: 0.0002,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureReason {
    /// No opposing contact pair on the target within the opening.
    NoAntipodalContact,
    /// Gripper body too close to non-target geometry at the grasp pose.
    Collision,
    /// The approach sweep penetrates the scene.
    ApproachBlocked,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GraspVerdict {
    Success { contact_span: f64 },
    Failure(FailureReason),
}

impl GraspVerdict {
    pub fn is_success(&self) -> bool {
        matches!(self, GraspVerdict::Success { .. })
    }
}

/// Oriented box: center, three orthonormal axes and half extents along them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: Vec3,
    pub axes: [Vec3; 3],
    pub half: [f64; 3],
}

impl OrientedBox {
    /// Grows the box by `distance` along `-axes[axis]` (its back face moves).
    pub fn extended_back(&self, axis: usize, distance: f64) -> Self {
        let mut out = *self;
        out.half[axis] += distance * 0.5;
        out.center -= self.axes[axis] * (distance * 0.5);
        out
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (n, c) in out.iter_mut().enumerate() {
            let s = |bit: usize| if n >> bit & 1 == 1 { 1.0 } else { -1.0 };
            *c = self.center
                + self.axes[0] * (s(0) * self.half[0])
                + self.axes[1] * (s(1) * self.half[1])
                + self.axes[2] * (s(2) * self.half[2]);
        }
        out
    }
}

/// `true` when `sdf > clearance` over the whole box, resolved down to cells of
/// size `step`. Uses the 1-Lipschitz bound to accept whole sub-boxes at once.
pub fn box_clear(sdf: &dyn Fn(&Vec3) -> f64, b: &OrientedBox, clearance: f64, step: f64) -> bool {
    let d = sdf(&b.center);
    if d <= clearance {
        return false;
    }
    let radius = (b.half[0].powi(2) + b.half[1].powi(2) + b.half[2].powi(2)).sqrt();
    if d - radius > clearance {
        return true;
    }
    let axis = (0..3).max_by(|&i, &j| b.half[i].total_cmp(&b.half[j])).unwrap_or(0);
    if b.half[axis] <= step * 0.5 {
        return true;
    }
    let mut child = *b;
    child.half[axis] *= 0.5;
    let offset = b.axes[axis] * child.half[axis];
    let mut lo = child;
    lo.center -= offset;
    let mut hi = child;
    hi.center += offset;
    box_clear(sdf, &lo, clearance, step) && box_clear(sdf, &hi, clearance, step)
}

/// Finger and palm boxes for a fully opened gripper at the grasp pose:
/// `[finger(+c), finger(-c), palm]`. Box axes are `(closing, width, approach)`.
pub fn gripper_boxes(center: &Vec3, view: &Vec3, closing: &Vec3, g: &GripperConfig) -> [OrientedBox; 3] {
    let width_axis = view.cross(closing);
    let axes = [*closing, width_axis, *view];
    let along = g.tip_depth - g.finger_length * 0.5;
    let finger = |side: f64| OrientedBox {
        center: center + closing * (side * (g.max_opening * 0.5 + g.finger_thickness * 0.5)) + view * along,
        axes,
        half: [g.finger_thickness * 0.5, g.finger_width * 0.5, g.finger_length * 0.5],
    };
    let palm = OrientedBox {
        center: center + view * (g.tip_depth - g.finger_length - g.palm_thickness * 0.5),
        axes,
        half: [
            g.max_opening * 0.5 + g.finger_thickness,
            g.finger_width * 0.5,
            g.palm_thickness * 0.5,
        ],
    };
    [finger(1.0), finger(-1.0), palm]
}

/// Contact points found by marching out of the target along both closing directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contacts {
    pub positive: Vec3,
    pub negative: Vec3,
    pub normal_positive: Vec3,
    pub normal_negative: Vec3,
    pub span: f64,
}

fn exit_distance(scene: &Scene, center: &Vec3, dir: &Vec3, limit: f64, step: f64) -> Option<f64> {
    let mut prev = 0.0;
    let mut t = step;
    while prev < limit {
        let t_clamped = t.min(limit);
        if scene.target_sdf(&(center + dir * t_clamped)) > 0.0 {
            let (mut lo, mut hi) = (prev, t_clamped);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if scene.target_sdf(&(center + dir * mid)) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(hi);
        }
        prev = t_clamped;
        t += step;
    }
    None
}

/// Marches from a center inside the target along `±closing` to the surface.
/// `None` when the center is not inside the target or no exit is found within
/// the maximum opening.
pub fn antipodal_contacts(scene: &Scene, center: &Vec3, closing: &Vec3, g: &GripperConfig) -> Option<Contacts> {
    if scene.target_sdf(center) >= 0.0 {
        return None;
    }
    let tp = exit_distance(scene, center, closing, g.max_opening, g.march_step)?;
    let tn = exit_distance(scene, center, &-closing, g.max_opening - tp, g.march_step)?;
    let target = scene.target_primitive();
    let positive = center + closing * tp;
    let negative = center - closing * tn;
    Some(Contacts {
        positive,
        negative,
        normal_positive: target.normal(&positive),
        normal_negative: target.normal(&negative),
        span: tp + tn,
    })
}

/// Full three-part feasibility check: antipodal contacts on the target,
/// clearance of the gripper body from all other geometry, and a collision-free
/// approach over one finger length.
pub fn grasp_feasible(scene: &Scene, grasp: &Grasp, g: &GripperConfig) -> GraspVerdict {
    let closing = grasp.closing_axis();
    let Some(contacts) = antipodal_contacts(scene, &grasp.center, &closing, g) else {
        return GraspVerdict::Failure(FailureReason::NoAntipodalContact);
    };
    let cos_tol = g.normal_tolerance_deg.to_radians().cos();
    if contacts.span > g.max_opening || contacts.normal_positive.dot(&-contacts.normal_negative) < cos_tol {
        return GraspVerdict::Failure(FailureReason::NoAntipodalContact);
    }

    let boxes = gripper_boxes(&grasp.center, &grasp.view, &closing, g);
    let others = |p: &Vec3| scene.sdf_excluding(p, scene.target);
    if !boxes
        .iter()
        .all(|b| box_clear(&others, b, g.clearance, g.collision_step))
    {
        return GraspVerdict::Failure(FailureReason::Collision);
    }

    let everything = |p: &Vec3| scene.sdf(p);
    if !boxes
        .iter()
        .map(|b| b.extended_back(2, g.finger_length))
        .all(|b| box_clear(&everything, &b, 0.0, g.collision_step))
    {
        return GraspVerdict::Failure(FailureReason::ApproachBlocked);
    }
    GraspVerdict::Success {
        contact_span: contacts.span,
    }
}
