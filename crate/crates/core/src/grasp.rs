//! Parallel-jaw grasp records.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::geometry::{orthonormal_frame, Vec3};

/// A grasp affordance: quality, center, approach view, in-plane rotation and opening width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    /// Predicted (or measured) quality in `[0, 1]`.
    pub quality: f64,
    pub center: Vec3,
    /// Unit approach direction, pointing from the gripper toward the object.
    pub view: Vec3,
    /// Rotation about `view` in `[0, π)`; the gripper is symmetric under `r + π`.
    pub rotation: f64,
    /// Opening width in meters.
    pub width: f64,
}

impl Grasp {
    pub fn closing_axis(&self) -> Vec3 {
        closing_axis(&self.view, self.rotation)
    }

    /// Checks the record invariants for a gripper with opening `max_width`.
    pub fn is_valid(&self, max_width: f64) -> bool {
        (0.0..=1.0).contains(&self.quality)
            && (self.view.norm() - 1.0).abs() <= 1e-9
            && (0.0..PI).contains(&self.rotation)
            && (0.0..=max_width).contains(&self.width)
    }
}

/// Finger closing direction for approach `view` rotated by `rotation` about it.
pub fn closing_axis(view: &Vec3, rotation: f64) -> Vec3 {
    let (e1, e2) = orthonormal_frame(view);
    e1 * rotation.cos() + e2 * rotation.sin()
}

/// Wraps an angle into `[0, π)`.
pub fn wrap_rotation(r: f64) -> f64 {
    let w = r.rem_euclid(PI);
    if w >= PI {
        0.0
    } else {
        w
    }
}

/// Ground-truth label for one grasp query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspLabel {
    pub center: Vec3,
    pub view: Vec3,
    pub rotation: f64,
    pub width: f64,
    pub success: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closing_axis_is_orthogonal_to_view() {
        let v = Vec3::new(0.3, -0.5, -0.8).normalize();
        for k in 0..16 {
            let c = closing_axis(&v, k as f64 * PI / 16.0);
            assert!(c.dot(&v).abs() < 1e-12);
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
        // r and r + π give the same line
        let a = closing_axis(&v, 0.4);
        let b = closing_axis(&v, 0.4 + PI);
        assert!((a + b).norm() < 1e-12);
    }

    #[test]
    fn wrap_stays_in_range() {
        for r in [-1e-17, -PI, 0.0, PI, 2.0 * PI - 1e-16, 7.0] {
            let w = wrap_rotation(r);
            assert!((0.0..PI).contains(&w), "{r} -> {w}");
        }
    }
}
