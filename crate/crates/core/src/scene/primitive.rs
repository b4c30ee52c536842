use serde::{Deserialize, Serialize};

use super::SceneError;
use crate::geometry::{Aabb, Pose, Vec3};

/// Analytic shape in its local frame. Cylinders are aligned with local z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    fn params(&self) -> Vec<f64> {
        match *self {
            Shape::Sphere { radius } => vec![radius],
            Shape::Box { half_extents } => half_extents.to_vec(),
            Shape::Cylinder {
                radius,
                half_height,
            } => vec![radius, half_height],
        }
    }

    /// Exact signed distance in the local frame.
    pub fn sdf_local(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Box { half_extents } => {
                let q = p.abs() - Vec3::from(half_extents);
                let outside = q.sup(&Vec3::zeros()).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let dx = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - half_height;
                let outside = (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dx.max(dz).min(0.0)
            }
        }
    }

    /// Corners of a local bounding box.
    fn local_corners(&self) -> [Vec3; 8] {
        let h = match *self {
            Shape::Sphere { radius } => Vec3::repeat(radius),
            Shape::Box { half_extents } => Vec3::from(half_extents),
            Shape::Cylinder {
                radius,
                half_height,
            } => Vec3::new(radius, radius, half_height),
        };
        let mut out = [Vec3::zeros(); 8];
        for (n, c) in out.iter_mut().enumerate() {
            let s = |bit: usize| if n >> bit & 1 == 1 { 1.0 } else { -1.0 };
            *c = Vec3::new(s(0) * h.x, s(1) * h.y, s(2) * h.z);
        }
        out
    }

    /// Lowest local z reached by the shape when upright.
    pub fn half_height(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents } => half_extents[2],
            Shape::Cylinder { half_height, .. } => half_height,
        }
    }

    /// Radius of the footprint's bounding circle when upright.
    pub fn footprint_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents } => half_extents[0].hypot(half_extents[1]),
            Shape::Cylinder { radius, .. } => radius,
        }
    }
}

/// A posed analytic shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdfPrimitive {
    pub shape: Shape,
    pub pose: Pose,
}

impl SdfPrimitive {
    pub fn new(shape: Shape, pose: Pose) -> Result<Self, SceneError> {
        if shape.params().iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SceneError::InvalidPrimitive(format!(
                "shape parameters must be positive: {shape:?}"
            )));
        }
        Ok(Self { shape, pose })
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        let local = self.pose.inverse_transform_point(&(*p).into());
        self.shape.sdf_local(&local.coords)
    }

    /// Outward unit normal from central differences of the SDF.
    pub fn normal(&self, p: &Vec3) -> Vec3 {
        const H: f64 = 1e-6;
        let mut g = Vec3::zeros();
        for i in 0..3 {
            let mut e = Vec3::zeros();
            e[i] = H;
            g[i] = self.sdf(&(p + e)) - self.sdf(&(p - e));
        }
        g.normalize()
    }

    pub fn aabb(&self) -> Aabb {
        if let Shape::Sphere { radius } = self.shape {
            let c = self.pose.translation.vector;
            return Aabb::new(c - Vec3::repeat(radius), c + Vec3::repeat(radius));
        }
        let corners = self.shape.local_corners().map(|c| self.pose * nalgebra::Point3::from(c));
        Aabb::from_points(corners.iter().map(|p| &p.coords))
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation.vector
    }
}
