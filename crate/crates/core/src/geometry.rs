//! Shared geometric vocabulary: vectors, rigid poses, boxes and the cubic workspace.

use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Rotation = UnitQuaternion<f64>;
/// Rigid transform (rotation followed by translation).
pub type Pose = Isometry3<f64>;

/// Builds a pose from a translation and a rotation.
pub fn pose(translation: Vec3, rotation: Rotation) -> Pose {
    Isometry3::from_parts(Translation3::from(translation), rotation)
}

/// Rotation about the world z axis.
pub fn yaw(angle: f64) -> Rotation {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle)
}

/// Two unit vectors spanning the plane orthogonal to `dir`.
///
/// The first axis is `up × dir` normalized, where `up` is world z unless
/// `|dir·z| > 0.99`, in which case world x is used instead. The triple
/// `(e1, e2, dir)` is right-handed.
pub fn orthonormal_frame(dir: &Vec3) -> (Vec3, Vec3) {
    let up = if dir.z.abs() > 0.99 { Vec3::x() } else { Vec3::z() };
    let e1 = up.cross(dir).normalize();
    let e2 = dir.cross(&e1);
    (e1, e2)
}

/// Camera pose looking from `eye` toward `target` (OpenCV convention: +z forward,
/// +x right, +y down in the image).
pub fn look_at(eye: Vec3, target: Vec3) -> Pose {
    let forward = (target - eye).normalize();
    let up = if forward.z.abs() > 0.99 { Vec3::x() } else { Vec3::z() };
    // image "down" points along -up projected onto the image plane
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let m = Matrix3::from_columns(&[right, down, forward]);
    let rot = UnitQuaternion::from_matrix(&m);
    pose(eye, rot)
}

/// Angle between two unit vectors, in radians.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos()
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Self { min, max }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x.max(0.0) * e.y.max(0.0) * e.z.max(0.0)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn intersection(&self, other: &Aabb) -> Option<Aabb> {
        let min = self.min.sup(&other.min);
        let max = self.max.inf(&other.max);
        (0..3).all(|i| min[i] <= max[i]).then_some(Aabb { min, max })
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        Aabb {
            min: self.min - Vec3::repeat(margin),
            max: self.max + Vec3::repeat(margin),
        }
    }

    pub fn clamp_point(&self, p: &Vec3) -> Vec3 {
        p.sup(&self.min).inf(&self.max)
    }

    /// Slab test. Returns the parametric interval `[t_in, t_out]` of the infinite
    /// line `origin + t·dir` inside the box, or `None` when the line misses.
    pub fn line_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let a = (self.min[i] - origin[i]) / dir[i];
            let b = (self.max[i] - origin[i]) / dir[i];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1).then_some((t0, t1))
    }

    /// Regular `n×n×n` lattice of cell centers filling the box, x fastest.
    pub fn lattice(&self, per_axis: usize) -> Vec<Vec3> {
        let e = self.extent();
        let mut out = Vec::with_capacity(per_axis.pow(3));
        for k in 0..per_axis {
            for j in 0..per_axis {
                for i in 0..per_axis {
                    let f = |n: usize| (n as f64 + 0.5) / per_axis as f64;
                    out.push(Vec3::new(
                        self.min.x + f(i) * e.x,
                        self.min.y + f(j) * e.y,
                        self.min.z + f(k) * e.z,
                    ));
                }
            }
        }
        out
    }
}

/// The cubic workspace every volumetric quantity lives in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub origin: Vec3,
    /// Edge length in meters.
    pub size: f64,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            origin: Vec3::zeros(),
            size: 0.30,
        }
    }
}

impl Workspace {
    pub fn aabb(&self) -> Aabb {
        Aabb::new(self.origin, self.origin + Vec3::repeat(self.size))
    }

    pub fn center(&self) -> Vec3 {
        self.origin + Vec3::repeat(self.size * 0.5)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.aabb().contains(p)
    }

    /// World meters to workspace-normalized coordinates in `[0,1]³`.
    pub fn normalize_point(&self, p: &Vec3) -> Vec3 {
        (p - self.origin) / self.size
    }
}
