//! Truncated signed distance volume fused from depth images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Vec3, Workspace};
use crate::io::{FormatError, Reader};
use crate::scene::DepthImage;

#[derive(Debug, Error)]
pub enum TsdfError {
    #[error("point ({x:.4}, {y:.4}, {z:.4}) lies outside the workspace")]
    OutOfBounds { x: f64, y: f64, z: f64 },
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsdfConfig {
    pub resolution: usize,
    /// Truncation distance in voxel edges.
    pub truncation_voxels: f64,
    pub weight_cap: f64,
    pub update_weight: f64,
    /// Update free space in front of the surface, not just the truncation band.
    pub space_carving: bool,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        Self {
            resolution: 40,
            truncation_voxels: 4.0,
            weight_cap: 32.0,
            update_weight: 1.0,
            space_carving: true,
        }
    }
}

/// Outcome of one integration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntegrateReport {
    pub updated: usize,
    /// No voxel projected into the image.
    pub frustum_missed: bool,
}

/// Cubic voxel grid. Node `(i, j, k)` sits at the voxel center
/// `origin + (i + ½, j + ½, k + ½)·voxel`; storage is x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdfVolume {
    pub config: TsdfConfig,
    pub workspace: Workspace,
    /// Normalized distances in `[-1, 1]`; unobserved voxels hold `+1`.
    pub distance: Vec<f64>,
    pub weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(workspace: Workspace, config: TsdfConfig) -> Self {
        let n = config.resolution.pow(3);
        Self {
            config,
            workspace,
            distance: vec![1.0; n],
            weight: vec![0.0; n],
        }
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn voxel_size(&self) -> f64 {
        self.workspace.size / self.config.resolution as f64
    }

    pub fn truncation(&self) -> f64 {
        self.config.truncation_voxels * self.voxel_size()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.config.resolution;
        i + n * (j + n * k)
    }

    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let n = self.config.resolution;
        (index % n, (index / n) % n, index / (n * n))
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = self.voxel_size();
        self.workspace.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * s
    }

    /// Voxel containing `p`, if inside the workspace.
    pub fn voxel_of(&self, p: &Vec3) -> Option<(usize, usize, usize)> {
        if !self.workspace.contains(p) {
            return None;
        }
        let n = self.config.resolution;
        let g = (p - self.workspace.origin) / self.voxel_size();
        let c = |x: f64| (x.floor().max(0.0) as usize).min(n - 1);
        Some((c(g.x), c(g.y), c(g.z)))
    }

    pub fn observed_count(&self) -> usize {
        self.weight.iter().filter(|w| **w > 0.0).count()
    }

    /// Indices of voxels whose centers fall inside `bbox`.
    pub fn voxels_in(&self, bbox: &Aabb) -> Vec<usize> {
        let n = self.config.resolution;
        let mut out = Vec::new();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    if bbox.contains(&self.voxel_center(i, j, k)) {
                        out.push(self.index(i, j, k));
                    }
                }
            }
        }
        out
    }

    /// Projective weighted-average fusion of one depth image.
    pub fn integrate(&mut self, image: &DepthImage) -> IntegrateReport {
        let n = self.config.resolution;
        let tau = self.truncation();
        let cam = &image.camera;
        let mut updated = 0;
        let mut in_frustum = false;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let p = self.voxel_center(i, j, k);
                    let Some((u, v, z)) = cam.project(&p) else {
                        continue;
                    };
                    let (u, v) = (u.round(), v.round());
                    if u < 0.0 || v < 0.0 || u >= image.width as f64 || v >= image.height as f64 {
                        continue;
                    }
                    in_frustum = true;
                    let Some(d) = image.get(u as usize, v as usize) else {
                        continue;
                    };
                    let sdf = d - z;
                    if sdf < -tau || (!self.config.space_carving && sdf > tau) {
                        continue;
                    }
                    let t = (sdf / tau).min(1.0);
                    let idx = self.index(i, j, k);
                    let w = self.weight[idx];
                    let dw = self.config.update_weight;
                    self.distance[idx] = ((w * self.distance[idx] + dw * t) / (w + dw)).clamp(-1.0, 1.0);
                    self.weight[idx] = (w + dw).min(self.config.weight_cap);
                    updated += 1;
                }
            }
        }
        if !in_frustum {
            log::warn!("depth image frustum misses the workspace; integration skipped");
        }
        IntegrateReport {
            updated,
            frustum_missed: !in_frustum,
        }
    }

    fn lerp_coords(&self, p: &Vec3) -> ([usize; 3], [f64; 3]) {
        let n = self.config.resolution;
        let g = (p - self.workspace.origin) / self.voxel_size() - Vec3::repeat(0.5);
        let mut base = [0; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            // nodes live at voxel centers; the half-voxel rim extrapolates linearly
            let mut x = g[a];
            if (x - x.round()).abs() < 1e-9 {
                x = x.round();
            }
            let b = x.floor().clamp(0.0, (n - 2) as f64);
            base[a] = b as usize;
            frac[a] = x - b;
        }
        (base, frac)
    }

    /// Trilinear interpolation of any per-voxel field.
    pub fn interpolate(&self, field: &[f64], p: &Vec3) -> Result<f64, TsdfError> {
        if !self.workspace.contains(p) {
            return Err(TsdfError::OutOfBounds { x: p.x, y: p.y, z: p.z });
        }
        let ([i, j, k], [fx, fy, fz]) = self.lerp_coords(p);
        let at = |di: usize, dj: usize, dk: usize| field[self.index(i + di, j + dj, k + dk)];
        let lerp = |a: f64, b: f64, t: f64| (1.0 - t) * a + t * b;
        let x00 = lerp(at(0, 0, 0), at(1, 0, 0), fx);
        let x10 = lerp(at(0, 1, 0), at(1, 1, 0), fx);
        let x01 = lerp(at(0, 0, 1), at(1, 0, 1), fx);
        let x11 = lerp(at(0, 1, 1), at(1, 1, 1), fx);
        Ok(lerp(lerp(x00, x10, fy), lerp(x01, x11, fy), fz))
    }

    pub fn sample_trilinear(&self, p: &Vec3) -> Result<f64, TsdfError> {
        self.interpolate(&self.distance, p)
    }

    /// Sign-change points between observed face neighbours, linearly interpolated.
    pub fn zero_crossings(&self) -> Vec<Vec3> {
        let n = self.config.resolution;
        let mut out = Vec::new();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let a = self.index(i, j, k);
                    if self.weight[a] <= 0.0 {
                        continue;
                    }
                    let pa = self.voxel_center(i, j, k);
                    for (di, dj, dk) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                        let (ni, nj, nk) = (i + di, j + dj, k + dk);
                        if ni >= n || nj >= n || nk >= n {
                            continue;
                        }
                        let b = self.index(ni, nj, nk);
                        let (da, db) = (self.distance[a], self.distance[b]);
                        if self.weight[b] <= 0.0 || (da < 0.0) == (db < 0.0) {
                            continue;
                        }
                        let t = da / (da - db);
                        out.push(pa + (self.voxel_center(ni, nj, nk) - pa) * t);
                    }
                }
            }
        }
        out
    }

    /// Header (magic, resolution, origin, edge length) then distances and
    /// weights, all little-endian 32-bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.distance.len() * 8);
        out.extend_from_slice(b"TSDF");
        out.extend_from_slice(&(self.config.resolution as u32).to_le_bytes());
        for v in [
            self.workspace.origin.x,
            self.workspace.origin.y,
            self.workspace.origin.z,
            self.workspace.size,
        ] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for v in self.distance.iter().chain(&self.weight) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Reads a dump written by [`Self::to_bytes`]; non-geometric settings come from `config`.
    pub fn from_bytes(bytes: &[u8], config: TsdfConfig) -> Result<Self, TsdfError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != b"TSDF" {
            return Err(FormatError::BadMagic { expected: "TSDF".into() }.into());
        }
        let at = r.pos;
        let n = r.u32()? as usize;
        if n < 2 || n > 1024 {
            return Err(FormatError::Invalid {
                offset: at,
                message: format!("resolution {n} out of range"),
            }
            .into());
        }
        let h = r.f32s(4)?;
        let workspace = Workspace {
            origin: Vec3::new(h[0] as f64, h[1] as f64, h[2] as f64),
            size: h[3] as f64,
        };
        let count = n * n * n;
        let distance = r.f32s(count)?.into_iter().map(f64::from).collect();
        let weight = r.f32s(count)?.into_iter().map(f64::from).collect();
        if !r.is_done() {
            return Err(FormatError::Invalid {
                offset: r.pos,
                message: "trailing bytes".into(),
            }
            .into());
        }
        Ok(Self {
            config: TsdfConfig { resolution: n, ..config },
            workspace,
            distance,
            weight,
        })
    }
}
