//! Tri-plane feature volume built from the TSDF, with point, ray and local
//! geometry queries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{orthonormal_frame, Vec3, Workspace};
use crate::io::{FormatError, Tensor, TensorFile};
use crate::nn::softplus;
use crate::tsdf::TsdfVolume;

#[derive(Debug, Error)]
pub enum TriplaneError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("ray through ({x:.4}, {y:.4}, {z:.4}) has no chord inside the workspace")]
    DegenerateChord { x: f64, y: f64, z: f64 },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Number of fixed reduction channels per plane.
pub const STAGE1_CHANNELS: usize = 4;
/// Ray sample spacing as a fraction of the workspace edge.
pub const RAY_STEP: f64 = 0.1;
/// Edge of the grasp-aligned cuboid as a fraction of the workspace edge.
pub const GEO_CUBE_EDGE: f64 = 0.25;

/// Planes in the fixed order xy, xz, yz. Each plane is `(u, v)` over the two
/// kept world axes.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Three `n×n` planes of `F`-dimensional features. Storage per plane is
/// `(v·n + u)·F + channel`; nodes sit at cell centers like the TSDF grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneVolume {
    pub resolution: usize,
    pub features: usize,
    pub workspace: Workspace,
    pub planes: [Vec<f64>; 3],
}

impl TriPlaneVolume {
    pub fn from_fn(
        resolution: usize,
        features: usize,
        workspace: Workspace,
        f: impl Fn(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let planes = std::array::from_fn(|plane| {
            let mut data = Vec::with_capacity(resolution * resolution * features);
            for v in 0..resolution {
                for u in 0..resolution {
                    for c in 0..features {
                        data.push(f(plane, u, v, c));
                    }
                }
            }
            data
        });
        Self {
            resolution,
            features,
            workspace,
            planes,
        }
    }

    pub fn point_dim(&self) -> usize {
        3 * self.features
    }

    pub fn node(&self, plane: usize, u: usize, v: usize) -> &[f64] {
        let f = self.features;
        let at = (v * self.resolution + u) * f;
        &self.planes[plane][at..at + f]
    }

    /// World coordinate of the node center along one axis.
    pub fn node_coord(&self, index: usize) -> f64 {
        (index as f64 + 0.5) * self.workspace.size / self.resolution as f64
    }

    fn lerp_axis(&self, x: f64) -> (usize, f64) {
        let n = self.resolution;
        let mut g = x / self.workspace.size * n as f64 - 0.5;
        if (g - g.round()).abs() < 1e-9 {
            g = g.round();
        }
        let b = g.floor().clamp(0.0, (n - 2) as f64);
        (b as usize, g - b)
    }

    /// Concatenated bilinear samples of the three planes at `p`, written into
    /// `out` (length `3F`). Points outside the workspace are clamped to it.
    pub fn query_point_into(&self, p: &Vec3, out: &mut [f64]) {
        let f = self.features;
        debug_assert_eq!(out.len(), 3 * f);
        let local = self.workspace.aabb().clamp_point(p) - self.workspace.origin;
        for (plane, (a, b)) in PLANE_AXES.iter().enumerate() {
            let (u0, fu) = self.lerp_axis(local[*a]);
            let (v0, fv) = self.lerp_axis(local[*b]);
            let w = [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv];
            let n00 = self.node(plane, u0, v0);
            let n10 = self.node(plane, u0 + 1, v0);
            let n01 = self.node(plane, u0, v0 + 1);
            let n11 = self.node(plane, u0 + 1, v0 + 1);
            let dst = &mut out[plane * f..(plane + 1) * f];
            for c in 0..f {
                dst[c] = w[0] * n00[c] + w[1] * n10[c] + w[2] * n01[c] + w[3] * n11[c];
            }
        }
    }

    pub fn query_point(&self, p: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.point_dim()];
        self.query_point_into(p, &mut out);
        out
    }

    /// Sample positions along the full workspace chord through `center` in
    /// direction `dir`, spaced `RAY_STEP·L` and symmetric about the chord
    /// midpoint so that `dir` and `-dir` give the same set.
    pub fn ray_samples(&self, center: &Vec3, dir: &Vec3) -> Result<Vec<Vec3>, TriplaneError> {
        let degenerate = || TriplaneError::DegenerateChord {
            x: center.x,
            y: center.y,
            z: center.z,
        };
        if !self.workspace.contains(center) {
            return Err(degenerate());
        }
        let (t0, t1) = self.workspace.aabb().line_interval(center, dir).ok_or_else(degenerate)?;
        if !(t1 > t0) {
            return Err(degenerate());
        }
        let step = RAY_STEP * self.workspace.size;
        let mid = 0.5 * (t0 + t1);
        let half = 0.5 * (t1 - t0);
        let k_max = (half / step + 1e-9).floor() as i64;
        Ok((-k_max..=k_max)
            .map(|k| center + dir * (mid + k as f64 * step))
            .collect())
    }

    /// Coordinate-wise maximum of point features along the chord.
    pub fn ray_feature(&self, center: &Vec3, dir: &Vec3) -> Result<Vec<f64>, TriplaneError> {
        let samples = self.ray_samples(center, dir)?;
        let mut out = vec![f64::NEG_INFINITY; self.point_dim()];
        let mut buf = vec![0.0; self.point_dim()];
        for s in &samples {
            self.query_point_into(s, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o = o.max(*b);
            }
        }
        Ok(out)
    }

    /// Features of the eight cuboid vertices followed by the center.
    pub fn geo_feature(&self, center: &Vec3, dir: &Vec3) -> Vec<f64> {
        let d = self.point_dim();
        let mut out = vec![0.0; 9 * d];
        let verts = geo_vertices(center, dir, GEO_CUBE_EDGE * self.workspace.size);
        for (n, p) in verts.iter().chain(std::iter::once(center)).enumerate() {
            self.query_point_into(p, &mut out[n * d..(n + 1) * d]);
        }
        out
    }

    /// One channel of one plane as a row-major `n×n` image (v down).
    pub fn channel_image(&self, plane: usize, channel: usize) -> Vec<f64> {
        let n = self.resolution;
        (0..n * n)
            .map(|i| self.planes[plane][i * self.features + channel])
            .collect()
    }
}

/// Cuboid vertices for a grasp at `center` approaching along `dir`: length
/// axis `dir`, width and height axes from [`orthonormal_frame`]. Ordered
/// lexicographically over (length, width, height) signs, minus first.
pub fn geo_vertices(center: &Vec3, dir: &Vec3, edge: f64) -> [Vec3; 8] {
    let (e1, e2) = orthonormal_frame(dir);
    let h = edge * 0.5;
    let mut out = [Vec3::zeros(); 8];
    let sign = |bit: usize| if bit == 0 { -1.0 } else { 1.0 };
    for (n, v) in out.iter_mut().enumerate() {
        *v = center + dir * (sign(n >> 2 & 1) * h) + e1 * (sign(n >> 1 & 1) * h) + e2 * (sign(n & 1) * h);
    }
    out
}

/// Fixed orthographic reduction of the TSDF onto the three planes: mean
/// distance, min distance, occupied fraction and observed fraction.
pub fn stage1_planes(volume: &TsdfVolume) -> TriPlaneVolume {
    let n = volume.resolution();
    let mut planes: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n * n * STAGE1_CHANNELS]);
    for (plane, (a, b)) in PLANE_AXES.iter().enumerate() {
        let drop = 3 - a - b;
        for v in 0..n {
            for u in 0..n {
                let (mut sum, mut min, mut occ, mut obs) = (0.0, f64::INFINITY, 0usize, 0usize);
                for s in 0..n {
                    let mut ijk = [0; 3];
                    ijk[*a] = u;
                    ijk[*b] = v;
                    ijk[drop] = s;
                    let idx = volume.index(ijk[0], ijk[1], ijk[2]);
                    let d = volume.distance[idx];
                    let observed = volume.weight[idx] > 0.0;
                    sum += d;
                    min = min.min(d);
                    occ += (observed && d < 0.0) as usize;
                    obs += observed as usize;
                }
                let at = (v * n + u) * STAGE1_CHANNELS;
                planes[plane][at..at + STAGE1_CHANNELS].copy_from_slice(&[
                    sum / n as f64,
                    min,
                    occ as f64 / n as f64,
                    obs as f64 / n as f64,
                ]);
            }
        }
    }
    TriPlaneVolume {
        resolution: n,
        features: STAGE1_CHANNELS,
        workspace: volume.workspace,
        planes,
    }
}

/// Two 3×3 convolutions shared across planes: `4 → F` with softplus, then
/// `F → F` linear. Weights are laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub features: usize,
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
}

impl EncoderWeights {
    /// Uniform init with variance `1 / fan_in`, zero biases.
    pub fn seeded(features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |fan_in: usize, count: usize| -> Vec<f64> {
            let a = (3.0 / fan_in as f64).sqrt();
            (0..count).map(|_| rng.random_range(-a..a)).collect()
        };
        let conv1_w = init(STAGE1_CHANNELS * 9, features * STAGE1_CHANNELS * 9);
        let conv2_w = init(features * 9, features * features * 9);
        Self {
            features,
            conv1_w,
            conv1_b: vec![0.0; features],
            conv2_w,
            conv2_b: vec![0.0; features],
        }
    }

    pub fn validate(&self) -> Result<(), TriplaneError> {
        let f = self.features;
        let ok = self.conv1_w.len() == f * STAGE1_CHANNELS * 9
            && self.conv1_b.len() == f
            && self.conv2_w.len() == f * f * 9
            && self.conv2_b.len() == f;
        if !ok {
            return Err(TriplaneError::Dimension(format!("encoder tensors inconsistent with F = {f}")));
        }
        Ok(())
    }

    pub fn to_tensor_file(&self, provenance: &str) -> TensorFile {
        let f = self.features;
        let t = |name: &str, shape: Vec<usize>, data: &[f64]| Tensor {
            name: name.into(),
            shape,
            data: data.iter().map(|v| *v as f32).collect(),
        };
        TensorFile {
            kind: "encoder".into(),
            feature_dim: f as u32,
            provenance: provenance.into(),
            tensors: vec![
                t("conv1.w", vec![f, STAGE1_CHANNELS, 3, 3], &self.conv1_w),
                t("conv1.b", vec![f], &self.conv1_b),
                t("conv2.w", vec![f, f, 3, 3], &self.conv2_w),
                t("conv2.b", vec![f], &self.conv2_b),
            ],
        }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self, TriplaneError> {
        if file.kind != "encoder" {
            return Err(TriplaneError::Dimension(format!("expected encoder weights, found {:?}", file.kind)));
        }
        let get = |name: &str| -> Result<Vec<f64>, TriplaneError> {
            file.get(name)
                .map(|t| t.data.iter().map(|v| *v as f64).collect())
                .ok_or_else(|| TriplaneError::Dimension(format!("missing tensor {name}")))
        };
        let w = Self {
            features: file.feature_dim as usize,
            conv1_w: get("conv1.w")?,
            conv1_b: get("conv1.b")?,
            conv2_w: get("conv2.w")?,
            conv2_b: get("conv2.b")?,
        };
        w.validate()?;
        Ok(w)
    }
}

/// 3×3 convolution with edge-replicated padding over one `n×n` plane.
fn conv3x3(input: &[f64], cin: usize, n: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n * cout];
    let clamp = |x: isize| x.clamp(0, n as isize - 1) as usize;
    for v in 0..n {
        for u in 0..n {
            let dst = &mut out[(v * n + u) * cout..(v * n + u + 1) * cout];
            dst.copy_from_slice(b);
            for ky in 0..3 {
                let sv = clamp(v as isize + ky as isize - 1);
                for kx in 0..3 {
                    let su = clamp(u as isize + kx as isize - 1);
                    let src = &input[(sv * n + su) * cin..(sv * n + su + 1) * cin];
                    for (o, d) in dst.iter_mut().enumerate() {
                        let base = o * cin * 9 + ky * 3 + kx;
                        let mut acc = 0.0;
                        for (i, s) in src.iter().enumerate() {
                            acc += w[base + i * 9] * s;
                        }
                        *d += acc;
                    }
                }
            }
        }
    }
    out
}

pub fn encode(volume: &TsdfVolume, weights: &EncoderWeights) -> Result<TriPlaneVolume, TriplaneError> {
    weights.validate()?;
    let stage1 = stage1_planes(volume);
    let n = stage1.resolution;
    let f = weights.features;
    let planes = std::array::from_fn(|plane| {
        let mut h = conv3x3(&stage1.planes[plane], STAGE1_CHANNELS, n, &weights.conv1_w, &weights.conv1_b, f);
        h.iter_mut().for_each(|x| *x = softplus(*x));
        conv3x3(&h, f, n, &weights.conv2_w, &weights.conv2_b, f)
    });
    Ok(TriPlaneVolume {
        resolution: n,
        features: f,
        workspace: volume.workspace,
        planes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsdf::TsdfConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_planes(seed: u64, f: usize) -> TriPlaneVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = TriPlaneVolume::from_fn(40, f, Workspace::default(), |_, _, _, _| 0.0);
        for p in t.planes.iter_mut() {
            p.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
        t
    }

    #[test]
    fn unobserved_volume_gives_constant_stage1() {
        let vol = TsdfVolume::new(Workspace::default(), TsdfConfig::default());
        let s = stage1_planes(&vol);
        for p in &s.planes {
            for cell in p.chunks(STAGE1_CHANNELS) {
                assert_eq!(cell, &[1.0, 1.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn lattice_query_is_exact() {
        let t = random_planes(1, 5);
        let (i, j, k) = (3, 20, 39);
        let p = Vec3::new(t.node_coord(i), t.node_coord(j), t.node_coord(k));
        let q = t.query_point(&p);
        let want: Vec<f64> = [t.node(0, i, j), t.node(1, i, k), t.node(2, j, k)].concat();
        assert_eq!(q, want);
    }

    #[test]
    fn xy_block_ignores_z() {
        let t = random_planes(2, 4);
        let a = t.query_point(&Vec3::new(0.1, 0.2, 0.05));
        let b = t.query_point(&Vec3::new(0.1, 0.2, 0.25));
        assert_eq!(a[..4], b[..4]);
        assert_ne!(a[4..], b[4..]);
    }

    #[test]
    fn constant_planes_give_constant_features() {
        let t = TriPlaneVolume::from_fn(40, 3, Workspace::default(), |_, _, _, c| c as f64 + 0.5);
        let want: Vec<f64> = [0.5, 1.5, 2.5].repeat(3);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        let r = t.ray_feature(&Vec3::new(0.1, 0.2, 0.1), &Vec3::new(0.3, -0.2, 0.9).normalize()).unwrap();
        assert!(close(&r, &want));
        let g = t.geo_feature(&Vec3::new(0.1, 0.2, 0.1), &Vec3::x());
        assert_eq!(g.len(), 9 * want.len());
        assert!(close(&g, &want.repeat(9)));
    }

    #[test]
    fn outside_center_is_an_error() {
        let t = random_planes(3, 2);
        assert!(t.ray_feature(&Vec3::new(0.4, 0.1, 0.1), &Vec3::x()).is_err());
    }

    #[test]
    fn vertices_for_x_direction_are_cube_corners() {
        let v = geo_vertices(&Vec3::zeros(), &Vec3::x(), 0.075);
        // e1 = z × x = y, e2 = x × y = z
        let h = 0.0375;
        let mut n = 0;
        for sl in [-h, h] {
            for sw in [-h, h] {
                for sh in [-h, h] {
                    assert!((v[n] - Vec3::new(sl, sw, sh)).norm() < 1e-15, "{n}");
                    n += 1;
                }
            }
        }
    }

    #[test]
    fn encode_is_deterministic_and_dimensioned() {
        let vol = TsdfVolume::new(Workspace::default(), TsdfConfig::default());
        let w = EncoderWeights::seeded(8, 4);
        let a = encode(&vol, &w).unwrap();
        assert_eq!(a, encode(&vol, &w).unwrap());
        assert_eq!(a.planes[2].len(), 40 * 40 * 8);
        let mut bad = w.clone();
        bad.conv2_b.pop();
        assert!(matches!(encode(&vol, &bad), Err(TriplaneError::Dimension(_))));
    }

    #[test]
    fn encoder_weights_round_trip() {
        let w = EncoderWeights::seeded(6, 9);
        let f = TensorFile::from_bytes(&w.to_tensor_file("seed=9").to_bytes()).unwrap();
        let back = EncoderWeights::from_tensor_file(&f).unwrap();
        for (a, b) in w.conv2_w.iter().zip(&back.conv2_w) {
            assert_eq!(*a as f32 as f64, *b);
        }
    }

    #[test]
    fn encode_is_lipschitz_in_weights() {
        let mut vol = TsdfVolume::new(Workspace::default(), TsdfConfig::default());
        for (n, d) in vol.distance.iter_mut().enumerate() {
            *d = ((n * 31) % 17) as f64 / 8.0 - 1.0;
            vol.weight[n] = (n % 3) as f64;
        }
        let w = EncoderWeights::seeded(4, 1);
        let base = encode(&vol, &w).unwrap();
        let mut slopes = Vec::new();
        for eps in [1e-3, 1e-4, 1e-5] {
            let mut p = w.clone();
            p.conv1_w[7] += eps;
            let out = encode(&vol, &p).unwrap();
            let diff = base.planes[0]
                .iter()
                .zip(&out.planes[0])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            slopes.push(diff / eps);
        }
        // O(eps) change: the slope stays bounded and settles as eps shrinks
        assert!(slopes.iter().all(|s| *s < 100.0));
        assert!((slopes[1] - slopes[2]).abs() < 0.05 * slopes[2].max(1e-9) + 1e-6);
    }

    proptest! {
        #[test]
        fn linear_planes_reproduced(x in 0.0..0.3f64, y in 0.0..0.3f64, z in 0.0..0.3f64) {
            let t = TriPlaneVolume::from_fn(40, 1, Workspace::default(), |_, u, _, _| (u as f64 + 0.5) * 0.3 / 40.0);
            let q = t.query_point(&Vec3::new(x, y, z));
            prop_assert!((q[0] - x).abs() < 1e-6);
            prop_assert!((q[1] - x).abs() < 1e-6);
            prop_assert!((q[2] - y).abs() < 1e-6);
        }

        #[test]
        fn ray_feature_is_direction_symmetric(
            seed in 0u64..50,
            c in prop::array::uniform3(0.01..0.29f64),
            d in prop::array::uniform3(-1.0..1.0f64),
        ) {
            let d = Vec3::from(d);
            prop_assume!(d.norm() > 1e-2);
            let d = d.normalize();
            let t = random_planes(seed, 3);
            let c = Vec3::from(c);
            prop_assert_eq!(t.ray_feature(&c, &d).unwrap(), t.ray_feature(&c, &-d).unwrap());
        }

        #[test]
        fn geo_length_is_nine_points(f in 1usize..6) {
            let t = TriPlaneVolume::from_fn(8, f, Workspace::default(), |p, u, v, c| (p + u * v + c) as f64);
            prop_assert_eq!(t.geo_feature(&Vec3::repeat(0.1), &Vec3::z()).len(), 9 * t.point_dim());
        }
    }
}
