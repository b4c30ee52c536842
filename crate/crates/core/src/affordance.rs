//! View-aware grasp affordance prediction: the learned head, the analytic
//! oracle, affordance imagery over a target box, the grasp loss and training.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Vec3};
use crate::grasp::{wrap_rotation, Grasp, GraspLabel};
use crate::io::{FormatError, Reader, Tensor, TensorFile};
use crate::nn::{sigmoid, softplus, Adam, Cache, Mlp, NnError};
use crate::scene::{grasp_feasible, GraspVerdict, GripperConfig, Scene};
use crate::triplane::{TriPlaneVolume, TriplaneError};

#[derive(Debug, Error)]
pub enum AffordanceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("degenerate target box")]
    DegenerateBox,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (last finite loss {last:.6})")]
    NonFinite { epoch: usize, batch: usize, last: f64 },
    #[error(transparent)]
    Features(#[from] TriplaneError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Head input length for plane width `f`: view, ray feature, geometry feature.
pub fn head_input_dim(features: usize) -> usize {
    3 + 3 * features + 9 * 3 * features
}

/// Concatenated head input for a grasp at `center` seen along `view`.
pub fn grasp_features(planes: &TriPlaneVolume, center: &Vec3, view: &Vec3) -> Result<Vec<f64>, TriplaneError> {
    let mut x = Vec::with_capacity(head_input_dim(planes.features));
    x.extend_from_slice(view.as_slice());
    x.extend(planes.ray_feature(center, view)?);
    x.extend(planes.geo_feature(center, view));
    Ok(x)
}

/// Maps raw outputs `(quality logit, a, b, width logit)` to `(q, r, w)`.
pub fn decode_outputs(o: &[f64], max_width: f64) -> (f64, f64, f64) {
    let q = sigmoid(o[0]);
    let r = wrap_rotation(o[2].atan2(o[1]) * 0.5);
    (q, r, max_width * sigmoid(o[3]))
}

/// Residual MLP head with fixed input standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct AffordanceHead {
    pub features: usize,
    pub max_width: f64,
    pub mlp: Mlp,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
}

impl AffordanceHead {
    pub fn seeded(features: usize, hidden: usize, blocks: usize, max_width: f64, seed: u64) -> Self {
        let d = head_input_dim(features);
        Self {
            features,
            max_width,
            mlp: Mlp::seeded(d, hidden, blocks, 4, seed),
            input_mean: vec![0.0; d],
            input_scale: vec![1.0; d],
        }
    }

    pub fn zeros(features: usize, hidden: usize, blocks: usize, max_width: f64) -> Self {
        let d = head_input_dim(features);
        Self {
            features,
            max_width,
            mlp: Mlp::zeros(d, hidden, blocks, 4),
            input_mean: vec![0.0; d],
            input_scale: vec![1.0; d],
        }
    }

    fn standardize(&self, x: &[f64]) -> Result<Vec<f64>, AffordanceError> {
        if x.len() != self.mlp.input {
            return Err(AffordanceError::Config(format!(
                "head expects {} inputs, got {}",
                self.mlp.input,
                x.len()
            )));
        }
        Ok(x.iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect())
    }

    pub fn raw(&self, x: &[f64]) -> Result<Vec<f64>, AffordanceError> {
        Ok(self.mlp.forward(&self.standardize(x)?)?)
    }

    fn raw_cached(&self, x: &[f64], cache: &mut Cache) -> Result<Vec<f64>, AffordanceError> {
        Ok(self.mlp.forward_cached(&self.standardize(x)?, cache)?)
    }

    /// `(q, r, w)` for a unit view and matching ray/geometry features.
    pub fn predict(&self, view: &Vec3, ray: &[f64], geo: &[f64]) -> Result<(f64, f64, f64), AffordanceError> {
        if (view.norm() - 1.0).abs() > 1e-9 {
            return Err(AffordanceError::Config("view direction must be unit length".into()));
        }
        let mut x = Vec::with_capacity(self.mlp.input);
        x.extend_from_slice(view.as_slice());
        x.extend_from_slice(ray);
        x.extend_from_slice(geo);
        let o = self.raw(&x)?;
        Ok(decode_outputs(&o, self.max_width))
    }

    pub fn to_tensor_file(&self, provenance: &str) -> TensorFile {
        let t = |name: &str, data: &[f64]| Tensor {
            name: name.into(),
            shape: vec![data.len()],
            data: data.iter().map(|v| *v as f32).collect(),
        };
        let extra = vec![
            t("input.mean", &self.input_mean),
            t("input.scale", &self.input_scale),
            t("max_width", &[self.max_width]),
        ];
        self.mlp.to_tensor_file("affordance_head", self.features as u32, provenance, extra)
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self, AffordanceError> {
        if file.kind != "affordance_head" {
            return Err(AffordanceError::Config(format!("expected head weights, found {:?}", file.kind)));
        }
        let mlp = Mlp::from_tensor_file(file)?;
        let features = file.feature_dim as usize;
        if mlp.input != head_input_dim(features) || mlp.output != 4 {
            return Err(AffordanceError::Config("head shapes inconsistent with F".into()));
        }
        let get = |name: &str| -> Result<Vec<f64>, AffordanceError> {
            let t = file
                .get(name)
                .ok_or_else(|| AffordanceError::Config(format!("missing tensor {name}")))?;
            Ok(t.data.iter().map(|v| *v as f64).collect())
        };
        let head = Self {
            features,
            max_width: get("max_width")?.first().copied().unwrap_or(0.08),
            input_mean: get("input.mean")?,
            input_scale: get("input.scale")?,
            mlp,
        };
        if head.input_mean.len() != head.mlp.input || head.input_scale.len() != head.mlp.input {
            return Err(AffordanceError::Config("standardization length mismatch".into()));
        }
        Ok(head)
    }
}

/// Ground-truth affordance at `center` from approach `view`: sweep `angles`
/// rotations in `[0, π)`, first success wins.
pub fn oracle_predict(scene: &Scene, center: &Vec3, view: &Vec3, gripper: &GripperConfig, angles: usize) -> Grasp {
    for k in 0..angles {
        let rotation = k as f64 * PI / angles as f64;
        let g = Grasp {
            quality: 1.0,
            center: *center,
            view: *view,
            rotation,
            width: gripper.max_opening,
        };
        if let GraspVerdict::Success { contact_span } = grasp_feasible(scene, &g, gripper) {
            return Grasp {
                width: (contact_span + 0.005).min(gripper.max_opening),
                ..g
            };
        }
    }
    Grasp {
        quality: 0.0,
        center: *center,
        view: *view,
        rotation: 0.0,
        width: 0.0,
    }
}

/// Anything that maps (planes, center, view) to a grasp affordance.
pub trait AffordanceModel: Sync {
    fn predict(&self, planes: &TriPlaneVolume, center: &Vec3, view: &Vec3) -> Result<Grasp, AffordanceError>;
}

impl AffordanceModel for AffordanceHead {
    fn predict(&self, planes: &TriPlaneVolume, center: &Vec3, view: &Vec3) -> Result<Grasp, AffordanceError> {
        if planes.features != self.features {
            return Err(AffordanceError::Config(format!(
                "planes carry F = {}, head expects {}",
                planes.features, self.features
            )));
        }
        let x = grasp_features(planes, center, view)?;
        let (quality, rotation, width) = decode_outputs(&self.raw(&x)?, self.max_width);
        Ok(Grasp {
            quality,
            center: *center,
            view: *view,
            rotation,
            width,
        })
    }
}

/// Ground-truth predictor that ignores the planes and queries the scene.
pub struct OracleModel<'a> {
    pub scene: &'a Scene,
    pub gripper: GripperConfig,
    pub angles: usize,
}

impl AffordanceModel for OracleModel<'_> {
    fn predict(&self, _planes: &TriPlaneVolume, center: &Vec3, view: &Vec3) -> Result<Grasp, AffordanceError> {
        Ok(oracle_predict(self.scene, center, view, &self.gripper, self.angles))
    }
}

/// Emits the same quality everywhere.
pub struct ConstantModel {
    pub quality: f64,
    pub width: f64,
}

impl AffordanceModel for ConstantModel {
    fn predict(&self, _planes: &TriPlaneVolume, center: &Vec3, view: &Vec3) -> Result<Grasp, AffordanceError> {
        Ok(Grasp {
            quality: self.quality,
            center: *center,
            view: *view,
            rotation: 0.0,
            width: self.width,
        })
    }
}

/// Grasp centers on a `per_axis³` lattice over `bbox`, clipped to the workspace.
pub fn grasp_centers(planes: &TriPlaneVolume, bbox: &Aabb, per_axis: usize) -> Result<Vec<Vec3>, AffordanceError> {
    let valid = (0..3).all(|i| bbox.min[i].is_finite() && bbox.max[i].is_finite() && bbox.min[i] <= bbox.max[i]);
    if !valid || per_axis == 0 || (per_axis > 1 && bbox.volume() <= 0.0) {
        return Err(AffordanceError::DegenerateBox);
    }
    let ws = planes.workspace.aabb();
    if ws.intersection(bbox).is_none() {
        return Err(AffordanceError::DegenerateBox);
    }
    Ok(bbox.lattice(per_axis).iter().map(|c| ws.clamp_point(c)).collect())
}

/// Predicts grasps from view `view` at every lattice center of `bbox`, sorted
/// by quality (descending, lattice order on ties).
pub fn imagine_affordances(
    model: &dyn AffordanceModel,
    planes: &TriPlaneVolume,
    bbox: &Aabb,
    view: &Vec3,
    per_axis: usize,
) -> Result<Vec<Grasp>, AffordanceError> {
    let centers = grasp_centers(planes, bbox, per_axis)?;
    let mut grasps = centers
        .par_iter()
        .map(|c| model.predict(planes, c, view))
        .collect::<Result<Vec<_>, _>>()?;
    grasps.sort_by(|a, b| b.quality.total_cmp(&a.quality));
    Ok(grasps)
}

/// Loss terms of one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub quality: f64,
    pub rotation: f64,
    pub width: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.quality + self.rotation + self.width
    }
}

/// Grasp loss on raw outputs `(quality logit, a, b, width logit)` and its
/// exact gradient. Rotation and width terms apply to successful labels only.
pub fn grasp_loss(raw: &[f64; 4], label: &GraspLabel, max_width: f64) -> (LossParts, [f64; 4]) {
    let y = if label.success { 1.0 } else { 0.0 };
    let [z, a, b, wl] = *raw;
    let mut parts = LossParts {
        quality: softplus(z) - y * z,
        ..LossParts::default()
    };
    let mut grad = [sigmoid(z) - y, 0.0, 0.0, 0.0];
    if label.success {
        let (s2, c2) = (2.0 * label.rotation).sin_cos();
        let n2 = a * a + b * b + 1e-12;
        let n = n2.sqrt();
        let dot = a * c2 + b * s2;
        parts.rotation = 1.0 - dot / n;
        grad[1] = -(c2 / n - dot * a / (n2 * n));
        grad[2] = -(s2 / n - dot * b / (n2 * n));
        let s = sigmoid(wl);
        let w = max_width * s;
        let diff = w - label.width;
        parts.width = diff * diff / (max_width * max_width);
        grad[3] = 2.0 * diff / (max_width * max_width) * max_width * s * (1.0 - s);
    }
    (parts, grad)
}

/// Where the training pair came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    FrontObserveFrontGrasp,
    FrontObserveSideGrasp,
    MultiObserveFrontGrasp,
}

impl PairKind {
    pub const ALL: [PairKind; 3] = [
        PairKind::FrontObserveFrontGrasp,
        PairKind::FrontObserveSideGrasp,
        PairKind::MultiObserveFrontGrasp,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(c: u32) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

/// One training example. Stored values are f32-exact so file round trips
/// are bit-identical.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub kind: PairKind,
    pub features: Vec<f32>,
    pub label: GraspLabel,
}

impl DatasetRecord {
    pub fn new(kind: PairKind, features: &[f64], label: GraspLabel) -> Self {
        let q = |v: f64| v as f32 as f64;
        let qv = |v: Vec3| v.map(q);
        Self {
            kind,
            features: features.iter().map(|v| *v as f32).collect(),
            label: GraspLabel {
                center: qv(label.center),
                view: qv(label.view),
                rotation: q(label.rotation),
                width: q(label.width),
                success: label.success,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: usize,
    pub records: Vec<DatasetRecord>,
}

const DATASET_MAGIC: &[u8; 4] = b"GNBD";

impl Dataset {
    pub fn input_dim(&self) -> usize {
        head_input_dim(self.features)
    }

    pub fn positive_fraction(&self) -> f64 {
        let pos = self.records.iter().filter(|r| r.label.success).count();
        pos as f64 / self.records.len().max(1) as f64
    }

    /// Header: magic, version, record count, F, input length. Each record: kind
    /// code, features, then center, view, rotation, width, success, all
    /// little-endian 32-bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.input_dim();
        let mut out = Vec::with_capacity(20 + self.records.len() * 4 * (d + 10));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [1u32, self.records.len() as u32, self.features as u32, d as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&r.kind.code().to_le_bytes());
            let l = &r.label;
            let tail = [
                l.center.x, l.center.y, l.center.z, l.view.x, l.view.y, l.view.z, l.rotation, l.width,
            ];
            for v in r.features.iter().copied().chain(tail.iter().map(|v| *v as f32)) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(l.success as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AffordanceError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != DATASET_MAGIC {
            return Err(FormatError::BadMagic { expected: "GNBD".into() }.into());
        }
        let at = r.pos;
        if r.u32()? != 1 {
            return Err(FormatError::Invalid {
                offset: at,
                message: "unsupported dataset version".into(),
            }
            .into());
        }
        let count = r.u32()? as usize;
        let features = r.u32()? as usize;
        let at = r.pos;
        let d = r.u32()? as usize;
        if d != head_input_dim(features) {
            return Err(FormatError::Invalid {
                offset: at,
                message: format!("input length {d} inconsistent with F = {features}"),
            }
            .into());
        }
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let at = r.pos;
            let kind = PairKind::from_code(r.u32()?).ok_or(FormatError::Invalid {
                offset: at,
                message: "unknown pair kind".into(),
            })?;
            let feats = r.f32s(d)?;
            let t: Vec<f64> = r.f32s(8)?.into_iter().map(f64::from).collect();
            let at = r.pos;
            let success = match r.u32()? {
                0 => false,
                1 => true,
                other => {
                    return Err(FormatError::Invalid {
                        offset: at,
                        message: format!("success flag {other}"),
                    }
                    .into())
                }
            };
            records.push(DatasetRecord {
                kind,
                features: feats,
                label: GraspLabel {
                    center: Vec3::new(t[0], t[1], t[2]),
                    view: Vec3::new(t[3], t[4], t[5]),
                    rotation: t[6],
                    width: t[7],
                    success,
                },
            });
        }
        if !r.is_done() {
            return Err(FormatError::Invalid {
                offset: r.pos,
                message: "trailing bytes".into(),
            }
            .into());
        }
        Ok(Self { features, records })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub hidden: usize,
    pub blocks: usize,
    pub max_width: f64,
    pub seed: u64,
    /// Return the weights of the epoch with the lowest validation loss.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 2e-4,
            batch_size: 128,
            validation_fraction: 0.1,
            hidden: 128,
            blocks: 3,
            max_width: 0.08,
            seed: 0,
            keep_best: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: LossParts,
    pub validation: LossParts,
}

/// CSV training log: one row per epoch with total and component losses.
pub fn training_log_csv(stats: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,train_q,train_r,train_w,val_q,val_r,val_w\n");
    for s in stats {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            s.epoch,
            s.train.total(),
            s.validation.total(),
            s.train.quality,
            s.train.rotation,
            s.train.width,
            s.validation.quality,
            s.validation.rotation,
            s.validation.width
        ));
    }
    out
}

/// Fixed chunk count for batch gradient accumulation, so the reduction order
/// does not depend on the number of worker threads.
const GRAD_CHUNKS: usize = 8;

fn mean_loss(head: &AffordanceHead, data: &[&DatasetRecord]) -> Result<LossParts, AffordanceError> {
    let parts = data
        .par_iter()
        .map(|r| {
            let x: Vec<f64> = r.features.iter().map(|v| *v as f64).collect();
            let o = head.raw(&x)?;
            Ok(grasp_loss(&[o[0], o[1], o[2], o[3]], &r.label, head.max_width).0)
        })
        .collect::<Result<Vec<_>, AffordanceError>>()?;
    let n = parts.len().max(1) as f64;
    let mut acc = LossParts::default();
    for p in parts {
        acc.quality += p.quality / n;
        acc.rotation += p.rotation / n;
        acc.width += p.width / n;
    }
    Ok(acc)
}

/// Sets the head's input standardization from training inputs.
fn fit_standardization(head: &mut AffordanceHead, data: &[&DatasetRecord]) {
    let d = head.mlp.input;
    let n = data.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for r in data {
        for (i, v) in r.features.iter().enumerate() {
            let v = *v as f64;
            mean[i] += v / n;
            sq[i] += v * v / n;
        }
    }
    head.input_scale = mean
        .iter()
        .zip(&sq)
        .map(|(m, s)| {
            let var = (s - m * m).max(0.0);
            if var > 1e-12 {
                1.0 / var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    head.input_mean = mean;
}

/// Minibatch Adam on the grasp loss with a seeded split and shuffle.
pub fn train_head(dataset: &Dataset, cfg: &TrainConfig) -> Result<(AffordanceHead, Vec<EpochStats>), AffordanceError> {
    if dataset.records.is_empty() {
        return Err(AffordanceError::Config("empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(AffordanceError::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.records.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((dataset.records.len() as f64 * cfg.validation_fraction).round() as usize).min(order.len() - 1);
    let val: Vec<&DatasetRecord> = order[..n_val].iter().map(|i| &dataset.records[*i]).collect();
    let mut train: Vec<&DatasetRecord> = order[n_val..].iter().map(|i| &dataset.records[*i]).collect();

    let mut head = AffordanceHead::seeded(dataset.features, cfg.hidden, cfg.blocks, cfg.max_width, cfg.seed);
    fit_standardization(&mut head, &train);
    let mut adam = Adam::new(cfg.learning_rate, head.mlp.params.len());
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut last = f64::NAN;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for (batch_index, batch) in train.chunks(cfg.batch_size).enumerate() {
            let chunk_len = batch.len().div_ceil(GRAD_CHUNKS);
            let partial = batch
                .par_chunks(chunk_len)
                .map(|chunk| {
                    let mut grad = vec![0.0; head.mlp.params.len()];
                    let mut cache = Cache::default();
                    let mut loss = 0.0;
                    for r in chunk {
                        let x: Vec<f64> = r.features.iter().map(|v| *v as f64).collect();
                        let o = head.raw_cached(&x, &mut cache)?;
                        let (parts, g) = grasp_loss(&[o[0], o[1], o[2], o[3]], &r.label, head.max_width);
                        loss += parts.total();
                        head.mlp.backward(&cache, &g, &mut grad);
                    }
                    Ok((loss, grad))
                })
                .collect::<Result<Vec<_>, AffordanceError>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; head.mlp.params.len()];
            let mut loss = 0.0;
            for (l, g) in partial {
                loss += l * scale;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(AffordanceError::NonFinite {
                    epoch,
                    batch: batch_index,
                    last,
                });
            }
            last = loss;
            adam.step(&mut head.mlp.params, &grad);
        }
        let train_loss = mean_loss(&head, &train)?;
        let validation = if val.is_empty() {
            LossParts::default()
        } else {
            mean_loss(&head, &val)?
        };
        log::info!(
            "epoch {epoch}: train {:.4} (q {:.4}) val {:.4} (q {:.4})",
            train_loss.total(),
            train_loss.quality,
            validation.total(),
            validation.quality
        );
        stats.push(EpochStats {
            epoch,
            train: train_loss,
            validation,
        });
        if cfg.keep_best && !val.is_empty() && best.as_ref().is_none_or(|(b, _)| validation.total() < *b) {
            best = Some((validation.total(), head.mlp.params.clone()));
        }
    }
    if let Some((loss, params)) = best {
        log::info!("keeping weights with validation loss {loss:.4}");
        head.mlp.params = params;
    }
    Ok((head, stats))
}
