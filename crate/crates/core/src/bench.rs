//! Dataset generation with the three observe/grasp pair kinds, the benchmark
//! runner over packed scenes and the aligned-view experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affordance::{
    grasp_features, oracle_predict, AffordanceHead, AffordanceModel, ConstantModel, Dataset, DatasetRecord, OracleModel,
    PairKind, TrainConfig,
};
use crate::geometry::{angle_between, Aabb, Vec3, Workspace};
use crate::grasp::GraspLabel;
use crate::neural_render::{depth_rays, DepthRay, RenderConfig};
use crate::policy::{
    compute_metrics, generate_candidates, run_episode, Environment, Episode, Metrics, PolicyConfig, PolicyKind,
};
use crate::scene::{
    generate_packed_scene, render_depth, select_target, Camera, GripperConfig, Intrinsics, PackedConfig, Scene,
    TraceConfig,
};
use crate::triplane::{encode, EncoderWeights, TriPlaneVolume};
use crate::tsdf::{TsdfConfig, TsdfVolume};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config keys: {}", .0.join(", "))]
    Unknown(Vec<String>),
    #[error("missing config keys: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("config key {key}: {message}")]
    Invalid { key: String, message: String },
}

/// Which pair kinds feed the training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairMix {
    /// Front-observe-front-grasp only.
    FrontOnly,
    All,
}

impl PairMix {
    pub fn name(self) -> &'static str {
        match self {
            PairMix::FrontOnly => "front",
            PairMix::All => "all",
        }
    }
}

impl FromStr for PairMix {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "front" => Ok(PairMix::FrontOnly),
            "all" => Ok(PairMix::All),
            _ => Err(format!("expected `front` or `all`, found {s:?}")),
        }
    }
}

/// Every knob of data generation, training and benchmarking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub features: usize,
    pub encoder_seed: u64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub train_scenes: usize,
    pub train_seed: u64,
    pub views_per_scene: usize,
    pub centers_per_pair: usize,
    pub oracle_angles: usize,
    pub side_exclusion_deg: f64,
    pub pair_mix: PairMix,
    pub train: TrainConfig,
    pub decoder_scenes: usize,
    pub decoder_steps: usize,
    pub decoder_rays: usize,
    pub bench_scenes: usize,
    pub bench_seed: u64,
    pub policies: Vec<PolicyKind>,
    pub policy: PolicyConfig,
    pub aligned_scenes: usize,
    pub aligned_seed: u64,
    pub support_height: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            features: 32,
            encoder_seed: 7,
            objects_min: 4,
            objects_max: 6,
            train_scenes: 50,
            train_seed: 0,
            views_per_scene: 12,
            centers_per_pair: 240,
            oracle_angles: 16,
            side_exclusion_deg: 20.0,
            pair_mix: PairMix::All,
            train: TrainConfig::default(),
            decoder_scenes: 4,
            decoder_steps: 20,
            decoder_rays: 128,
            bench_scenes: 100,
            bench_seed: 1000,
            policies: PolicyKind::ALL.to_vec(),
            policy: PolicyConfig::default(),
            aligned_scenes: 30,
            aligned_seed: 2000,
            support_height: 0.05,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Invalid {
        key: key.to_string(),
        message: e.to_string(),
    })
}

/// `key = value` lines; `#` starts a comment. Later keys override earlier ones.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            });
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl BenchConfig {
    pub const KEYS: [&'static str; 41] = [
        "features",
        "encoder_seed",
        "objects_min",
        "objects_max",
        "train_scenes",
        "train_seed",
        "views_per_scene",
        "centers_per_pair",
        "oracle_angles",
        "side_exclusion_deg",
        "pair_mix",
        "epochs",
        "learning_rate",
        "batch_size",
        "validation_fraction",
        "hidden",
        "blocks",
        "max_width",
        "keep_best",
        "decoder_scenes",
        "decoder_steps",
        "decoder_rays",
        "bench_scenes",
        "bench_seed",
        "policies",
        "q_max",
        "t_max",
        "q_exec",
        "candidates",
        "radius",
        "cap_deg",
        "revisit_deg",
        "per_axis",
        "aligned_scenes",
        "aligned_seed",
        "support_height",
        // reserved for reproducibility headers
        "seed",
        "jobs",
        "version",
        "command",
        "args",
    ];

    fn values(&self) -> Vec<(&'static str, String)> {
        let p = &self.policy;
        let t = &self.train;
        let policies: Vec<&str> = self.policies.iter().map(|k| k.name()).collect();
        vec![
            ("features", self.features.to_string()),
            ("encoder_seed", self.encoder_seed.to_string()),
            ("objects_min", self.objects_min.to_string()),
            ("objects_max", self.objects_max.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("train_seed", self.train_seed.to_string()),
            ("views_per_scene", self.views_per_scene.to_string()),
            ("centers_per_pair", self.centers_per_pair.to_string()),
            ("oracle_angles", self.oracle_angles.to_string()),
            ("side_exclusion_deg", self.side_exclusion_deg.to_string()),
            ("pair_mix", self.pair_mix.name().to_string()),
            ("epochs", t.epochs.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("validation_fraction", t.validation_fraction.to_string()),
            ("hidden", t.hidden.to_string()),
            ("blocks", t.blocks.to_string()),
            ("max_width", t.max_width.to_string()),
            ("keep_best", t.keep_best.to_string()),
            ("decoder_scenes", self.decoder_scenes.to_string()),
            ("decoder_steps", self.decoder_steps.to_string()),
            ("decoder_rays", self.decoder_rays.to_string()),
            ("bench_scenes", self.bench_scenes.to_string()),
            ("bench_seed", self.bench_seed.to_string()),
            ("policies", policies.join(",")),
            ("q_max", p.q_max.to_string()),
            ("t_max", p.t_max.to_string()),
            ("q_exec", p.q_exec.to_string()),
            ("candidates", p.candidates.to_string()),
            ("radius", p.radius.to_string()),
            ("cap_deg", p.cap_deg.to_string()),
            ("revisit_deg", p.revisit_deg.to_string()),
            ("per_axis", p.per_axis.to_string()),
            ("aligned_scenes", self.aligned_scenes.to_string()),
            ("aligned_seed", self.aligned_seed.to_string()),
            ("support_height", self.support_height.to_string()),
        ]
    }

    /// Complete `key = value` listing, readable by [`BenchConfig::from_key_values`].
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.values() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "features" => self.features = parse(key, v)?,
            "encoder_seed" => self.encoder_seed = parse(key, v)?,
            "objects_min" => self.objects_min = parse(key, v)?,
            "objects_max" => self.objects_max = parse(key, v)?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "train_seed" => self.train_seed = parse(key, v)?,
            "views_per_scene" => self.views_per_scene = parse(key, v)?,
            "centers_per_pair" => self.centers_per_pair = parse(key, v)?,
            "oracle_angles" => self.oracle_angles = parse(key, v)?,
            "side_exclusion_deg" => self.side_exclusion_deg = parse(key, v)?,
            "pair_mix" => self.pair_mix = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "validation_fraction" => self.train.validation_fraction = parse(key, v)?,
            "hidden" => self.train.hidden = parse(key, v)?,
            "blocks" => self.train.blocks = parse(key, v)?,
            "max_width" => self.train.max_width = parse(key, v)?,
            "keep_best" => self.train.keep_best = parse(key, v)?,
            "decoder_scenes" => self.decoder_scenes = parse(key, v)?,
            "decoder_steps" => self.decoder_steps = parse(key, v)?,
            "decoder_rays" => self.decoder_rays = parse(key, v)?,
            "bench_scenes" => self.bench_scenes = parse(key, v)?,
            "bench_seed" => self.bench_seed = parse(key, v)?,
            "policies" => {
                self.policies = v
                    .split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(|s| parse::<PolicyKind>(key, s))
                    .collect::<Result<_, _>>()?
            }
            "q_max" => self.policy.q_max = parse(key, v)?,
            "t_max" => self.policy.t_max = parse(key, v)?,
            "q_exec" => self.policy.q_exec = parse(key, v)?,
            "candidates" => self.policy.candidates = parse(key, v)?,
            "radius" => self.policy.radius = parse(key, v)?,
            "cap_deg" => self.policy.cap_deg = parse(key, v)?,
            "revisit_deg" => self.policy.revisit_deg = parse(key, v)?,
            "per_axis" => self.policy.per_axis = parse(key, v)?,
            "aligned_scenes" => self.aligned_scenes = parse(key, v)?,
            "aligned_seed" => self.aligned_seed = parse(key, v)?,
            "support_height" => self.support_height = parse(key, v)?,
            "seed" | "jobs" | "version" | "command" | "args" => {}
            _ => return Err(ConfigError::Unknown(vec![key.to_string()])),
        }
        Ok(())
    }

    /// Reads a complete config: unknown keys and missing keys are both errors.
    pub fn from_key_values(text: &str) -> Result<Self, ConfigError> {
        let map = parse_key_values(text)?;
        let unknown: Vec<String> = map.keys().filter(|k| !Self::KEYS.contains(&k.as_str())).cloned().collect();
        if !unknown.is_empty() {
            return Err(ConfigError::Unknown(unknown));
        }
        let mut cfg = Self::default();
        let missing: Vec<String> = cfg
            .values()
            .into_iter()
            .map(|(k, _)| k)
            .filter(|k| !map.contains_key(*k))
            .map(str::to_string)
            .collect();
        if !missing.is_empty() {
            return Err(ConfigError::Missing(missing));
        }
        for (k, v) in &map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| {
            Err(ConfigError::Invalid {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.features == 0 {
            return bad("features", "must be positive");
        }
        if !(3..=8).contains(&self.objects_min) || self.objects_max < self.objects_min || self.objects_max > 8 {
            return bad("objects_min", "object counts must satisfy 3 <= min <= max <= 8");
        }
        if self.views_per_scene < 2 {
            return bad("views_per_scene", "need at least 2 views");
        }
        if self.bench_scenes == 0 {
            return bad("bench_scenes", "need at least one scene");
        }
        if self.policies.is_empty() {
            return bad("policies", "need at least one policy");
        }
        self.policy.validate().map_err(|e| ConfigError::Invalid {
            key: "policy".into(),
            message: e.to_string(),
        })
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::default()
    }

    pub fn encoder(&self) -> EncoderWeights {
        EncoderWeights::seeded(self.features, self.encoder_seed)
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train_scenes as u64).map(|i| self.train_seed + i).collect()
    }

    pub fn bench_seeds(&self) -> Vec<u64> {
        (0..self.bench_scenes as u64).map(|i| self.bench_seed + i).collect()
    }

    pub fn aligned_seeds(&self) -> Vec<u64> {
        (0..self.aligned_scenes as u64).map(|i| self.aligned_seed + i).collect()
    }

    fn packed(&self) -> PackedConfig {
        PackedConfig {
            support_height: self.support_height,
            ..PackedConfig::default()
        }
    }

    /// Packed scene for `seed` with an object count drawn from the configured range.
    pub fn scene(&self, seed: u64) -> Result<Scene, crate::scene::SceneError> {
        let mut rng = stream(seed, 0);
        let count = rng.random_range(self.objects_min..=self.objects_max);
        generate_packed_scene(seed, count, &self.packed())
    }
}

/// Independent RNG stream per (seed, purpose).
fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

/// The cameras shared by all modules of a run.
#[derive(Clone, Copy, Debug)]
pub struct Rig {
    pub workspace: Workspace,
    pub intrinsics: Intrinsics,
    pub trace: TraceConfig,
    pub tsdf: TsdfConfig,
    pub gripper: GripperConfig,
}

impl Default for Rig {
    fn default() -> Self {
        Self {
            workspace: Workspace::default(),
            intrinsics: Intrinsics::default(),
            trace: TraceConfig::default(),
            tsdf: TsdfConfig::default(),
            gripper: GripperConfig::default(),
        }
    }
}

impl Rig {
    pub fn environment<'a>(&self, scene: &'a Scene, encoder: &'a EncoderWeights) -> Environment<'a> {
        Environment {
            scene,
            encoder,
            workspace: self.workspace,
            intrinsics: self.intrinsics,
            trace: self.trace,
            tsdf: self.tsdf,
            gripper: self.gripper,
        }
    }

    /// Planes from fusing the given cameras.
    pub fn observe(&self, scene: &Scene, cameras: &[Camera], encoder: &EncoderWeights) -> (TsdfVolume, TriPlaneVolume) {
        let mut vol = TsdfVolume::new(self.workspace, self.tsdf);
        for c in cameras {
            vol.integrate(&render_depth(scene, c, &self.trace));
        }
        let planes = encode(&vol, encoder).expect("encoder matches its own feature width");
        (vol, planes)
    }
}

/// Seeded starting camera: random azimuth, 45° to 70° from vertical, looking
/// at the workspace center from the configured radius.
pub fn initial_camera(seed: u64, cfg: &BenchConfig, rig: &Rig) -> Camera {
    let mut rng = stream(seed, 1);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let polar = rng.random_range(45f64..70.0).to_radians();
    let c = rig.workspace.center();
    let eye = c + Vec3::new(polar.sin() * phi.cos(), polar.sin() * phi.sin(), polar.cos()) * cfg.policy.radius;
    Camera::looking_at(rig.intrinsics, eye, c)
}

/// Benchmark scene with its starting camera; the target is the object least
/// visible from that camera. The flag marks a fully hidden target.
pub fn episode_setup(seed: u64, cfg: &BenchConfig, rig: &Rig) -> Result<(Scene, Camera, bool), crate::scene::SceneError> {
    let mut scene = cfg.scene(seed)?;
    let camera = initial_camera(seed, cfg, rig);
    let sel = select_target(&scene, &camera, &rig.trace);
    scene.set_target(sel.index)?;
    Ok((scene, camera, sel.target_hidden()))
}

/// Grasp view of a camera: unit direction from its eye to the target bbox center.
pub fn view_toward(camera: &Camera, bbox: &Aabb) -> Vec3 {
    (bbox.center() - camera.origin()).normalize()
}

/// `n` cap cameras around the workspace center for ground-truth depth.
pub fn scene_views(n: usize, cfg: &BenchConfig, rig: &Rig) -> Vec<Camera> {
    let pcfg = PolicyConfig {
        candidates: n,
        ..cfg.policy
    };
    generate_candidates(&rig.workspace.aabb(), &pcfg, &rig.workspace, cfg.support_height, rig.intrinsics)
        .map(|c| c.into_iter().map(|v| v.camera).collect())
        .unwrap_or_default()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub scenes_used: Vec<u64>,
    pub scenes_skipped: Vec<u64>,
    pub raw_records: usize,
    pub raw_positive: usize,
    pub kept: usize,
}

fn random_point(rng: &mut ChaCha8Rng, bbox: &Aabb) -> Vec3 {
    Vec3::new(
        rng.random_range(bbox.min.x..=bbox.max.x),
        rng.random_range(bbox.min.y..=bbox.max.y),
        rng.random_range(bbox.min.z..=bbox.max.z),
    )
}

/// Records of one training scene, unbalanced. Empty if scene generation fails.
pub fn scene_records(seed: u64, cfg: &BenchConfig, rig: &Rig, encoder: &EncoderWeights) -> Vec<DatasetRecord> {
    let Ok(base) = cfg.scene(seed) else {
        log::warn!("training scene {seed}: generation failed");
        return Vec::new();
    };
    let views = scene_views(cfg.views_per_scene, cfg, rig);
    let mut rng = stream(seed, 2);
    let kinds: Vec<PairKind> = match cfg.pair_mix {
        PairMix::FrontOnly => vec![PairKind::FrontObserveFrontGrasp; 4],
        PairMix::All => vec![
            PairKind::FrontObserveFrontGrasp,
            PairKind::FrontObserveSideGrasp,
            PairKind::MultiObserveFrontGrasp,
            PairKind::MultiObserveFrontGrasp,
        ],
    };
    let mut out = Vec::new();
    for kind in kinds {
        let observed: Vec<Camera> = match kind {
            PairKind::MultiObserveFrontGrasp => {
                let k = rng.random_range(2..=4.min(views.len()));
                views.choose_multiple(&mut rng, k).copied().collect()
            }
            _ => vec![*views.choose(&mut rng).expect("views")],
        };
        let mut scene = base.clone();
        let sel = select_target(&scene, &observed[0], &rig.trace);
        scene.set_target(sel.index).expect("index from the same scene");
        let bbox = scene.target_bbox;
        let grasp_view = match kind {
            PairKind::FrontObserveSideGrasp => {
                let front = view_toward(&observed[0], &bbox);
                let cands = generate_candidates(&bbox, &cfg.policy, &rig.workspace, cfg.support_height, rig.intrinsics)
                    .unwrap_or_default();
                let side: Vec<Vec3> = cands
                    .iter()
                    .map(|c| c.view)
                    .filter(|v| angle_between(v, &front) > cfg.side_exclusion_deg.to_radians())
                    .collect();
                match side.choose(&mut rng) {
                    Some(v) => *v,
                    None => continue,
                }
            }
            _ => view_toward(observed.choose(&mut rng).expect("non-empty"), &bbox),
        };
        let (_, planes) = rig.observe(&scene, &observed, encoder);
        for _ in 0..cfg.centers_per_pair {
            let center = rig.workspace.aabb().clamp_point(&random_point(&mut rng, &bbox));
            let g = oracle_predict(&scene, &center, &grasp_view, &rig.gripper, cfg.oracle_angles);
            let Ok(features) = grasp_features(&planes, &center, &grasp_view) else {
                continue;
            };
            let label = GraspLabel {
                center,
                view: grasp_view,
                rotation: g.rotation,
                width: g.width,
                success: g.quality > 0.5,
            };
            out.push(DatasetRecord::new(kind, &features, label));
        }
    }
    out
}

/// Labeled grasp records over the training scenes, balanced to equal class
/// counts by seeded subsampling of the majority class. Scenes without any
/// successful label are skipped.
pub fn generate_dataset(cfg: &BenchConfig, rig: &Rig, encoder: &EncoderWeights) -> (Dataset, DatasetReport) {
    let seeds = cfg.train_seeds();
    let per_scene: Vec<Vec<DatasetRecord>> = seeds.par_iter().map(|s| scene_records(*s, cfg, rig, encoder)).collect();
    let mut report = DatasetReport::default();
    let mut records = Vec::new();
    for (seed, recs) in seeds.iter().zip(per_scene) {
        report.raw_records += recs.len();
        let pos = recs.iter().filter(|r| r.label.success).count();
        report.raw_positive += pos;
        if pos == 0 {
            log::info!("training scene {seed}: no successful grasp labels, skipped");
            report.scenes_skipped.push(*seed);
            continue;
        }
        report.scenes_used.push(*seed);
        records.extend(recs);
    }
    let pos: Vec<usize> = (0..records.len()).filter(|i| records[*i].label.success).collect();
    let neg: Vec<usize> = (0..records.len()).filter(|i| !records[*i].label.success).collect();
    let keep_n = pos.len().min(neg.len());
    let mut rng = stream(cfg.train_seed, 3);
    let mut keep = vec![false; records.len()];
    for class in [pos, neg] {
        let mut idx = class;
        idx.shuffle(&mut rng);
        for i in idx.into_iter().take(keep_n) {
            keep[i] = true;
        }
    }
    let records: Vec<DatasetRecord> = records.into_iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r).collect();
    report.kept = records.len();
    (
        Dataset {
            features: cfg.features,
            records,
        },
        report,
    )
}

/// Supervision for the depth decoder: planes from all views of a training
/// scene and rays from each ground-truth depth image.
pub fn decoder_training_set(cfg: &BenchConfig, rig: &Rig, encoder: &EncoderWeights) -> Vec<(TriPlaneVolume, Vec<DepthRay>)> {
    let views = scene_views(cfg.views_per_scene, cfg, rig);
    cfg.train_seeds()
        .into_iter()
        .take(cfg.decoder_scenes)
        .filter_map(|seed| cfg.scene(seed).ok())
        .map(|scene| {
            let (_, planes) = rig.observe(&scene, &views, encoder);
            let rays = views
                .iter()
                .flat_map(|c| depth_rays(&render_depth(&scene, c, &rig.trace), &rig.workspace))
                .collect();
            (planes, rays)
        })
        .collect()
}

pub fn decoder_render_config(cfg: &BenchConfig) -> RenderConfig {
    RenderConfig {
        rays_per_batch: cfg.decoder_rays,
        ..RenderConfig::default()
    }
}

/// Where an episode's affordance predictions come from.
#[derive(Clone, Copy)]
pub enum ModelSource<'a> {
    Head(&'a AffordanceHead),
    /// Ground-truth affordances with the given rotation sweep.
    Oracle { angles: usize },
    Constant { quality: f64 },
}

impl ModelSource<'_> {
    fn with<R>(&self, scene: &Scene, gripper: GripperConfig, f: impl FnOnce(&dyn AffordanceModel) -> R) -> R {
        match *self {
            ModelSource::Head(h) => f(h),
            ModelSource::Oracle { angles } => f(&OracleModel { scene, gripper, angles }),
            ModelSource::Constant { quality } => f(&ConstantModel { quality, width: 0.04 }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResults {
    pub episodes: Vec<Episode>,
    /// Re-runs with `t_max = 2` of the closed-loop policies.
    pub two_view: Vec<Episode>,
    pub summary: Vec<(PolicyKind, Metrics)>,
}

fn closed_loop(kind: PolicyKind) -> bool {
    matches!(kind, PolicyKind::AceNbv | PolicyKind::GeometryGain)
}

fn setup_failure(seed: u64, kind: PolicyKind, why: String) -> Episode {
    Episode {
        scene_id: seed,
        policy: kind,
        target_hidden: false,
        steps: Vec::new(),
        outcome: crate::policy::Outcome::Abort,
        executed: None,
        failure: None,
        views: 0,
        diagnostic: Some(why),
    }
}

/// Runs every configured policy on every benchmark scene. Scenes run in
/// parallel; results are ordered by policy, then scene.
pub fn run_benchmark(cfg: &BenchConfig, rig: &Rig, encoder: &EncoderWeights, source: ModelSource) -> BenchResults {
    let seeds = cfg.bench_seeds();
    let two = PolicyConfig { t_max: 2, ..cfg.policy };
    let per_scene: Vec<(Vec<Episode>, Vec<Episode>)> = seeds
        .par_iter()
        .map(|&seed| {
            let (scene, init, hidden) = match episode_setup(seed, cfg, rig) {
                Ok(s) => s,
                Err(e) => {
                    let eps = cfg.policies.iter().map(|k| setup_failure(seed, *k, e.to_string())).collect();
                    let twos = cfg
                        .policies
                        .iter()
                        .filter(|k| closed_loop(**k))
                        .map(|k| setup_failure(seed, *k, e.to_string()))
                        .collect();
                    return (eps, twos);
                }
            };
            let env = rig.environment(&scene, encoder);
            source.with(&scene, rig.gripper, |model| {
                let eps = cfg
                    .policies
                    .iter()
                    .map(|k| run_episode(*k, &env, model, &init, &cfg.policy, seed, hidden))
                    .collect();
                let twos = cfg
                    .policies
                    .iter()
                    .filter(|k| closed_loop(**k))
                    .map(|k| run_episode(*k, &env, model, &init, &two, seed, hidden))
                    .collect();
                (eps, twos)
            })
        })
        .collect();
    let mut episodes = Vec::new();
    let mut two_view = Vec::new();
    let mut summary = Vec::new();
    for kind in &cfg.policies {
        let eps: Vec<Episode> = per_scene.iter().flat_map(|(e, _)| e.iter().filter(|x| x.policy == *kind).cloned()).collect();
        let twos: Vec<Episode> = per_scene.iter().flat_map(|(_, t)| t.iter().filter(|x| x.policy == *kind).cloned()).collect();
        let m = compute_metrics(&eps, closed_loop(*kind).then_some(twos.as_slice())).expect("at least one scene");
        summary.push((*kind, m));
        episodes.extend(eps);
        two_view.extend(twos);
    }
    BenchResults {
        episodes,
        two_view,
        summary,
    }
}

impl BenchResults {
    pub fn metrics(&self, kind: PolicyKind) -> Option<&Metrics> {
        self.summary.iter().find(|(k, _)| *k == kind).map(|(_, m)| m)
    }

    pub fn episodes_csv(&self) -> String {
        let mut out = String::from("policy,scene_seed,outcome,views,quality,failure,target_hidden\n");
        for e in &self.episodes {
            let q = e.executed.map_or(String::new(), |g| format!("{:.6}", g.quality));
            let f = e.failure.map_or(String::new(), |f| format!("{f:?}"));
            let outcome = serde_json::to_value(e.outcome).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{},{},{}", e.policy, e.scene_id, outcome, e.views, q, f, e.target_hidden);
        }
        out
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("policy,episodes,sr,fr,ar,mean_views,two_view_sr\n");
        for (k, m) in &self.summary {
            let two = m.two_view_sr.map_or("NA".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(out, "{},{},{:.4},{:.4},{:.4},{:.2},{}", k, m.episodes, m.sr, m.fr, m.ar, m.mean_views, two);
        }
        out
    }

    /// Aligned plain-text table with SR / FR / AR / #Views / 2-Views SR columns.
    pub fn table(&self) -> String {
        let pct = |v: f64| format!("{:.0}%", v * 100.0);
        let mut out = format!("{:<15} {:>6} {:>6} {:>6} {:>7} {:>11}\n", "Method", "SR", "FR", "AR", "#Views", "2-Views SR");
        for (k, m) in &self.summary {
            let two = m.two_view_sr.map_or("N/A".to_string(), pct);
            let _ = writeln!(
                out,
                "{:<15} {:>6} {:>6} {:>6} {:>7.2} {:>11}",
                k.name(),
                pct(m.sr),
                pct(m.fr),
                pct(m.ar),
                m.mean_views,
                two
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedScene {
    pub seed: u64,
    pub aligned_error: f64,
    pub misaligned_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedReport {
    pub scenes: Vec<AlignedScene>,
    pub aligned_lower: usize,
    pub ties: usize,
}

impl AlignedReport {
    /// Share of scenes where the aligned error is strictly lower.
    pub fn fraction_aligned_lower(&self) -> f64 {
        self.aligned_lower as f64 / self.scenes.len().max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("seed,aligned_error,misaligned_error\n");
        for s in &self.scenes {
            let _ = writeln!(out, "{},{:.6},{:.6}", s.seed, s.aligned_error, s.misaligned_error);
        }
        let frac = if self.ties == self.scenes.len() {
            "tie".to_string()
        } else {
            format!("{:.3}", self.fraction_aligned_lower())
        };
        let _ = writeln!(
            out,
            "# aligned lower in {} of {} scenes ({frac}), ties {}",
            self.aligned_lower,
            self.scenes.len(),
            self.ties
        );
        out
    }
}

/// Polar angle of the observation views in the aligned-view experiment.
pub const ALIGNED_POLAR_DEG: f64 = 60.0;

/// Observation azimuths per scene in the aligned-view experiment, evenly spaced.
pub const ALIGNED_AZIMUTHS: usize = 12;

/// Azimuth offset that puts two views at the same polar angle 90° apart:
/// `cos Δφ = -cos²θ / sin²θ`.
pub fn orthogonal_azimuth_offset(polar: f64) -> f64 {
    let c = polar.cos().powi(2) / polar.sin().powi(2);
    (-c).clamp(-1.0, 1.0).acos()
}

/// Mean |predicted − oracle quality| over the target-bbox lattice with the
/// observation fixed and the grasp view either equal to it or 90° away.
pub fn aligned_view_experiment(cfg: &BenchConfig, rig: &Rig, encoder: &EncoderWeights, source: ModelSource) -> AlignedReport {
    let polar = ALIGNED_POLAR_DEG.to_radians();
    let offset = orthogonal_azimuth_offset(polar);
    let scenes: Vec<AlignedScene> = cfg
        .aligned_seeds()
        .par_iter()
        .filter_map(|&seed| {
            let (scene, _, _) = episode_setup(seed, cfg, rig).ok()?;
            let bbox = scene.target_bbox;
            let c = bbox.center();
            let mut rng = stream(seed, 4);
            let base = rng.random_range(0.0..std::f64::consts::TAU);
            let eye_at = |phi: f64| c + Vec3::new(polar.sin() * phi.cos(), polar.sin() * phi.sin(), polar.cos()) * cfg.policy.radius;
            let centers = bbox.lattice(cfg.policy.per_axis);
            let (mut aligned, mut misaligned) = (0.0, 0.0);
            let azimuths = ALIGNED_AZIMUTHS;
            for k in 0..azimuths {
                let phi = base + k as f64 * std::f64::consts::TAU / azimuths as f64;
                let cam = Camera::looking_at(rig.intrinsics, eye_at(phi), c);
                let (_, planes) = rig.observe(&scene, &[cam], encoder);
                let front = (c - eye_at(phi)).normalize();
                let side = (c - eye_at(phi + offset)).normalize();
                let err = |view: &Vec3| -> f64 {
                    source.with(&scene, rig.gripper, |model| {
                        centers
                            .iter()
                            .map(|p| {
                                let p = rig.workspace.aabb().clamp_point(p);
                                let truth = oracle_predict(&scene, &p, view, &rig.gripper, cfg.oracle_angles).quality;
                                let pred = model.predict(&planes, &p, view).map_or(f64::NAN, |g| g.quality);
                                (pred - truth).abs()
                            })
                            .sum::<f64>()
                            / centers.len() as f64
                    })
                };
                aligned += err(&front) / azimuths as f64;
                misaligned += err(&side) / azimuths as f64;
            }
            Some(AlignedScene {
                seed,
                aligned_error: aligned,
                misaligned_error: misaligned,
            })
        })
        .collect();
    let aligned_lower = scenes.iter().filter(|s| s.aligned_error < s.misaligned_error).count();
    let ties = scenes.iter().filter(|s| s.aligned_error == s.misaligned_error).count();
    AlignedReport {
        scenes,
        aligned_lower,
        ties,
    }
}

/// Adapts the configured head hyper-parameters for training.
pub fn train_config(cfg: &BenchConfig) -> TrainConfig {
    TrainConfig {
        seed: cfg.train_seed,
        ..cfg.train
    }
}
