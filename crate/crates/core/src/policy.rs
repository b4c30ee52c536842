//! Next-best-view planning: candidate views on a spherical cap, imagined-quality
//! scoring, the closed observe/plan loop and the baseline policies.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affordance::{imagine_affordances, AffordanceError, AffordanceModel};
use crate::geometry::{angle_between, Aabb, Vec3, Workspace};
use crate::grasp::Grasp;
use crate::scene::{grasp_feasible, render_depth, Camera, FailureReason, GraspVerdict, GripperConfig, Intrinsics, Scene, TraceConfig};
use crate::triplane::{encode, EncoderWeights, TriPlaneVolume};
use crate::tsdf::{TsdfConfig, TsdfVolume};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy configuration: {0}")]
    Config(String),
    #[error("every candidate view was culled")]
    NoCandidates,
    #[error("unknown policy {0:?}")]
    UnknownPolicy(String),
    #[error("metrics need at least one episode")]
    NoEpisodes,
    #[error(transparent)]
    Affordance(#[from] AffordanceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Execute as soon as the current view's best imagined quality exceeds this.
    pub q_max: f64,
    pub t_max: usize,
    pub candidates: usize,
    /// View-sphere radius (meters) around the target bbox center.
    pub radius: f64,
    /// Largest polar angle of the candidate cap, degrees from vertical.
    pub cap_deg: f64,
    /// At exhaustion, the best grasp seen is executed if its quality reaches this.
    pub q_exec: f64,
    /// Candidates within this angle of a visited view are skipped.
    pub revisit_deg: f64,
    /// Imagined grasp centers per bbox axis.
    pub per_axis: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            q_max: 0.95,
            t_max: 8,
            candidates: 16,
            radius: 0.5,
            cap_deg: 75.0,
            q_exec: 0.5,
            revisit_deg: 10.0,
            per_axis: 4,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.q_exec > 0.0) || !(0.0..=1.0).contains(&self.q_max) {
            return Err(PolicyError::Config(format!(
                "need q_exec > 0 and q_max in [0, 1], got q_exec {} and q_max {}",
                self.q_exec, self.q_max
            )));
        }
        if self.t_max == 0 || self.candidates == 0 || self.per_axis == 0 {
            return Err(PolicyError::Config("t_max, candidates and per_axis must be at least 1".into()));
        }
        if !(self.radius > 0.0) || !(0.0..=90.0).contains(&self.cap_deg) {
            return Err(PolicyError::Config("radius must be positive and the cap within [0, 90] degrees".into()));
        }
        Ok(())
    }
}

/// A camera looking at the target bbox center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewCandidate {
    pub index: usize,
    pub camera: Camera,
    /// Unit direction from the camera toward the bbox center.
    pub view: Vec3,
    /// Always true: arm reachability is not modeled.
    pub reachable: bool,
}

/// Fibonacci spiral over the cap of polar angle `cap_deg` above the bbox
/// center. Candidates whose eye lies at or below the support plane, or inside
/// the workspace, are culled. A zero cap yields the single top-down view.
pub fn generate_candidates(
    bbox: &Aabb,
    cfg: &PolicyConfig,
    workspace: &Workspace,
    support_height: f64,
    intrinsics: Intrinsics,
) -> Result<Vec<ViewCandidate>, PolicyError> {
    let center = bbox.center();
    let cap = cfg.cap_deg.to_radians();
    let n = if cap <= 0.0 { 1 } else { cfg.candidates };
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let ws = workspace.aabb();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let cos_theta = 1.0 - (1.0 - cap.cos()) * (i as f64 + 0.5) / n as f64;
        let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
        let phi = golden * i as f64;
        let dir = if cap <= 0.0 {
            Vec3::z()
        } else {
            Vec3::new(sin_theta * phi.cos(), sin_theta * phi.sin(), cos_theta)
        };
        let eye = center + dir * cfg.radius;
        if eye.z <= support_height || ws.contains(&eye) {
            continue;
        }
        out.push(ViewCandidate {
            index: out.len(),
            camera: Camera::looking_at(intrinsics, eye, center),
            view: -dir,
            reachable: true,
        });
    }
    if out.is_empty() {
        return Err(PolicyError::NoCandidates);
    }
    Ok(out)
}

/// Smallest pairwise angle between candidate view directions.
pub fn min_separation(candidates: &[ViewCandidate]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in candidates.iter().enumerate() {
        for b in &candidates[i + 1..] {
            best = best.min(angle_between(&a.view, &b.view));
        }
    }
    best
}

/// Best imagined quality from `view` and the grasp that achieves it.
pub fn evaluate_candidate(
    model: &dyn AffordanceModel,
    planes: &TriPlaneVolume,
    bbox: &Aabb,
    view: &Vec3,
    per_axis: usize,
) -> Result<(f64, Grasp, Vec<Grasp>), PolicyError> {
    let grasps = imagine_affordances(model, planes, bbox, view, per_axis)?;
    let best = grasps[0];
    Ok((best.quality, best, grasps))
}

/// Index of the highest score; ties go to the smallest angle from
/// `current`, then the lowest index.
pub fn select_view(scores: &[f64], views: &[Vec3], current: &Vec3) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..scores.len() {
        if scores[i].is_nan() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) if scores[i] > scores[b] => Some(i),
            Some(b) if scores[i] == scores[b] && angle_between(&views[i], current) < angle_between(&views[b], current) => Some(i),
            keep => keep,
        };
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    AceNbv,
    InitialView,
    TopView,
    FixedTraj,
    GeometryGain,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::InitialView,
        PolicyKind::TopView,
        PolicyKind::FixedTraj,
        PolicyKind::GeometryGain,
        PolicyKind::AceNbv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::AceNbv => "ace-nbv",
            PolicyKind::InitialView => "initial-view",
            PolicyKind::TopView => "top-view",
            PolicyKind::FixedTraj => "fixed-traj",
            PolicyKind::GeometryGain => "geometry-gain",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PolicyError::UnknownPolicy(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    Abort,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub camera: Camera,
    /// Grasp view of this observation (camera toward bbox center).
    pub view: Vec3,
    /// Best imagined quality from the current view.
    pub current_quality: f64,
    /// Imagined grasps from the current view, best first.
    pub grasps: Vec<Grasp>,
    /// Candidate scores (best quality, or unobserved-voxel count for geometry gain).
    pub candidate_scores: Vec<f64>,
    pub candidate_views: Vec<Vec3>,
    pub chosen: Option<usize>,
    /// Grasp-model evaluations so far in the episode.
    pub evaluations: usize,
    pub observed_voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub scene_id: u64,
    pub policy: PolicyKind,
    /// The target had no visible pixels in the initial view.
    pub target_hidden: bool,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    pub executed: Option<Grasp>,
    pub failure: Option<FailureReason>,
    pub views: usize,
    pub diagnostic: Option<String>,
}

/// Everything an episode needs besides the grasp model and the policy settings.
#[derive(Clone, Copy)]
pub struct Environment<'a> {
    pub scene: &'a Scene,
    pub encoder: &'a EncoderWeights,
    pub workspace: Workspace,
    pub intrinsics: Intrinsics,
    pub trace: TraceConfig,
    pub tsdf: TsdfConfig,
    pub gripper: GripperConfig,
}

impl Environment<'_> {
    fn observe(&self, volume: &mut TsdfVolume, camera: &Camera) -> Result<TriPlaneVolume, String> {
        let image = render_depth(self.scene, camera, &self.trace);
        volume.integrate(&image);
        encode(volume, self.encoder).map_err(|e| e.to_string())
    }

    fn grasp_view(&self, camera: &Camera) -> Vec3 {
        (self.scene.target_bbox.center() - camera.origin()).normalize()
    }

    pub fn top_camera(&self, radius: f64) -> Camera {
        let c = self.workspace.center();
        Camera::looking_at(self.intrinsics, c + Vec3::new(0.0, 0.0, radius), c)
    }

    /// Four cameras on a circle around the target bbox center, 30° below
    /// horizontal, starting at the azimuth of `from`.
    pub fn fixed_trajectory(&self, from: &Camera, radius: f64) -> Vec<Camera> {
        let c = self.scene.target_bbox.center();
        let d = from.origin() - c;
        let start = d.y.atan2(d.x);
        let elev = 30f64.to_radians();
        (0..4)
            .map(|k| {
                let phi = start + k as f64 * std::f64::consts::FRAC_PI_2;
                let eye = c + Vec3::new(elev.cos() * phi.cos(), elev.cos() * phi.sin(), elev.sin()) * radius;
                Camera::looking_at(self.intrinsics, eye, c)
            })
            .collect()
    }
}

/// Cells crossed by the segment `a → b`, in order (Amanatides–Woo traversal).
pub fn traverse_voxels(volume: &TsdfVolume, a: &Vec3, b: &Vec3) -> Vec<(usize, usize, usize)> {
    let n = volume.resolution() as i64;
    let vs = volume.voxel_size();
    let origin = volume.workspace.origin;
    let d = b - a;
    let Some((t0, t1)) = volume.workspace.aabb().line_interval(a, &d) else {
        return Vec::new();
    };
    let (t0, t1) = (t0.max(0.0), t1.min(1.0));
    if t0 > t1 {
        return Vec::new();
    }
    let start = a + d * t0;
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for k in 0..3 {
        let local = (start[k] - origin[k]) / vs;
        cell[k] = (local.floor() as i64).clamp(0, n - 1);
        if d[k] > 0.0 {
            step[k] = 1;
            t_delta[k] = vs / d[k];
            t_next[k] = t0 + ((cell[k] + 1) as f64 * vs + origin[k] - start[k]) / d[k];
        } else if d[k] < 0.0 {
            step[k] = -1;
            t_delta[k] = -vs / d[k];
            t_next[k] = t0 + (cell[k] as f64 * vs + origin[k] - start[k]) / d[k];
        }
    }
    let mut out = Vec::new();
    loop {
        out.push((cell[0] as usize, cell[1] as usize, cell[2] as usize));
        let k = (0..3).min_by(|&i, &j| t_next[i].total_cmp(&t_next[j])).unwrap();
        if t_next[k] > t1 {
            break;
        }
        cell[k] += step[k];
        if cell[k] < 0 || cell[k] >= n {
            break;
        }
        t_next[k] += t_delta[k];
    }
    out
}

fn blocks(volume: &TsdfVolume, idx: usize) -> bool {
    volume.weight[idx] > 0.0 && volume.distance[idx] < 0.0
}

/// Whether an observed-occupied voxel lies between `eye` and voxel `target`.
pub fn voxel_visible(volume: &TsdfVolume, eye: &Vec3, target: (usize, usize, usize)) -> bool {
    let center = volume.voxel_center(target.0, target.1, target.2);
    for c in traverse_voxels(volume, eye, &center) {
        if c == target {
            return true;
        }
        if blocks(volume, volume.index(c.0, c.1, c.2)) {
            return false;
        }
    }
    true
}

/// Unobserved (weight 0) voxels inside `bbox` visible from `eye`.
pub fn visible_unobserved(volume: &TsdfVolume, bbox: &Aabb, eye: &Vec3) -> usize {
    volume
        .voxels_in(bbox)
        .into_iter()
        .filter(|&i| volume.weight[i] == 0.0 && voxel_visible(volume, eye, volume.coords(i)))
        .count()
}

fn finish(env: &Environment, mut ep: Episode, grasp: Option<Grasp>) -> Episode {
    match grasp {
        Some(g) => {
            ep.executed = Some(g);
            match grasp_feasible(env.scene, &g, &env.gripper) {
                GraspVerdict::Success { .. } => ep.outcome = Outcome::Success,
                GraspVerdict::Failure(r) => {
                    ep.outcome = Outcome::Failure;
                    ep.failure = Some(r);
                }
            }
        }
        None => ep.outcome = Outcome::Abort,
    }
    ep
}

fn abort(mut ep: Episode, why: String) -> Episode {
    log::warn!("scene {} {}: {why}", ep.scene_id, ep.policy);
    ep.outcome = Outcome::Abort;
    ep.executed = None;
    ep.diagnostic = Some(why);
    ep
}

/// Runs one episode of `kind` from `initial`. `target_hidden` is recorded as given.
pub fn run_episode(
    kind: PolicyKind,
    env: &Environment,
    model: &dyn AffordanceModel,
    initial: &Camera,
    cfg: &PolicyConfig,
    scene_id: u64,
    target_hidden: bool,
) -> Episode {
    let ep = Episode {
        scene_id,
        policy: kind,
        target_hidden,
        steps: Vec::new(),
        outcome: Outcome::Abort,
        executed: None,
        failure: None,
        views: 0,
        diagnostic: None,
    };
    if let Err(e) = cfg.validate() {
        return abort(ep, e.to_string());
    }
    match kind {
        PolicyKind::AceNbv | PolicyKind::GeometryGain => closed_loop(kind, env, model, initial, cfg, ep),
        PolicyKind::InitialView => {
            let single = PolicyConfig { t_max: 1, ..*cfg };
            closed_loop(kind, env, model, initial, &single, ep)
        }
        PolicyKind::TopView => {
            let single = PolicyConfig { t_max: 1, ..*cfg };
            closed_loop(kind, env, model, &env.top_camera(cfg.radius), &single, ep)
        }
        PolicyKind::FixedTraj => fixed_trajectory(env, model, initial, cfg, ep),
    }
}

/// The closed observe/plan loop of ACE-NBV.
pub fn run_policy(env: &Environment, model: &dyn AffordanceModel, initial: &Camera, cfg: &PolicyConfig, scene_id: u64, target_hidden: bool) -> Episode {
    run_episode(PolicyKind::AceNbv, env, model, initial, cfg, scene_id, target_hidden)
}

fn closed_loop(
    kind: PolicyKind,
    env: &Environment,
    model: &dyn AffordanceModel,
    initial: &Camera,
    cfg: &PolicyConfig,
    mut ep: Episode,
) -> Episode {
    let bbox = env.scene.target_bbox;
    let mut volume = TsdfVolume::new(env.workspace, env.tsdf);
    let mut camera = *initial;
    let mut visited: Vec<Vec3> = Vec::new();
    let mut best_seen: Option<Grasp> = None;
    let mut evaluations = 0usize;
    let lattice = cfg.per_axis.pow(3);
    for t in 1..=cfg.t_max {
        let planes = match env.observe(&mut volume, &camera) {
            Ok(p) => p,
            Err(e) => return abort(ep, format!("encoding failed at step {t}: {e}")),
        };
        ep.views = t;
        let view = env.grasp_view(&camera);
        visited.push(view);
        let (q, best, grasps) = match evaluate_candidate(model, &planes, &bbox, &view, cfg.per_axis) {
            Ok(r) => r,
            Err(e) => return abort(ep, format!("prediction failed at step {t}: {e}")),
        };
        evaluations += lattice;
        if best_seen.is_none_or(|b| q > b.quality) {
            best_seen = Some(best);
        }
        let mut record = StepRecord {
            step: t,
            camera,
            view,
            current_quality: q,
            grasps,
            candidate_scores: Vec::new(),
            candidate_views: Vec::new(),
            chosen: None,
            evaluations,
            observed_voxels: volume.observed_count(),
        };
        if q > cfg.q_max {
            ep.steps.push(record);
            return finish(env, ep, Some(best));
        }
        if t == cfg.t_max {
            ep.steps.push(record);
            break;
        }
        let candidates = match generate_candidates(&bbox, cfg, &env.workspace, env.scene.support_height, env.intrinsics) {
            Ok(c) => c,
            Err(e) => return abort(ep, e.to_string()),
        };
        let revisit = cfg.revisit_deg.to_radians();
        let fresh: Vec<ViewCandidate> = candidates
            .into_iter()
            .filter(|c| visited.iter().all(|v| angle_between(v, &c.view) > revisit))
            .collect();
        if fresh.is_empty() {
            log::info!("scene {}: no unvisited candidates left at step {t}", ep.scene_id);
            ep.steps.push(record);
            break;
        }
        let scores: Vec<f64> = match kind {
            PolicyKind::GeometryGain => fresh
                .par_iter()
                .map(|c| visible_unobserved(&volume, &bbox, &c.camera.origin()) as f64)
                .collect(),
            _ => {
                let r: Result<Vec<f64>, PolicyError> = fresh
                    .par_iter()
                    .map(|c| evaluate_candidate(model, &planes, &bbox, &c.view, cfg.per_axis).map(|r| r.0))
                    .collect();
                evaluations += lattice * fresh.len();
                match r {
                    Ok(s) => s,
                    Err(e) => return abort(ep, format!("candidate scoring failed at step {t}: {e}")),
                }
            }
        };
        let views: Vec<Vec3> = fresh.iter().map(|c| c.view).collect();
        let chosen = select_view(&scores, &views, &view).expect("non-empty candidate set");
        record.candidate_scores = scores;
        record.candidate_views = views;
        record.chosen = Some(chosen);
        record.evaluations = evaluations;
        ep.steps.push(record);
        camera = fresh[chosen].camera;
    }
    let grasp = best_seen.filter(|g| g.quality >= cfg.q_exec);
    finish(env, ep, grasp)
}

fn fixed_trajectory(env: &Environment, model: &dyn AffordanceModel, initial: &Camera, cfg: &PolicyConfig, mut ep: Episode) -> Episode {
    let bbox = env.scene.target_bbox;
    let mut volume = TsdfVolume::new(env.workspace, env.tsdf);
    let cameras = env.fixed_trajectory(initial, cfg.radius);
    let mut planes = None;
    for (k, cam) in cameras.iter().enumerate() {
        match env.observe(&mut volume, cam) {
            Ok(p) => planes = Some(p),
            Err(e) => return abort(ep, format!("encoding failed at view {}: {e}", k + 1)),
        }
        ep.views = k + 1;
    }
    let planes = planes.expect("four views");
    let mut best: Option<Grasp> = None;
    let mut evaluations = 0;
    for (k, cam) in cameras.iter().enumerate() {
        let view = env.grasp_view(cam);
        let (q, g, grasps) = match evaluate_candidate(model, &planes, &bbox, &view, cfg.per_axis) {
            Ok(r) => r,
            Err(e) => return abort(ep, format!("prediction failed: {e}")),
        };
        evaluations += cfg.per_axis.pow(3);
        if best.is_none_or(|b| q > b.quality) {
            best = Some(g);
        }
        ep.steps.push(StepRecord {
            step: k + 1,
            camera: *cam,
            view,
            current_quality: q,
            grasps,
            candidate_scores: Vec::new(),
            candidate_views: Vec::new(),
            chosen: None,
            evaluations,
            observed_voxels: volume.observed_count(),
        });
    }
    let grasp = best.filter(|g| g.quality > cfg.q_max || g.quality >= cfg.q_exec);
    finish(env, ep, grasp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub successes: usize,
    pub failures: usize,
    pub aborts: usize,
    pub sr: f64,
    pub fr: f64,
    pub ar: f64,
    pub mean_views: f64,
    /// Success rate of the same policy re-run with `t_max = 2`, if supplied.
    pub two_view_sr: Option<f64>,
}

fn success_rate(episodes: &[Episode]) -> f64 {
    episodes.iter().filter(|e| e.outcome == Outcome::Success).count() as f64 / episodes.len() as f64
}

/// Rates over `episodes`; `ar` is the complement so the three sum to 1.
pub fn compute_metrics(episodes: &[Episode], two_view: Option<&[Episode]>) -> Result<Metrics, PolicyError> {
    if episodes.is_empty() {
        return Err(PolicyError::NoEpisodes);
    }
    let count = |o: Outcome| episodes.iter().filter(|e| e.outcome == o).count();
    let (s, f, a) = (count(Outcome::Success), count(Outcome::Failure), count(Outcome::Abort));
    let n = episodes.len() as f64;
    let sr = s as f64 / n;
    let fr = f as f64 / n;
    Ok(Metrics {
        episodes: episodes.len(),
        successes: s,
        failures: f,
        aborts: a,
        sr,
        fr,
        ar: 1.0 - (sr + fr),
        mean_views: episodes.iter().map(|e| e.views as f64).sum::<f64>() / n,
        two_view_sr: two_view.filter(|e| !e.is_empty()).map(success_rate),
    })
}

/// One JSON object per step followed by a summary line.
pub fn episode_trace_jsonl(ep: &Episode) -> String {
    #[derive(Serialize)]
    struct Summary<'a> {
        record: &'static str,
        scene_id: u64,
        policy: PolicyKind,
        outcome: Outcome,
        views: usize,
        target_hidden: bool,
        executed: &'a Option<Grasp>,
        failure: &'a Option<FailureReason>,
        diagnostic: &'a Option<String>,
    }
    #[derive(Serialize)]
    struct Step<'a> {
        record: &'static str,
        #[serde(flatten)]
        step: &'a StepRecord,
    }
    let mut out = String::new();
    for s in &ep.steps {
        out.push_str(&serde_json::to_string(&Step { record: "step", step: s }).expect("serializable"));
        out.push('\n');
    }
    let summary = Summary {
        record: "outcome",
        scene_id: ep.scene_id,
        policy: ep.policy,
        outcome: ep.outcome,
        views: ep.views,
        target_hidden: ep.target_hidden,
        executed: &ep.executed,
        failure: &ep.failure,
        diagnostic: &ep.diagnostic,
    };
    out.push_str(&serde_json::to_string(&summary).expect("serializable"));
    out.push('\n');
    out
}

/// Step records of a trace produced by [`episode_trace_jsonl`].
pub fn parse_trace_steps(text: &str) -> Result<Vec<StepRecord>, String> {
    let mut steps = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1))?;
        if v.get("record").and_then(|r| r.as_str()) == Some("step") {
            steps.push(serde_json::from_value(v).map_err(|e| format!("line {}: {e}", n + 1))?);
        }
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affordance::ConstantModel;
    use crate::scene::{generate_packed_scene, PackedConfig};

    fn bbox() -> Aabb {
        Aabb::new(Vec3::new(0.12, 0.13, 0.05), Vec3::new(0.18, 0.17, 0.11))
    }

    #[test]
    fn candidates_look_at_bbox_center() {
        let cfg = PolicyConfig::default();
        let c = generate_candidates(&bbox(), &cfg, &Workspace::default(), 0.05, Intrinsics::default()).unwrap();
        assert_eq!(c.len(), 16);
        let center = bbox().center();
        for cand in &c {
            let axis = cand.camera.optical_axis();
            let to_center = (center - cand.camera.origin()).normalize();
            assert!((axis - to_center).norm() < 1e-6);
            assert!((cand.view - axis).norm() < 1e-6);
            assert!((cand.view.norm() - 1.0).abs() < 1e-12);
            assert!(angle_between(&-cand.view, &Vec3::z()) <= 75f64.to_radians() + 1e-9);
        }
        let sep = min_separation(&c);
        assert!(sep > 10f64.to_radians(), "{}", sep.to_degrees());
    }

    #[test]
    fn zero_cap_is_top_down() {
        let cfg = PolicyConfig { cap_deg: 0.0, ..PolicyConfig::default() };
        let c = generate_candidates(&bbox(), &cfg, &Workspace::default(), 0.05, Intrinsics::default()).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c[0].view + Vec3::z()).norm() < 1e-12);
    }

    #[test]
    fn all_culled_is_an_error() {
        let cfg = PolicyConfig::default();
        let r = generate_candidates(&bbox(), &cfg, &Workspace::default(), 10.0, Intrinsics::default());
        assert!(matches!(r, Err(PolicyError::NoCandidates)));
    }

    #[test]
    fn selection_ties_and_monotone_transforms() {
        let views = [Vec3::x(), Vec3::y(), -Vec3::x(), Vec3::new(1.0, 1.0, 0.0).normalize()];
        let current = Vec3::x();
        assert_eq!(select_view(&[0.2, 0.9, 0.9, 0.1], &views, &current), Some(1));
        assert_eq!(select_view(&[0.9, 0.9, 0.9, 0.9], &views, &current), Some(0));
        assert_eq!(select_view(&[0.1, 0.9, 0.5, 0.9], &views, &current), Some(3));
        let scores = [0.31, 0.77, 0.5, 0.77, 0.02];
        let v5 = [views[0], views[1], views[2], views[3], Vec3::z()];
        let base = select_view(&scores, &v5, &current);
        for f in [|x: f64| x.exp(), |x: f64| 3.0 * x - 7.0, |x: f64| x.powi(3), |x: f64| (x / (1.0 - x)).ln()] {
            let mapped: Vec<f64> = scores.iter().map(|s| f(*s)).collect();
            assert_eq!(select_view(&mapped, &v5, &current), base);
        }
    }

    #[test]
    fn policy_names_round_trip() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("greedy".parse::<PolicyKind>().is_err());
    }

    fn ep(outcome: Outcome) -> Episode {
        Episode {
            scene_id: 0,
            policy: PolicyKind::AceNbv,
            target_hidden: false,
            steps: Vec::new(),
            outcome,
            executed: None,
            failure: None,
            views: 1,
            diagnostic: None,
        }
    }

    #[test]
    fn metric_ratios() {
        use Outcome::*;
        let eps: Vec<Episode> = [Success, Success, Success, Failure, Abort].into_iter().map(ep).collect();
        let m = compute_metrics(&eps, None).unwrap();
        assert_eq!((m.sr, m.fr), (0.6, 0.2));
        assert!((m.ar - 0.2).abs() < 1e-15);
        let aborts: Vec<Episode> = (0..4).map(|_| ep(Abort)).collect();
        let m = compute_metrics(&aborts, None).unwrap();
        assert_eq!((m.sr, m.ar), (0.0, 1.0));
        assert!(compute_metrics(&[], None).is_err());
    }

    proptest::proptest! {
        #[test]
        fn rates_partition(codes in proptest::collection::vec(0u8..3, 1..200)) {
            let eps: Vec<Episode> = codes.iter().map(|c| ep([Outcome::Success, Outcome::Failure, Outcome::Abort][*c as usize])).collect();
            let m = compute_metrics(&eps, None).unwrap();
            proptest::prop_assert_eq!(m.successes + m.failures + m.aborts, eps.len());
            proptest::prop_assert!((m.sr + m.fr + m.ar - 1.0).abs() <= f64::EPSILON);
        }
    }

    fn env<'a>(scene: &'a Scene, enc: &'a EncoderWeights) -> Environment<'a> {
        Environment {
            scene,
            encoder: enc,
            workspace: Workspace::default(),
            intrinsics: Intrinsics::default(),
            trace: TraceConfig::default(),
            tsdf: TsdfConfig::default(),
            gripper: GripperConfig::default(),
        }
    }

    #[test]
    fn degenerate_thresholds() {
        let scene = generate_packed_scene(4, 4, &PackedConfig::default()).unwrap();
        let enc = EncoderWeights::seeded(4, 0);
        let e = env(&scene, &enc);
        let cam = Camera::looking_at(Intrinsics::default(), Vec3::new(0.5, 0.15, 0.45), Vec3::new(0.15, 0.15, 0.1));
        let model = ConstantModel { quality: 0.7, width: 0.05 };
        let cfg = PolicyConfig { q_max: 0.0, ..PolicyConfig::default() };
        let ep = run_policy(&e, &model, &cam, &cfg, 0, false);
        assert_eq!(ep.views, 1);
        assert!(ep.executed.is_some());

        let low = ConstantModel { quality: 0.2, width: 0.05 };
        let ep = run_policy(&e, &low, &cam, &PolicyConfig { t_max: 1, ..PolicyConfig::default() }, 0, false);
        assert_eq!((ep.views, ep.outcome), (1, Outcome::Abort));
        assert!(ep.executed.is_none());

        // constant head: every candidate scores 0.7, loop runs to t_max then executes
        let ep = run_policy(&e, &model, &cam, &PolicyConfig { t_max: 3, ..PolicyConfig::default() }, 0, false);
        assert_eq!(ep.views, 3);
        assert!(ep.steps[..2].iter().all(|s| s.candidate_scores.iter().all(|q| *q == 0.7)));
        assert!(ep.executed.is_some());
        let counts: Vec<usize> = ep.steps.iter().map(|s| s.observed_voxels).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(parse_trace_steps(&episode_trace_jsonl(&ep)).unwrap(), ep.steps);
    }

    #[test]
    fn fixed_trajectory_uses_four_views() {
        let scene = generate_packed_scene(2, 5, &PackedConfig::default()).unwrap();
        let enc = EncoderWeights::seeded(4, 0);
        let e = env(&scene, &enc);
        let cam = Camera::looking_at(Intrinsics::default(), Vec3::new(0.5, 0.2, 0.45), Vec3::new(0.15, 0.15, 0.1));
        let ep = run_episode(PolicyKind::FixedTraj, &e, &ConstantModel { quality: 0.6, width: 0.05 }, &cam, &PolicyConfig::default(), 2, false);
        assert_eq!(ep.views, 4);
        let top = e.top_camera(0.5);
        assert!((top.origin() - (Workspace::default().center() + Vec3::new(0.0, 0.0, 0.5))).norm() < 1e-15);
    }
}
