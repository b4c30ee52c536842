use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use grasp_nbv::affordance::{train_head, training_log_csv, AffordanceHead};
use grasp_nbv::bench::{
    aligned_view_experiment, decoder_render_config, decoder_training_set, episode_setup, generate_dataset,
    run_benchmark, scene_views, train_config, BenchConfig, ConfigError, ModelSource, PairMix, Rig,
};
use grasp_nbv::io::{depth_to_pgm, gray_to_pgm, points_to_ply, rgb_to_ppm, TensorFile};
use grasp_nbv::neural_render::{render_depth_implicit, train_decoder, DecoderField, DecoderTrainConfig, SdfDecoder};
use grasp_nbv::policy::{episode_trace_jsonl, parse_trace_steps, run_episode, Episode, PolicyKind};
use grasp_nbv::scene::{render_depth, scene_from_json, scene_to_json, Camera, Scene};
use grasp_nbv::triplane::stage1_planes;
use grasp_nbv::tsdf::TsdfVolume;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "GRASP_NBV_OUT";
const MANIFEST: &str = "run_manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "grasp-nbv", version, about = "Affordance-driven next-best-view planning for grasping occluded objects")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Complete key = value config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Primary seed of the subcommand (first scene, episode scene, training split).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $GRASP_NBV_OUT/<subcommand> or runs/<subcommand>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Maximum views per episode; overrides t_max.
    #[arg(long, global = true)]
    tmax: Option<usize>,
    /// Quality above which a view's best grasp is executed; overrides q_max.
    #[arg(long, global = true)]
    qmax: Option<f64>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Trained affordance head.
    #[arg(long, conflicts_with = "oracle")]
    weights: Option<PathBuf>,
    /// Use ground-truth affordances instead of a learned head.
    #[arg(long)]
    oracle: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate packed scenes as JSON, with the benchmark target selected.
    GenScenes {
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Ground-truth depth images of a scene from the cap views; optionally the decoder's rendering too.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 12)]
        views: usize,
        /// Trained SDF decoder; adds implicit-depth images from the fused views.
        #[arg(long)]
        decoder: Option<PathBuf>,
    },
    /// Fuse the cap views of a scene into a TSDF volume.
    Fuse {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 12)]
        views: usize,
    },
    /// Generate the dataset and train the affordance head and the SDF decoder.
    Train {
        /// Pair kinds: `all` or `front`.
        #[arg(long)]
        mix: Option<PairMix>,
    },
    /// Run one episode and write its trace.
    Plan {
        #[arg(long, default_value = "ace-nbv")]
        policy: PolicyKind,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run the policy benchmark.
    Bench {
        /// Comma-separated policies; overrides the config.
        #[arg(long, value_delimiter = ',')]
        policy: Vec<PolicyKind>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Aligned versus 90°-offset grasp-view prediction error.
    AlignedExp {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Images and point clouds from traces or volumes.
    Viz {
        /// Episode trace (JSON lines); one PPM per step.
        #[arg(long, required_unless_present = "volume")]
        trace: Option<PathBuf>,
        /// Scene of the trace; regenerated from its seed when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// TSDF volume from `fuse`; PLY of zero crossings plus plane images.
        #[arg(long, conflicts_with = "trace")]
        volume: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenScenes { .. } => "gen-scenes",
            Command::Render { .. } => "render",
            Command::Fuse { .. } => "fuse",
            Command::Train { .. } => "train",
            Command::Plan { .. } => "plan",
            Command::Bench { .. } => "bench",
            Command::AlignedExp { .. } => "aligned-exp",
            Command::Viz { .. } => "viz",
        }
    }
}

/// Errors that map to exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn load_config(common: &Common) -> Result<BenchConfig> {
    let mut cfg = match &common.config {
        None => BenchConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            BenchConfig::from_key_values(&text).map_err(|e: ConfigError| usage(format!("{}: {e}", path.display())))?
        }
    };
    if let Some(t) = common.tmax {
        cfg.policy.t_max = t;
    }
    if let Some(q) = common.qmax {
        cfg.policy.q_max = q;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn output_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    })
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn manifest(cfg: &BenchConfig, command: &str, seed: Option<u64>, jobs: usize) -> String {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut out = String::new();
    let _ = writeln!(out, "# resolved configuration; usable as --config");
    let _ = writeln!(out, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "command = {command}");
    let _ = writeln!(out, "args = {}", args.join(" "));
    let _ = writeln!(out, "seed = {}", seed.map_or("default".to_string(), |s| s.to_string()));
    let _ = writeln!(out, "jobs = {jobs}");
    out.push_str(&cfg.to_key_values());
    out
}

fn load_head(path: &Path, cfg: &BenchConfig) -> Result<AffordanceHead> {
    let bytes = fs::read(path).map_err(|e| usage(format!("cannot read weights {}: {e}", path.display())))?;
    let file = TensorFile::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    let head = AffordanceHead::from_tensor_file(&file).with_context(|| format!("loading {}", path.display()))?;
    if head.features != cfg.features {
        bail!("{} was trained with F = {}, config has F = {}", path.display(), head.features, cfg.features);
    }
    log::info!("weights {} ({})", path.display(), file.provenance);
    Ok(head)
}

fn with_model<R>(args: &ModelArgs, cfg: &BenchConfig, f: impl FnOnce(ModelSource) -> Result<R>) -> Result<R> {
    match &args.weights {
        Some(path) => {
            let head = load_head(path, cfg)?;
            f(ModelSource::Head(&head))
        }
        None => {
            if !args.oracle {
                log::warn!("no --weights given; using ground-truth affordances");
            }
            f(ModelSource::Oracle { angles: cfg.oracle_angles })
        }
    }
}

fn read_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read scene {}: {e}", path.display())))?;
    scene_from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let Cli { common, command } = cli;
    let name = command.name();
    let mut cfg = load_config(&common)?;
    if let Command::Bench { policy, .. } = &command {
        if !policy.is_empty() {
            cfg.policies = policy.clone();
        }
    }
    if let Command::Train { mix: Some(m) } = &command {
        cfg.pair_mix = *m;
    }
    if let Some(seed) = common.seed {
        match &command {
            Command::Train { .. } => cfg.train_seed = seed,
            Command::Bench { .. } => cfg.bench_seed = seed,
            Command::AlignedExp { .. } => cfg.aligned_seed = seed,
            _ => {}
        }
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs)
        .build_global()
        .map_err(|e| anyhow!("thread pool: {e}"))?;
    let out = output_dir(&common, name);
    let rig = Rig {
        workspace: cfg.workspace(),
        ..Rig::default()
    };
    let encoder = cfg.encoder();
    // inputs are validated before the output directory is touched
    let scene_input = match &command {
        Command::Render { scene, .. } | Command::Fuse { scene, .. } => Some(read_scene(scene)?),
        Command::Viz { scene: Some(s), .. } => Some(read_scene(s)?),
        _ => None,
    };
    write(&out, MANIFEST, manifest(&cfg, name, common.seed, common.jobs))?;

    match command {
        Command::GenScenes { count } => {
            let first = common.seed.unwrap_or(cfg.bench_seed);
            for seed in first..first + count as u64 {
                let (scene, camera, hidden) = episode_setup(seed, &cfg, &rig).with_context(|| format!("scene {seed}"))?;
                write(&out, &format!("scene_{seed}.json"), scene_to_json(&scene))?;
                let cam = serde_json::json!({ "seed": seed, "initial_camera": camera, "target": scene.target, "target_hidden": hidden });
                write(&out, &format!("scene_{seed}_initial.json"), format!("{cam}\n"))?;
            }
            println!("{count} scenes in {}", out.display());
        }
        Command::Render { views, decoder, .. } => {
            let scene = scene_input.expect("read above");
            let cams = scene_views(views, &cfg, &rig);
            for (i, cam) in cams.iter().enumerate() {
                let img = render_depth(&scene, cam, &rig.trace);
                write(&out, &format!("depth_{i:02}.pgm"), depth_to_pgm(img.width, img.height, &img.depth))?;
            }
            write(&out, "cameras.json", serde_json::to_string_pretty(&cams)? + "\n")?;
            if let Some(path) = decoder {
                let bytes = fs::read(&path).map_err(|e| usage(format!("cannot read decoder {}: {e}", path.display())))?;
                let dec = SdfDecoder::from_tensor_file(&TensorFile::from_bytes(&bytes)?)?;
                let (_, planes) = rig.observe(&scene, &cams, &encoder);
                let field = DecoderField { planes: &planes, decoder: &dec };
                for (i, cam) in cams.iter().enumerate() {
                    let img = render_depth_implicit(&field, cam, &rig.workspace, dec.sharpness(), &decoder_render_config(&cfg));
                    write(&out, &format!("neural_{i:02}.pgm"), depth_to_pgm(img.width, img.height, &img.depth))?;
                }
            }
            println!("{} views in {}", cams.len(), out.display());
        }
        Command::Fuse { views, .. } => {
            let scene = scene_input.expect("read above");
            let cams = scene_views(views, &cfg, &rig);
            let (vol, _) = rig.observe(&scene, &cams, &encoder);
            write(&out, "tsdf.bin", vol.to_bytes())?;
            let pts = vol.zero_crossings();
            write(&out, "surface.ply", points_to_ply(&pts))?;
            println!("fused {} views, {} observed voxels, {} surface points", cams.len(), vol.observed_count(), pts.len());
        }
        Command::Train { .. } => {
            let provenance = format!(
                "mix={} scenes={} train_seed={} encoder_seed={} features={}",
                cfg.pair_mix.name(),
                cfg.train_scenes,
                cfg.train_seed,
                cfg.encoder_seed,
                cfg.features
            );
            let (dataset, report) = generate_dataset(&cfg, &rig, &encoder);
            log::info!(
                "dataset: {} records kept of {} ({} positive), {} scenes skipped",
                report.kept,
                report.raw_records,
                report.raw_positive,
                report.scenes_skipped.len()
            );
            write(&out, "dataset.bin", dataset.to_bytes())?;
            write(&out, "dataset_report.json", serde_json::to_string_pretty(&report)? + "\n")?;
            let (head, stats) = train_head(&dataset, &train_config(&cfg))?;
            write(&out, "head.bin", head.to_tensor_file(&provenance).to_bytes())?;
            write(&out, "training_log.csv", training_log_csv(&stats))?;
            let dec_cfg = DecoderTrainConfig {
                steps: cfg.decoder_steps,
                seed: cfg.train_seed,
                ..DecoderTrainConfig::default()
            };
            let scenes = decoder_training_set(&cfg, &rig, &encoder);
            let (decoder, losses) = train_decoder(&scenes, &decoder_render_config(&cfg), &dec_cfg)?;
            write(&out, "decoder.bin", decoder.to_tensor_file(cfg.features as u32, &provenance).to_bytes())?;
            let mut log = String::from("step,depth_loss\n");
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(log, "{i},{l:.6}");
            }
            write(&out, "decoder_log.csv", log)?;
            println!("trained on {} records; weights in {}", dataset.records.len(), out.display());
        }
        Command::Plan { policy, model } => {
            let seed = common.seed.unwrap_or(cfg.bench_seed);
            let (scene, init, hidden) = episode_setup(seed, &cfg, &rig).with_context(|| format!("scene {seed}"))?;
            let env = rig.environment(&scene, &encoder);
            let ep = with_model(&model, &cfg, |source| Ok(plan_one(policy, &env, source, &init, &cfg, seed, hidden)))?;
            write(&out, &format!("trace_{policy}_{seed}.jsonl"), episode_trace_jsonl(&ep))?;
            println!("{}", outcome_line(&ep));
        }
        Command::Bench { model, .. } => {
            let res = with_model(&model, &cfg, |source| Ok(run_benchmark(&cfg, &rig, &encoder, source)))?;
            write(&out, "episodes.csv", res.episodes_csv())?;
            write(&out, "metrics.csv", res.metrics_csv())?;
            write(&out, "table.txt", res.table())?;
            for ep in &res.episodes {
                write(&out, &format!("traces/{}_{}.jsonl", ep.policy, ep.scene_id), episode_trace_jsonl(ep))?;
            }
            print!("{}", res.table());
        }
        Command::AlignedExp { model } => {
            let report = with_model(&model, &cfg, |source| Ok(aligned_view_experiment(&cfg, &rig, &encoder, source)))?;
            let text = report.to_text();
            write(&out, "aligned.csv", &text)?;
            print!("{}", text.lines().last().map_or(String::new(), |l| format!("{l}\n")));
        }
        Command::Viz { trace, volume, .. } => {
            if let Some(path) = volume {
                let bytes = fs::read(&path).map_err(|e| usage(format!("cannot read volume {}: {e}", path.display())))?;
                let vol = TsdfVolume::from_bytes(&bytes, rig.tsdf).with_context(|| format!("parsing {}", path.display()))?;
                let pts = vol.zero_crossings();
                write(&out, "surface.ply", points_to_ply(&pts))?;
                let planes = stage1_planes(&vol);
                let n = planes.resolution;
                for (p, name) in ["xy", "xz", "yz"].iter().enumerate() {
                    let img = planes.channel_image(p, 0);
                    write(&out, &format!("plane_{name}.pgm"), gray_to_pgm(n, n, &img, -1.0, 1.0))?;
                }
                println!("{} surface points", pts.len());
            }
            if let Some(path) = trace {
                let text = fs::read_to_string(&path).map_err(|e| usage(format!("cannot read trace {}: {e}", path.display())))?;
                let steps = parse_trace_steps(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
                let scene = match scene_input {
                    Some(s) => s,
                    None => {
                        let seed = trace_scene_id(&text).ok_or_else(|| anyhow!("{}: no outcome line with a scene id", path.display()))?;
                        episode_setup(seed, &cfg, &rig)?.0
                    }
                };
                for s in &steps {
                    let ppm = overlay(&scene, &s.camera, &s.grasps, &rig);
                    write(&out, &format!("step_{:02}.ppm", s.step), ppm)?;
                }
                println!("{} step images", steps.len());
            }
        }
    }
    Ok(())
}

fn plan_one(
    policy: PolicyKind,
    env: &grasp_nbv::policy::Environment,
    source: ModelSource,
    init: &Camera,
    cfg: &BenchConfig,
    seed: u64,
    hidden: bool,
) -> Episode {
    match source {
        ModelSource::Head(h) => run_episode(policy, env, h, init, &cfg.policy, seed, hidden),
        ModelSource::Oracle { angles } => {
            let m = grasp_nbv::affordance::OracleModel { scene: env.scene, gripper: env.gripper, angles };
            run_episode(policy, env, &m, init, &cfg.policy, seed, hidden)
        }
        ModelSource::Constant { quality } => {
            let m = grasp_nbv::affordance::ConstantModel { quality, width: 0.04 };
            run_episode(policy, env, &m, init, &cfg.policy, seed, hidden)
        }
    }
}

fn outcome_line(ep: &Episode) -> String {
    let outcome = serde_json::to_value(ep.outcome).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    let q = ep.executed.map_or("-".to_string(), |g| format!("{:.3}", g.quality));
    format!("outcome={outcome} policy={} scene={} views={} quality={q}", ep.policy, ep.scene_id, ep.views)
}

fn trace_scene_id(text: &str) -> Option<u64> {
    text.lines().rev().find_map(|l| {
        let v: serde_json::Value = serde_json::from_str(l).ok()?;
        (v.get("record")?.as_str()? == "outcome").then(|| v.get("scene_id")?.as_u64())?
    })
}

/// Depth image of the step camera with grasp centers marked red (q > 0.5) or blue.
fn overlay(scene: &Scene, camera: &Camera, grasps: &[grasp_nbv::grasp::Grasp], rig: &Rig) -> Vec<u8> {
    let img = render_depth(scene, camera, &rig.trace);
    let (lo, hi) = img
        .depth
        .iter()
        .filter(|d| d.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), d| (a.min(*d), b.max(*d)));
    let mut rgb: Vec<[u8; 3]> = img
        .depth
        .iter()
        .map(|d| {
            if d.is_finite() && hi > lo {
                let g = (255.0 * (1.0 - (d - lo) / (hi - lo))).round() as u8;
                [g, g, g]
            } else {
                [0, 0, 0]
            }
        })
        .collect();
    for g in grasps {
        let Some((u, v, _)) = camera.project(&g.center) else { continue };
        let colour = if g.quality > 0.5 { [255, 0, 0] } else { [0, 0, 255] };
        let (u, v) = (u.round() as i64, v.round() as i64);
        for dv in -1..=1 {
            for du in -1..=1 {
                let (x, y) = (u + du, v + dv);
                if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
                    rgb[y as usize * img.width + x as usize] = colour;
                }
            }
        }
    }
    rgb_to_ppm(img.width, img.height, &rgb)
}
