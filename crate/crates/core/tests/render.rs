use grasp_nbv::geometry::{Vec3, Workspace};
use grasp_nbv::neural_render::{
    composite, depth_loss, BYPASS_SHARPNESS, render_and_backprop, render_ray, AnalyticField, DepthRay, RenderConfig, SdfDecoder,
};
use grasp_nbv::scene::{generate_packed_scene, trace_ray, Camera, Intrinsics, PackedConfig, TraceConfig};
use grasp_nbv::triplane::{encode, EncoderWeights};
use grasp_nbv::tsdf::{TsdfConfig, TsdfVolume};

struct BypassStats {
    hits: usize,
    within: usize,
    abs_err: Vec<f64>,
}

fn bypass_run(uniform: usize, importance_rounds: usize, s: f64, seeds: std::ops::Range<u64>, stride: usize) -> BypassStats {
    let ws = Workspace::default();
    let cfg = RenderConfig {
        uniform_samples: uniform,
        importance_rounds,
        ..RenderConfig::default()
    };
    let trace = TraceConfig::default();
    let mut st = BypassStats { hits: 0, within: 0, abs_err: Vec::new() };
    for seed in seeds {
        let scene = generate_packed_scene(seed, 4, &PackedConfig::default()).unwrap();
        let az = seed as f64 * 1.3;
        let eye = ws.center() + Vec3::new(az.cos() * 0.35, az.sin() * 0.35, 0.3);
        let cam = Camera::looking_at(Intrinsics::default(), eye, ws.center());
        let field = AnalyticField { scene: &scene, workspace: ws };
        let k = cam.intrinsics;
        for i in (0..k.width * k.height).step_by(stride) {
            let ray = cam.pixel_ray((i % k.width) as f64, (i / k.width) as f64).normalize();
            let Some((t0, t1)) = ws.aabb().line_interval(&eye, &ray) else { continue };
            let Some((t_ref, _)) = trace_ray(&scene, &eye, &ray, t1, &trace) else { continue };
            if t_ref < t0 {
                continue;
            }
            st.hits += 1;
            let r = render_ray(&field, &eye, &ray, t0, t1, s, &cfg);
            let spacing = (t1 - t0) / uniform as f64;
            let err = r.distance.map_or(f64::INFINITY, |t| (t - t_ref).abs());
            if err <= 2.0 * spacing {
                st.within += 1;
            }
            st.abs_err.push(err.min(1.0));
        }
    }
    st
}

#[test]
fn analytic_bypass_matches_sphere_tracing() {
    let st = bypass_run(64, 4, BYPASS_SHARPNESS, 0..6, 7);
    let frac = st.within as f64 / st.hits as f64;
    println!("bypass: {}/{} hit rays within 2 spacings ({frac:.3})", st.within, st.hits);
    assert!(st.hits > 500);
    assert!(frac >= 0.95, "{frac}");
}

#[test]
fn more_uniform_samples_do_not_increase_error() {
    let coarse = bypass_run(64, 0, 20.0, 10..12, 11);
    let fine = bypass_run(256, 0, 20.0, 10..12, 11);
    assert_eq!(coarse.hits, fine.hits);
    assert!(coarse.hits >= 100);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&coarse.abs_err), mean(&fine.abs_err));
    println!("mean error 64 samples {a:.5}, 256 samples {b:.5}");
    assert!(b <= a, "{b} > {a}");
}

#[test]
fn weights_stay_normalized_on_scenes() {
    let st_scene = generate_packed_scene(3, 5, &PackedConfig::default()).unwrap();
    let ws = Workspace::default();
    let field = AnalyticField { scene: &st_scene, workspace: ws };
    let cfg = RenderConfig::default();
    let eye = Vec3::new(0.5, -0.2, 0.4);
    for i in 0..200 {
        let a = i as f64 * 0.031;
        let target = ws.center() + Vec3::new(a.cos() * 0.1, a.sin() * 0.1, (a * 0.7).sin() * 0.08);
        let dir = (target - eye).normalize();
        let (t0, t1) = ws.aabb().line_interval(&eye, &dir).unwrap();
        for s in [5.0, 20.0, 200.0] {
            let r = render_ray(&field, &eye, &dir, t0, t1, s, &cfg);
            assert!(r.weights.iter().all(|w| (0.0..=1.0).contains(w)));
            assert!(r.weight_sum <= 1.0 + 1e-6);
            assert!(r.t.iter().all(|t| *t >= t0 && *t <= t1));
        }
    }
}

#[test]
fn composite_matches_direct_product_form() {
    // transmittance written as an explicit product over earlier intervals
    let t: Vec<f64> = (0..12).map(|i| 0.1 + 0.02 * i as f64).collect();
    let sdf: Vec<f64> = t.iter().map(|x| 0.17 - x + 0.03 * (x * 40.0).sin()).collect();
    let s = 37.0;
    let r = composite(&t, &sdf, s, 1e-3);
    let phi = |x: f64| 1.0 / (1.0 + (-s * x).exp());
    let alpha: Vec<f64> = (0..11)
        .map(|i| ((phi(sdf[i]) - phi(sdf[i + 1])) / (phi(sdf[i]) + 1e-10)).max(0.0))
        .collect();
    for i in 0..11 {
        let w: f64 = alpha[..i].iter().map(|a| 1.0 - a).product::<f64>() * alpha[i];
        assert!((w - r.weights[i]).abs() < 1e-12);
    }
}

fn small_setup() -> (grasp_nbv::triplane::TriPlaneVolume, Vec<DepthRay>) {
    let ws = Workspace::default();
    let scene = generate_packed_scene(1, 3, &PackedConfig::default()).unwrap();
    let eye = Vec3::new(0.45, 0.1, 0.35);
    let cam = Camera::looking_at(Intrinsics::default(), eye, ws.center());
    let img = grasp_nbv::scene::render_depth(&scene, &cam, &TraceConfig::default());
    let mut vol = TsdfVolume::new(ws, TsdfConfig { resolution: 16, ..TsdfConfig::default() });
    vol.integrate(&img);
    let planes = encode(&vol, &EncoderWeights::seeded(2, 4)).unwrap();
    let rays = grasp_nbv::neural_render::depth_rays(&img, &ws);
    let picked = rays.into_iter().step_by(397).take(8).collect();
    (planes, picked)
}

fn batch_loss(planes: &grasp_nbv::triplane::TriPlaneVolume, dec: &SdfDecoder, rays: &[DepthRay], cfg: &RenderConfig) -> f64 {
    let field = grasp_nbv::neural_render::DecoderField { planes, decoder: dec };
    let (rendered, truth): (Vec<f64>, Vec<f64>) = rays
        .iter()
        .map(|r| {
            let d = render_ray(&field, &r.origin, &r.dir, r.chord.0, r.chord.1, dec.sharpness(), cfg)
                .distance
                .map_or(f64::INFINITY, |t| t * r.depth_scale);
            (d, r.depth)
        })
        .unzip();
    depth_loss(&rendered, &truth).0
}

#[test]
fn end_to_end_render_gradient_matches_finite_differences() {
    let (planes, rays) = small_setup();
    let cfg = RenderConfig {
        uniform_samples: 8,
        importance_rounds: 0,
        ..RenderConfig::default()
    };
    let mut dec = SdfDecoder::seeded(planes.point_dim(), 6, 9);
    dec.log_s = 3f64.ln();
    let field = grasp_nbv::neural_render::DecoderField { planes: &planes, decoder: &dec };
    let hits = rays
        .iter()
        .filter(|r| render_ray(&field, &r.origin, &r.dir, r.chord.0, r.chord.1, dec.sharpness(), &cfg).distance.is_some())
        .count();
    assert!(hits >= 4, "only {hits} rays hit");
    let mut grad = vec![0.0; dec.param_count()];
    let n = hits as f64;
    for r in &rays {
        let truth = r.depth;
        render_and_backprop(&planes, &dec, r, r.chord.0, r.chord.1, &cfg, |d| (d - truth).signum() / n, &mut grad);
    }
    let h = 1e-6;
    let mut checked = 0;
    for i in 0..dec.param_count() {
        let mut plus = dec.clone();
        let mut minus = dec.clone();
        if i < dec.mlp.params.len() {
            plus.mlp.params[i] += h;
            minus.mlp.params[i] -= h;
        } else {
            plus.log_s += h;
            minus.log_s -= h;
        }
        let fd = (batch_loss(&planes, &plus, &rays, &cfg) - batch_loss(&planes, &minus, &rays, &cfg)) / (2.0 * h);
        let scale = fd.abs().max(grad[i].abs());
        if scale < 1e-7 {
            continue;
        }
        let rel = (fd - grad[i]).abs() / scale;
        assert!(rel < 1e-3, "param {i}: analytic {} vs fd {fd} (rel {rel})", grad[i]);
        checked += 1;
    }
    assert!(checked > dec.param_count() / 2, "{checked}");
}

#[test]
fn depth_loss_gradient_matches_finite_differences() {
    let truth = [0.41, 0.52, f64::INFINITY, 0.33, 0.6];
    let rendered = [0.43, 0.5, 0.4, 0.3301, 0.61];
    let (_, g) = depth_loss(&rendered, &truth);
    for i in 0..rendered.len() {
        let h = 1e-7;
        let mut p = rendered;
        let mut m = rendered;
        p[i] += h;
        m[i] -= h;
        let fd = (depth_loss(&p, &truth).0 - depth_loss(&m, &truth).0) / (2.0 * h);
        assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-12) || (fd == 0.0 && g[i] == 0.0), "{i}: {fd} vs {}", g[i]);
    }
}

