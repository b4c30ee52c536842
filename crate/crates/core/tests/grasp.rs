use grasp_nbv::affordance::{oracle_predict, train_head, Dataset, DatasetRecord, PairKind, TrainConfig};
use grasp_nbv::geometry::Vec3;
use grasp_nbv::grasp::{Grasp, GraspLabel};
use grasp_nbv::scene::{
    box_clear, generate_packed_scene, grasp_feasible, gripper_boxes, FailureReason, GraspVerdict, GripperConfig, PackedConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..0.2));
        if v.norm() > 0.2 && v.norm() < 1.0 {
            return v.normalize();
        }
    }
}

#[test]
fn checker_agrees_with_ten_times_finer_sampling() {
    let scene = generate_packed_scene(21, 6, &PackedConfig::default()).unwrap();
    let g = GripperConfig::default();
    let fine = GripperConfig {
        march_step: g.march_step / 10.0,
        collision_step: g.collision_step / 10.0,
        ..g
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bbox = scene.target_bbox.expanded(0.01);
    // rejection-sample 100 grasps of each verdict so both branches are compared
    let (mut same, mut successes, mut failures) = (0, 0, 0);
    for _ in 0..200_000 {
        if successes == 100 && failures == 100 {
            break;
        }
        // centers near the middle of the target, approaches from above
        let h = bbox.extent() * 0.25;
        let c = bbox.center() + Vec3::new(rng.random_range(-h.x..h.x), rng.random_range(-h.y..h.y), rng.random_range(-h.z..h.z));
        let mut view = random_unit(&mut rng);
        view.z = -view.z.abs().max(0.3);
        let grasp = Grasp {
            quality: 1.0,
            center: c,
            view: view.normalize(),
            rotation: rng.random_range(0.0..std::f64::consts::PI),
            width: g.max_opening,
        };
        let a = grasp_feasible(&scene, &grasp, &g);
        if a.is_success() && successes < 100 {
            successes += 1;
        } else if !a.is_success() && failures < 100 {
            failures += 1;
        } else {
            continue;
        }
        let b = grasp_feasible(&scene, &grasp, &fine);
        if a.is_success() == b.is_success() {
            same += 1;
            continue;
        }
        // a disagreement must be a grazing contact: the violation is shallower
        // than the half-diagonal of a coarse leaf cell
        println!("{a:?} vs fine {b:?}");
        assert!(!matches!(a, GraspVerdict::Failure(FailureReason::NoAntipodalContact)));
        assert!(!matches!(b, GraspVerdict::Failure(FailureReason::NoAntipodalContact)));
        let band = 3f64.sqrt() * g.collision_step * 0.5;
        let boxes = gripper_boxes(&grasp.center, &grasp.view, &grasp.closing_axis(), &g);
        let others = |p: &Vec3| scene.sdf_excluding(p, scene.target);
        let all = |p: &Vec3| scene.sdf(p);
        for bx in &boxes {
            assert!(box_clear(&others, bx, g.clearance - band, fine.collision_step));
            assert!(box_clear(&all, &bx.extended_back(2, g.finger_length), -band, fine.collision_step));
        }
    }
    assert_eq!((successes, failures), (100, 100));
    println!("verdict agreement {same}/200");
    assert!(same >= 190, "{same}");
}

#[test]
fn sixteen_angle_oracle_matches_dense_sweep() {
    let scene = generate_packed_scene(8, 5, &PackedConfig::default()).unwrap();
    let g = GripperConfig::default();
    let centers = scene.target_bbox.lattice(5);
    let views = [Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.6, 0.0, -0.8), Vec3::new(-0.5, 0.5, -0.7).normalize()];
    let (mut agree, mut total, mut positive) = (0, 0, 0);
    for v in &views {
        for c in &centers {
            let q16 = oracle_predict(&scene, c, v, &g, 16).quality;
            let q64 = oracle_predict(&scene, c, v, &g, 64).quality;
            agree += (q16 == q64) as usize;
            positive += (q64 == 1.0) as usize;
            total += 1;
        }
    }
    let frac = agree as f64 / total as f64;
    println!("16 vs 64 angles: {agree}/{total} agree ({positive} positive under 64)");
    assert!(frac >= 0.98, "{frac}");
}

#[test]
fn separable_toy_set_is_learned() {
    // label = sign of one input coordinate; rotation and width fixed
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let features = 1;
    let dim = grasp_nbv::affordance::head_input_dim(features);
    let records: Vec<DatasetRecord> = (0..200)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let success = x[5] > 0.0;
            let label = GraspLabel {
                center: Vec3::repeat(0.1),
                view: Vec3::z(),
                rotation: 0.3,
                width: 0.04,
                success,
            };
            DatasetRecord::new(PairKind::FrontObserveFrontGrasp, &x, label)
        })
        .collect();
    let ds = Dataset { features, records };
    let cfg = TrainConfig {
        epochs: 200,
        validation_fraction: 0.0,
        ..TrainConfig::default()
    };
    let (_, stats) = train_head(&ds, &cfg).unwrap();
    let first = stats.iter().position(|s| s.train.quality < 0.1);
    println!("BCE below 0.1 at epoch {first:?}; final {:.4}", stats.last().unwrap().train.quality);
    assert!(first.is_some());
}
