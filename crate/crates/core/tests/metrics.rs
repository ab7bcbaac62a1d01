use angioreg::geometry::{exp_so3, Pose};
use angioreg::metrics::{
    make_synthetic_case, run_sweep, BenchError, Perturbation, PoseError, Scenario, MIN_COVERAGE,
};
use angioreg::phantom::small_tube;
use angioreg::registration::{Configuration, RegistrationConfig};
use angioreg::render::RenderSettings;
use nalgebra::Vector3;

fn quick() -> RegistrationConfig {
    RegistrationConfig {
        max_iters: 40,
        ..Default::default()
    }
}

#[test]
fn zero_perturbation_sweep_recovers_ground_truth() {
    let scenario = Scenario {
        perturbation: Perturbation::none(),
        ..Scenario::desk_sized(64)
    };
    let result = run_sweep(&small_tube(), &scenario, &quick(), &[Configuration::LatOnly], &[0, 1]).unwrap();
    let row = result.row(Configuration::LatOnly).unwrap();
    assert_eq!((row.runs, row.converged_runs, row.failed_runs), (2, 2, 0));
    assert!(row.median.rotation_deg < 1e-6);
    assert!(row.median.translation_mm < 1e-6);
    assert!(row.median.add_mm < 1e-6);
}

#[test]
fn sweep_has_one_run_per_pair_in_order() {
    let scenario = Scenario::desk_sized(64);
    let configurations = [Configuration::ApOnly, Configuration::LatOnly];
    let result = run_sweep(&small_tube(), &scenario, &quick(), &configurations, &[3, 4, 5]).unwrap();
    assert_eq!(result.runs.len(), 6);
    assert_eq!(result.rows.len(), 2);
    let order: Vec<_> = result.runs.iter().map(|r| (r.configuration, r.seed)).collect();
    assert_eq!(order[0], (Configuration::ApOnly, 3));
    assert_eq!(order[5], (Configuration::LatOnly, 5));
    // Only AP_ONLY estimates the AP pose directly.
    assert!(result.row(Configuration::ApOnly).unwrap().median_ap.is_some());
    assert!(result.row(Configuration::LatOnly).unwrap().median_ap.is_none());
    let ap = result.row(Configuration::ApOnly).unwrap();
    assert!((ap.median.rotation_deg - ap.median_ap.unwrap().rotation_deg).abs() < 1e-9);
}

#[test]
fn sweep_csv_is_deterministic_and_has_the_documented_header() {
    let scenario = Scenario::desk_sized(64);
    let configurations = [Configuration::ApPlusLat, Configuration::LatThenAp];
    let csv = || {
        let result = run_sweep(&small_tube(), &scenario, &quick(), &configurations, &[0, 1]).unwrap();
        let mut bytes = Vec::new();
        result.write_csv(&mut bytes).unwrap();
        String::from_utf8(bytes).unwrap()
    };
    let a = csv();
    assert_eq!(a, csv());
    let mut lines = a.lines();
    assert_eq!(
        lines.next(),
        Some("configuration,seed,rotation_deg,translation_mm,add_mm,converged,iterations")
    );
    assert_eq!(lines.clone().count(), 4);
    assert!(lines.next().unwrap().starts_with("AP_PLUS_LAT,0,"));
}

#[test]
fn summary_json_lists_the_medians() {
    let scenario = Scenario::desk_sized(64);
    let result = run_sweep(&small_tube(), &scenario, &quick(), &[Configuration::LatOnly], &[0]).unwrap();
    let summary = result.summary_json();
    assert_eq!(summary["seeds"], serde_json::json!([0]));
    assert_eq!(summary["configurations"][0]["configuration"], "LAT_ONLY");
    assert!(summary["configurations"][0]["median"]["add_mm"].is_number());
}

#[test]
fn mesh_behind_the_camera_is_invisible() {
    let scene = Scenario::desk_sized(64);
    let behind = Pose::new(scene.gt_pose.rotvec, Vector3::new(0.0, 0.0, -400.0));
    let err = make_synthetic_case(&small_tube(), &scene.camera, &behind, &RenderSettings::default(), 0, &Perturbation::none(), 1)
        .unwrap_err();
    assert!(matches!(err, BenchError::InvisibleMesh { coverage, .. } if coverage < MIN_COVERAGE));

    // A sweep records the failure instead of aborting.
    let scenario = Scenario {
        gt_pose: behind,
        ..scene
    };
    let result = run_sweep(&small_tube(), &scenario, &quick(), &[Configuration::LatOnly], &[0, 1]).unwrap();
    let row = result.row(Configuration::LatOnly).unwrap();
    assert_eq!(row.failed_runs, 2);
    assert_eq!(row.converged_runs, 0);
    assert!(row.median.add_mm.is_infinite());
    assert!(result.runs.iter().all(|r| r.failure.as_deref().unwrap().contains("covers")));
}

#[test]
fn empty_sweeps_are_rejected() {
    let scenario = Scenario::desk_sized(64);
    let err = run_sweep(&small_tube(), &scenario, &quick(), &[], &[0]).unwrap_err();
    assert!(matches!(err, BenchError::EmptySweep));
    let err = run_sweep(&small_tube(), &scenario, &quick(), &[Configuration::LatOnly], &[]).unwrap_err();
    assert!(matches!(err, BenchError::EmptySweep));
}

#[test]
fn desk_views_cover_enough_of_the_image() {
    let scene = Scenario::desk();
    let case = make_synthetic_case(&small_tube(), &scene.camera, &scene.gt_pose, &RenderSettings::default(), 0, &scene.perturbation, 1)
        .unwrap();
    assert!(case.image_lat.coverage() > MIN_COVERAGE);
    assert!(case.image_ap.coverage() > MIN_COVERAGE);
    assert_ne!(case.image_lat, case.image_ap);
}

#[test]
fn perturbation_stays_in_range_and_is_seeded() {
    let gt = Scenario::desk().gt_pose;
    let p = Perturbation::default();
    for seed in 0..200 {
        let init = p.apply(&gt, seed);
        let angle = init.rotation().angle_to(&gt.rotation()).to_degrees();
        assert!(angle <= p.cone_deg + 1e-9);
        let offset = init.translation - gt.translation;
        assert!(offset.amax() <= p.box_mm);
        assert_eq!(init, p.apply(&gt, seed));
    }
    assert_ne!(p.apply(&gt, 0), p.apply(&gt, 1));
    assert_eq!(Perturbation::none().apply(&gt, 17), gt);
}

#[test]
fn pure_translation_error_is_the_same_everywhere() {
    let mesh = small_tube();
    let gt = Scenario::desk().gt_pose;
    let shifted = Pose::new(gt.rotvec, gt.translation + Vector3::new(3.0, 0.0, 4.0));
    let e = PoseError::between(&mesh, &shifted, &gt);
    assert!(e.rotation_deg.abs() < 1e-12);
    assert!((e.translation_mm - 5.0).abs() < 1e-12);
    assert!((e.add_mm - 5.0).abs() < 1e-9);
}

#[test]
fn pure_rotation_add_matches_a_direct_average() {
    let mesh = small_tube();
    let gt = Pose::identity();
    let est = Pose::from_rotation(&exp_so3(&Vector3::new(0.0, 0.0, 0.2)), Vector3::zeros());
    let expected: f64 = mesh
        .vertices()
        .iter()
        .map(|v| {
            // Rotation by θ about z moves a point by 2·r·sin(θ/2), r its distance from the axis.
            2.0 * (v.x * v.x + v.y * v.y).sqrt() * (0.1f64).sin()
        })
        .sum::<f64>()
        / mesh.vertices().len() as f64;
    let e = PoseError::between(&mesh, &est, &gt);
    assert!((e.add_mm - expected).abs() < 1e-9);
    assert!((e.rotation_deg - 0.2f64.to_degrees()).abs() < 1e-9);
}
