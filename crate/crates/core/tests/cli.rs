use std::path::Path;
use std::process::{Command, Output};

use angioreg::geometry::Pose;
use angioreg::metrics::{PoseError, Scenario};
use angioreg::registration::RegistrationReport;
use nalgebra::Vector3;
use tempfile::TempDir;

fn angioreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_angioreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a 64×64 desk camera and returns its path.
fn small_camera(dir: &Path) -> String {
    let file = dir.join("camera64.json");
    std::fs::write(&file, serde_json::to_string(&Scenario::desk_sized(64).camera).unwrap()).unwrap();
    path(&file).to_owned()
}

/// Runs `synth` on the 64 px camera into `dir/case`.
fn synth_small(dir: &Path, extra: &[&str]) -> Output {
    let camera = small_camera(dir);
    let out = dir.join("case");
    let mut args = vec!["synth", "--camera", &camera, "--out", path(&out), "--cone-deg", "5", "--box-mm", "5"];
    args.extend_from_slice(extra);
    angioreg(&args)
}

#[test]
fn eval_of_identical_poses_is_zero() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&synth_small(dir.path(), &[])), 0);
    let case = dir.path().join("case");
    let gt = case.join("gt_pose.json");
    let out = angioreg(&["eval", "--mesh", path(&case.join("mesh.obj")), "--est", path(&gt), "--gt", path(&gt)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let error: PoseError = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(error.rotation_deg, 0.0);
    assert_eq!(error.translation_mm, 0.0);
    assert_eq!(error.add_mm, 0.0);
}

#[test]
fn synth_then_register_recovers_the_pose() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&synth_small(dir.path(), &["--seed", "3"])), 0);
    let case = dir.path().join("case");
    let run = dir.path().join("run");
    let out = angioreg(&[
        "register",
        "--mesh",
        path(&case.join("mesh.obj")),
        "--ap",
        path(&case.join("I_ap.png")),
        "--lat",
        path(&case.join("I_lat.png")),
        "--init",
        path(&case.join("init_pose.json")),
        "--camera",
        path(&case.join("camera.json")),
        "--out",
        path(&run),
        "--dump-frames",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let report: RegistrationReport = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    let pose: Pose = serde_json::from_slice(&std::fs::read(run.join("pose_lat.json")).unwrap()).unwrap();
    assert_eq!(pose, report.final_pose_lat);
    let trace = std::fs::read_to_string(run.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), report.iterations_run + 1);
    let frames = std::fs::read_dir(run.join("frames")).unwrap().count();
    assert_eq!(frames, report.iterations_run);
    assert!(run.join("frames/0000.png").exists());

    let init: Pose = serde_json::from_slice(&std::fs::read(case.join("init_pose.json")).unwrap()).unwrap();
    let gt: Pose = serde_json::from_slice(&std::fs::read(case.join("gt_pose.json")).unwrap()).unwrap();
    let in_plane = |p: &Pose| (p.translation - gt.translation).xy().norm();
    let angle = |p: &Pose| p.rotation().angle_to(&gt.rotation()).to_degrees();
    // Binary masks against soft renders bias depth by about a pixel of scale
    // (≈1.3 mm at 64 px); in-plane position and rotation are well determined.
    assert!(in_plane(&pose) < 0.5 && in_plane(&pose) < in_plane(&init), "{pose:?}");
    assert!(angle(&pose) < angle(&init), "{pose:?}");
    assert!((pose.translation.z - gt.translation.z).abs() < 10.0, "{pose:?}");
}

#[test]
fn register_with_a_config_file_converges() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&synth_small(dir.path(), &[])), 0);
    let case = dir.path().join("case");
    let config = dir.path().join("ap_plus_lat.json");
    std::fs::write(&config, r#"{"configuration": "AP_PLUS_LAT", "max_iters": 500}"#).unwrap();
    let run = dir.path().join("run");
    let out = angioreg(&[
        "register",
        "--mesh",
        path(&case.join("mesh.obj")),
        "--ap",
        path(&case.join("I_ap.png")),
        "--lat",
        path(&case.join("I_lat.png")),
        "--init",
        path(&case.join("init_pose.json")),
        "--camera",
        path(&case.join("camera.json")),
        "--config",
        path(&config),
        "--out",
        path(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: RegistrationReport = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    assert!(report.converged);
    assert!(!run.join("frames").exists());
}

#[test]
fn mismatched_image_sizes_fail_with_a_message() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&synth_small(dir.path(), &[])), 0);
    let case = dir.path().join("case");
    // Default camera is 256×256, the images are 64×64.
    let out = angioreg(&[
        "register",
        "--mesh",
        path(&case.join("mesh.obj")),
        "--ap",
        path(&case.join("I_ap.png")),
        "--lat",
        path(&case.join("I_lat.png")),
        "--out",
        path(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("dimension mismatch"), "{}", stderr(&out));
}

#[test]
fn missing_inputs_fail_with_exit_code_one() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.obj");
    let out = angioreg(&["eval", "--mesh", path(&missing), "--est", "a.json", "--gt", "b.json"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nope.obj"));
}

#[test]
fn constant_image_cannot_be_segmented() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&synth_small(dir.path(), &[])), 0);
    let case = dir.path().join("case");
    let flat = dir.path().join("flat.png");
    image::GrayImage::from_pixel(64, 64, image::Luma([128])).save(&flat).unwrap();
    let out = angioreg(&[
        "register",
        "--mesh",
        path(&case.join("mesh.obj")),
        "--ap",
        path(&flat),
        "--lat",
        path(&case.join("I_lat.png")),
        "--camera",
        path(&case.join("camera.json")),
        "--out",
        path(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("flat.png"));
}

#[test]
fn ground_truth_behind_the_camera_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let gt = dir.path().join("behind.json");
    let pose = Pose::new(Vector3::new(0.25, -0.35, 0.1), Vector3::new(0.0, 0.0, -400.0));
    std::fs::write(&gt, serde_json::to_string(&pose).unwrap()).unwrap();
    let out = synth_small(dir.path(), &["--gt", path(&gt)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("covers"));
}

#[test]
fn sweep_writes_csv_and_summary() {
    let dir = TempDir::new().unwrap();
    let camera = small_camera(dir.path());
    let config = dir.path().join("quick.json");
    std::fs::write(&config, r#"{"max_iters": 30}"#).unwrap();
    let out_dir = dir.path().join("sweep");
    let out = Command::new(env!("CARGO_BIN_EXE_angioreg"))
        .args([
            "sweep",
            "--camera",
            &camera,
            "--config",
            path(&config),
            "--seeds",
            "2",
            "--configurations",
            "LAT_ONLY,AP_PLUS_LAT",
            "--out",
            path(&out_dir),
        ])
        .env("TWOVIEW_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["configurations"].as_array().unwrap().len(), 2);
    assert_eq!(summary["seeds"], serde_json::json!([0, 1]));
}

#[test]
fn invalid_thread_count_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_angioreg"))
        .args(["sweep", "--seeds", "1", "--out", path(&dir.path().join("s"))])
        .env("TWOVIEW_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("TWOVIEW_THREADS"));
}
