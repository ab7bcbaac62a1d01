//! Pose error metrics, synthetic cases and configuration sweeps.

use std::io;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{exp_so3, CameraModel, Pose, Projector, Rotation};
use crate::mesh::{add_error, TriangleMesh};
use crate::registration::{coupled_ap_pose, run_registration, Configuration, RegistrationConfig, RegistrationError, RegistrationReport};
use crate::render::{render_silhouette, RenderSettings, SilhouetteImage};

/// Minimum fraction of pixels a ground-truth view must cover.
pub const MIN_COVERAGE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("mesh covers {coverage:.4} of the {view} view, below the {MIN_COVERAGE} minimum")]
    InvisibleMesh { view: &'static str, coverage: f64 },
    #[error("sweep needs at least one configuration and one seed")]
    EmptySweep,
}

pub fn rotation_error_deg(est: &Rotation, gt: &Rotation) -> f64 {
    est.angle_to(gt).to_degrees()
}

pub fn translation_error_mm(est: &Vector3<f64>, gt: &Vector3<f64>) -> f64 {
    (est - gt).norm()
}

/// 6D (rotation, translation) and ADD error of one pose estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation_mm: f64,
    pub add_mm: f64,
}

impl PoseError {
    pub fn between(mesh: &TriangleMesh, est: &Pose, gt: &Pose) -> Self {
        PoseError {
            rotation_deg: rotation_error_deg(&est.rotation(), &gt.rotation()),
            translation_mm: translation_error_mm(&est.translation, &gt.translation),
            add_mm: add_error(mesh, est, gt),
        }
    }

    fn worst() -> Self {
        PoseError {
            rotation_deg: f64::INFINITY,
            translation_mm: f64::INFINITY,
            add_mm: f64::INFINITY,
        }
    }
}

/// Range of the random initial offset from ground truth: a rotation of at
/// most `cone_deg` about a uniformly random axis, and a translation uniform
/// in the cube `[-box_mm, box_mm]³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub cone_deg: f64,
    pub box_mm: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            cone_deg: 10.0,
            box_mm: 10.0,
        }
    }
}

impl Perturbation {
    pub fn none() -> Self {
        Perturbation {
            cone_deg: 0.0,
            box_mm: 0.0,
        }
    }

    /// Applies a seeded random offset to `gt`. The rotation offset is applied
    /// on the left, about the model origin in projector axes.
    pub fn apply(&self, gt: &Pose, seed: u64) -> Pose {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: f64 = rng.random_range(-1.0..=1.0);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).max(0.0).sqrt();
        let axis = Vector3::new(r * phi.cos(), r * phi.sin(), z);
        let angle = self.cone_deg.to_radians() * rng.random::<f64>();
        let mut offset = Vector3::zeros();
        for c in offset.iter_mut() {
            *c = self.box_mm * rng.random_range(-1.0..=1.0);
        }
        let rotvec = if angle > 0.0 {
            Pose::from_rotation(&(exp_so3(&(axis * angle)) * gt.rotation()), Vector3::zeros()).rotvec
        } else {
            gt.rotvec
        };
        Pose {
            rotvec,
            translation: gt.translation + offset,
        }
    }
}

/// Camera, ground truth and perturbation of the desk-scale experiment: a
/// 50 mm phantom 400 mm from the source imaged at 256×256.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub camera: CameraModel,
    pub gt_pose: Pose,
    pub perturbation: Perturbation,
}

impl Scenario {
    pub fn desk() -> Self {
        Scenario::desk_sized(256)
    }

    /// Desk geometry at a square resolution of `size` pixels; the focal
    /// length scales with it so the field of view is unchanged.
    pub fn desk_sized(size: usize) -> Self {
        let focal = 1200.0 * size as f64 / 256.0;
        let c = size as f64 / 2.0;
        Scenario {
            camera: CameraModel::new(focal, focal, c, c, size, size).expect("valid desk camera"),
            gt_pose: Pose::new(Vector3::new(0.25, -0.35, 0.1), Vector3::new(0.0, 0.0, 400.0)),
            perturbation: Perturbation::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub image_ap: SilhouetteImage,
    pub image_lat: SilhouetteImage,
    pub init_pose: Pose,
}

/// Renders both ground-truth views and draws a perturbed initial lateral pose.
/// The AP view uses the same coupling as the solver.
pub fn make_synthetic_case(
    mesh: &TriangleMesh,
    camera: &CameraModel,
    gt_pose: &Pose,
    settings: &RenderSettings,
    seed: u64,
    perturbation: &Perturbation,
    axis_column: usize,
) -> Result<SyntheticCase, BenchError> {
    let image_lat = render_silhouette(mesh, &Projector::new(*camera, *gt_pose), settings);
    let image_ap = render_silhouette(mesh, &Projector::new(*camera, coupled_ap_pose(gt_pose, axis_column)), settings);
    for (view, image) in [("lateral", &image_lat), ("AP", &image_ap)] {
        let coverage = image.coverage();
        if coverage < MIN_COVERAGE {
            return Err(BenchError::InvisibleMesh { view, coverage });
        }
    }
    Ok(SyntheticCase {
        image_ap,
        image_lat,
        init_pose: perturbation.apply(gt_pose, seed),
    })
}

/// One (configuration, seed) registration in a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRun {
    pub configuration: Configuration,
    pub seed: u64,
    /// Error of the lateral pose.
    pub error: PoseError,
    /// Error of the AP pose, for configurations that estimate it directly.
    pub ap_error: Option<PoseError>,
    pub converged: bool,
    pub iterations: usize,
    pub failure: Option<String>,
    pub report: Option<RegistrationReport>,
}

/// Median errors of one configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub configuration: Configuration,
    pub median: PoseError,
    pub median_ap: Option<PoseError>,
    pub runs: usize,
    pub converged_runs: usize,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub seeds: Vec<u64>,
    pub runs: Vec<SweepRun>,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_error(errors: &[PoseError]) -> PoseError {
    PoseError {
        rotation_deg: median(errors.iter().map(|e| e.rotation_deg).collect()),
        translation_mm: median(errors.iter().map(|e| e.translation_mm).collect()),
        add_mm: median(errors.iter().map(|e| e.add_mm).collect()),
    }
}

fn sweep_one(
    mesh: &TriangleMesh,
    scenario: &Scenario,
    base: &RegistrationConfig,
    configuration: Configuration,
    seed: u64,
) -> SweepRun {
    let cfg = RegistrationConfig {
        configuration,
        ..*base
    };
    let failed = |failure: String, report: Option<RegistrationReport>| SweepRun {
        configuration,
        seed,
        error: PoseError::worst(),
        ap_error: None,
        converged: false,
        iterations: report.as_ref().map_or(0, |r| r.iterations_run),
        failure: Some(failure),
        report,
    };
    let case = match make_synthetic_case(
        mesh,
        &scenario.camera,
        &scenario.gt_pose,
        &cfg.render,
        seed,
        &scenario.perturbation,
        cfg.coupling_axis_column,
    ) {
        Ok(case) => case,
        Err(e) => return failed(e.to_string(), None),
    };
    match run_registration(&cfg, mesh, &scenario.camera, &case.image_ap, &case.image_lat, &case.init_pose) {
        Ok(report) => {
            let gt_ap = coupled_ap_pose(&scenario.gt_pose, cfg.coupling_axis_column);
            SweepRun {
                configuration,
                seed,
                error: PoseError::between(mesh, &report.final_pose_lat, &scenario.gt_pose),
                ap_error: (configuration == Configuration::ApOnly)
                    .then(|| PoseError::between(mesh, &report.final_pose_ap, &gt_ap)),
                converged: report.converged,
                iterations: report.iterations_run,
                failure: None,
                report: Some(report),
            }
        }
        Err(RegistrationError::NonFiniteLoss { report, .. }) => failed("non-finite loss".into(), Some(*report)),
        Err(e) => failed(e.to_string(), None),
    }
}

/// Runs every (configuration, seed) pair and aggregates medians per
/// configuration. Runs execute in parallel; results are ordered by
/// (configuration, seed) as given. Failed runs count as infinite error.
pub fn run_sweep(
    mesh: &TriangleMesh,
    scenario: &Scenario,
    base: &RegistrationConfig,
    configurations: &[Configuration],
    seeds: &[u64],
) -> Result<SweepResult, BenchError> {
    if configurations.is_empty() || seeds.is_empty() {
        return Err(BenchError::EmptySweep);
    }
    let jobs: Vec<(Configuration, u64)> = configurations
        .iter()
        .flat_map(|&c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let runs: Vec<SweepRun> = jobs
        .par_iter()
        .map(|&(c, s)| sweep_one(mesh, scenario, base, c, s))
        .collect();

    let rows = configurations
        .iter()
        .map(|&configuration| {
            let mine: Vec<&SweepRun> = runs.iter().filter(|r| r.configuration == configuration).collect();
            let errors: Vec<PoseError> = mine.iter().map(|r| r.error).collect();
            let ap_errors: Vec<PoseError> = mine.iter().filter_map(|r| r.ap_error).collect();
            SweepRow {
                configuration,
                median: median_error(&errors),
                median_ap: (!ap_errors.is_empty()).then(|| median_error(&ap_errors)),
                runs: mine.len(),
                converged_runs: mine.iter().filter(|r| r.converged).count(),
                failed_runs: mine.iter().filter(|r| r.failure.is_some()).count(),
            }
        })
        .collect();

    Ok(SweepResult {
        rows,
        seeds: seeds.to_vec(),
        runs,
    })
}

#[derive(Serialize)]
struct CsvRecord {
    configuration: Configuration,
    seed: u64,
    rotation_deg: f64,
    translation_mm: f64,
    add_mm: f64,
    converged: bool,
    iterations: usize,
}

impl SweepResult {
    pub fn row(&self, configuration: Configuration) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.configuration == configuration)
    }

    /// One line per run: `configuration,seed,rotation_deg,translation_mm,add_mm,converged,iterations`.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for run in &self.runs {
            out.serialize(CsvRecord {
                configuration: run.configuration,
                seed: run.seed,
                rotation_deg: run.error.rotation_deg,
                translation_mm: run.error.translation_mm,
                add_mm: run.error.add_mm,
                converged: run.converged,
                iterations: run.iterations,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    /// Medians per configuration, without the per-run reports.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "seeds": self.seeds,
            "configurations": self.rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn rotation_error_examples() {
        let r = exp_so3(&Vector3::new(0.3, 0.1, -0.2));
        assert_eq!(rotation_error_deg(&r, &r), 0.0);
        let quarter = exp_so3(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert_relative_eq!(rotation_error_deg(&Rotation::identity(), &quarter), 90.0, epsilon = 1e-12);
        assert_relative_eq!(
            rotation_error_deg(&Rotation::identity(), &exp_so3(&Vector3::new(0.1, 0.0, 0.0))),
            5.729577951308232,
            epsilon = 1e-10
        );
    }

    #[test]
    fn translation_error_examples() {
        let t = Vector3::new(4.0, -1.0, 2.0);
        assert_eq!(translation_error_mm(&t, &t), 0.0);
        assert_eq!(translation_error_mm(&Vector3::new(1.0, 2.0, 2.0), &Vector3::zeros()), 3.0);
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let gt = Scenario::desk().gt_pose;
        assert_eq!(Perturbation::none().apply(&gt, 42), gt);
    }

    #[test]
    fn perturbation_stays_in_range() {
        let gt = Scenario::desk().gt_pose;
        let p = Perturbation::default();
        for seed in 0..200 {
            let init = p.apply(&gt, seed);
            assert!(rotation_error_deg(&init.rotation(), &gt.rotation()) <= 10.0 + 1e-9);
            let d = init.translation - gt.translation;
            assert!(d.iter().all(|c| c.abs() <= 10.0));
            assert_eq!(init, p.apply(&gt, seed));
        }
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(vec![1.0, f64::INFINITY, 2.0]), 2.0);
    }

    #[test]
    fn empty_sweep_is_rejected() {
        let mesh = crate::phantom::small_tube();
        let s = Scenario::desk_sized(32);
        let cfg = RegistrationConfig::default();
        assert!(matches!(run_sweep(&mesh, &s, &cfg, &[], &[0]), Err(BenchError::EmptySweep)));
        assert!(matches!(run_sweep(&mesh, &s, &cfg, &[Configuration::LatOnly], &[]), Err(BenchError::EmptySweep)));
    }
}
