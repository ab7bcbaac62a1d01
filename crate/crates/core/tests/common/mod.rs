//! Finite-difference oracles shared by the integration tests.
#![allow(dead_code)]

use angioreg::geometry::{perpendicular_coupling, CameraModel, Pose, Projector};
use angioreg::render::{render_with_pose_gradient, RenderSettings, SilhouetteImage};
use angioreg::TriangleMesh;
use nalgebra::Vector6;

pub const FD_STEP: f64 = 1e-4;

/// Central differences of `f` along the six tangent directions of `pose`.
pub fn central_difference(pose: &Pose, f: impl Fn(&Pose) -> f64) -> Vector6<f64> {
    Vector6::from_fn(|k, _| {
        let mut step = Vector6::zeros();
        step[k] = FD_STEP;
        (f(&pose.retract(&step)) - f(&pose.retract(&-step))) / (2.0 * FD_STEP)
    })
}

/// Worst componentwise relative error; components where both sides are
/// below `1e-14` count as exact.
pub fn worst_relative_error(analytic: &Vector6<f64>, numeric: &Vector6<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < 1e-14 {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

pub fn view_loss(mesh: &TriangleMesh, camera: &CameraModel, pose: &Pose, target: &SilhouetteImage, settings: &RenderSettings) -> f64 {
    render_with_pose_gradient(mesh, &Projector::new(*camera, *pose), target, settings)
        .expect("target matches camera")
        .loss
}

/// The coupled loss with `W` held at its value for `frozen_at`.
#[allow(clippy::too_many_arguments)]
pub fn coupled_loss_frozen_w(
    mesh: &TriangleMesh,
    camera: &CameraModel,
    pose: &Pose,
    frozen_at: &Pose,
    image_lat: &SilhouetteImage,
    image_ap: &SilhouetteImage,
    axis_column: usize,
    settings: &RenderSettings,
) -> f64 {
    let w = perpendicular_coupling(&frozen_at.rotation(), axis_column);
    let ap = Pose::from_rotation(&(w * pose.rotation()), pose.translation);
    view_loss(mesh, camera, pose, image_lat, settings) + view_loss(mesh, camera, &ap, image_ap, settings)
}
