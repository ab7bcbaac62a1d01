//! Rotations, rigid poses and the pinhole projector.
//!
//! Poses map model coordinates (mm) into the projector frame:
//! `x_cam = R x + t`. The optimizer works in left-tangent coordinates
//! `(ω, τ)`, i.e. a perturbed pose is `(exp(ω) R, t + τ)`, so every
//! gradient in this crate is with respect to that 6-vector (rotation first).

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix2x6, Matrix3, Matrix3x4, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rotation angle below which `exp_so3` switches to its Taylor expansion.
const EXP_TAYLOR_THRESHOLD: f64 = 1e-8;
/// Cosine of the angle above which `log_so3` extracts the axis from the
/// symmetric part of the matrix.
const LOG_NEAR_PI_COS: f64 = -0.99;
/// Tolerance on the norm of a rotation axis.
const UNIT_AXIS_TOL: f64 = 1e-6;
/// Points closer than this to the projector plane are treated as behind it.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation axis has norm {norm}, expected 1")]
    NonUnitAxis { norm: f64 },
    #[error("point is behind the projector (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("matrix is not a rotation (orthonormality error {orthonormality}, det {det})")]
    NotARotation { orthonormality: f64, det: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] applied to the skew part of `m`.
fn vee_skew(m: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and orientation to 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let orthonormality = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if orthonormality < 1e-9 && (det - 1.0).abs() < 1e-9 {
            Ok(Rotation(m))
        } else {
            Err(GeometryError::NotARotation { orthonormality, det })
        }
    }

    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn exp(rotvec: &Vector3<f64>) -> Self {
        exp_so3(rotvec)
    }

    pub fn log(&self) -> Vector3<f64> {
        log_so3(self)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Geodesic distance to `other` in radians, in `[0, π]`.
    ///
    /// Equal to `arccos((trace(selfᵀ other) − 1) / 2)`, evaluated through the
    /// log map, which stays accurate for small angles.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        log_so3(&Rotation(self.0.transpose() * other.0)).norm()
    }

    pub fn column(&self, index: usize) -> Vector3<f64> {
        self.0.column(index).into_owned()
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Exponential map from an axis-angle vector to a rotation (Rodrigues).
pub fn exp_so3(rotvec: &Vector3<f64>) -> Rotation {
    let theta2 = rotvec.norm_squared();
    let k = hat(rotvec);
    let k2 = k * k;
    if theta2.sqrt() < EXP_TAYLOR_THRESHOLD {
        return Rotation(Matrix3::identity() + k + 0.5 * k2);
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Rotation(Matrix3::identity() + a * k + b * k2)
}

/// Logarithm map, the inverse of [`exp_so3`] with angle in `[0, π]`.
pub fn log_so3(rotation: &Rotation) -> Vector3<f64> {
    let m = rotation.matrix();
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = vee_skew(m);
    let sin = skew.norm();
    let theta = sin.atan2(cos);

    if cos > LOG_NEAR_PI_COS {
        // sin(θ)/θ → 1 as θ → 0.
        let scale = if theta < 1e-8 {
            1.0 + theta * theta / 6.0
        } else {
            theta / sin
        };
        return skew * scale;
    }

    // Near a half turn the skew part vanishes; read the axis from the
    // symmetric part, (R + Rᵀ)/2 = cos I + (1 − cos) a aᵀ.
    let sym = (m + m.transpose()) * 0.5;
    let one_minus_cos = 1.0 - cos;
    let diag = Vector3::new(sym[(0, 0)], sym[(1, 1)], sym[(2, 2)]);
    let i = diag.imax();
    let ai = ((diag[i] - cos) / one_minus_cos).max(0.0).sqrt();
    let mut axis = Vector3::zeros();
    for j in 0..3 {
        axis[j] = if j == i {
            ai
        } else {
            sym[(i, j)] / (one_minus_cos * ai)
        };
    }
    axis.normalize_mut();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// General Rodrigues formula `W = I + sin θ [a]× + (1 − cos θ)[a]×²`.
pub fn rodrigues_general(axis: &Vector3<f64>, theta: f64) -> Result<Rotation, GeometryError> {
    let norm = axis.norm();
    if (norm - 1.0).abs() > UNIT_AXIS_TOL {
        return Err(GeometryError::NonUnitAxis { norm });
    }
    let k = hat(axis);
    Ok(Rotation(
        Matrix3::identity() + theta.sin() * k + (1.0 - theta.cos()) * (k * k),
    ))
}

/// The quarter-turn `W = I + [a]× + [a]×²` about the (normalized) column
/// `axis_column` of `lateral`. `W · lateral` is the perpendicular projector's
/// orientation.
///
/// # Panics
///
/// Panics if `axis_column > 2`.
pub fn perpendicular_coupling(lateral: &Rotation, axis_column: usize) -> Rotation {
    assert!(axis_column < 3, "axis column {axis_column} out of range");
    let axis = lateral.column(axis_column).normalize();
    let k = hat(&axis);
    Rotation(Matrix3::identity() + k + k * k)
}

/// Recovers the lateral orientation from a perpendicular one.
///
/// `W` fixes its own axis, so the axis column of `W R` equals that of `R` and
/// the coupling can be undone exactly.
pub fn decouple_perpendicular(perpendicular: &Rotation, axis_column: usize) -> Rotation {
    perpendicular_coupling(perpendicular, axis_column).inverse() * *perpendicular
}

/// Rigid pose as axis-angle rotation plus translation (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotvec: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    /// Builds a pose with the rotation vector wrapped into `‖rotvec‖ ≤ π`.
    pub fn new(rotvec: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotvec: canonical_rotvec(rotvec),
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose {
            rotvec: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_rotation(rotation: &Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotvec: log_so3(rotation),
            translation,
        }
    }

    pub fn rotation(&self) -> Rotation {
        exp_so3(&self.rotvec)
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().matrix() * x + self.translation
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &Pose) -> Pose {
        let r = self.rotation();
        Pose::from_rotation(
            &(r * inner.rotation()),
            r.matrix() * inner.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().inverse();
        Pose::from_rotation(&rt, -(rt.matrix() * self.translation))
    }

    /// Applies a left-tangent step `(ω, τ)`: `(exp(ω) R, t + τ)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let omega = delta.fixed_rows::<3>(0).into_owned();
        let tau = delta.fixed_rows::<3>(3).into_owned();
        Pose::from_rotation(&(exp_so3(&omega) * self.rotation()), self.translation + tau)
    }

    pub fn is_finite(&self) -> bool {
        self.rotvec.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

fn canonical_rotvec(v: Vector3<f64>) -> Vector3<f64> {
    let theta = v.norm();
    if theta <= PI {
        return v;
    }
    let wrapped = theta - 2.0 * PI * (theta / (2.0 * PI)).round();
    v * (wrapped / theta)
}

/// Pinhole intrinsics and image size, in pixels. Pixel `(col, row)` has its
/// center at `(col + 0.5, row + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let camera = CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("empty image".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// A projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// Camera intrinsics plus the pose of the model in the projector frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projector {
    pub camera: CameraModel,
    pub pose: Pose,
}

impl Projector {
    pub fn new(camera: CameraModel, pose: Pose) -> Self {
        Projector { camera, pose }
    }

    /// `P = K [R | t]`.
    pub fn matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(self.pose.rotation().matrix());
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.pose.translation);
        self.camera.intrinsics() * rt
    }
}

fn project_camera_point(camera: &CameraModel, pc: &Vector3<f64>) -> Result<Projection, GeometryError> {
    if pc.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera { depth: pc.z });
    }
    Ok(Projection {
        pixel: Vector2::new(camera.fx * pc.x / pc.z + camera.cx, camera.fy * pc.y / pc.z + camera.cy),
        depth: pc.z,
    })
}

pub fn project_point(proj: &Projector, x: &Vector3<f64>) -> Result<Projection, GeometryError> {
    project_camera_point(&proj.camera, &proj.pose.transform_point(x))
}

/// Jacobian of the pixel coordinates of `x` with respect to the left-tangent
/// pose parameters `(ω, τ)`.
pub fn project_point_jacobian(proj: &Projector, x: &Vector3<f64>) -> Result<Matrix2x6<f64>, GeometryError> {
    let rotated = proj.pose.rotation().matrix() * x;
    point_jacobian(&proj.camera, &rotated, &(rotated + proj.pose.translation))
}

/// Shared by the renderer, which already has `R x` and `R x + t` at hand.
pub(crate) fn point_jacobian(
    camera: &CameraModel,
    rotated: &Vector3<f64>,
    pc: &Vector3<f64>,
) -> Result<Matrix2x6<f64>, GeometryError> {
    if pc.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera { depth: pc.z });
    }
    let inv_z = 1.0 / pc.z;
    let d_pixel = nalgebra::Matrix2x3::new(
        camera.fx * inv_z,
        0.0,
        -camera.fx * pc.x * inv_z * inv_z,
        0.0,
        camera.fy * inv_z,
        -camera.fy * pc.y * inv_z * inv_z,
    );
    // d(exp(ω) R x)/dω at ω = 0 is −[R x]×.
    let d_rot = d_pixel * (-hat(rotated));
    let mut jac = Matrix2x6::zeros();
    jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_rot);
    jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_pixel);
    Ok(jac)
}
