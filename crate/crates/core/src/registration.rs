//! Pose estimation from one or two perpendicular silhouettes.
//!
//! The lateral pose is the free variable. The anteroposterior projector is
//! tied to it by a quarter turn `W` about one of the lateral rotation's
//! columns (see [`perpendicular_coupling`]) and shares its translation, so a
//! two-view loss can be minimized over six parameters:
//!
//! ```text
//! L(R, t) = λ₁ mse(I_lat, f(R, t)) + λ₂ mse(I_ap, f(W R, t))
//! ```
//!
//! Single-view AP runs instead optimize an independent AP pose.

use std::fmt;
use std::io;
use std::str::FromStr;

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{decouple_perpendicular, perpendicular_coupling, CameraModel, Pose, Projector};
use crate::mesh::TriangleMesh;
use crate::render::{render_with_pose_gradient, RenderError, RenderSettings, SilhouetteImage};

/// Consecutive small loss changes required to declare convergence.
pub const PATIENCE: usize = 10;
/// Fraction of `convergence_tol` below which a step's predicted effect is
/// ignored.
pub const NEGLIGIBLE_FRACTION: f64 = 1e-3;
/// Iterations per block when deciding whether the loss went up.
pub const HALVING_WINDOW: usize = 10;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("invalid registration config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        report: Box<RegistrationReport>,
    },
}

/// Acquisition sequences compared in the evaluation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Configuration {
    ApThenLat,
    ApOnly,
    ApPlusLat,
    LatThenAp,
    LatOnly,
}

impl Configuration {
    pub const ALL: [Configuration; 5] = [
        Configuration::ApThenLat,
        Configuration::ApOnly,
        Configuration::ApPlusLat,
        Configuration::LatThenAp,
        Configuration::LatOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Configuration::ApThenLat => "AP_THEN_LAT",
            Configuration::ApOnly => "AP_ONLY",
            Configuration::ApPlusLat => "AP_PLUS_LAT",
            Configuration::LatThenAp => "LAT_THEN_AP",
            Configuration::LatOnly => "LAT_ONLY",
        }
    }

    /// True for the configurations that eventually use both images.
    pub fn is_two_view(self) -> bool {
        !matches!(self, Configuration::ApOnly | Configuration::LatOnly)
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Configuration {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim().to_ascii_uppercase().replace('-', "_");
        Configuration::ALL
            .into_iter()
            .find(|c| c.as_str() == wanted)
            .ok_or_else(|| format!("unknown configuration '{s}'"))
    }
}

/// Weight of the AP term as a function of the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda2Schedule {
    Constant(f64),
    /// 0 up to `start_iter`, rising linearly to `weight` at `end_iter`.
    LinearRamp {
        start_iter: usize,
        end_iter: usize,
        #[serde(default = "unit_weight")]
        weight: f64,
    },
}

fn unit_weight() -> f64 {
    1.0
}

pub fn lambda2_at(schedule: &Lambda2Schedule, iter: usize) -> f64 {
    match *schedule {
        Lambda2Schedule::Constant(w) => w,
        Lambda2Schedule::LinearRamp {
            start_iter,
            end_iter,
            weight,
        } => {
            if iter <= start_iter {
                if iter == start_iter && end_iter <= start_iter {
                    weight
                } else {
                    0.0
                }
            } else if iter >= end_iter {
                weight
            } else {
                weight * (iter - start_iter) as f64 / (end_iter - start_iter) as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub configuration: Configuration,
    pub max_iters: usize,
    pub learning_rate_rot: f64,
    pub learning_rate_trans: f64,
    pub lambda1: f64,
    pub lambda2_schedule: Lambda2Schedule,
    pub convergence_tol: f64,
    pub coupling_axis_column: usize,
    pub coupling_gradient: CouplingGradient,
    pub render: RenderSettings,
}

/// How the AP term of the coupled loss is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingGradient {
    /// Includes the dependence of `W` on the lateral rotation. Since
    /// `W(R) R = R Q` for a fixed quarter turn `Q`, a left step on the
    /// lateral rotation is the same left step on the AP rotation.
    #[default]
    Exact,
    /// Treats `W` as a constant: a left step `ω` becomes `W ω` on the AP side.
    Frozen,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            configuration: Configuration::ApPlusLat,
            max_iters: 500,
            learning_rate_rot: 1e-2,
            learning_rate_trans: 1.0,
            lambda1: 1.0,
            lambda2_schedule: Lambda2Schedule::LinearRamp {
                start_iter: 0,
                end_iter: 250,
                weight: 1.0,
            },
            convergence_tol: 1e-9,
            coupling_axis_column: 1,
            coupling_gradient: CouplingGradient::Exact,
            render: RenderSettings::default(),
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let fail = |m: String| Err(RegistrationError::InvalidConfig(m));
        if self.max_iters == 0 {
            return fail("max_iters must be at least 1".into());
        }
        if !(positive(self.learning_rate_rot) && positive(self.learning_rate_trans)) {
            return fail("learning rates must be positive and finite".into());
        }
        if !non_negative(self.lambda1) {
            return fail(format!("lambda1 must be non-negative, got {}", self.lambda1));
        }
        let w = match self.lambda2_schedule {
            Lambda2Schedule::Constant(w) => w,
            Lambda2Schedule::LinearRamp { weight, .. } => weight,
        };
        if !non_negative(w) {
            return fail(format!("lambda2 weight must be non-negative, got {w}"));
        }
        if !non_negative(self.convergence_tol) {
            return fail("convergence_tol must be non-negative".into());
        }
        if self.coupling_axis_column > 2 {
            return fail(format!("coupling_axis_column must be 0, 1 or 2, got {}", self.coupling_axis_column));
        }
        self.render.validate()?;
        Ok(())
    }
}

// Both reject NaN and infinities.
fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

fn non_negative(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub final_pose_lat: Pose,
    pub final_pose_ap: Pose,
    pub loss_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl RegistrationReport {
    pub fn write_loss_trace_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["iteration", "loss"])?;
        for (i, loss) in self.loss_trace.iter().enumerate() {
            out.write_record([i.to_string(), format!("{loss:e}")])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// AP pose implied by a lateral pose.
pub fn coupled_ap_pose(lateral: &Pose, axis_column: usize) -> Pose {
    let r = lateral.rotation();
    let w = perpendicular_coupling(&r, axis_column);
    Pose::from_rotation(&(w * r), lateral.translation)
}

/// Lateral pose implied by an AP pose; inverse of [`coupled_ap_pose`].
pub fn lateral_from_ap(ap: &Pose, axis_column: usize) -> Pose {
    Pose::from_rotation(&decouple_perpendicular(&ap.rotation(), axis_column), ap.translation)
}

/// A weighted loss with its gradient and the frames rendered for it.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Vector6<f64>,
    /// Unweighted per-view losses, `None` when the view's weight is zero.
    pub lat_loss: Option<f64>,
    pub ap_loss: Option<f64>,
    pub lat_render: Option<SilhouetteImage>,
    pub ap_render: Option<SilhouetteImage>,
}

/// Rodrigues-coupled two-view loss over the lateral pose.
///
/// `W` is recomputed from the lateral rotation but treated as constant when
/// differentiating. A view with zero weight is not rendered.
#[allow(clippy::too_many_arguments)]
pub fn coupled_loss(
    pose_lat: &Pose,
    mesh: &TriangleMesh,
    camera: &CameraModel,
    image_lat: &SilhouetteImage,
    image_ap: &SilhouetteImage,
    lambda1: f64,
    lambda2: f64,
    axis_column: usize,
    settings: &RenderSettings,
) -> Result<LossEval, RenderError> {
    coupled_loss_with(
        pose_lat,
        mesh,
        camera,
        image_lat,
        image_ap,
        (lambda1, lambda2),
        axis_column,
        CouplingGradient::Frozen,
        settings,
    )
}

/// [`coupled_loss`] with a choice of how the AP term is differentiated.
#[allow(clippy::too_many_arguments)]
pub fn coupled_loss_with(
    pose_lat: &Pose,
    mesh: &TriangleMesh,
    camera: &CameraModel,
    image_lat: &SilhouetteImage,
    image_ap: &SilhouetteImage,
    (lambda1, lambda2): (f64, f64),
    axis_column: usize,
    gradient: CouplingGradient,
    settings: &RenderSettings,
) -> Result<LossEval, RenderError> {
    image_lat.check_camera(camera)?;
    image_ap.check_camera(camera)?;
    let mut eval = LossEval {
        loss: 0.0,
        grad: Vector6::zeros(),
        lat_loss: None,
        ap_loss: None,
        lat_render: None,
        ap_render: None,
    };
    if lambda1 != 0.0 {
        let lat = render_with_pose_gradient(mesh, &Projector::new(*camera, *pose_lat), image_lat, settings)?;
        eval.loss += lambda1 * lat.loss;
        eval.grad += lambda1 * lat.grad;
        eval.lat_loss = Some(lat.loss);
        eval.lat_render = Some(lat.rendered);
    }
    if lambda2 != 0.0 {
        let r = pose_lat.rotation();
        let w = perpendicular_coupling(&r, axis_column);
        let pose_ap = Pose::from_rotation(&(w * r), pose_lat.translation);
        let ap = render_with_pose_gradient(mesh, &Projector::new(*camera, pose_ap), image_ap, settings)?;
        let mut grad = ap.grad;
        if gradient == CouplingGradient::Frozen {
            let rot: Vector3<f64> = w.matrix().transpose() * ap.grad.fixed_rows::<3>(0);
            grad.fixed_rows_mut::<3>(0).copy_from(&rot);
        }
        eval.loss += lambda2 * ap.loss;
        eval.grad += lambda2 * grad;
        eval.ap_loss = Some(ap.loss);
        eval.ap_render = Some(ap.rendered);
    }
    Ok(eval)
}

/// Single-view loss of an independent AP pose.
pub fn ap_view_loss(
    pose_ap: &Pose,
    mesh: &TriangleMesh,
    camera: &CameraModel,
    image_ap: &SilhouetteImage,
    settings: &RenderSettings,
) -> Result<LossEval, RenderError> {
    let ap = render_with_pose_gradient(mesh, &Projector::new(*camera, *pose_ap), image_ap, settings)?;
    Ok(LossEval {
        loss: ap.loss,
        grad: ap.grad,
        lat_loss: None,
        ap_loss: Some(ap.loss),
        lat_render: None,
        ap_render: Some(ap.rendered),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoViewLoss {
    pub loss: f64,
    pub grad_ap: Vector6<f64>,
    pub grad_lat: Vector6<f64>,
}

/// Sum of the two independent per-view mean squared residuals.
pub fn two_view_loss(
    pose_ap: &Pose,
    pose_lat: &Pose,
    mesh: &TriangleMesh,
    camera: &CameraModel,
    image_ap: &SilhouetteImage,
    image_lat: &SilhouetteImage,
    settings: &RenderSettings,
) -> Result<TwoViewLoss, RenderError> {
    image_ap.check_camera(camera)?;
    image_lat.check_camera(camera)?;
    let ap = render_with_pose_gradient(mesh, &Projector::new(*camera, *pose_ap), image_ap, settings)?;
    let lat = render_with_pose_gradient(mesh, &Projector::new(*camera, *pose_lat), image_lat, settings)?;
    Ok(TwoViewLoss {
        loss: ap.loss + lat.loss,
        grad_ap: ap.grad,
        grad_lat: lat.grad,
    })
}

/// Adam on the left-tangent pose step, with separate rotation and translation
/// rates. The caller decides when to halve the rates.
#[derive(Debug, Clone)]
pub struct PoseOptimizer {
    rates: Vector6<f64>,
    m: Vector6<f64>,
    v: Vector6<f64>,
    steps: i32,
}

impl PoseOptimizer {
    pub fn new(rate_rot: f64, rate_trans: f64) -> Self {
        PoseOptimizer {
            rates: Vector6::new(rate_rot, rate_rot, rate_rot, rate_trans, rate_trans, rate_trans),
            m: Vector6::zeros(),
            v: Vector6::zeros(),
            steps: 0,
        }
    }

    pub fn halve_rates(&mut self) {
        self.rates *= 0.5;
    }

    pub fn rates(&self) -> &Vector6<f64> {
        &self.rates
    }

    /// Returns the tangent step to apply with [`Pose::retract`].
    pub fn step(&mut self, grad: &Vector6<f64>) -> Vector6<f64> {
        self.steps += 1;
        self.m = BETA1 * self.m + (1.0 - BETA1) * grad;
        self.v = BETA2 * self.v + (1.0 - BETA2) * grad.component_mul(grad);
        let m_hat = self.m / (1.0 - BETA1.powi(self.steps));
        let v_hat = self.v / (1.0 - BETA2.powi(self.steps));
        Vector6::from_fn(|i, _| -self.rates[i] * m_hat[i] / (v_hat[i].sqrt() + ADAM_EPS))
    }
}

/// What a phase optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Variable {
    Lateral { ap_term: bool },
    IndependentAp,
}

#[derive(Debug, Clone, Copy)]
struct Phase {
    variable: Variable,
    /// Iterations at which the phase ends at the latest.
    until: usize,
}

fn phases(cfg: &RegistrationConfig) -> Vec<Phase> {
    let half = cfg.max_iters.div_ceil(2);
    let all = cfg.max_iters;
    let lat = |ap_term, until| Phase {
        variable: Variable::Lateral { ap_term },
        until,
    };
    let ap = |until| Phase {
        variable: Variable::IndependentAp,
        until,
    };
    match cfg.configuration {
        Configuration::LatOnly => vec![lat(false, all)],
        Configuration::ApOnly => vec![ap(all)],
        Configuration::ApPlusLat => vec![lat(true, all)],
        Configuration::LatThenAp => vec![lat(false, half), lat(true, all)],
        Configuration::ApThenLat => vec![ap(half), lat(true, all)],
    }
}

/// One recorded iteration, handed to the observer of
/// [`run_registration_with`].
pub struct IterationFrame<'a> {
    pub iteration: usize,
    pub loss: f64,
    /// `(rendered, target)` for each view rendered at this iteration.
    pub lat: Option<(&'a SilhouetteImage, &'a SilhouetteImage)>,
    pub ap: Option<(&'a SilhouetteImage, &'a SilhouetteImage)>,
}

pub fn run_registration(
    cfg: &RegistrationConfig,
    mesh: &TriangleMesh,
    camera: &CameraModel,
    image_ap: &SilhouetteImage,
    image_lat: &SilhouetteImage,
    init_pose: &Pose,
) -> Result<RegistrationReport, RegistrationError> {
    run_registration_with(cfg, mesh, camera, image_ap, image_lat, init_pose, |_| {})
}

/// [`run_registration`] with a callback invoked after every loss evaluation.
///
/// `init_pose` is the lateral pose; AP-first configurations start from the
/// AP pose coupled to it.
pub fn run_registration_with(
    cfg: &RegistrationConfig,
    mesh: &TriangleMesh,
    camera: &CameraModel,
    image_ap: &SilhouetteImage,
    image_lat: &SilhouetteImage,
    init_pose: &Pose,
    mut observer: impl FnMut(&IterationFrame<'_>),
) -> Result<RegistrationReport, RegistrationError> {
    cfg.validate()?;
    camera.validate().map_err(|e| RegistrationError::InvalidConfig(e.to_string()))?;
    image_ap.check_camera(camera)?;
    image_lat.check_camera(camera)?;

    let axis = cfg.coupling_axis_column;
    let mut lateral = *init_pose;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iteration = 0;

    let plan = phases(cfg);
    for (index, phase) in plan.iter().enumerate() {
        let mut pose = match phase.variable {
            Variable::Lateral { .. } => lateral,
            Variable::IndependentAp => coupled_ap_pose(&lateral, axis),
        };
        let mut optimizer = PoseOptimizer::new(cfg.learning_rate_rot, cfg.learning_rate_trans);
        // Unweighted per-view losses of this phase, so that comparisons are
        // made at the current weights while λ₂ ramps.
        let mut history: Vec<(f64, f64)> = Vec::new();
        let mut stall = 0;
        converged = false;

        while iteration < phase.until {
            let (lambda1, lambda2) = match phase.variable {
                Variable::Lateral { ap_term: false } => (cfg.lambda1, 0.0),
                Variable::Lateral { ap_term: true } => (cfg.lambda1, lambda2_at(&cfg.lambda2_schedule, iteration)),
                Variable::IndependentAp => (0.0, 1.0),
            };
            let eval = match phase.variable {
                Variable::Lateral { .. } => coupled_loss_with(
                    &pose,
                    mesh,
                    camera,
                    image_lat,
                    image_ap,
                    (lambda1, lambda2),
                    axis,
                    cfg.coupling_gradient,
                    &cfg.render,
                )?,
                Variable::IndependentAp => ap_view_loss(&pose, mesh, camera, image_ap, &cfg.render)?,
            };

            if !eval.loss.is_finite() || !eval.grad.iter().all(|g| g.is_finite()) {
                let report = RegistrationReport {
                    final_pose_lat: lateral_of(phase.variable, &pose, axis),
                    final_pose_ap: ap_of(phase.variable, &pose, axis),
                    iterations_run: trace.len(),
                    loss_trace: trace,
                    converged: false,
                };
                return Err(RegistrationError::NonFiniteLoss {
                    iteration,
                    report: Box::new(report),
                });
            }

            trace.push(eval.loss);
            observer(&IterationFrame {
                iteration,
                loss: eval.loss,
                lat: eval.lat_render.as_ref().map(|r| (r, image_lat)),
                ap: eval.ap_render.as_ref().map(|r| (r, image_ap)),
            });
            iteration += 1;

            let views = (eval.lat_loss.unwrap_or(0.0), eval.ap_loss.unwrap_or(0.0));
            let weighted = |(lat, ap): (f64, f64)| lambda1 * lat + lambda2 * ap;
            if let Some(&last) = history.last() {
                let delta = eval.loss - weighted(last);
                stall = if delta.abs() < cfg.convergence_tol { stall + 1 } else { 0 };
            }
            history.push(views);
            if loss_went_up(&history, weighted) {
                optimizer.halve_rates();
            }

            if stall >= PATIENCE || negligible(&eval.grad, optimizer.rates(), cfg.convergence_tol) {
                converged = true;
                break;
            }
            let step = optimizer.step(&eval.grad);
            pose = pose.retract(&step);
        }

        lateral = lateral_of(phase.variable, &pose, axis);
        if index + 1 < plan.len() {
            log::debug!("phase {index} finished after {iteration} iterations (converged: {converged})");
        }
    }

    Ok(RegistrationReport {
        final_pose_lat: lateral,
        final_pose_ap: coupled_ap_pose(&lateral, axis),
        iterations_run: trace.len(),
        loss_trace: trace,
        converged,
    })
}

/// True when even a full-rate step is predicted to change the loss by less
/// than [`NEGLIGIBLE_FRACTION`] of the tolerance. Adam normalizes gradient
/// magnitude, so without this rate-limited noise (say, a 1e-16 gradient left
/// by a pose round trip) would still take full-size steps.
fn negligible(grad: &Vector6<f64>, rates: &Vector6<f64>, tol: f64) -> bool {
    *grad == Vector6::zeros() || grad.abs().dot(rates) < NEGLIGIBLE_FRACTION * tol
}

/// Adam steps overshoot constantly, so single-step increases say little.
/// At the end of every block of [`HALVING_WINDOW`] iterations, the loss
/// counts as increased when the block's mean exceeds the previous block's.
fn loss_went_up(history: &[(f64, f64)], weighted: impl Fn((f64, f64)) -> f64) -> bool {
    let n = history.len();
    if !n.is_multiple_of(HALVING_WINDOW) || n < 2 * HALVING_WINDOW {
        return false;
    }
    let sum = |block: &[(f64, f64)]| block.iter().map(|&v| weighted(v)).sum::<f64>();
    sum(&history[n - HALVING_WINDOW..]) > sum(&history[n - 2 * HALVING_WINDOW..n - HALVING_WINDOW])
}

fn lateral_of(variable: Variable, pose: &Pose, axis: usize) -> Pose {
    match variable {
        Variable::Lateral { .. } => *pose,
        Variable::IndependentAp => lateral_from_ap(pose, axis),
    }
}

fn ap_of(variable: Variable, pose: &Pose, axis: usize) -> Pose {
    match variable {
        Variable::Lateral { .. } => coupled_ap_pose(pose, axis),
        Variable::IndependentAp => *pose,
    }
}
