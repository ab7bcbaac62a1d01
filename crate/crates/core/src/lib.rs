//! Two-view 3D/2D registration of angiograms.
//!
//! A vascular triangle mesh is registered to a pair of perpendicular X-ray
//! silhouettes (anteroposterior and lateral) by rendering soft silhouettes of
//! the mesh, comparing them to the segmented images and refining the
//! projector pose by gradient descent.
//!
//! - [`geometry`]: rotations, poses, the pinhole projector and the
//!   quarter-turn coupling between the two views.
//! - [`mesh`]: OBJ meshes, rigid transforms and the ADD metric.
//! - [`render`]: the differentiable soft-silhouette renderer.
//! - [`registration`]: the losses, the optimizer and the five acquisition
//!   configurations.
//! - [`metrics`]: pose errors, synthetic cases and configuration sweeps.
//! - [`ingest`]: grayscale image IO, Otsu thresholding and binarization.
//! - [`cli`]: the `angioreg` command-line tool.

pub mod cli;
pub mod geometry;
pub mod ingest;
pub mod mesh;
pub mod metrics;
pub mod phantom;
pub mod registration;
pub mod render;

pub use geometry::{CameraModel, Pose, Projector, Rotation};
pub use mesh::TriangleMesh;
pub use metrics::{PoseError, Scenario};
pub use registration::{Configuration, RegistrationConfig, RegistrationReport};
pub use render::{RenderSettings, SilhouetteImage};
