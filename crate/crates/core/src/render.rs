//! Soft silhouette rasterization and its pose gradient.
//!
//! Every triangle contributes an occupancy `o = w(d) · logistic(−d / sigma)`
//! to each pixel within `band`, where `d` is the signed 2D distance from the
//! pixel center to the projected triangle (negative inside). Contributions are
//! merged as a probabilistic union, `S = 1 − Π (1 − o)`.
//!
//! `w` is 1 up to `band − sigma` and falls to 0 at `band` with a smoothstep,
//! so truncating the support does not make the loss discontinuous.
//!
//! The image is processed in square tiles. Each tile owns its pixels and its
//! own gradient accumulators; tile results are reduced in tile order, so the
//! output does not depend on how tiles are scheduled.

use nalgebra::{Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{point_jacobian, CameraModel, Projector, MIN_DEPTH};
use crate::mesh::TriangleMesh;

const TILE: usize = 16;
/// Projected triangles with a smaller area (px²) are skipped.
const MIN_SCREEN_AREA: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("dimension mismatch: image is {got_width}x{got_height}, camera expects {width}x{height}")]
    DimensionMismatch {
        width: usize,
        height: usize,
        got_width: usize,
        got_height: usize,
    },
    #[error("invalid render settings: {0}")]
    InvalidSettings(String),
    #[error("silhouette value {value} at index {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f64 },
}

/// Dense row-major occupancy image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SilhouetteImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, RenderError> {
        if values.len() != width * height {
            return Err(RenderError::DimensionMismatch {
                width,
                height,
                got_width: values.len(),
                got_height: 1,
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(RenderError::ValueOutOfRange { index, value });
        }
        Ok(SilhouetteImage { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        SilhouetteImage {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Binary mask of `value > threshold`.
    pub fn harden(&self, threshold: f64) -> SilhouetteImage {
        SilhouetteImage {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Fraction of pixels with occupancy above one half.
    pub fn coverage(&self) -> f64 {
        self.values.iter().filter(|&&v| v > 0.5).count() as f64 / self.values.len() as f64
    }

    /// Mean squared difference to `other`.
    pub fn mean_squared_error(&self, other: &SilhouetteImage) -> Result<f64, RenderError> {
        other.check_dims(self.width, self.height)?;
        let sum: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sum / self.values.len() as f64)
    }

    pub(crate) fn check_dims(&self, width: usize, height: usize) -> Result<(), RenderError> {
        if self.width != width || self.height != height {
            return Err(RenderError::DimensionMismatch {
                width,
                height,
                got_width: self.width,
                got_height: self.height,
            });
        }
        Ok(())
    }

    pub fn check_camera(&self, camera: &CameraModel) -> Result<(), RenderError> {
        self.check_dims(camera.width, camera.height)
    }
}

/// Edge softness and support of the soft rasterizer, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub sigma: f64,
    pub band: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings { sigma: 1.5, band: 8.0 }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(RenderError::InvalidSettings(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.band.is_finite() && self.band >= 3.0 * self.sigma) {
            return Err(RenderError::InvalidSettings(format!(
                "band ({}) must be at least 3 * sigma ({})",
                self.band, self.sigma
            )));
        }
        Ok(())
    }
}

/// Loss, pose gradient and the rendered frame from one backward pass.
#[derive(Debug, Clone)]
pub struct RenderGradient {
    pub loss: f64,
    /// dLoss / d(ω, τ), left-tangent coordinates.
    pub grad: Vector6<f64>,
    pub rendered: SilhouetteImage,
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn cross(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Nearest boundary feature of a triangle.
#[derive(Debug, Clone, Copy)]
struct Closest {
    signed: f64,
    edge: usize,
    t: f64,
    offset: Vector2<f64>,
}

impl Closest {
    /// Derivatives of the signed distance with respect to the three corners.
    fn corner_gradients(&self) -> [Vector2<f64>; 3] {
        let mut out = [Vector2::zeros(); 3];
        let dist = self.signed.abs();
        if dist == 0.0 {
            return out;
        }
        let n = self.offset * (self.signed.signum() / dist);
        out[self.edge] = -(1.0 - self.t) * n;
        out[(self.edge + 1) % 3] = -self.t * n;
        out
    }
}

fn closest_feature(p: &Vector2<f64>, v: &[Vector2<f64>; 3]) -> Closest {
    let orientation = cross(&(v[1] - v[0]), &(v[2] - v[0])).signum();
    let mut inside = true;
    let mut best = Closest {
        signed: f64::INFINITY,
        edge: 0,
        t: 0.0,
        offset: Vector2::zeros(),
    };
    let mut best_sq = f64::INFINITY;
    for k in 0..3 {
        let a = v[k];
        let e = v[(k + 1) % 3] - a;
        let ap = p - a;
        if cross(&e, &ap) * orientation < 0.0 {
            inside = false;
        }
        let t = (ap.dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
        let offset = ap - e * t;
        let sq = offset.norm_squared();
        if sq < best_sq {
            best_sq = sq;
            best = Closest {
                signed: 0.0,
                edge: k,
                t,
                offset,
            };
        }
    }
    let dist = best_sq.sqrt();
    best.signed = if inside { -dist } else { dist };
    best
}

/// Signed Euclidean distance from `p` to triangle `abc`: negative inside,
/// positive outside, zero on the boundary.
pub fn signed_distance_point_triangle_2d(
    p: &Vector2<f64>,
    a: &Vector2<f64>,
    b: &Vector2<f64>,
    c: &Vector2<f64>,
) -> f64 {
    closest_feature(p, &[*a, *b, *c]).signed
}

struct ScreenTriangle {
    corners: [Vector2<f64>; 3],
    vertex_ids: [usize; 3],
    cols: (usize, usize),
    rows: (usize, usize),
}

impl ScreenTriangle {
    fn covers(&self, col: usize, row: usize) -> bool {
        (self.cols.0..=self.cols.1).contains(&col) && (self.rows.0..=self.rows.1).contains(&row)
    }
}

/// Projected mesh binned into tiles.
struct Raster {
    width: usize,
    height: usize,
    tiles_x: usize,
    tiles_y: usize,
    triangles: Vec<ScreenTriangle>,
    bins: Vec<Vec<u32>>,
    /// Per vertex: `R x` and `R x + t`.
    rotated: Vec<Vector3<f64>>,
    camera_points: Vec<Vector3<f64>>,
}

/// Pixel index range whose centers lie in `[lo, hi]`, clipped to `[0, n)`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(n as f64 - 1.0);
    (first <= last).then_some((first as usize, last as usize))
}

impl Raster {
    fn new(mesh: &TriangleMesh, proj: &Projector, settings: &RenderSettings) -> Self {
        let camera = proj.camera;
        let rot = proj.pose.rotation();
        let rotated: Vec<Vector3<f64>> = mesh.vertices().iter().map(|v| rot.matrix() * v).collect();
        let camera_points: Vec<Vector3<f64>> = rotated.iter().map(|r| r + proj.pose.translation).collect();
        let screen: Vec<Option<Vector2<f64>>> = camera_points
            .iter()
            .map(|pc| {
                (pc.z > MIN_DEPTH)
                    .then(|| Vector2::new(camera.fx * pc.x / pc.z + camera.cx, camera.fy * pc.y / pc.z + camera.cy))
            })
            .collect();

        let (width, height) = (camera.width, camera.height);
        let tiles_x = width.div_ceil(TILE);
        let tiles_y = height.div_ceil(TILE);
        let mut triangles = Vec::new();
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];

        for &[a, b, c] in mesh.triangles() {
            let (Some(pa), Some(pb), Some(pc)) = (screen[a], screen[b], screen[c]) else {
                continue;
            };
            if (cross(&(pb - pa), &(pc - pa)) * 0.5).abs() <= MIN_SCREEN_AREA {
                continue;
            }
            let lo = pa.inf(&pb).inf(&pc);
            let hi = pa.sup(&pb).sup(&pc);
            let (Some(cols), Some(rows)) = (
                pixel_span(lo.x - settings.band, hi.x + settings.band, width),
                pixel_span(lo.y - settings.band, hi.y + settings.band, height),
            ) else {
                continue;
            };
            let index = triangles.len() as u32;
            for ty in rows.0 / TILE..=rows.1 / TILE {
                for tx in cols.0 / TILE..=cols.1 / TILE {
                    bins[ty * tiles_x + tx].push(index);
                }
            }
            triangles.push(ScreenTriangle {
                corners: [pa, pb, pc],
                vertex_ids: [a, b, c],
                cols,
                rows,
            });
        }

        Raster {
            width,
            height,
            tiles_x,
            tiles_y,
            triangles,
            bins,
            rotated,
            camera_points,
        }
    }
}

/// One triangle's contribution to one pixel, kept for the backward pass.
struct Contribution {
    slot: usize,
    occupancy: f64,
    vacancy: f64,
    /// dOccupancy/dd, only meaningful in the taper.
    d_occupancy: f64,
    tapered: bool,
    closest: Closest,
}

struct TileOutput {
    values: Vec<f64>,
    squared_residual: f64,
    /// Per binned triangle, dLoss·N/d(corner).
    corner_grads: Vec<[Vector2<f64>; 3]>,
}

/// Occupancy of one triangle at signed distance `d`: `(o, 1 − o, do/dd, tapered)`.
fn occupancy(d: f64, settings: &RenderSettings) -> (f64, f64, f64, bool) {
    let s = settings.sigma;
    let inner = logistic(-d / s);
    let taper_start = settings.band - s;
    if d <= taper_start {
        return (inner, logistic(d / s), 0.0, false);
    }
    let x = (settings.band - d) / s;
    let w = x * x * (3.0 - 2.0 * x);
    let dw = -6.0 * x * (1.0 - x) / s;
    let o = w * inner;
    let d_o = dw * inner - w * inner * (1.0 - inner) / s;
    (o, 1.0 - o, d_o, true)
}

fn process_tile(
    raster: &Raster,
    tile: usize,
    settings: &RenderSettings,
    target: Option<&SilhouetteImage>,
) -> TileOutput {
    let bin = &raster.bins[tile];
    let tx = tile % raster.tiles_x;
    let ty = tile / raster.tiles_x;
    let cols = tx * TILE..((tx + 1) * TILE).min(raster.width);
    let rows = ty * TILE..((ty + 1) * TILE).min(raster.height);
    let mut values = Vec::with_capacity(cols.len() * rows.len());
    let mut squared_residual = 0.0;
    let mut corner_grads = if target.is_some() {
        vec![[Vector2::zeros(); 3]; bin.len()]
    } else {
        Vec::new()
    };
    let mut scratch: Vec<Contribution> = Vec::new();
    let s = settings.sigma;

    for row in rows {
        for col in cols.clone() {
            let p = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
            let mut vacancy = 1.0;
            scratch.clear();
            for (slot, &ti) in bin.iter().enumerate() {
                let tri = &raster.triangles[ti as usize];
                if !tri.covers(col, row) {
                    continue;
                }
                let closest = closest_feature(&p, &tri.corners);
                if closest.signed >= settings.band {
                    continue;
                }
                let (o, u, d_o, tapered) = occupancy(closest.signed, settings);
                vacancy *= u;
                if target.is_some() {
                    scratch.push(Contribution {
                        slot,
                        occupancy: o,
                        vacancy: u,
                        d_occupancy: d_o,
                        tapered,
                        closest,
                    });
                }
            }
            let value = 1.0 - vacancy;
            values.push(value);

            if let Some(target) = target {
                let residual = target.get(col, row) - value;
                squared_residual += residual * residual;
                // d(r²)/dS = −2r; the 1/N factor is applied once at the end.
                let d_value = -2.0 * residual;
                if d_value == 0.0 {
                    continue;
                }
                for c in &scratch {
                    // dS/do = Π_{others}(1 − o') = vacancy / (1 − o).
                    let d_signed = if c.tapered {
                        vacancy / c.vacancy * c.d_occupancy
                    } else {
                        // With w = 1, do/dd = −o(1 − o)/sigma and the (1 − o) cancels.
                        -vacancy * c.occupancy / s
                    };
                    let coeff = d_value * d_signed;
                    let g = c.closest.corner_gradients();
                    let acc = &mut corner_grads[c.slot];
                    for k in 0..3 {
                        acc[k] += g[k] * coeff;
                    }
                }
            }
        }
    }

    TileOutput {
        values,
        squared_residual,
        corner_grads,
    }
}

fn run(
    raster: &Raster,
    settings: &RenderSettings,
    target: Option<&SilhouetteImage>,
) -> (SilhouetteImage, Vec<TileOutput>) {
    let tiles: Vec<TileOutput> = (0..raster.tiles_x * raster.tiles_y)
        .into_par_iter()
        .map(|tile| process_tile(raster, tile, settings, target))
        .collect();
    let mut image = SilhouetteImage::zeros(raster.width, raster.height);
    for (tile, out) in tiles.iter().enumerate() {
        let tx = tile % raster.tiles_x;
        let ty = tile / raster.tiles_x;
        let cols = tx * TILE..((tx + 1) * TILE).min(raster.width);
        let mut src = out.values.iter();
        for row in ty * TILE..((ty + 1) * TILE).min(raster.height) {
            for col in cols.clone() {
                image.values[row * raster.width + col] = *src.next().expect("tile size");
            }
        }
    }
    (image, tiles)
}

/// Forward soft-silhouette render of `mesh` seen through `proj`.
///
/// Triangles with a vertex behind the projector are skipped; a mesh entirely
/// behind it renders as an all-zero image.
pub fn render_silhouette(mesh: &TriangleMesh, proj: &Projector, settings: &RenderSettings) -> SilhouetteImage {
    let raster = Raster::new(mesh, proj, settings);
    run(&raster, settings, None).0
}

/// Mean squared residual against `target` and its gradient with respect to
/// the left-tangent pose parameters of `proj`.
pub fn render_with_pose_gradient(
    mesh: &TriangleMesh,
    proj: &Projector,
    target: &SilhouetteImage,
    settings: &RenderSettings,
) -> Result<RenderGradient, RenderError> {
    target.check_camera(&proj.camera)?;
    let raster = Raster::new(mesh, proj, settings);
    let (rendered, tiles) = run(&raster, settings, Some(target));

    let n = proj.camera.pixel_count() as f64;
    let mut squared = 0.0;
    let mut vertex_grads = vec![Vector2::zeros(); mesh.vertices().len()];
    for (tile, out) in tiles.iter().enumerate() {
        squared += out.squared_residual;
        for (slot, &ti) in raster.bins[tile].iter().enumerate() {
            let tri = &raster.triangles[ti as usize];
            for k in 0..3 {
                vertex_grads[tri.vertex_ids[k]] += out.corner_grads[slot][k];
            }
        }
    }

    let mut grad = Vector6::zeros();
    for (v, g) in vertex_grads.iter().enumerate() {
        if *g == Vector2::zeros() {
            continue;
        }
        let jac = point_jacobian(&proj.camera, &raster.rotated[v], &raster.camera_points[v])
            .expect("vertices of rasterized triangles are in front of the projector");
        grad += jac.transpose() * g;
    }

    Ok(RenderGradient {
        loss: squared / n,
        grad: grad / n,
        rendered,
    })
}
