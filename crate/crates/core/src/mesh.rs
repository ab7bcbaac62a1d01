//! Triangle meshes: OBJ ingestion, rigid transforms and the ADD metric.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::Pose;

/// Triangles with a smaller area (mm²) are dropped on construction.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mesh needs at least 3 vertices and 1 non-degenerate triangle (got {vertices} vertices, {triangles} triangles)")]
    EmptyMesh { vertices: usize, triangles: usize },
    #[error("triangle {triangle} references vertex {index}, but the mesh has {vertices} vertices")]
    IndexOutOfRange {
        triangle: usize,
        index: usize,
        vertices: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[usize; 3]>,
    dropped_degenerate: usize,
}

impl TriangleMesh {
    /// Validates indices and drops degenerate triangles.
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i >= vertices.len()) {
                return Err(MeshError::IndexOutOfRange {
                    triangle: t,
                    index,
                    vertices: vertices.len(),
                });
            }
        }
        let total = triangles.len();
        let triangles: Vec<[usize; 3]> = triangles
            .into_iter()
            .filter(|&[a, b, c]| triangle_area(&vertices[a], &vertices[b], &vertices[c]) > MIN_TRIANGLE_AREA)
            .collect();
        let dropped_degenerate = total - triangles.len();
        if dropped_degenerate > 0 {
            log::warn!("dropped {dropped_degenerate} degenerate triangle(s)");
        }
        if vertices.len() < 3 || triangles.is_empty() {
            return Err(MeshError::EmptyMesh {
                vertices: vertices.len(),
                triangles: triangles.len(),
            });
        }
        Ok(TriangleMesh {
            vertices,
            triangles,
            dropped_degenerate,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Number of degenerate triangles removed when the mesh was built.
    pub fn dropped_degenerate(&self) -> usize {
        self.dropped_degenerate
    }

    /// Uniform scale, e.g. to convert a mesh authored in cm to mm.
    pub fn scaled(&self, factor: f64) -> Result<Self, MeshError> {
        TriangleMesh::new(self.vertices.iter().map(|v| v * factor).collect(), self.triangles.clone())
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Centers the bounding box on the origin and scales its longest side to `size`.
    pub fn normalized_to_box(&self, size: f64) -> Result<Self, MeshError> {
        let (lo, hi) = self.bounds();
        let center = (lo + hi) * 0.5;
        let extent = (hi - lo).max();
        let scale = if extent > 0.0 { size / extent } else { 1.0 };
        TriangleMesh::new(
            self.vertices.iter().map(|v| (v - center) * scale).collect(),
            self.triangles.clone(),
        )
    }

    /// Serializes as ASCII OBJ with 1-based indices.
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for [a, b, c] in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", a + 1, b + 1, c + 1);
        }
        out
    }
}

fn triangle_area(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh, MeshError> {
    parse_obj(&fs::read_to_string(path)?)
}

/// Parses `v` and `f` records; polygons are fan-triangulated, everything else
/// (normals, texture coordinates, groups, comments) is ignored.
pub fn parse_obj(source: &str) -> Result<TriangleMesh, MeshError> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();

    for (n, raw) in source.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| MeshError::Parse {
                        line: line_no,
                        message: format!("bad vertex coordinate: {e}"),
                    })?;
                if coords.len() != 3 || coords.iter().any(|c| !c.is_finite()) {
                    return Err(MeshError::Parse {
                        line: line_no,
                        message: "vertex needs three finite coordinates".into(),
                    });
                }
                vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut corners = Vec::new();
                for token in tokens {
                    let index_str = token.split('/').next().unwrap_or("");
                    let index: i64 = index_str.parse().map_err(|_| MeshError::Parse {
                        line: line_no,
                        message: format!("bad face index '{token}'"),
                    })?;
                    // Negative indices count back from the latest vertex.
                    let resolved = match index {
                        i if i > 0 => i - 1,
                        i if i < 0 => vertices.len() as i64 + i,
                        _ => -1,
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(MeshError::Parse {
                            line: line_no,
                            message: format!("face index {index} out of range ({} vertices)", vertices.len()),
                        });
                    }
                    corners.push(resolved as usize);
                }
                if corners.len() < 3 {
                    return Err(MeshError::Parse {
                        line: line_no,
                        message: "face needs at least three vertices".into(),
                    });
                }
                for k in 1..corners.len() - 1 {
                    triangles.push([corners[0], corners[k], corners[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, triangles)
}

/// Maps every vertex through `pose`; topology is unchanged.
pub fn transform_mesh(mesh: &TriangleMesh, pose: &Pose) -> TriangleMesh {
    let r = pose.rotation();
    TriangleMesh {
        vertices: mesh.vertices.iter().map(|v| r.matrix() * v + pose.translation).collect(),
        triangles: mesh.triangles.clone(),
        dropped_degenerate: mesh.dropped_degenerate,
    }
}

/// Average distance (mm) between corresponding vertices placed by the two poses.
pub fn add_error(mesh: &TriangleMesh, pose_est: &Pose, pose_gt: &Pose) -> f64 {
    let (re, rg) = (pose_est.rotation(), pose_gt.rotation());
    let total: f64 = mesh
        .vertices
        .iter()
        .map(|v| ((re.matrix() * v + pose_est.translation) - (rg.matrix() * v + pose_gt.translation)).norm())
        .sum();
    total / mesh.vertices.len() as f64
}
