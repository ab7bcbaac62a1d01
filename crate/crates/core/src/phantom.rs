//! Synthetic vessel meshes: tubes swept along 3D centerlines.

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::mesh::{MeshError, TriangleMesh};

/// Side length (mm) of the box the default phantoms are normalized into.
pub const PHANTOM_BOX_MM: f64 = 50.0;

/// A tube of constant `radius` with `sides` facets along a polyline.
/// Returns vertices and triangles; ends are left open.
fn sweep(centerline: &[Vector3<f64>], radius: f64, sides: usize) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let n = centerline.len();
    let tangent = |i: usize| {
        let (a, b) = (centerline[i.saturating_sub(1)], centerline[(i + 1).min(n - 1)]);
        (b - a).normalize()
    };

    let t0 = tangent(0);
    let helper = if t0.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let mut normal = (helper - t0 * helper.dot(&t0)).normalize();

    let mut vertices = Vec::with_capacity(n * sides);
    for (i, c) in centerline.iter().enumerate() {
        let t = tangent(i);
        // Parallel transport keeps the rings from twisting.
        normal = (normal - t * normal.dot(&t)).normalize();
        let binormal = t.cross(&normal);
        for k in 0..sides {
            let phi = 2.0 * PI * k as f64 / sides as f64;
            vertices.push(c + radius * (phi.cos() * normal + phi.sin() * binormal));
        }
    }

    let mut triangles = Vec::with_capacity(2 * (n - 1) * sides);
    for i in 0..n - 1 {
        for k in 0..sides {
            let a = i * sides + k;
            let b = i * sides + (k + 1) % sides;
            let c = a + sides;
            let d = b + sides;
            triangles.push([a, b, d]);
            triangles.push([a, d, c]);
        }
    }
    (vertices, triangles)
}

fn sample(curve: impl Fn(f64) -> Vector3<f64>, segments: usize) -> Vec<Vector3<f64>> {
    (0..=segments).map(|i| curve(i as f64 / segments as f64)).collect()
}

/// Builds a mesh from several tubes, each given as `(centerline, radius)`.
pub fn tubes(parts: &[(Vec<Vector3<f64>>, f64)], sides: usize) -> Result<TriangleMesh, MeshError> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (centerline, radius) in parts {
        let offset = vertices.len();
        let (v, t) = sweep(centerline, *radius, sides);
        vertices.extend(v);
        triangles.extend(t.into_iter().map(|[a, b, c]| [a + offset, b + offset, c + offset]));
    }
    TriangleMesh::new(vertices, triangles)
}

fn trunk(s: f64) -> Vector3<f64> {
    Vector3::new(9.0 * (PI * s).sin() - 4.0, 50.0 * s - 25.0, 7.0 * (2.0 * PI * s).sin())
}

/// Single bent tube with 96 triangles (6 segments, 8 sides), in a 50 mm box.
pub fn small_tube() -> TriangleMesh {
    tubes(&[(sample(trunk, 6), 4.0)], 8)
        .and_then(|m| m.normalized_to_box(PHANTOM_BOX_MM))
        .expect("phantom is well formed")
}

/// Branching vessel phantom (trunk plus two side branches, 512 triangles),
/// non-planar so that no single view determines every pose parameter.
pub fn vessel_tree() -> TriangleMesh {
    let root_a = trunk(0.35);
    let root_b = trunk(0.7);
    let branch_a = move |s: f64| root_a + Vector3::new(20.0 * s, 6.0 * s + 4.0 * (PI * s).sin(), 10.0 * s * s);
    let branch_b = move |s: f64| root_b + Vector3::new(-18.0 * s, 8.0 * s, -6.0 * s - 5.0 * (PI * s).sin());
    tubes(
        &[
            (sample(trunk, 16), 3.5),
            (sample(branch_a, 8), 2.5),
            (sample(branch_b, 8), 2.5),
        ],
        8,
    )
    .and_then(|m| m.normalized_to_box(PHANTOM_BOX_MM))
    .expect("phantom is well formed")
}
