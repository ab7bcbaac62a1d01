use std::f64::consts::PI;

use angioreg::geometry::{decouple_perpendicular, exp_so3, log_so3, perpendicular_coupling, Pose, Rotation};
use angioreg::ingest::{binarize, otsu_threshold, BitDepth, GrayImage, Polarity};
use angioreg::metrics::rotation_error_deg;
use angioreg::registration::{lambda2_at, Lambda2Schedule};
use angioreg::render::signed_distance_point_triangle_2d;
use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;

fn rotvec(max_angle: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-1.0..1.0f64, 0.0..(2.0 * PI), 0.0..max_angle).prop_map(|(z, phi, angle)| {
        let r = (1.0 - z * z).sqrt();
        Vector3::new(r * phi.cos(), r * phi.sin(), z) * angle
    })
}

fn rotation() -> impl Strategy<Value = Rotation> {
    rotvec(PI).prop_map(|v| exp_so3(&v))
}

fn pose() -> impl Strategy<Value = Pose> {
    (rotvec(PI), -100.0..100.0f64, -100.0..100.0f64, -100.0..100.0f64)
        .prop_map(|(w, x, y, z)| Pose::new(w, Vector3::new(x, y, z)))
}

fn point() -> impl Strategy<Value = Vector2<f64>> {
    (-20.0..20.0f64, -20.0..20.0f64).prop_map(|(x, y)| Vector2::new(x, y))
}

fn segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn cross(u: Vector2<f64>, v: Vector2<f64>) -> f64 {
    u.x * v.y - u.y * v.x
}

/// Distance to the nearest edge, negated when all three edge tests agree.
fn signed_distance_oracle(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> f64 {
    let d = segment_distance(p, a, b).min(segment_distance(p, b, c)).min(segment_distance(p, c, a));
    let s = [cross(b - a, p - a), cross(c - b, p - b), cross(a - c, p - c)];
    let inside = s.iter().all(|&v| v > 0.0) || s.iter().all(|&v| v < 0.0);
    if inside {
        -d
    } else {
        d
    }
}

/// Threshold maximizing between-class variance by direct enumeration over
/// pixel lists.
fn otsu_oracle(pixels: &[u16]) -> Option<u16> {
    let max = *pixels.iter().max()?;
    let mut best: Option<(u16, f64)> = None;
    for t in 0..max {
        let (low, high): (Vec<f64>, Vec<f64>) = pixels.iter().map(|&p| p as f64).partition(|&p| p <= t as f64);
        if low.is_empty() {
            continue;
        }
        let n = pixels.len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let between = (low.len() as f64 / n) * (high.len() as f64 / n) * (mean(&low) - mean(&high)).powi(2);
        if best.is_none_or(|(_, b)| between > b * (1.0 + 1e-12)) {
            best = Some((t, between));
        }
    }
    best.map(|(t, _)| t)
}

proptest! {
    #[test]
    fn exp_log_round_trip(v in rotvec(PI - 1e-3)) {
        let back = log_so3(&exp_so3(&v));
        prop_assert!((back - v).norm() < 1e-9, "{v} -> {back}");
    }

    #[test]
    fn exp_is_a_rotation(v in rotvec(10.0)) {
        let m = *exp_so3(&v).matrix();
        prop_assert!((m.transpose() * m - nalgebra::Matrix3::identity()).amax() < 1e-12);
        prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_error_is_a_metric(a in rotation(), b in rotation(), c in rotation()) {
        let (ab, ba) = (rotation_error_deg(&a, &b), rotation_error_deg(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ab <= rotation_error_deg(&a, &c) + rotation_error_deg(&c, &b) + 1e-9);
        prop_assert!((0.0..=180.0 + 1e-9).contains(&ab));
        let log_norm = log_so3(&(a.inverse() * b)).norm().to_degrees();
        prop_assert!((ab - log_norm).abs() < 1e-9);
    }

    #[test]
    fn signed_distance_matches_the_edge_oracle(p in point(), a in point(), b in point(), c in point()) {
        prop_assume!(cross(b - a, c - a).abs() > 1.0);
        let got = signed_distance_point_triangle_2d(&p, &a, &b, &c);
        let want = signed_distance_oracle(&p, &a, &b, &c);
        prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn coupling_is_a_quarter_turn_and_undoes_exactly(r in rotation(), column in 0usize..3) {
        let w = perpendicular_coupling(&r, column);
        let ap = w * r;
        prop_assert!((rotation_error_deg(&ap, &r) - 90.0).abs() < 1e-6);
        prop_assert!((ap.column(column) - r.column(column)).norm() < 1e-12);
        let back = decouple_perpendicular(&ap, column);
        prop_assert!(back.angle_to(&r) < 1e-9);
    }

    #[test]
    fn pose_compose_with_inverse_is_identity(p in pose(), x in (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64)) {
        let x = Vector3::new(x.0, x.1, x.2);
        let id = p.compose(&p.inverse());
        prop_assert!(id.rotation().angle_to(&Rotation::identity()) < 1e-9);
        prop_assert!(id.translation.norm() < 1e-9);
        let round = p.inverse().transform_point(&p.transform_point(&x));
        prop_assert!((round - x).norm() < 1e-9);
    }

    #[test]
    fn pose_compose_applies_inner_first(p in pose(), q in pose(), x in (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64)) {
        let x = Vector3::new(x.0, x.1, x.2);
        let direct = p.transform_point(&q.transform_point(&x));
        prop_assert!((p.compose(&q).transform_point(&x) - direct).norm() < 1e-9);
    }

    #[test]
    fn otsu_matches_the_enumeration_oracle(pixels in prop::collection::vec(0u16..256, 2..200)) {
        let img = GrayImage::new(pixels.len(), 1, BitDepth::Eight, pixels.clone()).unwrap();
        match otsu_oracle(&pixels) {
            Some(t) => prop_assert_eq!(otsu_threshold(&img).unwrap(), t),
            None => prop_assert!(otsu_threshold(&img).is_err()),
        }
    }

    #[test]
    fn polarities_are_complementary(pixels in prop::collection::vec(0u16..256, 1..100), t in 0u16..256) {
        let img = GrayImage::new(pixels.len(), 1, BitDepth::Eight, pixels).unwrap();
        let dark = binarize(&img, t, Polarity::VesselsDark);
        let bright = binarize(&img, t, Polarity::VesselsBright);
        for (d, b) in dark.values().iter().zip(bright.values()) {
            prop_assert_eq!(d + b, 1.0);
        }
    }

    #[test]
    fn ramp_weight_is_bounded_and_monotone(start in 0usize..300, len in 0usize..300, weight in 0.0..5.0f64, iter in 0usize..700) {
        let schedule = Lambda2Schedule::LinearRamp { start_iter: start, end_iter: start + len, weight };
        let w = lambda2_at(&schedule, iter);
        prop_assert!((0.0..=weight).contains(&w));
        prop_assert!(lambda2_at(&schedule, iter + 1) >= w);
        prop_assert_eq!(lambda2_at(&schedule, start + len + 1), weight);
    }
}
