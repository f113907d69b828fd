//! Smooth closed curves through a set of control points.

use crate::error::{ConsultError, Result};
use crate::image::DefectMask;

pub type Point = [f64; 2];

pub const DEFAULT_SAMPLES_PER_SEGMENT: usize = 24;

fn cubic(p0: Point, c1: Point, c2: Point, p1: Point, t: f64) -> Point {
    let u = 1.0 - t;
    let a = u * u * u;
    let b = 3.0 * u * u * t;
    let c = 3.0 * u * t * t;
    let d = t * t * t;
    [
        a * p0[0] + b * c1[0] + c * c2[0] + d * p1[0],
        a * p0[1] + b * c1[1] + c * c2[1] + d * p1[1],
    ]
}

/// Orders points counter-clockwise by polar angle about their centroid.
pub fn sort_by_angle(points: &[Point]) -> Vec<Point> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        let ta = (a[1] - cy).atan2(a[0] - cx);
        let tb = (b[1] - cy).atan2(b[0] - cx);
        ta.total_cmp(&tb)
    });
    sorted
}

/// Closed polygon through `points` built from cubic Bezier segments.
///
/// Points are taken in polar order about their centroid. Each chord gets two
/// inner control points at 1/3 and 2/3 along it, pushed outward along the chord
/// normal by `edginess * chord_length`. Every segment contributes
/// `samples_per_segment` vertices starting exactly at its control point.
pub fn bezier_hull(points: &[Point], edginess: f64, samples_per_segment: usize) -> Result<Vec<Point>> {
    if points.len() < 3 {
        return Err(ConsultError::InvalidArgument(format!(
            "bezier hull needs at least 3 points, got {}",
            points.len()
        )));
    }
    if !(edginess >= 0.0) || !edginess.is_finite() {
        return Err(ConsultError::InvalidArgument(format!("edginess must be >= 0, got {edginess}")));
    }
    let samples = samples_per_segment.max(1);
    let pts = sort_by_angle(points);
    let n = pts.len();
    let mut poly = Vec::with_capacity(n * samples);
    for i in 0..n {
        let p0 = pts[i];
        let p1 = pts[(i + 1) % n];
        let (dx, dy) = (p1[0] - p0[0], p1[1] - p0[1]);
        let len = (dx * dx + dy * dy).sqrt();
        // Outward normal of a counter-clockwise chord in (x, y) with y up is (dy, -dx).
        let (nx, ny) = if len > 0.0 { (dy / len, -dx / len) } else { (0.0, 0.0) };
        let off = edginess * len;
        let c1 = [p0[0] + dx / 3.0 + nx * off, p0[1] + dy / 3.0 + ny * off];
        let c2 = [p0[0] + 2.0 * dx / 3.0 + nx * off, p0[1] + 2.0 * dy / 3.0 + ny * off];
        poly.push(p0);
        for s in 1..samples {
            poly.push(cubic(p0, c1, c2, p1, s as f64 / samples as f64));
        }
    }
    Ok(poly)
}

/// Shoelace area (absolute value).
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc.abs() / 2.0
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Rasterises a polygon given in (x, y) pixel coordinates, sampling at pixel centres.
pub fn fill_polygon(poly: &[Point], width: usize, height: usize) -> DefectMask {
    let mut mask = DefectMask::empty(width, height);
    let n = poly.len();
    let mut xs = Vec::new();
    for y in 0..height {
        let py = y as f64;
        xs.clear();
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (poly[i], poly[j]);
            if (a[1] > py) != (b[1] > py) {
                xs.push((b[0] - a[0]) * (py - a[1]) / (b[1] - a[1]) + a[0]);
            }
            j = i;
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for pair in xs.chunks_exact(2) {
            let x0 = pair[0].ceil().max(0.0);
            let x1 = pair[1].min(width as f64 - 1.0);
            if x1 < x0 {
                continue;
            }
            for x in x0 as usize..=x1.floor() as usize {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    fn orient(p: Point, q: Point, r: Point) -> f64 {
        (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    }
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    (o1 > 0.0) != (o2 > 0.0) && (o3 > 0.0) != (o4 > 0.0) && o1 != 0.0 && o2 != 0.0 && o3 != 0.0 && o4 != 0.0
}

/// Brute-force check that no two non-adjacent edges cross.
pub fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn on_polygon(poly: &[Point], p: Point) -> f64 {
        poly.iter()
            .map(|q| ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn too_few_points() {
        assert!(bezier_hull(&[[0.0, 0.0], [1.0, 0.0]], 0.05, 10).is_err());
        assert!(bezier_hull(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], -0.1, 10).is_err());
    }

    #[test]
    fn equilateral_triangle_without_smoothing() {
        let h = 3f64.sqrt() / 2.0;
        let tri = [[0.0, 0.0], [1.0, 0.0], [0.5, h]];
        let poly = bezier_hull(&tri, 0.0, 16).unwrap();
        for p in tri {
            assert!(on_polygon(&poly, p) < 1e-12);
        }
        assert!(polygon_area(&poly) >= polygon_area(&tri) - 1e-12);
    }

    #[test]
    fn unit_square_contains_centroid() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let poly = bezier_hull(&sq, 0.05, 24).unwrap();
        assert!(is_simple(&poly));
        assert!(point_in_polygon(&poly, [0.5, 0.5]));
        // Outward bulge: area exceeds the square.
        assert!(polygon_area(&poly) > 1.0);
    }

    #[test]
    fn fill_matches_point_in_polygon_oracle() {
        let pts = [[10.0, 8.0], [40.0, 12.0], [44.0, 38.0], [20.0, 44.0], [6.0, 30.0]];
        let poly = bezier_hull(&pts, 0.05, 24).unwrap();
        let mask = fill_polygon(&poly, 50, 50);
        let mut disagreements = 0;
        for y in 0..50 {
            for x in 0..50 {
                if mask.get(y, x) != point_in_polygon(&poly, [x as f64, y as f64]) {
                    disagreements += 1;
                }
            }
        }
        // Only pixels whose centre sits exactly on an edge may differ.
        assert!(disagreements <= 2, "{disagreements}");
        assert!(mask.area() > 0);
    }

    proptest! {
        #[test]
        fn control_points_lie_on_curve(pts in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 3..9)) {
            let pts: Vec<Point> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let poly = bezier_hull(&pts, 0.05, 20).unwrap();
            for p in &pts {
                prop_assert!(on_polygon(&poly, *p) < 1e-6);
            }
        }

        #[test]
        fn well_spread_points_give_simple_polygons(
            radii in prop::collection::vec(0.5f64..1.0, 5),
            jitter in prop::collection::vec(-0.3f64..0.3, 5),
        ) {
            // Star-shaped configuration about the origin.
            let pts: Vec<Point> = (0..5)
                .map(|i| {
                    let t = (i as f64 + jitter[i]) * std::f64::consts::TAU / 5.0;
                    [radii[i] * t.cos() * 50.0, radii[i] * t.sin() * 50.0]
                })
                .collect();
            let poly = bezier_hull(&pts, 0.05, 16).unwrap();
            prop_assert!(is_simple(&poly));
        }
    }
}
