//! Rotated-box overlap via convex polygon clipping in the BEV plane.

use crate::model::Box3D;
use crate::scalar::Real;

/// Intersections below this area count as empty.
pub const AREA_EPS: f64 = 1e-12;

fn cross<T: Real>(o: [T; 2], a: [T; 2], b: [T; 2]) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive when counter-clockwise).
pub fn polygon_area<T: Real>(poly: &[[T; 2]]) -> T {
    let n = poly.len();
    if n < 3 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        acc += p[0] * q[1] - q[0] * p[1];
    }
    acc * T::half()
}

/// Clips `subject` by the convex counter-clockwise polygon `clip`.
pub fn clip_convex<T: Real>(subject: &[[T; 2]], clip: &[[T; 2]]) -> Vec<[T; 2]> {
    let eps = T::lit(AREA_EPS);
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let c_cur = cross(a, b, cur);
            let c_prev = cross(a, b, prev);
            let cur_in = c_cur >= -eps;
            let prev_in = c_prev >= -eps;
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, c_prev, c_cur));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, c_prev, c_cur));
            }
        }
    }
    dedup_vertices(output, eps)
}

fn intersect<T: Real>(p: [T; 2], q: [T; 2], cp: T, cq: T) -> [T; 2] {
    let t = cp / (cp - cq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn dedup_vertices<T: Real>(poly: Vec<[T; 2]>, eps: T) -> Vec<[T; 2]> {
    let mut out: Vec<[T; 2]> = Vec::with_capacity(poly.len());
    for p in poly {
        if out
            .last()
            .is_none_or(|q| (p[0] - q[0]).abs() > eps || (p[1] - q[1]).abs() > eps)
        {
            out.push(p);
        }
    }
    while out.len() > 1 {
        let (f, l) = (out[0], out[out.len() - 1]);
        if (f[0] - l[0]).abs() <= eps && (f[1] - l[1]).abs() <= eps {
            out.pop();
        } else {
            break;
        }
    }
    out
}

/// Area of the BEV footprint intersection.
pub fn bev_intersection_area<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let poly = clip_convex(&a.bev_corners(), &b.bev_corners());
    let area = polygon_area(&poly);
    let cap = a.bev_area().min(b.bev_area());
    if area <= T::lit(AREA_EPS) {
        T::zero()
    } else {
        area.min(cap)
    }
}

/// BEV-only overlap ratio.
pub fn iou_bev<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let inter = bev_intersection_area(a, b);
    if inter == T::zero() {
        return T::zero();
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).min(T::one())
}

/// Volumetric intersection over union of two upright oriented boxes.
pub fn iou3d<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let dz = a.z_max().min(b.z_max()) - a.z_min().max(b.z_min());
    if dz <= T::zero() {
        return T::zero();
    }
    let area = bev_intersection_area(a, b);
    if area == T::zero() {
        return T::zero();
    }
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(T::zero(), T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cube(x: f64, y: f64, yaw: f64) -> Box3D<f64> {
        Box3D::new([x, y, 0.0], [1.0; 3], yaw).unwrap()
    }

    #[test]
    fn identical_boxes() {
        let b = Box3D::<f64>::new([2.0, -1.0, 0.3], [4.2, 1.8, 1.5], 0.7).unwrap();
        assert!((iou3d(&b, &b) - 1.0).abs() < 1e-12);
        assert!((iou_bev(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_offset_cubes() {
        assert!((iou3d(&cube(0.0, 0.0, 0.0), &cube(0.5, 0.0, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_and_touching() {
        assert_eq!(iou3d(&cube(0.0, 0.0, 0.0), &cube(3.0, 0.0, 0.0)), 0.0);
        assert_eq!(iou3d(&cube(0.0, 0.0, 0.0), &cube(1.0, 0.0, 0.0)), 0.0);
        let lifted = Box3D::new([0.0, 0.0, 2.0], [1.0; 3], 0.0).unwrap();
        assert_eq!(iou3d(&cube(0.0, 0.0, 0.0), &lifted), 0.0);
    }

    #[test]
    fn rotated_square_in_square() {
        // A unit square rotated 45 degrees inside a larger axis-aligned one.
        let big = Box3D::new([0.0; 3], [2.0, 2.0, 1.0], 0.0).unwrap();
        let small = Box3D::new([0.0; 3], [1.0, 1.0, 1.0], PI / 4.0).unwrap();
        assert!((bev_intersection_area(&big, &small) - 1.0).abs() < 1e-12);
        assert!((iou3d(&big, &small) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn cross_shaped_overlap() {
        // Two 4x1 bars crossing at right angles overlap in a unit square.
        let a = Box3D::new([0.0; 3], [4.0, 1.0, 1.0], 0.0).unwrap();
        let b = Box3D::new([0.0; 3], [4.0, 1.0, 1.0], PI / 2.0).unwrap();
        assert!((bev_intersection_area(&a, &b) - 1.0).abs() < 1e-12);
        assert!((iou3d(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn works_in_single_precision() {
        let a = Box3D::<f32>::new([0.0; 3], [1.0; 3], 0.0).unwrap();
        let b = Box3D::<f32>::new([0.5, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-6);
    }
}
