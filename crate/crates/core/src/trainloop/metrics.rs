//! Geometry for detection scoring: rotated ground-plane box overlap.

use crate::worldsim::Vec3;

/// Ground-plane corners of a rotated box, counter-clockwise.
pub fn footprint_polygon(center: &Vec3, size: &Vec3, yaw: f64) -> [[f64; 2]; 4] {
    let (s, c) = yaw.sin_cos();
    let (hl, hw) = (size[0] / 2.0, size[1] / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(lx, ly)| {
        [center[0] + c * lx - s * ly, center[1] + s * lx + c * ly]
    })
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive when counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        / 2.0
}

/// Intersection of two convex counter-clockwise polygons
/// (Sutherland–Hodgman).
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut out);
        for k in 0..input.len() {
            let p = input[k];
            let q = input[(k + 1) % input.len()];
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Bird's-eye-view IoU of two rotated boxes.
pub fn bev_iou(c1: &Vec3, s1: &Vec3, yaw1: f64, c2: &Vec3, s2: &Vec3, yaw2: f64) -> f64 {
    let a = footprint_polygon(c1, s1, yaw1);
    let b = footprint_polygon(c2, s2, yaw2);
    let inter = polygon_area(&clip_convex(&a, &b)).max(0.0);
    let union = s1[0] * s1[1] + s2[0] * s2[1] - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}
