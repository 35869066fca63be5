//! Scalar reference implementations checked against the library.

use boxmatch::diffnum::{Graph, ParamStore, Tensor};
use boxmatch::fusionhead::roi3d_pool_raw;
use boxmatch::propmatch::{extract_pairs, matching_matrix, roi_pool_2d_raw, RowMatch};
use boxmatch::trainloop::metrics::footprint_polygon;
use boxmatch::worldsim::{BevGrid, Box2D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(rng: &mut ChaCha8Rng, n: usize, c: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..c).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

/// `Σ_k a_ik·b_jk / √C` with a trailing all-zero column.
pub fn matching_matrix_oracle(e3: &[Vec<f64>], e2: &[Vec<f64>], c: usize) -> Vec<Vec<f64>> {
    e3.iter()
        .map(|a| {
            let mut row: Vec<f64> = e2
                .iter()
                .map(|b| {
                    let mut s = 0.0;
                    for k in 0..c {
                        s += a[k] * b[k];
                    }
                    s / (c as f64).sqrt()
                })
                .collect();
            row.push(0.0);
            row
        })
        .collect()
}

/// Largest deviation over `instances` random instances with up to 16
/// proposals against up to 12 boxes (+ null).
pub fn matching_matrix_max_err(instances: u64) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n3, n2, c) = (rng.random_range(1..=16), rng.random_range(0..=12), rng.random_range(1..=32));
        let a = random_rows(&mut rng, n3, c, 2.0);
        let b = random_rows(&mut rng, n2, c, 2.0);
        let mut g = Graph::new(&store);
        let e3 = g.input(Tensor::from_rows(&a).unwrap());
        let e2 = g.input(if n2 == 0 { Tensor::zeros(vec![0, c]) } else { Tensor::from_rows(&b).unwrap() });
        let m = matching_matrix(&mut g, e3, e2).unwrap();
        let got = g.value(m);
        assert_eq!((got.rows(), got.cols()), (n3, n2 + 1));
        for (i, row) in matching_matrix_oracle(&a, &b, c).iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                worst = worst.max((got.at(i, j) - x).abs());
            }
        }
    }
    worst
}

/// Row scan: softmax, first maximal column, null/threshold test.
pub fn extract_pairs_oracle(m: &[Vec<f64>], threshold: f64) -> Vec<RowMatch> {
    m.iter()
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|x| x / z).collect();
            let mut best = 0;
            for j in 1..p.len() {
                if p[j] > p[best] {
                    best = j;
                }
            }
            if best + 1 < p.len() && p[best] >= threshold {
                RowMatch {
                    column: Some(best),
                    score: Some(p[best]),
                }
            } else {
                RowMatch {
                    column: None,
                    score: None,
                }
            }
        })
        .collect()
}

/// Number of rows (over `instances` matrices) where the library and the
/// oracle disagree in any way.
pub fn extract_pairs_mismatches(instances: u64) -> usize {
    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7);
        let (n3, cols) = (rng.random_range(0..=16), rng.random_range(1..=13));
        let mut m = random_rows(&mut rng, n3, cols, 4.0);
        // exact ties and flat rows exercise the tie rule and the threshold
        if n3 > 0 && cols > 1 && rng.random_bool(0.3) {
            m[0][1] = m[0][0];
        }
        if n3 > 1 && rng.random_bool(0.2) {
            m[1].iter_mut().for_each(|x| *x = 0.5);
        }
        for row in m.iter_mut() {
            row[cols - 1] = 0.0;
        }
        let threshold = [0.0, 0.1, 0.3, 0.9][rng.random_range(0..4)];
        let t = if n3 == 0 { Tensor::zeros(vec![0, cols]) } else { Tensor::from_rows(&m).unwrap() };
        let got = extract_pairs(&t, threshold);
        let want = extract_pairs_oracle(&m, threshold);
        bad += got.iter().zip(&want).filter(|(a, b)| a != b).count() + got.len().abs_diff(want.len());
    }
    bad
}

/// Clamped bilinear interpolation of channel `ch` between cell centers.
fn bilinear(view: &[f64], h: usize, w: usize, c: usize, ch: usize, x: f64, y: f64) -> f64 {
    let axis = |t: f64, n: usize| -> (usize, usize, f64) {
        let u = (t - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let (c0, c1, fx) = axis(x, w);
    let (r0, r1, fy) = axis(y, h);
    let at = |r: usize, col: usize| view[(r * w + col) * c + ch];
    (1.0 - fy) * ((1.0 - fx) * at(r0, c0) + fx * at(r0, c1)) + fy * ((1.0 - fx) * at(r1, c0) + fx * at(r1, c1))
}

/// Sub-intervals of `[a, b]` between interpolation breakpoints, on each of
/// which the field is a polynomial of degree one in that coordinate.
fn pieces(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let mut cuts = vec![a];
    for i in 0..n {
        let m = i as f64 + 0.5;
        if m > a && m < b {
            cuts.push(m);
        }
    }
    cuts.push(b);
    cuts.windows(2).map(|p| (p[0], p[1])).collect()
}

/// 2-point Gauss–Legendre nodes/weights mapped to `[a, b]`.
fn gauss2(a: f64, b: f64) -> [(f64, f64); 2] {
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    let d = half / 3f64.sqrt();
    [(mid - d, half), (mid + d, half)]
}

/// Mean over `grid × grid` bins of each bin's average of the interpolated
/// field, by exact piecewise quadrature.
pub fn roi_pool_2d_oracle(view: &[f64], h: usize, w: usize, c: usize, b: &Box2D, grid: usize) -> Option<Vec<f64>> {
    let b = b.clip(w as f64, h as f64);
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return None;
    }
    let (sx, sy) = (b.width() / grid as f64, b.height() / grid as f64);
    let mut out = vec![0.0; c];
    for (ch, o) in out.iter_mut().enumerate() {
        let mut total = 0.0;
        for by in 0..grid {
            let (y0, y1) = (b.y1 + by as f64 * sy, b.y1 + (by + 1) as f64 * sy);
            for bx in 0..grid {
                let (x0, x1) = (b.x1 + bx as f64 * sx, b.x1 + (bx + 1) as f64 * sx);
                let mut integral = 0.0;
                for (ya, yb) in pieces(y0, y1, h) {
                    for (xa, xb) in pieces(x0, x1, w) {
                        for (y, wy) in gauss2(ya, yb) {
                            for (x, wx) in gauss2(xa, xb) {
                                integral += wx * wy * bilinear(view, h, w, c, ch, x, y);
                            }
                        }
                    }
                }
                total += integral / (sx * sy);
            }
        }
        *o = total / (grid * grid) as f64;
    }
    Some(out)
}

pub fn roi_pool_2d_max_err(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2d);
        let (h, w, c) = (rng.random_range(1..=7), rng.random_range(1..=13), rng.random_range(1..=4));
        let view: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x1 = rng.random_range(-1.0..w as f64);
        let y1 = rng.random_range(-1.0..h as f64);
        let b = Box2D::new(x1, y1, x1 + rng.random_range(0.05..w as f64), y1 + rng.random_range(0.05..h as f64));
        let grid = rng.random_range(1..=7);
        match (roi_pool_2d_raw(&view, h, w, c, &b, grid), roi_pool_2d_oracle(&view, h, w, c, &b, grid)) {
            (Some(a), Some(o)) => {
                for (x, y) in a.iter().zip(&o) {
                    worst = worst.max((x - y).abs());
                }
            }
            (None, None) => {}
            _ => return f64::INFINITY,
        }
    }
    worst
}

/// Even–odd ray casting against a polygon.
fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Mean feature of the cells whose centers the footprint polygon contains.
pub fn roi3d_pool_oracle(bev: &BevGrid, center: &[f64; 3], size: &[f64; 3], yaw: f64) -> Option<Vec<f64>> {
    let poly = footprint_polygon(center, size, yaw);
    let mut sum = vec![0.0; bev.channels];
    let mut n = 0usize;
    for r in 0..bev.rows {
        for col in 0..bev.cols {
            let p = [
                -bev.extent[0] + (col as f64 + 0.5) * bev.cell,
                -bev.extent[1] + (r as f64 + 0.5) * bev.cell,
            ];
            if point_in_polygon(p, &poly) {
                n += 1;
                for (s, x) in sum.iter_mut().zip(&bev.data[(r * bev.cols + col) * bev.channels..]) {
                    *s += x;
                }
            }
        }
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

pub fn roi3d_pool_max_err(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3d);
        let cell = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let mut bev = BevGrid::zeros([8.0, 6.0], cell, 3).unwrap();
        bev.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let center = [rng.random_range(-10.0..10.0), rng.random_range(-8.0..8.0), 0.0];
        let size = [rng.random_range(0.3..6.0), rng.random_range(0.3..4.0), 1.5];
        let yaw = rng.random_range(-3.2..3.2);
        match (roi3d_pool_raw(&bev, &center, &size, yaw), roi3d_pool_oracle(&bev, &center, &size, yaw)) {
            (Some(a), Some(o)) => {
                for (x, y) in a.iter().zip(&o) {
                    worst = worst.max((x - y).abs());
                }
            }
            (None, None) => {}
            _ => return f64::INFINITY,
        }
    }
    worst
}
