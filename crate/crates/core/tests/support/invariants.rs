//! Structural invariants evaluated over many random instances. Each check
//! returns the worst violation it saw (0 when the property holds exactly).

use boxmatch::diffnum::nn::attention;
use boxmatch::diffnum::{softmax_axis, Graph, ParamStore, Tape, Tensor};
use boxmatch::fusionhead::query_roi_input;
use boxmatch::propmatch::matching_matrix;
use boxmatch::worldsim::{generate_scene, make_gt_correspondences, simulate_camera_branch, simulate_lidar_branch};
use boxmatch::worldsim::{DisturbanceSpec, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rows of `M_g` that are not one-hot, over `scenes` simulated scenes.
pub fn gt_rows_not_one_hot(scenes: u64) -> usize {
    let cfg = SimConfig {
        feature_dim: 8,
        ..SimConfig::default()
    };
    let mut bad = 0;
    for seed in 0..scenes {
        let scene = generate_scene(&cfg.scene, seed).unwrap();
        let (p3, _) = simulate_lidar_branch(&scene, &cfg, seed).unwrap();
        let spec = DisturbanceSpec {
            async_dt: (seed % 3) as f64 * 0.5,
            ..DisturbanceSpec::default()
        };
        let (_, p2) = simulate_camera_branch(&scene, &spec, &cfg, seed).unwrap();
        let gt = make_gt_correspondences(&scene, &p3, &p2, &scene.rig).unwrap();
        bad += gt
            .m_g
            .iter()
            .filter(|row| row.len() != p2.len() + 1 || row.iter().map(|&x| x as usize).sum::<usize>() != 1 || row.iter().any(|&x| x > 1))
            .count();
    }
    bad
}

/// Largest magnitude in the null column of `M_p`.
pub fn null_column_max(instances: u64) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4e);
        let (n3, n2, c) = (rng.random_range(1..10), rng.random_range(0..10), rng.random_range(1..16));
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::new(vec![n3, c], (0..n3 * c).map(|_| rng.random_range(-1e3..1e3)).collect()).unwrap());
        let b = g.input(Tensor::new(vec![n2, c], (0..n2 * c).map(|_| rng.random_range(-1e3..1e3)).collect()).unwrap());
        let m = matching_matrix(&mut g, a, b).unwrap();
        let v = g.value(m);
        for i in 0..n3 {
            worst = worst.max(v.at(i, n2).abs());
        }
    }
    worst
}

/// Largest `|Σ_j p_ij − 1|` over random logits, including extreme ones.
pub fn softmax_row_sum_err(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x50);
        let (r, c) = (rng.random_range(1..8), rng.random_range(1..20));
        let scale = [1.0, 30.0, 1e4, 1e6][rng.random_range(0..4)];
        let t = Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
        let p = softmax_axis(&t, 1).unwrap();
        for i in 0..r {
            worst = worst.max((p.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}

/// Largest attention weight on a key masked with −1e6. Values are the
/// identity, so the attention output is the weight matrix itself.
pub fn masked_key_max_weight(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d);
        let (nq, nk, d) = (rng.random_range(1..6), rng.random_range(2..10), rng.random_range(1..9));
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::new(vec![nq, d], (0..nq * d).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap());
        let k = tape.leaf(Tensor::new(vec![nk, d], (0..nk * d).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap());
        let v = tape.leaf(Tensor::identity(nk));
        let mut mask = vec![0.0; nq * nk];
        for r in 0..nq {
            let keep = rng.random_range(0..nk);
            for c in 0..nk {
                if c != keep && rng.random_bool(0.5) {
                    mask[r * nk + c] = -1e6;
                }
            }
        }
        let m = Tensor::new(vec![nq, nk], mask.clone()).unwrap();
        let w = attention(&mut tape, q, k, v, Some(&m)).unwrap();
        let w = tape.value(w);
        for (x, mk) in w.data().iter().zip(&mask) {
            if *mk != 0.0 {
                worst = worst.max(*x);
            }
        }
    }
    worst
}

/// Largest magnitude in the image half of the query–ROI input for
/// unmatched proposals (score 0, null ROI row).
pub fn unmatched_image_half_max(instances: u64) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0f);
        let (n3, n2, c) = (rng.random_range(1..12), rng.random_range(0..8), rng.random_range(1..16));
        let matched: Vec<Option<usize>> = (0..n3)
            .map(|_| (n2 > 0 && rng.random_bool(0.5)).then(|| rng.random_range(0..n2)))
            .collect();
        let scores: Vec<f64> = matched.iter().map(|m| m.map_or(0.0, |_| rng.random_range(0.1..1.0))).collect();
        let mut g = Graph::new(&store);
        let f3d = g.input(Tensor::new(vec![n3, c], (0..n3 * c).map(|_| rng.random_range(-9.0..9.0)).collect()).unwrap());
        let roi = g.input(Tensor::new(vec![n2, c], (0..n2 * c).map(|_| rng.random_range(-9.0..9.0)).collect()).unwrap());
        let roi_bar = g.gather_rows(roi, matched.clone()).unwrap();
        let x = query_roi_input(&mut g, f3d, roi_bar, &scores).unwrap();
        let v = g.value(x);
        for (i, m) in matched.iter().enumerate() {
            if m.is_none() {
                for &y in &v.row(i)[c..] {
                    worst = worst.max(y.abs());
                }
            }
        }
    }
    worst
}
