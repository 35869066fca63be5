//! Finite-difference checks of every differentiable building block and of
//! the matching and fusion composites.
//!
//! Each case builds a scalar loss from random inputs and parameters; the
//! analytic gradient from the tape is compared against central differences
//! of the forward pass alone.

use boxmatch::diffnum::gradcheck::{rel_err, GradCheck, FD_STEP};
use boxmatch::diffnum::nn::{
    attention, declare_attention, declare_decoder, declare_mlp, decoder_block, linear_named, mlp_named,
    multi_head_attention, softmax,
};
use boxmatch::diffnum::{DecoderShape, Graph, ParamStore, Tensor, Var};
use boxmatch::model::ModelConfig;
use boxmatch::worldsim::{BevGrid, Box2D, Proposal2D, Proposal3D, ViewFeatureMap};
use boxmatch::{fusionhead, propmatch, viewmatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative errors are taken against `max(|analytic|, |numeric|, FLOOR)`
/// so coordinates with vanishing gradients are judged on absolute error.
pub const FLOOR: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

type Loss = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> boxmatch::Result<Var>;

#[derive(Clone, Debug)]
enum Coord {
    Input(usize, usize),
    Param(String, usize),
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn eval(store: &ParamStore<f64>, inputs: &[Tensor<f64>], loss: &Loss) -> f64 {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let l = loss(&mut g, &vars).expect("loss builds");
    g.scalar_value(l)
}

/// Compares tape gradients with central differences on all input
/// coordinates and on `param_budget` parameter coordinates (all when
/// `None`), spread round-robin over the parameter tensors.
fn check(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    loss: &Loss,
    param_budget: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let l = loss(&mut g, &vars).expect("loss builds");
    let grads = g.backward(l);
    let pgrads = g.param_grads(&grads);
    let igrads: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut coords: Vec<Coord> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        coords.extend((0..t.len()).map(|k| Coord::Input(i, k)));
    }
    let names: Vec<(String, usize)> = store.iter().map(|(n, t)| (n.to_string(), t.len())).collect();
    match param_budget {
        None => {
            for (n, len) in &names {
                coords.extend((0..*len).map(|k| Coord::Param(n.clone(), k)));
            }
        }
        Some(budget) if !names.is_empty() => {
            for j in 0..budget {
                let (n, len) = &names[j % names.len()];
                coords.push(Coord::Param(n.clone(), rng.random_range(0..*len)));
            }
        }
        Some(_) => {}
    }

    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: coords.len(),
    };
    for c in coords {
        let (analytic, numeric) = match &c {
            Coord::Input(i, k) => {
                let mut probe = inputs.to_vec();
                let x0 = probe[*i].data()[*k];
                probe[*i].data_mut()[*k] = x0 + FD_STEP;
                let up = eval(store, &probe, loss);
                probe[*i].data_mut()[*k] = x0 - FD_STEP;
                let down = eval(store, &probe, loss);
                (igrads[*i].data()[*k], (up - down) / (2.0 * FD_STEP))
            }
            Coord::Param(name, k) => {
                let mut s = store.clone();
                let x0 = s.get(name).unwrap().data()[*k];
                s.get_mut(name).unwrap().data_mut()[*k] = x0 + FD_STEP;
                let up = eval(&s, inputs, loss);
                s.get_mut(name).unwrap().data_mut()[*k] = x0 - FD_STEP;
                let down = eval(&s, inputs, loss);
                (pgrads[name].data()[*k], (up - down) / (2.0 * FD_STEP))
            }
        };
        out.max_rel_err = out.max_rel_err.max(rel_err(analytic, numeric, FLOOR));
        out.max_abs_err = out.max_abs_err.max((analytic - numeric).abs());
    }
    out
}

/// Projects any matrix onto a scalar with fixed random weights.
fn project(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> boxmatch::Result<Var> {
    let (r, c) = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.dot_const(x, w)
}

pub const OPS: [&str; 10] = [
    "linear",
    "mlp",
    "softmax",
    "attention",
    "multi_head_attention",
    "decoder_block",
    "cross_entropy",
    "layer_norm",
    "matching_composite",
    "fusion_composite",
];

/// Runs one op family for one seed.
pub fn check_op(op: &str, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let n = rng.random_range(1..5);
    match op {
        "linear" => {
            let (din, dout) = (rng.random_range(1..6), rng.random_range(1..6));
            store.init_linear("l", din, dout, &mut rng).unwrap();
            let x = rand_tensor(&mut rng, vec![n, din], 1.0);
            let loss = move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = linear_named(g, "l", v[0])?;
                project(g, y, seed)
            };
            check(&store, &[x], &loss, None, &mut rng)
        }
        "mlp" => {
            let dims = [rng.random_range(1..6), rng.random_range(2..8), rng.random_range(1..5)];
            declare_mlp(&mut store, "m", &dims, &mut rng).unwrap();
            let x = rand_tensor(&mut rng, vec![n, dims[0]], 1.0);
            let loss = move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = mlp_named(g, "m", 2, v[0])?;
                project(g, y, seed)
            };
            check(&store, &[x], &loss, None, &mut rng)
        }
        "softmax" => {
            let cols = rng.random_range(1..7);
            let x = rand_tensor(&mut rng, vec![n, cols], 3.0);
            let axis = (seed % 2) as usize;
            let loss = move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = softmax(g, v[0], axis)?;
                project(g, y, seed)
            };
            check(&store, &[x], &loss, None, &mut rng)
        }
        "attention" => {
            let (nk, d) = (rng.random_range(1..6), rng.random_range(1..6));
            let q = rand_tensor(&mut rng, vec![n, d], 1.0);
            let k = rand_tensor(&mut rng, vec![nk, d], 1.0);
            let dv = rng.random_range(1..5);
            let vv = rand_tensor(&mut rng, vec![nk, dv], 1.0);
            let mask = random_mask(&mut rng, n, nk);
            let loss = move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = attention(g, v[0], v[1], v[2], mask.as_ref())?;
                project(g, y, seed)
            };
            check(&store, &[q, k, vv], &loss, None, &mut rng)
        }
        "multi_head_attention" => {
            let heads = rng.random_range(1..3);
            let c = heads * rng.random_range(1..4);
            let nk = rng.random_range(1..5);
            declare_attention(&mut store, "a", c, &mut rng).unwrap();
            let q = rand_tensor(&mut rng, vec![n, c], 1.0);
            let k = rand_tensor(&mut rng, vec![nk, c], 1.0);
            let mask = random_mask(&mut rng, n, nk);
            let loss = move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = multi_head_attention(g, "a", v[0], v[1], v[1], mask.as_ref(), heads)?;
                project(g, y, seed)
            };
            check(&store, &[q, k], &loss, None, &mut rng)
        }
        "decoder_block" => {
            let heads = 2;
            let c = 4;
            let nk = rng.random_range(1..5);
            let shape = DecoderShape {
                width: c,
                heads,
                ffn: 2 * c,
            };
            declare_decoder(&mut store, "d", shape, &mut rng).unwrap();
            let q = rand_tensor(&mut rng, vec![n.max(2), c], 1.0);
            let k = rand_tensor(&mut rng, vec![nk, c], 1.0);
            let vv = rand_tensor(&mut rng, vec![nk, c], 1.0);
            let mask = random_mask(&mut rng, n.max(2), nk);
            let loss = move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = decoder_block(g, "d", v[0], v[1], v[2], mask.as_ref(), heads)?;
                project(g, y, seed)
            };
            check(&store, &[q, k, vv], &loss, Some(96), &mut rng)
        }
        "cross_entropy" => {
            let classes = rng.random_range(1..7);
            let x = rand_tensor(&mut rng, vec![n, classes], 3.0);
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let loss = move |g: &mut Graph<'_, f64>, v: &[Var]| g.cross_entropy(v[0], &targets);
            check(&store, &[x], &loss, None, &mut rng)
        }
        "layer_norm" => {
            let c = rng.random_range(2..7);
            let x = rand_tensor(&mut rng, vec![n, c], 2.0);
            let gamma = rand_tensor(&mut rng, vec![c], 1.5);
            let beta = rand_tensor(&mut rng, vec![c], 1.0);
            let loss = move |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                project(g, y, seed)
            };
            check(&store, &[x, gamma, beta], &loss, None, &mut rng)
        }
        "matching_composite" => matching_composite(seed, &mut rng),
        "fusion_composite" => fusion_composite(seed, &mut rng),
        other => panic!("unknown op {other}"),
    }
}

fn random_mask(rng: &mut ChaCha8Rng, nq: usize, nk: usize) -> Option<Tensor<f64>> {
    if !rng.random_bool(0.5) {
        return None;
    }
    // at least one open key per row
    let mut data = vec![0.0; nq * nk];
    for r in 0..nq {
        let keep = rng.random_range(0..nk);
        for c in 0..nk {
            if c != keep && rng.random_bool(0.4) {
                data[r * nk + c] = -1e6;
            }
        }
    }
    Some(Tensor::new(vec![nq, nk], data).unwrap())
}

pub fn small_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        c: 4,
        n_views: rng.random_range(2..4),
        n_classes: 3,
        heads: 2,
        feat_h: 2,
        feat_w: 3,
        img_w: 60.0,
        img_h: 40.0,
        world_extent: [10.0, 10.0],
    }
}

pub fn random_fmap(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> ViewFeatureMap {
    let mut f = ViewFeatureMap::zeros(cfg.n_views, cfg.feat_h, cfg.feat_w, cfg.c);
    f.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    f
}

pub fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Box2D {
    let (x1, y1) = (rng.random_range(0.0..0.8 * w), rng.random_range(0.0..0.8 * h));
    Box2D::new(x1, y1, x1 + rng.random_range(0.1 * w..0.5 * w), y1 + rng.random_range(0.1 * h..0.5 * h))
}

pub fn random_proposals2d(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize) -> Vec<Proposal2D> {
    (0..n)
        .map(|_| Proposal2D {
            view: rng.random_range(0..cfg.n_views),
            bbox: random_box(rng, cfg.img_w, cfg.img_h),
            class_id: rng.random_range(0..cfg.n_classes),
            score: 1.0,
            src_object: None,
        })
        .collect()
}

pub fn random_proposals3d(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize) -> Vec<Proposal3D> {
    (0..n)
        .map(|_| Proposal3D {
            center: [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(0.0..2.0)],
            size: [rng.random_range(1.0..4.0), rng.random_range(1.0..3.0), 1.5],
            yaw: rng.random_range(-3.0..3.0),
            class_logits: (0..cfg.n_classes).map(|_| rng.random_range(-1.0..1.0)).collect(),
            feature: (0..cfg.c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            src_object: None,
        })
        .collect()
}

/// View classification (position embedding, view cross-attention, view
/// MLP, absent-view mask, cross-entropy) plus the proposal-level matching
/// matrix with its row cross-entropy.
fn matching_composite(seed: u64, rng: &mut ChaCha8Rng) -> GradCheck {
    let cfg = small_config(rng);
    let mut store = ParamStore::new();
    viewmatch::declare(&mut store, cfg.c, cfg.n_views, rng).unwrap();
    propmatch::declare(&mut store, &cfg, rng).unwrap();
    let n3 = rng.random_range(1..4);
    let n2 = rng.random_range(0..4);
    let mut fmap = random_fmap(rng, &cfg);
    if rng.random_bool(0.3) {
        fmap.present[0] = false;
        fmap.view_mut(0).iter_mut().for_each(|x| *x = 0.0);
    }
    let p2 = random_proposals2d(rng, &cfg, n2);
    let p3 = random_proposals3d(rng, &cfg, n3);
    let centers: Vec<[f64; 3]> = p3.iter().map(|p| p.center).collect();
    let classes: Vec<usize> = p3.iter().map(|p| p.class_id()).collect();
    let view_targets: Vec<usize> = (0..n3).map(|_| rng.random_range(1..cfg.n_views + 1)).collect();
    let match_targets: Vec<usize> = (0..n3).map(|_| rng.random_range(0..n2 + 1)).collect();
    let f3d = rand_tensor(rng, vec![n3, cfg.c], 1.0);
    let collapsed = viewmatch::collapse_height::<f64>(&fmap);
    let loss = move |g: &mut Graph<'_, f64>, v: &[Var]| {
        let pos = viewmatch::pos_embed_3d(g, &centers, cfg.world_extent)?;
        let ca = viewmatch::view_cross_attention(g, v[0], &collapsed, cfg.n_views, &fmap.present, cfg.heads)?;
        let logits = viewmatch::classify_views(g, ca, v[0], pos)?;
        let logits = viewmatch::mask_absent_views(g, logits, &fmap.present)?;
        let l_view = g.cross_entropy(logits, &view_targets)?;
        let (roi, _) = propmatch::roi_features_2d(g, &cfg, &fmap, &p2)?;
        let e2 = propmatch::embed_2d(g, &cfg, roi, &p2)?;
        let e3 = propmatch::embed_3d(g, &cfg, v[0], &classes, &centers)?;
        let m = propmatch::matching_matrix(g, e3, e2)?;
        let l_pro = g.cross_entropy(m, &match_targets)?;
        let _ = seed;
        g.weighted_sum(&[(l_view, 1.0), (l_pro, 0.7)])
    };
    check(&store, &[f3d], &loss, Some(64), rng)
}

/// Query–pixel decoder with the ROI mask, score-weighted query–ROI MLP,
/// BEV ROI pooling with the ROI–ROI decoder, and the prediction head under
/// the detection loss.
fn fusion_composite(seed: u64, rng: &mut ChaCha8Rng) -> GradCheck {
    let cfg = small_config(rng);
    let mut store = ParamStore::new();
    fusionhead::declare(&mut store, &cfg, rng).unwrap();
    let n3 = rng.random_range(1..4);
    let n2 = rng.random_range(1..4);
    let matched: Vec<Option<usize>> = (0..n3)
        .map(|_| rng.random_bool(0.6).then(|| rng.random_range(0..n2)))
        .collect();
    let boxes: Vec<Option<(usize, Box2D)>> = matched
        .iter()
        .map(|m| m.map(|_| (rng.random_range(0..cfg.n_views), random_box(rng, cfg.feat_w as f64, cfg.feat_h as f64))))
        .collect();
    let mask = fusionhead::build_roi_mask::<f64>(cfg.n_views, cfg.feat_h, cfg.feat_w, &boxes);
    let scores: Vec<f64> = matched.iter().map(|m| m.map_or(0.0, |_| rng.random_range(0.1..1.0))).collect();
    let mut bev = BevGrid::zeros(cfg.world_extent, 1.0, cfg.c).unwrap();
    bev.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    let p3 = random_proposals3d(rng, &cfg, n3);
    let classes: Vec<usize> = (0..n3).map(|_| rng.random_range(0..cfg.n_classes + 1)).collect();
    let delta_targets: Vec<f64> = (0..n3 * fusionhead::N_DELTAS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f3d = rand_tensor(rng, vec![n3, cfg.c], 1.0);
    let pixels = rand_tensor(rng, vec![cfg.n_views * cfg.feat_h * cfg.feat_w, cfg.c], 1.0);
    let roi2d = rand_tensor(rng, vec![n2, cfg.c], 1.0);
    let loss = move |g: &mut Graph<'_, f64>, v: &[Var]| {
        let o1 = fusionhead::query_pixel_fusion(g, v[0], v[1], &mask, cfg.heads)?;
        let roi_bar = g.gather_rows(v[2], matched.clone())?;
        let o2 = fusionhead::query_roi_fusion(g, v[0], roi_bar, &scores)?;
        let roi3d = fusionhead::roi_features_3d(g, &bev, &p3)?;
        let o3 = fusionhead::roi_roi_fusion(g, roi3d, roi_bar, cfg.heads)?;
        let pred = fusionhead::fuse_predict(g, o1, o2, o3)?;
        let logits = g.slice_cols(pred, 0, cfg.n_classes + 1)?;
        let ce = g.cross_entropy(logits, &classes)?;
        let deltas = g.slice_cols(pred, cfg.n_classes + 1, fusionhead::N_DELTAS)?;
        let l1 = g.l1(deltas, &delta_targets)?;
        let _ = seed;
        g.weighted_sum(&[(ce, 1.0), (l1, 1.0)])
    };
    check(&store, &[f3d, pixels, roi2d], &loss, Some(64), rng)
}

/// Worst result per op family over `seeds` seeds.
pub fn run_suite(seeds: u64) -> Vec<(&'static str, GradCheck)> {
    use rayon::prelude::*;
    OPS.par_iter()
        .map(|&op| {
            let worst = (0..seeds)
                .map(|s| check_op(op, s))
                .reduce(GradCheck::merge)
                .expect("at least one seed");
            (op, worst)
        })
        .collect()
}
