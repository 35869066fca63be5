//! Proposal-level matching: 2D and 3D proposals are embedded from ROI,
//! class and position cues, scored against each other with a scaled dot
//! product plus a null column, and thresholded row by row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::nn::{declare_mlp, mlp_named};
use crate::diffnum::{softmax_axis, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::worldsim::{Box2D, Proposal2D, ViewFeatureMap};
use crate::Scalar;

/// Bins per side of the 2D ROI pooling grid.
pub const POOL_GRID: usize = 7;

/// Default probability a match must reach.
pub const MATCH_THRESHOLD: f64 = 0.1;

/// Scores of the 3D proposals routed to one view against that view's 2D
/// proposals; the last column is the null ("unmatched") score.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingMatrix<S> {
    pub view: usize,
    /// 3D proposal index of every row.
    pub rows: Vec<usize>,
    /// Index into the scene's 2D proposal list of every non-null column.
    pub cols: Vec<usize>,
    pub scores: Tensor<S>,
}

/// Outcome of thresholding one row of a matching matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowMatch {
    /// Matched column (never the null column).
    pub column: Option<usize>,
    /// Softmax probability of the matched column.
    pub score: Option<f64>,
}

/// Final per-proposal match after merging the candidate views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub proposal: usize,
    pub view: Option<usize>,
    pub box2d_index: Option<usize>,
    pub score: Option<f64>,
}

impl MatchResult {
    pub fn unmatched(proposal: usize) -> Self {
        Self {
            proposal,
            view: None,
            box2d_index: None,
            score: None,
        }
    }

    pub fn is_matched(&self) -> bool {
        self.box2d_index.is_some()
    }
}

/// A pixel box expressed in feature-grid coordinates.
pub fn to_grid_box(bbox: &Box2D, img_w: f64, img_h: f64, h: usize, w: usize) -> Box2D {
    bbox.scaled(w as f64 / img_w, h as f64 / img_h)
}

/// `∫_a^b φ_i(x) dx` for the 1D basis of linear interpolation between cell
/// centers `i + 0.5`, held constant beyond the first and last center.
fn basis_integral(i: usize, n: usize, a: f64, b: f64) -> f64 {
    let m = i as f64 + 0.5;
    let (la, lb) = (a.min(m), b.min(m));
    let left = if lb <= la {
        0.0
    } else if i == 0 {
        lb - la
    } else {
        let up = |d: f64| if d <= -1.0 { 0.0 } else { 0.5 * (1.0 + d) * (1.0 + d) };
        up(lb - m) - up(la - m)
    };
    let (ra, rb) = (a.max(m), b.max(m));
    let right = if rb <= ra {
        0.0
    } else if i + 1 == n {
        rb - ra
    } else {
        let down = |d: f64| if d >= 1.0 { 0.5 } else { d - 0.5 * d * d };
        down(rb - m) - down(ra - m)
    };
    left + right
}

/// Per-cell weights whose dot product with a 1D signal gives the mean over
/// `grid` equal bins of each bin's exact average of the interpolated signal.
fn pooling_weights(lo: f64, hi: f64, n: usize, grid: usize) -> Vec<f64> {
    let mut wts = vec![0.0; n];
    let step = (hi - lo) / grid as f64;
    for bin in 0..grid {
        let a = lo + bin as f64 * step;
        let b = a + step;
        for (i, wt) in wts.iter_mut().enumerate() {
            *wt += basis_integral(i, n, a, b) / (step * grid as f64);
        }
    }
    wts
}

/// Pooled (pre-MLP) ROI feature of one `H × W × C` map.
///
/// The map is read as a bilinearly interpolated field over cell centers;
/// each of the `grid × grid` bins contributes its exact area average. Returns
/// `None` when the box has no area inside the map.
pub fn roi_pool_2d_raw(view: &[f64], h: usize, w: usize, c: usize, grid_box: &Box2D, grid: usize) -> Option<Vec<f64>> {
    let b = grid_box.clip(w as f64, h as f64);
    if !(b.width() > 0.0 && b.height() > 0.0) || grid == 0 {
        return None;
    }
    let wx = pooling_weights(b.x1, b.x2, w, grid);
    let wy = pooling_weights(b.y1, b.y2, h, grid);
    let mut out = vec![0.0; c];
    for (r, &ry) in wy.iter().enumerate() {
        if ry == 0.0 {
            continue;
        }
        for (col, &cx) in wx.iter().enumerate() {
            let wt = ry * cx;
            if wt == 0.0 {
                continue;
            }
            let cell = &view[(r * w + col) * c..(r * w + col + 1) * c];
            for (o, &x) in out.iter_mut().zip(cell) {
                *o += wt * x;
            }
        }
    }
    Some(out)
}

pub fn declare<S: Scalar, R: Rng>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let c = cfg.c;
    declare_mlp(store, "match.roi2d", &[c, c, c], rng)?;
    declare_mlp(store, "match.cls2d", &[cfg.n_classes, c, c], rng)?;
    declare_mlp(store, "match.pos2d", &[4 + cfg.n_views, c, c], rng)?;
    declare_mlp(store, "match.com2d", &[3 * c, c, c], rng)?;
    declare_mlp(store, "match.cls3d", &[cfg.n_classes, c, c], rng)?;
    declare_mlp(store, "match.pos3d", &[3, c, c], rng)?;
    declare_mlp(store, "match.com3d", &[3 * c, c, c], rng)
}

/// ROI features of all 2D proposals: pooled, then an MLP. Rows of
/// degenerate boxes are exactly zero and flagged `true`.
pub fn roi_features_2d<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    fmap: &ViewFeatureMap,
    proposals: &[Proposal2D],
) -> Result<(Var, Vec<bool>)> {
    let c = fmap.c;
    let mut pooled = Vec::new();
    let mut index = Vec::with_capacity(proposals.len());
    let mut degenerate = Vec::with_capacity(proposals.len());
    for p in proposals {
        if p.view >= fmap.n_views {
            return Err(Error::shape(format!("2D proposal in view {} of {}", p.view, fmap.n_views)));
        }
        let gb = to_grid_box(&p.bbox, cfg.img_w, cfg.img_h, fmap.h, fmap.w);
        match roi_pool_2d_raw(fmap.view(p.view), fmap.h, fmap.w, c, &gb, POOL_GRID) {
            Some(v) => {
                index.push(Some(pooled.len() / c));
                pooled.extend(v.into_iter().map(S::of));
                degenerate.push(false);
            }
            None => {
                index.push(None);
                degenerate.push(true);
            }
        }
    }
    let n = pooled.len() / c;
    let x = g.input(Tensor::new(vec![n, c], pooled)?);
    let y = mlp_named(g, "match.roi2d", 2, x)?;
    Ok((g.gather_rows(y, index)?, degenerate))
}

pub fn class_one_hot<S: Scalar>(ids: &[usize], n_classes: usize) -> Result<Tensor<S>> {
    let mut data = vec![S::zero(); ids.len() * n_classes];
    for (i, &id) in ids.iter().enumerate() {
        if id >= n_classes {
            return Err(Error::UnknownClass { class: id, n_classes });
        }
        data[i * n_classes + id] = S::one();
    }
    Tensor::new(vec![ids.len(), n_classes], data)
}

/// Position input of a 2D proposal: corners normalized by the image size,
/// followed by a one-hot of its view.
pub fn box_position_input<S: Scalar>(proposals: &[Proposal2D], cfg: &ModelConfig) -> Result<Tensor<S>> {
    let width = 4 + cfg.n_views;
    let mut data = vec![S::zero(); proposals.len() * width];
    for (i, p) in proposals.iter().enumerate() {
        if p.view >= cfg.n_views {
            return Err(Error::shape(format!("2D proposal in view {} of {}", p.view, cfg.n_views)));
        }
        let row = &mut data[i * width..(i + 1) * width];
        row[0] = S::of(p.bbox.x1 / cfg.img_w);
        row[1] = S::of(p.bbox.y1 / cfg.img_h);
        row[2] = S::of(p.bbox.x2 / cfg.img_w);
        row[3] = S::of(p.bbox.y2 / cfg.img_h);
        row[4 + p.view] = S::one();
    }
    Tensor::new(vec![proposals.len(), width], data)
}

/// `F̂_2d^com = MLP(concat(F̂_2d^roi, F̂_2d^cls, F̂_2d^pos))`.
pub fn embed_2d<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    roi: Var,
    proposals: &[Proposal2D],
) -> Result<Var> {
    let ids: Vec<usize> = proposals.iter().map(|p| p.class_id).collect();
    let cls_in = g.input(class_one_hot(&ids, cfg.n_classes)?);
    let cls = mlp_named(g, "match.cls2d", 2, cls_in)?;
    let pos_in = g.input(box_position_input(proposals, cfg)?);
    let pos = mlp_named(g, "match.pos2d", 2, pos_in)?;
    let x = g.concat(&[roi, cls, pos])?;
    mlp_named(g, "match.com2d", 2, x)
}

/// `F̂_3d^com = MLP(concat(F̂_3d, F̂_3d^cls, F̂_3d^pos))`.
pub fn embed_3d<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    f3d: Var,
    class_ids: &[usize],
    centers: &[[f64; 3]],
) -> Result<Var> {
    let cls_in = g.input(class_one_hot(class_ids, cfg.n_classes)?);
    let cls = mlp_named(g, "match.cls3d", 2, cls_in)?;
    let pos_in = g.input(crate::viewmatch::normalize_centers(centers, cfg.world_extent));
    let pos = mlp_named(g, "match.pos3d", 2, pos_in)?;
    let x = g.concat(&[f3d, cls, pos])?;
    mlp_named(g, "match.com3d", 2, x)
}

/// `M_p = F̂_3d^com · (F̄_2d^com)ᵀ / √C`, where `F̄_2d^com` is `e2` with an
/// all-zero row appended.
pub fn matching_matrix<S: Scalar>(g: &mut Graph<'_, S>, e3: Var, e2: Var) -> Result<Var> {
    let (n2, c) = g.shape(e2);
    if g.shape(e3).1 != c {
        return Err(Error::shape(format!("3D embedding width {} against {c}", g.shape(e3).1)));
    }
    let bar = g.gather_rows(e2, (0..n2).map(Some).chain(std::iter::once(None)).collect())?;
    let m = g.matmul_nt(e3, bar)?;
    Ok(g.scale(m, S::one() / S::of(c as f64).sqrt()))
}

/// Row-softmax probabilities of a matching matrix.
pub fn match_probabilities<S: Scalar>(m: &Tensor<S>) -> Tensor<S> {
    softmax_axis(&m.as_matrix(), 1).expect("matrix input")
}

/// Row-wise decisions: argmax over all columns (ties to the lower index);
/// a match iff it is not the null column and its probability reaches
/// `threshold`.
pub fn extract_pairs<S: Scalar>(m: &Tensor<S>, threshold: f64) -> Vec<RowMatch> {
    let p = match_probabilities(m);
    let null = p.cols().saturating_sub(1);
    (0..p.rows())
        .map(|i| {
            let row = p.row(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            let s = row[best].as_f64();
            if best != null && s >= threshold {
                RowMatch {
                    column: Some(best),
                    score: Some(s),
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

/// Keeps the highest-scoring match among a proposal's candidate views
/// (`(view, global 2D index, score)`); earlier candidates win ties.
pub fn merge_across_views(proposal: usize, candidates: &[(usize, Option<(usize, f64)>)]) -> MatchResult {
    let mut best: Option<(usize, usize, f64)> = None;
    for &(view, m) in candidates {
        if let Some((j, s)) = m {
            if best.is_none_or(|(_, _, bs)| s > bs) {
                best = Some((view, j, s));
            }
        }
    }
    match best {
        Some((view, j, s)) => MatchResult {
            proposal,
            view: Some(view),
            box2d_index: Some(j),
            score: Some(s),
        },
        None => MatchResult::unmatched(proposal),
    }
}
