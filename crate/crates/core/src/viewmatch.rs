//! View-level matching: every 3D proposal cross-attends to height-collapsed
//! image features and is classified into one of `N_v` views or "no view";
//! the Top-K classes become its candidate views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::nn::{declare_attention, declare_mlp, mlp_named, multi_head_attention};
use crate::diffnum::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::worldsim::ViewFeatureMap;
use crate::Scalar;

/// Logit added to views whose frame never arrived.
pub const ABSENT_VIEW_LOGIT: f64 = -1e6;

/// Half-height (meters) used to normalize the vertical center coordinate.
pub const Z_EXTENT: f64 = 5.0;

/// Top-K result for one 3D proposal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewAssignment {
    /// Real views among the Top-K classes, best first.
    pub views: Vec<usize>,
    /// "No view" is the single best class; `views` then only lists fallbacks.
    pub no_view: bool,
}

impl ViewAssignment {
    /// Views the proposal is matched against: none when "no view" wins.
    pub fn candidates(&self) -> &[usize] {
        if self.no_view {
            &[]
        } else {
            &self.views
        }
    }
}

/// Mean over the height axis: `N_v × H × W × C → (N_v·W) × C`, row
/// `v·W + col`.
pub fn collapse_height<S: Scalar>(fmap: &ViewFeatureMap) -> Tensor<S> {
    let (nv, h, w, c) = (fmap.n_views, fmap.h, fmap.w, fmap.c);
    let mut out = vec![S::zero(); nv * w * c];
    let inv = 1.0 / h.max(1) as f64;
    for v in 0..nv {
        for col in 0..w {
            let dst = &mut out[(v * w + col) * c..(v * w + col + 1) * c];
            for r in 0..h {
                for (o, &x) in dst.iter_mut().zip(fmap.cell(v, r, col)) {
                    *o += S::of(x);
                }
            }
            for o in dst.iter_mut() {
                *o *= S::of(inv);
            }
        }
    }
    Tensor::new(vec![nv * w, c], out).expect("sized above")
}

/// Fixed sinusoidal code of column `col` out of `w`.
pub fn column_encoding(col: usize, w: usize, c: usize) -> Vec<f64> {
    let u = (col as f64 + 0.5) / w as f64;
    (0..c)
        .map(|k| {
            let freq = std::f64::consts::PI * (1 + k / 2) as f64;
            if k % 2 == 0 {
                (freq * u).sin()
            } else {
                (freq * u).cos()
            }
        })
        .collect()
}

/// Centers scaled so the world extent maps onto `[−1, 1]`.
pub fn normalize_centers<S: Scalar>(centers: &[[f64; 3]], extent: [f64; 2]) -> Tensor<S> {
    let data = centers
        .iter()
        .flat_map(|p| [p[0] / extent[0], p[1] / extent[1], p[2] / Z_EXTENT])
        .map(S::of)
        .collect();
    Tensor::new(vec![centers.len(), 3], data).expect("three values per center")
}

pub fn declare<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    c: usize,
    n_views: usize,
    rng: &mut R,
) -> Result<()> {
    declare_mlp(store, "view.pos", &[3, c, c], rng)?;
    // small random init keeps the per-view key codes distinguishable from the start
    let emb: Vec<S> = (0..n_views * c).map(|_| S::of(rng.random_range(-0.5..0.5))).collect();
    store.insert("view.key_embed", Tensor::new(vec![n_views, c], emb)?)?;
    declare_attention(store, "view.ca", c, rng)?;
    declare_mlp(store, "view.cls", &[3 * c, c, n_views + 1], rng)
}

/// 2-layer MLP embedding of normalized proposal centers.
pub fn pos_embed_3d<S: Scalar>(g: &mut Graph<'_, S>, centers: &[[f64; 3]], extent: [f64; 2]) -> Result<Var> {
    let x = g.input(normalize_centers(centers, extent));
    mlp_named(g, "view.pos", 2, x)
}

/// Cross-attention from 3D queries to the `N_v·W` collapsed columns.
///
/// Keys carry a learned per-view embedding plus a sinusoidal column code;
/// values are the raw columns. Columns of absent views are masked out.
pub fn view_cross_attention<S: Scalar>(
    g: &mut Graph<'_, S>,
    f3d: Var,
    collapsed: &Tensor<S>,
    n_views: usize,
    present: &[bool],
    heads: usize,
) -> Result<Var> {
    let (n_keys, c) = (collapsed.rows(), collapsed.cols());
    if n_views == 0 || n_keys % n_views != 0 || present.len() != n_views {
        return Err(Error::shape(format!(
            "{n_keys} collapsed columns for {n_views} views ({} presence flags)",
            present.len()
        )));
    }
    if g.shape(f3d).1 != c {
        return Err(Error::shape(format!("3D features of width {} against {c}", g.shape(f3d).1)));
    }
    let w = n_keys / n_views;
    let mut keys_const = collapsed.clone();
    for v in 0..n_views {
        for col in 0..w {
            let enc = column_encoding(col, w, c);
            for (k, e) in keys_const.row_mut(v * w + col).iter_mut().zip(enc) {
                *k += S::of(e);
            }
        }
    }
    let embed = g.param("view.key_embed")?;
    let per_key = g.gather_rows(embed, (0..n_keys).map(|i| Some(i / w)).collect())?;
    let keys = g.add_const(per_key, &keys_const)?;
    let values = g.input(collapsed.clone());
    let mask = if present.iter().all(|&p| p) || !present.iter().any(|&p| p) {
        None
    } else {
        let nq = g.shape(f3d).0;
        let row: Vec<S> = (0..n_keys)
            .map(|i| if present[i / w] { S::zero() } else { S::of(ABSENT_VIEW_LOGIT) })
            .collect();
        let data = (0..nq).flat_map(|_| row.iter().copied()).collect();
        Some(Tensor::new(vec![nq, n_keys], data)?)
    };
    multi_head_attention(g, "view.ca", f3d, keys, values, mask.as_ref(), heads)
}

/// `P_cls = MLP(concat(F_ca, F_3d, F_3d_pos))`: `N_v + 1` logits per row.
pub fn classify_views<S: Scalar>(g: &mut Graph<'_, S>, f_ca: Var, f3d: Var, pos: Var) -> Result<Var> {
    let x = g.concat(&[f_ca, f3d, pos])?;
    mlp_named(g, "view.cls", 2, x)
}

/// Pushes the logits of absent views far below every other class.
pub fn mask_absent_views<S: Scalar>(g: &mut Graph<'_, S>, logits: Var, present: &[bool]) -> Result<Var> {
    if present.iter().all(|&p| p) {
        return Ok(logits);
    }
    let (r, c) = g.shape(logits);
    if c != present.len() + 1 {
        return Err(Error::shape(format!("{c} view classes for {} views", present.len())));
    }
    let row: Vec<S> = (0..c)
        .map(|j| if j < present.len() && !present[j] { S::of(ABSENT_VIEW_LOGIT) } else { S::zero() })
        .collect();
    let mask = Tensor::new(vec![r, c], (0..r).flat_map(|_| row.iter().copied()).collect())?;
    g.add_const(logits, &mask)
}

/// Class indices of one logit row sorted best first; ties go to the lower
/// index.
pub fn ranked_classes<S: Scalar>(row: &[S]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Top-K selection over `N_v + 1` classes (the last is "no view").
pub fn select_topk<S: Scalar>(logits: &Tensor<S>, k: usize) -> Result<Vec<ViewAssignment>> {
    let classes = logits.cols();
    if k == 0 || k > classes {
        return Err(Error::config(format!("top-k of {k} over {classes} view classes")));
    }
    let none = classes - 1;
    Ok((0..logits.rows())
        .map(|i| {
            let ranked = ranked_classes(logits.row(i));
            let top = &ranked[..k];
            ViewAssignment {
                views: top.iter().copied().filter(|&v| v != none).collect(),
                no_view: top[0] == none,
            }
        })
        .collect())
}

/// Whether any of the Top-K classes of `row` is in `truth`.
pub fn topk_hit<S: Scalar>(row: &[S], k: usize, truth: &[usize]) -> bool {
    ranked_classes(row).iter().take(k).any(|c| truth.contains(c))
}
