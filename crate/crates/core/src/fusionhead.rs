//! Matching-based fusion: query–pixel (`O₁`), query–ROI (`O₂`) and
//! ROI–ROI (`O₃`) branches feeding one prediction FFN.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::nn::{declare_decoder, declare_mlp, decoder_block, mlp_named};
use crate::diffnum::{DecoderShape, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::worldsim::{roi_cells, wrap_angle, BevGrid, Box2D, Proposal3D, Vec3};
use crate::Scalar;

/// Mask value for pixels outside a proposal's matched ROI.
pub const MASK_NEG: f64 = -1e6;

/// Box refinement outputs per proposal: `(δx, δy, δz, δl, δw, δh, δyaw)`.
pub const N_DELTAS: usize = 7;

/// Head outputs split per proposal. `class_logits` has `N_cls + 1` entries,
/// the last being background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_logits: Vec<Vec<f64>>,
    pub deltas: Vec<[f64; N_DELTAS]>,
}

impl Prediction {
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>, n_classes: usize) -> Result<Self> {
        let width = n_classes + 1 + N_DELTAS;
        if t.cols() != width {
            return Err(Error::shape(format!("head width {} for {width} outputs", t.cols())));
        }
        let mut class_logits = Vec::with_capacity(t.rows());
        let mut deltas = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let row: Vec<f64> = t.row(i).iter().map(|x| x.as_f64()).collect();
            class_logits.push(row[..=n_classes].to_vec());
            deltas.push(std::array::from_fn(|k| row[n_classes + 1 + k]));
        }
        Ok(Self { class_logits, deltas })
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Arg-max class (index `N_cls` = background) and its softmax probability.
    pub fn class_of(&self, i: usize) -> (usize, f64) {
        let row = &self.class_logits[i];
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        let z: f64 = row.iter().map(|x| (x - row[best]).exp()).sum();
        (best, 1.0 / z)
    }
}

/// Refined geometry of a proposal.
pub fn apply_deltas(p: &Proposal3D, d: &[f64; N_DELTAS]) -> (Vec3, Vec3, f64) {
    (
        [p.center[0] + d[0], p.center[1] + d[1], p.center[2] + d[2]],
        [p.size[0] * d[3].exp(), p.size[1] * d[4].exp(), p.size[2] * d[5].exp()],
        wrap_angle(p.yaw + d[6]),
    )
}

/// Deltas that would turn `p` into the given box.
pub fn target_deltas(p: &Proposal3D, center: &Vec3, size: &Vec3, yaw: f64) -> [f64; N_DELTAS] {
    [
        center[0] - p.center[0],
        center[1] - p.center[1],
        center[2] - p.center[2],
        (size[0] / p.size[0]).ln(),
        (size[1] / p.size[1]).ln(),
        (size[2] / p.size[2]).ln(),
        wrap_angle(yaw - p.yaw),
    ]
}

pub fn declare<S: Scalar, R: Rng>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let c = cfg.c;
    let shape = DecoderShape {
        width: c,
        heads: cfg.heads,
        ffn: 2 * c,
    };
    declare_decoder(store, "fusion.o1", shape, rng)?;
    declare_mlp(store, "fusion.o2", &[2 * c, c, c], rng)?;
    declare_mlp(store, "fusion.roi3d", &[c, c, c], rng)?;
    declare_decoder(store, "fusion.o3", shape, rng)?;
    declare_mlp(store, "fusion.head", &[3 * c, c, cfg.n_classes + 1 + N_DELTAS], rng)
}

/// `M̂_2d^roi`: one row per proposal over all `N_v·H·W` pixels (view-major);
/// 0 inside the matched ROI of the matched view, `MASK_NEG` elsewhere.
/// Unmatched proposals (`None`) get a row of `MASK_NEG`.
pub fn build_roi_mask<S: Scalar>(n_views: usize, h: usize, w: usize, matched: &[Option<(usize, Box2D)>]) -> Tensor<S> {
    let per_view = h * w;
    let cols = n_views * per_view;
    let mut data = vec![S::of(MASK_NEG); matched.len() * cols];
    for (i, m) in matched.iter().enumerate() {
        if let Some((v, b)) = m {
            for (r, c) in roi_cells(b, h, w) {
                data[i * cols + v * per_view + r * w + c] = S::zero();
            }
        }
    }
    Tensor::new(vec![matched.len(), cols], data).expect("sized above")
}

/// `O₁ = Decoder(F̂_3d, F̂_im, F̂_im, M̂_2d^roi)`.
pub fn query_pixel_fusion<S: Scalar>(
    g: &mut Graph<'_, S>,
    f3d: Var,
    pixels: Var,
    mask: &Tensor<S>,
    heads: usize,
) -> Result<Var> {
    decoder_block(g, "fusion.o1", f3d, pixels, pixels, Some(mask), heads)
}

/// Pre-MLP input of `O₂`: `concat(F̂_3d, S ⊙ F̄_2d^roi)`. `S` is a constant.
pub fn query_roi_input<S: Scalar>(g: &mut Graph<'_, S>, f3d: Var, roi2d: Var, scores: &[f64]) -> Result<Var> {
    let weighted = g.scale_rows(roi2d, scores.iter().map(|&s| S::of(s)).collect())?;
    g.concat(&[f3d, weighted])
}

/// `O₂ = MLP(concat(F̂_3d, S ⊙ F̄_2d^roi))`.
pub fn query_roi_fusion<S: Scalar>(g: &mut Graph<'_, S>, f3d: Var, roi2d: Var, scores: &[f64]) -> Result<Var> {
    let x = query_roi_input(g, f3d, roi2d, scores)?;
    mlp_named(g, "fusion.o2", 2, x)
}

/// Mean BEV feature over the cells whose centers lie inside the rotated
/// footprint; `None` if there are none.
pub fn roi3d_pool_raw(bev: &BevGrid, center: &Vec3, size: &Vec3, yaw: f64) -> Option<Vec<f64>> {
    let cells = bev.footprint_cells(center, size, yaw);
    if cells.is_empty() {
        return None;
    }
    let mut out = vec![0.0; bev.channels];
    for &(r, c) in &cells {
        for (o, &x) in out.iter_mut().zip(bev.at(r, c)) {
            *o += x;
        }
    }
    let inv = 1.0 / cells.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Some(out)
}

/// `F̂_3d^roi`: pooled BEV features through an MLP; proposals whose
/// footprint misses the grid get an exact zero row.
pub fn roi_features_3d<S: Scalar>(g: &mut Graph<'_, S>, bev: &BevGrid, proposals: &[Proposal3D]) -> Result<Var> {
    let c = bev.channels;
    let mut pooled = Vec::new();
    let mut index = Vec::with_capacity(proposals.len());
    for p in proposals {
        match roi3d_pool_raw(bev, &p.center, &p.size, p.yaw) {
            Some(v) => {
                index.push(Some(pooled.len() / c));
                pooled.extend(v.into_iter().map(S::of));
            }
            None => index.push(None),
        }
    }
    let x = g.input(Tensor::new(vec![pooled.len() / c, c], pooled)?);
    let y = mlp_named(g, "fusion.roi3d", 2, x)?;
    g.gather_rows(y, index)
}

/// `O₃ = Decoder(F̂_3d^roi, F̄_2d^roi, F̄_2d^roi)`, unmasked.
pub fn roi_roi_fusion<S: Scalar>(g: &mut Graph<'_, S>, roi3d: Var, roi2d: Var, heads: usize) -> Result<Var> {
    decoder_block(g, "fusion.o3", roi3d, roi2d, roi2d, None, heads)
}

/// `Pred = FFN(concat(O₁, O₂, O₃))`.
pub fn fuse_predict<S: Scalar>(g: &mut Graph<'_, S>, o1: Var, o2: Var, o3: Var) -> Result<Var> {
    let x = g.concat(&[o1, o2, o3])?;
    mlp_named(g, "fusion.head", 2, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rows() {
        let m: Tensor<f64> = build_roi_mask(1, 4, 4, &[
            Some((0, Box2D::new(0.0, 0.0, 4.0, 4.0))),
            None,
            Some((0, Box2D::new(1.0, 1.0, 3.0, 3.0))),
        ]);
        assert!(m.row(0).iter().all(|&x| x == 0.0));
        assert!(m.row(1).iter().all(|&x| x == MASK_NEG));
        let zeros: Vec<usize> = (0..16).filter(|&k| m.row(2)[k] == 0.0).collect();
        assert_eq!(zeros, vec![5, 6, 9, 10]);
    }

    #[test]
    fn deltas_round_trip() {
        let p = Proposal3D {
            center: [10.0, -3.0, 0.8],
            size: [4.0, 1.9, 1.6],
            yaw: 3.0,
            class_logits: vec![0.0; 3],
            feature: vec![],
            src_object: None,
        };
        let d = target_deltas(&p, &[10.5, -2.0, 0.7], &[4.4, 1.8, 1.5], -3.0);
        let (c, s, y) = apply_deltas(&p, &d);
        assert!((c[0] - 10.5).abs() < 1e-12 && (s[0] - 4.4).abs() < 1e-12);
        assert!(wrap_angle(y + 3.0).abs() < 1e-12);
        assert!(d[6].abs() < 0.3);
    }
}
