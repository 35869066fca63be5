//! The full two-level matcher plus fusion head as one parameter set.
//!
//! Inference never sees a [`crate::worldsim::CameraModel`]: the only inputs
//! are the branch outputs collected in [`SceneInputs`].

use serde::{Deserialize, Serialize};

use crate::diffnum::{Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusionhead::{self, N_DELTAS};
use crate::propmatch::{self, MatchResult};
use crate::viewmatch::{self, ViewAssignment};
use crate::worldsim::rng::{substream, Stream};
use crate::worldsim::{BevGrid, Proposal2D, Proposal3D, SimConfig, ViewFeatureMap};
use crate::Scalar;

/// Shapes and conventions shared by every network module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `C`.
    pub c: usize,
    pub n_views: usize,
    pub n_classes: usize,
    pub heads: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub img_w: f64,
    pub img_h: f64,
    pub world_extent: [f64; 2],
}

impl ModelConfig {
    pub fn from_sim(sim: &SimConfig) -> Self {
        Self {
            c: sim.feature_dim,
            n_views: sim.scene.rig.n_views,
            n_classes: sim.scene.n_classes,
            heads: 4,
            feat_h: sim.camera.feat_h,
            feat_w: sim.camera.feat_w,
            img_w: sim.scene.rig.img_w,
            img_h: sim.scene.rig.img_h,
            world_extent: sim.scene.world_extent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.n_views == 0 || self.n_classes == 0 {
            return Err(Error::config("C, N_v and N_cls must be positive"));
        }
        if self.heads == 0 || !self.c.is_multiple_of(self.heads) {
            return Err(Error::config(format!("{} heads do not divide C = {}", self.heads, self.c)));
        }
        Ok(())
    }
}

/// How 3D proposals pick the views they are matched in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// View classifier Top-K, then proposal matching.
    #[default]
    TwoLevel,
    /// Every present view is a candidate (view classifier bypassed).
    OneLevel,
    /// No image evidence at all: every view absent, every proposal unmatched.
    LidarOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub top_k: usize,
    pub threshold: f64,
    pub mode: MatchMode,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            top_k: 2,
            threshold: propmatch::MATCH_THRESHOLD,
            mode: MatchMode::TwoLevel,
        }
    }
}

/// Branch outputs of one scene: everything the network consumes.
#[derive(Clone, Copy, Debug)]
pub struct SceneInputs<'a> {
    pub proposals3d: &'a [Proposal3D],
    pub bev: &'a BevGrid,
    pub fmap: &'a ViewFeatureMap,
    pub proposals2d: &'a [Proposal2D],
}

/// One per-view matching matrix on the tape.
#[derive(Clone, Debug)]
pub struct ViewMatrix {
    pub view: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub scores: Var,
}

/// Everything a forward pass produces; `Var`s live on the graph it ran on.
#[derive(Clone, Debug)]
pub struct Forward {
    pub view_logits: Var,
    pub assignments: Vec<ViewAssignment>,
    pub matrices: Vec<ViewMatrix>,
    pub matches: Vec<MatchResult>,
    /// `N_3d × (N_cls + 1 + 7)` head output.
    pub pred: Var,
}

#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    /// Freshly initialized model; every layer drawn from `U(±1/√fan_in)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, Stream::Init);
        let mut params = ParamStore::new();
        viewmatch::declare(&mut params, config.c, config.n_views, &mut rng)?;
        propmatch::declare(&mut params, &config, &mut rng)?;
        fusionhead::declare(&mut params, &config, &mut rng)?;
        Ok(Self { config, params })
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let config = serde_json::json!({
            "model": serde_json::to_value(&self.config).map_err(|e| Error::json("serializing model config", e))?,
            "extra": extra,
        });
        Ok(self.params.to_checkpoint(config))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.config["model"].clone())
            .map_err(|e| Error::json("reading model config from checkpoint", e))?;
        config.validate()?;
        let params = ParamStore::from_checkpoint(ck)?;
        Ok(Self { config, params })
    }

    /// Runs the whole pipeline on `g` (which must be bound to
    /// `self.params`).
    pub fn forward(&self, g: &mut Graph<'_, S>, inputs: &SceneInputs<'_>, opts: &InferenceOptions) -> Result<Forward> {
        let cfg = &self.config;
        let (c, nv) = (cfg.c, cfg.n_views);
        check_inputs(cfg, inputs)?;

        let blank;
        let (fmap, p2d): (&ViewFeatureMap, &[Proposal2D]) = if opts.mode == MatchMode::LidarOnly {
            let mut z = ViewFeatureMap::zeros(nv, inputs.fmap.h, inputs.fmap.w, c);
            z.present = vec![false; nv];
            blank = z;
            (&blank, &[])
        } else {
            (inputs.fmap, inputs.proposals2d)
        };
        let p3d = inputs.proposals3d;
        let n3 = p3d.len();
        if n3 == 0 {
            return Ok(Forward {
                view_logits: g.input(Tensor::zeros(vec![0, nv + 1])),
                assignments: Vec::new(),
                matrices: Vec::new(),
                matches: Vec::new(),
                pred: g.input(Tensor::zeros(vec![0, cfg.n_classes + 1 + N_DELTAS])),
            });
        }

        let feats: Vec<S> = p3d.iter().flat_map(|p| p.feature.iter().map(|&x| S::of(x))).collect();
        let f3d = g.input(Tensor::new(vec![n3, c], feats)?);
        let centers: Vec<[f64; 3]> = p3d.iter().map(|p| p.center).collect();
        let classes3d: Vec<usize> = p3d.iter().map(|p| p.class_id()).collect();

        // view level
        let collapsed = viewmatch::collapse_height::<S>(fmap);
        let pos = viewmatch::pos_embed_3d(g, &centers, cfg.world_extent)?;
        let f_ca = viewmatch::view_cross_attention(g, f3d, &collapsed, nv, &fmap.present, cfg.heads)?;
        let raw_logits = viewmatch::classify_views(g, f_ca, f3d, pos)?;
        let view_logits = viewmatch::mask_absent_views(g, raw_logits, &fmap.present)?;
        let assignments = viewmatch::select_topk(g.value(view_logits), opts.top_k.min(nv + 1))?;
        let candidates: Vec<Vec<usize>> = match opts.mode {
            MatchMode::TwoLevel => assignments.iter().map(|a| a.candidates().to_vec()).collect(),
            MatchMode::OneLevel => {
                let all: Vec<usize> = (0..nv).filter(|&v| fmap.present[v]).collect();
                vec![all; n3]
            }
            MatchMode::LidarOnly => vec![Vec::new(); n3],
        };

        // proposal level
        let (roi2d, _) = propmatch::roi_features_2d(g, cfg, fmap, p2d)?;
        let e2 = propmatch::embed_2d(g, cfg, roi2d, p2d)?;
        let e3 = propmatch::embed_3d(g, cfg, f3d, &classes3d, &centers)?;
        let mut per_proposal: Vec<Vec<(usize, Option<(usize, f64)>)>> = vec![Vec::new(); n3];
        let mut matrices = Vec::new();
        for v in 0..nv {
            let rows: Vec<usize> = (0..n3).filter(|&i| candidates[i].contains(&v)).collect();
            if rows.is_empty() {
                continue;
            }
            let cols: Vec<usize> = (0..p2d.len()).filter(|&j| p2d[j].view == v).collect();
            let e3v = g.gather_rows(e3, rows.iter().map(|&i| Some(i)).collect())?;
            let e2v = g.gather_rows(e2, cols.iter().map(|&j| Some(j)).collect())?;
            let m = propmatch::matching_matrix(g, e3v, e2v)?;
            for (r, dec) in propmatch::extract_pairs(g.value(m), opts.threshold).into_iter().enumerate() {
                let hit = dec.column.map(|k| (cols[k], dec.score.expect("matched rows carry a score")));
                per_proposal[rows[r]].push((v, hit));
            }
            matrices.push(ViewMatrix {
                view: v,
                rows,
                cols,
                scores: m,
            });
        }
        // merge in each proposal's candidate order so ties favour the better-ranked view
        let matches: Vec<MatchResult> = (0..n3)
            .map(|i| {
                let mut cands = per_proposal[i].clone();
                cands.sort_by_key(|(v, _)| candidates[i].iter().position(|c| c == v));
                propmatch::merge_across_views(i, &cands)
            })
            .collect();

        // fusion
        let matched_boxes: Vec<Option<(usize, crate::worldsim::Box2D)>> = matches
            .iter()
            .map(|m| {
                m.box2d_index.map(|j| {
                    let p = &p2d[j];
                    (p.view, propmatch::to_grid_box(&p.bbox, cfg.img_w, cfg.img_h, fmap.h, fmap.w))
                })
            })
            .collect();
        let mask = fusionhead::build_roi_mask::<S>(nv, fmap.h, fmap.w, &matched_boxes);
        let pixels = g.input(Tensor::new(
            vec![nv * fmap.h * fmap.w, c],
            fmap.data.iter().map(|&x| S::of(x)).collect(),
        )?);
        let o1 = fusionhead::query_pixel_fusion(g, f3d, pixels, &mask, cfg.heads)?;
        let roi_bar = g.gather_rows(roi2d, matches.iter().map(|m| m.box2d_index).collect())?;
        let scores: Vec<f64> = matches.iter().map(|m| m.score.unwrap_or(0.0)).collect();
        let o2 = fusionhead::query_roi_fusion(g, f3d, roi_bar, &scores)?;
        let roi3d = fusionhead::roi_features_3d(g, inputs.bev, p3d)?;
        let o3 = fusionhead::roi_roi_fusion(g, roi3d, roi_bar, cfg.heads)?;
        let pred = fusionhead::fuse_predict(g, o1, o2, o3)?;

        Ok(Forward {
            view_logits,
            assignments,
            matrices,
            matches,
            pred,
        })
    }
}

fn check_inputs(cfg: &ModelConfig, inputs: &SceneInputs<'_>) -> Result<()> {
    let f = inputs.fmap;
    if f.n_views != cfg.n_views || f.c != cfg.c || f.h != cfg.feat_h || f.w != cfg.feat_w {
        return Err(Error::shape(format!(
            "feature map {}×{}×{}×{} for a model expecting {}×{}×{}×{}",
            f.n_views, f.h, f.w, f.c, cfg.n_views, cfg.feat_h, cfg.feat_w, cfg.c
        )));
    }
    if inputs.bev.channels != cfg.c {
        return Err(Error::shape(format!("BEV with {} channels, model width {}", inputs.bev.channels, cfg.c)));
    }
    if let Some(p) = inputs.proposals3d.iter().find(|p| p.feature.len() != cfg.c) {
        return Err(Error::shape(format!("3D feature of length {} for width {}", p.feature.len(), cfg.c)));
    }
    Ok(())
}
