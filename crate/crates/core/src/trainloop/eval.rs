//! Evaluation of the learned matcher and of the projection baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{calibration_seed, simulate_scene, SceneSample};
use super::metrics::bev_iou;
use super::{total_loss, LossWeights};
use crate::baseline::{baseline_match, BaselineMatch};
use crate::diffnum::{Checkpoint, Graph};
use crate::error::Result;
use crate::fusionhead::{apply_deltas, Prediction};
use crate::model::{InferenceOptions, Model};
use crate::propmatch::MatchResult;
use crate::viewmatch::{topk_hit, ViewAssignment};
use crate::worldsim::{perturb_calibration, DisturbanceSpec, Proposal3D, Scene, SimConfig};
use crate::Real;

/// Additive tallies; summing per-scene counts in scene order gives the
/// suite counts regardless of how scenes were sharded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub scenes: usize,
    pub proposals: usize,
    pub view_top1_hits: usize,
    pub view_top2_hits: usize,
    pub no_view: usize,
    /// 3D proposals whose object has a 2D proposal in the scene.
    pub match_positives: usize,
    pub match_tp: usize,
    pub match_fp: usize,
    pub det_foreground: usize,
    pub det_iou_sum: f64,
    pub det_class_correct: usize,
    pub loss_scenes: usize,
    pub loss_total: f64,
    pub loss_det: f64,
    pub loss_view: f64,
    pub loss_pro: f64,
}

impl EvalCounts {
    pub fn add(&mut self, o: &EvalCounts) {
        self.scenes += o.scenes;
        self.proposals += o.proposals;
        self.view_top1_hits += o.view_top1_hits;
        self.view_top2_hits += o.view_top2_hits;
        self.no_view += o.no_view;
        self.match_positives += o.match_positives;
        self.match_tp += o.match_tp;
        self.match_fp += o.match_fp;
        self.det_foreground += o.det_foreground;
        self.det_iou_sum += o.det_iou_sum;
        self.det_class_correct += o.det_class_correct;
        self.loss_scenes += o.loss_scenes;
        self.loss_total += o.loss_total;
        self.loss_det += o.loss_det;
        self.loss_view += o.loss_view;
        self.loss_pro += o.loss_pro;
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub proposals: usize,
    pub view_top1: f64,
    pub view_top2: f64,
    pub no_view_rate: f64,
    pub match_precision: f64,
    pub match_recall: f64,
    pub match_f1: f64,
    pub det_mean_iou: f64,
    pub det_class_acc: f64,
    /// Mean of `det_mean_iou` and `det_class_acc`.
    pub detection_score: f64,
    pub loss_total: f64,
    pub loss_det: f64,
    pub loss_view: f64,
    pub loss_pro: f64,
}

impl EvalReport {
    pub fn from_counts(c: &EvalCounts) -> Self {
        let n = c.proposals as f64;
        let precision = ratio(c.match_tp as f64, (c.match_tp + c.match_fp) as f64);
        let recall = ratio(c.match_tp as f64, c.match_positives as f64);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        let iou = ratio(c.det_iou_sum, c.det_foreground as f64);
        let acc = ratio(c.det_class_correct as f64, n);
        let ls = c.loss_scenes as f64;
        Self {
            scenes: c.scenes,
            proposals: c.proposals,
            view_top1: ratio(c.view_top1_hits as f64, n),
            view_top2: ratio(c.view_top2_hits as f64, n),
            no_view_rate: ratio(c.no_view as f64, n),
            match_precision: precision,
            match_recall: recall,
            match_f1: f1,
            det_mean_iou: iou,
            det_class_acc: acc,
            detection_score: 0.5 * (iou + acc),
            loss_total: ratio(c.loss_total, ls),
            loss_det: ratio(c.loss_det, ls),
            loss_view: ratio(c.loss_view, ls),
            loss_pro: ratio(c.loss_pro, ls),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| crate::Error::json("serializing eval report", e))
    }
}

/// Per-scene outcome of the learned matcher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub counts: EvalCounts,
    pub assignments: Vec<ViewAssignment>,
    pub matches: Vec<MatchResult>,
    pub prediction: Prediction,
}

fn match_counts(sample: &SceneSample, matched: impl Iterator<Item = (usize, Option<usize>)>, c: &mut EvalCounts) {
    c.match_positives += (0..sample.proposals3d.len())
        .filter(|&i| sample.gt.matched_column(i) < sample.proposals2d.len())
        .count();
    for (i, j) in matched {
        if let Some(j) = j {
            let truth = sample.proposals3d[i].src_object;
            if truth.is_some() && sample.proposals2d[j].src_object == truth {
                c.match_tp += 1;
            } else {
                c.match_fp += 1;
            }
        }
    }
}

fn detection_counts(
    scene: &Scene,
    sample: &SceneSample,
    boxes: impl Iterator<Item = (usize, [f64; 3], [f64; 3], f64, usize)>,
    c: &mut EvalCounts,
) {
    for (i, center, size, yaw, class) in boxes {
        let t = &sample.det[i];
        if class == t.class {
            c.det_class_correct += 1;
        }
        if let Some(o) = t.object.and_then(|id| scene.object(id)) {
            c.det_foreground += 1;
            c.det_iou_sum += bev_iou(&center, &size, yaw, &o.center, &o.size, o.yaw);
        }
    }
}

/// Runs the learned pipeline on one scene. Labels come from the true rig;
/// the model itself never sees a camera model.
pub fn evaluate_scene(
    model: &Model<Real>,
    scene: &Scene,
    sim: &SimConfig,
    disturb: &DisturbanceSpec,
    opts: &InferenceOptions,
    w: &LossWeights,
) -> Result<SceneEval> {
    let sample = simulate_scene(scene, sim, disturb)?;
    let mut g = Graph::new(&model.params);
    let fwd = model.forward(&mut g, &sample.inputs(), opts)?;
    let n3 = sample.proposals3d.len();
    let mut c = EvalCounts {
        scenes: 1,
        proposals: n3,
        ..Default::default()
    };
    let logits = g.value(fwd.view_logits).clone();
    for i in 0..n3 {
        let truth = &sample.gt.view_labels[i];
        c.view_top1_hits += usize::from(topk_hit(logits.row(i), 1, truth));
        c.view_top2_hits += usize::from(topk_hit(logits.row(i), 2, truth));
        c.no_view += usize::from(fwd.assignments[i].no_view);
    }
    match_counts(&sample, fwd.matches.iter().map(|m| (m.proposal, m.box2d_index)), &mut c);
    let prediction = Prediction::from_tensor(g.value(fwd.pred), model.config.n_classes)?;
    detection_counts(
        scene,
        &sample,
        (0..n3).map(|i| {
            let (center, size, yaw) = apply_deltas(&sample.proposals3d[i], &prediction.deltas[i]);
            (i, center, size, yaw, prediction.class_of(i).0)
        }),
        &mut c,
    );
    if n3 > 0 {
        let (_, comps) = total_loss(&mut g, &model.config, &fwd, &sample, w)?;
        c.loss_scenes = 1;
        c.loss_total = comps.total;
        c.loss_det = comps.det;
        c.loss_view = comps.view;
        c.loss_pro = comps.pro;
    }
    Ok(SceneEval {
        counts: c,
        assignments: fwd.assignments,
        matches: fwd.matches,
        prediction,
    })
}

fn sum_in_order(per_scene: Vec<EvalCounts>) -> EvalReport {
    let mut total = EvalCounts::default();
    for c in &per_scene {
        total.add(c);
    }
    EvalReport::from_counts(&total)
}

/// Evaluates the learned matcher on `scenes` under `disturb`. Scenes are
/// processed in parallel and merged in scene order, so the report does not
/// depend on the thread count. Calibration perturbation in `disturb` does
/// not reach this path.
pub fn evaluate(
    model: &Model<Real>,
    scenes: &[Scene],
    sim: &SimConfig,
    disturb: &DisturbanceSpec,
    opts: &InferenceOptions,
    w: &LossWeights,
) -> Result<EvalReport> {
    let per_scene = scenes
        .par_iter()
        .map(|s| evaluate_scene(model, s, sim, disturb, opts, w).map(|e| e.counts))
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_in_order(per_scene))
}

pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    scenes: &[Scene],
    sim: &SimConfig,
    disturb: &DisturbanceSpec,
    opts: &InferenceOptions,
    w: &LossWeights,
) -> Result<EvalReport> {
    evaluate(&Model::from_checkpoint(ck)?, scenes, sim, disturb, opts, w)
}

fn baseline_scene(scene: &Scene, sim: &SimConfig, disturb: &DisturbanceSpec, gate: f64) -> Result<(EvalCounts, Vec<BaselineMatch>)> {
    let sample = simulate_scene(scene, sim, disturb)?;
    let rig = perturb_calibration(
        &scene.rig,
        disturb.calib_trans_range,
        disturb.calib_rot_range_deg,
        calibration_seed(scene),
    );
    let matches = baseline_match(&sample.proposals3d, &sample.proposals2d, &rig, gate);
    let nv = scene.n_views();
    let mut c = EvalCounts {
        scenes: 1,
        proposals: sample.proposals3d.len(),
        ..Default::default()
    };
    for m in &matches {
        let truth = &sample.gt.view_labels[m.proposal];
        let hit = truth.contains(&m.view.unwrap_or(nv));
        c.view_top1_hits += usize::from(hit);
        c.view_top2_hits += usize::from(hit);
        c.no_view += usize::from(m.view.is_none());
    }
    match_counts(&sample, matches.iter().map(|m| (m.proposal, m.box2d_index)), &mut c);
    detection_counts(
        scene,
        &sample,
        sample
            .proposals3d
            .iter()
            .enumerate()
            .map(|(i, p): (usize, &Proposal3D)| (i, p.center, p.size, p.yaw, p.class_id())),
        &mut c,
    );
    Ok((c, matches))
}

/// Evaluates the projection baseline, which uses the rig perturbed by the
/// calibration part of `disturb`. Loss fields are zero.
pub fn evaluate_baseline(scenes: &[Scene], sim: &SimConfig, disturb: &DisturbanceSpec, iou_gate: f64) -> Result<EvalReport> {
    let per_scene = scenes
        .par_iter()
        .map(|s| baseline_scene(s, sim, disturb, iou_gate).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_in_order(per_scene))
}
