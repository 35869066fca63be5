//! End-to-end training of the matching and fusion networks, evaluation
//! under disturbances, and checkpoint persistence.

mod data;
mod eval;
pub mod metrics;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use data::{detection_targets, scene_suite, simulate_scene, DetTarget, SceneSample, FOREGROUND_RADIUS};
pub use eval::{
    evaluate, evaluate_baseline, evaluate_checkpoint, evaluate_scene, EvalCounts, EvalReport, SceneEval,
};

use crate::diffnum::{Checkpoint, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusionhead::N_DELTAS;
use crate::model::{Forward, InferenceOptions, MatchMode, Model, ModelConfig};
use crate::worldsim::rng::{derive_seed, substream, Stream};
use crate::worldsim::{id_join_target, DisturbanceSpec, Scene, SimConfig};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up to `lr`, then cosine decay to `lr·final_ratio`.
    Cosine { warmup_steps: usize, final_ratio: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine {
                warmup_steps,
                final_ratio,
            } => {
                if step < warmup_steps {
                    return base * (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total.saturating_sub(warmup_steps).max(1);
                let t = ((step - warmup_steps) as f64 / span as f64).min(1.0);
                let floor = base * final_ratio;
                floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub lambda_view: f64,
    pub lambda_pro: f64,
    pub top_k: usize,
    pub threshold: f64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 1,
            lr: 1e-4,
            schedule: LrSchedule::Constant,
            weight_decay: 0.01,
            lambda_view: 0.2,
            lambda_pro: 0.1,
            top_k: 2,
            threshold: crate::propmatch::MATCH_THRESHOLD,
            init_seed: 0,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if self.lambda_view < 0.0 || self.lambda_pro < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.batch_size == 0 || self.top_k == 0 {
            return Err(Error::config("batch size and K must be at least 1"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_view: self.lambda_view,
            lambda_pro: self.lambda_pro,
        }
    }

    pub fn inference(&self) -> InferenceOptions {
        InferenceOptions {
            top_k: self.top_k,
            threshold: self.threshold,
            mode: MatchMode::TwoLevel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_view: f64,
    pub lambda_pro: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        TrainConfig::default().weights()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub det: f64,
    pub view: f64,
    pub pro: f64,
}

/// `L_total = L_det + λ1·L_view + λ2·L_pro`.
pub fn combine_losses(det: f64, view: f64, pro: f64, w: &LossWeights) -> f64 {
    det + w.lambda_view * view + w.lambda_pro * pro
}

/// Builds the training loss on the graph the forward pass ran on.
pub fn total_loss(
    g: &mut Graph<'_, Real>,
    cfg: &ModelConfig,
    fwd: &Forward,
    sample: &SceneSample,
    w: &LossWeights,
) -> Result<(Var, LossComponents)> {
    let n3 = sample.proposals3d.len();
    if sample.gt.dominant_view.len() != n3 || sample.det.len() != n3 {
        return Err(Error::Labeling(format!(
            "{n3} proposals but {} view labels and {} detection targets",
            sample.gt.dominant_view.len(),
            sample.det.len()
        )));
    }
    if n3 == 0 {
        return Err(Error::Labeling("scene has no 3D proposals to supervise".into()));
    }

    let l_view = g.cross_entropy(fwd.view_logits, &sample.gt.dominant_view)?;

    let total_rows: usize = fwd.matrices.iter().map(|m| m.rows.len()).sum();
    let l_pro = if total_rows == 0 {
        g.input(Tensor::scalar(0.0))
    } else {
        let mut terms = Vec::with_capacity(fwd.matrices.len());
        for m in &fwd.matrices {
            let targets: Vec<usize> = m
                .rows
                .iter()
                .map(|&i| id_join_target(&sample.proposals3d[i], &m.cols, &sample.proposals2d))
                .collect();
            let ce = g.cross_entropy(m.scores, &targets)?;
            terms.push((ce, m.rows.len() as f64 / total_rows as f64));
        }
        g.weighted_sum(&terms)?
    };

    let n_out = cfg.n_classes + 1;
    let logits = g.slice_cols(fwd.pred, 0, n_out)?;
    let classes: Vec<usize> = sample.det.iter().map(|d| d.class).collect();
    let l_cls = g.cross_entropy(logits, &classes)?;
    let fg: Vec<usize> = (0..n3).filter(|&i| sample.det[i].deltas.is_some()).collect();
    let l_det = if fg.is_empty() {
        l_cls
    } else {
        let rows = g.gather_rows(fwd.pred, fg.iter().map(|&i| Some(i)).collect())?;
        let deltas = g.slice_cols(rows, n_out, N_DELTAS)?;
        let target: Vec<f64> = fg.iter().flat_map(|&i| sample.det[i].deltas.expect("foreground")).collect();
        let l_box = g.l1(deltas, &target)?;
        g.weighted_sum(&[(l_cls, 1.0), (l_box, 1.0)])?
    };

    let total = g.weighted_sum(&[(l_det, 1.0), (l_view, w.lambda_view), (l_pro, w.lambda_pro)])?;
    let comps = LossComponents {
        total: g.scalar_value(total),
        det: g.scalar_value(l_det),
        view: g.scalar_value(l_view),
        pro: g.scalar_value(l_pro),
    };
    Ok((total, comps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub scenes: usize,
    pub steps: usize,
    pub lr_last: f64,
    pub mean: LossComponents,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<Real>,
    pub history: Vec<EpochLog>,
}

impl TrainOutcome {
    /// Checkpoint carrying the model plus the training and simulation
    /// configuration it was trained with.
    pub fn checkpoint(&self, train: &TrainConfig, sim: &SimConfig) -> Result<Checkpoint> {
        self.model.to_checkpoint(serde_json::json!({
            "train": train,
            "sim": sim,
            "history": self.history,
        }))
    }
}

/// Order in which epoch `epoch` visits the scenes.
pub fn epoch_order(shuffle_seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(derive_seed(shuffle_seed, epoch as u64), Stream::Shuffle);
    order.shuffle(&mut rng);
    order
}

/// One gradient evaluation: simulate, forward, loss, backward.
pub fn scene_gradients(
    model: &Model<Real>,
    scene: &Scene,
    sim: &SimConfig,
    opts: &InferenceOptions,
    w: &LossWeights,
) -> Result<Option<(LossComponents, BTreeMap<String, Tensor<Real>>)>> {
    let sample = simulate_scene(scene, sim, &DisturbanceSpec::default())?;
    if sample.proposals3d.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new(&model.params);
    let fwd = model.forward(&mut g, &sample.inputs(), opts)?;
    let (loss, comps) = total_loss(&mut g, &model.config, &fwd, &sample, w)?;
    if !comps.total.is_finite() {
        return Ok(Some((comps, BTreeMap::new())));
    }
    let grads = g.backward(loss);
    Ok(Some((comps, g.param_grads(&grads))))
}

/// Trains a fresh model on `scenes`, regenerating branch outputs on the fly.
/// Deterministic given the configuration and scenes. `on_epoch` sees every
/// epoch summary as it completes.
pub fn train(
    cfg: &TrainConfig,
    sim: &SimConfig,
    scenes: &[Scene],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    sim.validate()?;
    if scenes.is_empty() && cfg.epochs > 0 {
        return Err(Error::config("training needs at least one scene"));
    }
    let mut model = Model::new(ModelConfig::from_sim(sim), cfg.init_seed)?;
    let opts = cfg.inference();
    let w = cfg.weights();
    let steps_per_epoch = scenes.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.shuffle_seed, epoch, scenes.len());
        let mut sum = LossComponents::default();
        let mut seen = 0usize;
        let mut steps = 0usize;
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<BTreeMap<String, Tensor<Real>>> = None;
            let mut in_batch = 0usize;
            for &idx in batch {
                let Some((comps, grads)) = scene_gradients(&model, &scenes[idx], sim, &opts, &w)? else {
                    continue;
                };
                if !comps.total.is_finite() || grads.values().any(|t| !t.all_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        scene: idx,
                        detail: format!(
                            "loss {} (det {}, view {}, pro {})",
                            comps.total, comps.det, comps.view, comps.pro
                        ),
                    });
                }
                sum.total += comps.total;
                sum.det += comps.det;
                sum.view += comps.view;
                sum.pro += comps.pro;
                seen += 1;
                in_batch += 1;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (k, t) in a.iter_mut() {
                            for (x, y) in t.data_mut().iter_mut().zip(grads[k].data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let Some(mut grads) = acc else { continue };
            if in_batch > 1 {
                let inv = 1.0 / in_batch as f64;
                grads.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= inv));
            }
            lr = cfg.schedule.lr_at(cfg.lr, step, total_steps);
            model.params.adamw_step(&grads, lr, cfg.weight_decay)?;
            step += 1;
            steps += 1;
        }
        let n = seen.max(1) as f64;
        let log = EpochLog {
            epoch,
            scenes: seen,
            steps,
            lr_last: lr,
            mean: LossComponents {
                total: sum.total / n,
                det: sum.det / n,
                view: sum.view / n,
                pro: sum.pro / n,
            },
        };
        on_epoch(&log);
        history.push(log);
    }
    Ok(TrainOutcome { model, history })
}
