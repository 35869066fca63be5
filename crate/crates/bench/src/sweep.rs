//! Running the learned matcher and the baseline over a grid.

use anyhow::Result;
use boxmatch::baseline::IOU_GATE;
use boxmatch::model::{InferenceOptions, MatchMode};
use boxmatch::trainloop::{evaluate, evaluate_baseline, LossWeights};
use boxmatch::worldsim::{DisturbanceSpec, Scene, SimConfig};
use boxmatch::Model;
use rayon::prelude::*;

use crate::grid::SweepGrid;
use crate::table::{sort_rows, SweepRow};

pub struct EvalSetup<'a> {
    pub model: &'a Model,
    pub scenes: &'a [Scene],
    pub sim: &'a SimConfig,
    pub opts: InferenceOptions,
    pub weights: LossWeights,
}

/// Two rows per grid point (`fbm`, `baseline`), in canonical order.
pub fn run_sweep(setup: &EvalSetup<'_>, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let per_point = grid
        .points
        .par_iter()
        .map(|p| -> Result<Vec<SweepRow>> {
            let fbm = evaluate(setup.model, setup.scenes, setup.sim, &p.spec, &setup.opts, &setup.weights)?;
            let base = evaluate_baseline(setup.scenes, setup.sim, &p.spec, IOU_GATE)?;
            Ok([("fbm", fbm), ("baseline", base)]
                .into_iter()
                .map(|(m, report)| SweepRow {
                    point: p.name.clone(),
                    axis: p.axis.clone(),
                    level: p.level,
                    matcher: m.to_string(),
                    report,
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<SweepRow> = per_point.into_iter().flatten().collect();
    sort_rows(&mut rows);
    Ok(rows)
}

/// Inference variants compared by `ablate`: (name, K, mode).
pub const ABLATIONS: [(&str, usize, MatchMode); 4] = [
    ("ablate_lidar_only", 2, MatchMode::LidarOnly),
    ("ablate_one_level", 2, MatchMode::OneLevel),
    ("ablate_two_level_k1", 1, MatchMode::TwoLevel),
    ("ablate_two_level_k2", 2, MatchMode::TwoLevel),
];

/// One `fbm` row per variant on the undisturbed scenes; `level` is K.
pub fn run_ablation(setup: &EvalSetup<'_>) -> Result<Vec<SweepRow>> {
    let clean = DisturbanceSpec::default();
    let mut rows = ABLATIONS
        .par_iter()
        .map(|&(name, k, mode)| -> Result<SweepRow> {
            let opts = InferenceOptions {
                top_k: k,
                mode,
                ..setup.opts
            };
            Ok(SweepRow {
                point: name.to_string(),
                axis: "ablation".to_string(),
                level: k as f64,
                matcher: "fbm".to_string(),
                report: evaluate(setup.model, setup.scenes, setup.sim, &clean, &opts, &setup.weights)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sort_rows(&mut rows);
    Ok(rows)
}
