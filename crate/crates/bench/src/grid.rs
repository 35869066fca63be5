//! Named disturbance points grouped by axis.

use std::collections::{BTreeSet, HashSet};

use boxmatch::worldsim::DisturbanceSpec;

use crate::UsageError;

/// Grid axes in the order they are listed by `--grid all`.
pub const AXES: [&str; 7] = ["clean", "async", "misalign", "drop", "noise", "multi", "calib"];

pub const ASYNC_LEVELS: [f64; 5] = [0.08, 0.25, 0.5, 1.0, 2.0];
/// (name, rotation °, translation m).
pub const MISALIGN_LEVELS: [(&str, f64, f64); 3] = [("small", 1.5, 0.15), ("medium", 3.0, 0.30), ("large", 5.0, 0.50)];
pub const DROP_LEVELS: [usize; 3] = [1, 3, 6];
pub const NOISE_GAINS: [f64; 2] = [0.5, 2.0];
pub const NOISE_AMP: f64 = 2.0;
/// Camera lag of each combined level; every level also carries the small
/// misalignment.
pub const MULTI_ASYNC: [f64; 3] = [0.08, 0.25, 0.5];
pub const CALIB_TRANS_M: f64 = 0.5;
pub const CALIB_ROT_DEG: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub name: String,
    pub axis: String,
    /// Position along the axis, used as the chart x value.
    pub level: f64,
    pub spec: DisturbanceSpec,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepGrid {
    pub points: Vec<GridPoint>,
}

impl SweepGrid {
    pub fn new(points: Vec<GridPoint>) -> Result<Self, UsageError> {
        let mut seen = HashSet::new();
        for p in &points {
            if !seen.insert(p.name.as_str()) {
                return Err(UsageError(format!("duplicate grid point `{}`", p.name)));
            }
        }
        Ok(Self { points })
    }

    /// Builds the grid for comma-separated axis keys; `all` expands to
    /// every axis and an empty list gives an empty grid.
    pub fn from_keys(keys: &str, n_views: usize) -> Result<Self, UsageError> {
        let mut points = Vec::new();
        for key in keys.split(',').map(str::trim).filter(|k| !k.is_empty()) {
            if key == "all" {
                for axis in AXES {
                    points.extend(axis_points(axis, n_views)?);
                }
            } else {
                points.extend(axis_points(key, n_views)?);
            }
        }
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn point(name: String, axis: &str, level: f64, spec: DisturbanceSpec) -> GridPoint {
    GridPoint {
        name,
        axis: axis.to_string(),
        level,
        spec,
    }
}

fn small_misalign() -> DisturbanceSpec {
    let (_, rot, trans) = MISALIGN_LEVELS[0];
    DisturbanceSpec {
        misalign_rot_deg: rot,
        misalign_trans_m: trans,
        ..DisturbanceSpec::default()
    }
}

/// Points of one axis. Dropping `n` views removes views `0..n`.
pub fn axis_points(axis: &str, n_views: usize) -> Result<Vec<GridPoint>, UsageError> {
    let pts = match axis {
        "clean" => vec![point("clean".into(), "clean", 0.0, DisturbanceSpec::default())],
        "async" => ASYNC_LEVELS
            .iter()
            .map(|&dt| {
                let spec = DisturbanceSpec {
                    async_dt: dt,
                    ..DisturbanceSpec::default()
                };
                point(format!("async_{dt:.2}s"), axis, dt, spec)
            })
            .collect(),
        "misalign" => MISALIGN_LEVELS
            .iter()
            .map(|&(name, rot, trans)| {
                let spec = DisturbanceSpec {
                    misalign_rot_deg: rot,
                    misalign_trans_m: trans,
                    ..DisturbanceSpec::default()
                };
                point(format!("misalign_{name}"), axis, rot, spec)
            })
            .collect(),
        "drop" => DROP_LEVELS
            .iter()
            .map(|&n| {
                let spec = DisturbanceSpec {
                    dropped_views: (0..n.min(n_views)).collect::<BTreeSet<_>>(),
                    ..DisturbanceSpec::default()
                };
                point(format!("drop_{n}"), axis, n as f64, spec)
            })
            .collect(),
        "noise" => NOISE_GAINS
            .iter()
            .map(|&k| {
                let spec = DisturbanceSpec {
                    feat_gain: k,
                    feat_noise_amp: NOISE_AMP,
                    ..DisturbanceSpec::default()
                };
                point(format!("noise_k{k:.1}"), axis, k, spec)
            })
            .collect(),
        "multi" => MULTI_ASYNC
            .iter()
            .enumerate()
            .map(|(i, &dt)| {
                let spec = DisturbanceSpec {
                    async_dt: dt,
                    ..small_misalign()
                };
                point(format!("multi_level{}", i + 1), axis, (i + 1) as f64, spec)
            })
            .collect(),
        "calib" => {
            let spec = DisturbanceSpec {
                calib_trans_range: CALIB_TRANS_M,
                calib_rot_range_deg: CALIB_ROT_DEG,
                ..DisturbanceSpec::default()
            };
            vec![point("calib".into(), axis, CALIB_TRANS_M, spec)]
        }
        other => {
            return Err(UsageError(format!(
                "unknown grid key `{other}` (expected one of: all, {})",
                AXES.join(", ")
            )))
        }
    };
    Ok(pts)
}
