//! Disturbance injectors: sensor asynchrony, misaligned LiDAR placement,
//! dropped or corrupted images and inaccurate calibration.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::camera::{mat_mul, mat_vec, rot_z, wrap_angle, CameraModel};
use super::camera_branch::ViewFeatureMap;
use super::lidar::{BevGrid, Proposal3D};
use super::rng::{derive_seed, substream, Stream};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceSpec {
    /// Camera frames lag the LiDAR sweep by this many seconds.
    pub async_dt: f64,
    pub misalign_rot_deg: f64,
    pub misalign_trans_m: f64,
    pub dropped_views: BTreeSet<usize>,
    /// Gain `k` of `F' = k·F + B`.
    pub feat_gain: f64,
    /// Half-width of the uniform noise `B`.
    pub feat_noise_amp: f64,
    pub calib_trans_range: f64,
    pub calib_rot_range_deg: f64,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self {
            async_dt: 0.0,
            misalign_rot_deg: 0.0,
            misalign_trans_m: 0.0,
            dropped_views: BTreeSet::new(),
            feat_gain: 1.0,
            feat_noise_amp: 0.0,
            calib_trans_range: 0.0,
            calib_rot_range_deg: 0.0,
        }
    }
}

impl DisturbanceSpec {
    pub fn validate(&self, n_views: usize) -> Result<()> {
        if !(self.async_dt >= 0.0) {
            return Err(Error::config("async_dt must be non-negative"));
        }
        if let Some(&v) = self.dropped_views.iter().find(|&&v| v >= n_views) {
            return Err(Error::config(format!("dropped view {v} outside 0..{n_views}")));
        }
        if self.feat_noise_amp < 0.0 || self.calib_trans_range < 0.0 || self.calib_rot_range_deg < 0.0 {
            return Err(Error::config("disturbance ranges must be non-negative"));
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }

    pub fn drops_all(&self, n_views: usize) -> bool {
        (0..n_views).all(|v| self.dropped_views.contains(&v))
    }
}

/// Rigid ground-plane motion: rotate about the vertical axis through the
/// LiDAR origin, then shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MisalignTransform {
    pub yaw: f64,
    pub shift: [f64; 2],
}

impl MisalignTransform {
    /// Rotation of `rot_deg` and a shift of length `trans_m` in a direction
    /// drawn from `seed`.
    pub fn from_seed(rot_deg: f64, trans_m: f64, seed: u64) -> Self {
        let mut rng = substream(seed, Stream::Misalignment);
        let dir: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        Self {
            yaw: rot_deg.to_radians(),
            shift: [trans_m * dir.cos(), trans_m * dir.sin()],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.yaw == 0.0 && self.shift == [0.0, 0.0]
    }

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.shift[0], s * p[0] + c * p[1] + self.shift[1]]
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.yaw.sin_cos();
        // R(−θ)·(p − t) = R(−θ)p − R(−θ)t
        let t = self.shift;
        Self {
            yaw: -self.yaw,
            shift: [-(c * t[0] + s * t[1]), -(-s * t[0] + c * t[1])],
        }
    }

    pub fn apply(&self, proposals: &[Proposal3D], bev: &BevGrid) -> (Vec<Proposal3D>, BevGrid) {
        if self.is_identity() {
            return (proposals.to_vec(), bev.clone());
        }
        let moved = proposals
            .iter()
            .map(|p| {
                let q = self.apply_point([p.center[0], p.center[1]]);
                Proposal3D {
                    center: [q[0], q[1], p.center[2]],
                    yaw: wrap_angle(p.yaw + self.yaw),
                    ..p.clone()
                }
            })
            .collect();
        let inv = self.inverse();
        let mut out = BevGrid {
            data: vec![0.0; bev.data.len()],
            ..bev.clone()
        };
        for r in 0..bev.rows {
            for c in 0..bev.cols {
                let src = inv.apply_point(bev.cell_center(r, c));
                if let Some((sr, sc)) = bev.cell_of(src[0], src[1]) {
                    out.at_mut(r, c).copy_from_slice(bev.at(sr, sc));
                }
            }
        }
        (moved, out)
    }
}

/// Misaligned LiDAR placement: every 3D proposal and the BEV grid undergo
/// the same rigid motion while the features stay untouched.
pub fn apply_misalignment(
    proposals: &[Proposal3D],
    bev: &BevGrid,
    rot_deg: f64,
    trans_m: f64,
    seed: u64,
) -> (Vec<Proposal3D>, BevGrid) {
    MisalignTransform::from_seed(rot_deg, trans_m, seed).apply(proposals, bev)
}

/// Stale calibration: each camera's extrinsics composed with an independent
/// random rigid motion of the LiDAR frame (yaw in `±rot_range_deg`,
/// per-axis shift in `±trans_range_m`). Intrinsics are unchanged.
pub fn perturb_calibration(
    rig: &[CameraModel],
    trans_range_m: f64,
    rot_range_deg: f64,
    seed: u64,
) -> Vec<CameraModel> {
    if trans_range_m == 0.0 && rot_range_deg == 0.0 {
        return rig.to_vec();
    }
    let mut rng = substream(seed, Stream::Calibration);
    rig.iter()
        .map(|cam| {
            let yaw = if rot_range_deg > 0.0 {
                rng.random_range(-rot_range_deg..=rot_range_deg).to_radians()
            } else {
                0.0
            };
            let d: [f64; 3] = std::array::from_fn(|_| {
                if trans_range_m > 0.0 {
                    rng.random_range(-trans_range_m..=trans_range_m)
                } else {
                    0.0
                }
            });
            let rd = mat_vec(&cam.rotation, &d);
            CameraModel {
                rotation: mat_mul(&cam.rotation, &rot_z(yaw)),
                translation: [
                    cam.translation[0] + rd[0],
                    cam.translation[1] + rd[1],
                    cam.translation[2] + rd[2],
                ],
                ..cam.clone()
            }
        })
        .collect()
}

/// `F' = k·F + B` with `B ~ U(−amp, amp)` on every present view.
pub fn corrupt_features(fmap: &mut ViewFeatureMap, gain: f64, amp: f64, seed: u64) {
    if gain == 1.0 && amp == 0.0 {
        return;
    }
    for v in 0..fmap.n_views {
        if !fmap.present[v] {
            continue;
        }
        let mut rng = substream(derive_seed(seed, v as u64), Stream::Corruption);
        for x in fmap.view_mut(v) {
            let b = if amp > 0.0 { rng.random_range(-amp..amp) } else { 0.0 };
            *x = gain * *x + b;
        }
    }
}
