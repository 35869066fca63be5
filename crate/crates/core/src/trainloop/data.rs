//! Scene suites, branch simulation under a disturbance, and training
//! labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusionhead::{target_deltas, N_DELTAS};
use crate::model::SceneInputs;
use crate::worldsim::rng::derive_seed;
use crate::worldsim::{
    apply_misalignment, generate_scene, make_gt_correspondences, simulate_camera_branch, simulate_lidar_branch,
    BevGrid, DisturbanceSpec, GtCorrespondence, Proposal2D, Proposal3D, Scene, SimConfig, ViewFeatureMap,
};

/// A proposal is foreground when a ground-truth center lies this close
/// (ground plane, meters).
pub const FOREGROUND_RADIUS: f64 = 2.0;

/// Scenes `0..n` of the suite keyed by `base_seed`.
pub fn scene_suite(sim: &SimConfig, base_seed: u64, n: usize) -> Result<Vec<Scene>> {
    (0..n as u64).map(|i| generate_scene(&sim.scene, derive_seed(base_seed, i))).collect()
}

/// Per-purpose seeds of one scene's simulation.
fn lidar_seed(scene: &Scene) -> u64 {
    derive_seed(scene.seed, 1)
}
fn camera_seed(scene: &Scene) -> u64 {
    derive_seed(scene.seed, 2)
}
pub(crate) fn misalign_seed(scene: &Scene) -> u64 {
    derive_seed(scene.seed, 3)
}
pub(crate) fn calibration_seed(scene: &Scene) -> u64 {
    derive_seed(scene.seed, 4)
}

/// Detection target of one 3D proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetTarget {
    /// Ground-truth class, or `N_cls` for background.
    pub class: usize,
    /// Assigned object id and box deltas for foreground proposals.
    pub object: Option<u32>,
    pub deltas: Option<[f64; N_DELTAS]>,
}

/// Branch outputs of one scene under a disturbance plus scoring labels.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub proposals3d: Vec<Proposal3D>,
    pub bev: BevGrid,
    pub fmap: ViewFeatureMap,
    pub proposals2d: Vec<Proposal2D>,
    /// View labels from the undisturbed geometry and true rig; `M_g` by
    /// object id against the (possibly disturbed) 2D proposals.
    pub gt: GtCorrespondence,
    pub det: Vec<DetTarget>,
}

impl SceneSample {
    pub fn inputs(&self) -> SceneInputs<'_> {
        SceneInputs {
            proposals3d: &self.proposals3d,
            bev: &self.bev,
            fmap: &self.fmap,
            proposals2d: &self.proposals2d,
        }
    }
}

/// Nearest ground-truth object within [`FOREGROUND_RADIUS`] of each
/// proposal's ground-plane center.
pub fn detection_targets(scene: &Scene, proposals: &[Proposal3D], n_classes: usize) -> Vec<DetTarget> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(f64, usize)> = None;
            for (k, o) in scene.objects.iter().enumerate() {
                let d = (o.center[0] - p.center[0]).hypot(o.center[1] - p.center[1]);
                if d <= FOREGROUND_RADIUS && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, k));
                }
            }
            match best {
                Some((_, k)) => {
                    let o = &scene.objects[k];
                    DetTarget {
                        class: o.class_id,
                        object: Some(o.id),
                        deltas: Some(target_deltas(p, &o.center, &o.size, o.yaw)),
                    }
                }
                None => DetTarget {
                    class: n_classes,
                    object: None,
                    deltas: None,
                },
            }
        })
        .collect()
}

/// Simulates both branches for `scene` under `disturb`. Calibration
/// perturbation has no effect here: it only exists for matchers that
/// consume a rig.
pub fn simulate_scene(scene: &Scene, sim: &SimConfig, disturb: &DisturbanceSpec) -> Result<SceneSample> {
    disturb.validate(scene.n_views())?;
    let (clean3d, clean_bev) = simulate_lidar_branch(scene, sim, lidar_seed(scene))?;
    let (fmap, proposals2d) = simulate_camera_branch(scene, disturb, sim, camera_seed(scene))?;
    let gt = make_gt_correspondences(scene, &clean3d, &proposals2d, &scene.rig)?;
    let (proposals3d, bev) = if disturb.misalign_rot_deg != 0.0 || disturb.misalign_trans_m != 0.0 {
        apply_misalignment(
            &clean3d,
            &clean_bev,
            disturb.misalign_rot_deg,
            disturb.misalign_trans_m,
            misalign_seed(scene),
        )
    } else {
        (clean3d, clean_bev)
    };
    let det = detection_targets(scene, &proposals3d, sim.scene.n_classes);
    if gt.dominant_view.len() != proposals3d.len() {
        return Err(Error::Labeling("label rows do not line up with proposals".into()));
    }
    Ok(SceneSample {
        proposals3d,
        bev,
        fmap,
        proposals2d,
        gt,
        det,
    })
}
