//! Synthetic multi-view driving scenes and stand-ins for both detector
//! branches, plus the disturbance injectors used by the robustness sweeps.

mod camera;
mod camera_branch;
mod disturb;
pub mod io;
mod labels;
mod lidar;
pub mod rng;
mod scene;

use serde::{Deserialize, Serialize};

pub use camera::{
    box_corners, mat_mul, mat_vec, project_box, rot_z, transpose, wrap_angle, Box2D, CameraModel, Mat3, Vec3,
    NEAR_PLANE,
};
pub use camera_branch::{cell_posenc, roi_cells, simulate_camera_branch, CameraConfig, Proposal2D, ViewFeatureMap};
pub use disturb::{
    apply_misalignment, corrupt_features, perturb_calibration, DisturbanceSpec, MisalignTransform,
};
pub use labels::{id_join_target, make_gt_correspondences, view_membership, GtCorrespondence};
pub use lidar::{
    geometry_code, in_footprint, simulate_lidar_branch, BevGrid, FeatureMixer, LidarConfig, Proposal3D,
    GEOMETRY_DIM,
};
pub use scene::{
    class_size, generate_scene, scene_at, RigConfig, Scene, SceneConfig, SceneObject, CLASS_SIZES,
    SCENE_FORMAT_VERSION,
};

use crate::error::Result;

/// Everything both branch simulators need besides the scene itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub scene: SceneConfig,
    pub lidar: LidarConfig,
    pub camera: CameraConfig,
    /// Channel width `C` of every synthesized feature.
    pub feature_dim: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            lidar: LidarConfig::default(),
            camera: CameraConfig::default(),
            feature_dim: 64,
        }
    }
}

impl SimConfig {
    pub fn noiseless() -> Self {
        Self {
            lidar: LidarConfig::noiseless(),
            camera: CameraConfig::noiseless(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.feature_dim == 0 {
            return Err(crate::Error::config("feature_dim must be positive"));
        }
        if self.camera.feat_h == 0 || self.camera.feat_w == 0 {
            return Err(crate::Error::config("feature grid must be non-empty"));
        }
        Ok(())
    }
}
