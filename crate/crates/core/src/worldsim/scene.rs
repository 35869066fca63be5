use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::camera::{CameraModel, Vec3};
use super::rng::{substream, Stream};
use crate::error::{Error, Result};

pub const SCENE_FORMAT_VERSION: u32 = 1;

/// Nominal (length, width, height) per class, cycled for extra classes.
pub const CLASS_SIZES: [Vec3; 4] = [
    [4.5, 1.9, 1.6],
    [0.8, 0.7, 1.75],
    [1.8, 0.7, 1.5],
    [8.0, 2.6, 3.0],
];

pub fn class_size(class_id: usize) -> Vec3 {
    CLASS_SIZES[class_id % CLASS_SIZES.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigConfig {
    pub n_views: usize,
    pub img_w: f64,
    pub img_h: f64,
    pub hfov_deg: f64,
    pub mount_height: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            n_views: 6,
            img_w: 384.0,
            img_h: 192.0,
            hfov_deg: 70.0,
            mount_height: 1.5,
        }
    }
}

impl RigConfig {
    /// Ring of outward-facing cameras at equal yaw spacing, view 0 facing +x.
    pub fn build(&self) -> Result<Vec<CameraModel>> {
        if self.n_views == 0 {
            return Err(Error::config("rig needs at least one camera"));
        }
        (0..self.n_views)
            .map(|v| {
                let yaw = 2.0 * std::f64::consts::PI * v as f64 / self.n_views as f64;
                CameraModel::looking_along(
                    yaw,
                    [0.0, 0.0, self.mount_height],
                    self.hfov_deg,
                    self.img_w,
                    self.img_h,
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub rig: RigConfig,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Half extents of the square world (meters) along x and y.
    pub world_extent: [f64; 2],
    /// Objects are kept at least this far (meters) from the rig.
    pub min_range: f64,
    /// Objects are placed no further than this from the rig.
    pub max_range: f64,
    pub min_separation: f64,
    pub n_classes: usize,
    pub appearance_dim: usize,
    pub max_speed: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            rig: RigConfig::default(),
            min_objects: 4,
            max_objects: 12,
            world_extent: [50.0, 50.0],
            min_range: 4.0,
            max_range: 45.0,
            min_separation: 4.0,
            n_classes: 3,
            appearance_dim: 16,
            max_speed: 10.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rig.n_views == 0 {
            return Err(Error::config("N_v must be at least 1"));
        }
        if self.n_classes == 0 {
            return Err(Error::config("class set is empty"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("min_objects exceeds max_objects"));
        }
        if !(self.world_extent[0] > 0.0 && self.world_extent[1] > 0.0) {
            return Err(Error::config("world extent must be positive"));
        }
        if self.min_range < 0.0 || self.max_range <= self.min_range {
            return Err(Error::config("range interval is empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub class_id: usize,
    /// Center at the scene's current timestamp.
    pub center: Vec3,
    /// Center at timestamp 0; `center = origin + velocity·timestamp`.
    pub origin: Vec3,
    /// (length, width, height)
    pub size: Vec3,
    pub yaw: f64,
    /// Ground-plane velocity (m/s).
    pub velocity: [f64; 2],
    pub appearance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub rig: Vec<CameraModel>,
    pub timestamp: f64,
    pub seed: u64,
    pub world_extent: [f64; 2],
}

impl Scene {
    pub fn n_views(&self) -> usize {
        self.rig.len()
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }
}

/// Random scene: objects on the ground plane around a ring camera rig.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let rig = config.rig.build()?;
    let mut rng = substream(seed, Stream::Scene);
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let [ex, ey] = config.world_extent;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    let mut attempts = 0;
    while objects.len() < n && attempts < 200 * n.max(1) {
        attempts += 1;
        let x = rng.random_range(-ex..ex);
        let y = rng.random_range(-ey..ey);
        let r = x.hypot(y);
        if r < config.min_range || r > config.max_range {
            continue;
        }
        if objects
            .iter()
            .any(|o| (o.center[0] - x).hypot(o.center[1] - y) < config.min_separation)
        {
            continue;
        }
        let class_id = rng.random_range(0..config.n_classes);
        let nominal = class_size(class_id);
        let size = [
            nominal[0] * rng.random_range(0.9..1.1),
            nominal[1] * rng.random_range(0.9..1.1),
            nominal[2] * rng.random_range(0.9..1.1),
        ];
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let speed = rng.random_range(0.0..=config.max_speed);
        let appearance = (0..config.appearance_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        objects.push(SceneObject {
            id: objects.len() as u32,
            class_id,
            center: [x, y, size[2] / 2.0],
            origin: [x, y, size[2] / 2.0],
            size,
            yaw,
            velocity: [speed * yaw.cos(), speed * yaw.sin()],
            appearance,
        });
    }
    Ok(Scene {
        objects,
        rig,
        timestamp: 0.0,
        seed,
        world_extent: config.world_extent,
    })
}

/// The scene `dt` seconds later under constant velocity.
///
/// Positions are recomputed from each object's origin, so for scenes that
/// start at timestamp 0 composing shifts is exact:
/// `scene_at(scene_at(s, a), b) == scene_at(s, a + b)`.
pub fn scene_at(scene: &Scene, dt: f64) -> Scene {
    if dt == 0.0 {
        return scene.clone();
    }
    let mut out = scene.clone();
    out.timestamp = scene.timestamp + dt;
    for o in &mut out.objects {
        o.center[0] = o.origin[0] + o.velocity[0] * out.timestamp;
        o.center[1] = o.origin[1] + o.velocity[1] * out.timestamp;
    }
    out
}
