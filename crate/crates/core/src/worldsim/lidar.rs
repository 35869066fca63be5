//! Stand-in for the LiDAR detector branch: 3D proposals with feature rows
//! and a bird's-eye-view feature grid.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::camera::{wrap_angle, Vec3};
use super::rng::{substream, Stream};
use super::scene::{class_size, Scene};
use super::SimConfig;
use crate::error::{Error, Result};

/// Length of the geometry code mixed into 3D features.
pub const GEOMETRY_DIM: usize = 8;

/// Seed of the fixed mixing matrices. Both branches share it so the same
/// latent appearance shows up, differently encoded, in both modalities.
const MIXER_SEED: u64 = 0x5EED_F00D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarConfig {
    pub p_detect: f64,
    pub center_noise: f64,
    /// Relative standard deviation of box dimensions.
    pub size_noise: f64,
    pub yaw_noise: f64,
    pub n_false_positives: usize,
    pub feature_noise: f64,
    pub class_logit_scale: f64,
    pub class_logit_noise: f64,
    pub bev_cell: f64,
    pub bev_noise: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            p_detect: 0.95,
            center_noise: 0.15,
            size_noise: 0.05,
            yaw_noise: 0.05,
            n_false_positives: 2,
            feature_noise: 0.1,
            class_logit_scale: 3.0,
            class_logit_noise: 1.0,
            bev_cell: 1.0,
            bev_noise: 0.05,
        }
    }
}

impl LidarConfig {
    pub fn noiseless() -> Self {
        Self {
            p_detect: 1.0,
            center_noise: 0.0,
            size_noise: 0.0,
            yaw_noise: 0.0,
            n_false_positives: 0,
            feature_noise: 0.0,
            class_logit_noise: 0.0,
            bev_noise: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal3D {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
    pub class_logits: Vec<f64>,
    pub feature: Vec<f64>,
    pub src_object: Option<u32>,
}

impl Proposal3D {
    pub fn class_id(&self) -> usize {
        argmax(&self.class_logits)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Dense bird's-eye-view grid over `[−ex, ex] × [−ey, ey]`; row index runs
/// along y, column index along x.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub extent: [f64; 2],
    pub cell: f64,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl BevGrid {
    pub fn zeros(extent: [f64; 2], cell: f64, channels: usize) -> Result<Self> {
        if !(cell > 0.0) {
            return Err(Error::config("BEV cell size must be positive"));
        }
        let cols = (2.0 * extent[0] / cell).round() as usize;
        let rows = (2.0 * extent[1] / cell).round() as usize;
        Ok(Self {
            extent,
            cell,
            rows,
            cols,
            channels,
            data: vec![0.0; rows * cols * channels],
        })
    }

    pub fn cell_center(&self, r: usize, c: usize) -> [f64; 2] {
        [
            -self.extent[0] + (c as f64 + 0.5) * self.cell,
            -self.extent[1] + (r as f64 + 0.5) * self.cell,
        ]
    }

    /// Cell containing the ground point, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x + self.extent[0]) / self.cell).floor();
        let r = ((y + self.extent[1]) / self.cell).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.cols && (r as usize) < self.rows)
            .then_some((r as usize, c as usize))
    }

    pub fn at(&self, r: usize, c: usize) -> &[f64] {
        let k = (r * self.cols + c) * self.channels;
        &self.data[k..k + self.channels]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let k = (r * self.cols + c) * self.channels;
        &mut self.data[k..k + self.channels]
    }

    /// Cells whose centers fall inside the rotated ground footprint.
    pub fn footprint_cells(&self, center: &Vec3, size: &Vec3, yaw: f64) -> Vec<(usize, usize)> {
        let reach = 0.5 * size[0].hypot(size[1]);
        let lo = self.cell_index_range(center[0] - reach, center[0] + reach, self.extent[0], self.cols);
        let hi = self.cell_index_range(center[1] - reach, center[1] + reach, self.extent[1], self.rows);
        let mut out = Vec::new();
        let (Some((c0, c1)), Some((r0, r1))) = (lo, hi) else {
            return out;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                let p = self.cell_center(r, c);
                if in_footprint(&p, center, size, yaw) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    fn cell_index_range(&self, lo: f64, hi: f64, extent: f64, n: usize) -> Option<(usize, usize)> {
        let a = ((lo + extent) / self.cell).floor().max(0.0);
        let b = ((hi + extent) / self.cell).floor().min(n as f64 - 1.0);
        (n > 0 && a <= b).then_some((a as usize, b as usize))
    }
}

/// Whether a ground point lies inside a rotated rectangle (inclusive).
pub fn in_footprint(p: &[f64; 2], center: &Vec3, size: &Vec3, yaw: f64) -> bool {
    let (s, c) = yaw.sin_cos();
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= size[0] / 2.0 && ly.abs() <= size[1] / 2.0
}

/// Fixed linear maps from latent appearance (and geometry) to feature space.
#[derive(Clone, Debug)]
pub struct FeatureMixer {
    pub dim: usize,
    pub appearance_dim: usize,
    lidar: Vec<f64>,
    image: Vec<f64>,
}

impl FeatureMixer {
    pub fn new(dim: usize, appearance_dim: usize) -> Self {
        let mut rng = substream(MIXER_SEED, Stream::Mixer);
        let in3 = appearance_dim + GEOMETRY_DIM;
        let s3 = 1.0 / (in3 as f64).sqrt();
        let s2 = 1.0 / (appearance_dim.max(1) as f64).sqrt();
        let lidar = (0..dim * in3)
            .map(|_| s3 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>();
        let image = (0..dim * appearance_dim)
            .map(|_| s2 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>();
        Self {
            dim,
            appearance_dim,
            lidar,
            image,
        }
    }

    pub fn lidar_feature(&self, appearance: &[f64], geometry: &[f64; GEOMETRY_DIM]) -> Vec<f64> {
        let n = self.appearance_dim + GEOMETRY_DIM;
        (0..self.dim)
            .map(|i| {
                let row = &self.lidar[i * n..(i + 1) * n];
                let a: f64 = row[..self.appearance_dim].iter().zip(appearance).map(|(w, x)| w * x).sum();
                let g: f64 = row[self.appearance_dim..].iter().zip(geometry).map(|(w, x)| w * x).sum();
                a + g
            })
            .collect()
    }

    pub fn image_feature(&self, appearance: &[f64]) -> Vec<f64> {
        let n = self.appearance_dim;
        (0..self.dim)
            .map(|i| self.image[i * n..(i + 1) * n].iter().zip(appearance).map(|(w, x)| w * x).sum())
            .collect()
    }
}

pub fn geometry_code(center: &Vec3, size: &Vec3, yaw: f64, extent: [f64; 2]) -> [f64; GEOMETRY_DIM] {
    [
        center[0] / extent[0],
        center[1] / extent[1],
        center[2] / 3.0,
        size[0].ln(),
        size[1].ln(),
        size[2].ln(),
        yaw.sin(),
        yaw.cos(),
    ]
}

fn gauss<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
    } else {
        0.0
    }
}

fn class_logits<R: Rng>(rng: &mut R, class_id: usize, cfg: &LidarConfig, n_classes: usize) -> Vec<f64> {
    (0..n_classes)
        .map(|k| {
            let base = if k == class_id { cfg.class_logit_scale } else { 0.0 };
            base + gauss(rng, cfg.class_logit_noise)
        })
        .collect()
}

/// Simulated LiDAR branch output for `scene`.
///
/// Each object is detected with probability `p_detect`; detected geometry
/// is jittered and the feature row mixes the object's appearance with its
/// geometry. False positives get random geometry and an appearance of their
/// own. The BEV grid carries every object's (and false positive's) noise-free
/// feature inside its footprint.
pub fn simulate_lidar_branch(scene: &Scene, cfg: &SimConfig, seed: u64) -> Result<(Vec<Proposal3D>, BevGrid)> {
    let lc = &cfg.lidar;
    let dim = cfg.feature_dim;
    let n_classes = cfg.scene.n_classes;
    let ca = cfg.scene.appearance_dim;
    let mixer = FeatureMixer::new(dim, ca);
    let extent = scene.world_extent;
    let mut rng = substream(seed, Stream::Lidar);
    let mut fp_rng = substream(seed, Stream::LidarFalsePositives);
    let mut bev_rng = substream(seed, Stream::Bev);

    let mut proposals = Vec::new();
    // (center, size, yaw, clean feature) of everything the sensor returns
    let mut footprints: Vec<(Vec3, Vec3, f64, Vec<f64>)> = Vec::new();

    for o in &scene.objects {
        let clean = mixer.lidar_feature(&o.appearance, &geometry_code(&o.center, &o.size, o.yaw, extent));
        footprints.push((o.center, o.size, o.yaw, clean));
        let detected = rng.random::<f64>() < lc.p_detect;
        // draw the jitter unconditionally so detection flips do not reshuffle later objects
        let dc = [gauss(&mut rng, lc.center_noise), gauss(&mut rng, lc.center_noise), gauss(&mut rng, lc.center_noise / 2.0)];
        let ds = [gauss(&mut rng, lc.size_noise), gauss(&mut rng, lc.size_noise), gauss(&mut rng, lc.size_noise)];
        let dyaw = gauss(&mut rng, lc.yaw_noise);
        let logits = class_logits(&mut rng, o.class_id, lc, n_classes);
        let fnoise: Vec<f64> = (0..dim).map(|_| gauss(&mut rng, lc.feature_noise)).collect();
        if !detected {
            continue;
        }
        let center = [o.center[0] + dc[0], o.center[1] + dc[1], o.center[2] + dc[2]];
        let size = [
            o.size[0] * (1.0 + ds[0]).max(0.2),
            o.size[1] * (1.0 + ds[1]).max(0.2),
            o.size[2] * (1.0 + ds[2]).max(0.2),
        ];
        let yaw = wrap_angle(o.yaw + dyaw);
        let mut feature = mixer.lidar_feature(&o.appearance, &geometry_code(&center, &size, yaw, extent));
        for (f, n) in feature.iter_mut().zip(&fnoise) {
            *f += n;
        }
        proposals.push(Proposal3D {
            center,
            size,
            yaw,
            class_logits: logits,
            feature,
            src_object: Some(o.id),
        });
    }

    for _ in 0..lc.n_false_positives {
        let class_id = fp_rng.random_range(0..n_classes);
        let nominal = class_size(class_id);
        let r = fp_rng.random_range(cfg.scene.min_range..cfg.scene.max_range);
        let theta = fp_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let center = [r * theta.cos(), r * theta.sin(), nominal[2] / 2.0];
        let yaw = fp_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let appearance: Vec<f64> = (0..ca).map(|_| StandardNormal.sample(&mut fp_rng)).collect();
        let clean = mixer.lidar_feature(&appearance, &geometry_code(&center, &nominal, yaw, extent));
        let mut feature = clean.clone();
        for f in &mut feature {
            *f += gauss(&mut fp_rng, lc.feature_noise);
        }
        proposals.push(Proposal3D {
            center,
            size: nominal,
            yaw,
            class_logits: class_logits(&mut fp_rng, class_id, lc, n_classes),
            feature,
            src_object: None,
        });
        footprints.push((center, nominal, yaw, clean));
    }

    let mut bev = BevGrid::zeros(extent, lc.bev_cell, dim)?;
    for (center, size, yaw, feat) in &footprints {
        for (r, c) in bev.footprint_cells(center, size, *yaw) {
            let cell = bev.at_mut(r, c);
            for (v, f) in cell.iter_mut().zip(feat) {
                *v = f + gauss(&mut bev_rng, lc.bev_noise);
            }
        }
    }
    Ok((proposals, bev))
}
