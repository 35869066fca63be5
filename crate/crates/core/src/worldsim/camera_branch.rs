//! Stand-in for the image branch: per-view feature maps and 2D proposals.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::camera::{project_box, Box2D};
use super::disturb::{corrupt_features, DisturbanceSpec};
use super::lidar::FeatureMixer;
use super::rng::{derive_seed, substream, Stream};
use super::scene::{scene_at, Scene};
use super::SimConfig;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub p_detect: f64,
    /// Standard deviation (pixels) of 2D box corner jitter.
    pub box_jitter: f64,
    /// False-positive 2D proposals per view.
    pub n_false_positives: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub feature_noise: f64,
    pub background_noise: f64,
    pub posenc_amp: f64,
    pub class_flip: f64,
    pub min_box_area: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            p_detect: 0.95,
            box_jitter: 2.0,
            n_false_positives: 1,
            feat_h: 6,
            feat_w: 12,
            feature_noise: 0.1,
            background_noise: 0.3,
            posenc_amp: 0.3,
            class_flip: 0.05,
            min_box_area: 4.0,
        }
    }
}

impl CameraConfig {
    pub fn noiseless() -> Self {
        Self {
            p_detect: 1.0,
            box_jitter: 0.0,
            n_false_positives: 0,
            feature_noise: 0.0,
            background_noise: 0.0,
            class_flip: 0.0,
            min_box_area: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal2D {
    pub view: usize,
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub class_id: usize,
    pub score: f64,
    pub src_object: Option<u32>,
}

/// Multi-view feature tensor `N_v × H × W × C`. Views that delivered no
/// frame are all zero and flagged absent.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatureMap {
    pub n_views: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
    pub present: Vec<bool>,
}

impl ViewFeatureMap {
    pub fn zeros(n_views: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n_views,
            h,
            w,
            c,
            data: vec![0.0; n_views * h * w * c],
            present: vec![true; n_views],
        }
    }

    pub fn view_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn view(&self, v: usize) -> &[f64] {
        &self.data[v * self.view_len()..(v + 1) * self.view_len()]
    }

    pub fn view_mut(&mut self, v: usize) -> &mut [f64] {
        let n = self.view_len();
        &mut self.data[v * n..(v + 1) * n]
    }

    pub fn cell(&self, v: usize, r: usize, col: usize) -> &[f64] {
        let k = ((v * self.h + r) * self.w + col) * self.c;
        &self.data[k..k + self.c]
    }

    pub fn cell_mut(&mut self, v: usize, r: usize, col: usize) -> &mut [f64] {
        let k = ((v * self.h + r) * self.w + col) * self.c;
        &mut self.data[k..k + self.c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Grid cells covered by a box given in feature-grid coordinates: cells
/// whose centers lie inside the box, or the single cell holding the box
/// center when the box is smaller than a cell.
pub fn roi_cells(grid_box: &Box2D, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..h {
        let cy = r as f64 + 0.5;
        if cy < grid_box.y1 || cy > grid_box.y2 {
            continue;
        }
        for c in 0..w {
            let cx = c as f64 + 0.5;
            if cx >= grid_box.x1 && cx <= grid_box.x2 {
                out.push((r, c));
            }
        }
    }
    if out.is_empty() && h > 0 && w > 0 {
        let [x, y] = grid_box.center();
        let c = (x.floor().max(0.0) as usize).min(w - 1);
        let r = (y.floor().max(0.0) as usize).min(h - 1);
        out.push((r, c));
    }
    out
}

/// Fixed sinusoidal code of a feature-grid cell.
pub fn cell_posenc(r: usize, col: usize, h: usize, w: usize, c: usize, amp: f64) -> Vec<f64> {
    let u = (col as f64 + 0.5) / w as f64;
    let v = (r as f64 + 0.5) / h as f64;
    (0..c)
        .map(|k| {
            let freq = std::f64::consts::PI * (1 + k / 2) as f64;
            if k % 2 == 0 {
                amp * (freq * u).sin()
            } else {
                amp * (freq * v).cos()
            }
        })
        .collect()
}

fn gauss<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
    } else {
        0.0
    }
}

/// Simulated camera branch observing `scene` under `disturb`.
///
/// Images are taken at `scene_at(scene, disturb.async_dt)`. Feature cells
/// inside an object's projected box carry its appearance code plus a cell
/// position code; nearer objects overwrite farther ones. Dropped views are
/// zero with no proposals, and present views get `F' = k·F + B`.
pub fn simulate_camera_branch(
    scene: &Scene,
    disturb: &DisturbanceSpec,
    cfg: &SimConfig,
    seed: u64,
) -> Result<(ViewFeatureMap, Vec<Proposal2D>)> {
    disturb.validate(scene.n_views())?;
    let cc = &cfg.camera;
    let dim = cfg.feature_dim;
    let mixer = FeatureMixer::new(dim, cfg.scene.appearance_dim);
    let observed = scene_at(scene, disturb.async_dt);
    let (h, w) = (cc.feat_h, cc.feat_w);
    let mut fmap = ViewFeatureMap::zeros(scene.n_views(), h, w, dim);
    let mut proposals = Vec::new();

    for (v, cam) in observed.rig.iter().enumerate() {
        if disturb.dropped_views.contains(&v) {
            fmap.present[v] = false;
            continue;
        }
        let view_seed = derive_seed(seed, v as u64);
        let mut det_rng = substream(view_seed, Stream::Camera);
        let mut noise_rng = substream(view_seed, Stream::ImageNoise);
        let mut fp_rng = substream(view_seed, Stream::CameraFalsePositives);
        let sx = w as f64 / cam.img_w;
        let sy = h as f64 / cam.img_h;

        for r in 0..h {
            for col in 0..w {
                let pe = cell_posenc(r, col, h, w, dim, cc.posenc_amp);
                let cell = fmap.cell_mut(v, r, col);
                for (x, p) in cell.iter_mut().zip(&pe) {
                    *x = p + gauss(&mut noise_rng, cc.background_noise);
                }
            }
        }

        let mut visible: Vec<(usize, Box2D, f64)> = observed
            .objects
            .iter()
            .enumerate()
            .filter_map(|(k, o)| {
                project_box(cam, &o.center, &o.size, o.yaw).map(|b| (k, b, cam.to_camera(&o.center)[2]))
            })
            .collect();

        // paint far to near
        let mut order: Vec<usize> = (0..visible.len()).collect();
        order.sort_by(|&a, &b| visible[b].2.total_cmp(&visible[a].2));
        for &i in &order {
            let (k, bbox, _) = visible[i];
            let feat = mixer.image_feature(&observed.objects[k].appearance);
            for (r, col) in roi_cells(&bbox.scaled(sx, sy), h, w) {
                let pe = cell_posenc(r, col, h, w, dim, cc.posenc_amp);
                let cell = fmap.cell_mut(v, r, col);
                for ((x, f), p) in cell.iter_mut().zip(&feat).zip(&pe) {
                    *x = f + p + gauss(&mut noise_rng, cc.feature_noise);
                }
            }
        }

        for (k, bbox, _) in visible.drain(..) {
            let o = &observed.objects[k];
            let detected = det_rng.random::<f64>() < cc.p_detect;
            let jitter: [f64; 4] = std::array::from_fn(|_| gauss(&mut det_rng, cc.box_jitter));
            let flip = det_rng.random::<f64>() < cc.class_flip;
            let other = det_rng.random_range(0..cfg.scene.n_classes.max(1));
            let score = det_rng.random_range(0.5..1.0);
            if !detected {
                continue;
            }
            let b = Box2D::new(bbox.x1 + jitter[0], bbox.y1 + jitter[1], bbox.x2 + jitter[2], bbox.y2 + jitter[3])
                .clip(cam.img_w, cam.img_h);
            if !(b.x1 < b.x2 && b.y1 < b.y2) || b.area() < cc.min_box_area {
                continue;
            }
            proposals.push(Proposal2D {
                view: v,
                bbox: b,
                class_id: if flip { other } else { o.class_id },
                score,
                src_object: Some(o.id),
            });
        }

        for _ in 0..cc.n_false_positives {
            let bw = fp_rng.random_range(8.0..cam.img_w / 4.0);
            let bh = fp_rng.random_range(8.0..cam.img_h / 3.0);
            let x1 = fp_rng.random_range(0.0..cam.img_w - bw);
            let y1 = fp_rng.random_range(0.0..cam.img_h - bh);
            proposals.push(Proposal2D {
                view: v,
                bbox: Box2D::new(x1, y1, x1 + bw, y1 + bh),
                class_id: fp_rng.random_range(0..cfg.scene.n_classes.max(1)),
                score: fp_rng.random_range(0.3..0.7),
                src_object: None,
            });
        }
    }

    corrupt_features(&mut fmap, disturb.feat_gain, disturb.feat_noise_amp, seed);
    Ok((fmap, proposals))
}
