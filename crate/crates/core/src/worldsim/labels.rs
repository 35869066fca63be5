//! Ground-truth cross-modal correspondences, derived through the true
//! calibration. Only training and evaluation labeling use these.

use serde::{Deserialize, Serialize};

use super::camera::{CameraModel, Vec3};
use super::camera_branch::Proposal2D;
use super::lidar::Proposal3D;
use super::scene::Scene;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtCorrespondence {
    /// Views whose image contains the proposal's projected center; `[N_v]`
    /// when none does.
    pub view_labels: Vec<Vec<usize>>,
    /// Single training label per proposal: the in-bounds view whose image
    /// center is nearest the projected center, or `N_v`.
    pub dominant_view: Vec<usize>,
    /// `N_3d × (N_2d + 1)` one-hot rows; the last column is "unmatched".
    pub m_g: Vec<Vec<u8>>,
}

impl GtCorrespondence {
    /// Column index of the one-hot entry of row `i` (`N_2d` = unmatched).
    pub fn matched_column(&self, i: usize) -> usize {
        self.m_g[i].iter().position(|&x| x == 1).expect("rows are one-hot")
    }
}

/// In-bounds views of a point and the dominant one.
pub fn view_membership(rig: &[CameraModel], point: &Vec3) -> (Vec<usize>, usize) {
    let mut views = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for (v, cam) in rig.iter().enumerate() {
        if let Some(uv) = cam.project_in_bounds(point) {
            views.push(v);
            let d = cam.center_offset(&uv);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, v));
            }
        }
    }
    match best {
        Some((_, v)) => (views, v),
        None => (vec![rig.len()], rig.len()),
    }
}

/// View labels and the matching matrix `M_g` from source-object linkage.
///
/// Row `i` of `M_g` marks the 2D proposal showing the same object as 3D
/// proposal `i`; when several views show it, the one in the dominant view
/// wins, then the lowest index. Rows with no counterpart mark the null
/// column.
pub fn make_gt_correspondences(
    scene: &Scene,
    proposals3d: &[Proposal3D],
    proposals2d: &[Proposal2D],
    rig: &[CameraModel],
) -> Result<GtCorrespondence> {
    for id in proposals3d
        .iter()
        .filter_map(|p| p.src_object)
        .chain(proposals2d.iter().filter_map(|p| p.src_object))
    {
        if scene.object(id).is_none() {
            return Err(Error::Labeling(format!(
                "proposal linked to object {id}, which is not in the scene"
            )));
        }
    }
    let n2 = proposals2d.len();
    let mut out = GtCorrespondence {
        view_labels: Vec::with_capacity(proposals3d.len()),
        dominant_view: Vec::with_capacity(proposals3d.len()),
        m_g: Vec::with_capacity(proposals3d.len()),
    };
    for p in proposals3d {
        let (views, dominant) = view_membership(rig, &p.center);
        let mut row = vec![0u8; n2 + 1];
        let candidates: Vec<usize> = match p.src_object {
            Some(id) => (0..n2).filter(|&j| proposals2d[j].src_object == Some(id)).collect(),
            None => Vec::new(),
        };
        let pick = candidates
            .iter()
            .copied()
            .find(|&j| proposals2d[j].view == dominant)
            .or_else(|| candidates.first().copied());
        row[pick.unwrap_or(n2)] = 1;
        out.view_labels.push(views);
        out.dominant_view.push(dominant);
        out.m_g.push(row);
    }
    Ok(out)
}

/// Id-join target of 3D proposal `p` among `candidates` (indices into
/// `proposals2d`): position of the first candidate showing the same object,
/// or `candidates.len()` for "unmatched".
pub fn id_join_target(p: &Proposal3D, candidates: &[usize], proposals2d: &[Proposal2D]) -> usize {
    p.src_object
        .and_then(|id| candidates.iter().position(|&j| proposals2d[j].src_object == Some(id)))
        .unwrap_or(candidates.len())
}
