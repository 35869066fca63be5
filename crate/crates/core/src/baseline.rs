//! Projection-based association: the contrast class that needs calibration
//! at inference. Each 3D box is projected through the given rig into the
//! view holding its center and paired with the best-overlapping 2D box.

use serde::{Deserialize, Serialize};

use crate::worldsim::{project_box, view_membership, CameraModel, Proposal2D, Proposal3D};

/// Minimum IoU between the projected 3D box and a 2D proposal.
pub const IOU_GATE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineMatch {
    pub proposal: usize,
    /// View holding the projected center (nearest image center on overlap).
    pub view: Option<usize>,
    pub box2d_index: Option<usize>,
    pub iou: Option<f64>,
}

/// Greedy per-proposal max-IoU matching through `rig`, which may be
/// perturbed. Ties go to the lower 2D index.
pub fn baseline_match(
    proposals3d: &[Proposal3D],
    proposals2d: &[Proposal2D],
    rig: &[CameraModel],
    iou_gate: f64,
) -> Vec<BaselineMatch> {
    proposals3d
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (_, dominant) = view_membership(rig, &p.center);
            if dominant >= rig.len() {
                return BaselineMatch {
                    proposal: i,
                    view: None,
                    box2d_index: None,
                    iou: None,
                };
            }
            let projected = project_box(&rig[dominant], &p.center, &p.size, p.yaw);
            let mut best: Option<(usize, f64)> = None;
            if let Some(pb) = projected {
                for (j, q) in proposals2d.iter().enumerate() {
                    if q.view != dominant {
                        continue;
                    }
                    let iou = pb.iou(&q.bbox);
                    if iou >= iou_gate && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
            }
            BaselineMatch {
                proposal: i,
                view: Some(dominant),
                box2d_index: best.map(|b| b.0),
                iou: best.map(|b| b.1),
            }
        })
        .collect()
}
