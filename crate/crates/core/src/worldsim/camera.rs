//! Pinhole cameras, box geometry and the projection primitive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Corners closer than this to the image plane are clamped before the
/// perspective divide.
pub const NEAR_PLANE: f64 = 0.05;

/// Pinhole camera. `rotation`/`translation` map world points into the
/// camera frame (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub img_w: f64,
    pub img_h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0]
    }

    pub fn clip(&self, w: f64, h: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn iou(&self, other: &Box2D) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

/// Rotation about the world vertical (z) axis.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Wraps an angle into `[−π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        img_w: f64,
        img_h: f64,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            img_w,
            img_h,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("camera focal lengths must be positive"));
        }
        if !(self.img_w > 0.0 && self.img_h > 0.0) {
            return Err(Error::config("camera image size must be positive"));
        }
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        for (i, row) in rtr.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (v - want).abs() > 1e-9 {
                    return Err(Error::config("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    /// Outward-facing camera at `position`, looking along world heading
    /// `yaw` (radians from +x towards +y), level with the ground.
    pub fn looking_along(
        yaw: f64,
        position: Vec3,
        hfov_deg: f64,
        img_w: f64,
        img_h: f64,
    ) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        // rows: camera x (right), y (down), z (forward) in world coordinates
        let rotation = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let t = mat_vec(&rotation, &position);
        let f = (img_w / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(
            f,
            f,
            img_w / 2.0,
            img_h / 2.0,
            rotation,
            [-t[0], -t[1], -t[2]],
            img_w,
            img_h,
        )
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// Pixel coordinates of a camera-frame point (no depth check).
    pub fn pixel_of(&self, pc: &Vec3) -> [f64; 2] {
        [
            self.fx * pc[0] / pc[2] + self.cx,
            self.fy * pc[1] / pc[2] + self.cy,
        ]
    }

    /// Projects a world point; `None` behind the camera.
    pub fn project_point(&self, p: &Vec3) -> Option<[f64; 2]> {
        let pc = self.to_camera(p);
        (pc[2] > 0.0).then(|| self.pixel_of(&pc))
    }

    /// Projects a world point that lands inside the image bounds.
    pub fn project_in_bounds(&self, p: &Vec3) -> Option<[f64; 2]> {
        self.project_point(p)
            .filter(|uv| uv[0] >= 0.0 && uv[0] <= self.img_w && uv[1] >= 0.0 && uv[1] <= self.img_h)
    }

    /// Distance from the image center normalized by the half-diagonal.
    pub fn center_offset(&self, uv: &[f64; 2]) -> f64 {
        let dx = (uv[0] - self.img_w / 2.0) / (self.img_w / 2.0);
        let dy = (uv[1] - self.img_h / 2.0) / (self.img_h / 2.0);
        (dx * dx + dy * dy).sqrt()
    }
}

/// The eight corners of a box with ground-plane heading `yaw`.
pub fn box_corners(center: &Vec3, size: &Vec3, yaw: f64) -> [Vec3; 8] {
    let (s, c) = yaw.sin_cos();
    let (hl, hw, hh) = (size[0] / 2.0, size[1] / 2.0, size[2] / 2.0);
    let mut out = [[0.0; 3]; 8];
    let mut k = 0;
    for dx in [-hl, hl] {
        for dy in [-hw, hw] {
            for dz in [-hh, hh] {
                out[k] = [
                    center[0] + c * dx - s * dy,
                    center[1] + s * dx + c * dy,
                    center[2] + dz,
                ];
                k += 1;
            }
        }
    }
    out
}

/// Pixel-space axis-aligned hull of a projected 3D box, clipped to the
/// image. `None` when the box center is not in front of the camera or the
/// clipped hull is empty.
pub fn project_box(cam: &CameraModel, center: &Vec3, size: &Vec3, yaw: f64) -> Option<Box2D> {
    if cam.to_camera(center)[2] <= 0.0 {
        return None;
    }
    let mut hull = Box2D::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for corner in box_corners(center, size, yaw) {
        let mut pc = cam.to_camera(&corner);
        pc[2] = pc[2].max(NEAR_PLANE);
        let uv = cam.pixel_of(&pc);
        hull.x1 = hull.x1.min(uv[0]);
        hull.y1 = hull.y1.min(uv[1]);
        hull.x2 = hull.x2.max(uv[0]);
        hull.y2 = hull.y2.max(uv[1]);
    }
    let clipped = hull.clip(cam.img_w, cam.img_h);
    (clipped.area() > 0.0).then_some(clipped)
}
