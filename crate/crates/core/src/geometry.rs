//! Pinhole cameras, projection and ray generation.
//!
//! World coordinates are right-handed. Cameras look down their local `-z`
//! with `+y` up; the image origin is the top-left corner and pixel `(i, j)`
//! has its centre at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Vec3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-5;

/// World-from-camera rotation `r` and camera position `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    r: Matrix3<f64>,
    t: Vec3,
}

impl CameraPose {
    pub fn new(r: Matrix3<f64>, t: Vec3) -> Result<Self> {
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL || (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(invalid("pose", format!("rotation is not orthonormal (|R^T R - I| = {err:e})")));
        }
        Ok(CameraPose { r, t })
    }

    /// Camera at `eye` looking at `target`; `up` only fixes the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let fwd = target - eye;
        if fwd.norm() < 1e-12 {
            return Err(invalid("pose", "eye and target coincide"));
        }
        let fwd = fwd.normalize();
        let mut right = fwd.cross(&up);
        if right.norm() < 1e-9 {
            // looking along `up`: pick any perpendicular roll
            let alt = if fwd.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
            right = fwd.cross(&alt);
        }
        let right = right.normalize();
        let cam_up = right.cross(&fwd);
        let r = Matrix3::from_columns(&[right, cam_up, -fwd]);
        CameraPose::new(r, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn position(&self) -> Vec3 {
        self.t
    }

    /// `[R t; 0 1]`.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = Vector4::new(m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]);
        if (bottom - Vector4::new(0.0, 0.0, 0.0, 1.0)).abs().max() > ORTHO_TOL {
            return Err(invalid("pose", "bottom row must be [0 0 0 1]"));
        }
        CameraPose::new(m.fixed_view::<3, 3>(0, 0).into_owned(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    /// World point into camera coordinates, `R^T (V - t)`.
    pub fn to_camera(&self, v: &Vec3) -> Vec3 {
        self.r.transpose() * (v - self.t)
    }

    pub fn row_major(&self) -> [f64; 16] {
        let m = self.matrix();
        std::array::from_fn(|i| m[(i / 4, i % 4)])
    }
}

/// Square-pixel pinhole intrinsics; `fov_deg` spans the larger image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(invalid("fov", format!("{fov_deg} outside (0, 180)")));
        }
        if width == 0 || height == 0 {
            return Err(invalid("image size", format!("{width}x{height}")));
        }
        Ok(Intrinsics { fov_deg, width, height })
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width.max(self.height) as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }

    /// The 3x4 matrix taking homogeneous camera coordinates to `(u, v, w)`.
    pub fn kappa(&self) -> Matrix3x4<f64> {
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        Matrix3x4::new(f, 0.0, -cx, 0.0, 0.0, -f, -cy, 0.0, 0.0, 0.0, -1.0, 0.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Homogeneous image coordinates; `w` is depth along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl Projection {
    /// False for points on or behind the camera plane.
    pub fn in_front(&self) -> bool {
        self.w > 1e-12
    }

    pub fn pixel(&self) -> Option<(f64, f64)> {
        self.in_front().then(|| (self.u / self.w, self.v / self.w))
    }
}

/// `kappa * pose^-1 * V` for a world point.
pub fn project_point(pose: &CameraPose, k: &Intrinsics, v: &Vec3) -> Projection {
    let c = pose.to_camera(v);
    let p = k.kappa() * Vector4::new(c.x, c.y, c.z, 1.0);
    Projection { u: p.x, v: p.y, w: p.z }
}

pub fn project_homogeneous(pose: &CameraPose, k: &Intrinsics, v: &Vector4<f64>) -> Projection {
    let inv = pose.matrix().try_inverse().expect("rigid transforms are invertible");
    let p = k.kappa() * (inv * v);
    Projection { u: p.x, v: p.y, w: p.z }
}

pub fn camera_distance(pose: &CameraPose, v: &Vec3) -> f64 {
    (v - pose.t).norm()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Ray with its interval clipped to the `[-1, 1]^3` box.
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        let dir = dir.normalize();
        let (t_near, t_far) = slab(&origin, &dir).unwrap_or((0.0, -1.0));
        Ray { origin, dir, t_near, t_far }
    }

    pub fn hits(&self) -> bool {
        self.t_near <= self.t_far
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Entry/exit distances of the unit-box slab test, entry clamped to 0.
fn slab(o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let t1 = (-1.0 - o[a]) / d[a];
        let t2 = (1.0 - o[a]) / d[a];
        lo = lo.max(t1.min(t2));
        hi = hi.min(t1.max(t2));
    }
    let lo = lo.max(0.0);
    (lo <= hi).then_some((lo, hi))
}

/// Ray through continuous image position `(x, y)`.
pub fn ray_through(pose: &CameraPose, k: &Intrinsics, x: f64, y: f64) -> Ray {
    let f = k.focal();
    let (cx, cy) = k.principal_point();
    let d_cam = Vec3::new((x - cx) / f, -(y - cy) / f, -1.0);
    Ray::new(pose.t, pose.r * d_cam)
}

pub fn ray_for_pixel(pose: &CameraPose, k: &Intrinsics, px: usize, py: usize) -> Ray {
    ray_through(pose, k, px as f64 + 0.5, py as f64 + 0.5)
}

/// Camera record as stored in scene files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub pose: Vec<f64>,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRecord {
    pub fn new(pose: &CameraPose, k: &Intrinsics) -> Self {
        CameraRecord { pose: pose.row_major().to_vec(), fov_deg: k.fov_deg, width: k.width, height: k.height }
    }

    pub fn decode(&self) -> Result<(CameraPose, Intrinsics)> {
        if self.pose.len() != 16 {
            return Err(invalid("pose", format!("expected 16 numbers, got {}", self.pose.len())));
        }
        let m = Matrix4::from_row_slice(&self.pose);
        Ok((CameraPose::from_matrix(&m)?, Intrinsics::new(self.fov_deg, self.width, self.height)?))
    }
}
