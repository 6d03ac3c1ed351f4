//! Pinhole cameras, camera-to-world poses and ray generation.
//!
//! Convention: camera looks down −z with +x right and +y up. Pixel `(u, v)`
//! has its center at `(u + 0.5, v + 0.5)` with `v` growing downward.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Symmetric camera with the given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self {
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Intrinsics for pyramid level `scale`: everything divided by `2^scale`.
    pub fn scaled(&self, scale: u32) -> Result<Self> {
        let factor = 1usize << scale;
        if self.width % factor != 0 {
            return Err(Error::NotDivisible {
                what: "width",
                value: self.width,
                factor,
            });
        }
        if self.height % factor != 0 {
            return Err(Error::NotDivisible {
                what: "height",
                value: self.height,
                factor,
            });
        }
        let f = factor as f64;
        Ok(Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
        })
    }

    /// Camera-frame (unnormalized, z = −1) direction through continuous image
    /// coordinates `(x, y)`.
    pub fn unproject(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, -(y - self.cy) / self.fy, -1.0)
    }

    /// Projects a camera-frame point to continuous image coordinates. `None`
    /// when the point is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z >= -1e-12 {
            return None;
        }
        let depth = -p.z;
        Some((self.cx + self.fx * p.x / depth, self.cy - self.fy * p.y / depth))
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub const ORTHONORMAL_TOL: f64 = 1e-6;

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.check().map_err(|message| Error::InvalidPose {
            frame: "<unnamed>".into(),
            message,
        })?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates orthonormality and handedness; the message names the defect.
    pub fn check(&self) -> std::result::Result<(), String> {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !err.is_finite() || err > Self::ORTHONORMAL_TOL {
            return Err(format!("rotation not orthonormal (max |RᵀR − I| = {err:.3e})"));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > Self::ORTHONORMAL_TOL {
            return Err(format!("rotation determinant {det:.6} is not +1"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err("non-finite translation".into());
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` with world up hint `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let back = (eye - target).normalize();
        let right = up.cross(&back).normalize();
        let true_up = back.cross(&right);
        Self {
            rotation: Matrix3::from_columns(&[right, true_up, back]),
            translation: eye,
        }
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Rotation slerp and linear translation; `t = 0` is `self`.
    pub fn interpolate(&self, other: &Pose, t: f64) -> Pose {
        let q0 = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        let q1 = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(other.rotation));
        let q = q0.try_slerp(&q1, t, 1e-9).unwrap_or(if t < 0.5 { q0 } else { q1 });
        Pose {
            rotation: q.to_rotation_matrix().into_inner(),
            translation: self.translation.lerp(&other.translation, t),
        }
    }
}

/// `frames` poses evenly spaced along the piecewise path through `keys`,
/// starting at the first key and ending at the last.
pub fn interpolate_path(keys: &[Pose], frames: usize) -> Vec<Pose> {
    match keys.len() {
        0 => Vec::new(),
        1 => vec![keys[0]; frames],
        n => (0..frames)
            .map(|i| {
                let u = if frames > 1 { (n - 1) as f64 * i as f64 / (frames - 1) as f64 } else { 0.0 };
                let k = (u.floor() as usize).min(n - 2);
                keys[k].interpolate(&keys[k + 1], u - k as f64)
            })
            .collect(),
    }
}

/// A ray with unit direction. `t_near`/`t_far` are filled in against a
/// bounding box by the renderer; freshly generated rays span `[0, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
            t_near: 0.0,
            t_far: f64::INFINITY,
        }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// One ray per pixel of the level-`scale` image, row-major.
pub fn generate_rays(cam: &CameraIntrinsics, pose: &Pose, scale: u32) -> Result<Vec<Ray>> {
    let scaled = cam.scaled(scale)?;
    let mut rays = Vec::with_capacity(scaled.width * scaled.height);
    for v in 0..scaled.height {
        for u in 0..scaled.width {
            let d = scaled.unproject(u as f64 + 0.5, v as f64 + 0.5);
            rays.push(Ray::new(pose.translation, pose.rotation * d));
        }
    }
    Ok(rays)
}
