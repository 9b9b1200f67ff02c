//! Pinhole cameras, the head-centric camera rig and primary rays.
//!
//! Camera space follows the usual computer-vision convention: +x right,
//! +y down, +z forward. World space is right-handed with +y up and the head
//! centred at the origin, facing +z.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::Vec3;

/// Smallest camera-space depth accepted by [`Camera::project`].
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square pixels, principal point at the image centre, horizontal field of view in degrees.
    pub fn from_fov(width: u32, height: u32, fov_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    /// Same field of view at a different resolution.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vec3,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::InvalidArgument("focal length must be positive".into()));
        }
        if intrinsics.width == 0 || intrinsics.height == 0 {
            return Err(Error::InvalidArgument("image size must be nonzero".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-8 || (rotation.determinant() - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidArgument(
                "rotation must be orthonormal with determinant +1".into(),
            ));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
        })
    }

    /// Camera at `position` looking at `target`. Falls back to +x as the up
    /// hint when the viewing direction is parallel to `up`.
    pub fn look_at(intrinsics: Intrinsics, position: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - position).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::x());
            if right.norm() < 1e-9 {
                right = forward.cross(&Vector3::z());
            }
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * position);
        Self::new(intrinsics, rotation, translation)
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn position(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit viewing direction in world space.
    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    /// Pinhole projection to continuous pixel coordinates (pixel `(u, v)` spans `[u, u+1)`).
    pub fn project(&self, p: &Vec3) -> Result<[f64; 2]> {
        let c = self.world_to_camera(p);
        if !(c.z > MIN_DEPTH) {
            return Err(Error::BehindCamera(c.z));
        }
        let k = &self.intrinsics;
        Ok([k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy])
    }

    /// Ray through the continuous pixel coordinate `pixel`.
    pub fn generate_ray(&self, pixel: [f64; 2], near: f64, far: f64) -> Result<Ray> {
        let k = &self.intrinsics;
        if !(pixel[0] >= 0.0
            && pixel[0] <= k.width as f64
            && pixel[1] >= 0.0
            && pixel[1] <= k.height as f64)
        {
            return Err(Error::InvalidArgument(format!(
                "pixel ({}, {}) outside the {}x{} image",
                pixel[0], pixel[1], k.width, k.height
            )));
        }
        Ok(self.ray_unchecked(pixel, near, far))
    }

    pub(crate) fn ray_unchecked(&self, pixel: [f64; 2], near: f64, far: f64) -> Ray {
        let k = &self.intrinsics;
        let dir_cam = Vector3::new((pixel[0] - k.cx) / k.fx, (pixel[1] - k.cy) / k.fy, 1.0);
        let direction = (self.rotation.transpose() * dir_cam).normalize();
        Ray {
            origin: self.position(),
            direction,
            near,
            far,
        }
    }

    /// Ray through the centre of integer pixel `(x, y)`.
    pub fn pixel_ray(&self, x: u32, y: u32, near: f64, far: f64) -> Ray {
        self.ray_unchecked([x as f64 + 0.5, y as f64 + 0.5], near, far)
    }

    /// Same pose, intrinsics rescaled to a new image size.
    pub fn resized(&self, width: u32, height: u32) -> Camera {
        Camera {
            intrinsics: self.intrinsics.resized(width, height),
            rotation: self.rotation,
            translation: self.translation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub yaw_count: usize,
    pub pitch_angles: Vec<f64>,
    pub radius: f64,
}

impl CameraRig {
    /// Cameras ordered pitch ring by pitch ring; within a ring yaw advances by
    /// `360 / yaw_count` degrees starting from the +z (frontal) position.
    pub fn build(yaw_count: usize, pitch_angles: &[f64], radius: f64, intrinsics: Intrinsics) -> Result<Self> {
        if yaw_count == 0 {
            return Err(Error::InvalidArgument("yaw_count must be at least 1".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument("rig radius must be positive".into()));
        }
        if pitch_angles.is_empty() {
            return Err(Error::InvalidArgument("at least one pitch angle is required".into()));
        }
        let mut cameras = Vec::with_capacity(yaw_count * pitch_angles.len());
        for &pitch in pitch_angles {
            let phi = pitch.to_radians();
            for k in 0..yaw_count {
                let theta = (k as f64 * 360.0 / yaw_count as f64).to_radians();
                let position = Vector3::new(
                    radius * phi.cos() * theta.sin(),
                    radius * phi.sin(),
                    radius * phi.cos() * theta.cos(),
                );
                cameras.push(Camera::look_at(intrinsics, position, Vec3::zeros(), Vector3::y())?);
            }
        }
        Ok(Self {
            cameras,
            yaw_count,
            pitch_angles: pitch_angles.to_vec(),
            radius,
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn yaw_step_deg(&self) -> f64 {
        360.0 / self.yaw_count as f64
    }
}

/// One entry of `cameras.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl CameraRecord {
    pub fn from_camera(id: usize, cam: &Camera) -> Self {
        let k = &cam.intrinsics;
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = cam.rotation[(i, j)];
            }
        }
        Self {
            id,
            width: k.width,
            height: k.height,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            r,
            t: [cam.translation.x, cam.translation.y, cam.translation.z],
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let rotation = Matrix3::from_row_slice(&self.r);
        Camera::new(
            Intrinsics {
                fx: self.fx,
                fy: self.fy,
                cx: self.cx,
                cy: self.cy,
                width: self.width,
                height: self.height,
            },
            rotation,
            Vector3::from(self.t),
        )
    }
}

pub fn cameras_to_json(cameras: &[Camera]) -> Result<String> {
    let records: Vec<_> = cameras
        .iter()
        .enumerate()
        .map(|(i, c)| CameraRecord::from_camera(i, c))
        .collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

pub fn cameras_from_json(text: &str) -> Result<Vec<Camera>> {
    let mut records: Vec<CameraRecord> = serde_json::from_str(text)?;
    records.sort_by_key(|r| r.id);
    records.iter().map(CameraRecord::to_camera).collect()
}

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    binio::write_file(path, cameras_to_json(cameras)?.as_bytes())
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let bytes = binio::read_file(path)?;
    cameras_from_json(&String::from_utf8_lossy(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn intr() -> Intrinsics {
        Intrinsics::from_fov(64, 64, 30.0)
    }

    #[test]
    fn full_rig_has_72_cameras() {
        let rig = CameraRig::build(24, &[-15.0, 0.0, 15.0], 2.7, intr()).unwrap();
        assert_eq!(rig.len(), 72);
        assert_abs_diff_eq!(rig.yaw_step_deg(), 15.0);
    }

    #[test]
    fn rig_cameras_look_at_origin() {
        let rig = CameraRig::build(24, &[-15.0, 0.0, 15.0], 2.7, intr()).unwrap();
        for cam in &rig.cameras {
            let to_origin = (-cam.position()).normalize();
            assert!((to_origin - cam.optical_axis()).norm() < 1e-6);
            let centre = cam.project(&Vec3::zeros()).unwrap();
            assert!((centre[0] - 32.0).abs() < 1e-6 && (centre[1] - 32.0).abs() < 1e-6);
        }
    }

    #[test]
    fn consecutive_cameras_are_one_yaw_step_apart() {
        let rig = CameraRig::build(24, &[0.0], 2.7, intr()).unwrap();
        for k in 0..23 {
            let a = rig.cameras[k].position();
            let b = rig.cameras[k + 1].position();
            let ang = a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0).acos().to_degrees();
            assert!((ang - 15.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rig_is_yaw_symmetric() {
        let rig = CameraRig::build(24, &[-15.0, 15.0], 2.7, intr()).unwrap();
        let step = rig.yaw_step_deg().to_radians();
        let ry = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), step).into_inner();
        for ring in 0..2 {
            for k in 0..23 {
                let a = &rig.cameras[ring * 24 + k];
                let b = &rig.cameras[ring * 24 + k + 1];
                let rot = a.rotation * ry.transpose();
                assert!((rot - b.rotation).abs().max() < 1e-6);
                assert!((a.translation - b.translation).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn vertical_pitch_uses_fallback_up() {
        let rig = CameraRig::build(4, &[90.0, -90.0], 2.0, intr()).unwrap();
        for cam in &rig.cameras {
            assert!(cam.rotation.iter().all(|v| v.is_finite()));
            assert!((cam.rotation.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_examples() {
        let k = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 0.0,
            cy: 0.0,
            width: 10,
            height: 10,
        };
        let cam = Camera::new(k, Matrix3::identity(), Vec3::zeros()).unwrap();
        let p = cam.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_abs_diff_eq!(p[0], 50.0);
        assert_abs_diff_eq!(p[1], 0.0);
        assert!(matches!(
            cam.project(&Vector3::new(1.0, 1.0, 0.0)),
            Err(Error::BehindCamera(_))
        ));
        assert!(cam.project(&Vector3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn ray_round_trip_and_axis() {
        let rig = CameraRig::build(8, &[20.0], 2.7, intr()).unwrap();
        let cam = &rig.cameras[3];
        for &(u, v) in &[(0.5, 0.5), (10.25, 40.0), (63.5, 1.75), (32.0, 32.0)] {
            let ray = cam.generate_ray([u, v], 1.2, 4.2).unwrap();
            assert!((ray.direction.norm() - 1.0).abs() < 1e-9);
            for t in [1.3, 2.0, 3.9] {
                let p = cam.project(&ray.at(t)).unwrap();
                assert!((p[0] - u).abs() < 1e-4 && (p[1] - v).abs() < 1e-4);
            }
        }
        let axis = cam.generate_ray([32.0, 32.0], 1.0, 2.0).unwrap();
        assert!((axis.direction - cam.optical_axis()).norm() < 1e-12);
        assert!(cam.generate_ray([65.0, 3.0], 1.0, 2.0).is_err());
    }

    #[test]
    fn adjacent_pixels_differ_by_inverse_focal() {
        let cam = CameraRig::build(1, &[0.0], 2.7, intr()).unwrap().cameras[0].clone();
        let a = cam.generate_ray([32.0, 32.0], 1.0, 2.0).unwrap().direction;
        let b = cam.generate_ray([33.0, 32.0], 1.0, 2.0).unwrap().direction;
        let ang = a.dot(&b).clamp(-1.0, 1.0).acos();
        let expect = 1.0 / cam.intrinsics.fx;
        assert!((ang - expect).abs() / expect < 1e-3);
    }

    #[test]
    fn cameras_json_round_trip() {
        let rig = CameraRig::build(3, &[0.0, 10.0], 2.7, intr()).unwrap();
        let text = cameras_to_json(&rig.cameras).unwrap();
        assert!(text.contains("\"R\""));
        let back = cameras_from_json(&text).unwrap();
        assert_eq!(back, rig.cameras);
    }
}
