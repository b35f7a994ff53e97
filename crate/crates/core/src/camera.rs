//! Pinhole cameras with metric extrinsics and the camera rig file format.
//!
//! Pixel coordinates are continuous with pixel `(col j, row i)` centered at
//! `(j, i)`; the image x axis points right, y down, and the camera looks
//! along +z.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum camera-space depth for a point to be considered in front.
pub const NEAR_Z: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraModel {
    pub fn new(
        id: impl Into<String>,
        intrinsics: [f64; 4],
        size: (usize, usize),
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        let [fx, fy, cx, cy] = intrinsics;
        let (width, height) = size;
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        let rotation: Matrix3<f64> = world_to_camera.fixed_view::<3, 3>(0, 0).into();
        let translation: Vector3<f64> = world_to_camera.fixed_view::<3, 1>(0, 3).into();
        let ortho = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-6) || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera(format!("rotation block is not a proper rotation (err {ortho:e})")));
        }
        let last = world_to_camera.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidCamera("last row of world_to_camera must be [0 0 0 1]".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        Ok(Self { id: id.into(), fx, fy, cx, cy, width, height, rotation, translation })
    }

    /// Camera at `eye` looking at `target`, image y axis aligned with `-up`.
    pub fn look_at(
        id: impl Into<String>,
        intrinsics: [f64; 4],
        size: (usize, usize),
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let mut up = up.normalize();
        if forward.cross(&up).norm() < 1e-9 {
            up = if forward.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        }
        let down = -(up - forward * forward.dot(&up)).normalize();
        let right = down.cross(&forward);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -rotation * eye;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(id, intrinsics, size, m)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn world_to_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis (+z of the camera) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Project a world point; returns pixel coordinates and camera depth.
    pub fn project(&self, point: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        let pc = self.to_camera(point);
        if pc.z <= NEAR_Z {
            return Err(Error::BehindCamera { z: pc.z });
        }
        Ok((self.project_camera(&pc), pc.z))
    }

    pub fn project_camera(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    /// Camera-space ray through a pixel, scaled so that its z component is 1.
    pub fn ray(&self, px: f64, py: f64) -> Vector3<f64> {
        Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0)
    }

    /// World point seen at `pixel` with camera depth `depth`.
    pub fn back_project(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        self.to_world(&(self.ray(pixel.x, pixel.y) * depth))
    }

    /// Nearest pixel index `(col, row)` for continuous coordinates, if inside.
    pub fn pixel_index(&self, pixel: &Vector2<f64>) -> Option<(usize, usize)> {
        let j = pixel.x.round();
        let i = pixel.y.round();
        if j >= 0.0 && i >= 0.0 && (j as usize) < self.width && (i as usize) < self.height {
            Some((j as usize, i as usize))
        } else {
            None
        }
    }

    /// Same camera with another extrinsic rigid transform applied:
    /// world points `x` map to `transform * x`.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Result<Self> {
        let r = self.rotation * rotation.transpose();
        let t = self.translation - r * translation;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(self.id.clone(), [self.fx, self.fy, self.cx, self.cy], (self.width, self.height), m)
    }
}

/// Serialized form of one camera in a rig file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 4x4 world-to-camera transform, meters.
    pub world_to_camera: [f64; 16],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<CameraRecord>,
}

impl From<&CameraModel> for CameraRecord {
    fn from(c: &CameraModel) -> Self {
        let m = c.world_to_camera();
        let mut rows = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                rows[i * 4 + j] = m[(i, j)];
            }
        }
        CameraRecord {
            id: c.id.clone(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            world_to_camera: rows,
        }
    }
}

impl TryFrom<&CameraRecord> for CameraModel {
    type Error = Error;

    fn try_from(r: &CameraRecord) -> Result<Self> {
        let m = Matrix4::from_row_slice(&r.world_to_camera);
        CameraModel::new(r.id.clone(), [r.fx, r.fy, r.cx, r.cy], (r.width, r.height), m)
    }
}

pub fn cameras_to_json(cameras: &[CameraModel]) -> String {
    let rig = CameraRig { cameras: cameras.iter().map(CameraRecord::from).collect() };
    let mut s = serde_json::to_string_pretty(&rig).expect("camera rig serializes");
    s.push('\n');
    s
}

pub fn cameras_from_json(text: &str, path: &Path) -> Result<Vec<CameraModel>> {
    let rig: CameraRig = serde_json::from_str(text).map_err(|e| Error::format("camera rig", path, e))?;
    if rig.cameras.is_empty() {
        return Err(Error::format("camera rig", path, "no cameras"));
    }
    rig.cameras.iter().map(CameraModel::try_from).collect()
}

pub fn write_cameras(path: &Path, cameras: &[CameraModel]) -> Result<()> {
    std::fs::write(path, cameras_to_json(cameras)).map_err(|e| Error::io(path, e))
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraModel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cameras_from_json(&text, path)
}
