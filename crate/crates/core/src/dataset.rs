//! Multi-view frame sequences and their on-disk layout.
//!
//! ```text
//! <root>/cameras.json
//! <root>/dataset.json              {"frames": T, "dt": seconds, "views": [ids]}
//! <root>/images/<view>/frame_<t:05>.png
//! <root>/masks/<view>/frame_<t:05>.png   16-bit labels, 0 = background
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{read_cameras, write_cameras, CameraModel};
use crate::error::{Error, Result};
use crate::image::{Image, LabelMask};

/// Images and instance masks of every view at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    /// 0-based frame index.
    pub time_index: usize,
    pub dt: f64,
    pub images: Vec<Image>,
    pub masks: Vec<LabelMask>,
}

impl FrameSet {
    pub fn view_count(&self) -> usize {
        self.images.len()
    }

    /// Checks the per-view shapes against the cameras.
    pub fn validate(&self, cameras: &[CameraModel]) -> Result<()> {
        if self.images.len() != cameras.len() || self.masks.len() != cameras.len() {
            return Err(Error::ShapeMismatch(format!(
                "frame {} has {} images and {} masks for {} cameras",
                self.time_index,
                self.images.len(),
                self.masks.len(),
                cameras.len()
            )));
        }
        for ((img, mask), cam) in self.images.iter().zip(&self.masks).zip(cameras) {
            if img.width != cam.width || img.height != cam.height || img.channels != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "view {} image is {}x{}x{}, camera expects {}x{}x3",
                    cam.id, img.width, img.height, img.channels, cam.width, cam.height
                )));
            }
            if mask.width != cam.width || mask.height != cam.height {
                return Err(Error::ShapeMismatch(format!("view {} mask size differs from camera", cam.id)));
            }
        }
        Ok(())
    }
}

/// A calibrated multi-view sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<CameraModel>,
    pub frames: Vec<FrameSet>,
    pub dt: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    frames: usize,
    dt: f64,
    views: Vec<String>,
}

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:05}.png")
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn new(cameras: Vec<CameraModel>, frames: Vec<FrameSet>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
        for f in &frames {
            f.validate(&cameras)?;
        }
        Ok(Self { cameras, frames, dt })
    }

    pub fn image_path(root: &Path, view: &str, t: usize) -> PathBuf {
        root.join("images").join(view).join(frame_file(t))
    }

    pub fn mask_path(root: &Path, view: &str, t: usize) -> PathBuf {
        root.join("masks").join(view).join(frame_file(t))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        create_dir(root)?;
        write_cameras(&root.join("cameras.json"), &self.cameras)?;
        let meta = DatasetMeta {
            frames: self.frames.len(),
            dt: self.dt,
            views: self.cameras.iter().map(|c| c.id.clone()).collect(),
        };
        let path = root.join("dataset.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n")
            .map_err(|e| Error::io(&path, e))?;
        for cam in &self.cameras {
            create_dir(&root.join("images").join(&cam.id))?;
            create_dir(&root.join("masks").join(&cam.id))?;
        }
        for f in &self.frames {
            for (v, cam) in self.cameras.iter().enumerate() {
                f.images[v].write_png(&Self::image_path(root, &cam.id, f.time_index))?;
                f.masks[v].write_png(&Self::mask_path(root, &cam.id, f.time_index))?;
            }
        }
        Ok(())
    }

    /// Load a dataset; `cameras` overrides `<root>/cameras.json` when given.
    pub fn load(root: &Path, cameras: Option<&Path>) -> Result<Self> {
        let cam_path = cameras.map(Path::to_path_buf).unwrap_or_else(|| root.join("cameras.json"));
        let cameras = read_cameras(&cam_path)?;
        let meta_path = root.join("dataset.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|e| Error::format("dataset", &meta_path, e.to_string()))?;
        let mut frames = Vec::with_capacity(meta.frames);
        for t in 0..meta.frames {
            let mut images = Vec::new();
            let mut masks = Vec::new();
            for cam in &cameras {
                images.push(Image::read_png(&Self::image_path(root, &cam.id, t))?);
                masks.push(LabelMask::read_png(&Self::mask_path(root, &cam.id, t))?);
            }
            frames.push(FrameSet { time_index: t, dt: meta.dt, images, masks });
        }
        Self::new(cameras, frames, meta.dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Vector3};

    #[test]
    fn save_load_round_trip() {
        let cam = CameraModel::look_at(
            "c0",
            [30.0, 30.0, 7.5, 5.5],
            (16, 12),
            Vector3::new(0.0, 0.0, -2.0),
            Vector3::zeros(),
            Vector3::y(),
        )
        .unwrap();
        let mut img = Image::new(16, 12, 3);
        img.set(3, 4, 1, 1.0);
        let mut mask = LabelMask::new(16, 12);
        mask.set(3, 4, 2);
        let frames = (0..2)
            .map(|t| FrameSet { time_index: t, dt: 0.05, images: vec![img.clone()], masks: vec![mask.clone()] })
            .collect();
        let ds = Dataset::new(vec![cam], frames, 0.05).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path(), None).unwrap();
        assert_eq!(back.frames.len(), 2);
        assert_eq!(back.frames[1].masks[0], mask);
        assert_eq!(back.frames[0].images[0], img);
        assert!((back.cameras[0].world_to_camera() - ds.cameras[0].world_to_camera()).abs().max() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_views() {
        let cam = CameraModel::new("c", [10.0, 10.0, 4.0, 4.0], (8, 8), Matrix4::identity()).unwrap();
        let f = FrameSet { time_index: 0, dt: 0.1, images: vec![Image::new(8, 7, 3)], masks: vec![LabelMask::new(8, 8)] };
        assert!(matches!(Dataset::new(vec![cam], vec![f], 0.1), Err(Error::ShapeMismatch(_))));
    }
}
