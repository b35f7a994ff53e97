//! Novel-view videos for the second stage: orbit cameras, rough renders of
//! the first-stage sequence, pluggable refinement and the refined fit.
//!
//! On disk a set of videos looks like
//! ```text
//! <root>/cameras.json
//! <root>/manifest.json     {"views": S, "frames": T, "width", "height", "strengths", "weights"}
//! <root>/views/<s:02>/frame_<t:05>.png      s is 1-based
//! ```
//! An external refiner only has to produce the `views/` tree.

use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Unit, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bubbles::centroid_weight;
use crate::camera::{read_cameras, write_cameras, CameraModel};
use crate::config::{RefineConfig, ReconstructionConfig};
use crate::dataset::{frame_file, Dataset};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pipeline::{reconstruct_with, ExtraViews, Reconstruction};
use crate::raster::render;
use crate::sequence::SceneSequence;
use crate::surfel::Surfel;

/// Blur used by the denoising stand-in.
pub const DENOISE_SIGMA: f64 = 1.5;
const DENOISE_RADIUS: usize = 5;

/// World up as seen by `camera`: the opposite of its image-down axis.
pub fn camera_up(camera: &CameraModel) -> Vector3<f64> {
    -camera.rotation().row(1).transpose()
}

/// `count` cameras on a horizontal circle (perpendicular to the reference
/// camera's up) around `center`, starting at the reference camera's azimuth
/// and stepping `increment_deg`. Intrinsics and image size are copied.
pub fn orbit_cameras(
    center: &Vector3<f64>,
    radius: f64,
    reference: &CameraModel,
    count: usize,
    increment_deg: f64,
) -> Result<Vec<CameraModel>> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidConfig(format!("orbit radius must be positive, got {radius}")));
    }
    if count == 0 {
        return Err(Error::InvalidConfig("orbit needs at least one camera".into()));
    }
    let up = camera_up(reference);
    let offset = reference.center() - center;
    let mut start = offset - up * up.dot(&offset);
    if start.norm() < 1e-9 {
        // reference sits on the axis; fall back to its right axis
        start = reference.rotation().row(0).transpose();
    }
    let start = start.normalize();
    let axis = Unit::new_normalize(up);
    (0..count)
        .map(|k| {
            let rot = Rotation3::from_axis_angle(&axis, (k as f64 * increment_deg).to_radians());
            let eye = center + rot * start * radius;
            CameraModel::look_at(
                format!("novel_{:02}", k + 1),
                [reference.fx, reference.fy, reference.cx, reference.cy],
                (reference.width, reference.height),
                eye,
                *center,
                up,
            )
        })
        .collect()
}

/// Opacity-and-area weighted mean position.
pub fn weighted_center(surfels: &[Surfel], gamma: f64) -> Result<Vector3<f64>> {
    let mut num = Vector3::zeros();
    let mut den = 0.0;
    for s in surfels {
        let w = centroid_weight(s, gamma);
        num += s.position * w;
        den += w;
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(Error::NoSurfels)
    }
}

/// Orbit for a first-stage result: configured center and radius, else the
/// frame-0 weighted center and the mean input-camera distance to it.
pub fn default_orbit(sequence: &SceneSequence, inputs: &[CameraModel], config: &RefineConfig) -> Result<Vec<CameraModel>> {
    let reference = inputs.first().ok_or(Error::EmptyInput("no input cameras"))?;
    let first = sequence.frames.first().ok_or(Error::EmptyInput("sequence has no frames"))?;
    let center = match config.center {
        Some(c) => Vector3::from(c),
        None => weighted_center(first, sequence.gamma)?,
    };
    let radius = match config.radius {
        Some(r) => r,
        None => inputs.iter().map(|c| (c.center() - center).norm()).sum::<f64>() / inputs.len() as f64,
    };
    orbit_cameras(&center, radius, reference, config.novel_views, config.increment_deg)
}

/// Per-view videos with their refinement strengths and loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NovelVideos {
    pub cameras: Vec<CameraModel>,
    pub strengths: Vec<f64>,
    pub weights: Vec<f64>,
    /// `frames[s][t]`
    pub frames: Vec<Vec<Image>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    views: usize,
    frames: usize,
    width: usize,
    height: usize,
    strengths: Vec<f64>,
    weights: Vec<f64>,
}

fn view_dir(root: &Path, s: usize) -> PathBuf {
    root.join("views").join(format!("{:02}", s + 1))
}

impl NovelVideos {
    pub fn frame_count(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// `frames[t][s]`, as the reconstruction loop consumes them.
    pub fn per_frame(&self) -> Vec<Vec<Image>> {
        (0..self.frame_count()).map(|t| self.frames.iter().map(|v| v[t].clone()).collect()).collect()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        write_cameras(&root.join("cameras.json"), &self.cameras)?;
        let (width, height) = self.cameras.first().map_or((0, 0), |c| (c.width, c.height));
        let manifest = Manifest {
            views: self.cameras.len(),
            frames: self.frame_count(),
            width,
            height,
            strengths: self.strengths.clone(),
            weights: self.weights.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = root.join("manifest.json");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.frames.par_iter().enumerate().try_for_each(|(s, video)| {
            let dir = view_dir(root, s);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            video.iter().enumerate().try_for_each(|(t, img)| img.write_png(&dir.join(frame_file(t))))
        })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", &path, e))?;
        let cameras = read_cameras(&root.join("cameras.json"))?;
        if cameras.len() != m.views || m.strengths.len() != m.views || m.weights.len() != m.views {
            return Err(Error::format("manifest", &path, format!("{} views but {} cameras", m.views, cameras.len())));
        }
        let frames = load_views(root, &cameras, m.frames)?;
        Ok(Self { cameras, strengths: m.strengths, weights: m.weights, frames })
    }
}

/// Read `views/<s>/frame_*.png` for every camera, insisting on exactly
/// `frames` frames of the camera's size per view.
fn load_views(root: &Path, cameras: &[CameraModel], frames: usize) -> Result<Vec<Vec<Image>>> {
    cameras
        .iter()
        .enumerate()
        .map(|(s, cam)| {
            let dir = view_dir(root, s);
            let found = std::fs::read_dir(&dir)
                .map(|entries| {
                    entries
                        .filter_map(|e| e.ok())
                        .filter(|e| {
                            let name = e.file_name().to_string_lossy().into_owned();
                            name.starts_with("frame_") && name.ends_with(".png")
                        })
                        .count()
                })
                .unwrap_or(0);
            if found != frames {
                return Err(Error::FrameCountMismatch { view: cam.id.clone(), expected: frames, found });
            }
            (0..frames)
                .map(|t| {
                    let path = dir.join(frame_file(t));
                    let img = Image::read_png(&path)?;
                    if img.width != cam.width || img.height != cam.height || img.channels != 3 {
                        return Err(Error::DimensionMismatch(format!(
                            "{} is {}x{}x{}, expected {}x{}x3",
                            path.display(),
                            img.width,
                            img.height,
                            img.channels,
                            cam.width,
                            cam.height
                        )));
                    }
                    Ok(img)
                })
                .collect()
        })
        .collect()
}

/// Render every frame of `sequence` from every orbit camera.
pub fn render_rough_videos(sequence: &SceneSequence, cameras: &[CameraModel], config: &RefineConfig) -> NovelVideos {
    let count = cameras.len();
    let frames = cameras
        .iter()
        .map(|cam| sequence.frames.iter().map(|f| render(f, sequence.gamma, cam).color_image()).collect())
        .collect();
    NovelVideos {
        cameras: cameras.to_vec(),
        strengths: (1..=count).map(|s| config.strength(s, count)).collect(),
        weights: (1..=count).map(|s| config.weight(s, count)).collect(),
        frames,
    }
}

/// How rough videos become refined ones.
#[derive(Debug, Clone, PartialEq)]
pub enum RefinerHook {
    Identity,
    /// Blend towards a Gaussian blur by each view's strength.
    GaussianDenoise,
    /// Frames produced out of process, in the `views/` layout under the
    /// given directory.
    External(PathBuf),
}

impl RefinerHook {
    pub fn parse(kind: &str, external_dir: Option<&Path>) -> Result<Self> {
        match (kind, external_dir) {
            ("identity", _) => Ok(Self::Identity),
            ("gaussian_denoise", _) => Ok(Self::GaussianDenoise),
            ("external", Some(dir)) => Ok(Self::External(dir.to_path_buf())),
            ("external", None) => Err(Error::InvalidConfig("external refiner needs a frame directory".into())),
            (other, _) => Err(Error::InvalidConfig(format!(
                "unknown refiner '{other}' (expected identity, gaussian_denoise or external)"
            ))),
        }
    }
}

fn gaussian_taps() -> [f64; 2 * DENOISE_RADIUS + 1] {
    let mut k = [0.0; 2 * DENOISE_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - DENOISE_RADIUS as f64;
        *v = (-d * d / (2.0 * DENOISE_SIGMA * DENOISE_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &Image) -> Image {
    let taps = gaussian_taps();
    let (w, h, c) = (img.width, img.height, img.channels);
    let r = DENOISE_RADIUS as isize;
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::new(w, h, c);
        for row in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (i, k) in taps.iter().enumerate() {
                        let d = i as isize - r;
                        let (x, y) = if horizontal {
                            ((col as isize + d).clamp(0, w as isize - 1) as usize, row)
                        } else {
                            (col, (row as isize + d).clamp(0, h as isize - 1) as usize)
                        };
                        acc += k * src.get(x, y, ch);
                    }
                    out.set(col, row, ch, acc);
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// `(1 - strength) * frame + strength * blur(frame)`.
pub fn denoise(img: &Image, strength: f64) -> Image {
    if strength == 0.0 {
        return img.clone();
    }
    let blurred = gaussian_blur(img);
    let data = img.data.iter().zip(&blurred.data).map(|(a, b)| (1.0 - strength) * a + strength * b).collect();
    Image { data, ..img.clone() }
}

pub fn refine_videos(rough: &NovelVideos, hook: &RefinerHook) -> Result<NovelVideos> {
    let frames = match hook {
        RefinerHook::Identity => rough.frames.clone(),
        RefinerHook::GaussianDenoise => rough
            .frames
            .par_iter()
            .zip(&rough.strengths)
            .map(|(video, &strength)| video.iter().map(|f| denoise(f, strength)).collect())
            .collect(),
        RefinerHook::External(dir) => load_views(dir, &rough.cameras, rough.frame_count())?,
    };
    Ok(NovelVideos { frames, ..rough.clone() })
}

/// Second stage: rerun the sequential fit from the first stage's frame-0
/// seed with the refined videos as extra weighted supervision.
pub fn optimize_stage2(
    dataset: &Dataset,
    stage1: &SceneSequence,
    refined: &NovelVideos,
    config: &ReconstructionConfig,
) -> Result<Reconstruction> {
    if stage1.initial.is_empty() {
        return Err(Error::NoSurfels);
    }
    let per_frame = refined.per_frame();
    let extra = ExtraViews { cameras: &refined.cameras, frames: &per_frame, weights: &refined.weights };
    reconstruct_with(dataset, Some(extra), Some(stage1.initial.clone()), config)
}
