//! Scoring reconstructed sequences against synthetic ground truth: held-out
//! view images, zero-level point clouds and bubble velocities.

use std::path::Path;

use nalgebra::Vector3;

use crate::bubbles::{bubble_centroids_with, match_by_centroid, NUCLEATION_ID};
use crate::camera::CameraModel;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{read_points, read_series_csv, FrameSeries};
use crate::metrics::{chamfer, image_l1, psnr, ssim, MetricRow};
use crate::raster::render;
use crate::sequence::SceneSequence;
use crate::surface::surface_points;
use crate::surfel::BubbleId;

/// Surfels below this opacity are left out of evaluation point clouds.
pub const POINT_MIN_OPACITY: f64 = 0.5;
/// Farthest an estimated bubble centroid may sit from its ground-truth match.
pub const MATCH_DISTANCE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageScores {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn score_images(pred: &Image, gt: &Image) -> Result<ImageScores> {
    Ok(ImageScores { l1: image_l1(pred, gt)?, psnr: psnr(pred, gt)?, ssim: ssim(pred, gt)? })
}

/// Scores of the rendered sequence against `targets[t]` seen from `camera`.
pub fn held_out_scores(sequence: &SceneSequence, camera: &CameraModel, targets: &[Image]) -> Result<Vec<ImageScores>> {
    if targets.len() != sequence.frames.len() {
        return Err(Error::FrameCountMismatch { view: camera.id.clone(), expected: sequence.frames.len(), found: targets.len() });
    }
    sequence
        .frames
        .iter()
        .zip(targets)
        .map(|(f, gt)| score_images(&render(f, sequence.gamma, camera).color_image(), gt))
        .collect()
}

pub fn mean_psnr(scores: &[ImageScores]) -> f64 {
    scores.iter().map(|s| s.psnr).sum::<f64>() / scores.len().max(1) as f64
}

/// Per-frame Chamfer distance of the zero-level points to `gt[t]`.
pub fn chamfer_scores(sequence: &SceneSequence, gt: &[Vec<Vector3<f64>>]) -> Result<Vec<f64>> {
    sequence
        .frames
        .iter()
        .zip(gt)
        .map(|(f, g)| chamfer(&surface_points(f, sequence.gamma, POINT_MIN_OPACITY), g))
        .collect()
}

/// One estimated bubble velocity next to its matched ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityPair {
    pub frame: usize,
    pub estimated_id: u32,
    pub reference_id: u32,
    pub estimated: Vector3<f64>,
    pub reference: Vector3<f64>,
}

/// Match estimated bubbles to ground truth by centroid at every frame and
/// pair their velocities. The nucleation region is not scored.
pub fn compare_velocities(sequence: &SceneSequence, gt_velocity: &FrameSeries, gt_centroids: &FrameSeries) -> Result<Vec<VelocityPair>> {
    let est = sequence.velocities()?;
    let mut pairs = Vec::new();
    for (&t, velocities) in &est.bubble {
        let (Some(gt_v), Some(gt_c)) = (gt_velocity.get(&t), gt_centroids.get(&t)) else {
            continue;
        };
        let frame = &sequence.frames[t];
        let bindings: Vec<BubbleId> = frame.iter().map(|s| s.bubble).collect();
        let mut centroids = bubble_centroids_with(frame, &bindings, sequence.gamma);
        centroids.remove(&NUCLEATION_ID);
        for (e, r) in match_by_centroid(&centroids, gt_c, MATCH_DISTANCE) {
            if let (Some(v), Some(g)) = (velocities.get(&e), gt_v.get(&r)) {
                pairs.push(VelocityPair { frame: t, estimated_id: e, reference_id: r, estimated: *v, reference: *g });
            }
        }
    }
    Ok(pairs)
}

/// Mean absolute error per component over pairs with `frame >= from`.
pub fn mean_velocity_error(pairs: &[VelocityPair], from: usize) -> Option<Vector3<f64>> {
    let used: Vec<&VelocityPair> = pairs.iter().filter(|p| p.frame >= from).collect();
    if used.is_empty() {
        return None;
    }
    Some(used.iter().map(|p| (p.estimated - p.reference).abs()).sum::<Vector3<f64>>() / used.len() as f64)
}

/// Ground truth as written by the synthetic generator under `<root>/gt`.
pub struct GroundTruth {
    pub points: Vec<Vec<Vector3<f64>>>,
    pub velocity: FrameSeries,
    pub centroids: FrameSeries,
    pub held_out: Option<Dataset>,
}

impl GroundTruth {
    pub fn load(root: &Path, frames: usize) -> Result<Self> {
        let gt = root.join("gt");
        let points = (0..frames)
            .map(|t| read_points(&gt.join("points").join(format!("frame_{t:05}.bin"))))
            .collect::<Result<_>>()?;
        let held = gt.join("heldout");
        let held_out = if held.join("dataset.json").exists() { Some(Dataset::load(&held, None)?) } else { None };
        Ok(Self {
            points,
            velocity: read_series_csv(&gt.join("velocity.csv"))?,
            centroids: read_series_csv(&gt.join("centroids.csv"))?,
            held_out,
        })
    }
}

/// Every metric for a sequence, as `frame,metric,value` rows.
pub fn evaluate_sequence(sequence: &SceneSequence, gt: &GroundTruth) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let row = |frame, metric: &str, value| MetricRow { frame, metric: metric.into(), value };
    if let Some(held) = &gt.held_out {
        for (v, cam) in held.cameras.iter().enumerate() {
            let targets: Vec<Image> = held.frames.iter().map(|f| f.images[v].clone()).collect();
            for (t, s) in held_out_scores(sequence, cam, &targets)?.iter().enumerate() {
                rows.push(row(t, "heldout_l1", s.l1));
                rows.push(row(t, "heldout_psnr", s.psnr));
                rows.push(row(t, "heldout_ssim", s.ssim));
            }
        }
    }
    for (t, c) in chamfer_scores(sequence, &gt.points)?.into_iter().enumerate() {
        rows.push(row(t, "chamfer", c));
    }
    for p in compare_velocities(sequence, &gt.velocity, &gt.centroids)? {
        let d = (p.estimated - p.reference).abs();
        rows.push(row(p.frame, &format!("velocity_l1_bubble{}", p.reference_id), d.sum() / 3.0));
    }
    Ok(rows)
}

/// Image metrics between two dataset-layout trees, for every view and frame
/// of `gt`.
pub fn compare_datasets(pred: &Dataset, gt: &Dataset) -> Result<Vec<MetricRow>> {
    if pred.frames.len() != gt.frames.len() || pred.cameras.len() != gt.cameras.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} frames x {} views, ground truth {} x {}",
            pred.frames.len(),
            pred.cameras.len(),
            gt.frames.len(),
            gt.cameras.len()
        )));
    }
    let mut rows = Vec::new();
    for (t, (pf, gf)) in pred.frames.iter().zip(&gt.frames).enumerate() {
        for (pi, gi) in pf.images.iter().zip(&gf.images) {
            let s = score_images(pi, gi)?;
            rows.push(MetricRow { frame: t, metric: "l1".into(), value: s.l1 });
            rows.push(MetricRow { frame: t, metric: "psnr".into(), value: s.psnr });
            rows.push(MetricRow { frame: t, metric: "ssim".into(), value: s.ssim });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_score_ideal() {
        let img = Image::filled(16, 16, 3, 0.3);
        let s = score_images(&img, &img).unwrap();
        assert_eq!(s.l1, 0.0);
        assert_eq!(s.psnr, crate::metrics::PSNR_CAP);
        assert!((s.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_error_per_component() {
        let p = |frame, e: [f64; 3]| VelocityPair {
            frame,
            estimated_id: 1,
            reference_id: 1,
            estimated: Vector3::from(e),
            reference: Vector3::new(0.0, 0.3, 0.0),
        };
        let pairs = [p(2, [9.0, 9.0, 9.0]), p(5, [0.01, 0.32, 0.0]), p(6, [-0.03, 0.3, 0.02])];
        let m = mean_velocity_error(&pairs, 5).unwrap();
        assert!((m - Vector3::new(0.02, 0.01, 0.01)).norm() < 1e-12);
        assert!(mean_velocity_error(&pairs, 10).is_none());
    }
}
