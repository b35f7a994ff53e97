//! The sequential reconstruction loop shared by both stages.
//!
//! Frame 0 is seeded (visual hull or a given surfel set), fitted with the
//! long schedule and densification, then bound to bubbles. Every later
//! frame is initialized by advecting the previous one with the bubble
//! guidance velocities, fitted with the short schedule (count and order
//! preserved) and rebound.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::bubbles::{advect, bind_surfels, guidance_velocities, last_surfel_velocities, unbind, BubbleTracker};
use crate::camera::CameraModel;
use crate::config::ReconstructionConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{initialize_frame0, optimize_frame, AdamState, FrameSchedule, LossRecord, SupervisedView};
use crate::sequence::SceneSequence;
use crate::surfel::Surfel;

/// Additional supervision beyond the dataset's own views (the novel views
/// of the second stage).
#[derive(Debug, Clone, Copy)]
pub struct ExtraViews<'a> {
    pub cameras: &'a [CameraModel],
    /// `frames[t][s]`
    pub frames: &'a [Vec<Image>],
    pub weights: &'a [f64],
}

impl ExtraViews<'_> {
    fn validate(&self, frames: usize) -> Result<()> {
        if self.weights.len() != self.cameras.len() {
            return Err(Error::ShapeMismatch(format!("{} weights for {} novel views", self.weights.len(), self.cameras.len())));
        }
        if self.frames.len() != frames {
            return Err(Error::FrameCountMismatch {
                view: "novel".into(),
                expected: frames,
                found: self.frames.len(),
            });
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.len() != self.cameras.len() {
                return Err(Error::ShapeMismatch(format!("frame {t} has {} novel images for {} cameras", f.len(), self.cameras.len())));
            }
            for (img, cam) in f.iter().zip(self.cameras) {
                if img.width != cam.width || img.height != cam.height || img.channels != 3 {
                    return Err(Error::DimensionMismatch(format!(
                        "novel view {} frame {t} is {}x{}x{}, expected {}x{}x3",
                        cam.id, img.width, img.height, img.channels, cam.width, cam.height
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Output of a reconstruction run.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub sequence: SceneSequence,
    pub trace: Vec<LossRecord>,
}

/// Stage-1 reconstruction from the dataset's own views.
pub fn reconstruct(dataset: &Dataset, config: &ReconstructionConfig) -> Result<Reconstruction> {
    reconstruct_with(dataset, None, None, config)
}

/// Reconstruction with optional extra views and an optional frame-0 seed
/// (visual-hull carving is used when `initial` is `None`).
pub fn reconstruct_with(
    dataset: &Dataset,
    extra: Option<ExtraViews>,
    initial: Option<Vec<Surfel>>,
    config: &ReconstructionConfig,
) -> Result<Reconstruction> {
    config.validate()?;
    let frames = &dataset.frames;
    if frames.is_empty() {
        return Err(Error::EmptyInput("dataset has no frames"));
    }
    if let Some(e) = &extra {
        e.validate(frames.len())?;
    }
    let dt = dataset.dt;
    let input_weight = config.refine.weight_input;
    let views_at = |t: usize| -> Vec<SupervisedView> {
        let mut v: Vec<SupervisedView> = dataset
            .cameras
            .iter()
            .zip(&frames[t].images)
            .map(|(camera, target)| SupervisedView { camera, target, weight: input_weight })
            .collect();
        if let Some(e) = &extra {
            v.extend(
                e.cameras
                    .iter()
                    .zip(&e.frames[t])
                    .zip(e.weights)
                    .map(|((camera, target), &weight)| SupervisedView { camera, target, weight }),
            );
        }
        v
    };

    let seed = match initial {
        Some(s) if !s.is_empty() => s,
        Some(_) => return Err(Error::NoSurfels),
        None => {
            let init = initialize_frame0(&frames[0].masks, &dataset.cameras, &config.init, config.seed)?;
            if init.fallback {
                log::warn!("frame 0: empty visual hull, using uniform seeding");
            }
            init.surfels
        }
    };

    let mut gamma = config.optim.gamma_init;
    let mut trace = Vec::new();
    let mut tracker = BubbleTracker::new();
    let mut history: Vec<Vec<Surfel>> = Vec::with_capacity(frames.len());
    let mut guidance: Vec<BTreeMap<u32, Vector3<f64>>> = Vec::with_capacity(frames.len());

    for t in 0..frames.len() {
        let (mut surfels, schedule, used) = if t == 0 {
            (seed.clone(), FrameSchedule::first(&config.optim, &config.densify), BTreeMap::new())
        } else {
            let prev = history.last().expect("previous frame");
            let (ub, vs) = if config.bubbles.guidance {
                (guidance_velocities(&history, gamma, dt, &config.bubbles), last_surfel_velocities(&history, dt, &config.bubbles))
            } else {
                (BTreeMap::new(), Vec::new())
            };
            let next = advect(prev, &ub, &vs, dt);
            (next, FrameSchedule::sequential(&config.optim), ub)
        };
        let mut adam = AdamState::new(surfels.len(), &config.optim);
        let views = views_at(t);
        let frame_trace = optimize_frame(&mut surfels, &mut gamma, &views, t, &schedule, config, &mut adam)?;
        if let (Some(first), Some(last)) = (frame_trace.first(), frame_trace.last()) {
            log::info!(
                "frame {t}: {} surfels, loss {:.5} -> {:.5}, gamma {gamma:.3}",
                surfels.len(),
                first.loss.total,
                last.loss.total
            );
        }
        trace.extend(frame_trace);
        let association = tracker.update(&frames[t].masks, &config.bubbles);
        unbind(&mut surfels);
        bind_surfels(&mut surfels, &frames[t].masks, &dataset.cameras, &association, config.bubbles.min_area);
        history.push(surfels);
        guidance.push(used);
    }
    let sequence = SceneSequence { frames: history, gamma, dt, guidance, initial: seed };
    sequence.validate()?;
    Ok(Reconstruction { sequence, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{SceneSpec, SyntheticScene};

    fn tiny_config() -> ReconstructionConfig {
        let mut c = ReconstructionConfig::default();
        c.optim.iterations_first = 30;
        c.optim.iterations_per_frame = 5;
        c.densify.every = 10;
        c.densify.until = 20;
        c.init.surfel_count = 150;
        c.init.candidate_factor = 50;
        c.bubbles.min_area = 4;
        c
    }

    fn tiny_dataset() -> Dataset {
        let spec = SceneSpec { frames: 3, width: 32, height: 32, bubble_count: 1, ..SceneSpec::default() };
        let mut spec = spec;
        spec.rig.focal = 75.0;
        let scene = SyntheticScene::generate(4, &spec).unwrap();
        scene.dataset(&scene.cameras().0).unwrap().0
    }

    #[test]
    fn sequence_keeps_identity_after_frame0() {
        let ds = tiny_dataset();
        let r = reconstruct(&ds, &tiny_config()).unwrap();
        let seq = &r.sequence;
        assert_eq!(seq.frames.len(), 3);
        assert_eq!(seq.frames[1].len(), seq.frames[0].len());
        assert_eq!(seq.frames[2].len(), seq.frames[0].len());
        assert_eq!(r.trace.len(), 30 + 5 + 5);
        assert!(seq.guidance[0].is_empty());
        assert!(seq.frames[0].iter().any(|s| s.bubble.is_assigned()));
    }

    #[test]
    fn repeated_runs_are_identical() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let a = reconstruct(&ds, &cfg).unwrap();
        let b = reconstruct(&ds, &cfg).unwrap();
        assert_eq!(a.sequence.to_bytes(), b.sequence.to_bytes());
    }

    #[test]
    fn zero_weight_extra_views_change_nothing() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let base = reconstruct(&ds, &cfg).unwrap();
        let cams = ds.cameras.clone();
        let imgs: Vec<Vec<Image>> = ds.frames.iter().map(|_| vec![Image::filled(32, 32, 3, 0.7); 2]).collect();
        let extra = ExtraViews { cameras: &cams, frames: &imgs, weights: &[0.0, 0.0] };
        let again = reconstruct_with(&ds, Some(extra), Some(base.sequence.initial.clone()), &cfg).unwrap();
        assert_eq!(again.sequence.to_bytes(), base.sequence.to_bytes());
    }

    #[test]
    fn short_extra_sequence_is_rejected() {
        let ds = tiny_dataset();
        let cams = ds.cameras.clone();
        let imgs: Vec<Vec<Image>> = vec![vec![Image::new(32, 32, 3); 2]];
        let extra = ExtraViews { cameras: &cams, frames: &imgs, weights: &[0.5, 0.5] };
        let err = reconstruct_with(&ds, Some(extra), None, &tiny_config()).unwrap_err();
        assert!(matches!(err, Error::FrameCountMismatch { .. }));
    }
}
