//! Synthetic rising-bubble scenes with exact ground truth.
//!
//! Bubbles are spheres (optionally modulated by a second-order zonal
//! harmonic about a random axis) that spawn on the floor plane `y = r` and
//! rise with a scripted constant velocity. Images are ray traced with
//! ambient plus diffuse shading on a black background; this path shares no
//! code with the surfel rasterizer.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::dataset::{Dataset, FrameSet};
use crate::error::{Error, Result};
use crate::image::{Image, LabelMask};
use crate::io::{write_bytes, write_points, write_series_csv, FrameSeries};

/// Upper bound on the deformation amplitude.
pub const MAX_DEFORMATION: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub frames: usize,
    /// Seconds between frames.
    pub dt: f64,
    pub width: usize,
    pub height: usize,
    pub bubble_count: usize,
    /// Radius range, meters.
    pub radius: [f64; 2],
    /// Spawn time of the first bubble, in frames (negative: already rising
    /// at frame 0).
    pub first_spawn: f64,
    /// Frames between consecutive spawns.
    pub emission_interval: f64,
    /// Spawn positions are drawn uniformly from these x and z ranges.
    pub spawn_x: [f64; 2],
    pub spawn_z: [f64; 2],
    /// Scripted velocity, m/s.
    pub velocity: [f64; 3],
    /// Relative radial deformation amplitude, at most 0.15.
    pub deform_amplitude: f64,
    /// Deformation angular frequency, rad/s.
    pub deform_frequency: f64,
    pub rig: RigSpec,
    pub albedo: [f64; 3],
    pub ambient: f64,
    /// Direction towards the light.
    pub light: [f64; 3],
    /// Ground-truth surface samples per bubble per frame.
    pub surface_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    /// Distance from the cameras to the look-at target, meters.
    pub distance: f64,
    /// Azimuth of the two input cameras, +/- this many degrees.
    pub half_angle_deg: f64,
    pub focal: f64,
    pub target: [f64; 3],
    /// Also emit the middle (0 degree) camera as a held-out view.
    pub heldout: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 20,
            dt: 0.05,
            width: 128,
            height: 128,
            bubble_count: 2,
            radius: [0.08, 0.1],
            first_spawn: -8.0,
            emission_interval: -14.0,
            spawn_x: [-0.15, 0.15],
            spawn_z: [-0.1, 0.1],
            velocity: [0.0, 0.3, 0.0],
            deform_amplitude: 0.0,
            deform_frequency: 20.0,
            rig: RigSpec::default(),
            albedo: [0.55, 0.75, 0.95],
            ambient: 0.35,
            light: [0.3, 0.8, -0.5],
            surface_samples: 2000,
        }
    }
}

impl Default for RigSpec {
    fn default() -> Self {
        Self { distance: 2.5, half_angle_deg: 17.5, focal: 300.0, target: [0.0, 0.45, 0.0], heldout: true }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::SpecInvalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::SpecInvalid(m.to_string()));
        if self.frames < 2 {
            return bad("at least two frames are required");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.width < 11 || self.height < 11 {
            return bad("images must be at least 11 pixels on a side");
        }
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1]) {
            return bad("radius range must be positive and ordered");
        }
        if !(0.0..=MAX_DEFORMATION).contains(&self.deform_amplitude) {
            return bad("deformation amplitude must lie in [0, 0.15]");
        }
        if self.spawn_x[0] > self.spawn_x[1] || self.spawn_z[0] > self.spawn_z[1] {
            return bad("spawn ranges must be ordered");
        }
        if !(self.rig.distance > 0.0 && self.rig.focal > 0.0) {
            return bad("rig distance and focal length must be positive");
        }
        if self.bubble_count == 0 {
            return bad("at least one bubble is required");
        }
        if self.bubble_count >= u16::MAX as usize {
            return bad("too many bubbles for 16-bit masks");
        }
        if Vector3::from(self.light).norm() == 0.0 {
            return bad("light direction must be non-zero");
        }
        Ok(())
    }
}

/// One ground-truth bubble.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBubble {
    pub id: u32,
    pub radius: f64,
    /// Spawn time in seconds (frame 0 is t = 0).
    pub spawn_time: f64,
    /// Center at spawn, resting on the floor.
    pub spawn_center: Vector3<f64>,
    pub deform_axis: Vector3<f64>,
    pub deform_phase: f64,
}

/// Per-pixel ground truth of one rendered view.
#[derive(Debug, Clone)]
pub struct GtRender {
    pub image: Image,
    /// Nearest-hit bubble id per pixel.
    pub instance: Vec<Option<u32>>,
    /// Camera-space z of the nearest hit; 0 for background.
    pub depth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub spec: SceneSpec,
    pub bubbles: Vec<GtBubble>,
}

/// Second-order zonal harmonic (Legendre P2) of the cosine to the axis.
fn zonal(dir: &Vector3<f64>, axis: &Vector3<f64>) -> f64 {
    let c = dir.dot(axis);
    0.5 * (3.0 * c * c - 1.0)
}

impl SyntheticScene {
    pub fn generate(seed: u64, spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bubbles = Vec::with_capacity(spec.bubble_count);
        for k in 0..spec.bubble_count {
            let radius = spec.radius[0] + (spec.radius[1] - spec.radius[0]) * rng.random::<f64>();
            let x = spec.spawn_x[0] + (spec.spawn_x[1] - spec.spawn_x[0]) * rng.random::<f64>();
            let z = spec.spawn_z[0] + (spec.spawn_z[1] - spec.spawn_z[0]) * rng.random::<f64>();
            let axis = loop {
                let v = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                if v.norm() > 0.05 {
                    break v.normalize();
                }
            };
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            bubbles.push(GtBubble {
                id: k as u32 + 1,
                radius,
                spawn_time: (spec.first_spawn + k as f64 * spec.emission_interval) * spec.dt,
                spawn_center: Vector3::new(x, radius, z),
                deform_axis: axis,
                deform_phase: phase,
            });
        }
        Ok(Self { seed, spec: spec.clone(), bubbles })
    }

    fn time(&self, t: usize) -> f64 {
        t as f64 * self.spec.dt
    }

    /// Center of a bubble at frame `t`, if it exists yet.
    pub fn center(&self, b: &GtBubble, t: usize) -> Option<Vector3<f64>> {
        let age = self.time(t) - b.spawn_time;
        (age >= 0.0).then(|| b.spawn_center + Vector3::from(self.spec.velocity) * age)
    }

    fn deformation(&self, b: &GtBubble, t: usize) -> f64 {
        self.spec.deform_amplitude * (self.spec.deform_frequency * self.time(t) + b.deform_phase).sin()
    }

    /// Surface radius of a bubble along unit direction `dir`.
    pub fn radius_along(&self, b: &GtBubble, t: usize, dir: &Vector3<f64>) -> f64 {
        let a = self.deformation(b, t);
        if a == 0.0 {
            b.radius
        } else {
            b.radius * (1.0 + a * zonal(dir, &b.deform_axis))
        }
    }

    pub fn present(&self, t: usize) -> impl Iterator<Item = (&GtBubble, Vector3<f64>)> {
        self.bubbles.iter().filter_map(move |b| self.center(b, t).map(|c| (b, c)))
    }

    /// Signed radial distance to the nearest bubble surface; exact for
    /// undeformed spheres.
    pub fn sdf(&self, t: usize, x: &Vector3<f64>) -> f64 {
        self.present(t)
            .map(|(b, c)| {
                let d = x - c;
                let n = d.norm();
                if n == 0.0 {
                    return -b.radius;
                }
                n - self.radius_along(b, t, &(d / n))
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Fibonacci-sphere samples of every present bubble's surface.
    pub fn surface_points(&self, t: usize) -> Vec<Vector3<f64>> {
        let n = self.spec.surface_samples.max(1);
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut out = Vec::new();
        for (b, c) in self.present(t) {
            for k in 0..n {
                let y = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).max(0.0).sqrt();
                let th = golden * k as f64;
                let dir = Vector3::new(r * th.cos(), y, r * th.sin());
                out.push(c + dir * self.radius_along(b, t, &dir));
            }
        }
        out
    }

    /// Scripted centroid velocity of every bubble present at `t` and `t - 1`.
    pub fn velocities(&self, t: usize) -> BTreeMap<u32, Vector3<f64>> {
        if t == 0 {
            return BTreeMap::new();
        }
        self.bubbles
            .iter()
            .filter(|b| self.center(b, t - 1).is_some())
            .map(|b| (b.id, Vector3::from(self.spec.velocity)))
            .collect()
    }

    pub fn centroids(&self, t: usize) -> BTreeMap<u32, Vector3<f64>> {
        self.present(t).map(|(b, c)| (b.id, c)).collect()
    }

    /// Input cameras at -/+ half angle, then the held-out middle camera.
    pub fn cameras(&self) -> (Vec<CameraModel>, Option<CameraModel>) {
        let r = &self.spec.rig;
        let target = Vector3::from(r.target);
        let (w, h) = (self.spec.width, self.spec.height);
        let intr = [r.focal, r.focal, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
        let make = |id: &str, deg: f64| {
            let az = deg.to_radians();
            let eye = target + Vector3::new(az.sin(), 0.0, -az.cos()) * r.distance;
            CameraModel::look_at(id, intr, (w, h), eye, target, Vector3::y()).expect("rig camera is valid")
        };
        let inputs = vec![make("cam0", -r.half_angle_deg), make("cam1", r.half_angle_deg)];
        let held = r.heldout.then(|| make("middle", 0.0));
        (inputs, held)
    }

    fn intersect(&self, b: &GtBubble, c: &Vector3<f64>, t: usize, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let a = self.deformation(b, t);
        let bound = b.radius * (1.0 + a.abs());
        let oc = o - c;
        let half_b = oc.dot(d);
        let disc = half_b * half_b - (oc.norm_squared() - bound * bound);
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let (t0, t1) = (-half_b - sq, -half_b + sq);
        if t1 <= 0.0 {
            return None;
        }
        if a == 0.0 {
            return Some(if t0 > 0.0 { t0 } else { t1 });
        }
        let g = |s: f64| {
            let p = o + d * s - c;
            let n = p.norm();
            n - self.radius_along(b, t, &(p / n.max(1e-300)))
        };
        let start = t0.max(0.0);
        let steps = 96;
        let step = (t1 - start) / steps as f64;
        let mut prev = start;
        let mut gp = g(prev);
        for k in 1..=steps {
            let s = start + step * k as f64;
            let gs = g(s);
            if gp > 0.0 && gs <= 0.0 {
                let (mut lo, mut hi) = (prev, s);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if g(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(hi);
            }
            prev = s;
            gp = gs;
        }
        None
    }

    fn surface_normal(&self, b: &GtBubble, c: &Vector3<f64>, t: usize, p: &Vector3<f64>) -> Vector3<f64> {
        if self.deformation(b, t) == 0.0 {
            return (p - c).normalize();
        }
        let h = 1e-6 * b.radius;
        let g = |q: Vector3<f64>| {
            let v = q - c;
            let n = v.norm();
            n - self.radius_along(b, t, &(v / n))
        };
        let grad = Vector3::new(
            g(p + Vector3::x() * h) - g(p - Vector3::x() * h),
            g(p + Vector3::y() * h) - g(p - Vector3::y() * h),
            g(p + Vector3::z() * h) - g(p - Vector3::z() * h),
        );
        grad.normalize()
    }

    /// Ray-traced image, nearest-hit instance ids and depth for one view.
    pub fn render(&self, t: usize, camera: &CameraModel) -> GtRender {
        let (w, h) = (camera.width, camera.height);
        let origin = camera.center();
        let rt = camera.rotation().transpose();
        let light = Vector3::from(self.spec.light).normalize();
        let albedo = Vector3::from(self.spec.albedo);
        let present: Vec<(&GtBubble, Vector3<f64>)> = self.present(t).collect();
        let rows: Vec<Vec<(Vector3<f64>, Option<u32>, f64)>> = (0..h)
            .into_par_iter()
            .map(|row| {
                (0..w)
                    .map(|col| {
                        let rc = camera.ray(col as f64, row as f64);
                        let d = (rt * rc).normalize();
                        let mut best: Option<(f64, usize)> = None;
                        for (k, (b, c)) in present.iter().enumerate() {
                            if let Some(s) = self.intersect(b, c, t, &origin, &d) {
                                if best.is_none_or(|(bs, _)| s < bs) {
                                    best = Some((s, k));
                                }
                            }
                        }
                        match best {
                            None => (Vector3::zeros(), None, 0.0),
                            Some((s, k)) => {
                                let (b, c) = present[k];
                                let p = origin + d * s;
                                let n = self.surface_normal(b, &c, t, &p);
                                let shade = self.spec.ambient + (1.0 - self.spec.ambient) * n.dot(&light).max(0.0);
                                let z = camera.to_camera(&p).z;
                                ((albedo * shade).map(|v| v.clamp(0.0, 1.0)), Some(b.id), z)
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        let mut image = Image::new(w, h, 3);
        let mut instance = vec![None; w * h];
        let mut depth = vec![0.0; w * h];
        for (row, line) in rows.into_iter().enumerate() {
            for (col, (c, id, z)) in line.into_iter().enumerate() {
                let p = row * w + col;
                image.data[3 * p..3 * p + 3].copy_from_slice(c.as_slice());
                instance[p] = id;
                depth[p] = z;
            }
        }
        GtRender { image, instance, depth }
    }

    /// Label mask with labels permuted per view and frame, plus the map from
    /// label to true bubble id.
    pub fn mask(&self, render: &GtRender, t: usize, view: usize, width: usize, height: usize) -> (LabelMask, BTreeMap<u16, u32>) {
        let mut ids: Vec<u32> = self.present(t).map(|(b, _)| b.id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((view as u64) << 32) ^ (t as u64).wrapping_mul(0x9e37_79b9));
        ids.shuffle(&mut rng);
        let label_of: BTreeMap<u32, u16> = ids.iter().enumerate().map(|(k, &id)| (id, k as u16 + 1)).collect();
        let mut mask = LabelMask::new(width, height);
        for (p, inst) in render.instance.iter().enumerate() {
            if let Some(id) = inst {
                mask.labels[p] = label_of[id];
            }
        }
        (mask, label_of.into_iter().map(|(id, l)| (l, id)).collect())
    }

    /// Dataset for the given cameras, with per-frame label-to-id maps.
    pub fn dataset(&self, cameras: &[CameraModel]) -> Result<(Dataset, Vec<Vec<BTreeMap<u16, u32>>>)> {
        let mut frames = Vec::with_capacity(self.spec.frames);
        let mut labels = Vec::with_capacity(self.spec.frames);
        for t in 0..self.spec.frames {
            let mut images = Vec::new();
            let mut masks = Vec::new();
            let mut maps = Vec::new();
            for (v, cam) in cameras.iter().enumerate() {
                let r = self.render(t, cam);
                let (m, map) = self.mask(&r, t, v, cam.width, cam.height);
                images.push(r.image);
                masks.push(m);
                maps.push(map);
            }
            frames.push(FrameSet { time_index: t, dt: self.spec.dt, images, masks });
            labels.push(maps);
        }
        Ok((Dataset::new(cameras.to_vec(), frames, self.spec.dt)?, labels))
    }

    /// Write the input dataset to `root` and ground truth to `root/gt`:
    /// `points/frame_<t:05>.bin`, `velocity.csv`, `centroids.csv`,
    /// `labels.json`, `spec.json` and (when enabled) the held-out view as a
    /// dataset under `heldout/`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let (inputs, held) = self.cameras();
        let (ds, labels) = self.dataset(&inputs)?;
        ds.save(root)?;
        let gt = root.join("gt");
        let mut vel = FrameSeries::new();
        let mut cen = FrameSeries::new();
        for t in 0..self.spec.frames {
            write_points(&gt.join("points").join(format!("frame_{t:05}.bin")), &self.surface_points(t))?;
            let v = self.velocities(t);
            if !v.is_empty() {
                vel.insert(t, v);
            }
            cen.insert(t, self.centroids(t));
        }
        write_series_csv(&gt.join("velocity.csv"), ["vx", "vy", "vz"], &vel)?;
        write_series_csv(&gt.join("centroids.csv"), ["x", "y", "z"], &cen)?;
        let labels_json: Vec<Vec<BTreeMap<String, u32>>> = labels
            .iter()
            .map(|views| views.iter().map(|m| m.iter().map(|(l, id)| (l.to_string(), *id)).collect()).collect())
            .collect();
        write_bytes(&gt.join("labels.json"), (serde_json::to_string(&labels_json).expect("labels") + "\n").as_bytes())?;
        let spec_json = serde_json::json!({ "seed": self.seed, "spec": self.spec });
        write_bytes(&gt.join("spec.json"), (serde_json::to_string_pretty(&spec_json).expect("spec") + "\n").as_bytes())?;
        if let Some(cam) = held {
            let (hds, _) = self.dataset(std::slice::from_ref(&cam))?;
            hds.save(&gt.join("heldout"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_bubble() -> SceneSpec {
        SceneSpec {
            bubble_count: 1,
            first_spawn: -4.0,
            spawn_x: [0.0, 0.0],
            spawn_z: [0.0, 0.0],
            width: 48,
            height: 48,
            frames: 3,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn rigid_motion_matches_script() {
        let s = SyntheticScene::generate(1, &SceneSpec::default()).unwrap();
        for t in 1..s.spec.frames {
            let (c0, c1) = (s.centroids(t - 1), s.centroids(t));
            for (id, c) in &c1 {
                let v = (c - c0[id]) / s.spec.dt;
                assert!((v - Vector3::new(0.0, 0.3, 0.0)).norm() < 1e-12);
            }
        }
        let p0 = s.surface_points(3);
        let p1 = s.surface_points(4);
        let shift = Vector3::new(0.0, 0.3 * s.spec.dt, 0.0);
        assert!(p0.iter().zip(&p1).all(|(a, b)| (b - a - shift).norm() < 1e-12));
    }

    #[test]
    fn same_seed_is_identical() {
        let spec = SceneSpec { width: 24, height: 24, frames: 2, ..SceneSpec::default() };
        let a = SyntheticScene::generate(7, &spec).unwrap();
        let b = SyntheticScene::generate(7, &spec).unwrap();
        assert_eq!(a, b);
        let cam = &a.cameras().0[0];
        assert_eq!(a.render(1, cam).image, b.render(1, cam).image);
    }

    #[test]
    fn sdf_vanishes_on_samples() {
        let s = SyntheticScene::generate(3, &SceneSpec::default()).unwrap();
        for p in s.surface_points(2) {
            assert!(s.sdf(2, &p).abs() < 1e-9);
        }
    }

    #[test]
    fn depth_at_projected_center() {
        let spec = one_bubble();
        let s = SyntheticScene::generate(0, &spec).unwrap();
        let c = s.centroids(0)[&1];
        let cam = CameraModel::look_at("c", [60.0, 60.0, 23.5, 23.5], (48, 48), c + Vector3::new(0.0, 0.0, -2.0), c, Vector3::y())
            .unwrap();
        let r = s.render(0, &cam);
        let p = 23 * 48 + 23;
        // pixel (23, 23) is half a pixel off the principal point
        let d = cam.ray(23.0, 23.0).normalize();
        let oc = cam.center() - c;
        let b = oc.dot(&d);
        let ray_t = -b - (b * b - oc.norm_squared() + s.bubbles[0].radius.powi(2)).sqrt();
        assert!((r.depth[p] - ray_t * d.z).abs() < 1e-9);
        assert_eq!(r.instance[p], Some(1));
        let center_pixel = cam.project(&c).unwrap().0;
        assert!((center_pixel.x - 23.5).abs() < 1e-9);
    }

    #[test]
    fn front_bubble_owns_overlap() {
        let mut spec = one_bubble();
        spec.bubble_count = 2;
        spec.emission_interval = 0.0;
        spec.radius = [0.1, 0.1];
        spec.spawn_z = [-0.3, 0.3];
        let s = SyntheticScene::generate(11, &spec).unwrap();
        let (c0, c1) = (s.centroids(0)[&1], s.centroids(0)[&2]);
        let look = Vector3::new(0.0, 0.1, 0.0);
        let cam = CameraModel::look_at("c", [60.0, 60.0, 23.5, 23.5], (48, 48), look - Vector3::z() * 2.0, look, Vector3::y())
            .unwrap();
        let r = s.render(0, &cam);
        let nearer = if c0.z < c1.z { 1 } else { 2 };
        assert!((c0.z - c1.z).abs() > 1e-3);
        for p in [23 * 48 + 23, 24 * 48 + 24] {
            assert_eq!(r.instance[p], Some(nearer));
        }
    }

    #[test]
    fn masks_are_permuted_labels() {
        let s = SyntheticScene::generate(5, &SceneSpec { width: 32, height: 32, frames: 2, ..SceneSpec::default() }).unwrap();
        let (cams, _) = s.cameras();
        let (ds, labels) = s.dataset(&cams).unwrap();
        for (t, f) in ds.frames.iter().enumerate() {
            for (v, m) in f.masks.iter().enumerate() {
                for inst in m.instances() {
                    assert!(labels[t][v].contains_key(&inst.label));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = SceneSpec { deform_amplitude: 0.2, ..SceneSpec::default() };
        assert!(matches!(SyntheticScene::generate(0, &bad), Err(Error::SpecInvalid(_))));
        let bad = SceneSpec { frames: 1, ..SceneSpec::default() };
        assert!(SyntheticScene::generate(0, &bad).is_err());
    }

    #[test]
    fn deformed_bubble_renders_inside_bound() {
        let spec = SceneSpec { deform_amplitude: 0.15, ..one_bubble() };
        let s = SyntheticScene::generate(2, &spec).unwrap();
        let (cams, _) = s.cameras();
        let r = s.render(1, &cams[0]);
        assert!(r.instance.iter().any(|i| i.is_some()));
        for p in s.surface_points(1) {
            assert!(s.sdf(1, &p).abs() < 1e-9);
        }
    }
}
