//! Differentiable ray-splat rasterizer for surfel disks.
//!
//! Each pixel casts a ray through its center, intersects it with the plane of
//! every candidate surfel and evaluates the 2D Gaussian at the hit point in
//! tangent coordinates. Contributions are composited front to back by hit
//! depth. Screen-space tiles restrict candidates to surfels whose footprint
//! can reach the tile; the footprint is derived from the opacity so that any
//! contribution above the alpha cutoff lies inside it.
//!
//! The backward pass recomputes the per-pixel hit lists and reduces per-tile
//! gradient accumulators in tile order, so results do not depend on the
//! number of worker threads.

use nalgebra::{Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::camera::{CameraModel, NEAR_Z};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::surface::opacity_with_grad;
use crate::surfel::{quaternion_gradient, Surfel};

/// Contributions with `opacity * G` at or below this are skipped.
pub const ALPHA_CUTOFF: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
/// Pixels with accumulated alpha at or below this carry no depth or normal.
pub const VALID_ALPHA: f64 = 1e-4;
/// Rays this close to parallel with a surfel plane are skipped.
pub const PARALLEL_EPS: f64 = 1e-12;
pub const TILE_SIZE: usize = 16;

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn contains(&self, col: usize, row: usize) -> bool {
        col >= self.x0 && col <= self.x1 && row >= self.y0 && row <= self.y1
    }

    fn intersects(&self, other: &PixelRect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }
}

/// Rendered color, alpha, depth and normal (camera frame) for one view.
#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    /// RGB, interleaved.
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Alpha-normalized depth along the optical axis; 0 where invalid.
    pub depth: Vec<f64>,
    /// Unit normal facing the camera, interleaved xyz; 0 where invalid.
    pub normal: Vec<f64>,
    /// Ray/plane pairs skipped because they were nearly parallel.
    pub degenerate_hits: usize,
}

impl RenderBuffers {
    fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: vec![0.0; 3 * n],
            alpha: vec![0.0; n],
            depth: vec![0.0; n],
            normal: vec![0.0; 3 * n],
            degenerate_hits: 0,
        }
    }

    pub fn depth_valid(&self, p: usize) -> bool {
        self.alpha[p] > VALID_ALPHA
    }

    pub fn normal_valid(&self, p: usize) -> bool {
        self.alpha[p] > VALID_ALPHA && self.normal_at(p) != Vector3::zeros()
    }

    pub fn normal_at(&self, p: usize) -> Vector3<f64> {
        Vector3::new(self.normal[3 * p], self.normal[3 * p + 1], self.normal[3 * p + 2])
    }

    pub fn color_image(&self) -> Image {
        Image { width: self.width, height: self.height, channels: 3, data: self.color.clone() }
    }

    pub fn alpha_image(&self) -> Image {
        Image { width: self.width, height: self.height, channels: 1, data: self.alpha.clone() }
    }
}

/// Upstream gradients of a scalar loss w.r.t. the render buffers.
#[derive(Debug, Clone)]
pub struct PixelGradients {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
}

impl PixelGradients {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { color: vec![0.0; 3 * n], alpha: vec![0.0; n], depth: vec![0.0; n], normal: vec![0.0; 3 * n] }
    }
}

/// Gradients w.r.t. intermediate per-surfel quantities: world-frame axes and
/// opacity. [`SurfelGradients::finalize`] maps them to parameters.
#[derive(Debug, Clone)]
pub struct SurfelGradients {
    pub position: Vec<Vector3<f64>>,
    pub scale: Vec<Vector2<f64>>,
    pub frame_u: Vec<Vector3<f64>>,
    pub frame_v: Vec<Vector3<f64>>,
    pub frame_n: Vec<Vector3<f64>>,
    pub color: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub sdf: Vec<f64>,
    pub gamma: f64,
}

/// Gradients w.r.t. the optimized surfel parameters and gamma.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub position: Vec<Vector3<f64>>,
    pub scale: Vec<Vector2<f64>>,
    pub rotation: Vec<Vector4<f64>>,
    pub color: Vec<Vector3<f64>>,
    pub sdf: Vec<f64>,
    pub gamma: f64,
}

impl SurfelGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            scale: vec![Vector2::zeros(); n],
            frame_u: vec![Vector3::zeros(); n],
            frame_v: vec![Vector3::zeros(); n],
            frame_n: vec![Vector3::zeros(); n],
            color: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            sdf: vec![0.0; n],
            gamma: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &SurfelGradients, k: f64) {
        for i in 0..self.len() {
            self.position[i] += other.position[i] * k;
            self.scale[i] += other.scale[i] * k;
            self.frame_u[i] += other.frame_u[i] * k;
            self.frame_v[i] += other.frame_v[i] * k;
            self.frame_n[i] += other.frame_n[i] * k;
            self.color[i] += other.color[i] * k;
            self.opacity[i] += other.opacity[i] * k;
            self.sdf[i] += other.sdf[i] * k;
        }
        self.gamma += other.gamma * k;
    }

    /// Chain through the quaternion and the opacity transform.
    pub fn finalize(&self, surfels: &[Surfel], gamma: f64) -> Result<ParamGradients> {
        let n = surfels.len();
        let mut out = ParamGradients {
            position: self.position.clone(),
            scale: self.scale.clone(),
            rotation: vec![Vector4::zeros(); n],
            color: self.color.clone(),
            sdf: self.sdf.clone(),
            gamma: self.gamma,
        };
        for (i, s) in surfels.iter().enumerate() {
            out.rotation[i] = quaternion_gradient(&s.rotation, &self.frame_u[i], &self.frame_v[i], &self.frame_n[i]);
            let (_, dodf, dodg) = opacity_with_grad(s.sdf, gamma);
            out.sdf[i] += self.opacity[i] * dodf;
            out.gamma += self.opacity[i] * dodg;
        }
        out.check_finite()?;
        Ok(out)
    }
}

impl ParamGradients {
    pub fn check_finite(&self) -> Result<()> {
        let bad = |what: &'static str, i: usize| Err(Error::NonFiniteGradient { what, surfel: Some(i) });
        for i in 0..self.position.len() {
            if !self.position[i].iter().all(|v| v.is_finite()) {
                return bad("position", i);
            }
            if !self.scale[i].iter().all(|v| v.is_finite()) {
                return bad("scale", i);
            }
            if !self.rotation[i].iter().all(|v| v.is_finite()) {
                return bad("rotation", i);
            }
            if !self.color[i].iter().all(|v| v.is_finite()) {
                return bad("color", i);
            }
            if !self.sdf[i].is_finite() {
                return bad("sdf", i);
            }
        }
        if !self.gamma.is_finite() {
            return Err(Error::NonFiniteGradient { what: "gamma", surfel: None });
        }
        Ok(())
    }
}

/// A surfel expressed in the camera frame.
#[derive(Debug, Clone)]
struct Projected {
    mu: Vector3<f64>,
    tu: Vector3<f64>,
    tv: Vector3<f64>,
    n: Vector3<f64>,
    sx: f64,
    sy: f64,
    opacity: f64,
    /// +1 when the stored normal faces the camera, -1 otherwise.
    facing: f64,
    color: Vector3<f64>,
    rect: Option<PixelRect>,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    slot: u32,
    depth: f64,
    u: f64,
    v: f64,
    g: f64,
    alpha: f64,
    r: Vector3<f64>,
    nd: f64,
    /// Transmittance in front of this contribution.
    trans: f64,
}

struct PixelResult {
    color: Vector3<f64>,
    alpha: f64,
    depth_sum: f64,
    normal_sum: Vector3<f64>,
    degenerate: usize,
}

/// Per-tile accumulator, camera frame.
#[derive(Debug, Clone, Copy, Default)]
struct LocalGrad {
    mu: Vector3<f64>,
    tu: Vector3<f64>,
    tv: Vector3<f64>,
    n: Vector3<f64>,
    sx: f64,
    sy: f64,
    opacity: f64,
    color: Vector3<f64>,
}

/// Surfels transformed into one camera and binned into tiles; reusable for
/// a forward and a backward pass.
pub struct PreparedView<'a> {
    camera: &'a CameraModel,
    proj: Vec<Projected>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

impl<'a> PreparedView<'a> {
    pub fn new(surfels: &[Surfel], gamma: f64, camera: &'a CameraModel) -> Self {
        let (w, h) = (camera.width, camera.height);
        let r = camera.rotation();
        let proj: Vec<Projected> = surfels
            .iter()
            .map(|s| {
                let frame = s.frame();
                let mu = camera.to_camera(&s.position);
                let tu: Vector3<f64> = r * frame.column(0);
                let tv: Vector3<f64> = r * frame.column(1);
                let n: Vector3<f64> = r * frame.column(2);
                let opacity = crate::surface::opacity_transform(s.sdf, gamma);
                let facing = if n.dot(&mu) > 0.0 { -1.0 } else { 1.0 };
                let mut p = Projected {
                    mu,
                    tu,
                    tv,
                    n,
                    sx: s.scale.x,
                    sy: s.scale.y,
                    opacity,
                    facing,
                    color: s.color,
                    rect: None,
                };
                p.rect = footprint(&p, camera, w, h);
                p
            })
            .collect();
        let tiles_x = w.div_ceil(TILE_SIZE);
        let tiles_y = h.div_ceil(TILE_SIZE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (i, p) in proj.iter().enumerate() {
            let Some(rect) = p.rect else { continue };
            for ty in rect.y0 / TILE_SIZE..=rect.y1 / TILE_SIZE {
                for tx in rect.x0 / TILE_SIZE..=rect.x1 / TILE_SIZE {
                    tiles[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        Self { camera, proj, tiles, tiles_x }
    }

    /// Pixel rectangle a surfel may contribute to, if any.
    pub fn footprint(&self, surfel: usize) -> Option<PixelRect> {
        self.proj[surfel].rect
    }

    fn tile_rect(&self, t: usize) -> PixelRect {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        PixelRect {
            x0: tx * TILE_SIZE,
            x1: ((tx + 1) * TILE_SIZE).min(self.camera.width) - 1,
            y0: ty * TILE_SIZE,
            y1: ((ty + 1) * TILE_SIZE).min(self.camera.height) - 1,
        }
    }

    /// Slots of `cands` whose footprint spans `row`.
    fn row_slots(&self, cands: &[u32], row: usize, out: &mut Vec<u32>) {
        out.clear();
        for (slot, &i) in cands.iter().enumerate() {
            if self.proj[i as usize].rect.is_some_and(|r| r.y0 <= row && row <= r.y1) {
                out.push(slot as u32);
            }
        }
    }

    /// Sorted, truncated hit list of one pixel; fills `hits` and returns the
    /// composited result. `slots` are the row's candidates from [`Self::row_slots`].
    fn shade(&self, cands: &[u32], slots: &[u32], col: usize, row: usize, hits: &mut Vec<Hit>) -> PixelResult {
        hits.clear();
        let d = self.camera.ray(col as f64, row as f64);
        let mut degenerate = 0;
        for &slot in slots {
            let p = &self.proj[cands[slot as usize] as usize];
            if !p.rect.is_some_and(|r| r.x0 <= col && col <= r.x1) {
                continue;
            }
            let nd = p.n.dot(&d);
            if nd.abs() < PARALLEL_EPS {
                degenerate += 1;
                continue;
            }
            let s = p.n.dot(&p.mu) / nd;
            if s <= NEAR_Z {
                continue;
            }
            let r = d * s - p.mu;
            let u = p.tu.dot(&r);
            let v = p.tv.dot(&r);
            let g = (-0.5 * (u * u / (p.sx * p.sx) + v * v / (p.sy * p.sy))).exp();
            let og = p.opacity * g;
            if og <= ALPHA_CUTOFF {
                continue;
            }
            let alpha = (og - ALPHA_CUTOFF) / (1.0 - ALPHA_CUTOFF);
            hits.push(Hit { slot, depth: s, u, v, g, alpha, r, nd, trans: 0.0 });
        }
        hits.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(cands[a.slot as usize].cmp(&cands[b.slot as usize])));
        let mut out = PixelResult {
            color: Vector3::zeros(),
            alpha: 0.0,
            depth_sum: 0.0,
            normal_sum: Vector3::zeros(),
            degenerate,
        };
        let mut t = 1.0;
        let mut used = hits.len();
        for (k, hit) in hits.iter_mut().enumerate() {
            let p = &self.proj[cands[hit.slot as usize] as usize];
            hit.trans = t;
            let w = hit.alpha * t;
            out.color += p.color * w;
            out.alpha += w;
            out.depth_sum += hit.depth * w;
            out.normal_sum += p.n * (p.facing * w);
            t *= 1.0 - hit.alpha;
            if t < TRANSMITTANCE_STOP {
                used = k + 1;
                break;
            }
        }
        hits.truncate(used);
        out
    }

    pub fn forward(&self) -> RenderBuffers {
        let (w, h) = (self.camera.width, self.camera.height);
        let tile_out: Vec<(PixelRect, Vec<PixelResult>)> = (0..self.tiles.len())
            .into_par_iter()
            .map(|t| {
                let rect = self.tile_rect(t);
                let mut hits = Vec::new();
                let mut slots = Vec::new();
                let mut px = Vec::with_capacity((rect.x1 - rect.x0 + 1) * (rect.y1 - rect.y0 + 1));
                for row in rect.y0..=rect.y1 {
                    self.row_slots(&self.tiles[t], row, &mut slots);
                    for col in rect.x0..=rect.x1 {
                        px.push(self.shade(&self.tiles[t], &slots, col, row, &mut hits));
                    }
                }
                (rect, px)
            })
            .collect();
        let mut out = RenderBuffers::empty(w, h);
        for (rect, px) in tile_out {
            let mut it = px.into_iter();
            for row in rect.y0..=rect.y1 {
                for col in rect.x0..=rect.x1 {
                    let r = it.next().expect("tile pixel");
                    let p = row * w + col;
                    out.color[3 * p..3 * p + 3].copy_from_slice(r.color.as_slice());
                    out.alpha[p] = r.alpha;
                    out.degenerate_hits += r.degenerate;
                    if r.alpha > VALID_ALPHA {
                        out.depth[p] = r.depth_sum / r.alpha;
                        let nn = r.normal_sum.norm();
                        if nn > 1e-12 {
                            let n = r.normal_sum / nn;
                            out.normal[3 * p..3 * p + 3].copy_from_slice(n.as_slice());
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradients of a scalar loss given its gradients w.r.t. the buffers.
    pub fn backward(&self, upstream: &PixelGradients) -> SurfelGradients {
        let (w, _) = (self.camera.width, self.camera.height);
        let tile_grads: Vec<Vec<LocalGrad>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|t| {
                let cands = &self.tiles[t];
                let mut acc = vec![LocalGrad::default(); cands.len()];
                if cands.is_empty() {
                    return acc;
                }
                let rect = self.tile_rect(t);
                let mut hits = Vec::new();
                let mut slots = Vec::new();
                for row in rect.y0..=rect.y1 {
                    self.row_slots(cands, row, &mut slots);
                    for col in rect.x0..=rect.x1 {
                        let p = row * w + col;
                        let res = self.shade(cands, &slots, col, row, &mut hits);
                        if hits.is_empty() {
                            continue;
                        }
                        self.backward_pixel(cands, &hits, &res, p, col, row, upstream, &mut acc);
                    }
                }
                acc
            })
            .collect();
        let n = self.proj.len();
        let mut cam = vec![LocalGrad::default(); n];
        for (t, acc) in tile_grads.iter().enumerate() {
            for (slot, g) in acc.iter().enumerate() {
                let c = &mut cam[self.tiles[t][slot] as usize];
                c.mu += g.mu;
                c.tu += g.tu;
                c.tv += g.tv;
                c.n += g.n;
                c.sx += g.sx;
                c.sy += g.sy;
                c.opacity += g.opacity;
                c.color += g.color;
            }
        }
        let rt = self.camera.rotation().transpose();
        let mut out = SurfelGradients::zeros(n);
        for (i, c) in cam.iter().enumerate() {
            out.position[i] = rt * c.mu;
            out.frame_u[i] = rt * c.tu;
            out.frame_v[i] = rt * c.tv;
            out.frame_n[i] = rt * c.n;
            out.scale[i] = Vector2::new(c.sx, c.sy);
            out.opacity[i] = c.opacity;
            out.color[i] = c.color;
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_pixel(
        &self,
        cands: &[u32],
        hits: &[Hit],
        res: &PixelResult,
        p: usize,
        col: usize,
        row: usize,
        up: &PixelGradients,
        acc: &mut [LocalGrad],
    ) {
        let g_color = Vector3::new(up.color[3 * p], up.color[3 * p + 1], up.color[3 * p + 2]);
        let mut g_alpha = up.alpha[p];
        let mut g_depth_sum = 0.0;
        let mut g_normal_sum = Vector3::zeros();
        if res.alpha > VALID_ALPHA {
            let depth = res.depth_sum / res.alpha;
            g_depth_sum = up.depth[p] / res.alpha;
            g_alpha -= up.depth[p] * depth / res.alpha;
            let nn = res.normal_sum.norm();
            if nn > 1e-12 {
                let nh = res.normal_sum / nn;
                let gn = Vector3::new(up.normal[3 * p], up.normal[3 * p + 1], up.normal[3 * p + 2]);
                g_normal_sum = (gn - nh * nh.dot(&gn)) / nn;
            }
        }
        let d = self.camera.ray(col as f64, row as f64);
        // Dot of the upstream vector with the composite of everything behind.
        let mut behind = 0.0;
        for hit in hits.iter().rev() {
            let pj = &self.proj[cands[hit.slot as usize] as usize];
            let feat = g_color.dot(&pj.color) + g_alpha + g_depth_sum * hit.depth + g_normal_sum.dot(&pj.n) * pj.facing;
            let g_a = hit.trans * (feat - behind);
            behind = feat * hit.alpha + (1.0 - hit.alpha) * behind;

            let wgt = hit.trans * hit.alpha;
            let a = &mut acc[hit.slot as usize];
            a.color += g_color * wgt;
            let g_s_direct = g_depth_sum * wgt;
            a.n += g_normal_sum * (pj.facing * wgt);

            let g_og = g_a / (1.0 - ALPHA_CUTOFF);
            a.opacity += g_og * hit.g;
            let g_g = g_og * pj.opacity * hit.g;
            let (isx2, isy2) = (1.0 / (pj.sx * pj.sx), 1.0 / (pj.sy * pj.sy));
            let g_u = -g_g * hit.u * isx2;
            let g_v = -g_g * hit.v * isy2;
            a.sx += g_g * hit.u * hit.u * isx2 / pj.sx;
            a.sy += g_g * hit.v * hit.v * isy2 / pj.sy;
            let g_r = pj.tu * g_u + pj.tv * g_v;
            a.tu += hit.r * g_u;
            a.tv += hit.r * g_v;
            let g_s = g_s_direct + g_r.dot(&d);
            a.mu += pj.n * (g_s / hit.nd) - g_r;
            a.n -= hit.r * (g_s / hit.nd);
        }
    }
}

/// Opacity-aware footprint: contributions need `q < 2 ln(o / cutoff)`, so the
/// disk of that Mahalanobis radius bounds every visible hit.
fn footprint(p: &Projected, camera: &CameraModel, w: usize, h: usize) -> Option<PixelRect> {
    if p.opacity <= ALPHA_CUTOFF || w == 0 || h == 0 {
        return None;
    }
    let rq = (2.0 * (p.opacity / ALPHA_CUTOFF).ln()).sqrt();
    let (eu, ev) = (p.tu * (rq * p.sx), p.tv * (rq * p.sy));
    let corners = [p.mu + eu + ev, p.mu + eu - ev, p.mu - eu + ev, p.mu - eu - ev];
    let full = PixelRect { x0: 0, x1: w - 1, y0: 0, y1: h - 1 };
    if corners.iter().any(|c| c.z <= NEAR_Z) {
        return Some(full);
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in &corners {
        let q = camera.project_camera(c);
        xmin = xmin.min(q.x);
        xmax = xmax.max(q.x);
        ymin = ymin.min(q.y);
        ymax = ymax.max(q.y);
    }
    if !(xmin.is_finite() && xmax.is_finite() && ymin.is_finite() && ymax.is_finite()) {
        return Some(full);
    }
    let (x0, x1, y0, y1) = (xmin.floor(), xmax.ceil(), ymin.floor(), ymax.ceil());
    if x1 < 0.0 || y1 < 0.0 || x0 > (w - 1) as f64 || y0 > (h - 1) as f64 {
        return None;
    }
    let rect = PixelRect {
        x0: x0.max(0.0) as usize,
        x1: (x1 as usize).min(w - 1),
        y0: y0.max(0.0) as usize,
        y1: (y1 as usize).min(h - 1),
    };
    rect.intersects(&full).then_some(rect)
}

/// Render one view.
pub fn render(surfels: &[Surfel], gamma: f64, camera: &CameraModel) -> RenderBuffers {
    PreparedView::new(surfels, gamma, camera).forward()
}

/// Normals from finite differences of back-projected depth.
#[derive(Debug, Clone)]
pub struct DepthNormals {
    pub normals: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
    /// Unnormalized cross products.
    raw: Vec<Vector3<f64>>,
}

fn back_projected(depth: &[f64], camera: &CameraModel, p: usize) -> Vector3<f64> {
    let (col, row) = (p % camera.width, p / camera.width);
    camera.ray(col as f64, row as f64) * depth[p]
}

/// `normalize((P[row+1] - P[row-1]) x (P[col+1] - P[col-1]))`, camera frame.
/// A fronto-parallel plane gives `(0, 0, -1)`, facing the camera. Border
/// pixels and pixels with an invalid neighbour are invalid.
pub fn depth_to_normal(depth: &[f64], valid: &[bool], camera: &CameraModel) -> DepthNormals {
    let (w, h) = (camera.width, camera.height);
    let mut normals = vec![Vector3::zeros(); w * h];
    let mut raw = vec![Vector3::zeros(); w * h];
    let mut ok = vec![false; w * h];
    for row in 1..h.saturating_sub(1) {
        for col in 1..w.saturating_sub(1) {
            let p = row * w + col;
            let nb = [p - w, p + w, p - 1, p + 1];
            if !valid[p] || nb.iter().any(|&q| !valid[q]) {
                continue;
            }
            let dv = back_projected(depth, camera, p + w) - back_projected(depth, camera, p - w);
            let dh = back_projected(depth, camera, p + 1) - back_projected(depth, camera, p - 1);
            let c = dv.cross(&dh);
            let norm = c.norm();
            if norm > 1e-20 {
                raw[p] = c;
                normals[p] = c / norm;
                ok[p] = true;
            }
        }
    }
    DepthNormals { normals, valid: ok, raw }
}

/// Accumulate `dL/d depth` given `dL/d normal` for valid depth normals.
pub fn depth_to_normal_backward(
    depth: &[f64],
    dn: &DepthNormals,
    camera: &CameraModel,
    g_normal: &[Vector3<f64>],
    g_depth: &mut [f64],
) {
    let w = camera.width;
    for p in 0..dn.valid.len() {
        if !dn.valid[p] || g_normal[p] == Vector3::zeros() {
            continue;
        }
        let c = dn.raw[p];
        let norm = c.norm();
        let nh = c / norm;
        let gc = (g_normal[p] - nh * nh.dot(&g_normal[p])) / norm;
        let dv = back_projected(depth, camera, p + w) - back_projected(depth, camera, p - w);
        let dh = back_projected(depth, camera, p + 1) - back_projected(depth, camera, p - 1);
        let g_dv = dh.cross(&gc);
        let g_dh = gc.cross(&dv);
        let ray = |q: usize| camera.ray((q % w) as f64, (q / w) as f64);
        g_depth[p + w] += g_dv.dot(&ray(p + w));
        g_depth[p - w] -= g_dv.dot(&ray(p - w));
        g_depth[p + 1] += g_dh.dot(&ray(p + 1));
        g_depth[p - 1] -= g_dh.dot(&ray(p - 1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    fn camera(w: usize, h: usize) -> CameraModel {
        CameraModel::new("test", [60.0, 60.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0], (w, h), Matrix4::identity())
            .unwrap()
    }

    fn disk(pos: Vector3<f64>, scale: f64, color: Vector3<f64>) -> Surfel {
        Surfel::new(pos, Vector2::new(scale, scale), Vector4::new(1.0, 0.0, 0.0, 0.0), color, 0.0).unwrap()
    }

    #[test]
    fn empty_scene_is_transparent() {
        let cam = camera(20, 10);
        let b = render(&[], 50.0, &cam);
        assert!(b.alpha.iter().all(|&a| a == 0.0));
        assert!(b.color.iter().all(|&c| c == 0.0));
        assert!((0..200).all(|p| !b.depth_valid(p)));
    }

    #[test]
    fn center_pixel_of_a_fronto_parallel_disk() {
        let cam = camera(21, 21);
        let s = disk(Vector3::new(0.0, 0.0, 2.0), 0.05, Vector3::new(1.0, 0.5, 0.0));
        let b = render(&[s], 50.0, &cam);
        let p = 10 * 21 + 10;
        let a = (1.0 - ALPHA_CUTOFF) / (1.0 - ALPHA_CUTOFF);
        assert!((b.alpha[p] - a).abs() < 1e-12);
        assert!((b.depth[p] - 2.0).abs() < 1e-12);
        assert!((b.normal_at(p) - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!((b.color[3 * p + 1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nearer_surfel_occludes() {
        let cam = camera(21, 21);
        let far = disk(Vector3::new(0.0, 0.0, 3.0), 0.2, Vector3::new(1.0, 0.0, 0.0));
        let near = disk(Vector3::new(0.0, 0.0, 2.0), 0.2, Vector3::new(0.0, 1.0, 0.0));
        let b = render(&[far, near], 50.0, &cam);
        let p = 10 * 21 + 10;
        assert!(b.color[3 * p + 1] > 0.99);
        assert!(b.color[3 * p] < 0.01);
    }

    #[test]
    fn fronto_parallel_depth_normal() {
        let cam = camera(9, 7);
        let depth = vec![1.5; 63];
        let valid = vec![true; 63];
        let dn = depth_to_normal(&depth, &valid, &cam);
        let p = 3 * 9 + 4;
        assert!(dn.valid[p]);
        assert!((dn.normals[p] - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!(!dn.valid[0]);
    }

    #[test]
    fn depth_normal_backward_matches_finite_differences() {
        let cam = camera(6, 5);
        let depth: Vec<f64> = (0..30).map(|i| 2.0 + 0.03 * ((i * 7 % 11) as f64)).collect();
        let valid = vec![true; 30];
        let g: Vec<Vector3<f64>> = (0..30).map(|i| Vector3::new(0.3, -0.2 * (i % 3) as f64, 0.5)).collect();
        let f = |d: &[f64]| -> f64 {
            let dn = depth_to_normal(d, &valid, &cam);
            (0..30).filter(|&p| dn.valid[p]).map(|p| dn.normals[p].dot(&g[p])).sum()
        };
        let dn = depth_to_normal(&depth, &valid, &cam);
        let mut gd = vec![0.0; 30];
        depth_to_normal_backward(&depth, &dn, &cam, &g, &mut gd);
        for k in 0..30 {
            let mut p = depth.clone();
            let mut m = depth.clone();
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - gd[k]).abs() < 1e-5, "k={k} fd={fd} an={}", gd[k]);
        }
    }

    #[test]
    fn footprint_covers_all_contributions() {
        let cam = camera(40, 30);
        let s = Surfel::new(
            Vector3::new(0.1, -0.05, 1.0),
            Vector2::new(0.08, 0.03),
            Vector4::new(0.9, 0.3, 0.2, -0.1),
            Vector3::repeat(0.5),
            0.01,
        )
        .unwrap();
        let view = PreparedView::new(std::slice::from_ref(&s), 50.0, &cam);
        let rect = view.footprint(0).unwrap();
        let full = PreparedView { tiles: vec![vec![0]], tiles_x: 1, ..PreparedView::new(&[s], 50.0, &cam) };
        let mut hits = Vec::new();
        let mut full_proj = full.proj.clone();
        full_proj[0].rect = Some(PixelRect { x0: 0, x1: 39, y0: 0, y1: 29 });
        let full = PreparedView { proj: full_proj, ..full };
        for row in 0..30 {
            for col in 0..40 {
                let r = full.shade(&[0], &[0], col, row, &mut hits);
                if r.alpha > 0.0 {
                    assert!(rect.contains(col, row), "({col},{row}) outside {rect:?}");
                }
            }
        }
    }
}
