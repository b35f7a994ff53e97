//! Per-frame optimization: loss assembly over supervising views, Adam,
//! visual-hull initialization and frame-0 densification.

use nalgebra::{Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::CameraModel;
use crate::config::{DensifyConfig, InitConfig, LossConfig, OptimConfig};
use crate::error::{Error, Result};
use crate::image::{Image, LabelMask};
use crate::metrics::{image_l1_with_grad, ssim_with_grad};
use crate::raster::{ParamGradients, PixelGradients, PreparedView, SurfelGradients};
use crate::surface::{gamma_regularizer, normal_consistency_loss, opacity_transform, projection_loss};
use crate::surfel::Surfel;

/// Lower bound kept on gamma after every update.
pub const GAMMA_FLOOR: f64 = 1e-3;

/// One view supervising the fit: a camera, its target image and weight.
#[derive(Debug, Clone, Copy)]
pub struct SupervisedView<'a> {
    pub camera: &'a CameraModel,
    pub target: &'a Image,
    pub weight: f64,
}

/// Loss terms of one evaluation. Geometric terms are averaged over the
/// supervising views; `appearance` is the weighted sum over views.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub appearance: f64,
    pub l1: f64,
    pub dssim: f64,
    pub normal: f64,
    pub gamma: f64,
    pub projection: f64,
}

fn finite(term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { term })
    }
}

struct ViewTerms {
    l1: f64,
    dssim: f64,
    normal: f64,
    projection: f64,
    grads: Option<SurfelGradients>,
}

/// `lambda_app * sum_c w_c (L1 + 1 - SSIM) + lambda_geo * (L_n + L_gamma + L_p)`
/// and optionally its gradient. Views with zero weight are skipped
/// entirely.
pub fn evaluate_loss(
    surfels: &[Surfel],
    gamma: f64,
    views: &[SupervisedView],
    config: &LossConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<ParamGradients>)> {
    if surfels.is_empty() {
        return Err(Error::NoSurfels);
    }
    let active: Vec<&SupervisedView> = views.iter().filter(|v| v.weight != 0.0).collect();
    let geo_share = if active.is_empty() { 0.0 } else { 1.0 / active.len() as f64 };
    let per_view: Vec<Result<ViewTerms>> = active
        .par_iter()
        .map(|view| {
            let cam = view.camera;
            let prepared = PreparedView::new(surfels, gamma, cam);
            let buffers = prepared.forward();
            let rendered = buffers.color_image();
            let (l1, g_l1) = image_l1_with_grad(&rendered, view.target)?;
            let (ssim, g_ssim) = ssim_with_grad(&rendered, view.target)?;
            let app_w = config.lambda_app * view.weight;
            let geo_w = config.lambda_geo * geo_share;
            if !with_grad {
                let normal = normal_consistency_loss(&buffers, cam, geo_w, None).value;
                let projection = projection_loss(surfels, cam, &buffers, config.epsilon_proj, geo_w, None).value;
                return Ok(ViewTerms { l1, dssim: 1.0 - ssim, normal, projection, grads: None });
            }
            let mut upstream = PixelGradients::zeros(cam.width, cam.height);
            for (u, (a, b)) in upstream.color.iter_mut().zip(g_l1.iter().zip(&g_ssim)) {
                *u = app_w * (a - b);
            }
            let mut sg = SurfelGradients::zeros(surfels.len());
            let normal = normal_consistency_loss(&buffers, cam, geo_w, Some(&mut upstream)).value;
            let projection =
                projection_loss(surfels, cam, &buffers, config.epsilon_proj, geo_w, Some((&mut sg, &mut upstream))).value;
            let back = prepared.backward(&upstream);
            sg.add_scaled(&back, 1.0);
            Ok(ViewTerms { l1, dssim: 1.0 - ssim, normal, projection, grads: Some(sg) })
        })
        .collect();

    let mut out = LossBreakdown::default();
    let mut grads = with_grad.then(|| SurfelGradients::zeros(surfels.len()));
    for (view, terms) in active.iter().zip(per_view) {
        let terms = terms?;
        out.l1 += view.weight * terms.l1;
        out.dssim += view.weight * terms.dssim;
        out.appearance += view.weight * (terms.l1 + terms.dssim);
        out.normal += geo_share * terms.normal;
        out.projection += geo_share * terms.projection;
        if let (Some(acc), Some(g)) = (grads.as_mut(), terms.grads.as_ref()) {
            acc.add_scaled(g, 1.0);
        }
    }
    let mut scratch = SurfelGradients::zeros(0);
    let gamma_grads = grads.as_mut().unwrap_or(&mut scratch);
    out.gamma = if gamma_grads.is_empty() {
        // value only
        let mut tmp = SurfelGradients::zeros(surfels.len());
        gamma_regularizer(surfels, gamma, &mut tmp, 0.0)?
    } else {
        gamma_regularizer(surfels, gamma, gamma_grads, config.lambda_geo)?
    };
    finite("l1", out.l1)?;
    finite("ssim", out.dssim)?;
    finite("normal", out.normal)?;
    finite("projection", out.projection)?;
    finite("gamma", out.gamma)?;
    out.total = finite(
        "total",
        config.lambda_app * out.appearance + config.lambda_geo * (out.normal + out.gamma + out.projection),
    )?;
    let param = match grads {
        Some(g) => Some(g.finalize(surfels, gamma)?),
        None => None,
    };
    Ok((out, param))
}

/// Per-group learning rates of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    /// Applied to the log of the scale.
    pub scale: f64,
    pub rotation: f64,
    pub color: f64,
    pub sdf: f64,
    pub gamma: f64,
}

impl LearningRates {
    pub fn from_config(c: &OptimConfig, position: f64) -> Self {
        Self { position, scale: c.lr_scale, rotation: c.lr_rotation, color: c.lr_color, sdf: c.lr_sdf, gamma: c.lr_gamma }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Moments<const N: usize> {
    m: [f64; N],
    v: [f64; N],
}

impl<const N: usize> Default for Moments<N> {
    fn default() -> Self {
        Self { m: [0.0; N], v: [0.0; N] }
    }
}

/// Adam moments for every surfel parameter group and gamma.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    position: Vec<Moments<3>>,
    log_scale: Vec<Moments<2>>,
    rotation: Vec<Moments<4>>,
    color: Vec<Moments<3>>,
    sdf: Vec<Moments<1>>,
    gamma: Moments<1>,
}

struct Bias {
    b1: f64,
    b2: f64,
    c1: f64,
    c2: f64,
    eps: f64,
}

impl Bias {
    #[inline]
    fn update<const N: usize>(&self, p: &mut [f64; N], g: &[f64; N], mo: &mut Moments<N>, lr: f64) {
        for k in 0..N {
            mo.m[k] = self.b1 * mo.m[k] + (1.0 - self.b1) * g[k];
            mo.v[k] = self.b2 * mo.v[k] + (1.0 - self.b2) * g[k] * g[k];
            let mh = mo.m[k] / self.c1;
            let vh = mo.v[k] / self.c2;
            p[k] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

impl AdamState {
    pub fn new(surfels: usize, config: &OptimConfig) -> Self {
        Self {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            step: 0,
            position: vec![Moments::default(); surfels],
            log_scale: vec![Moments::default(); surfels],
            rotation: vec![Moments::default(); surfels],
            color: vec![Moments::default(); surfels],
            sdf: vec![Moments::default(); surfels],
            gamma: Moments::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// Rebuild the per-surfel moments after densification: entry `k` takes
    /// the moments of surfel `sources[k]`, or zeros for new surfels.
    pub fn remap(&mut self, sources: &[Option<usize>]) {
        fn pick<T: Copy + Default>(v: &[T], sources: &[Option<usize>]) -> Vec<T> {
            sources.iter().map(|s| s.map(|i| v[i]).unwrap_or_default()).collect()
        }
        self.position = pick(&self.position, sources);
        self.log_scale = pick(&self.log_scale, sources);
        self.rotation = pick(&self.rotation, sources);
        self.color = pick(&self.color, sources);
        self.sdf = pick(&self.sdf, sources);
    }

    /// One Adam step on every surfel and gamma, followed by quaternion
    /// renormalization and clamping of scale, color and gamma.
    pub fn apply(
        &mut self,
        surfels: &mut [Surfel],
        gamma: &mut f64,
        grads: &ParamGradients,
        lr: &LearningRates,
        scale_range: (f64, f64),
    ) -> Result<()> {
        if grads.position.len() != surfels.len() || self.len() != surfels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} surfels, {} gradients, {} optimizer slots",
                surfels.len(),
                grads.position.len(),
                self.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias = Bias {
            b1: self.beta1,
            b2: self.beta2,
            c1: 1.0 - self.beta1.powi(t),
            c2: 1.0 - self.beta2.powi(t),
            eps: self.eps,
        };
        let (lo, hi) = scale_range;
        surfels
            .par_iter_mut()
            .zip(self.position.par_iter_mut())
            .zip(self.log_scale.par_iter_mut())
            .zip(self.rotation.par_iter_mut())
            .zip(self.color.par_iter_mut())
            .zip(self.sdf.par_iter_mut())
            .enumerate()
            .for_each(|(i, (((((s, mp), ms), mr), mc), mf))| {
                let mut p: [f64; 3] = s.position.into();
                bias.update(&mut p, &grads.position[i].into(), mp, lr.position);
                s.position = Vector3::from(p);

                let mut ls = [s.scale.x.ln(), s.scale.y.ln()];
                let gs = [grads.scale[i].x * s.scale.x, grads.scale[i].y * s.scale.y];
                bias.update(&mut ls, &gs, ms, lr.scale);
                s.scale = Vector2::new(ls[0].exp().clamp(lo, hi), ls[1].exp().clamp(lo, hi));

                let mut q: [f64; 4] = s.rotation.into();
                bias.update(&mut q, &grads.rotation[i].into(), mr, lr.rotation);
                let q = Vector4::from(q);
                let n = q.norm();
                if n.is_finite() && n > 1e-12 {
                    s.rotation = q / n;
                }

                let mut c: [f64; 3] = s.color.into();
                bias.update(&mut c, &grads.color[i].into(), mc, lr.color);
                s.color = Vector3::from(c).map(|v| v.clamp(0.0, 1.0));

                let mut f = [s.sdf];
                bias.update(&mut f, &[grads.sdf[i]], mf, lr.sdf);
                s.sdf = f[0];
            });
        let mut g = [*gamma];
        bias.update(&mut g, &[grads.gamma], &mut self.gamma, lr.gamma);
        *gamma = g[0].max(GAMMA_FLOOR);
        Ok(())
    }
}

/// Running mean of positional gradient norms used by densification.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: usize,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self { sum: vec![0.0; n], count: 0 }
    }

    pub fn record(&mut self, grads: &ParamGradients) {
        for (s, g) in self.sum.iter_mut().zip(&grads.position) {
            *s += g.norm();
        }
        self.count += 1;
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum[i] / self.count as f64
        }
    }
}

/// Clone high-gradient surfels, split oversized ones, prune transparent or
/// degenerate ones. Returns the new set and, per output surfel, the input
/// index it continues (`None` for newly created surfels).
pub fn densify_and_prune(
    surfels: &[Surfel],
    stats: &GradStats,
    gamma: f64,
    config: &DensifyConfig,
    scale_min: f64,
) -> (Vec<Surfel>, Vec<Option<usize>>) {
    let mut out = Vec::with_capacity(surfels.len());
    let mut sources = Vec::with_capacity(surfels.len());
    let kept = surfels
        .iter()
        .filter(|s| opacity_transform(s.sdf, gamma) >= config.min_opacity && s.scale.min() >= scale_min)
        .count();
    let mut budget = config.max_surfels.saturating_sub(kept);
    for (i, s) in surfels.iter().enumerate() {
        if opacity_transform(s.sdf, gamma) < config.min_opacity || s.scale.min() < scale_min {
            continue;
        }
        let major = if s.scale.x >= s.scale.y { 0 } else { 1 };
        if s.scale[major] > config.split_scale && budget > 0 {
            budget -= 1;
            let axis = if major == 0 { s.tangent_u() } else { s.tangent_v() };
            let offset = axis * (0.5 * s.scale[major]);
            let mut a = s.clone();
            a.scale /= 1.6;
            let mut b = a.clone();
            a.position += offset;
            b.position -= offset;
            out.push(a);
            sources.push(Some(i));
            out.push(b);
            sources.push(None);
        } else if stats.mean(i) > config.grad_threshold && budget > 0 {
            budget -= 1;
            out.push(s.clone());
            sources.push(Some(i));
            let mut c = s.clone();
            c.position += s.tangent_u() * (0.5 * s.scale.x);
            out.push(c);
            sources.push(None);
        } else {
            out.push(s.clone());
            sources.push(Some(i));
        }
    }
    (out, sources)
}

/// Iteration schedule of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSchedule {
    pub iterations: usize,
    pub lr_position_start: f64,
    pub lr_position_end: f64,
    /// Densify every `every` steps up to `until` (frame 0 only).
    pub densify: Option<(usize, usize)>,
}

impl FrameSchedule {
    pub fn first(config: &OptimConfig, densify: &DensifyConfig) -> Self {
        Self {
            iterations: config.iterations_first,
            lr_position_start: config.lr_position,
            lr_position_end: config.lr_position * config.lr_position_final_ratio,
            densify: densify.enabled.then_some((densify.every, densify.until)),
        }
    }

    pub fn sequential(config: &OptimConfig) -> Self {
        Self {
            iterations: config.iterations_per_frame,
            lr_position_start: config.lr_position_sequential,
            lr_position_end: config.lr_position_sequential,
            densify: None,
        }
    }

    /// Exponential interpolation between the start and end position rates.
    pub fn lr_position(&self, step: usize) -> f64 {
        if self.iterations <= 1 || self.lr_position_start == self.lr_position_end {
            return self.lr_position_start;
        }
        let s = step as f64 / (self.iterations - 1) as f64;
        self.lr_position_start * (self.lr_position_end / self.lr_position_start).powf(s)
    }
}

/// Loss of one optimizer iteration (evaluated before the update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub frame: usize,
    pub iteration: usize,
    pub surfels: usize,
    pub loss: LossBreakdown,
}

pub fn loss_trace_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("frame,iteration,surfels,total,appearance,l1,dssim,normal,gamma,projection\n");
    for r in records {
        let l = &r.loss;
        out.push_str(&format!(
            "{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            r.frame, r.iteration, r.surfels, l.total, l.appearance, l.l1, l.dssim, l.normal, l.gamma, l.projection
        ));
    }
    out
}

/// Fit one frame. Densification (when scheduled) may change the surfel
/// count; otherwise count and order are preserved.
pub fn optimize_frame(
    surfels: &mut Vec<Surfel>,
    gamma: &mut f64,
    views: &[SupervisedView],
    frame: usize,
    schedule: &FrameSchedule,
    config: &crate::config::ReconstructionConfig,
    adam: &mut AdamState,
) -> Result<Vec<LossRecord>> {
    let mut trace = Vec::with_capacity(schedule.iterations);
    let mut stats = GradStats::new(surfels.len());
    let scale_range = (config.optim.scale_min, config.optim.scale_max);
    for it in 0..schedule.iterations {
        let (loss, grads) = evaluate_loss(surfels, *gamma, views, &config.loss, true)?;
        let grads = grads.expect("gradients requested");
        trace.push(LossRecord { frame, iteration: it, surfels: surfels.len(), loss });
        stats.record(&grads);
        let lr = LearningRates::from_config(&config.optim, schedule.lr_position(it));
        adam.apply(surfels, gamma, &grads, &lr, scale_range)?;
        if let Some((every, until)) = schedule.densify {
            let step = it + 1;
            if every > 0 && step % every == 0 && step <= until && step < schedule.iterations {
                let (next, sources) = densify_and_prune(surfels, &stats, *gamma, &config.densify, config.optim.scale_min);
                if next.is_empty() {
                    return Err(Error::NoSurfels);
                }
                log::debug!("frame {frame} step {step}: densify {} -> {} surfels", surfels.len(), next.len());
                *surfels = next;
                adam.remap(&sources);
                stats = GradStats::new(surfels.len());
            }
        }
    }
    Ok(trace)
}

/// Axis-aligned box `[xmin, xmax, ymin, ymax, zmin, zmax]` around the point
/// closest (least squares) to every optical axis, sized by the field of view
/// at the mean camera distance.
pub fn default_bounds(cameras: &[CameraModel]) -> [f64; 6] {
    let mut a = nalgebra::Matrix3::<f64>::zeros();
    let mut b = Vector3::zeros();
    for c in cameras {
        let d = c.forward();
        let p = nalgebra::Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * c.center();
    }
    let center = match a.try_inverse() {
        Some(inv) if cameras.len() >= 2 && a.determinant().abs() > 1e-9 => inv * b,
        _ => cameras.first().map(|c| c.center() + c.forward()).unwrap_or_else(Vector3::zeros),
    };
    let mut half = 0.0f64;
    for c in cameras {
        let dist = (c.center() - center).norm();
        half = half.max(dist * (c.width as f64 / (2.0 * c.fx)).max(c.height as f64 / (2.0 * c.fy)));
    }
    if half <= 0.0 {
        half = 1.0;
    }
    [center.x - half, center.x + half, center.y - half, center.y + half, center.z - half, center.z + half]
}

/// Uniformly random unit quaternion (Shoemake).
fn random_rotation(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    Vector4::new(b * (tau * u3).cos(), a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin())
}

fn inside_all(p: &Vector3<f64>, masks: &[LabelMask], cameras: &[CameraModel]) -> bool {
    masks.iter().zip(cameras).all(|(m, c)| {
        let Ok((px, _)) = c.project(p) else { return false };
        match c.pixel_index(&px) {
            Some((col, row)) => m.get(col, row) != 0,
            None => false,
        }
    })
}

/// Result of visual-hull seeding.
#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub surfels: Vec<Surfel>,
    /// True when no candidate survived carving and uniform samples were used.
    pub fallback: bool,
}

/// Seed surfels by visual-hull carving of the first frame's masks.
pub fn initialize_frame0(masks: &[LabelMask], cameras: &[CameraModel], config: &InitConfig, seed: u64) -> Result<Initialization> {
    if masks.is_empty() || masks.len() != cameras.len() {
        return Err(Error::ShapeMismatch(format!("{} masks for {} cameras", masks.len(), cameras.len())));
    }
    if !masks.iter().any(|m| m.labels.iter().any(|&l| l != 0)) {
        return Err(Error::EmptyInput("initialization needs at least one foreground mask"));
    }
    if config.surfel_count == 0 {
        return Err(Error::InvalidConfig("init.surfel_count must be positive".into()));
    }
    let bounds = config.bounds.unwrap_or_else(|| default_bounds(cameras));
    let lo = Vector3::new(bounds[0], bounds[2], bounds[4]);
    let hi = Vector3::new(bounds[1], bounds[3], bounds[5]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = config.surfel_count * config.candidate_factor.max(1);
    let sample = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            lo.x + (hi.x - lo.x) * rng.random::<f64>(),
            lo.y + (hi.y - lo.y) * rng.random::<f64>(),
            lo.z + (hi.z - lo.z) * rng.random::<f64>(),
        )
    };
    let points: Vec<Vector3<f64>> = (0..candidates).map(|_| sample(&mut rng)).collect();
    let flags: Vec<bool> = points.par_iter().map(|p| inside_all(p, masks, cameras)).collect();
    let mut hull: Vec<Vector3<f64>> = points.into_iter().zip(flags).filter(|(_, f)| *f).map(|(p, _)| p).collect();
    if config.shell_only && hull.len() > config.surfel_count {
        // keep candidates whose neighbourhood leaves the hull in some view,
        // moved onto the hull boundary along the first exiting probe
        let probe = 2.0 * config.scale.max(config.jitter);
        let offsets = [Vector3::x(), -Vector3::x(), Vector3::y(), -Vector3::y(), Vector3::z(), -Vector3::z()];
        let shell: Vec<Option<Vector3<f64>>> = hull
            .par_iter()
            .map(|p| {
                let o = offsets.iter().find(|o| !inside_all(&(p + *o * probe), masks, cameras))?;
                let (mut lo, mut hi) = (0.0, probe);
                for _ in 0..12 {
                    let mid = 0.5 * (lo + hi);
                    if inside_all(&(p + o * mid), masks, cameras) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Some(p + o * lo)
            })
            .collect();
        let kept: Vec<Vector3<f64>> = shell.into_iter().flatten().collect();
        if kept.len() >= config.surfel_count {
            hull = kept;
        }
    }
    let fallback = hull.is_empty();
    if fallback {
        log::warn!("visual hull is empty; seeding surfels uniformly in the bounding box");
        hull = (0..config.surfel_count).map(|_| sample(&mut rng)).collect();
    }
    // partial Fisher-Yates for a deterministic subset
    let take = config.surfel_count.min(hull.len());
    for k in 0..take {
        let j = rng.random_range(k..hull.len());
        hull.swap(k, j);
    }
    let mut surfels = Vec::with_capacity(config.surfel_count);
    for k in 0..config.surfel_count {
        let base = hull[k % take];
        let jitter = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * (2.0 * config.jitter);
        let q = random_rotation(&mut rng);
        surfels.push(Surfel::new(
            base + jitter,
            Vector2::new(config.scale, config.scale),
            q,
            Vector3::new(0.5, 0.5, 0.5),
            0.0,
        )?);
    }
    Ok(Initialization { surfels, fallback })
}
