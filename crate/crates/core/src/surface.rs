//! SDF-to-opacity coupling and the geometric surface losses.
//!
//! Every loss returns its value together with gradients: either per-pixel
//! upstream gradients on the render buffers (consumed by
//! [`crate::raster::PreparedView::backward`]) or direct per-surfel terms.

use nalgebra::Vector3;

use crate::camera::{CameraModel, NEAR_Z};
use crate::error::{Error, Result};
use crate::raster::{self, PixelGradients, RenderBuffers, SurfelGradients};
use crate::surfel::Surfel;

/// `-ln(3 - 2 sqrt 2)`: the value of `gamma * |f|` at which opacity is 1/2.
pub fn half_opacity_point() -> f64 {
    -(3.0 - 2.0 * 2f64.sqrt()).ln()
}

/// Bell-shaped opacity `4 e^{-gamma f} / (1 + e^{-gamma f})^2`.
///
/// Evaluated as `4e / (1 + e)^2` with `e = exp(-|gamma f|)`, which is exact
/// at `f = 0` and cannot overflow.
pub fn opacity_transform(f: f64, gamma: f64) -> f64 {
    let e = (-(gamma * f).abs()).exp();
    4.0 * e / ((1.0 + e) * (1.0 + e))
}

/// Opacity and its partial derivatives `(T, dT/df, dT/dgamma)`.
pub fn opacity_with_grad(f: f64, gamma: f64) -> (f64, f64, f64) {
    let x = gamma * f;
    let e = (-x.abs()).exp();
    let t = 4.0 * e / ((1.0 + e) * (1.0 + e));
    // dT/dx = -T tanh(x / 2)
    let tanh_half = x.signum() * (1.0 - e) / (1.0 + e);
    let dtdx = -t * tanh_half;
    (t, dtdx * gamma, dtdx * f)
}

/// Median-guided target sharpness and its sensitivity to the SDF samples.
#[derive(Debug, Clone)]
pub struct TargetGamma {
    pub value: f64,
    pub median_abs: f64,
    /// `d value / d f_i` for the (one or two) samples defining the median.
    pub sdf_grad: Vec<(usize, f64)>,
}

/// Median absolute SDF clamped from below so the target stays finite.
pub const MEDIAN_FLOOR: f64 = 1e-9;

pub fn target_gamma(sdf_values: &[f64]) -> Result<TargetGamma> {
    if sdf_values.is_empty() {
        return Err(Error::EmptyInput("target_gamma needs at least one SDF value"));
    }
    let mut order: Vec<usize> = (0..sdf_values.len()).collect();
    order.sort_by(|&a, &b| sdf_values[a].abs().total_cmp(&sdf_values[b].abs()).then(a.cmp(&b)));
    let n = order.len();
    let middle: Vec<(usize, f64)> = if n % 2 == 1 {
        vec![(order[n / 2], 1.0)]
    } else {
        vec![(order[n / 2 - 1], 0.5), (order[n / 2], 0.5)]
    };
    let median: f64 = middle.iter().map(|&(i, w)| w * sdf_values[i].abs()).sum();
    let k = half_opacity_point();
    if median < MEDIAN_FLOOR {
        return Ok(TargetGamma { value: k / MEDIAN_FLOOR, median_abs: median, sdf_grad: Vec::new() });
    }
    let value = k / median;
    let dvalue_dmedian = -value / median;
    let sdf_grad = middle
        .into_iter()
        .map(|(i, w)| (i, dvalue_dmedian * w * sdf_values[i].signum()))
        .collect();
    Ok(TargetGamma { value, median_abs: median, sdf_grad })
}

/// `max(gamma_m - gamma, 0)` with derivatives `(loss, dL/dgamma, dL/dgamma_m)`.
/// The subgradient at the kink is 0.
pub fn gamma_hinge_loss(gamma: f64, gamma_m: f64) -> (f64, f64, f64) {
    if gamma < gamma_m {
        (gamma_m - gamma, -1.0, 1.0)
    } else {
        (0.0, 0.0, 0.0)
    }
}

/// Hinge loss on gamma including the path through the median target.
pub fn gamma_regularizer(surfels: &[Surfel], gamma: f64, grads: &mut SurfelGradients, weight: f64) -> Result<f64> {
    let sdf: Vec<f64> = surfels.iter().map(|s| s.sdf).collect();
    let target = target_gamma(&sdf)?;
    let (loss, dgamma, dtarget) = gamma_hinge_loss(gamma, target.value);
    grads.gamma += weight * dgamma;
    for (i, g) in target.sdf_grad {
        grads.sdf[i] += weight * dtarget * g;
    }
    Ok(loss)
}

/// Outcome of the projection consistency loss for one view.
#[derive(Debug, Clone, Default)]
pub struct ProjectionLoss {
    pub value: f64,
    /// Surfels counted in the normalization.
    pub counted: usize,
    /// Counted surfels whose residual passed the outlier gate.
    pub inliers: usize,
    /// Surfels excluded (behind the camera, off-image, or empty depth).
    pub skipped: usize,
}

/// Projection consistency between each surfel's zero-level projection and
/// the rendered depth at the pixel it lands on (nearest-pixel lookup).
///
/// Adds `weight * dL/d(surfel)` into `grads` and `weight * dL/dD_render`
/// into `upstream.depth`. The outlier gate is not differentiated.
pub fn projection_loss(
    surfels: &[Surfel],
    camera: &CameraModel,
    buffers: &RenderBuffers,
    epsilon: f64,
    weight: f64,
    grads: Option<(&mut SurfelGradients, &mut PixelGradients)>,
) -> ProjectionLoss {
    struct Term {
        surfel: usize,
        pixel: usize,
        residual: f64,
        normal: Vector3<f64>,
    }
    let mut terms = Vec::new();
    let mut skipped = 0;
    for (i, s) in surfels.iter().enumerate() {
        let n = s.normal();
        let proj = s.position - n * s.sdf;
        let pc = camera.to_camera(&proj);
        if pc.z <= NEAR_Z {
            skipped += 1;
            continue;
        }
        let Some((col, row)) = camera.pixel_index(&camera.project_camera(&pc)) else {
            skipped += 1;
            continue;
        };
        let p = row * camera.width + col;
        if !buffers.depth_valid(p) {
            skipped += 1;
            continue;
        }
        terms.push(Term { surfel: i, pixel: p, residual: buffers.depth[p] - pc.z, normal: n });
    }
    let counted = terms.len();
    if counted == 0 {
        return ProjectionLoss { value: 0.0, counted, inliers: 0, skipped };
    }
    let inv_n = 1.0 / counted as f64;
    let mut value = 0.0;
    let mut inliers = 0;
    let r2: Vector3<f64> = camera.rotation().row(2).transpose();
    let mut grads = grads;
    for t in &terms {
        let err = t.residual.abs();
        if err > epsilon {
            continue;
        }
        inliers += 1;
        value += err * inv_n;
        if let Some((sg, pg)) = grads.as_mut() {
            let sign = if t.residual > 0.0 {
                1.0
            } else if t.residual < 0.0 {
                -1.0
            } else {
                0.0
            };
            let g = weight * sign * inv_n;
            pg.depth[t.pixel] += g;
            // d residual / d z_proj = -1; z_proj = r2 . (mu - f n) + t_z
            let gz = -g;
            let s = &surfels[t.surfel];
            sg.position[t.surfel] += r2 * gz;
            sg.sdf[t.surfel] += -gz * r2.dot(&t.normal);
            sg.frame_n[t.surfel] += r2 * (-gz * s.sdf);
        }
    }
    ProjectionLoss { value, counted, inliers, skipped }
}

/// Normal consistency between rendered normals and normals derived from the
/// rendered depth.
#[derive(Debug, Clone, Default)]
pub struct NormalLoss {
    pub value: f64,
    pub valid_pixels: usize,
    /// False when no pixel had both normals valid (value is then 0).
    pub any_valid: bool,
}

/// Alpha-weighted `1 - <n_render, n_depth>`, normalized by the total weight.
///
/// The weight of a pixel is `min(alpha)` over the pixel and the four
/// neighbours its depth normal uses, minus the validity threshold, so the
/// weight reaches zero exactly where validity is lost.
pub fn normal_consistency_loss(
    buffers: &RenderBuffers,
    camera: &CameraModel,
    weight: f64,
    upstream: Option<&mut PixelGradients>,
) -> NormalLoss {
    let (w, h) = (buffers.width, buffers.height);
    let valid: Vec<bool> = (0..w * h).map(|p| buffers.depth_valid(p)).collect();
    let dn = raster::depth_to_normal(&buffers.depth, &valid, camera);
    let mut pixel_weight = vec![0.0; w * h];
    let mut argmin = vec![usize::MAX; w * h];
    let mut total = 0.0;
    let mut sum = 0.0;
    let mut count = 0;
    for row in 1..h.saturating_sub(1) {
        for col in 1..w.saturating_sub(1) {
            let p = row * w + col;
            if !dn.valid[p] || !buffers.normal_valid(p) {
                continue;
            }
            let mut m = p;
            for q in [p - 1, p + 1, p - w, p + w] {
                if buffers.alpha[q] < buffers.alpha[m] {
                    m = q;
                }
            }
            let wp = buffers.alpha[m] - raster::VALID_ALPHA;
            if wp <= 0.0 {
                continue;
            }
            let nr = buffers.normal_at(p);
            let dot = nr.dot(&dn.normals[p]);
            pixel_weight[p] = wp;
            argmin[p] = m;
            total += wp;
            sum += wp * (1.0 - dot);
            count += 1;
        }
    }
    if total <= 0.0 {
        return NormalLoss { value: 0.0, valid_pixels: 0, any_valid: false };
    }
    let value = sum / total;
    if let Some(up) = upstream {
        let mut g_depth_normal = vec![Vector3::zeros(); w * h];
        for p in 0..w * h {
            let wp = pixel_weight[p];
            if wp <= 0.0 {
                continue;
            }
            let nr = buffers.normal_at(p);
            let nd = dn.normals[p];
            let dot = nr.dot(&nd);
            let gn = -weight * wp / total;
            let g_nr = nd * gn;
            up.normal[3 * p] += g_nr.x;
            up.normal[3 * p + 1] += g_nr.y;
            up.normal[3 * p + 2] += g_nr.z;
            g_depth_normal[p] = nr * gn;
            // d value / d wp = ((1 - dot) - value) / total
            up.alpha[argmin[p]] += weight * ((1.0 - dot) - value) / total;
        }
        raster::depth_to_normal_backward(&buffers.depth, &dn, camera, &g_depth_normal, &mut up.depth);
    }
    NormalLoss { value, valid_pixels: count, any_valid: true }
}

/// Zero-level projection `mu - f n` of a surfel.
pub fn zero_level_point(s: &Surfel) -> Vector3<f64> {
    s.position - s.normal() * s.sdf
}

/// Surface samples: zero-level projections of surfels at least `min_opacity` opaque.
pub fn surface_points(surfels: &[Surfel], gamma: f64, min_opacity: f64) -> Vec<Vector3<f64>> {
    surfels
        .iter()
        .filter(|s| opacity_transform(s.sdf, gamma) >= min_opacity)
        .map(zero_level_point)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn opacity_peak_and_tails() {
        assert_eq!(opacity_transform(0.0, 3.0), 1.0);
        assert_eq!(opacity_transform(0.0, 1e-6), 1.0);
        assert!(opacity_transform(60.0, 1.0) < 1e-12);
        assert!(opacity_transform(-60.0, 1.0) < 1e-12);
        assert!(opacity_transform(700.0, 1.0).is_finite());
        assert_eq!(opacity_transform(1e6, 1e6), 0.0);
    }

    #[test]
    fn half_opacity_gamma() {
        // bisection oracle for T_gamma(1) = 1/2
        let (mut lo, mut hi) = (0.1f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if opacity_transform(1.0, mid) > 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((lo - 1.7627471740).abs() < 1e-9);
        assert!((half_opacity_point() - lo).abs() < 1e-9);
        assert!((opacity_transform(1.0, 1.7627471740) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn target_gamma_examples() {
        let k = half_opacity_point();
        assert!((target_gamma(&[1.0, -1.0, 1.0]).unwrap().value - 1.7627471740).abs() < 1e-9);
        assert!((target_gamma(&[1.0, -2.0, 3.0]).unwrap().value - k / 2.0).abs() < 1e-15);
        let a = target_gamma(&[0.5, 1.0, 2.0]).unwrap().value;
        let b = target_gamma(&[1.0, 2.0, 4.0]).unwrap().value;
        assert!((a - 2.0 * b).abs() < 1e-12);
        assert!(matches!(target_gamma(&[]), Err(Error::EmptyInput(_))));
        assert_eq!(target_gamma(&[0.0, 0.0]).unwrap().value, k / MEDIAN_FLOOR);
    }

    #[test]
    fn target_gamma_gradient_matches_finite_differences() {
        let f = [0.3, -0.1, 0.25, -0.7, 0.05];
        let t = target_gamma(&f).unwrap();
        for i in 0..f.len() {
            let mut p = f;
            let mut m = f;
            p[i] += 1e-7;
            m[i] -= 1e-7;
            let fd = (target_gamma(&p).unwrap().value - target_gamma(&m).unwrap().value) / 2e-7;
            let an: f64 = t.sdf_grad.iter().filter(|(j, _)| *j == i).map(|(_, g)| g).sum();
            assert!((fd - an).abs() < 1e-4 * fd.abs().max(1.0), "i={i} fd={fd} an={an}");
        }
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(gamma_hinge_loss(5.0, 3.0), (0.0, 0.0, 0.0));
        assert_eq!(gamma_hinge_loss(1.0, 3.0), (2.0, -1.0, 1.0));
        assert_eq!(gamma_hinge_loss(3.0, 3.0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn opacity_derivatives_match_finite_differences() {
        for &(f, g) in &[(0.01, 50.0), (-0.03, 20.0), (0.2, 3.0), (-1.0, 0.5)] {
            let (_, dtdf, dtdg) = opacity_with_grad(f, g);
            let h = 1e-7;
            let fd_f = (opacity_transform(f + h, g) - opacity_transform(f - h, g)) / (2.0 * h);
            let fd_g = (opacity_transform(f, g + h) - opacity_transform(f, g - h)) / (2.0 * h);
            assert!((fd_f - dtdf).abs() < 1e-6 * dtdf.abs().max(1.0));
            assert!((fd_g - dtdg).abs() < 1e-6 * dtdg.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn opacity_is_even(f in -5.0f64..5.0, g in 0.01f64..100.0) {
            prop_assert_eq!(opacity_transform(f, g), opacity_transform(-f, g));
        }

        #[test]
        fn opacity_decreases_in_abs_f(f in 0.0f64..2.0, d in 1e-3f64..1.0, g in 0.1f64..10.0) {
            prop_assert!(opacity_transform(f + d, g) < opacity_transform(f, g));
        }

        #[test]
        fn median_is_half_opacity(values in prop::collection::vec(
            prop_oneof![-2.0f64..-1e-3, 1e-3f64..2.0], 1..40)) {
            let t = target_gamma(&values).unwrap();
            prop_assert!((opacity_transform(t.median_abs, t.value) - 0.5).abs() < 1e-9);
        }
    }
}
