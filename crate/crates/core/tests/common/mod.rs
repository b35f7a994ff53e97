//! Shared fixtures and independent reference implementations for the
//! integration and acceptance tests.
#![allow(dead_code)]

use bubblesplat::camera::CameraModel;
use bubblesplat::config::LossConfig;
use bubblesplat::image::Image;
use bubblesplat::metrics::{ssim_kernel, SSIM_C1, SSIM_C2, SSIM_WINDOW};
use bubblesplat::optim::{evaluate_loss, SupervisedView};
use bubblesplat::raster::{render, ALPHA_CUTOFF, TRANSMITTANCE_STOP, VALID_ALPHA};
use bubblesplat::surface::opacity_transform;
use bubblesplat::surfel::Surfel;
use nalgebra::{Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 64x64 camera two meters in front of the origin, looking along +z.
pub fn front_camera(size: usize) -> CameraModel {
    let f = size as f64;
    let c = (size as f64 - 1.0) / 2.0;
    CameraModel::look_at("front", [f, f, c, c], (size, size), Vector3::new(0.0, 0.0, -2.0), Vector3::zeros(), -Vector3::y())
        .unwrap()
}

pub fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    loop {
        let q = Vector4::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.2 && n <= 1.0 {
            return q / n;
        }
    }
}

/// Up to `max` surfels in view of [`front_camera`], tilted at most ~70
/// degrees away from the optical axis.
pub fn random_surfels(rng: &mut ChaCha8Rng, count: usize) -> Vec<Surfel> {
    (0..count)
        .map(|_| loop {
            let q = random_unit_quaternion(rng);
            let s = Surfel::new(
                Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2)),
                Vector2::new(rng.random_range(0.05..0.15), rng.random_range(0.05..0.15)),
                q,
                Vector3::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)),
                rng.random_range(-0.03..0.03),
            )
            .unwrap();
            if s.normal().z.abs() > 0.35 {
                break s;
            }
        })
        .collect()
}

/// Plain per-pixel reference renderer: world-space ray/plane hits against
/// every surfel, no tiles, no footprint culling and no early termination.
pub struct OracleImage {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
    /// Transmittance the tiled renderer drops when it stops early (0 when
    /// it would not stop before the last contribution).
    pub truncated: Vec<f64>,
}

pub fn oracle_render(surfels: &[Surfel], gamma: f64, camera: &CameraModel) -> OracleImage {
    let (w, h) = (camera.width, camera.height);
    let origin = camera.center();
    let rot = camera.rotation();
    let mut out = OracleImage {
        color: vec![0.0; 3 * w * h],
        alpha: vec![0.0; w * h],
        depth: vec![0.0; w * h],
        normal: vec![0.0; 3 * w * h],
        truncated: vec![0.0; w * h],
    };
    for row in 0..h {
        for col in 0..w {
            let d_cam = camera.ray(col as f64, row as f64);
            let dir = rot.transpose() * d_cam;
            // (depth, index, alpha)
            let mut hits: Vec<(f64, usize, f64)> = Vec::new();
            for (i, s) in surfels.iter().enumerate() {
                let n = s.normal();
                let nd = n.dot(&dir);
                if nd.abs() < 1e-12 {
                    continue;
                }
                let t = n.dot(&(s.position - origin)) / nd;
                if t <= 1e-9 {
                    continue;
                }
                let x = origin + dir * t;
                let u = s.tangent_u().dot(&(x - s.position)) / s.scale.x;
                let v = s.tangent_v().dot(&(x - s.position)) / s.scale.y;
                let og = opacity_transform(s.sdf, gamma) * (-0.5 * (u * u + v * v)).exp();
                if og > ALPHA_CUTOFF {
                    hits.push((t, i, (og - ALPHA_CUTOFF) / (1.0 - ALPHA_CUTOFF)));
                }
            }
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let p = row * w + col;
            let mut trans = 1.0;
            let mut color = Vector3::zeros();
            let mut alpha = 0.0;
            let mut depth = 0.0;
            let mut normal = Vector3::zeros();
            let mut stopped = false;
            for (k, &(t, i, a)) in hits.iter().enumerate() {
                let s = &surfels[i];
                let wgt = a * trans;
                color += s.color * wgt;
                alpha += wgt;
                depth += t * wgt;
                let n_cam = rot * s.normal();
                let facing = if n_cam.dot(&camera.to_camera(&s.position)) > 0.0 { -1.0 } else { 1.0 };
                normal += n_cam * (facing * wgt);
                trans *= 1.0 - a;
                if !stopped && trans < TRANSMITTANCE_STOP && k + 1 < hits.len() {
                    out.truncated[p] = trans;
                    stopped = true;
                }
            }
            out.color[3 * p..3 * p + 3].copy_from_slice(color.as_slice());
            out.alpha[p] = alpha;
            if alpha > VALID_ALPHA {
                out.depth[p] = depth / alpha;
                if normal.norm() > 1e-12 {
                    out.normal[3 * p..3 * p + 3].copy_from_slice(normal.normalize().as_slice());
                }
            }
        }
    }
    out
}

/// Largest per-channel deviation between the tiled render and the oracle
/// over pixels whose truncated mass is below `mass`. Returns
/// `(max deviation, pixels compared)`.
pub fn oracle_deviation(surfels: &[Surfel], gamma: f64, camera: &CameraModel, mass: f64) -> (f64, usize) {
    let fast = render(surfels, gamma, camera);
    let slow = oracle_render(surfels, gamma, camera);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for p in 0..camera.width * camera.height {
        if slow.truncated[p] >= mass {
            continue;
        }
        compared += 1;
        for c in 0..3 {
            worst = worst.max((fast.color[3 * p + c] - slow.color[3 * p + c]).abs());
        }
        worst = worst.max((fast.alpha[p] - slow.alpha[p]).abs());
        // depth is normalized by alpha; compare only where both are valid
        if fast.alpha[p] > 1e-3 && slow.alpha[p] > 1e-3 {
            worst = worst.max((fast.depth[p] - slow.depth[p]).abs());
            for c in 0..3 {
                worst = worst.max((fast.normal[3 * p + c] - slow.normal[3 * p + c]).abs());
            }
        }
    }
    (worst, compared)
}

/// SSIM evaluated window by window with the full 2D Gaussian, on the
/// channel mean.
pub fn direct_ssim(a: &Image, b: &Image) -> f64 {
    let gray = |img: &Image| -> Vec<f64> {
        (0..img.width * img.height)
            .map(|p| (0..img.channels).map(|c| img.data[p * img.channels + c]).sum::<f64>() / img.channels as f64)
            .collect()
    };
    let (x, y) = (gray(a), gray(b));
    let k = ssim_kernel();
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    let mut windows = 0;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wt = k[i] * k[j];
                    let p = (r0 + i) * w + c0 + j;
                    mx += wt * x[p];
                    my += wt * y[p];
                }
            }
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wt = k[i] * k[j];
                    let p = (r0 + i) * w + c0 + j;
                    sxx += wt * (x[p] - mx) * (x[p] - mx);
                    syy += wt * (y[p] - my) * (y[p] - my);
                    sxy += wt * (x[p] - mx) * (y[p] - my);
                }
            }
            total += (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2) / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2));
            windows += 1;
        }
    }
    total / windows as f64
}

/// Target for gradient checks: a different random scene over a grey
/// backdrop, so that L1 never sits at a tie.
pub fn target_image(rng: &mut ChaCha8Rng, camera: &CameraModel) -> Image {
    let other = random_surfels(rng, 4);
    let mut img = render(&other, 40.0, camera).color_image();
    for v in img.data.iter_mut() {
        *v = 0.05 + 0.9 * *v + rng.random_range(0.0..0.02);
    }
    img
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug)]
pub struct GradCheck {
    pub coordinates: usize,
    pub passing: usize,
    pub worst: f64,
    /// `(surfel, parameter)` of every coordinate over tolerance; surfel
    /// `usize::MAX` stands for gamma.
    pub failures: Vec<(usize, usize)>,
}

/// Central difference of the loss along one coordinate, indexed as in
/// [`check_loss_gradients`] (0..3 position, 3..5 scale, 5..9 rotation,
/// 9..12 color, 12 sdf; surfel `usize::MAX` is gamma).
pub fn central_difference(surfels: &[Surfel], gamma: f64, views: &[SupervisedView], cfg: &LossConfig, coord: (usize, usize), step: f64) -> f64 {
    let loss = |s: &[Surfel], gm: f64| evaluate_loss(s, gm, views, cfg, false).unwrap().0.total;
    let (i, k) = coord;
    if i == usize::MAX {
        return (loss(surfels, gamma + step) - loss(surfels, gamma - step)) / (2.0 * step);
    }
    let mut plus = surfels.to_vec();
    let mut minus = surfels.to_vec();
    let (p, m) = match k {
        0..=2 => (&mut plus[i].position[k], &mut minus[i].position[k]),
        3..=4 => (&mut plus[i].scale[k - 3], &mut minus[i].scale[k - 3]),
        5..=8 => (&mut plus[i].rotation[k - 5], &mut minus[i].rotation[k - 5]),
        9..=11 => (&mut plus[i].color[k - 9], &mut minus[i].color[k - 9]),
        _ => (&mut plus[i].sdf, &mut minus[i].sdf),
    };
    *p += step;
    *m -= step;
    (loss(&plus, gamma) - loss(&minus, gamma)) / (2.0 * step)
}

/// Analytic gradient along one coordinate, indexed as in [`central_difference`].
pub fn analytic_component(g: &bubblesplat::raster::ParamGradients, coord: (usize, usize)) -> f64 {
    let (i, k) = coord;
    match (i, k) {
        (usize::MAX, _) => g.gamma,
        (_, 0..=2) => g.position[i][k],
        (_, 3..=4) => g.scale[i][k - 3],
        (_, 5..=8) => g.rotation[i][k - 5],
        (_, 9..=11) => g.color[i][k - 9],
        _ => g.sdf[i],
    }
}

/// `|a - n| / max(|a|, |n|, floor)` for every parameter of every surfel
/// and for gamma, against central differences with `step`.
pub fn check_loss_gradients(surfels: &[Surfel], gamma: f64, views: &[SupervisedView], cfg: &LossConfig, step: f64, tol: f64, floor: f64) -> GradCheck {
    let (_, grads) = evaluate_loss(surfels, gamma, views, cfg, true).unwrap();
    let g = grads.unwrap();
    let mut out = GradCheck { coordinates: 0, passing: 0, worst: 0.0, failures: Vec::new() };
    let coords = (0..surfels.len()).flat_map(|i| (0..13).map(move |k| (i, k))).chain([(usize::MAX, 0)]);
    for coord in coords {
        let analytic = analytic_component(&g, coord);
        let numeric = central_difference(surfels, gamma, views, cfg, coord, step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        out.coordinates += 1;
        if rel < tol {
            out.passing += 1;
        } else {
            out.failures.push(coord);
        }
        out.worst = out.worst.max(rel);
    }
    out
}
