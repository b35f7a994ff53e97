//! Image and geometry metrics: L1, PSNR, SSIM (with gradient), Chamfer
//! distance and per-bubble velocity error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;

fn check_shape(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn image_l1(a: &Image, b: &Image) -> Result<f64> {
    check_shape(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// L1 and its gradient w.r.t. `a`.
pub fn image_l1_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    let v = image_l1(a, b)?;
    let n = a.data.len().max(1) as f64;
    let g = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            if x > y {
                1.0 / n
            } else if x < y {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((v, g))
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shape(a, b)?;
    let n = a.data.len().max(1) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering: (w - 10) x (h - 10) output.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            let mut s = 0.0;
            for (j, kj) in k.iter().enumerate() {
                s += kj * x[r * w + c + j];
            }
            tmp[r * ow + c] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            let mut s = 0.0;
            for (i, ki) in k.iter().enumerate() {
                s += ki * tmp[(r + i) * ow + c];
            }
            out[r * ow + c] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an output-sized map back to `w x h`.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    for r in 0..oh {
        for c in 0..ow {
            let v = g[r * ow + c];
            for (i, ki) in k.iter().enumerate() {
                tmp[(r + i) * ow + c] += ki * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..ow {
            let v = tmp[r * ow + c];
            for (j, kj) in k.iter().enumerate() {
                out[r * w + c + j] += kj * v;
            }
        }
    }
    out
}

struct SsimMoments {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn ssim_moments(x: &[f64], y: &[f64], w: usize, h: usize) -> SsimMoments {
    let k = ssim_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    SsimMoments {
        mx: filter_valid(x, w, h, &k),
        my: filter_valid(y, w, h, &k),
        exx: filter_valid(&xx, w, h, &k),
        eyy: filter_valid(&yy, w, h, &k),
        exy: filter_valid(&xy, w, h, &k),
    }
}

fn window_ssim(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64) -> (f64, [f64; 4]) {
    let a1 = 2.0 * mx * my + SSIM_C1;
    let a2 = 2.0 * (exy - mx * my) + SSIM_C2;
    let b1 = mx * mx + my * my + SSIM_C1;
    let b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2;
    (a1 * a2 / (b1 * b2), [a1, a2, b1, b2])
}

fn check_ssim_size(w: usize, h: usize) -> Result<()> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { width: w, height: h });
    }
    Ok(())
}

/// SSIM of two grayscale images given as row-major slices.
pub fn ssim_gray(x: &[f64], y: &[f64], w: usize, h: usize) -> Result<f64> {
    check_ssim_size(w, h)?;
    let m = ssim_moments(x, y, w, h);
    let n = m.mx.len();
    let total: f64 = (0..n).map(|i| window_ssim(m.mx[i], m.my[i], m.exx[i], m.eyy[i], m.exy[i]).0).sum();
    Ok(total / n as f64)
}

/// SSIM on the channel-mean grayscale conversion.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shape(a, b)?;
    ssim_gray(&a.to_gray(), &b.to_gray(), a.width, a.height)
}

/// SSIM and its gradient w.r.t. every value of `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    check_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    check_ssim_size(w, h)?;
    let (x, y) = (a.to_gray(), b.to_gray());
    let m = ssim_moments(&x, &y, w, h);
    let n = m.mx.len();
    let inv_n = 1.0 / n as f64;
    let mut g_mx = vec![0.0; n];
    let mut g_exx = vec![0.0; n];
    let mut g_exy = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (m.mx[i], m.my[i]);
        let (s, [a1, a2, b1, b2]) = window_ssim(mx, my, m.exx[i], m.eyy[i], m.exy[i]);
        total += s;
        g_mx[i] = inv_n * s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2);
        g_exx[i] = -inv_n * s / b2;
        g_exy[i] = inv_n * 2.0 * s / a2;
    }
    let k = ssim_kernel();
    let t_mx = filter_valid_adjoint(&g_mx, w, h, &k);
    let t_exx = filter_valid_adjoint(&g_exx, w, h, &k);
    let t_exy = filter_valid_adjoint(&g_exy, w, h, &k);
    let c = a.channels;
    let mut grad = vec![0.0; a.data.len()];
    for p in 0..w * h {
        let gp = (t_mx[p] + 2.0 * x[p] * t_exx[p] + y[p] * t_exy[p]) / c as f64;
        for ch in 0..c {
            grad[p * c + ch] = gp;
        }
    }
    Ok((total * inv_n, grad))
}

/// Symmetric Chamfer distance: mean nearest-neighbour distance in each
/// direction, averaged.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("chamfer needs two non-empty point sets"));
    }
    let ga = PointGrid::new(a);
    let gb = PointGrid::new(b);
    let ab: f64 = a.par_iter().map(|p| gb.nearest(p)).collect::<Vec<_>>().iter().sum::<f64>() / a.len() as f64;
    let ba: f64 = b.par_iter().map(|p| ga.nearest(p)).collect::<Vec<_>>().iter().sum::<f64>() / b.len() as f64;
    Ok(0.5 * (ab + ba))
}

/// Uniform grid over a point set for exact nearest-neighbour queries.
pub struct PointGrid<'a> {
    points: &'a [Vector3<f64>],
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = hi - lo;
        let vol = ext.iter().map(|e| e.max(1e-12)).product::<f64>();
        let mut cell = (vol / points.len().max(1) as f64).cbrt() * 2.0;
        let longest = ext.max();
        if !(cell > 0.0) || !cell.is_finite() {
            cell = 1.0;
        }
        cell = cell.max(longest / 256.0).max(1e-12);
        let dims = [0, 1, 2].map(|k| ((ext[k] / cell).floor() as usize + 1).min(1 << 16));
        let cell_of = |p: &Vector3<f64>| -> usize {
            let c = [0, 1, 2].map(|k| (((p[k] - lo[k]) / cell).floor() as usize).min(dims[k] - 1));
            (c[2] * dims[1] + c[1]) * dims[0] + c[0]
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncells + 1];
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Self { points, origin: lo, cell, dims, starts: counts, order }
    }

    /// Distance to the nearest point of the set.
    pub fn nearest(&self, q: &Vector3<f64>) -> f64 {
        let qc = [0, 1, 2].map(|k| ((q[k] - self.origin[k]) / self.cell).floor() as i64);
        let mut best = f64::INFINITY;
        // shells below `first` contain no grid cell; `last` covers every cell
        let first = qc.iter().zip(&self.dims).map(|(&c, &d)| (-c).max(c - d as i64 + 1).max(0)).max().unwrap_or(0);
        let last = qc.iter().zip(&self.dims).map(|(&c, &d)| c.abs().max((c - d as i64 + 1).abs())).max().unwrap_or(0);
        for r in first..=last {
            let lo = qc.map(|c| c - r);
            let hi = qc.map(|c| c + r);
            let clamp = |v: i64, k: usize| v.clamp(0, self.dims[k] as i64 - 1);
            for z in clamp(lo[2], 2)..=clamp(hi[2], 2) {
                for y in clamp(lo[1], 1)..=clamp(hi[1], 1) {
                    for x in clamp(lo[0], 0)..=clamp(hi[0], 0) {
                        let shell = (x - qc[0]).abs().max((y - qc[1]).abs()).max((z - qc[2]).abs());
                        if shell != r {
                            continue;
                        }
                        let c = ((z as usize * self.dims[1]) + y as usize) * self.dims[0] + x as usize;
                        for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
                            let d = (self.points[i] - q).norm();
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
            // every cell outside shell r is at least r cells away
            if best <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Mean absolute component error over bubbles.
pub fn velocity_l1(est: &BTreeMap<u32, Vector3<f64>>, gt: &BTreeMap<u32, Vector3<f64>>) -> Result<f64> {
    if est.keys().ne(gt.keys()) {
        return Err(Error::IdMismatch(format!(
            "estimated ids {:?} vs ground-truth ids {:?}",
            est.keys().collect::<Vec<_>>(),
            gt.keys().collect::<Vec<_>>()
        )));
    }
    if est.is_empty() {
        return Err(Error::EmptyInput("velocity_l1 needs at least one bubble"));
    }
    let total: f64 = est.iter().map(|(k, v)| (v - gt[k]).abs().sum()).sum();
    Ok(total / (3 * est.len()) as f64)
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub frame: usize,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("frame,metric,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.9}\n", r.frame, r.metric, r.value));
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn l1_examples() {
        let z = Image::new(4, 4, 3);
        let o = Image::filled(4, 4, 3, 1.0);
        assert_eq!(image_l1(&z, &z).unwrap(), 0.0);
        assert_eq!(image_l1(&z, &o).unwrap(), 1.0);
        let mut c = Image::new(4, 4, 1);
        let mut ci = Image::new(4, 4, 1);
        for r in 0..4 {
            for k in 0..4 {
                let v = ((r + k) % 2) as f64;
                c.set(k, r, 0, v);
                ci.set(k, r, 0, 1.0 - v);
            }
        }
        assert_eq!(image_l1(&c, &ci).unwrap(), 1.0);
        assert!(matches!(image_l1(&z, &Image::new(3, 4, 3)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, 3, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(8, 8, 3, 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = Image::filled(16, 16, 3, 0.5);
        let noise: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1, 0.2, 0.4] {
            let data = base.data.iter().zip(&noise).map(|(b, n)| b + amp * n).collect();
            let v = psnr(&base, &Image::from_data(16, 16, 3, data).unwrap()).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn ssim_ideals_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 16, 13);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let neg = Image { data: a.data.iter().map(|v| 1.0 - v).collect(), ..a.clone() };
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        let small = Image::new(10, 20, 3);
        assert!(matches!(ssim(&small, &small), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 13, 12);
        let b = random_image(&mut rng, 13, 12);
        let (_, g) = ssim_with_grad(&a, &b).unwrap();
        for k in (0..a.data.len()).step_by(7) {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[k] += 1e-6;
            m.data[k] -= 1e-6;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7, "k={k} fd={fd} an={}", g[k]);
        }
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![Vector3::new(0.0, 0.0, 0.0)];
        let b = vec![Vector3::new(0.0, 3.0, 4.0)];
        assert_eq!(chamfer(&a, &b).unwrap(), 5.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(matches!(chamfer(&a, &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn chamfer_grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<Vector3<f64>> = (0..300).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let b: Vec<Vector3<f64>> =
            (0..200).map(|_| Vector3::new(rng.random::<f64>() * 3.0, rng.random(), rng.random::<f64>() - 1.0)).collect();
        let brute = |x: &[Vector3<f64>], y: &[Vector3<f64>]| {
            x.iter().map(|p| y.iter().map(|q| (q - p).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>()
                / x.len() as f64
        };
        let expected = 0.5 * (brute(&a, &b) + brute(&b, &a));
        assert!((chamfer(&a, &b).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn velocity_l1_examples() {
        let mut gt = BTreeMap::new();
        gt.insert(1, Vector3::zeros());
        let mut est = BTreeMap::new();
        est.insert(1, Vector3::new(0.3, 0.0, 0.0));
        assert!((velocity_l1(&est, &gt).unwrap() - 0.1).abs() < 1e-15);
        est.insert(2, Vector3::zeros());
        assert!(matches!(velocity_l1(&est, &gt), Err(Error::IdMismatch(_))));
        gt.insert(2, Vector3::new(0.0, -0.6, 0.0));
        assert!((velocity_l1(&est, &gt).unwrap() - 0.9 / 6.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 12, 12);
            let b = random_image(&mut rng, 12, 12);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn chamfer_is_symmetric_and_translation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Vector3<f64>> = (0..40).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
            let b: Vec<Vector3<f64>> = (0..30).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
            let d = Vector3::new(0.25, -0.5, 0.125);
            let ab = chamfer(&a, &b).unwrap();
            prop_assert!((ab - chamfer(&b, &a).unwrap()).abs() < 1e-12);
            let at: Vec<_> = a.iter().map(|p| p + d).collect();
            let bt: Vec<_> = b.iter().map(|p| p + d).collect();
            prop_assert!((ab - chamfer(&at, &bt).unwrap()).abs() < 1e-9);
        }
    }
}
