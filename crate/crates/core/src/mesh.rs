//! Volumetric SDF assembly from surfels and marching-cubes extraction.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::bubbles::bubble_centroids_with;
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::io::write_bytes;
use crate::mc_table::TRIANGLES;
use crate::surface::opacity_transform;
use crate::surfel::{BubbleId, Surfel};

/// Neighbours blended per field sample.
pub const FIELD_NEIGHBORS: usize = 8;
/// Below this many surfels the neighbour search is a linear scan.
pub const BRUTE_FORCE_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        if !(0..3).all(|k| max[k] > min[k]) || !min.iter().chain(max.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(format!("degenerate bounds {min:?} .. {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Some(Self { min: lo, max: hi })
    }

    /// Grow every side by `fraction` of the extent (at least `floor`).
    pub fn inflated(&self, fraction: f64, floor: f64) -> Self {
        let pad = (self.max - self.min).map(|e| (e * fraction).max(floor));
        Self { min: self.min - pad, max: self.max + pad }
    }
}

/// Samples of a scalar field on a regular lattice, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub dims: [usize; 3],
    pub origin: Vector3<f64>,
    pub spacing: Vector3<f64>,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64).component_mul(&self.spacing)
    }

    /// Lattice with `resolution` samples per axis spanning `bounds`.
    pub fn sample(bounds: &Aabb, resolution: usize, f: impl Fn(&Vector3<f64>) -> f64 + Sync) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidConfig("grid resolution must be at least 2".into()));
        }
        let spacing = (bounds.max - bounds.min) / (resolution - 1) as f64;
        let mut grid = Self { dims: [resolution; 3], origin: bounds.min, spacing, values: Vec::new() };
        let n = resolution;
        grid.values = (0..n * n * n)
            .into_par_iter()
            .map(|idx| {
                let (i, j, k) = (idx % n, (idx / n) % n, idx / (n * n));
                f(&grid.point(i, j, k))
            })
            .collect();
        Ok(grid)
    }
}

/// Uniform hash grid over surfel centers for k-nearest queries.
pub struct SurfelIndex<'a> {
    points: Vec<Vector3<f64>>,
    surfels: &'a [Surfel],
    cell: f64,
    origin: Vector3<f64>,
    dims: [i64; 3],
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> SurfelIndex<'a> {
    pub fn new(surfels: &'a [Surfel], cell: f64) -> Self {
        let points: Vec<Vector3<f64>> = surfels.iter().map(|s| s.position).collect();
        let bb = Aabb::from_points(&points).unwrap_or(Aabb { min: Vector3::zeros(), max: Vector3::zeros() });
        let cell = if cell > 0.0 && cell.is_finite() { cell } else { 1.0 };
        let dims = [0, 1, 2].map(|k| ((bb.max[k] - bb.min[k]) / cell).floor() as i64 + 1);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            let key = [0, 1, 2].map(|k| ((p[k] - bb.min[k]) / cell).floor() as i64);
            cells.entry(key).or_default().push(i);
        }
        Self { points, surfels, cell, origin: bb.min, dims, cells }
    }

    /// The `k` nearest surfels as `(squared distance, index)`, ascending,
    /// ties by index.
    pub fn nearest(&self, q: &Vector3<f64>, k: usize) -> Vec<(f64, usize)> {
        if self.surfels.len() < BRUTE_FORCE_LIMIT {
            return brute_force_nearest(&self.points, q, k);
        }
        let c = [0, 1, 2].map(|a| ((q[a] - self.origin[a]) / self.cell).floor() as i64);
        let max_ring = (0..3).map(|a| c[a].abs().max((self.dims[a] - 1 - c[a]).abs())).max().unwrap() + 1;
        let mut found: Vec<(f64, usize)> = Vec::new();
        for r in 0..=max_ring {
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            found.extend(ids.iter().map(|&i| ((self.points[i] - q).norm_squared(), i)));
                        }
                    }
                }
            }
            if found.len() >= k {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let reach = r as f64 * self.cell;
                if found[k - 1].0 <= reach * reach {
                    found.truncate(k);
                    return found;
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(k);
        found
    }
}

pub fn brute_force_nearest(points: &[Vector3<f64>], q: &Vector3<f64>, k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

/// Blend bandwidth: twice the mean surfel scale.
pub fn field_bandwidth(surfels: &[Surfel]) -> f64 {
    let sum: f64 = surfels.iter().map(|s| s.scale.x + s.scale.y).sum();
    sum / surfels.len().max(1) as f64
}

/// Plane-extended SDF of a surfel set at one point: the Gaussian-weighted
/// mean of `f_k + n_k . (x - mu_k)` over the nearest surfels. Beyond `4h`
/// from every surfel the value saturates to `+h`, or `-h` where the blend
/// (or, once the weights underflow, the nearest plane) says inside.
pub fn field_value(index: &SurfelIndex, h: f64, x: &Vector3<f64>) -> f64 {
    let near = index.nearest(x, FIELD_NEIGHBORS);
    let far = match near.first() {
        None => return h,
        Some(&(d2, _)) => d2 > 16.0 * h * h,
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for &(d2, i) in &near {
        let s = &index.surfels[i];
        let w = (-d2 / (2.0 * h * h)).exp();
        num += w * (s.sdf + s.normal().dot(&(x - s.position)));
        den += w;
    }
    if far || den <= 0.0 {
        // Far samples keep only the sign of the blend, so the hollow inside
        // of a large closed shell stays inside instead of growing a second
        // surface.
        let s = &index.surfels[near[0].1];
        let nearest = s.sdf + s.normal().dot(&(x - s.position));
        let side = if den > 0.0 { num } else { nearest };
        return if side < 0.0 { -h } else { h };
    }
    num / den
}

/// Sample the surfel SDF on a `resolution`^3 lattice over `bounds`, using
/// only surfels at least `min_opacity` opaque.
pub fn sdf_field(surfels: &[Surfel], gamma: f64, bounds: &Aabb, resolution: usize, min_opacity: f64) -> Result<ScalarGrid> {
    if resolution < 8 {
        return Err(Error::InvalidConfig(format!("grid resolution must be at least 8, got {resolution}")));
    }
    let used: Vec<Surfel> = surfels.iter().filter(|s| opacity_transform(s.sdf, gamma) >= min_opacity).cloned().collect();
    if used.is_empty() {
        return Err(Error::NoSurfels);
    }
    let h = field_bandwidth(&used);
    let index = SurfelIndex::new(&used, 4.0 * h);
    ScalarGrid::sample(bounds, resolution, |x| field_value(&index, h, x))
}

/// Default extraction box: the surfel bounding box grown by 10% per side.
pub fn default_bounds(surfels: &[Surfel]) -> Result<Aabb> {
    let bb = Aabb::from_points(surfels.iter().map(|s| &s.position)).ok_or(Error::NoSurfels)?;
    let h = field_bandwidth(surfels);
    Ok(bb.inflated(0.1, 2.0 * h))
}

/// Flip surfels so their normals point outwards: away from their bubble's
/// centroid when bound, towards the mean camera center otherwise.
pub fn orient_outward(surfels: &[Surfel], gamma: f64, cameras: &[CameraModel]) -> Vec<Surfel> {
    let bindings: Vec<BubbleId> = surfels.iter().map(|s| s.bubble).collect();
    let centroids = bubble_centroids_with(surfels, &bindings, gamma);
    let eye = if cameras.is_empty() {
        None
    } else {
        Some(cameras.iter().map(|c| c.center()).sum::<Vector3<f64>>() / cameras.len() as f64)
    };
    surfels
        .iter()
        .map(|s| {
            let mut s = s.clone();
            let outward = match s.bubble.id().and_then(|b| centroids.get(&b)) {
                Some(c) => Some(s.position - c),
                None => eye.map(|e| e - s.position),
            };
            if let Some(d) = outward {
                if s.normal().dot(&d) < 0.0 {
                    s.flip_orientation();
                }
            }
            s
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Signed enclosed volume (positive when faces wind outwards).
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i as usize]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::with_capacity(self.vertices.len() * 40 + self.faces.len() * 24);
        for v in &self.vertices {
            out.push_str(&format!("v {:.9} {:.9} {:.9}\n", v.x, v.y, v.z));
        }
        for f in &self.faces {
            out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
        }
        out
    }

    /// Binary little-endian PLY with double vertices and int faces.
    pub fn to_ply(&self) -> Vec<u8> {
        let header = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.faces.len()
        );
        let mut out = header.into_bytes();
        for v in &self.vertices {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for f in &self.faces {
            out.push(3);
            for i in f {
                out.extend_from_slice(&(*i as i32).to_le_bytes());
            }
        }
        out
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_obj().as_bytes())
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_ply())
    }
}

const CORNERS: [[usize; 3]; 8] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
const EDGES: [[usize; 2]; 12] = [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];

/// Lattice edge id: lower endpoint index times three plus the axis.
fn edge_key(grid: &ScalarGrid, cell: [usize; 3], edge: usize) -> u64 {
    let [a, b] = EDGES[edge];
    let (ca, cb) = (CORNERS[a], CORNERS[b]);
    let axis = (0..3).find(|&k| ca[k] != cb[k]).unwrap();
    let lo = [0, 1, 2].map(|k| cell[k] + ca[k].min(cb[k]));
    grid.index(lo[0], lo[1], lo[2]) as u64 * 3 + axis as u64
}

fn edge_vertex(grid: &ScalarGrid, key: u64, iso: f64) -> Vector3<f64> {
    let axis = (key % 3) as usize;
    let p = (key / 3) as usize;
    let (nx, ny) = (grid.dims[0], grid.dims[1]);
    let (i, j, k) = (p % nx, (p / nx) % ny, p / (nx * ny));
    let mut q = [i, j, k];
    q[axis] += 1;
    let (v1, v2) = (grid.values[p], grid.values[grid.index(q[0], q[1], q[2])]);
    let t = (iso - v1) / (v2 - v1);
    let (a, b) = (grid.point(i, j, k), grid.point(q[0], q[1], q[2]));
    a + (b - a) * t
}

/// Extract the `iso` level set. Corners below `iso` count as inside; faces
/// wind so their normals point towards larger values. A cube and its
/// complement share one table row (with opposite winding), so negating the
/// field reproduces the vertices and reverses every face.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> Result<TriangleMesh> {
    if grid.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("scalar grid contains non-finite values".into()));
    }
    let [nx, ny, nz] = grid.dims;
    if nx < 2 || ny < 2 || nz < 2 {
        return Ok(TriangleMesh::default());
    }
    let slabs: Vec<Vec<([u64; 3], bool)>> = (0..nz - 1)
        .into_par_iter()
        .map(|k| {
            let mut tris = Vec::new();
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let mut idx = 0usize;
                    for (c, off) in CORNERS.iter().enumerate() {
                        if grid.values[grid.index(i + off[0], j + off[1], k + off[2])] < iso {
                            idx |= 1 << c;
                        }
                    }
                    if idx == 0 || idx == 255 {
                        continue;
                    }
                    let (row, flip) = if idx & 0x80 != 0 { (255 - idx, true) } else { (idx, false) };
                    let entry = &TRIANGLES[row];
                    let mut t = 0;
                    while t + 2 < 16 && entry[t] >= 0 {
                        let e = [entry[t], entry[t + 1], entry[t + 2]].map(|x| edge_key(grid, [i, j, k], x as usize));
                        tris.push((e, flip));
                        t += 3;
                    }
                }
            }
            tris
        })
        .collect();
    let mut ids: HashMap<u64, u32> = HashMap::new();
    let mut mesh = TriangleMesh::default();
    for (tri, flip) in slabs.into_iter().flatten() {
        // ids follow table order so that winding never changes numbering
        let f = tri.map(|key| {
            *ids.entry(key).or_insert_with(|| {
                mesh.vertices.push(edge_vertex(grid, key, iso));
                (mesh.vertices.len() - 1) as u32
            })
        });
        if f[0] != f[1] && f[1] != f[2] && f[0] != f[2] {
            mesh.faces.push(if flip { f } else { [f[0], f[2], f[1]] });
        }
    }
    Ok(mesh)
}
