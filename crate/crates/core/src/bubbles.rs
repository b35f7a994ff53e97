//! Bubble instances: cross-view mask association, surfel binding, temporal
//! tracking, weighted centroids, guided advection and velocity estimation.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::CameraModel;
use crate::config::BubbleConfig;
use crate::error::{Error, Result};
use crate::image::{InstanceStats, LabelMask};
use crate::surface::opacity_transform;
use crate::surfel::{BubbleId, Surfel};

/// Bubble id reserved for the nucleation region.
pub const NUCLEATION_ID: u32 = 0;

/// One mask instance seen from one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewInstance {
    pub view: usize,
    pub label: u16,
    pub area: usize,
    /// Centroid in pixels, (col, row).
    pub centroid: (f64, f64),
}

/// Instances grouped across views as one physical bubble, before temporal
/// ids are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGroup {
    pub members: Vec<ViewInstance>,
    pub nucleation: bool,
}

impl InstanceGroup {
    pub fn area(&self) -> usize {
        self.members.iter().map(|m| m.area).sum()
    }
}

/// Per-view label to bubble id mapping for one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskAssociation {
    pub labels: Vec<BTreeMap<u16, u32>>,
}

impl MaskAssociation {
    pub fn bubble(&self, view: usize, label: u16) -> Option<u32> {
        self.labels.get(view).and_then(|m| m.get(&label)).copied()
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.labels.iter().flat_map(|m| m.values().copied()).collect()
    }
}

fn valid_instances(mask: &LabelMask, min_area: usize) -> Vec<InstanceStats> {
    mask.instances().into_iter().filter(|s| s.area >= min_area).collect()
}

/// View with the most valid masks; ties go to the lowest index.
pub fn reference_view(masks: &[LabelMask], min_area: usize) -> Option<usize> {
    let counts: Vec<usize> = masks.iter().map(|m| valid_instances(m, min_area).len()).collect();
    let best = *counts.iter().max()?;
    (best > 0).then(|| counts.iter().position(|&c| c == best).unwrap())
}

fn touches_floor(s: &InstanceStats, height: usize, band: f64) -> bool {
    band > 0.0 && (s.max_row as f64) >= height as f64 * (1.0 - band)
}

/// Group mask instances across views.
///
/// Every valid instance of the reference view starts a group. Instances of
/// the other views join a group when their vertical centroids (relative to
/// the image height) differ by less than `tau_y` and their areas by less
/// than `area_ratio`; candidate pairs are accepted one-to-one in order of
/// vertical gap, then area mismatch. Unmatched instances form their own
/// groups. Instances reaching into the bottom `nucleation_band` of rows
/// belong to the nucleation group.
pub fn group_instances(masks: &[LabelMask], config: &BubbleConfig) -> Vec<InstanceGroup> {
    let Some(reference) = reference_view(masks, config.min_area) else {
        return Vec::new();
    };
    let per_view: Vec<Vec<InstanceStats>> = masks.iter().map(|m| valid_instances(m, config.min_area)).collect();
    let inst = |v: usize, s: &InstanceStats| ViewInstance { view: v, label: s.label, area: s.area, centroid: s.centroid };

    let mut nucleation = InstanceGroup { members: Vec::new(), nucleation: true };
    let mut groups: Vec<InstanceGroup> = Vec::new();
    for s in &per_view[reference] {
        if touches_floor(s, masks[reference].height, config.nucleation_band) {
            nucleation.members.push(inst(reference, s));
        } else {
            groups.push(InstanceGroup { members: vec![inst(reference, s)], nucleation: false });
        }
    }
    let anchors = groups.len();
    for (v, stats) in per_view.iter().enumerate() {
        if v == reference {
            continue;
        }
        let h = masks[v].height as f64;
        let mut rest = Vec::new();
        for s in stats {
            if touches_floor(s, masks[v].height, config.nucleation_band) {
                nucleation.members.push(inst(v, s));
            } else {
                rest.push(s);
            }
        }
        let mut pairs = Vec::new();
        for (k, s) in rest.iter().enumerate() {
            for (g, group) in groups[..anchors].iter().enumerate() {
                let a = &group.members[0];
                let gap = (s.centroid.1 / h - a.centroid.1 / masks[reference].height as f64).abs();
                let ratio = s.area.max(a.area) as f64 / s.area.min(a.area) as f64;
                if gap < config.tau_y && ratio < config.area_ratio {
                    pairs.push((gap, ratio, k, g));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
        let mut used_inst = vec![false; rest.len()];
        let mut used_group = vec![false; anchors];
        for (_, _, k, g) in pairs {
            if !used_inst[k] && !used_group[g] {
                used_inst[k] = true;
                used_group[g] = true;
                groups[g].members.push(inst(v, rest[k]));
            }
        }
        for (k, s) in rest.iter().enumerate() {
            if !used_inst[k] {
                groups.push(InstanceGroup { members: vec![inst(v, s)], nucleation: false });
            }
        }
    }
    if !nucleation.members.is_empty() {
        groups.insert(0, nucleation);
    }
    groups
}

/// Cross-view association for a single frame with ids numbered from 1 in
/// group order (0 for nucleation).
pub fn associate_masks(masks: &[LabelMask], config: &BubbleConfig) -> MaskAssociation {
    let groups = group_instances(masks, config);
    let mut ids = Vec::new();
    let mut next = 1;
    for g in &groups {
        if g.nucleation {
            ids.push(NUCLEATION_ID);
        } else {
            ids.push(next);
            next += 1;
        }
    }
    association_from(masks.len(), &groups, &ids)
}

fn association_from(views: usize, groups: &[InstanceGroup], ids: &[u32]) -> MaskAssociation {
    let mut labels = vec![BTreeMap::new(); views];
    for (g, &id) in groups.iter().zip(ids) {
        for m in &g.members {
            labels[m.view].insert(m.label, id);
        }
    }
    MaskAssociation { labels }
}

/// Frame-to-frame identity of bubble groups.
///
/// Each previous track claims the nearest current group within
/// `max_jump · H` pixels (mean centroid distance over shared views). A group
/// claimed by several tracks (a merge) keeps the id of the largest parent;
/// unclaimed groups (new bubbles, split-off parts) get fresh ids.
#[derive(Debug, Clone, Default)]
pub struct BubbleTracker {
    tracks: BTreeMap<u32, InstanceGroup>,
    next_id: u32,
}

impl BubbleTracker {
    pub fn new() -> Self {
        Self { tracks: BTreeMap::new(), next_id: 1 }
    }

    fn distance(a: &InstanceGroup, b: &InstanceGroup) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0;
        for ma in &a.members {
            for mb in b.members.iter().filter(|m| m.view == ma.view) {
                sum += (ma.centroid.0 - mb.centroid.0).hypot(ma.centroid.1 - mb.centroid.1);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Associate the masks of the next frame and attach persistent ids.
    pub fn update(&mut self, masks: &[LabelMask], config: &BubbleConfig) -> MaskAssociation {
        let groups = group_instances(masks, config);
        let height = masks.iter().map(|m| m.height).max().unwrap_or(0) as f64;
        let max_jump = config.max_jump * height;

        let mut claims: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for (&id, prev) in &self.tracks {
            let mut best: Option<(f64, usize)> = None;
            for (g, group) in groups.iter().enumerate() {
                if group.nucleation {
                    continue;
                }
                if let Some(d) = Self::distance(prev, group) {
                    if d <= max_jump && best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, g));
                    }
                }
            }
            if let Some((_, g)) = best {
                claims.entry(g).or_default().push(id);
            }
        }
        let mut ids = Vec::with_capacity(groups.len());
        for (g, group) in groups.iter().enumerate() {
            if group.nucleation {
                ids.push(NUCLEATION_ID);
                continue;
            }
            let id = match claims.get(&g) {
                Some(parents) => *parents
                    .iter()
                    .max_by(|a, b| self.tracks[a].area().cmp(&self.tracks[b].area()).then(b.cmp(a)))
                    .unwrap(),
                None => {
                    let id = self.next_id;
                    self.next_id += 1;
                    id
                }
            };
            ids.push(id);
        }
        self.tracks = groups
            .iter()
            .zip(&ids)
            .filter(|(g, _)| !g.nucleation)
            .map(|(g, &id)| (id, g.clone()))
            .collect();
        association_from(masks.len(), &groups, &ids)
    }
}

/// Assign bubble ids to surfels by projecting them into the masks.
///
/// Views are visited in order of decreasing valid-mask count; a surfel takes
/// the id of the first mask its center falls in and is skipped by later
/// views. Surfels that already carry an id keep it.
pub fn bind_surfels(
    surfels: &mut [Surfel],
    masks: &[LabelMask],
    cameras: &[CameraModel],
    association: &MaskAssociation,
    min_area: usize,
) {
    let mut order: Vec<(usize, usize)> =
        masks.iter().enumerate().map(|(v, m)| (valid_instances(m, min_area).len(), v)).collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, v) in order {
        let valid: BTreeSet<u16> = valid_instances(&masks[v], min_area).iter().map(|s| s.label).collect();
        let cam = &cameras[v];
        surfels.par_iter_mut().filter(|s| !s.bubble.is_assigned()).for_each(|s| {
            let Ok((px, _)) = cam.project(&s.position) else { return };
            let Some((col, row)) = cam.pixel_index(&px) else { return };
            let label = masks[v].get(col, row);
            if label != 0 && valid.contains(&label) {
                if let Some(id) = association.bubble(v, label) {
                    s.bubble = BubbleId::Id(id);
                }
            }
        });
    }
}

/// Clear every binding.
pub fn unbind(surfels: &mut [Surfel]) {
    for s in surfels {
        s.bubble = BubbleId::Unassigned;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Centroid weight of a surfel: sigmoid of its opacity times its area.
pub fn centroid_weight(s: &Surfel, gamma: f64) -> f64 {
    sigmoid(opacity_transform(s.sdf, gamma)) * s.scale.x * s.scale.y
}

/// Weighted centroid of the surfels bound to `bubble`, using the bindings
/// in `bindings` (which may come from another frame with the same surfel
/// identities).
pub fn bubble_centroid_with(surfels: &[Surfel], bindings: &[BubbleId], gamma: f64, bubble: u32) -> Result<Vector3<f64>> {
    let mut num = Vector3::zeros();
    let mut den = 0.0;
    for (s, b) in surfels.iter().zip(bindings) {
        if *b == BubbleId::Id(bubble) {
            let w = centroid_weight(s, gamma);
            num += s.position * w;
            den += w;
        }
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(Error::EmptyBubble(bubble))
    }
}

pub fn bubble_centroid(surfels: &[Surfel], gamma: f64, bubble: u32) -> Result<Vector3<f64>> {
    let bindings: Vec<BubbleId> = surfels.iter().map(|s| s.bubble).collect();
    bubble_centroid_with(surfels, &bindings, gamma, bubble)
}

/// Centroids of every bound bubble id (nucleation included).
pub fn bubble_centroids_with(surfels: &[Surfel], bindings: &[BubbleId], gamma: f64) -> BTreeMap<u32, Vector3<f64>> {
    let ids: BTreeSet<u32> = bindings.iter().filter_map(|b| b.id()).collect();
    ids.into_iter().filter_map(|id| bubble_centroid_with(surfels, bindings, gamma, id).ok().map(|c| (id, c))).collect()
}

/// Finite-difference bubble velocity from the two most recent centroids.
pub fn bubble_velocity(c_prev2: &Vector3<f64>, c_prev1: &Vector3<f64>, dt: f64) -> Vector3<f64> {
    (c_prev1 - c_prev2) / dt
}

/// Initial velocity used before two centroids exist.
pub fn initial_velocity(bubble: u32, config: &BubbleConfig) -> Vector3<f64> {
    if bubble == NUCLEATION_ID {
        Vector3::from(config.initial_velocity_nucleation)
    } else {
        Vector3::from(config.initial_velocity_bubble)
    }
}

/// Per-bubble guidance velocities for advecting frame `t - 1` to `t`.
///
/// `history` holds the surfel sets of frames `0..t` (same identities);
/// bindings of frame `t - 1` are applied to both `t - 1` and `t - 2` so the
/// centroids difference the same surfels. Before two frames exist, or for a
/// bubble without surfels, the configured initial velocity is used.
pub fn guidance_velocities(history: &[Vec<Surfel>], gamma: f64, dt: f64, config: &BubbleConfig) -> BTreeMap<u32, Vector3<f64>> {
    let Some(last) = history.last() else {
        return BTreeMap::new();
    };
    let bindings: Vec<BubbleId> = last.iter().map(|s| s.bubble).collect();
    let ids: BTreeSet<u32> = bindings.iter().filter_map(|b| b.id()).collect();
    ids.into_iter()
        .map(|id| {
            let v = if history.len() >= 2 {
                let prev = &history[history.len() - 2];
                match (bubble_centroid_with(prev, &bindings, gamma, id), bubble_centroid_with(last, &bindings, gamma, id)) {
                    (Ok(a), Ok(b)) => bubble_velocity(&a, &b, dt),
                    _ => initial_velocity(id, config),
                }
            } else {
                initial_velocity(id, config)
            };
            (id, v)
        })
        .collect()
}

/// Per-surfel velocity of the latest frame in `history`, or the nucleation
/// initial velocity when only one frame exists.
pub fn last_surfel_velocities(history: &[Vec<Surfel>], dt: f64, config: &BubbleConfig) -> Vec<Vector3<f64>> {
    match history {
        [] => Vec::new(),
        [only] => vec![Vector3::from(config.initial_velocity_nucleation); only.len()],
        [.., a, b] => a.iter().zip(b).map(|(p, q)| (q.position - p.position) / dt).collect(),
    }
}

/// Initialize frame `t` by moving every surfel of frame `t - 1`: bound
/// bubbles by their bubble velocity, nucleation surfels by their own
/// previous velocity, unassigned surfels not at all. Everything except the
/// position is copied unchanged.
pub fn advect(
    surfels: &[Surfel],
    bubble_velocities: &BTreeMap<u32, Vector3<f64>>,
    surfel_velocities: &[Vector3<f64>],
    dt: f64,
) -> Vec<Surfel> {
    surfels
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let v = match s.bubble {
                BubbleId::Id(NUCLEATION_ID) => surfel_velocities.get(i).copied().unwrap_or_else(Vector3::zeros),
                BubbleId::Id(b) => bubble_velocities.get(&b).copied().unwrap_or_else(Vector3::zeros),
                BubbleId::Unassigned => Vector3::zeros(),
            };
            let mut out = s.clone();
            out.position = s.position + v * dt;
            out
        })
        .collect()
}

/// Velocities recovered from a reconstructed sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VelocityEstimate {
    /// `surfel[t][i]` for t >= 1; index 0 is all zeros.
    pub surfel: Vec<Vec<Vector3<f64>>>,
    /// Per frame t >= 1, per bubble id bound at t.
    pub bubble: BTreeMap<usize, BTreeMap<u32, Vector3<f64>>>,
}

/// Surfel and bubble velocities by finite differences between consecutive
/// frames. Bubble centroids at `t - 1` use the bindings of frame `t`.
pub fn estimate_velocities(frames: &[Vec<Surfel>], gamma: f64, dt: f64) -> Result<VelocityEstimate> {
    if frames.len() < 2 {
        return Err(Error::FrameMismatch("velocity estimation needs at least two frames".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let mut out = VelocityEstimate { surfel: vec![vec![Vector3::zeros(); frames[0].len()]], bubble: BTreeMap::new() };
    for t in 1..frames.len() {
        let (a, b) = (&frames[t - 1], &frames[t]);
        if a.len() != b.len() {
            return Err(Error::FrameMismatch(format!("frame {} has {} surfels, frame {t} has {}", t - 1, a.len(), b.len())));
        }
        out.surfel.push(a.iter().zip(b).map(|(p, q)| (q.position - p.position) / dt).collect());
        let bindings: Vec<BubbleId> = b.iter().map(|s| s.bubble).collect();
        let now = bubble_centroids_with(b, &bindings, gamma);
        let before = bubble_centroids_with(a, &bindings, gamma);
        let row: BTreeMap<u32, Vector3<f64>> =
            now.iter().filter_map(|(id, c)| before.get(id).map(|p| (*id, bubble_velocity(p, c, dt)))).collect();
        out.bubble.insert(t, row);
    }
    Ok(out)
}

/// Greedy one-to-one matching of estimated bubble ids to reference ids by
/// centroid distance (closest pairs first, at most `max_distance` apart).
pub fn match_by_centroid(
    estimated: &BTreeMap<u32, Vector3<f64>>,
    reference: &BTreeMap<u32, Vector3<f64>>,
    max_distance: f64,
) -> BTreeMap<u32, u32> {
    let mut pairs: Vec<(f64, u32, u32)> = estimated
        .iter()
        .flat_map(|(e, ce)| reference.iter().map(move |(r, cr)| ((ce - cr).norm(), *e, *r)))
        .filter(|p| p.0 <= max_distance)
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = BTreeSet::new();
    let mut used_r = BTreeSet::new();
    let mut out = BTreeMap::new();
    for (_, e, r) in pairs {
        if !used_e.contains(&e) && !used_r.contains(&r) {
            used_e.insert(e);
            used_r.insert(r);
            out.insert(e, r);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Vector2, Vector4};
    use proptest::prelude::*;

    fn surfel(p: [f64; 3]) -> Surfel {
        Surfel::new(Vector3::from(p), Vector2::new(0.01, 0.02), Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::new(0.5, 0.5, 0.5), 0.0)
            .unwrap()
    }

    fn disk(mask: &mut LabelMask, cx: f64, cy: f64, r: f64, label: u16) {
        for row in 0..mask.height {
            for col in 0..mask.width {
                if (col as f64 - cx).hypot(row as f64 - cy) <= r {
                    mask.set(col, row, label);
                }
            }
        }
    }

    fn camera(id: &str, x: f64) -> CameraModel {
        CameraModel::look_at(id, [40.0, 40.0, 31.5, 31.5], (64, 64), Vector3::new(x, 0.0, -2.0), Vector3::zeros(), Vector3::y())
            .unwrap()
    }

    fn config() -> BubbleConfig {
        BubbleConfig { min_area: 5, ..BubbleConfig::default() }
    }

    #[test]
    fn identical_layouts_map_identically() {
        let mut m = LabelMask::new(64, 64);
        disk(&mut m, 20.0, 15.0, 5.0, 1);
        disk(&mut m, 40.0, 35.0, 6.0, 2);
        let a = associate_masks(&[m.clone(), m], &config());
        assert_eq!(a.labels[0], a.labels[1]);
        assert_eq!(a.ids().len(), 2);
    }

    #[test]
    fn permuted_labels_follow_height() {
        let mut m0 = LabelMask::new(64, 64);
        disk(&mut m0, 20.0, 15.0, 5.0, 1);
        disk(&mut m0, 40.0, 35.0, 6.0, 2);
        let mut m1 = LabelMask::new(64, 64);
        disk(&mut m1, 25.0, 15.5, 5.0, 2);
        disk(&mut m1, 38.0, 35.0, 6.0, 1);
        let a = associate_masks(&[m0, m1], &config());
        assert_eq!(a.bubble(0, 1), a.bubble(1, 2));
        assert_eq!(a.bubble(0, 2), a.bubble(1, 1));
    }

    #[test]
    fn unmatched_instance_keeps_own_id() {
        let mut m0 = LabelMask::new(64, 64);
        disk(&mut m0, 20.0, 15.0, 5.0, 1);
        disk(&mut m0, 40.0, 35.0, 6.0, 2);
        let mut m1 = LabelMask::new(64, 64);
        disk(&mut m1, 20.0, 15.0, 5.0, 1);
        let a = associate_masks(&[m1, m0], &config());
        assert_eq!(a.ids().len(), 2);
        let only = a.bubble(1, 2).unwrap();
        assert!(a.labels[0].values().all(|&id| id != only));
    }

    #[test]
    fn floor_band_is_nucleation() {
        let mut m = LabelMask::new(64, 64);
        disk(&mut m, 30.0, 62.0, 4.0, 3);
        disk(&mut m, 30.0, 20.0, 4.0, 1);
        let a = associate_masks(&[m], &config());
        assert_eq!(a.bubble(0, 3), Some(NUCLEATION_ID));
        assert_eq!(a.bubble(0, 1), Some(1));
    }

    #[test]
    fn tracker_keeps_ids_and_larger_parent_wins_merge() {
        let cfg = config();
        let mut tr = BubbleTracker::new();
        let mut m = LabelMask::new(64, 64);
        disk(&mut m, 20.0, 30.0, 4.0, 1);
        disk(&mut m, 32.0, 30.0, 6.0, 2);
        let a0 = tr.update(&[m], &cfg);
        let (small, big) = (a0.bubble(0, 1).unwrap(), a0.bubble(0, 2).unwrap());
        let mut m = LabelMask::new(64, 64);
        disk(&mut m, 31.0, 28.0, 6.0, 5);
        disk(&mut m, 10.0, 10.0, 3.0, 1);
        let a1 = tr.update(&[m], &cfg);
        assert_eq!(a1.bubble(0, 5), Some(big));
        let fresh = a1.bubble(0, 1).unwrap();
        assert!(fresh != small && fresh != big);
    }

    #[test]
    fn binding_single_view_and_outside() {
        let cam = camera("c", 0.0);
        let mut m = LabelMask::new(64, 64);
        disk(&mut m, 31.5, 31.5, 10.0, 1);
        let a = associate_masks(std::slice::from_ref(&m), &config());
        let mut s = vec![surfel([0.0, 0.0, 0.0]), surfel([0.05, 0.0, 0.0]), surfel([1.0, 1.0, 0.0])];
        bind_surfels(&mut s, &[m.clone()], &[cam.clone()], &a, 5);
        assert_eq!(s[0].bubble, BubbleId::Id(1));
        assert_eq!(s[1].bubble, BubbleId::Id(1));
        assert_eq!(s[2].bubble, BubbleId::Unassigned);
        let before = s.clone();
        bind_surfels(&mut s, &[m], &[cam], &a, 5);
        assert_eq!(s, before);
    }

    #[test]
    fn view_with_more_masks_binds_first() {
        let (c0, c1) = (camera("a", 0.0), camera("b", 0.0));
        let mut m0 = LabelMask::new(64, 64);
        disk(&mut m0, 31.5, 31.5, 8.0, 1);
        let mut m1 = LabelMask::new(64, 64);
        disk(&mut m1, 31.5, 31.5, 8.0, 1);
        disk(&mut m1, 10.0, 10.0, 4.0, 2);
        let assoc = MaskAssociation { labels: vec![BTreeMap::from([(1, 7)]), BTreeMap::from([(1, 9), (2, 4)])] };
        let mut s = vec![surfel([0.0, 0.0, 0.0])];
        bind_surfels(&mut s, &[m0, m1], &[c0, c1], &assoc, 5);
        assert_eq!(s[0].bubble, BubbleId::Id(9));
    }

    #[test]
    fn centroid_examples() {
        let mut s = vec![surfel([0.0, 0.0, 0.0]), surfel([2.0, 0.0, 0.0])];
        for x in &mut s {
            x.bubble = BubbleId::Id(1);
        }
        assert_eq!(bubble_centroid(&s, 50.0, 1).unwrap(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(bubble_centroid(&s[..1], 50.0, 1).unwrap(), Vector3::zeros());
        assert!(matches!(bubble_centroid(&s, 50.0, 2), Err(Error::EmptyBubble(2))));

        s[1].sdf = 0.02;
        s[1].scale = Vector2::new(0.03, 0.01);
        let w0 = 1.0 / (1.0 + (-1.0f64).exp()) * 0.01 * 0.02;
        let o1 = opacity_transform(0.02, 50.0);
        let w1 = 1.0 / (1.0 + (-o1).exp()) * 0.03 * 0.01;
        let expected = 2.0 * w1 / (w0 + w1);
        assert!((bubble_centroid(&s, 50.0, 1).unwrap().x - expected).abs() < 1e-15);
    }

    #[test]
    fn velocity_examples() {
        let c = Vector3::new(0.3, 0.2, 0.1);
        assert_eq!(bubble_velocity(&c, &c, 0.1), Vector3::zeros());
        let v = bubble_velocity(&Vector3::zeros(), &Vector3::new(0.0, 0.01, 0.0), 5e-4);
        assert!((v - Vector3::new(0.0, 20.0, 0.0)).norm() < 1e-12);
        let cfg = BubbleConfig::default();
        let mut s = vec![surfel([0.0; 3]), surfel([0.0; 3])];
        s[0].bubble = BubbleId::Id(0);
        s[1].bubble = BubbleId::Id(3);
        let g = guidance_velocities(&[s], 50.0, 0.1, &cfg);
        assert_eq!(g[&0], Vector3::new(0.03, 0.03, 0.0));
        assert_eq!(g[&3], Vector3::new(0.07, 0.3, 0.0));
    }

    #[test]
    fn advect_examples() {
        let mut s = vec![surfel([1.0, 1.0, 1.0]), surfel([0.0; 3]), surfel([5.0; 3])];
        s[0].bubble = BubbleId::Id(2);
        s[1].bubble = BubbleId::Id(0);
        let vb = BTreeMap::from([(2, Vector3::new(0.0, 2.0, 0.0))]);
        let vs = vec![Vector3::zeros(), Vector3::new(0.1, 0.0, 0.0), Vector3::new(9.0, 9.0, 9.0)];
        let out = advect(&s, &vb, &vs, 0.5);
        assert_eq!(out[0].position, Vector3::new(1.0, 2.0, 1.0));
        let out = advect(&s, &vb, &vs, 0.1);
        assert!((out[1].position - Vector3::new(0.01, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(out[2].position, s[2].position);
        let still = advect(&s, &BTreeMap::from([(2, Vector3::zeros())]), &[Vector3::zeros(); 3], 0.5);
        assert_eq!(still, s);
    }

    #[test]
    fn static_sequence_has_zero_velocity() {
        let mut s = vec![surfel([0.1, 0.2, 0.3]), surfel([0.0, 0.1, 0.0])];
        s[0].bubble = BubbleId::Id(1);
        let est = estimate_velocities(&[s.clone(), s.clone(), s], 50.0, 0.05).unwrap();
        assert!(est.surfel.iter().flatten().all(|v| *v == Vector3::zeros()));
        assert_eq!(est.bubble[&2][&1], Vector3::zeros());
    }

    #[test]
    fn frame_count_mismatch() {
        let a = vec![surfel([0.0; 3])];
        assert!(matches!(estimate_velocities(&[a.clone(), vec![]], 50.0, 0.1), Err(Error::FrameMismatch(_))));
        assert!(matches!(estimate_velocities(&[a], 50.0, 0.1), Err(Error::FrameMismatch(_))));
    }

    #[test]
    fn matching_prefers_closest_pairs() {
        let est = BTreeMap::from([(5, Vector3::new(0.0, 0.0, 0.0)), (6, Vector3::new(1.0, 0.0, 0.0))]);
        let gt = BTreeMap::from([(1, Vector3::new(0.9, 0.0, 0.0)), (2, Vector3::new(0.1, 0.0, 0.0))]);
        assert_eq!(match_by_centroid(&est, &gt, 0.5), BTreeMap::from([(5, 2), (6, 1)]));
        assert!(match_by_centroid(&est, &gt, 0.01).is_empty());
    }

    proptest! {
        #[test]
        fn centroid_translation_equivariant(
            pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -0.05f64..0.05), 1..20),
            d in (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
        ) {
            let delta = Vector3::new(d.0, d.1, d.2);
            let s: Vec<Surfel> = pts.iter().map(|p| {
                let mut x = surfel([p.0, p.1, p.2]);
                x.sdf = p.3;
                x.bubble = BubbleId::Id(4);
                x
            }).collect();
            let moved: Vec<Surfel> = s.iter().map(|x| { let mut y = x.clone(); y.position += delta; y }).collect();
            let c0 = bubble_centroid(&s, 30.0, 4).unwrap();
            let c1 = bubble_centroid(&moved, 30.0, 4).unwrap();
            prop_assert!((c1 - c0 - delta).norm() < 1e-12);
        }

        #[test]
        fn advect_preserves_other_attributes(v in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), dt in 1e-4f64..1.0) {
            let mut s = vec![surfel([0.1, 0.2, 0.3]), surfel([0.5, 0.5, 0.5])];
            s[0].bubble = BubbleId::Id(1);
            s[1].sdf = 0.01;
            let out = advect(&s, &BTreeMap::from([(1, Vector3::new(v.0, v.1, v.2))]), &[], dt);
            for (a, b) in s.iter().zip(&out) {
                prop_assert_eq!(a.scale, b.scale);
                prop_assert_eq!(a.rotation, b.rotation);
                prop_assert_eq!(a.color, b.color);
                prop_assert_eq!(a.sdf.to_bits(), b.sdf.to_bits());
                prop_assert_eq!(a.bubble, b.bubble);
            }
        }
    }
}
