//! Principal-axis lifecycle: creation by mean shift over line directions,
//! soft line–axis association, and post-optimization update/deletion.
//!
//! Line directions carry no sign, so every comparison here works on the
//! projective sphere: `d` and `-d` name the same axis.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    canonical_sign, direction_from_latlong, latlong_from_direction, line_angle, AxisDirection,
    Vec3,
};
use crate::ids::{AxisId, LineId};

/// Candidate axes closer than this to an existing axis are discarded, and
/// adjacent axes closer than this are merged.
pub const MERGE_ANGLE_DEG: f64 = 10.0;
/// Non-structural / structural line ratio that must be exceeded before a new
/// axis is created.
pub const UNSTRUCTURED_RATIO: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalAxis {
    pub id: AxisId,
    pub dir: AxisDirection,
    /// Direction at creation or at the last accepted update (unit).
    pub prior_dir: [f64; 3],
    pub change_count: u32,
    #[serde(default)]
    pub member_lines: BTreeMap<LineId, f64>,
}

impl PrincipalAxis {
    pub fn new(id: AxisId, direction: &Vec3) -> Result<Self> {
        let d = direction.try_normalize(0.0).ok_or(Error::InvalidDirection)?;
        Ok(PrincipalAxis {
            id,
            dir: latlong_from_direction(&d)?,
            prior_dir: d.into(),
            change_count: 0,
            member_lines: BTreeMap::new(),
        })
    }

    pub fn direction(&self) -> Vec3 {
        direction_from_latlong(&self.dir)
    }

    pub fn prior(&self) -> Vec3 {
        Vec3::from(self.prior_dir)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanShiftConfig {
    /// Neighborhood half-angle in degrees.
    pub bandwidth_deg: f64,
    /// Kernel sharpness `c` in `exp(-c·angle²)`, angle in degrees.
    pub kernel_c: f64,
    pub max_iters: usize,
    pub convergence_deg: f64,
    /// Modes closer than this collapse into one.
    pub merge_deg: f64,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        MeanShiftConfig {
            bandwidth_deg: 15.0,
            kernel_c: 1.0 / (2.0 * 5.0 * 5.0),
            max_iters: 50,
            convergence_deg: 0.1,
            merge_deg: MERGE_ANGLE_DEG,
        }
    }
}

impl MeanShiftConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.bandwidth_deg > 0.0
            && self.kernel_c > 0.0
            && self.max_iters > 0
            && self.convergence_deg > 0.0
            && self.merge_deg > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(
                "mean_shift: all parameters must be positive".into(),
            ));
        }
        Ok(())
    }

    fn kernel(&self, angle_deg: f64) -> f64 {
        (-self.kernel_c * angle_deg * angle_deg).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AxisPolicy {
    /// Minimum number of unclassified lines before axis creation runs.
    pub creation_threshold: usize,
    pub merge_angle_deg: f64,
    pub unstructured_ratio: f64,
    /// Post-optimization change that counts as significant, degrees.
    pub update_angle_deg: f64,
    /// Axes changing significantly more often than this are deleted.
    pub max_changes: u32,
    /// Association gate, degrees.
    pub gate_angle_deg: f64,
    /// Standard deviation of the zero-mean angular model, degrees.
    pub assoc_sigma_deg: f64,
    /// Lines within the mean-shift bandwidth needed to back a new axis.
    pub min_support: usize,
}

impl Default for AxisPolicy {
    fn default() -> Self {
        AxisPolicy {
            creation_threshold: 20,
            merge_angle_deg: MERGE_ANGLE_DEG,
            unstructured_ratio: UNSTRUCTURED_RATIO,
            update_angle_deg: 2.0,
            max_changes: 3,
            gate_angle_deg: 15.0,
            assoc_sigma_deg: 5.0,
            min_support: 5,
        }
    }
}

impl AxisPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = self.creation_threshold > 0
            && self.merge_angle_deg > 0.0
            && self.unstructured_ratio > 0.0
            && self.update_angle_deg > 0.0
            && self.max_changes > 0
            && self.gate_angle_deg > 0.0
            && self.assoc_sigma_deg > 0.0
            && self.min_support > 0;
        if !ok {
            return Err(Error::InvalidConfig(
                "axis_policy: all parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A mean-shift fixed point with its kernel density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub direction: Vec3,
    pub density: f64,
}

fn deg(rad: f64) -> f64 {
    rad.to_degrees()
}

/// Kernel density `Σ K(∠(dᵢ, d))` over directions within the bandwidth.
pub fn direction_density(dirs: &[Vec3], d: &Vec3, cfg: &MeanShiftConfig) -> f64 {
    dirs.iter()
        .map(|di| deg(line_angle(di, d)))
        .filter(|&a| a <= cfg.bandwidth_deg)
        .map(|a| cfg.kernel(a))
        .sum()
}

/// One mean-shift step: kernel-weighted mean of the neighbors of `d`, each
/// flipped into the hemisphere of `d`. `None` when `d` has no neighbor.
fn shift(dirs: &[Vec3], d: &Vec3, cfg: &MeanShiftConfig) -> Option<Vec3> {
    let mut acc = Vec3::zeros();
    let mut total = 0.0;
    for di in dirs {
        let a = deg(line_angle(di, d));
        if a > cfg.bandwidth_deg {
            continue;
        }
        let w = cfg.kernel(a);
        let oriented = if di.dot(d) < 0.0 { -di } else { *di };
        acc += oriented * w;
        total += w;
    }
    if total <= 0.0 {
        return None;
    }
    (acc / total).try_normalize(0.0)
}

/// Runs mean shift from every input direction and returns the distinct modes
/// ordered by decreasing density.
pub fn mean_shift_modes(dirs: &[Vec3], cfg: &MeanShiftConfig) -> Result<Vec<Mode>> {
    if dirs.is_empty() {
        return Err(Error::NoCandidates);
    }
    let dirs: Vec<Vec3> = dirs
        .iter()
        .map(|d| d.try_normalize(0.0).ok_or(Error::InvalidDirection))
        .collect::<Result<_>>()?;

    let mut raw: Vec<Mode> = Vec::with_capacity(dirs.len());
    for start in &dirs {
        let mut d = *start;
        for _ in 0..cfg.max_iters {
            let Some(next) = shift(&dirs, &d, cfg) else {
                break;
            };
            let moved = deg(line_angle(&next, &d));
            d = next;
            if moved < cfg.convergence_deg {
                break;
            }
        }
        raw.push(Mode {
            direction: canonical_sign(&d),
            density: direction_density(&dirs, &d, cfg),
        });
    }

    raw.sort_by(|a, b| b.density.total_cmp(&a.density));
    let mut modes: Vec<Mode> = Vec::new();
    for m in raw {
        if modes
            .iter()
            .all(|k| deg(line_angle(&k.direction, &m.direction)) >= cfg.merge_deg)
        {
            modes.push(m);
        }
    }
    Ok(modes)
}

/// Mean-shift modes of a set of unit line directions.
pub fn mean_shift_directions(dirs: &[Vec3], cfg: &MeanShiftConfig) -> Result<Vec<Vec3>> {
    Ok(mean_shift_modes(dirs, cfg)?
        .into_iter()
        .map(|m| m.direction)
        .collect())
}

/// Proposes new axes from unclassified line directions.
///
/// Candidates are ordered best first: lowest mean angle to their supporting
/// lines, then larger support. New ids continue after the largest existing id.
pub fn propose_axes(
    unclassified: &[(LineId, Vec3)],
    existing: &[PrincipalAxis],
    local_ratio: f64,
    policy: &AxisPolicy,
    cfg: &MeanShiftConfig,
) -> Result<Vec<PrincipalAxis>> {
    if unclassified.len() < policy.creation_threshold || local_ratio <= policy.unstructured_ratio
    {
        return Ok(Vec::new());
    }
    let dirs: Vec<Vec3> = unclassified.iter().map(|(_, d)| *d).collect();
    let modes = mean_shift_modes(&dirs, cfg)?;

    struct Candidate {
        dir: Vec3,
        mean_angle: f64,
        support: Vec<LineId>,
    }

    let mut candidates: Vec<Candidate> = modes
        .iter()
        .filter(|m| {
            existing.iter().all(|a| {
                deg(line_angle(&a.direction(), &m.direction)) >= policy.merge_angle_deg
            })
        })
        .filter_map(|m| {
            let mut support = Vec::new();
            let mut sum = 0.0;
            for (id, d) in unclassified {
                let a = deg(line_angle(d, &m.direction));
                if a <= cfg.bandwidth_deg {
                    support.push(*id);
                    sum += a;
                }
            }
            (support.len() >= policy.min_support).then(|| Candidate {
                dir: m.direction,
                mean_angle: sum / support.len() as f64,
                support,
            })
        })
        .collect();

    candidates.sort_by(|a, b| {
        a.mean_angle
            .total_cmp(&b.mean_angle)
            .then(b.support.len().cmp(&a.support.len()))
    });

    let mut next_id = existing.iter().map(|a| a.id.0 + 1).max().unwrap_or(0);
    let mut created: Vec<PrincipalAxis> = Vec::new();
    for c in candidates {
        if created
            .iter()
            .any(|a| deg(line_angle(&a.direction(), &c.dir)) < policy.merge_angle_deg)
        {
            continue;
        }
        let mut axis = PrincipalAxis::new(AxisId(next_id), &c.dir)?;
        axis.member_lines = c.support.into_iter().map(|id| (id, 1.0)).collect();
        created.push(axis);
        next_id += 1;
    }
    Ok(created)
}

/// Mean angle in degrees between per-frame vanishing directions of a line and
/// an axis. Frames without a detected vanishing point are skipped.
pub fn mean_vp_angle(per_frame: &[Option<Vec3>], axis_dir: &Vec3) -> Option<f64> {
    let angles: Vec<f64> = per_frame
        .iter()
        .flatten()
        .map(|d| deg(line_angle(d, axis_dir)))
        .collect();
    if angles.is_empty() {
        None
    } else {
        Some(angles.iter().sum::<f64>() / angles.len() as f64)
    }
}

/// Association input for one line: mean angle to each axis, in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct LineAxisAngles {
    pub line: LineId,
    pub angles_deg: Vec<(AxisId, f64)>,
}

/// Soft line–axis association weights.
///
/// Only nonzero weights are stored; a missing pair has weight 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationTable {
    pub weights: BTreeMap<LineId, BTreeMap<AxisId, f64>>,
    pub unassociated: BTreeSet<LineId>,
}

impl AssociationTable {
    pub fn weight(&self, line: LineId, axis: AxisId) -> f64 {
        self.weights
            .get(&line)
            .and_then(|row| row.get(&axis))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn row(&self, line: LineId) -> Option<&BTreeMap<AxisId, f64>> {
        self.weights.get(&line)
    }

    /// Sets a single weight-1 association.
    pub fn assign(&mut self, line: LineId, axis: AxisId) {
        self.unassociated.remove(&line);
        self.weights.insert(line, BTreeMap::from([(axis, 1.0)]));
    }

    pub fn remove_line(&mut self, line: LineId) {
        self.weights.remove(&line);
        self.unassociated.insert(line);
    }

    /// Axis with the largest weight; ties go to the lower id.
    pub fn primary(&self, line: LineId) -> Option<AxisId> {
        self.weights.get(&line).and_then(|row| {
            row.iter()
                .fold(None::<(AxisId, f64)>, |best, (&id, &w)| match best {
                    Some((_, bw)) if bw >= w => best,
                    _ => Some((id, w)),
                })
                .map(|(id, _)| id)
        })
    }

    pub fn is_associated(&self, line: LineId) -> bool {
        self.weights.get(&line).is_some_and(|r| !r.is_empty())
    }

    /// Drops every pair that references `axis`, renormalizing the rows.
    pub fn remove_axis(&mut self, axis: AxisId) {
        let lines: Vec<LineId> = self.weights.keys().copied().collect();
        for line in lines {
            let row = self.weights.get_mut(&line).expect("key present");
            if row.remove(&axis).is_none() {
                continue;
            }
            let total: f64 = row.values().sum();
            if row.is_empty() || total <= 0.0 {
                self.remove_line(line);
            } else {
                row.values_mut().for_each(|w| *w /= total);
            }
        }
    }
}

/// Gated, normalized association weights.
///
/// Pairs beyond the gate get weight 0. Surviving pairs score
/// `exp(-angle² / 2σ²)` and are normalized per line. A line with every pair
/// gated is listed in `unassociated`.
pub fn associate(
    lines: &[LineAxisAngles],
    axes: &[PrincipalAxis],
    policy: &AxisPolicy,
) -> AssociationTable {
    let known: BTreeSet<AxisId> = axes.iter().map(|a| a.id).collect();
    let two_sigma_sq = 2.0 * policy.assoc_sigma_deg * policy.assoc_sigma_deg;
    let mut table = AssociationTable::default();
    for entry in lines {
        let mut row: BTreeMap<AxisId, f64> = entry
            .angles_deg
            .iter()
            .filter(|(id, a)| known.contains(id) && a.is_finite() && *a <= policy.gate_angle_deg)
            .map(|&(id, a)| (id, (-a * a / two_sigma_sq).exp()))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        let total: f64 = row.values().sum();
        if row.is_empty() || total <= 0.0 {
            table.unassociated.insert(entry.line);
            continue;
        }
        row.values_mut().for_each(|w| *w /= total);
        table.weights.insert(entry.line, row);
    }
    table
}

/// Outcome of [`update_axes`].
#[derive(Debug, Clone, PartialEq)]
pub struct AxisUpdate {
    pub axes: Vec<PrincipalAxis>,
    pub deleted: Vec<AxisId>,
    /// Members of deleted axes; they must be re-associated.
    pub orphaned_lines: BTreeSet<LineId>,
}

/// Applies post-optimization directions to the axis set.
///
/// A change larger than `update_angle_deg` is adopted and counted; smaller
/// changes leave the pre-optimization direction in place. Axes that changed
/// more than `max_changes` times are deleted, and of two axes within
/// `merge_angle_deg` the one with the larger id is deleted.
pub fn update_axes(
    axes: &[PrincipalAxis],
    post_ba_dirs: &BTreeMap<AxisId, AxisDirection>,
    policy: &AxisPolicy,
) -> Result<AxisUpdate> {
    let mut updated = Vec::with_capacity(axes.len());
    for axis in axes {
        let post = post_ba_dirs.get(&axis.id).ok_or_else(|| {
            Error::InconsistentGraph(format!("no optimized direction for {}", axis.id))
        })?;
        let mut next = axis.clone();
        let post_vec = direction_from_latlong(post);
        if deg(line_angle(&axis.prior(), &post_vec)) > policy.update_angle_deg {
            next.dir = *post;
            next.prior_dir = post_vec.normalize().into();
            next.change_count += 1;
        }
        updated.push(next);
    }

    let mut deleted = Vec::new();
    let mut orphaned = BTreeSet::new();
    let mut survivors: Vec<PrincipalAxis> = Vec::with_capacity(updated.len());
    updated.sort_by_key(|a| a.id);
    for axis in updated {
        let too_unstable = axis.change_count > policy.max_changes;
        let duplicate = survivors.iter().any(|kept| {
            deg(line_angle(&kept.direction(), &axis.direction())) < policy.merge_angle_deg
        });
        if too_unstable || duplicate {
            deleted.push(axis.id);
            orphaned.extend(axis.member_lines.keys().copied());
        } else {
            survivors.push(axis);
        }
    }
    // A line still held by a surviving axis is not orphaned.
    for axis in &survivors {
        for line in axis.member_lines.keys() {
            orphaned.remove(line);
        }
    }
    Ok(AxisUpdate {
        axes: survivors,
        deleted,
        orphaned_lines: orphaned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_between;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn perturb(d: &Vec3, sigma_deg: f64, rng: &mut ChaCha8Rng) -> Vec3 {
        let n = Normal::new(0.0, sigma_deg.to_radians()).unwrap();
        let (e1, e2) = crate::geometry::orthogonal_basis(d);
        let w = e1 * n.sample(rng) + e2 * n.sample(rng);
        Rotation3::new(w) * d
    }

    /// Brute-force density argmax on a 0.5° grid in a 10° cap around `center`.
    fn grid_argmax(dirs: &[Vec3], center: &Vec3, cfg: &MeanShiftConfig) -> Vec3 {
        let (e1, e2) = crate::geometry::orthogonal_basis(center);
        let step = 0.5f64.to_radians();
        let mut best = (f64::MIN, *center);
        for i in -20..=20 {
            for j in -20..=20 {
                let tangent = e1 * (i as f64 * step) + e2 * (j as f64 * step);
                let d = (center + tangent).normalize();
                let f = direction_density(dirs, &d, cfg);
                if f > best.0 {
                    best = (f, d);
                }
            }
        }
        best.1
    }

    #[test]
    fn identical_directions_give_single_mode() {
        let dirs = vec![Vec3::z(); 50];
        let modes = mean_shift_directions(&dirs, &MeanShiftConfig::default()).unwrap();
        assert_eq!(modes, vec![Vec3::z()]);
    }

    #[test]
    fn antipodal_directions_are_one_axis() {
        let v = Vec3::new(0.3, -0.5, 0.8).normalize();
        let dirs: Vec<Vec3> = (0..20).map(|i| if i % 2 == 0 { v } else { -v }).collect();
        let modes = mean_shift_directions(&dirs, &MeanShiftConfig::default()).unwrap();
        assert_eq!(modes.len(), 1);
        assert!(line_angle(&modes[0], &v) < 1e-9);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert_eq!(
            mean_shift_directions(&[], &MeanShiftConfig::default()),
            Err(Error::NoCandidates)
        );
    }

    #[test]
    fn two_clusters_match_grid_oracle() {
        let cfg = MeanShiftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let centers = [Vec3::x(), Vec3::y()];
        let mut dirs = Vec::new();
        for c in &centers {
            for _ in 0..30 {
                dirs.push(perturb(c, 3.0, &mut rng));
            }
        }
        let modes = mean_shift_directions(&dirs, &cfg).unwrap();
        assert_eq!(modes.len(), 2);
        for c in &centers {
            let m = modes
                .iter()
                .min_by(|a, b| line_angle(a, c).total_cmp(&line_angle(b, c)))
                .unwrap();
            let oracle = grid_argmax(&dirs, c, &cfg);
            assert!(line_angle(m, c).to_degrees() < 1.0);
            assert!(line_angle(m, &oracle).to_degrees() <= 0.5);
        }
    }

    #[test]
    fn modes_are_fixed_points() {
        let cfg = MeanShiftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (z, x) = (Vec3::z(), Vec3::x());
        let dirs: Vec<Vec3> = (0..40)
            .map(|i| perturb(if i < 20 { &z } else { &x }, 2.0, &mut rng))
            .collect();
        let modes = mean_shift_directions(&dirs, &cfg).unwrap();
        let again = mean_shift_directions(&modes, &cfg).unwrap();
        assert_eq!(modes.len(), again.len());
        for (a, b) in modes.iter().zip(&again) {
            assert!(line_angle(a, b) < 1e-12);
        }
    }

    fn lines_around(d: &Vec3, n: usize, first_id: u32, rng: &mut ChaCha8Rng) -> Vec<(LineId, Vec3)> {
        (0..n)
            .map(|i| (LineId(first_id + i as u32), perturb(d, 2.0, rng)))
            .collect()
    }

    #[test]
    fn propose_creates_planted_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lines = lines_around(&Vec3::z(), 40, 0, &mut rng);
        let policy = AxisPolicy::default();
        let cfg = MeanShiftConfig::default();
        let axes = propose_axes(&lines, &[], 0.7, &policy, &cfg).unwrap();
        assert_eq!(axes.len(), 1);
        assert!(line_angle(&axes[0].direction(), &Vec3::z()).to_degrees() < 1.0);
        assert_eq!(axes[0].id, AxisId(0));
        assert_eq!(axes[0].member_lines.len(), 40);
    }

    #[test]
    fn propose_respects_ratio_and_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let lines = lines_around(&Vec3::z(), 40, 0, &mut rng);
        let policy = AxisPolicy::default();
        let cfg = MeanShiftConfig::default();
        assert!(propose_axes(&lines, &[], 0.5, &policy, &cfg).unwrap().is_empty());
        assert!(propose_axes(&lines, &[], 0.6, &policy, &cfg).unwrap().is_empty());
        assert!(propose_axes(&lines[..19], &[], 0.9, &policy, &cfg)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn propose_discards_candidate_near_existing_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let existing_dir = Rotation3::new(Vec3::x() * 7f64.to_radians()) * Vec3::z();
        let existing = PrincipalAxis::new(AxisId(4), &existing_dir).unwrap();
        let lines: Vec<(LineId, Vec3)> = (0..30).map(|i| (LineId(i), Vec3::z())).collect();
        let policy = AxisPolicy::default();
        let cfg = MeanShiftConfig::default();
        let out = propose_axes(&lines, std::slice::from_ref(&existing), 0.9, &policy, &cfg).unwrap();
        assert!(out.is_empty());

        let mut lines = lines;
        lines.extend(lines_around(&Vec3::x(), 30, 100, &mut rng));
        let out = propose_axes(&lines, &[existing], 0.9, &policy, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, AxisId(5));
        assert!(line_angle(&out[0].direction(), &Vec3::x()).to_degrees() < 1.0);
    }

    #[test]
    fn propose_orders_by_mean_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut lines = lines_around(&Vec3::x(), 30, 0, &mut rng);
        // Tight cluster: smaller mean angle, selected first.
        lines.extend((0..25).map(|i| (LineId(100 + i), Vec3::y())));
        let out = propose_axes(
            &lines,
            &[],
            0.9,
            &AxisPolicy::default(),
            &MeanShiftConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        assert!(line_angle(&out[0].direction(), &Vec3::y()) < 1e-9);
        assert!(out[0].id < out[1].id);
    }

    fn angles(line: u32, pairs: &[(u32, f64)]) -> LineAxisAngles {
        LineAxisAngles {
            line: LineId(line),
            angles_deg: pairs.iter().map(|&(a, d)| (AxisId(a), d)).collect(),
        }
    }

    fn three_axes() -> Vec<PrincipalAxis> {
        [Vec3::x(), Vec3::y(), Vec3::z()]
            .iter()
            .enumerate()
            .map(|(i, d)| PrincipalAxis::new(AxisId(i as u32), d).unwrap())
            .collect()
    }

    #[test]
    fn association_examples() {
        let axes = three_axes();
        let policy = AxisPolicy::default();
        let t = associate(&[angles(0, &[(0, 2.0)])], &axes, &policy);
        assert_eq!(t.weight(LineId(0), AxisId(0)), 1.0);

        let t = associate(&[angles(0, &[(0, 20.0)])], &axes, &policy);
        assert_eq!(t.weight(LineId(0), AxisId(0)), 0.0);
        assert!(t.unassociated.contains(&LineId(0)));
        assert!(!t.is_associated(LineId(0)));

        let t = associate(&[angles(0, &[(0, 5.0), (1, 5.0)])], &axes, &policy);
        assert_eq!(t.weight(LineId(0), AxisId(0)), 0.5);
        assert_eq!(t.weight(LineId(0), AxisId(1)), 0.5);
        assert_eq!(t.primary(LineId(0)), Some(AxisId(0)));
    }

    #[test]
    fn association_rows_are_convex_and_monotone() {
        let axes = three_axes();
        let policy = AxisPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for line in 0..500u32 {
            let a: Vec<(u32, f64)> = (0..3).map(|j| (j, rng.random_range(0.0..25.0))).collect();
            let t = associate(&[angles(line, &a)], &axes, &policy);
            match t.row(LineId(line)) {
                Some(row) => {
                    let sum: f64 = row.values().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                    assert!(row.values().all(|&w| w >= 0.0));
                    assert!(!t.unassociated.contains(&LineId(line)));
                }
                None => assert!(t.unassociated.contains(&LineId(line))),
            }
            // Lowering one angle never lowers its weight.
            let mut lowered = a.clone();
            lowered[0].1 *= 0.5;
            let t2 = associate(&[angles(line, &lowered)], &axes, &policy);
            assert!(
                t2.weight(LineId(line), AxisId(0)) >= t.weight(LineId(line), AxisId(0)) - 1e-15
            );
        }
    }

    #[test]
    fn mean_vp_angle_skips_missing_frames() {
        let axis = Vec3::z();
        let tilt = |d: f64| Rotation3::new(Vec3::x() * d.to_radians()) * Vec3::z();
        let frames = [Some(tilt(2.0)), None, Some(-tilt(4.0))];
        let m = mean_vp_angle(&frames, &axis).unwrap();
        assert!((m - 3.0).abs() < 1e-9);
        assert_eq!(mean_vp_angle(&[None, None], &axis), None);
    }

    fn rotated(d: &Vec3, about: &Vec3, deg: f64) -> Vec3 {
        Rotation3::new(about.normalize() * deg.to_radians()) * d
    }

    #[test]
    fn update_small_change_keeps_prior() {
        let policy = AxisPolicy::default();
        let axes = three_axes();
        let post: BTreeMap<AxisId, AxisDirection> = axes
            .iter()
            .map(|a| {
                let d = rotated(&a.direction(), &Vec3::new(1.0, 1.0, 1.0), 0.1);
                (a.id, latlong_from_direction(&d).unwrap())
            })
            .collect();
        let out = update_axes(&axes, &post, &policy).unwrap();
        assert_eq!(out.axes, axes);
        assert!(out.deleted.is_empty());
    }

    #[test]
    fn update_large_change_is_adopted_and_counted() {
        let policy = AxisPolicy::default();
        let axes = three_axes();
        let moved = rotated(&Vec3::x(), &Vec3::z(), 5.0);
        let mut post: BTreeMap<AxisId, AxisDirection> =
            axes.iter().map(|a| (a.id, a.dir)).collect();
        post.insert(AxisId(0), latlong_from_direction(&moved).unwrap());
        let out = update_axes(&axes, &post, &policy).unwrap();
        let a0 = &out.axes[0];
        assert_eq!(a0.change_count, 1);
        assert!(angle_between(&a0.prior(), &moved) < 1e-12);
        assert!(angle_between(&a0.direction(), &moved) < 1e-12);
    }

    #[test]
    fn update_deletes_unstable_and_later_adjacent_axes() {
        let policy = AxisPolicy::default();
        let mut axes = three_axes();
        axes[2].change_count = policy.max_changes;
        axes[2].member_lines.insert(LineId(9), 1.0);
        let far = rotated(&Vec3::z(), &Vec3::x(), 30.0);
        let mut post: BTreeMap<AxisId, AxisDirection> =
            axes.iter().map(|a| (a.id, a.dir)).collect();
        post.insert(AxisId(2), latlong_from_direction(&far).unwrap());
        let out = update_axes(&axes, &post, &policy).unwrap();
        assert_eq!(out.deleted, vec![AxisId(2)]);
        assert!(out.orphaned_lines.contains(&LineId(9)));

        // Two axes converging to 4° apart: the later one goes.
        let mut axes = three_axes();
        axes[1].member_lines.insert(LineId(3), 1.0);
        let mut post: BTreeMap<AxisId, AxisDirection> =
            axes.iter().map(|a| (a.id, a.dir)).collect();
        let near_x = rotated(&Vec3::x(), &Vec3::z(), 4.0);
        post.insert(AxisId(1), latlong_from_direction(&near_x).unwrap());
        let out = update_axes(&axes, &post, &policy).unwrap();
        assert_eq!(out.deleted, vec![AxisId(1)]);
        assert_eq!(out.orphaned_lines, BTreeSet::from([LineId(3)]));
        assert_eq!(out.axes.len(), 2);
    }

    #[test]
    fn update_is_stable_on_consistent_set() {
        let policy = AxisPolicy::default();
        let axes = three_axes();
        let post = axes.iter().map(|a| (a.id, a.dir)).collect();
        let out = update_axes(&axes, &post, &policy).unwrap();
        assert_eq!(out.axes, axes);
        let again = update_axes(
            &out.axes,
            &out.axes.iter().map(|a| (a.id, a.dir)).collect(),
            &policy,
        )
        .unwrap();
        assert_eq!(again.axes, out.axes);
    }

    #[test]
    fn update_requires_every_axis() {
        let axes = three_axes();
        let post = BTreeMap::from([(AxisId(0), axes[0].dir)]);
        assert!(matches!(
            update_axes(&axes, &post, &AxisPolicy::default()),
            Err(Error::InconsistentGraph(_))
        ));
    }

    #[test]
    fn remove_axis_renormalizes() {
        let axes = three_axes();
        let mut t = associate(
            &[angles(0, &[(0, 3.0), (1, 6.0)]), angles(1, &[(1, 1.0)])],
            &axes,
            &AxisPolicy::default(),
        );
        t.remove_axis(AxisId(1));
        assert_eq!(t.weight(LineId(0), AxisId(0)), 1.0);
        assert!(t.unassociated.contains(&LineId(1)));
    }
}
