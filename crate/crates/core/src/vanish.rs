//! Vanishing-point estimation with a known vertical direction.
//!
//! With the vertical direction `d_v` known in the camera frame, the two
//! horizontal directions lie in the plane orthogonal to it and are sampled by
//! rotating a seed direction about `d_v` in 1° steps. The best-scoring sample
//! seeds the segment clusters, each cluster is refined by a least-squares
//! intersection, and the segments are reclassified against the refined points.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Rotation3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Segment2D, Vec2, Vec3};

/// Number of horizontal samples (1° steps over a full turn).
pub const PROPOSAL_COUNT: usize = 360;

/// Homogeneous scale below which a vanishing point is treated as lying at
/// infinity.
const AT_INFINITY_EPS: f64 = 1e-8;

const MAX_REFINE_ROUNDS: usize = 5;

/// Frame triple `(d_v, d_h, d_v × d_h)` for one horizontal rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VPProposal {
    pub dirs: [Vec3; 3],
    /// Rotation of the horizontal seed about `d_v`, in whole degrees, `1..=360`.
    pub theta_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SegmentClass {
    #[serde(rename = "vertical")]
    Vertical,
    #[serde(rename = "horizontal-0")]
    Horizontal0,
    #[serde(rename = "horizontal-1")]
    Horizontal1,
    #[serde(rename = "unstructured")]
    Unstructured,
}

impl SegmentClass {
    pub fn label(&self) -> &'static str {
        match self {
            SegmentClass::Vertical => "vertical",
            SegmentClass::Horizontal0 => "horizontal-0",
            SegmentClass::Horizontal1 => "horizontal-1",
            SegmentClass::Unstructured => "unstructured",
        }
    }
}

/// Image vanishing points for the vertical and the two horizontal directions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VanishingPoints {
    pub vertical: Option<Vec3>,
    pub horizontal: [Option<Vec3>; 2],
}

impl VanishingPoints {
    /// `(class, point)` pairs in vertical, horizontal-0, horizontal-1 order.
    pub fn labelled(&self) -> Vec<(SegmentClass, Vec3)> {
        [
            (SegmentClass::Vertical, self.vertical),
            (SegmentClass::Horizontal0, self.horizontal[0]),
            (SegmentClass::Horizontal1, self.horizontal[1]),
        ]
        .into_iter()
        .filter_map(|(c, p)| p.map(|p| (c, p)))
        .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VPResult {
    pub vps: VanishingPoints,
    pub classes: BTreeMap<u64, SegmentClass>,
    /// `‖Mx‖` of each refined point, same order as [`VanishingPoints::labelled`].
    pub residuals: Vec<(SegmentClass, f64)>,
    /// Winning proposal, when any segment was consistent with one.
    pub best_proposal: Option<u32>,
}

/// Consistency thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VpTolerances {
    /// Proposal scoring: max angle between a segment and the direction from
    /// its midpoint to a vanishing point, degrees.
    pub angle_deg: f64,
    /// Classification: max endpoint distance to the line joining the segment
    /// midpoint and a vanishing point, pixels.
    pub dist_px: f64,
}

impl Default for VpTolerances {
    fn default() -> Self {
        VpTolerances {
            angle_deg: 2.0,
            dist_px: 3.0,
        }
    }
}

impl VpTolerances {
    pub fn validate(&self) -> Result<()> {
        if !(self.angle_deg > 0.0 && self.dist_px > 0.0) {
            return Err(Error::InvalidConfig(
                "vp: tolerances must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Segment with a caller-supplied id, as read from segment files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub id: u64,
    pub s: [f64; 2],
    pub e: [f64; 2],
}

impl LabeledSegment {
    pub fn segment(&self) -> Result<Segment2D> {
        Segment2D::new(Vec2::from(self.s), Vec2::from(self.e))
    }
}

/// Horizontal seed orthogonal to `d_v = [sin a sin b, sin a cos b, cos a]`:
/// `d_h = [cos b, −sin b, 0]`. At the poles `b = 0`.
pub fn horizontal_seed(d_v: &Vec3) -> Vec3 {
    // sin a ≥ 0, so b follows from the first two components alone.
    let b = if d_v.x == 0.0 && d_v.y == 0.0 {
        0.0
    } else {
        d_v.x.atan2(d_v.y)
    };
    Vec3::new(b.cos(), -b.sin(), 0.0)
}

/// The 360 proposals obtained by rotating the seed about `d_v` by 1°, 2°, …, 360°.
pub fn generate_proposals(d_v: &Vec3) -> Vec<VPProposal> {
    let dv = d_v.normalize();
    let seed = horizontal_seed(&dv);
    (1..=PROPOSAL_COUNT as u32)
        .map(|i| {
            let rot = Rotation3::new(dv * (i as f64).to_radians());
            let dh = (rot * seed).normalize();
            VPProposal {
                dirs: [dv, dh, dv.cross(&dh)],
                theta_index: i,
            }
        })
        .collect()
}

/// Acute angle between a segment and the direction from its midpoint toward
/// the homogeneous point `vp`, radians.
fn segment_vp_angle(seg: &Segment2D, vp: &Vec3) -> Option<f64> {
    let m = seg.midpoint();
    // (vp_xy − m·vp_z) points at vp, up to sign, also when vp_z = 0.
    let toward = Vec2::new(vp.x - m.x * vp.z, vp.y - m.y * vp.z);
    let d = seg.direction();
    let (tn, dn) = (toward.norm(), d.norm());
    if tn <= 1e-12 * (vp.norm() + 1.0) || dn == 0.0 {
        return None;
    }
    let cross = (d.x * toward.y - d.y * toward.x).abs();
    Some(cross.atan2(d.dot(&toward).abs()))
}

/// Endpoint distance (pixels) to the line through the segment midpoint and `vp`.
pub fn segment_vp_distance(seg: &Segment2D, vp: &Vec3) -> Option<f64> {
    let m = seg.midpoint().push(1.0);
    let l = m.cross(vp);
    let nn = (l.x * l.x + l.y * l.y).sqrt();
    if nn <= 1e-12 * l.norm().max(f64::MIN_POSITIVE) || nn == 0.0 {
        return None;
    }
    let s = seg.start().push(1.0);
    Some(s.dot(&l).abs() / nn)
}

/// Count of segments consistent with at least one proposal vanishing point,
/// plus the summed angular deviation of those segments (for tie-breaking).
pub fn score_with_deviation(
    p: &VPProposal,
    segments: &[Segment2D],
    k: &CameraIntrinsics,
    angle_tol_deg: f64,
) -> (usize, f64) {
    let tol = angle_tol_deg.to_radians();
    let vps: Vec<Vec3> = p.dirs.iter().map(|d| k.vanishing_point(d)).collect();
    let mut count = 0;
    let mut deviation = 0.0;
    for seg in segments {
        let best = vps
            .iter()
            .filter_map(|vp| segment_vp_angle(seg, vp))
            .fold(f64::INFINITY, f64::min);
        if best <= tol {
            count += 1;
            deviation += best;
        }
    }
    (count, deviation)
}

/// Number of segments whose supporting line passes within `angle_tol_deg`
/// of one of the proposal's vanishing points.
pub fn score_proposal(
    p: &VPProposal,
    segments: &[Segment2D],
    k: &CameraIntrinsics,
    angle_tol_deg: f64,
) -> usize {
    score_with_deviation(p, segments, k, angle_tol_deg).0
}

fn normalized_rows(cluster: &[Segment2D]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(cluster.len(), 3);
    for (i, seg) in cluster.iter().enumerate() {
        let l = seg.homogeneous_line();
        let l = l / l.norm();
        m.set_row(i, &l.transpose());
    }
    m
}

/// `‖Mx‖` for unit `x`, with unit-norm rows `Mᵢ = s̃ᵢ × ẽᵢ`.
pub fn cluster_residual(cluster: &[Segment2D], x: &Vec3) -> f64 {
    let m = normalized_rows(cluster);
    (m * x.normalize()).norm()
}

/// Gives a homogeneous point a canonical sign: positive last coordinate, or
/// for points at infinity a positive largest-magnitude coordinate.
fn canonical_point(x: Vec3) -> Vec3 {
    if x.z.abs() > AT_INFINITY_EPS * x.norm() {
        if x.z < 0.0 {
            -x
        } else {
            x
        }
    } else {
        let i = x.iamax();
        if x[i] < 0.0 {
            -x
        } else {
            x
        }
    }
}

/// Least-squares intersection of the cluster's segment lines: the right
/// singular vector of `M` for its smallest singular value, unit norm.
pub fn refine_vp(cluster: &[Segment2D]) -> Result<Vec3> {
    if cluster.len() < 2 {
        return Err(Error::Underdetermined(cluster.len()));
    }
    let mut m = normalized_rows(cluster);
    // Thin SVD of a 2×3 matrix drops the null vector; pad with a zero row.
    if m.nrows() < 3 {
        let rows = m.nrows();
        m = m.insert_row(rows, 0.0);
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::DegenerateCluster)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let imin = order[0];
    let largest = svd.singular_values[order[order.len() - 1]];
    // With two identical lines M has rank one and the null space is a plane.
    let middle = if order.len() == 3 { svd.singular_values[order[1]] } else { 0.0 };
    if middle <= 1e-10 * largest {
        return Err(Error::DegenerateCluster);
    }
    let x = Vec3::new(v_t[(imin, 0)], v_t[(imin, 1)], v_t[(imin, 2)]);
    Ok(canonical_point(x.normalize()))
}

/// Assigns each segment to the closest consistent vanishing point, or
/// `Unstructured`. Ties go to the earlier entry of `vps`.
pub fn classify_segments(
    segments: &[(u64, Segment2D)],
    vps: &[(SegmentClass, Vec3)],
    dist_tol: f64,
) -> BTreeMap<u64, SegmentClass> {
    segments
        .iter()
        .map(|(id, seg)| {
            let mut best: Option<(SegmentClass, f64)> = None;
            for (class, vp) in vps {
                let Some(d) = segment_vp_distance(seg, vp) else {
                    continue;
                };
                if d <= dist_tol && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((*class, d));
                }
            }
            (*id, best.map_or(SegmentClass::Unstructured, |(c, _)| c))
        })
        .collect()
}

/// Full per-frame pipeline: rotate the world vertical into the camera,
/// score all proposals, seed clusters from the best one, then refine each
/// cluster and reclassify until the labels settle.
pub fn estimate_frame(
    segments: &[(u64, Segment2D)],
    d_v_world: &Vec3,
    pose_cw: &Pose,
    k: &CameraIntrinsics,
    tols: &VpTolerances,
) -> Result<VPResult> {
    let d_v = (pose_cw.rotation * d_v_world)
        .try_normalize(0.0)
        .ok_or(Error::InvalidDirection)?;
    let segs: Vec<Segment2D> = segments.iter().map(|(_, s)| *s).collect();
    let unstructured = || -> BTreeMap<u64, SegmentClass> {
        segments
            .iter()
            .map(|(id, _)| (*id, SegmentClass::Unstructured))
            .collect()
    };
    if segs.is_empty() {
        return Ok(VPResult::default());
    }

    let proposals = generate_proposals(&d_v);
    let mut best: Option<(usize, f64, &VPProposal)> = None;
    for p in &proposals {
        let (count, dev) = score_with_deviation(p, &segs, k, tols.angle_deg);
        let better = match best {
            None => true,
            Some((bc, bd, _)) => count > bc || (count == bc && dev < bd),
        };
        if better {
            best = Some((count, dev, p));
        }
    }
    let Some((_, _, proposal)) = best.filter(|(c, _, _)| *c > 0) else {
        return Ok(VPResult {
            classes: unstructured(),
            ..VPResult::default()
        });
    };

    let coarse = VanishingPoints {
        vertical: Some(k.vanishing_point(&proposal.dirs[0])),
        horizontal: [
            Some(k.vanishing_point(&proposal.dirs[1])),
            Some(k.vanishing_point(&proposal.dirs[2])),
        ],
    };
    let mut clusters = classify_segments(segments, &coarse.labelled(), tols.dist_px);
    let mut previous = coarse;
    // Segments near the line joining two vanishing points fit both; the
    // coarse points can put them in the wrong cluster. Refine and
    // reclassify until the labels settle.
    for _ in 0..MAX_REFINE_ROUNDS {
        let (refined, residuals) = refine_clusters(segments, &clusters, &previous)?;
        let classes = classify_segments(segments, &refined.labelled(), tols.dist_px);
        let settled = classes == clusters;
        clusters = classes;
        previous = refined;
        if settled {
            return Ok(VPResult {
                vps: refined,
                classes: clusters,
                residuals,
                best_proposal: Some(proposal.theta_index),
            });
        }
    }
    let (vps, residuals) = refine_clusters(segments, &clusters, &previous)?;
    Ok(VPResult {
        classes: classify_segments(segments, &vps.labelled(), tols.dist_px),
        vps,
        residuals,
        best_proposal: Some(proposal.theta_index),
    })
}

/// Refined point and residual per nonempty cluster. Clusters too small or
/// degenerate to refine keep their point from `fallback`.
fn refine_clusters(
    segments: &[(u64, Segment2D)],
    clusters: &BTreeMap<u64, SegmentClass>,
    fallback: &VanishingPoints,
) -> Result<(VanishingPoints, Vec<(SegmentClass, f64)>)> {
    let mut refined = VanishingPoints::default();
    let mut residuals = Vec::new();
    for class in [
        SegmentClass::Vertical,
        SegmentClass::Horizontal0,
        SegmentClass::Horizontal1,
    ] {
        let members: Vec<Segment2D> = segments
            .iter()
            .filter(|(id, _)| clusters[id] == class)
            .map(|(_, s)| *s)
            .collect();
        if members.is_empty() {
            continue;
        }
        let slot = |v: &VanishingPoints| match class {
            SegmentClass::Vertical => v.vertical,
            SegmentClass::Horizontal0 => v.horizontal[0],
            _ => v.horizontal[1],
        };
        let vp = match refine_vp(&members) {
            Ok(vp) => vp,
            // A single segment, or one line repeated, cannot refine the point.
            Err(Error::Underdetermined(_)) | Err(Error::DegenerateCluster) => {
                let Some(c) = slot(fallback) else { continue };
                canonical_point(c.normalize())
            }
            Err(e) => return Err(e),
        };
        residuals.push((class, cluster_residual(&members, &vp)));
        match class {
            SegmentClass::Vertical => refined.vertical = Some(vp),
            SegmentClass::Horizontal0 => refined.horizontal[0] = Some(vp),
            _ => refined.horizontal[1] = Some(vp),
        }
    }
    Ok((refined, residuals))
}
