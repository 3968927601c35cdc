//! Three-stage line policy and the association/optimization alternation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::solver::{solve, LMConfig, OptimizationReport};
use super::{FactorGraph, LineAnchor, LineState, LineVertex, Stage};
use crate::axes::{associate, update_axes, AxisPolicy, LineAxisAngles};
use crate::error::{Error, Result};
use crate::geometry::{
    anchor_inverse_depth, ortho_from_plucker, AnchoredLine, AxisRef, CameraIntrinsics, OrthoLine,
    PluckerLine, Pose, Segment2D, Vec3,
};
use crate::ids::{AxisId, LineId, PoseId};

/// World direction of a vanishing direction seen in a keyframe (`T_cw`).
pub fn temporary_axis_direction(vp_dir_camera: &Vec3, ref_pose: &Pose) -> Result<Vec3> {
    (ref_pose.rotation.inverse() * vp_dir_camera)
        .try_normalize(0.0)
        .ok_or(Error::InvalidDirection)
}

/// A fresh line anchored at the midpoint of its reference-keyframe segment,
/// with a constant temporary direction.
pub fn new_structural_line(
    segment: &Segment2D,
    ref_keyframe: PoseId,
    inv_depth: f64,
    world_dir: &Vec3,
) -> Result<LineVertex> {
    if !(inv_depth > 0.0) {
        return Err(Error::BehindCamera(inv_depth));
    }
    let d = world_dir.try_normalize(0.0).ok_or(Error::InvalidDirection)?;
    Ok(LineVertex::new(LineState::Anchored(AnchoredLine {
        anchor_pixel: segment.midpoint().into(),
        ref_keyframe,
        inv_depth,
        axis_ref: AxisRef::Temporary(d.into()),
    })))
}

/// Orthonormal form of a world line.
pub fn to_ortho(line_w: &PluckerLine) -> Result<OrthoLine> {
    ortho_from_plucker(line_w)
}

/// Anchored form of a world line, with the inverse depth where the anchor ray
/// meets the line (closest point if skew). The direction then comes from
/// `axis`.
pub fn to_anchored(
    line_w: &PluckerLine,
    anchor: &LineAnchor,
    axis: AxisId,
    ref_pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<AnchoredLine> {
    let r = anchor_inverse_depth(line_w, &anchor.pixel.into(), &ref_pose.inverse(), k)?;
    Ok(AnchoredLine {
        anchor_pixel: anchor.pixel,
        ref_keyframe: anchor.ref_keyframe,
        inv_depth: r,
        axis_ref: AxisRef::Axis(axis),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTransition {
    pub line: LineId,
    pub from: Stage,
    pub to: Stage,
}

/// Associated axis of a line, if it still exists in the graph.
fn associated_axis(graph: &FactorGraph, id: LineId) -> Option<AxisId> {
    graph
        .association
        .primary(id)
        .filter(|a| graph.axes.contains_key(a))
}

/// Converts an anchored line to the orthonormal fallback.
pub fn release_line(graph: &mut FactorGraph, id: LineId) -> Result<()> {
    let l_w = graph.world_line(id)?;
    let v = graph.lines.get_mut(&id).expect("world_line checked id");
    v.state = LineState::Ortho(ortho_from_plucker(&l_w)?);
    Ok(())
}

/// Moves lines between stages.
///
/// Fresh lines stay anchored to their temporary direction until their first
/// solve, then fall back to the orthonormal form. A line with an axis of
/// positive weight is anchored to it; if the conversion fails (line parallel
/// to the anchor ray) the line stays where it is. An anchored line that has
/// lost every association falls back to the orthonormal form.
pub fn stage_policy(graph: &mut FactorGraph) -> Result<Vec<StageTransition>> {
    let ids: Vec<LineId> = graph.lines.keys().copied().collect();
    let mut out = Vec::new();
    for id in ids {
        let vertex = graph.lines[&id];
        let Some(from) = vertex.stage() else { continue };
        let target = associated_axis(graph, id);
        let to = match (from, target) {
            (Stage::InitialTempAxis, Some(axis)) => {
                let LineState::Anchored(mut a) = vertex.state else { unreachable!() };
                a.axis_ref = AxisRef::Axis(axis);
                graph.lines.get_mut(&id).expect("present").state = LineState::Anchored(a);
                Stage::AxisAnchored
            }
            (Stage::InitialTempAxis, None) if vertex.optimized > 0 => {
                release_line(graph, id)?;
                Stage::OrthoFallback
            }
            (Stage::OrthoFallback, Some(axis)) => {
                let Some(anchor) = vertex.anchor else { continue };
                let l_w = graph.world_line(id)?;
                let ref_pose = *graph.pose(anchor.ref_keyframe)?;
                match to_anchored(&l_w, &anchor, axis, &ref_pose, &graph.intrinsics) {
                    Ok(a) => {
                        graph.lines.get_mut(&id).expect("present").state = LineState::Anchored(a);
                        Stage::AxisAnchored
                    }
                    Err(Error::InvalidLine(_)) | Err(Error::BehindCamera(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            (Stage::AxisAnchored, Some(axis)) => {
                let LineState::Anchored(mut a) = vertex.state else { unreachable!() };
                if a.axis_ref != AxisRef::Axis(axis) {
                    a.axis_ref = AxisRef::Axis(axis);
                    graph.lines.get_mut(&id).expect("present").state = LineState::Anchored(a);
                }
                continue;
            }
            (Stage::AxisAnchored, None) => {
                release_line(graph, id)?;
                Stage::OrthoFallback
            }
            _ => continue,
        };
        if to != from {
            out.push(StageTransition { line: id, from, to });
        }
    }
    Ok(out)
}

/// Mean angle in degrees between each axis and the planes back-projected
/// from a line's segments. A line parallel to the axis lies in every such
/// plane, whatever its current estimate.
pub fn line_axis_angles(graph: &FactorGraph) -> Result<Vec<LineAxisAngles>> {
    let k = graph.intrinsics.matrix();
    let mut normals: BTreeMap<LineId, Vec<Vec3>> = BTreeMap::new();
    for o in &graph.line_observations {
        let pose = graph.pose(o.pose)?;
        let n_c = k.transpose() * o.segment.homogeneous_line();
        if let Some(n_w) = (pose.rotation.inverse() * n_c).try_normalize(0.0) {
            normals.entry(o.line).or_default().push(n_w);
        }
    }
    let mut out = Vec::new();
    for (id, line) in &graph.lines {
        if matches!(line.state, LineState::FixedDirection(_)) {
            continue;
        }
        let Some(ns) = normals.get(id) else { continue };
        let angles_deg = graph
            .axes
            .values()
            .map(|axis| {
                let d = axis.direction();
                let mean = ns
                    .iter()
                    .map(|n| n.dot(&d).abs().min(1.0).asin().to_degrees())
                    .sum::<f64>()
                    / ns.len() as f64;
                (axis.id, mean)
            })
            .collect();
        out.push(LineAxisAngles { line: *id, angles_deg });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmRound {
    pub transitions: Vec<StageTransition>,
    pub associated_lines: usize,
    pub report: OptimizationReport,
    pub deleted_axes: Vec<AxisId>,
}

/// Alternates association, stage update, optimization and axis update.
pub fn run_em(
    graph: &mut FactorGraph,
    policy: &AxisPolicy,
    lm: &LMConfig,
    rounds: usize,
) -> Result<Vec<EmRound>> {
    policy.validate()?;
    let mut out = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let angles = line_axis_angles(graph)?;
        let axes: Vec<_> = graph.axes.values().cloned().collect();
        graph.association = associate(&angles, &axes, policy);
        let transitions = stage_policy(graph)?;
        let report = solve(graph, lm)?;

        for axis in graph.axes.values_mut() {
            axis.member_lines = graph
                .association
                .weights
                .iter()
                .filter_map(|(line, row)| row.get(&axis.id).map(|w| (*line, *w)))
                .collect();
        }
        let axes: Vec<_> = graph.axes.values().cloned().collect();
        let post: BTreeMap<_, _> = axes.iter().map(|a| (a.id, a.dir)).collect();
        let update = update_axes(&axes, &post, policy)?;
        // Lines still anchored to a deleted axis fall back before it goes.
        let doomed: Vec<LineId> = graph
            .lines
            .iter()
            .filter(|(_, v)| {
                matches!(v.state, LineState::Anchored(a)
                    if matches!(a.axis_ref, AxisRef::Axis(ax) if update.deleted.contains(&ax)))
            })
            .map(|(id, _)| *id)
            .collect();
        for id in doomed {
            release_line(graph, id)?;
        }
        for id in &update.deleted {
            graph.association.remove_axis(*id);
        }
        graph.axes = update.axes.into_iter().map(|a| (a.id, a)).collect();
        out.push(EmRound {
            transitions,
            associated_lines: graph.association.weights.len(),
            report,
            deleted_axes: update.deleted,
        });
    }
    Ok(out)
}
