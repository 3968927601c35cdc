//! Factor graph over poses, points, lines and principal axes, and its
//! Levenberg–Marquardt solution.
//!
//! Poses are stored as `T_cw`. Every residual is a 2-vector: pixel
//! reprojection for points, signed endpoint distances for lines, and a
//! latitude/longitude deviation for axes.

mod residuals;
mod solver;
mod stages;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DVector, Vector6};
use serde::{Deserialize, Serialize};

use crate::axes::{AssociationTable, PrincipalAxis};
use crate::error::{Error, Result};
use crate::geometry::{
    latlong_from_direction, orthogonal_basis, reconstruct_line, AnchoredLine, AxisRef,
    CameraIntrinsics, OrthoLine, PluckerLine, Pose, Segment2D, Vec3,
};
use crate::ids::{AxisId, LineId, PointId, PoseId};

pub use residuals::*;
pub use solver::*;
pub use stages::*;

/// Optimization stage of a structural line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Anchored to a constant per-line vanishing direction.
    InitialTempAxis,
    /// Free orthonormal representation, not bound to an axis.
    OrthoFallback,
    /// Anchored to one or more principal axes.
    AxisAnchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LineState {
    Anchored(AnchoredLine),
    Ortho(OrthoLine),
    /// Direction held constant; the moment moves in the plane orthogonal to
    /// it (two parameters). Only used by the two-parameter baseline.
    FixedDirection(PluckerLine),
}

impl LineState {
    /// Stage implied by the state. The fixed-direction baseline has none.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            LineState::Anchored(a) => Some(match a.axis_ref {
                AxisRef::Temporary(_) => Stage::InitialTempAxis,
                AxisRef::Axis(_) => Stage::AxisAnchored,
            }),
            LineState::Ortho(_) => Some(Stage::OrthoFallback),
            LineState::FixedDirection(_) => None,
        }
    }

    /// Number of per-line free scalars.
    pub fn dim(&self) -> usize {
        match self {
            LineState::Anchored(_) => 1,
            LineState::Ortho(_) => 4,
            LineState::FixedDirection(_) => 2,
        }
    }
}

/// Anchor pixel and reference keyframe a line keeps across stage changes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineAnchor {
    pub pixel: [f64; 2],
    pub ref_keyframe: PoseId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseVertex {
    pub pose: Pose,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointVertex {
    pub position: Vec3,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineVertex {
    pub state: LineState,
    #[serde(default)]
    pub anchor: Option<LineAnchor>,
    /// Number of solves this line has taken part in.
    #[serde(default)]
    pub optimized: u32,
}

impl LineVertex {
    pub fn new(state: LineState) -> Self {
        let anchor = match &state {
            LineState::Anchored(a) => Some(LineAnchor {
                pixel: a.anchor_pixel,
                ref_keyframe: a.ref_keyframe,
            }),
            _ => None,
        };
        LineVertex {
            state,
            anchor,
            optimized: 0,
        }
    }

    pub fn with_anchor(mut self, anchor: LineAnchor) -> Self {
        self.anchor = Some(anchor);
        self
    }

    pub fn stage(&self) -> Option<Stage> {
        self.state.stage()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointObservation {
    pub pose: PoseId,
    pub point: PointId,
    pub pixel: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineObservation {
    pub pose: PoseId,
    pub line: LineId,
    pub segment: Segment2D,
}

/// Scalar information weights per residual family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Information {
    /// Point reprojection, px⁻².
    pub point: f64,
    /// Structural and orthonormal line residuals, px⁻².
    pub line: f64,
    /// Axis prior, rad⁻².
    pub axis: f64,
    /// Scale gauge, world units⁻².
    pub scale: f64,
}

impl Default for Information {
    fn default() -> Self {
        Information {
            point: 1.0,
            line: 1.0,
            axis: 1.0 / 5f64.to_radians().powi(2),
            scale: 1e6,
        }
    }
}

impl Information {
    pub fn validate(&self) -> Result<()> {
        if !(self.point > 0.0 && self.line > 0.0 && self.axis > 0.0 && self.scale > 0.0) {
            return Err(Error::InvalidConfig(
                "information: weights must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Holds the mean distance from one camera center to a set of others. With
/// only one fixed pose a monocular graph keeps a free global scale; this
/// prior removes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGauge {
    pub reference: PoseId,
    pub poses: Vec<PoseId>,
    pub mean_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorGraph {
    pub intrinsics: CameraIntrinsics,
    pub poses: BTreeMap<PoseId, PoseVertex>,
    pub points: BTreeMap<PointId, PointVertex>,
    pub lines: BTreeMap<LineId, LineVertex>,
    pub axes: BTreeMap<AxisId, PrincipalAxis>,
    pub point_observations: Vec<PointObservation>,
    pub line_observations: Vec<LineObservation>,
    #[serde(default)]
    pub association: AssociationTable,
    #[serde(default)]
    pub information: Information,
    #[serde(default)]
    pub scale_gauge: Option<ScaleGauge>,
}

/// Where an anchored structural residual takes its direction from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DirectionSource {
    Temporary(Vec3),
    Axis(AxisId),
}

impl FactorGraph {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        FactorGraph {
            intrinsics,
            poses: BTreeMap::new(),
            points: BTreeMap::new(),
            lines: BTreeMap::new(),
            axes: BTreeMap::new(),
            point_observations: Vec::new(),
            line_observations: Vec::new(),
            association: AssociationTable::default(),
            information: Information::default(),
            scale_gauge: None,
        }
    }

    pub fn pose(&self, id: PoseId) -> Result<&Pose> {
        self.poses
            .get(&id)
            .map(|p| &p.pose)
            .ok_or_else(|| Error::InvalidGraph(format!("unknown {id}")))
    }

    pub fn axis(&self, id: AxisId) -> Result<&PrincipalAxis> {
        self.axes
            .get(&id)
            .ok_or_else(|| Error::InvalidGraph(format!("unknown {id}")))
    }

    /// Checks references, stage tags and gauge.
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.information.validate()?;
        if !self.poses.values().any(|p| p.fixed) {
            return Err(Error::InvalidGraph("no fixed pose".into()));
        }
        for o in &self.point_observations {
            self.pose(o.pose)?;
            if !self.points.contains_key(&o.point) {
                return Err(Error::InvalidGraph(format!("unknown {}", o.point)));
            }
        }
        for o in &self.line_observations {
            self.pose(o.pose)?;
            if !self.lines.contains_key(&o.line) {
                return Err(Error::InvalidGraph(format!("unknown {}", o.line)));
            }
        }
        for (id, line) in &self.lines {
            if let LineState::Anchored(a) = &line.state {
                self.pose(a.ref_keyframe)?;
                if !(a.inv_depth > 0.0) {
                    return Err(Error::InvalidGraph(format!(
                        "{id}: non-positive inverse depth"
                    )));
                }
                if let AxisRef::Axis(ax) = a.axis_ref {
                    self.axis(ax)?;
                }
            }
            if let Some(anchor) = &line.anchor {
                self.pose(anchor.ref_keyframe)?;
            }
        }
        if let Some(g) = &self.scale_gauge {
            self.pose(g.reference)?;
            for id in &g.poses {
                self.pose(*id)?;
            }
            let distinct = g.poses.iter().collect::<BTreeSet<_>>().len() == g.poses.len();
            if g.poses.is_empty()
                || !distinct
                || g.poses.contains(&g.reference)
                || !(g.mean_distance > 0.0)
                || !g.mean_distance.is_finite()
            {
                return Err(Error::InvalidGraph(
                    "scale gauge needs distinct poses apart from the reference and a positive distance"
                        .into(),
                ));
            }
        }
        for (line, row) in &self.association.weights {
            if !self.lines.contains_key(line) {
                return Err(Error::InvalidGraph(format!("association for unknown {line}")));
            }
            for axis in row.keys() {
                self.axis(*axis)?;
            }
        }
        Ok(())
    }

    /// Direction sources and weights for an anchored line's residuals.
    ///
    /// An axis-anchored line with an association row contributes one
    /// residual per axis of positive weight; without a row it uses its own
    /// axis with weight 1. Zero weights are skipped entirely.
    pub fn direction_sources(&self, id: LineId, line: &AnchoredLine) -> Vec<(DirectionSource, f64)> {
        match line.axis_ref {
            AxisRef::Temporary(d) => vec![(DirectionSource::Temporary(Vec3::from(d)), 1.0)],
            AxisRef::Axis(a) => match self.association.row(id) {
                Some(row) if !row.is_empty() => row
                    .iter()
                    .filter(|(_, &w)| w > 0.0)
                    .map(|(&ax, &w)| (DirectionSource::Axis(ax), w))
                    .collect(),
                _ => vec![(DirectionSource::Axis(a), 1.0)],
            },
        }
    }

    pub fn source_direction(&self, src: &DirectionSource) -> Result<Vec3> {
        match src {
            DirectionSource::Temporary(d) => Ok(*d),
            DirectionSource::Axis(a) => Ok(self.axis(*a)?.direction()),
        }
    }

    /// Current world-frame Plücker line. Anchored lines use the direction of
    /// their own axis reference.
    pub fn world_line(&self, id: LineId) -> Result<PluckerLine> {
        let line = self
            .lines
            .get(&id)
            .ok_or_else(|| Error::InvalidGraph(format!("unknown {id}")))?;
        match &line.state {
            LineState::Anchored(a) => {
                let dir = match a.axis_ref {
                    AxisRef::Temporary(d) => Vec3::from(d),
                    AxisRef::Axis(ax) => self.axis(ax)?.direction(),
                };
                let ref_wc = self.pose(a.ref_keyframe)?.inverse();
                reconstruct_line(a, &dir, &ref_wc, &self.intrinsics)
            }
            LineState::Ortho(o) => Ok(o.to_plucker()),
            LineState::FixedDirection(l) => Ok(*l),
        }
    }

    pub fn world_lines(&self) -> Result<BTreeMap<LineId, PluckerLine>> {
        self.lines
            .keys()
            .map(|&id| Ok((id, self.world_line(id)?)))
            .collect()
    }

    /// Axes that carry free parameters: those an anchored line draws its
    /// direction from with positive weight.
    pub fn active_axes(&self) -> BTreeSet<AxisId> {
        let mut out = BTreeSet::new();
        for (id, line) in &self.lines {
            if let LineState::Anchored(a) = &line.state {
                for (src, _) in self.direction_sources(*id, a) {
                    if let DirectionSource::Axis(ax) = src {
                        out.insert(ax);
                    }
                }
            }
        }
        out
    }

    /// Column layout of the free parameters.
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    /// Applies a tangent-space step laid out by `layout`.
    pub fn apply_step(&mut self, layout: &ParamLayout, delta: &DVector<f64>) -> Result<()> {
        if delta.len() != layout.dim {
            return Err(Error::Mismatch(format!(
                "step has {} entries, layout {}",
                delta.len(),
                layout.dim
            )));
        }
        for (id, &off) in &layout.poses {
            let v = self.poses.get_mut(id).expect("layout matches graph");
            let d = Vector6::from_iterator(delta.rows(off, 6).iter().copied());
            v.pose = v.pose.retract(&d);
        }
        for (id, &off) in &layout.points {
            let v = self.points.get_mut(id).expect("layout matches graph");
            v.position += delta.fixed_rows::<3>(off);
        }
        for (id, &off) in &layout.lines {
            let v = self.lines.get_mut(id).expect("layout matches graph");
            match &mut v.state {
                LineState::Anchored(a) => a.inv_depth += delta[off],
                LineState::Ortho(o) => {
                    let dpsi = Vec3::new(delta[off], delta[off + 1], delta[off + 2]);
                    *o = o.retract(&dpsi, delta[off + 3]);
                }
                LineState::FixedDirection(l) => {
                    let (e1, e2) = orthogonal_basis(&l.v);
                    l.n += e1 * delta[off] + e2 * delta[off + 1];
                }
            }
        }
        for (id, &off) in &layout.axes {
            let axis = self.axes.get_mut(id).expect("layout matches graph");
            let v = retract_direction(&axis.direction(), delta[off], delta[off + 1]);
            axis.dir = latlong_from_direction(&v)?;
        }
        Ok(())
    }
}

/// `v ← exp([δ₁ b₁ + δ₂ b₂]×) v` with `(b₁, b₂)` the orthonormal basis of
/// the plane orthogonal to `v`.
pub fn retract_direction(v: &Vec3, d1: f64, d2: f64) -> Vec3 {
    let (b1, b2) = orthogonal_basis(v);
    let w = b1 * d1 + b2 * d2;
    (nalgebra::Rotation3::new(w) * v).normalize()
}

/// Free-parameter counts by vertex family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub pose: usize,
    pub point: usize,
    pub line: usize,
    pub axis: usize,
}

impl ParamCounts {
    /// Scalars that describe lines: per-line parameters plus shared axes.
    pub fn line_related(&self) -> usize {
        self.line + self.axis
    }

    pub fn total(&self) -> usize {
        self.pose + self.point + self.line + self.axis
    }
}

/// Column offsets of every free vertex, in the order poses, points, lines,
/// axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub poses: BTreeMap<PoseId, usize>,
    pub points: BTreeMap<PointId, usize>,
    pub lines: BTreeMap<LineId, usize>,
    pub axes: BTreeMap<AxisId, usize>,
    pub counts: ParamCounts,
    pub dim: usize,
}

impl ParamLayout {
    fn new(graph: &FactorGraph) -> Self {
        let mut off = 0;
        let mut counts = ParamCounts::default();
        let mut poses = BTreeMap::new();
        for (id, p) in &graph.poses {
            if !p.fixed {
                poses.insert(*id, off);
                off += 6;
                counts.pose += 6;
            }
        }
        let mut points = BTreeMap::new();
        for (id, p) in &graph.points {
            if !p.fixed {
                points.insert(*id, off);
                off += 3;
                counts.point += 3;
            }
        }
        let mut lines = BTreeMap::new();
        for (id, l) in &graph.lines {
            lines.insert(*id, off);
            off += l.state.dim();
            counts.line += l.state.dim();
        }
        let mut axes = BTreeMap::new();
        for id in graph.active_axes() {
            axes.insert(id, off);
            off += 2;
            counts.axis += 2;
        }
        ParamLayout {
            poses,
            points,
            lines,
            axes,
            counts,
            dim: off,
        }
    }
}

#[cfg(test)]
mod tests;
