//! Residual families and their analytic Jacobians.
//!
//! Pose Jacobians are taken with respect to the left tangent `[ρ, ω]` of
//! [`Pose::retract`]. Axis Jacobians are taken with respect to the local
//! tangent of [`retract_direction`](super::retract_direction).

use std::collections::BTreeMap;

use smallvec::SmallVec;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Matrix3x2, SMatrix, Vector2};

use super::{DirectionSource, FactorGraph, LineState, ParamLayout};
use crate::axes::PrincipalAxis;
use crate::error::{Error, Result};
use crate::geometry::{
    latlong_from_direction, line_error_jacobian, line_reprojection_error, orthogonal_basis,
    plucker_from_ortho, project_line, reconstruct_line, skew, transform_line, wrap_pi,
    AnchoredLine, CameraIntrinsics, OrthoLine, PluckerLine, Pose, Segment2D, Vec2, Vec3,
};
use crate::ids::{AxisId, LineId};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;
pub type Matrix3x6 = SMatrix<f64, 3, 6>;
pub type Matrix2x4 = SMatrix<f64, 2, 4>;

/// Priors closer than this to a pole of the latitude/longitude chart are
/// compared in a chart rotated by 90° about x.
pub const POLE_CHART_DEG: f64 = 20.0;

fn pixel_residual(pose: &Pose, point: &Vec3, obs: &Vec2, k: &CameraIntrinsics) -> Result<(Vec2, Vec3)> {
    let p_c = pose.transform_point(point);
    if !(p_c.z > 0.0) {
        return Err(Error::InvalidDepth(p_c.z));
    }
    let u = k.fx * p_c.x / p_c.z + k.cx;
    let v = k.fy * p_c.y / p_c.z + k.cy;
    Ok((Vec2::new(u - obs.x, v - obs.y), p_c))
}

/// Projected minus observed pixel.
pub fn residual_point(pose: &Pose, point: &Vec3, obs: &Vec2, k: &CameraIntrinsics) -> Result<Vec2> {
    pixel_residual(pose, point, obs, k).map(|(e, _)| e)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointJacobians {
    pub residual: Vec2,
    pub pose: Matrix2x6,
    pub point: Matrix2x3<f64>,
}

pub fn point_jacobians(pose: &Pose, point: &Vec3, obs: &Vec2, k: &CameraIntrinsics) -> Result<PointJacobians> {
    point_jacobians_with(pose, point, obs, k, true)
}

/// Leaves the pose block zero unless `with_pose`.
fn point_jacobians_with(
    pose: &Pose,
    point: &Vec3,
    obs: &Vec2,
    k: &CameraIntrinsics,
    with_pose: bool,
) -> Result<PointJacobians> {
    let (residual, p_c) = pixel_residual(pose, point, obs, k)?;
    let iz = 1.0 / p_c.z;
    let dpi = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p_c.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * p_c.y * iz * iz,
    );
    let mut d_pose = Matrix2x6::zeros();
    if with_pose {
        let rp = pose.rotation * point;
        d_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&dpi);
        d_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dpi * -skew(&rp)));
    }
    Ok(PointJacobians {
        residual,
        pose: d_pose,
        point: dpi * pose.rotation_matrix(),
    })
}

/// Error of a camera-frame line and its derivative with respect to `n_c`.
fn camera_line_error(l_c: &PluckerLine, obs: &Segment2D, k: &CameraIntrinsics) -> Result<(Vec2, Matrix2x3<f64>)> {
    let l = project_line(l_c, k);
    let e = line_reprojection_error(&l, obs)?;
    Ok((e, line_error_jacobian(&l, obs) * k.line_projection_matrix()))
}

/// `∂n_c/∂[ρ, ω]` of the observing pose for a world line.
fn moment_pose_jacobian(pose: &Pose, l_w: &PluckerLine) -> Matrix3x6 {
    let v_c = pose.rotation * l_w.v;
    let rn = pose.rotation * l_w.n;
    let t = skew(&pose.translation);
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&v_c)));
    j.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-skew(&rn) - t * skew(&v_c)));
    j
}

/// `(∂n_c/∂n_w, ∂n_c/∂v_w)`.
fn moment_line_jacobian(pose: &Pose) -> (Matrix3<f64>, Matrix3<f64>) {
    let r = *pose.rotation_matrix();
    (r, skew(&pose.translation) * r)
}

/// Endpoint distances of an observation to a world line seen from `pose`.
pub fn residual_world_line(l_w: &PluckerLine, pose: &Pose, obs: &Segment2D, k: &CameraIntrinsics) -> Result<Vec2> {
    let l_c = transform_line(l_w, pose);
    camera_line_error(&l_c, obs, k).map(|(e, _)| e)
}

/// Three-parameter structural line residual. Poses are `T_cw`.
pub fn residual_structural_line(
    line: &AnchoredLine,
    axis_dir: &Vec3,
    ref_pose: &Pose,
    obs_pose: &Pose,
    obs: &Segment2D,
    k: &CameraIntrinsics,
) -> Result<Vec2> {
    let l_w = reconstruct_line(line, axis_dir, &ref_pose.inverse(), k)?;
    residual_world_line(&l_w, obs_pose, obs, k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuralJacobians {
    pub residual: Vec2,
    pub obs_pose: Matrix2x6,
    pub ref_pose: Matrix2x6,
    pub inv_depth: Vector2<f64>,
    /// With respect to the (unnormalized) direction vector.
    pub direction: Matrix2x3<f64>,
}

pub fn structural_line_jacobians(
    line: &AnchoredLine,
    axis_dir: &Vec3,
    ref_pose: &Pose,
    obs_pose: &Pose,
    obs: &Segment2D,
    k: &CameraIntrinsics,
) -> Result<StructuralJacobians> {
    structural_jacobians_from(&anchored_parts(line, axis_dir, ref_pose, k)?, obs_pose, obs, k)
}

/// The parts of a structural residual that depend only on the line, its
/// direction and its reference keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchoredParts {
    pub line_w: PluckerLine,
    dir: Vec3,
    p_w: Vec3,
    /// `∂P_w/∂[ρ, ω]` of the reference pose.
    dp_ref: Matrix3x6,
    /// `∂P_w/∂r`.
    dp_r: Vec3,
}

pub fn anchored_parts(line: &AnchoredLine, axis_dir: &Vec3, ref_pose: &Pose, k: &CameraIntrinsics) -> Result<AnchoredParts> {
    let r = line.inv_depth;
    if !(r > 0.0) {
        return Err(Error::BehindCamera(r));
    }
    let line_w = reconstruct_line(line, axis_dir, &ref_pose.inverse(), k)?;
    let q = k.unproject(&line.anchor());
    let p_c = q / r;
    let rr_t = ref_pose.rotation_matrix().transpose();
    let mut dp_ref = Matrix3x6::zeros();
    dp_ref.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rr_t));
    dp_ref
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(rr_t * skew(&(p_c - ref_pose.translation))));
    Ok(AnchoredParts {
        line_w,
        dir: *axis_dir,
        p_w: rr_t * (p_c - ref_pose.translation),
        dp_ref,
        dp_r: rr_t * (-q / (r * r)),
    })
}

pub fn structural_jacobians_from(
    parts: &AnchoredParts,
    obs_pose: &Pose,
    obs: &Segment2D,
    k: &CameraIntrinsics,
) -> Result<StructuralJacobians> {
    let l_c = transform_line(&parts.line_w, obs_pose);
    let (residual, g) = camera_line_error(&l_c, obs, k)?;
    let (dn_dn, dn_dv) = moment_line_jacobian(obs_pose);
    // n_w = P_w × v.
    let g_p = g * dn_dn * (-skew(&parts.dir));
    Ok(StructuralJacobians {
        residual,
        obs_pose: g * moment_pose_jacobian(obs_pose, &parts.line_w),
        ref_pose: g_p * parts.dp_ref,
        inv_depth: g_p * parts.dp_r,
        direction: g * (dn_dn * skew(&parts.p_w) + dn_dv),
    })
}

/// Orthonormal-representation line residual.
pub fn residual_ortho_line(line: &OrthoLine, obs_pose: &Pose, obs: &Segment2D, k: &CameraIntrinsics) -> Result<Vec2> {
    residual_world_line(&plucker_from_ortho(line), obs_pose, obs, k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthoJacobians {
    pub residual: Vec2,
    pub pose: Matrix2x6,
    /// With respect to `(δψ, δφ)`.
    pub line: Matrix2x4,
}

pub fn ortho_line_jacobians(
    line: &OrthoLine,
    obs_pose: &Pose,
    obs: &Segment2D,
    k: &CameraIntrinsics,
) -> Result<OrthoJacobians> {
    ortho_line_jacobians_with(line, obs_pose, obs, k, true)
}

fn ortho_line_jacobians_with(
    line: &OrthoLine,
    obs_pose: &Pose,
    obs: &Segment2D,
    k: &CameraIntrinsics,
    with_pose: bool,
) -> Result<OrthoJacobians> {
    let l_w = plucker_from_ortho(line);
    let l_c = transform_line(&l_w, obs_pose);
    let (residual, g) = camera_line_error(&l_c, obs, k)?;
    let (dn_dn, dn_dv) = moment_line_jacobian(obs_pose);
    let u = line.u.matrix();
    let u1: Vec3 = u.column(0).into_owned();
    let u2: Vec3 = u.column(1).into_owned();
    let (s, c) = line.phi.sin_cos();
    let dn_dpsi = -u * skew(&Vec3::x()) * c;
    let dv_dpsi = -u * skew(&Vec3::y()) * s;
    let dncol_dpsi = dn_dn * dn_dpsi + dn_dv * dv_dpsi;
    let dncol_dphi = dn_dn * (-u1 * s) + dn_dv * (u2 * c);
    let mut d = SMatrix::<f64, 3, 4>::zeros();
    d.fixed_view_mut::<3, 3>(0, 0).copy_from(&dncol_dpsi);
    d.set_column(3, &dncol_dphi);
    Ok(OrthoJacobians {
        residual,
        pose: if with_pose { g * moment_pose_jacobian(obs_pose, &l_w) } else { Matrix2x6::zeros() },
        line: g * d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedDirectionJacobians {
    pub residual: Vec2,
    pub pose: Matrix2x6,
    /// With respect to the moment offsets along the basis orthogonal to `v`.
    pub line: Matrix2<f64>,
}

pub fn fixed_direction_jacobians(
    line: &PluckerLine,
    obs_pose: &Pose,
    obs: &Segment2D,
    k: &CameraIntrinsics,
) -> Result<FixedDirectionJacobians> {
    fixed_direction_jacobians_with(line, obs_pose, obs, k, true)
}

fn fixed_direction_jacobians_with(
    line: &PluckerLine,
    obs_pose: &Pose,
    obs: &Segment2D,
    k: &CameraIntrinsics,
    with_pose: bool,
) -> Result<FixedDirectionJacobians> {
    let l_c = transform_line(line, obs_pose);
    let (residual, g) = camera_line_error(&l_c, obs, k)?;
    let (e1, e2) = orthogonal_basis(&line.v);
    let r = obs_pose.rotation_matrix();
    Ok(FixedDirectionJacobians {
        residual,
        pose: if with_pose { g * moment_pose_jacobian(obs_pose, line) } else { Matrix2x6::zeros() },
        line: g * r * nalgebra::Matrix3x2::from_columns(&[e1, e2]),
    })
}

fn axis_chart(prior: &Vec3) -> Matrix3<f64> {
    let p = prior.normalize();
    if p.z.abs() > POLE_CHART_DEG.to_radians().cos() {
        *nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), std::f64::consts::FRAC_PI_2).matrix()
    } else {
        Matrix3::identity()
    }
}

/// Axis deviation from its prior, `(φ − φ_p, wrap(θ − θ_p))`.
pub fn residual_axis(axis: &PrincipalAxis) -> Vec2 {
    axis_residual_and_jacobian(axis).0
}

/// Axis residual and its Jacobian with respect to the local tangent.
pub fn axis_residual_and_jacobian(axis: &PrincipalAxis) -> (Vec2, Matrix2<f64>) {
    let prior = axis.prior();
    let c = axis_chart(&prior);
    let v = axis.direction();
    let vc = c * v;
    let a = latlong_from_direction(&vc).expect("unit direction");
    let p = latlong_from_direction(&(c * prior)).expect("unit direction");
    let e = Vec2::new(a.phi - p.phi, wrap_pi(a.theta - p.theta));

    let sp = a.phi.sin().max(1e-12);
    let rho2 = (vc.x * vc.x + vc.y * vc.y).max(1e-24);
    let de_dv = Matrix2x3::new(
        0.0,
        0.0,
        -1.0 / sp,
        vc.y / rho2,
        -vc.x / rho2,
        0.0,
    );
    let (b1, b2) = orthogonal_basis(&v);
    let dv = nalgebra::Matrix3x2::from_columns(&[b1.cross(&v), b2.cross(&v)]);
    (e, de_dv * c * dv)
}

pub struct ScaleJacobians {
    pub residual: Vec2,
    pub reference: Matrix2x6,
    pub poses: Vec<Matrix2x6>,
}

/// `(mean ‖c_k − c_ref‖ − d, 0)` over camera centers `c = −Rᵀt`, with
/// Jacobians for every pose. Under `R ← exp(ω)R`, `t ← t + ρ` a center moves
/// by `−Rᵀρ − Rᵀ[t]×ω`.
pub fn scale_jacobians(reference: &Pose, poses: &[Pose], distance: f64) -> Result<ScaleJacobians> {
    let dc = |p: &Pose, u: &Vec3| {
        let rt = p.rotation.inverse().into_inner();
        let mut j = Matrix2x6::zeros();
        j.fixed_view_mut::<1, 3>(0, 0).copy_from(&(-u.transpose() * rt));
        j.fixed_view_mut::<1, 3>(0, 3)
            .copy_from(&(-u.transpose() * rt * skew(&p.translation)));
        j
    };
    let k = poses.len() as f64;
    let c0 = reference.center();
    let mut mean = 0.0;
    let mut u_sum = Vec3::zeros();
    let mut out = Vec::with_capacity(poses.len());
    for p in poses {
        let diff = p.center() - c0;
        let d = diff.norm();
        if !(d > 0.0) {
            return Err(Error::InvalidGraph("scale gauge poses share a center".into()));
        }
        let u = diff / d;
        mean += d / k;
        u_sum += u / k;
        out.push(dc(p, &u) / k);
    }
    Ok(ScaleJacobians {
        residual: Vec2::new(mean - distance, 0.0),
        reference: -dc(reference, &u_sum),
        poses: out,
    })
}

/// One residual block of the graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Factor {
    Point { obs: usize },
    Structural { obs: usize, source: DirectionSource, weight: f64 },
    Free { obs: usize },
    Axis(AxisId),
    Scale,
}

impl Factor {
    pub fn is_robust(&self) -> bool {
        !matches!(self, Factor::Axis(_) | Factor::Scale)
    }
}

/// All residual blocks in a fixed order: points, lines, axes.
pub fn factors(graph: &FactorGraph, layout: &ParamLayout) -> Result<Vec<Factor>> {
    let mut out = Vec::with_capacity(
        graph.point_observations.len() + graph.line_observations.len() + layout.axes.len(),
    );
    for i in 0..graph.point_observations.len() {
        out.push(Factor::Point { obs: i });
    }
    for (i, o) in graph.line_observations.iter().enumerate() {
        let line = graph
            .lines
            .get(&o.line)
            .ok_or_else(|| Error::InvalidGraph(format!("unknown {}", o.line)))?;
        match &line.state {
            LineState::Anchored(a) => {
                for (source, weight) in graph.direction_sources(o.line, a) {
                    out.push(Factor::Structural { obs: i, source, weight });
                }
            }
            LineState::Ortho(_) | LineState::FixedDirection(_) => out.push(Factor::Free { obs: i }),
        }
    }
    for id in layout.axes.keys() {
        out.push(Factor::Axis(*id));
    }
    if let Some(g) = &graph.scale_gauge {
        let free = std::iter::once(&g.reference).chain(&g.poses).any(|id| layout.poses.contains_key(id));
        if free {
            out.push(Factor::Scale);
        }
    }
    Ok(out)
}

/// Jacobian block at a column offset; only the first `dim` columns are used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianBlock {
    pub offset: usize,
    pub dim: usize,
    pub j: Matrix2x6,
}

/// A factor evaluated at the current state, before information scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorEval {
    pub residual: Vec2,
    /// `sqrt(w · Ω)` for the factor's family.
    pub sqrt_info: f64,
    pub robust: bool,
    pub blocks: SmallVec<[JacobianBlock; 4]>,
}

impl FactorEval {
    fn push<const C: usize>(&mut self, offset: Option<usize>, j: &SMatrix<f64, 2, C>) {
        let Some(offset) = offset else { return };
        if let Some(b) = self.blocks.iter_mut().find(|b| b.offset == offset) {
            debug_assert_eq!(b.dim, C);
            b.j.fixed_view_mut::<2, C>(0, 0).add_assign(j);
            return;
        }
        let mut full = Matrix2x6::zeros();
        full.fixed_view_mut::<2, C>(0, 0).copy_from(j);
        self.blocks.push(JacobianBlock { offset, dim: C, j: full });
    }
}

use std::ops::AddAssign;

fn is_dropped(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidDepth(_) | Error::BehindCamera(_) | Error::DegenerateProjection
    )
}

/// Dense indices and column offsets of the vertices one factor touches.
#[derive(Debug, Clone, Copy, Default)]
struct Resolved {
    pose: usize,
    pose_off: Option<usize>,
    /// Point, line or axis index, by factor kind.
    vertex: usize,
    vertex_off: Option<usize>,
    ref_pose_off: Option<usize>,
    axis: usize,
    axis_off: Option<usize>,
    /// Index into the anchored-line parts of a snapshot.
    slot: usize,
}

/// A factor list with every id resolved against a graph's vertex order.
/// Valid for any graph with the same vertices, such as a stepped clone.
#[derive(Debug, Clone)]
pub struct FactorPlan {
    pub factors: Vec<Factor>,
    resolved: Vec<Resolved>,
    slots: Vec<Slot>,
    /// Reference first, then the gauge poses.
    scale_offsets: Vec<Option<usize>>,
    /// Pose, point, line and axis counts of the graph it was built for.
    shape: [usize; 4],
}

/// One anchored line seen through one direction source.
#[derive(Debug, Clone, Copy)]
struct Slot {
    line: usize,
    dir: SlotDirection,
    ref_pose: usize,
}

#[derive(Debug, Clone, Copy)]
enum SlotDirection {
    Axis(usize),
    Temporary(Vec3),
}

/// Vertex values of one graph state, gathered once per evaluation pass.
struct Snapshot<'g> {
    poses: Vec<Pose>,
    points: Vec<Vec3>,
    lines: Vec<&'g LineState>,
    axis_vertices: Vec<&'g PrincipalAxis>,
    /// Direction and its tangent basis `[b1 × d, b2 × d]`.
    axes: Vec<(Vec3, Matrix3x2<f64>)>,
    /// `None` when the anchor point is invalid, which drops every residual
    /// of the line.
    anchored: Vec<Option<AnchoredParts>>,
}

fn index_of<K: Ord + Copy, V>(map: &BTreeMap<K, V>) -> BTreeMap<K, usize> {
    map.keys().enumerate().map(|(i, k)| (*k, i)).collect()
}

fn lookup<K: Ord + std::fmt::Display>(index: &BTreeMap<K, usize>, id: &K) -> Result<usize> {
    index
        .get(id)
        .copied()
        .ok_or_else(|| Error::InvalidGraph(format!("unknown {id}")))
}

impl FactorPlan {
    pub fn new(graph: &FactorGraph, layout: &ParamLayout) -> Result<Self> {
        let factors = factors(graph, layout)?;
        let poses = index_of(&graph.poses);
        let points = index_of(&graph.points);
        let lines = index_of(&graph.lines);
        let axes = index_of(&graph.axes);
        let mut slot_of: BTreeMap<(LineId, Option<AxisId>), usize> = BTreeMap::new();
        let mut slots = Vec::new();
        let mut resolved = Vec::with_capacity(factors.len());
        for f in &factors {
            let mut r = Resolved::default();
            match *f {
                Factor::Point { obs } => {
                    let o = &graph.point_observations[obs];
                    r.pose = lookup(&poses, &o.pose)?;
                    r.pose_off = layout.poses.get(&o.pose).copied();
                    r.vertex = lookup(&points, &o.point)?;
                    r.vertex_off = layout.points.get(&o.point).copied();
                }
                Factor::Structural { obs, source, .. } => {
                    let o = &graph.line_observations[obs];
                    let line = anchored(graph, o.line)?;
                    r.pose = lookup(&poses, &o.pose)?;
                    r.pose_off = layout.poses.get(&o.pose).copied();
                    r.vertex = lookup(&lines, &o.line)?;
                    r.vertex_off = layout.lines.get(&o.line).copied();
                    r.ref_pose_off = layout.poses.get(&line.ref_keyframe).copied();
                    let dir = match source {
                        DirectionSource::Axis(a) => {
                            r.axis = lookup(&axes, &a)?;
                            r.axis_off = layout.axes.get(&a).copied();
                            SlotDirection::Axis(r.axis)
                        }
                        DirectionSource::Temporary(d) => SlotDirection::Temporary(d),
                    };
                    let key = (o.line, source_axis(&source));
                    r.slot = match slot_of.get(&key) {
                        Some(&s) => s,
                        None => {
                            slots.push(Slot {
                                line: r.vertex,
                                dir,
                                ref_pose: lookup(&poses, &line.ref_keyframe)?,
                            });
                            slot_of.insert(key, slots.len() - 1);
                            slots.len() - 1
                        }
                    };
                }
                Factor::Free { obs } => {
                    let o = &graph.line_observations[obs];
                    r.pose = lookup(&poses, &o.pose)?;
                    r.pose_off = layout.poses.get(&o.pose).copied();
                    r.vertex = lookup(&lines, &o.line)?;
                    r.vertex_off = layout.lines.get(&o.line).copied();
                }
                Factor::Axis(id) => {
                    r.vertex = lookup(&axes, &id)?;
                    r.vertex_off = layout.axes.get(&id).copied();
                }
                Factor::Scale => {}
            }
            resolved.push(r);
        }
        let scale_offsets = match &graph.scale_gauge {
            Some(g) => std::iter::once(&g.reference)
                .chain(&g.poses)
                .map(|id| layout.poses.get(id).copied())
                .collect(),
            None => Vec::new(),
        };
        Ok(FactorPlan {
            factors,
            resolved,
            slots,
            scale_offsets,
            shape: shape(graph),
        })
    }

    fn snapshot<'g>(&self, graph: &'g FactorGraph) -> Result<Snapshot<'g>> {
        if shape(graph) != self.shape {
            return Err(Error::InconsistentGraph("plan does not match the graph".into()));
        }
        let axes: Vec<_> = graph
            .axes
            .values()
            .map(|a| {
                let d = a.direction();
                let (b1, b2) = orthogonal_basis(&d);
                (d, Matrix3x2::from_columns(&[b1.cross(&d), b2.cross(&d)]))
            })
            .collect();
        let poses: Vec<Pose> = graph.poses.values().map(|v| v.pose).collect();
        let lines: Vec<&LineState> = graph.lines.values().map(|l| &l.state).collect();
        let mut anchored = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            let LineState::Anchored(a) = lines[slot.line] else {
                return Err(Error::InconsistentGraph("plan does not match the graph".into()));
            };
            let dir = match slot.dir {
                SlotDirection::Axis(i) => axes[i].0,
                SlotDirection::Temporary(d) => d,
            };
            anchored.push(match anchored_parts(a, &dir, &poses[slot.ref_pose], &graph.intrinsics) {
                Ok(p) => Some(p),
                Err(e) if is_dropped(&e) => None,
                Err(e) => return Err(e),
            });
        }
        Ok(Snapshot {
            poses,
            points: graph.points.values().map(|p| p.position).collect(),
            lines,
            axis_vertices: graph.axes.values().collect(),
            axes,
            anchored,
        })
    }

    /// Evaluates every factor against `graph`. `visit` receives the factor
    /// index and its evaluation; dropped residuals (behind the camera or a
    /// degenerate projection) are counted and skipped. Without `jacobians`
    /// the blocks are left empty.
    pub fn for_each(
        &self,
        graph: &FactorGraph,
        jacobians: bool,
        mut visit: impl FnMut(usize, &FactorEval),
    ) -> Result<usize> {
        let snap = self.snapshot(graph)?;
        let mut dropped = 0;
        let mut eval = FactorEval {
            residual: Vec2::zeros(),
            sqrt_info: 1.0,
            robust: true,
            blocks: SmallVec::new(),
        };
        for (i, (f, r)) in self.factors.iter().zip(&self.resolved).enumerate() {
            eval.blocks.clear();
            eval.robust = f.is_robust();
            if self.evaluate(graph, &snap, f, r, jacobians, &mut eval)? {
                visit(i, &eval);
            } else {
                dropped += 1;
            }
        }
        Ok(dropped)
    }
}

fn shape(graph: &FactorGraph) -> [usize; 4] {
    [graph.poses.len(), graph.points.len(), graph.lines.len(), graph.axes.len()]
}

fn source_axis(source: &DirectionSource) -> Option<AxisId> {
    match source {
        DirectionSource::Axis(a) => Some(*a),
        DirectionSource::Temporary(_) => None,
    }
}

fn anchored(graph: &FactorGraph, id: LineId) -> Result<&AnchoredLine> {
    match &graph.lines.get(&id).ok_or_else(|| Error::InvalidGraph(format!("unknown {id}")))?.state {
        LineState::Anchored(a) => Ok(a),
        _ => Err(Error::InconsistentGraph(format!("{id} is not anchored"))),
    }
}

impl FactorPlan {
/// Fills `eval` for one factor; false marks a dropped residual.
fn evaluate(
    &self,
    graph: &FactorGraph,
    snap: &Snapshot,
    factor: &Factor,
    r: &Resolved,
    jacobians: bool,
    eval: &mut FactorEval,
) -> Result<bool> {
    let k = &graph.intrinsics;
    let info = &graph.information;
    macro_rules! keep {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) if is_dropped(&e) => return Ok(false),
                Err(e) => return Err(e),
            }
        };
    }
    match *factor {
        Factor::Point { obs } => {
            let px = Vec2::from(graph.point_observations[obs].pixel);
            let pose = &snap.poses[r.pose];
            let point = &snap.points[r.vertex];
            eval.sqrt_info = info.point.sqrt();
            if !jacobians {
                eval.residual = keep!(residual_point(pose, point, &px, k));
                return Ok(true);
            }
            let j = keep!(point_jacobians_with(pose, point, &px, k, r.pose_off.is_some()));
            eval.residual = j.residual;
            eval.push(r.pose_off, &j.pose);
            eval.push(r.vertex_off, &j.point);
        }
        Factor::Structural { obs, weight, .. } => {
            let o = &graph.line_observations[obs];
            let Some(parts) = &snap.anchored[r.slot] else { return Ok(false) };
            let obs_pose = &snap.poses[r.pose];
            eval.sqrt_info = (weight * info.line).sqrt();
            if !jacobians {
                eval.residual = keep!(residual_world_line(&parts.line_w, obs_pose, &o.segment, k));
                return Ok(true);
            }
            // Same products as `structural_jacobians_from`, skipping fixed blocks.
            let l_c = transform_line(&parts.line_w, obs_pose);
            let (residual, g) = keep!(camera_line_error(&l_c, &o.segment, k));
            let rot = obs_pose.rotation_matrix();
            let g_r = g * rot;
            let g_p = g_r * (-skew(&parts.dir));
            eval.residual = residual;
            if r.pose_off.is_some() {
                eval.push(r.pose_off, &(g * moment_pose_jacobian(obs_pose, &parts.line_w)));
            }
            if r.ref_pose_off.is_some() {
                eval.push(r.ref_pose_off, &(g_p * parts.dp_ref));
            }
            eval.push(r.vertex_off, &SMatrix::<f64, 2, 1>::from(g_p * parts.dp_r));
            if let Some(off) = r.axis_off {
                let direction = g_r * skew(&parts.p_w) + g * skew(&obs_pose.translation) * rot;
                eval.push(Some(off), &(direction * snap.axes[r.axis].1));
            }
        }
        Factor::Free { obs } => {
            let o = &graph.line_observations[obs];
            let obs_pose = &snap.poses[r.pose];
            eval.sqrt_info = info.line.sqrt();
            let state = snap.lines[r.vertex];
            if !jacobians {
                let l_w = match state {
                    LineState::Ortho(l) => plucker_from_ortho(l),
                    LineState::FixedDirection(l) => *l,
                    LineState::Anchored(_) => unreachable!("anchored lines use structural factors"),
                };
                eval.residual = keep!(residual_world_line(&l_w, obs_pose, &o.segment, k));
                return Ok(true);
            }
            match state {
                LineState::Ortho(l) => {
                    let j = keep!(ortho_line_jacobians_with(l, obs_pose, &o.segment, k, r.pose_off.is_some()));
                    eval.residual = j.residual;
                    eval.push(r.pose_off, &j.pose);
                    eval.push(r.vertex_off, &j.line);
                }
                LineState::FixedDirection(l) => {
                    let j = keep!(fixed_direction_jacobians_with(l, obs_pose, &o.segment, k, r.pose_off.is_some()));
                    eval.residual = j.residual;
                    eval.push(r.pose_off, &j.pose);
                    eval.push(r.vertex_off, &j.line);
                }
                LineState::Anchored(_) => unreachable!("anchored lines use structural factors"),
            }
        }
        Factor::Scale => {
            let g = graph
                .scale_gauge
                .as_ref()
                .ok_or_else(|| Error::InconsistentGraph("no scale gauge".into()))?;
            eval.sqrt_info = info.scale.sqrt();
            let poses = g.poses.iter().map(|id| graph.pose(*id).copied()).collect::<Result<Vec<_>>>()?;
            let j = scale_jacobians(graph.pose(g.reference)?, &poses, g.mean_distance)?;
            eval.residual = j.residual;
            if jacobians {
                eval.push(self.scale_offsets[0], &j.reference);
                for (off, jp) in self.scale_offsets[1..].iter().zip(&j.poses) {
                    eval.push(*off, jp);
                }
            }
        }
        Factor::Axis(_) => {
            let axis = snap.axis_vertices[r.vertex];
            eval.sqrt_info = info.axis.sqrt();
            let (e, j) = axis_residual_and_jacobian(axis);
            eval.residual = e;
            if jacobians {
                eval.push(r.vertex_off, &j);
            }
        }
    }
    Ok(true)
}
}

/// Huber cost `ρ(s²)` and weight `ρ'` for a whitened residual norm `s`.
/// A non-positive width disables the kernel.
pub fn huber(s: f64, width: f64) -> (f64, f64) {
    if width > 0.0 && s > width {
        (2.0 * width * s - width * width, width / s)
    } else {
        (s * s, 1.0)
    }
}

/// Robustified cost of one evaluated factor and its IRLS row scale.
pub fn factor_cost(eval: &FactorEval, width: f64) -> (f64, f64) {
    let s = eval.sqrt_info * eval.residual.norm();
    let (rho, w) = if eval.robust { huber(s, width) } else { (s * s, 1.0) };
    (rho, eval.sqrt_info * w.sqrt())
}

/// Stacked whitened system at the current state.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    /// Two rows per factor; dropped factors leave zero rows.
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub cost: f64,
    pub layout: ParamLayout,
    pub factors: Vec<Factor>,
    pub dropped: usize,
}

impl Linearization {
    /// Gradient of the cost, `2 Jᵀ r`.
    pub fn gradient(&self) -> DVector<f64> {
        self.jacobian.transpose() * &self.residuals * 2.0
    }
}

/// Stacks every residual family with sqrt-information scaling and the
/// Huber kernel of `robust_width_px` (0 disables it).
pub fn linearize(graph: &FactorGraph, robust_width_px: f64) -> Result<Linearization> {
    graph.validate()?;
    let layout = graph.layout();
    let plan = FactorPlan::new(graph, &layout)?;
    let n = plan.factors.len();
    let mut residuals = DVector::zeros(2 * n);
    let mut jacobian = DMatrix::zeros(2 * n, layout.dim);
    let mut cost = 0.0;
    let dropped = plan.for_each(graph, true, |i, eval| {
        let (rho, scale) = factor_cost(eval, robust_width_px);
        cost += rho;
        residuals.fixed_rows_mut::<2>(2 * i).copy_from(&(eval.residual * scale));
        for b in &eval.blocks {
            let scaled = b.j * scale;
            jacobian
                .view_mut((2 * i, b.offset), (2, b.dim))
                .copy_from(&scaled.columns(0, b.dim));
        }
    })?;
    Ok(Linearization {
        residuals,
        jacobian,
        cost,
        layout,
        factors: plan.factors,
        dropped,
    })
}

/// Robustified total cost without Jacobians; also the number of dropped
/// residuals.
pub fn total_cost(graph: &FactorGraph, plan: &FactorPlan, width: f64) -> Result<(f64, usize)> {
    let mut cost = 0.0;
    let dropped = plan.for_each(graph, false, |_, eval| cost += factor_cost(eval, width).0)?;
    Ok((cost, dropped))
}
