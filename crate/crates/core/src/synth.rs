//! Synthetic structured scenes and the parameterization benchmark.
//!
//! A scene holds ground truth, noisy observations and a perturbed initial
//! estimate. The same seed gives the same structure and observations in
//! every scenario; scenarios differ only in how the poses are initialized
//! and whether they are held fixed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::axes::PrincipalAxis;
use crate::ba::{
    solve, FactorGraph, Information, LMConfig, LineObservation, LineState, LineVertex,
    PointObservation, PointVertex, PoseVertex, ScaleGauge, Termination,
};
use crate::error::{Error, Result};
use crate::geometry::{
    any_orthogonal, ortho_from_plucker, plucker_from_points, reconstruct_line, AnchoredLine,
    AxisRef, CameraIntrinsics, PluckerLine, Pose, Segment2D, Vec2, Vec3,
};
use crate::ids::{AxisId, LineId, PointId, PoseId};

/// Projected segments shorter than this in any view are resampled.
const MIN_SEGMENT_PX: f64 = 20.0;
const MAX_RESAMPLES: usize = 1000;

/// Environment variable capping the benchmark thread pool.
pub const THREADS_ENV: &str = "AXISLINE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Fixed,
    Small,
    Large,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Fixed, Scenario::Small, Scenario::Large];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Fixed => "fixed",
            Scenario::Small => "small",
            Scenario::Large => "large",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario `{s}`")))
    }
}

/// Line representation used by a benchmark run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Parameterization {
    /// Direction fixed to the initial axis estimate, two positional scalars.
    #[serde(rename = "2p")]
    TwoP,
    /// Free orthonormal representation.
    #[serde(rename = "4p")]
    FourP,
    /// Inverse depth per line plus shared axes.
    #[serde(rename = "3p")]
    ThreeP,
}

impl Parameterization {
    pub const ALL: [Parameterization; 3] = [
        Parameterization::TwoP,
        Parameterization::FourP,
        Parameterization::ThreeP,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Parameterization::TwoP => "2p",
            Parameterization::FourP => "4p",
            Parameterization::ThreeP => "3p",
        }
    }

    /// Line-related scalars for `n_lines` lines on `n_axes` axes.
    pub fn line_params(&self, n_lines: usize, n_axes: usize) -> usize {
        match self {
            Parameterization::TwoP => 2 * n_lines,
            Parameterization::FourP => 4 * n_lines,
            Parameterization::ThreeP => n_lines + 2 * n_axes,
        }
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Parameterization::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameterization `{s}`")))
    }
}

/// Camera centers on a horizontal arc around the origin, all looking at it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Trajectory {
    pub radius: f64,
    /// Angle between consecutive poses along the arc, degrees.
    pub step_deg: f64,
    /// Height of the camera centers.
    pub height: f64,
    /// Azimuth of the first pose, degrees.
    pub start_deg: f64,
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory {
            radius: 8.0,
            step_deg: 1.0,
            height: 4.0,
            start_deg: -135.0,
        }
    }
}

/// Standard deviation of the initial pose error: per-axis rotation vector
/// components in degrees, per-axis translation in world units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseNoise {
    pub rotation_deg: f64,
    pub translation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseNoiseTable {
    pub fixed: PoseNoise,
    pub small: PoseNoise,
    pub large: PoseNoise,
}

impl Default for PoseNoiseTable {
    fn default() -> Self {
        PoseNoiseTable {
            fixed: PoseNoise::default(),
            small: PoseNoise {
                rotation_deg: 0.5,
                translation: 0.02,
            },
            large: PoseNoise {
                rotation_deg: 3.0,
                translation: 0.2,
            },
        }
    }
}

impl PoseNoiseTable {
    pub fn get(&self, s: Scenario) -> PoseNoise {
        match s {
            Scenario::Fixed => self.fixed,
            Scenario::Small => self.small,
            Scenario::Large => self.large,
        }
    }
}

/// Initial line error: relative standard deviation of the inverse depth of
/// the anchor point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineInitNoise {
    pub inv_depth_rel: f64,
}

impl Default for LineInitNoise {
    fn default() -> Self {
        LineInitNoise { inv_depth_rel: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_axes: usize,
    pub lines_per_axis: usize,
    /// Largest deviation of a true line direction from its axis, degrees.
    pub axis_angular_spread_deg: f64,
    pub n_points: usize,
    pub n_poses: usize,
    pub trajectory: Trajectory,
    /// Half extent of the cube holding lines and points.
    pub extent: f64,
    /// Half length range of the true segments.
    pub half_length: [f64; 2],
    pub intrinsics: CameraIntrinsics,
    /// Per-coordinate observation noise on points and segment endpoints, px.
    pub pixel_noise_sigma: f64,
    pub pose_noise: PoseNoiseTable,
    pub line_init_noise: LineInitNoise,
    /// Angular error of the initial axis estimates, degrees.
    pub axis_init_noise_deg: f64,
    /// Per-coordinate error of the initial points, world units.
    pub point_init_noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_axes: 3,
            lines_per_axis: 20,
            axis_angular_spread_deg: 2.0,
            n_points: 50,
            n_poses: 10,
            trajectory: Trajectory::default(),
            extent: 2.0,
            half_length: [1.4, 2.8],
            intrinsics: CameraIntrinsics::default(),
            pixel_noise_sigma: 1.0,
            pose_noise: PoseNoiseTable::default(),
            line_init_noise: LineInitNoise::default(),
            axis_init_noise_deg: 2.0,
            point_init_noise: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("scene: {m}")));
        if self.n_axes == 0 || self.lines_per_axis == 0 || self.n_poses == 0 {
            return bad("n_axes, lines_per_axis and n_poses must be positive");
        }
        if self.n_points == 0 {
            return bad("n_points must be positive");
        }
        let t = &self.trajectory;
        if !(t.radius > 0.0) || !t.step_deg.is_finite() || !t.height.is_finite() || !t.start_deg.is_finite() {
            return bad("trajectory needs a positive radius and finite angles");
        }
        if !(self.extent > 0.0) {
            return bad("extent must be positive");
        }
        if !(self.half_length[0] > 0.0 && self.half_length[1] >= self.half_length[0]) {
            return bad("half_length must be an increasing positive range");
        }
        let noises = [
            self.axis_angular_spread_deg,
            self.pixel_noise_sigma,
            self.pose_noise.fixed.rotation_deg,
            self.pose_noise.fixed.translation,
            self.pose_noise.small.rotation_deg,
            self.pose_noise.small.translation,
            self.pose_noise.large.rotation_deg,
            self.pose_noise.large.translation,
            self.line_init_noise.inv_depth_rel,
            self.axis_init_noise_deg,
            self.point_init_noise,
        ];
        if noises.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return bad("spread and noise levels must be finite and non-negative");
        }
        self.intrinsics.validate()
    }

    /// Same scene with every noise source switched off.
    pub fn noise_free(&self) -> SceneConfig {
        SceneConfig {
            pixel_noise_sigma: 0.0,
            pose_noise: PoseNoiseTable {
                fixed: PoseNoise::default(),
                small: PoseNoise::default(),
                large: PoseNoise::default(),
            },
            line_init_noise: LineInitNoise { inv_depth_rel: 0.0 },
            axis_init_noise_deg: 0.0,
            point_init_noise: 0.0,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueLine {
    pub axis: AxisId,
    pub start: Vec3,
    pub end: Vec3,
}

impl TrueLine {
    pub fn plucker(&self) -> Result<PluckerLine> {
        plucker_from_points(&self.start, &self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub poses: BTreeMap<PoseId, Pose>,
    pub axes: BTreeMap<AxisId, Vec3>,
    pub lines: BTreeMap<LineId, TrueLine>,
    pub points: BTreeMap<PointId, Vec3>,
}

/// Initial line: anchored on the reference-keyframe observation midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialLine {
    pub axis: AxisId,
    pub anchor_pixel: [f64; 2],
    pub ref_keyframe: PoseId,
    pub inv_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialEstimate {
    pub poses: BTreeMap<PoseId, Pose>,
    pub axes: BTreeMap<AxisId, Vec3>,
    pub lines: BTreeMap<LineId, InitialLine>,
    pub points: BTreeMap<PointId, Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub config: SceneConfig,
    pub scenario: Scenario,
    pub truth: GroundTruth,
    pub point_observations: Vec<PointObservation>,
    pub line_observations: Vec<LineObservation>,
    pub initial: InitialEstimate,
    /// Poses held constant in the optimization.
    pub fixed_poses: BTreeSet<PoseId>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(normal(rng), normal(rng), normal(rng))
}

/// `v` tilted by `angle` radians toward a uniformly random azimuth.
fn tilt(v: &Vec3, angle: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    let u = any_orthogonal(v);
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let axis = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*v), az) * u;
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle) * v
}

fn true_axes(n: usize) -> Vec<Vec3> {
    let mut out = vec![Vec3::z()];
    let horizontal = n - 1;
    for j in 0..horizontal {
        let yaw = (j as f64) * std::f64::consts::PI / horizontal as f64;
        out.push(Vec3::new(yaw.cos(), yaw.sin(), 0.0));
    }
    out
}

fn trajectory(t: &Trajectory, n: usize) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let a = (t.start_deg + t.step_deg * i as f64).to_radians();
            let c = Vec3::new(t.radius * a.cos(), t.radius * a.sin(), t.height);
            Pose::look_at(&c, &Vec3::zeros(), &Vec3::z())
        })
        .collect()
}

fn project(pose: &Pose, k: &CameraIntrinsics, p: &Vec3) -> Option<Vec2> {
    let p_c = pose.transform_point(p);
    if p_c.z <= 1e-6 {
        return None;
    }
    k.project(&p_c)
}

/// Projected segment of `a`–`b`, when both ends are in front.
fn project_segment(pose: &Pose, k: &CameraIntrinsics, a: &Vec3, b: &Vec3) -> Option<(Vec2, Vec2)> {
    Some((project(pose, k, a)?, project(pose, k, b)?))
}

fn long_enough(seg: Option<(Vec2, Vec2)>) -> bool {
    seg.is_some_and(|(s, e)| (s - e).norm() >= MIN_SEGMENT_PX)
}

/// Builds ground truth, observations and the initial estimate for one
/// scenario.
pub fn generate_scene(cfg: &SceneConfig, scenario: Scenario) -> Result<Scene> {
    cfg.validate()?;
    let k = cfg.intrinsics;
    let mut structure = stream(cfg.seed, 0);
    let mut obs_noise = stream(cfg.seed, 1);
    let mut pose_init = stream(cfg.seed, 2);
    let mut other_init = stream(cfg.seed, 3);

    let poses = trajectory(&cfg.trajectory, cfg.n_poses);
    let axes = true_axes(cfg.n_axes);
    let spread = cfg.axis_angular_spread_deg.to_radians();
    let e = cfg.extent;

    let mut truth = GroundTruth {
        poses: poses.iter().enumerate().map(|(i, p)| (PoseId(i as u32), *p)).collect(),
        axes: axes.iter().enumerate().map(|(i, d)| (AxisId(i as u32), *d)).collect(),
        lines: BTreeMap::new(),
        points: BTreeMap::new(),
    };

    let mut lid = 0u32;
    for (ai, axis) in axes.iter().enumerate() {
        for _ in 0..cfg.lines_per_axis {
            let mut chosen = None;
            for _ in 0..MAX_RESAMPLES {
                let c = Vec3::new(
                    structure.random_range(-e..e),
                    structure.random_range(-e..e),
                    structure.random_range(-e..e),
                );
                let dev = spread * structure.random::<f64>();
                let d = tilt(axis, dev, &mut structure);
                let h = if cfg.half_length[1] > cfg.half_length[0] {
                    structure.random_range(cfg.half_length[0]..cfg.half_length[1])
                } else {
                    cfg.half_length[0]
                };
                let (a, b) = (c - d * h, c + d * h);
                let visible = long_enough(project_segment(&poses[0], &k, &a, &b));
                let everywhere = poses.iter().all(|p| long_enough(project_segment(p, &k, &a, &b)));
                if everywhere || (visible && chosen.is_none()) {
                    chosen = Some((a, b));
                }
                if everywhere {
                    break;
                }
            }
            let Some((a, b)) = chosen else {
                return Err(Error::EmptyScene);
            };
            truth.lines.insert(
                LineId(lid),
                TrueLine {
                    axis: AxisId(ai as u32),
                    start: a,
                    end: b,
                },
            );
            lid += 1;
        }
    }
    for i in 0..cfg.n_points {
        let p = Vec3::new(
            structure.random_range(-e..e),
            structure.random_range(-e..e),
            structure.random_range(-e..e),
        );
        truth.points.insert(PointId(i as u32), p);
    }

    let sigma = cfg.pixel_noise_sigma;
    let mut noisy = |p: Vec2| p + Vec2::new(normal(&mut obs_noise), normal(&mut obs_noise)) * sigma;
    let mut line_observations = Vec::new();
    for (pid, pose) in &truth.poses {
        for (id, l) in &truth.lines {
            let Some((s, t)) = project_segment(pose, &k, &l.start, &l.end) else {
                continue;
            };
            if let Ok(segment) = Segment2D::new(noisy(s), noisy(t)) {
                line_observations.push(LineObservation {
                    pose: *pid,
                    line: *id,
                    segment,
                });
            }
        }
    }
    let mut point_observations = Vec::new();
    for (pid, pose) in &truth.poses {
        for (id, p) in &truth.points {
            if let Some(px) = project(pose, &k, p) {
                point_observations.push(PointObservation {
                    pose: *pid,
                    point: *id,
                    pixel: noisy(px).into(),
                });
            }
        }
    }
    if line_observations.is_empty() && point_observations.is_empty() {
        return Err(Error::EmptyScene);
    }

    // Every scenario draws the same standard normals; only the scale differs.
    let pn = cfg.pose_noise.get(scenario);
    let mut init_poses = BTreeMap::new();
    for (pid, pose) in &truth.poses {
        let dr = normal3(&mut pose_init) * pn.rotation_deg.to_radians();
        let dt = normal3(&mut pose_init) * pn.translation;
        let p = if pid.0 == 0 {
            *pose
        } else {
            Pose::new(Rotation3::new(dr) * pose.rotation, pose.translation + dt)
        };
        init_poses.insert(*pid, p);
    }
    let fixed_poses: BTreeSet<PoseId> = match scenario {
        Scenario::Fixed => truth.poses.keys().copied().collect(),
        _ => [PoseId(0)].into_iter().collect(),
    };

    let mut init_axes = BTreeMap::new();
    for (id, d) in &truth.axes {
        let dev = normal(&mut other_init).abs() * cfg.axis_init_noise_deg.to_radians();
        init_axes.insert(*id, tilt(d, dev, &mut other_init).normalize());
    }

    let ref_id = PoseId(0);
    let ref_pose = truth.poses[&ref_id];
    let mut init_lines = BTreeMap::new();
    for obs in line_observations.iter().filter(|o| o.pose == ref_id) {
        let l = &truth.lines[&obs.line];
        let anchor = obs.segment.midpoint();
        let l_w = l.plucker()?;
        let r = crate::geometry::anchor_inverse_depth(&l_w, &anchor, &ref_pose.inverse(), &k)?;
        let scale = (1.0 + cfg.line_init_noise.inv_depth_rel * normal(&mut other_init)).max(0.5);
        init_lines.insert(
            obs.line,
            InitialLine {
                axis: l.axis,
                anchor_pixel: anchor.into(),
                ref_keyframe: ref_id,
                inv_depth: r * scale,
            },
        );
    }
    if init_lines.len() != truth.lines.len() {
        return Err(Error::InconsistentGraph(
            "every line must be observed in the reference keyframe".into(),
        ));
    }
    let init_points = truth
        .points
        .iter()
        .map(|(id, p)| (*id, p + normal3(&mut other_init) * cfg.point_init_noise))
        .collect();

    Ok(Scene {
        config: *cfg,
        scenario,
        truth,
        point_observations,
        line_observations,
        initial: InitialEstimate {
            poses: init_poses,
            axes: init_axes,
            lines: init_lines,
            points: init_points,
        },
        fixed_poses,
    })
}

impl Scene {
    /// World line an initial estimate describes.
    pub fn initial_world_line(&self, l: &InitialLine) -> Result<PluckerLine> {
        let ref_pose = self
            .initial
            .poses
            .get(&l.ref_keyframe)
            .ok_or_else(|| Error::InvalidGraph(format!("unknown {}", l.ref_keyframe)))?;
        let dir = self
            .initial
            .axes
            .get(&l.axis)
            .ok_or_else(|| Error::InvalidGraph(format!("unknown {}", l.axis)))?;
        reconstruct_line(&anchored(l), dir, &ref_pose.inverse(), &self.config.intrinsics)
    }

    pub fn true_world_lines(&self) -> Result<BTreeMap<LineId, PluckerLine>> {
        self.truth.lines.iter().map(|(id, l)| Ok((*id, l.plucker()?))).collect()
    }

    /// Factor graph over the initial estimate with lines in the given form.
    pub fn build_graph(&self, param: Parameterization, settings: &BenchSettings) -> Result<FactorGraph> {
        let mut g = FactorGraph::new(self.config.intrinsics);
        g.information = settings.information;
        if settings.scale_gauge {
            g.scale_gauge = self.scale_gauge();
        }
        for (id, p) in &self.initial.poses {
            g.poses.insert(
                *id,
                PoseVertex {
                    pose: *p,
                    fixed: self.fixed_poses.contains(id),
                },
            );
        }
        for (id, p) in &self.initial.points {
            g.points.insert(*id, PointVertex { position: *p, fixed: false });
        }
        g.point_observations = self.point_observations.clone();
        g.line_observations = self.line_observations.clone();
        if param == Parameterization::ThreeP {
            for (id, d) in &self.initial.axes {
                g.axes.insert(*id, PrincipalAxis::new(*id, d)?);
            }
        }
        for (id, l) in &self.initial.lines {
            let vertex = match param {
                Parameterization::ThreeP => {
                    g.association.assign(*id, l.axis);
                    LineVertex::new(LineState::Anchored(anchored(l)))
                }
                Parameterization::FourP => {
                    LineVertex::new(LineState::Ortho(ortho_from_plucker(&self.initial_world_line(l)?)?))
                }
                Parameterization::TwoP => {
                    LineVertex::new(LineState::FixedDirection(self.initial_world_line(l)?))
                }
            };
            g.lines.insert(*id, vertex);
        }
        g.validate()?;
        Ok(g)
    }

    /// True mean distance from the first camera center to the free ones.
    pub fn scale_gauge(&self) -> Option<ScaleGauge> {
        let (first, c0) = self.truth.poses.first_key_value()?;
        let free: Vec<PoseId> = self.free_poses().into_iter().filter(|id| id != first).collect();
        if free.is_empty() {
            return None;
        }
        let mean_distance = free
            .iter()
            .map(|id| (self.truth.poses[id].center() - c0.center()).norm())
            .sum::<f64>()
            / free.len() as f64;
        Some(ScaleGauge {
            reference: *first,
            poses: free,
            mean_distance,
        })
    }

    pub fn free_poses(&self) -> BTreeSet<PoseId> {
        self.truth
            .poses
            .keys()
            .filter(|id| !self.fixed_poses.contains(id))
            .copied()
            .collect()
    }
}

fn anchored(l: &InitialLine) -> AnchoredLine {
    AnchoredLine {
        anchor_pixel: l.anchor_pixel,
        ref_keyframe: l.ref_keyframe,
        inv_depth: l.inv_depth,
        axis_ref: AxisRef::Axis(l.axis),
    }
}

/// Distance between unit Plücker 6-vectors, the estimate taking whichever
/// sign lies closer to the truth. Equals the distance between canonical
/// forms except when a direction component sits near zero, where the
/// canonical sign is unstable.
fn unit_distance(est: &PluckerLine, truth: &PluckerLine) -> f64 {
    let t = truth.canonical();
    let e = est.canonical();
    (e - t).norm().min((e + t).norm())
}

/// Mean distance between unit Plücker 6-vectors over matched lines.
pub fn error_l(
    estimated: &BTreeMap<LineId, PluckerLine>,
    truth: &BTreeMap<LineId, PluckerLine>,
) -> Result<f64> {
    if estimated.len() != truth.len() || estimated.keys().any(|id| !truth.contains_key(id)) {
        return Err(Error::Mismatch("estimated and true line ids differ".into()));
    }
    if estimated.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = estimated
        .iter()
        .map(|(id, l)| unit_distance(l, &truth[id]))
        .sum();
    Ok(total / estimated.len() as f64)
}

/// Root mean square camera position error over the poses in `estimated`,
/// with no trajectory alignment. Zero when `estimated` is empty.
pub fn trans_rmse(estimated: &BTreeMap<PoseId, Pose>, truth: &BTreeMap<PoseId, Pose>) -> Result<f64> {
    if estimated.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (id, p) in estimated {
        let t = truth
            .get(id)
            .ok_or_else(|| Error::Mismatch(format!("no true pose for {id}")))?;
        sum += (p.center() - t.center()).norm_squared();
    }
    Ok((sum / estimated.len() as f64).sqrt())
}

/// One solved cell of the benchmark grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: Scenario,
    pub param: Parameterization,
    pub seed: u64,
    pub time_s: f64,
    pub error_l: f64,
    pub trans_rmse: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub line_params: usize,
    pub monotone: bool,
    pub diverged: bool,
}

/// Per (scenario, parameterization) means over non-diverged seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario: Scenario,
    pub param: Parameterization,
    pub runs: usize,
    pub diverged_runs: usize,
    /// Set when any seed diverged; those seeds are left out of the means.
    pub diverged: bool,
    pub time_seconds: f64,
    pub error_l: f64,
    pub trans_rmse: f64,
    pub line_params: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub lm: LMConfig,
    pub information: Information,
    /// Hold the first-to-last camera distance at its true value.
    pub scale_gauge: bool,
    /// Each cell is solved this many times and the fastest wall time kept.
    pub timing_repeats: usize,
    /// Pool size; `None` reads the environment, then uses all cores.
    pub threads: Option<usize>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            lm: LMConfig::default(),
            information: Information::default(),
            scale_gauge: false,
            timing_repeats: 3,
            threads: None,
        }
    }
}

impl BenchSettings {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.information.validate()?;
        if self.timing_repeats == 0 {
            return Err(Error::InvalidConfig("bench: timing_repeats must be positive".into()));
        }
        Ok(())
    }
}

/// Thread count from the environment, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|n| *n > 0)
}

/// Solves one scene in one parameterization.
pub fn run_cell(scene: &Scene, param: Parameterization, settings: &BenchSettings) -> Result<BenchRow> {
    let initial = scene.build_graph(param, settings)?;
    let truth_lines = scene.true_world_lines()?;
    let mut graph = initial.clone();
    let start = Instant::now();
    let report = solve(&mut graph, &settings.lm)?;
    let mut time_s = start.elapsed().as_secs_f64();
    // The solver is deterministic, so repeats only sharpen the timing.
    for _ in 1..settings.timing_repeats {
        let mut g = initial.clone();
        let start = Instant::now();
        solve(&mut g, &settings.lm)?;
        time_s = time_s.min(start.elapsed().as_secs_f64());
    }
    let time_s = time_s.max(f64::MIN_POSITIVE);
    let (err, trans) = match graph.world_lines() {
        Ok(lines) => {
            let free: BTreeMap<PoseId, Pose> = scene
                .free_poses()
                .into_iter()
                .map(|id| (id, graph.poses[&id].pose))
                .collect();
            (error_l(&lines, &truth_lines)?, trans_rmse(&free, &scene.truth.poses)?)
        }
        Err(_) => (f64::NAN, f64::NAN),
    };
    let diverged = report.diverged || !err.is_finite() || !trans.is_finite();
    Ok(BenchRow {
        scenario: scene.scenario,
        param,
        seed: scene.config.seed,
        time_s,
        error_l: err,
        trans_rmse: trans,
        initial_cost: report.initial_cost,
        final_cost: report.final_cost,
        iterations: report.iterations,
        termination: report.termination,
        line_params: report.params.line_related(),
        monotone: report.monotone(),
        diverged,
    })
}

/// Runs every (scenario, parameterization, seed) cell. Seeds are
/// `cfg.seed .. cfg.seed + n_seeds`. Rows come back in grid order.
pub fn run_benchmark(
    cfg: &SceneConfig,
    params: &[Parameterization],
    scenarios: &[Scenario],
    n_seeds: usize,
    settings: &BenchSettings,
) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    settings.validate()?;
    let mut jobs = Vec::new();
    for &s in scenarios {
        for i in 0..n_seeds as u64 {
            jobs.push((s, cfg.seed + i));
        }
    }
    let threads = settings.threads.or_else(threads_from_env).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let per_scene: Vec<Result<Vec<BenchRow>>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, seed)| {
                let scene = generate_scene(&SceneConfig { seed, ..*cfg }, s)?;
                params.iter().map(|&p| run_cell(&scene, p, settings)).collect()
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(jobs.len() * params.len());
    for r in per_scene {
        rows.extend(r?);
    }
    rows.sort_by_key(|r| {
        (
            scenarios.iter().position(|s| *s == r.scenario),
            params.iter().position(|p| *p == r.param),
            r.seed,
        )
    });
    Ok(rows)
}

/// Means per (scenario, parameterization), in first-seen order.
pub fn summarize(rows: &[BenchRow]) -> Vec<BenchResult> {
    let mut order: Vec<(Scenario, Parameterization)> = Vec::new();
    for r in rows {
        if !order.contains(&(r.scenario, r.param)) {
            order.push((r.scenario, r.param));
        }
    }
    order
        .into_iter()
        .map(|(s, p)| {
            let cell: Vec<&BenchRow> = rows.iter().filter(|r| r.scenario == s && r.param == p).collect();
            let ok: Vec<&&BenchRow> = cell.iter().filter(|r| !r.diverged).collect();
            let mean = |f: fn(&BenchRow) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            BenchResult {
                scenario: s,
                param: p,
                runs: cell.len(),
                diverged_runs: cell.len() - ok.len(),
                diverged: ok.len() < cell.len(),
                time_seconds: mean(|r| r.time_s),
                error_l: mean(|r| r.error_l),
                trans_rmse: mean(|r| r.trans_rmse),
                line_params: cell[0].line_params,
            }
        })
        .collect()
}

/// CSV with the columns `scenario,param,seed,time_s,error_l,trans_rmse`.
pub fn write_csv<W: std::io::Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidConfig(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "param", "seed", "time_s", "error_l", "trans_rmse"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.scenario.name().to_string(),
            r.param.name().to_string(),
            r.seed.to_string(),
            r.time_s.to_string(),
            r.error_l.to_string(),
            r.trans_rmse.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    Ok(())
}

/// Table I shaped text grid: one row per metric and parameterization, one
/// column per scenario.
pub fn format_table(cells: &[BenchResult]) -> String {
    let mut scenarios: Vec<Scenario> = cells.iter().map(|c| c.scenario).collect();
    scenarios.dedup();
    let mut params: Vec<Parameterization> = Vec::new();
    for c in cells {
        if !params.contains(&c.param) {
            params.push(c.param);
        }
    }
    let mut out = format!("{:<10}{:<6}", "metric", "param");
    for s in &scenarios {
        out.push_str(&format!("{:>12}", s.name()));
    }
    out.push('\n');
    type Metric = (&'static str, fn(&BenchResult) -> f64);
    let metrics: [Metric; 3] = [
        ("time_s", |c| c.time_seconds),
        ("error_l", |c| c.error_l),
        ("trans", |c| c.trans_rmse),
    ];
    for (name, f) in metrics {
        for p in &params {
            out.push_str(&format!("{name:<10}{:<6}", p.name()));
            for s in &scenarios {
                match cells.iter().find(|c| c.scenario == *s && c.param == *p) {
                    Some(c) => {
                        let flag = if c.diverged { "*" } else { " " };
                        out.push_str(&format!("{:>11.4}{flag}", f(c)));
                    }
                    None => out.push_str(&format!("{:>12}", "-")),
                }
            }
            out.push('\n');
        }
    }
    out
}
