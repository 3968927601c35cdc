//! Line representations and the camera model.
//!
//! Three line parameterizations share one set of conventions here:
//!
//! * [`PluckerLine`]: the over-parameterized `(n, v)` pair, used as the
//!   exchange format between everything else.
//! * [`OrthoLine`]: the minimal `(U, W) ∈ SO(3) × SO(2)` representation.
//! * [`AnchoredLine`]: a fixed anchor pixel in a reference keyframe, an
//!   inverse depth along the anchor ray, and a shared axis direction.
//!
//! Poses are rigid transforms. A pose stored as `T_cw` maps world points into
//! the camera frame; its [`Pose::inverse`] is `T_wc`.

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{AxisId, PoseId};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// `l1² + l2²` below this marks a projected line as degenerate.
pub const DEGENERATE_PROJECTION_EPS: f64 = 1e-20;

/// Skew-symmetric matrix with `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A unit vector orthogonal to `v`, chosen deterministically.
pub fn any_orthogonal(v: &Vec3) -> Vec3 {
    let a = v.abs();
    let helper = if a.x <= a.y && a.x <= a.z {
        Vec3::x()
    } else if a.y <= a.z {
        Vec3::y()
    } else {
        Vec3::z()
    };
    v.cross(&helper).normalize()
}

/// Orthonormal basis `(e1, e2)` of the plane orthogonal to `v`.
pub fn orthogonal_basis(v: &Vec3) -> (Vec3, Vec3) {
    let vn = v.normalize();
    let e1 = any_orthogonal(&vn);
    let e2 = vn.cross(&e1);
    (e1, e2)
}

/// Angle between two vectors in radians, `[0, π]`.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    // atan2 form stays accurate for nearly parallel vectors.
    a.cross(b).norm().atan2(a.dot(b))
}

/// Angle between two line directions (sign-free), radians in `[0, π/2]`.
pub fn line_angle(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b).abs())
}

/// Flip `v` so that its first non-negligible component is positive.
pub fn canonical_sign(v: &Vec3) -> Vec3 {
    let scale = v.amax().max(f64::MIN_POSITIVE);
    for i in 0..3 {
        if v[i].abs() > 1e-12 * scale {
            return if v[i] < 0.0 { -v } else { *v };
        }
    }
    *v
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    /// Row-major rotation matrix.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let m = p.rotation.matrix();
        let mut rotation = [[0.0; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            for (c, x) in row.iter_mut().enumerate() {
                *x = m[(r, c)];
            }
        }
        PoseRepr {
            rotation,
            translation: p.translation.into(),
        }
    }
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        let m = Mat3::from_fn(|i, j| r.rotation[i][j]);
        Pose {
            rotation: Rotation3::from_matrix_unchecked(m),
            translation: r.translation.into(),
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Pose from an axis-angle rotation vector and a translation.
    pub fn from_rotvec(rotvec: Vec3, translation: Vec3) -> Self {
        Pose::new(Rotation3::new(rotvec), translation)
    }

    /// Camera pose `T_cw` of a camera at `center` looking at `target`, with
    /// image "down" (camera +y) as close as possible to `-up`.
    pub fn look_at(center: &Vec3, target: &Vec3, up: &Vec3) -> Self {
        let z = (target - center).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(&x);
        // Rows of R_cw are the camera axes expressed in world coordinates.
        let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = Rotation3::from_matrix_unchecked(r);
        Pose::new(rotation, -(rotation * center))
    }

    pub fn rotation_matrix(&self) -> &Mat3 {
        self.rotation.matrix()
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Left perturbation used by the optimizer: `R ← exp(ω) R`, `t ← t + ρ`
    /// with `delta = [ρ, ω]`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let rho = delta.fixed_rows::<3>(0).into_owned();
        let omega = delta.fixed_rows::<3>(3).into_owned();
        let rotation = Rotation3::new(omega) * self.rotation;
        // Re-orthonormalize to keep numerical drift out of long runs.
        let rotation = Rotation3::from_matrix(rotation.matrix());
        Pose::new(rotation, self.translation + rho)
    }

    /// Orthonormality residual `‖RᵀR − I‖`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation.matrix();
        (r.transpose() * r - Mat3::identity()).norm()
    }

    /// Camera center in world coordinates, for a pose stored as `T_cw`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "intrinsics need fx > 0 and fy > 0, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹ · [u, v, 1]ᵀ`: the back-projection ray with unit depth.
    pub fn unproject(&self, pixel: &Vec2) -> Vec3 {
        Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    /// Pixel of a camera-frame point; `None` when `z` is not positive.
    pub fn project(&self, p_c: &Vec3) -> Option<Vec2> {
        if p_c.z <= f64::EPSILON {
            return None;
        }
        Some(Vec2::new(
            self.fx * p_c.x / p_c.z + self.cx,
            self.fy * p_c.y / p_c.z + self.cy,
        ))
    }

    /// Image of a camera-frame direction: the homogeneous point `K · d`.
    pub fn vanishing_point(&self, d_c: &Vec3) -> Vec3 {
        self.matrix() * d_c
    }

    /// Line projection matrix
    /// `K_L = [[fy, 0, 0], [0, fx, 0], [-fy·cx, -fx·cy, fx·fy]]`.
    pub fn line_projection_matrix(&self) -> Mat3 {
        Mat3::new(
            self.fy,
            0.0,
            0.0,
            0.0,
            self.fx,
            0.0,
            -self.fy * self.cx,
            -self.fx * self.cy,
            self.fx * self.fy,
        )
    }
}

/// Plücker line `(n, v)`: moment `n = P × v` and direction `v`.
///
/// Stored unnormalized; compare lines with [`PluckerLine::projective_distance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PluckerLine {
    pub n: Vec3,
    pub v: Vec3,
}

impl PluckerLine {
    /// Builds a line, removing any component of `n` along `v` so the pair
    /// satisfies the Klein quadric `n · v = 0`.
    pub fn new(n: Vec3, v: Vec3) -> Result<Self> {
        let vv = v.norm_squared();
        if !(vv > 1e-24) || !vv.is_finite() {
            return Err(Error::InvalidLine("zero direction"));
        }
        let n = n - v * (n.dot(&v) / vv);
        Ok(PluckerLine { n, v })
    }

    /// Line through `point` with direction `v`.
    pub fn from_point_direction(point: &Vec3, v: &Vec3) -> Result<Self> {
        PluckerLine::new(point.cross(v), *v)
    }

    /// Stacked `[n; v]`.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.n.x, self.n.y, self.n.z, self.v.x, self.v.y, self.v.z)
    }

    /// Unit 6-vector with the first non-negligible component of `v` positive.
    pub fn canonical(&self) -> Vector6<f64> {
        let mut x = self.to_vector().normalize();
        let v = Vec3::new(x[3], x[4], x[5]);
        if canonical_sign(&v) != v {
            x = -x;
        }
        x
    }

    /// Distance between unit-normalized 6-vectors, minimized over sign.
    pub fn projective_distance(&self, other: &PluckerLine) -> f64 {
        let a = self.to_vector().normalize();
        let b = other.to_vector().normalize();
        (a - b).norm().min((a + b).norm())
    }

    /// Point on the line closest to the origin.
    pub fn closest_point_to_origin(&self) -> Vec3 {
        self.v.cross(&self.n) / self.v.norm_squared()
    }

    /// Distance of the line from the origin.
    pub fn distance_to_origin(&self) -> f64 {
        self.n.norm() / self.v.norm()
    }

    pub fn scaled(&self, s: f64) -> PluckerLine {
        PluckerLine {
            n: self.n * s,
            v: self.v * s,
        }
    }
}

/// Line through two points: `n = p1 × p2`, `v = p2 − p1`.
pub fn plucker_from_points(p1: &Vec3, p2: &Vec3) -> Result<PluckerLine> {
    if (p2 - p1).norm() <= 1e-12 {
        return Err(Error::InvalidLine("coincident points"));
    }
    PluckerLine::new(p1.cross(p2), p2 - p1)
}

/// Orthonormal representation `(U, W)`.
///
/// `U` is held as a rotation; the optimizer updates it through a 3-vector in
/// the tangent space at the current estimate (see [`OrthoLine::retract`]).
/// `W = [[cos φ, −sin φ], [sin φ, cos φ]]` is held as the angle `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "OrthoRepr", into = "OrthoRepr")]
pub struct OrthoLine {
    pub u: Rotation3<f64>,
    pub phi: f64,
}

#[derive(Serialize, Deserialize)]
struct OrthoRepr {
    /// Row-major `U`.
    u: [[f64; 3]; 3],
    phi: f64,
}

impl From<OrthoLine> for OrthoRepr {
    fn from(o: OrthoLine) -> Self {
        let m = o.u.matrix();
        OrthoRepr {
            u: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
            phi: o.phi,
        }
    }
}

impl From<OrthoRepr> for OrthoLine {
    fn from(r: OrthoRepr) -> Self {
        OrthoLine {
            u: Rotation3::from_matrix_unchecked(Mat3::from_fn(|i, j| r.u[i][j])),
            phi: r.phi,
        }
    }
}

impl OrthoLine {
    /// Rotation vector (log map) of `U`.
    pub fn psi(&self) -> Vec3 {
        self.u.scaled_axis()
    }

    /// `U ← U · exp([δψ]×)`, `φ ← φ + δφ`.
    pub fn retract(&self, dpsi: &Vec3, dphi: f64) -> OrthoLine {
        let u = self.u * Rotation3::new(*dpsi);
        OrthoLine {
            u: Rotation3::from_matrix(u.matrix()),
            phi: self.phi + dphi,
        }
    }

    pub fn to_plucker(&self) -> PluckerLine {
        plucker_from_ortho(self)
    }
}

pub fn ortho_from_plucker(l: &PluckerLine) -> Result<OrthoLine> {
    let vn = l.v.norm();
    if !(vn > 1e-12) {
        return Err(Error::InvalidLine("zero direction"));
    }
    let nn = l.n.norm();
    let u2 = l.v / vn;
    // A line through the origin has no moment; any normal to v spans the
    // plane containing it.
    let u1 = if nn > 1e-12 * vn {
        l.n / nn
    } else {
        any_orthogonal(&u2)
    };
    // Remove residual non-orthogonality before assembling U.
    let u1 = (u1 - u2 * u1.dot(&u2)).normalize();
    let u3 = u1.cross(&u2);
    let m = Mat3::from_columns(&[u1, u2, u3]);
    Ok(OrthoLine {
        u: Rotation3::from_matrix_unchecked(m),
        phi: vn.atan2(nn),
    })
}

pub fn plucker_from_ortho(o: &OrthoLine) -> PluckerLine {
    let m = o.u.matrix();
    let u1: Vec3 = m.column(0).into_owned();
    let u2: Vec3 = m.column(1).into_owned();
    PluckerLine {
        n: u1 * o.phi.cos(),
        v: u2 * o.phi.sin(),
    }
}

/// Axis direction as latitude `phi ∈ [0, π]` and longitude `theta ∈ [0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisDirection {
    pub phi: f64,
    pub theta: f64,
}

impl AxisDirection {
    pub fn to_vector(&self) -> Vec3 {
        direction_from_latlong(self)
    }
}

/// `phi = arccos(v_z/‖v‖)`, `theta = atan2(v_x, v_y) + π`, wrapped to `[0, 2π)`.
/// At the poles (`v_x = v_y = 0`) `theta = π`.
pub fn latlong_from_direction(v: &Vec3) -> Result<AxisDirection> {
    let norm = v.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidDirection);
    }
    let phi = (v.z / norm).clamp(-1.0, 1.0).acos();
    let theta = if v.x == 0.0 && v.y == 0.0 {
        std::f64::consts::PI
    } else {
        wrap_two_pi(v.x.atan2(v.y) + std::f64::consts::PI)
    };
    Ok(AxisDirection { phi, theta })
}

/// Inverse of [`latlong_from_direction`]:
/// `(−sin φ sin θ, −sin φ cos θ, cos φ)`.
pub fn direction_from_latlong(a: &AxisDirection) -> Vec3 {
    let (sp, cp) = a.phi.sin_cos();
    let (st, ct) = a.theta.sin_cos();
    Vec3::new(-sp * st, -sp * ct, cp)
}

/// Partial derivatives of [`direction_from_latlong`] w.r.t. `(phi, theta)`.
pub fn direction_latlong_jacobian(a: &AxisDirection) -> (Vec3, Vec3) {
    let (sp, cp) = a.phi.sin_cos();
    let (st, ct) = a.theta.sin_cos();
    (
        Vec3::new(-cp * st, -cp * ct, -sp),
        Vec3::new(-sp * ct, sp * st, 0.0),
    )
}

pub fn wrap_two_pi(x: f64) -> f64 {
    let t = x.rem_euclid(std::f64::consts::TAU);
    if t >= std::f64::consts::TAU {
        0.0
    } else {
        t
    }
}

/// Wraps an angle difference into `(−π, π]`.
pub fn wrap_pi(x: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let t = (x + pi).rem_euclid(std::f64::consts::TAU) - pi;
    if t <= -pi {
        t + std::f64::consts::TAU
    } else {
        t
    }
}

/// Direction source of an anchored line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisRef {
    /// Shared principal axis.
    Axis(AxisId),
    /// Constant per-line direction (world frame, unit), used before the line
    /// is associated with any axis.
    Temporary([f64; 3]),
}

/// Three-parameter structural line: fixed anchor pixel, inverse depth along
/// the anchor ray, and the direction of an axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchoredLine {
    pub anchor_pixel: [f64; 2],
    pub ref_keyframe: PoseId,
    pub inv_depth: f64,
    pub axis_ref: AxisRef,
}

impl AnchoredLine {
    pub fn anchor(&self) -> Vec2 {
        Vec2::from(self.anchor_pixel)
    }
}

/// Anchor point in the world: `T_wc · (K⁻¹ p̃ / r)`.
pub fn anchor_point(
    anchor_pixel: &Vec2,
    inv_depth: f64,
    ref_pose_wc: &Pose,
    k: &CameraIntrinsics,
) -> Result<Vec3> {
    if !(inv_depth > 0.0) {
        return Err(Error::BehindCamera(inv_depth));
    }
    let p_c = k.unproject(anchor_pixel) / inv_depth;
    Ok(ref_pose_wc.transform_point(&p_c))
}

/// World-frame Plücker line of an anchored line with direction `axis_dir`.
pub fn reconstruct_line(
    line: &AnchoredLine,
    axis_dir: &Vec3,
    ref_pose_wc: &Pose,
    k: &CameraIntrinsics,
) -> Result<PluckerLine> {
    let p_w = anchor_point(&line.anchor(), line.inv_depth, ref_pose_wc, k)?;
    PluckerLine::from_point_direction(&p_w, axis_dir)
}

/// Inverse depth of the point where the anchor ray meets `line_w` (the ray
/// point closest to the line when the two are skew).
pub fn anchor_inverse_depth(
    line_w: &PluckerLine,
    anchor_pixel: &Vec2,
    ref_pose_wc: &Pose,
    k: &CameraIntrinsics,
) -> Result<f64> {
    let center = ref_pose_wc.translation;
    let ray = ref_pose_wc.rotation * k.unproject(anchor_pixel);
    let u = line_w.v.normalize();
    let p0 = line_w.closest_point_to_origin();
    let w0 = center - p0;
    let a = ray.norm_squared();
    let b = ray.dot(&u);
    let d = ray.dot(&w0);
    let e = u.dot(&w0);
    let denom = a - b * b;
    if denom <= 1e-12 * a {
        return Err(Error::InvalidLine("line parallel to anchor ray"));
    }
    // Unprojected rays have unit camera depth, so the ray parameter is the depth.
    let depth = (b * e - d) / denom;
    if !(depth > 0.0) {
        return Err(Error::BehindCamera(depth));
    }
    Ok(1.0 / depth)
}

/// World line to camera frame with `T_cw`:
/// `n_c = R n_w + [t]× R v_w`, `v_c = R v_w`.
pub fn transform_line(l: &PluckerLine, t_cw: &Pose) -> PluckerLine {
    let rv = t_cw.rotation * l.v;
    let rn = t_cw.rotation * l.n;
    PluckerLine {
        n: rn + t_cw.translation.cross(&rv),
        v: rv,
    }
}

/// Image line `l′ = K_L · n_c`.
pub fn project_line(l_c: &PluckerLine, k: &CameraIntrinsics) -> Vec3 {
    k.line_projection_matrix() * l_c.n
}

/// 2D line segment observation in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment2D {
    pub s: [f64; 2],
    pub e: [f64; 2],
}

impl Segment2D {
    pub fn new(s: Vec2, e: Vec2) -> Result<Self> {
        if s == e {
            return Err(Error::InvalidSegment);
        }
        Ok(Segment2D {
            s: s.into(),
            e: e.into(),
        })
    }

    pub fn start(&self) -> Vec2 {
        Vec2::from(self.s)
    }

    pub fn end(&self) -> Vec2 {
        Vec2::from(self.e)
    }

    pub fn midpoint(&self) -> Vec2 {
        (self.start() + self.end()) * 0.5
    }

    pub fn direction(&self) -> Vec2 {
        self.end() - self.start()
    }

    pub fn length(&self) -> f64 {
        self.direction().norm()
    }

    /// Homogeneous infinite line `s̃ × ẽ`.
    pub fn homogeneous_line(&self) -> Vec3 {
        let s = self.start().push(1.0);
        let e = self.end().push(1.0);
        s.cross(&e)
    }

    pub fn swapped(&self) -> Segment2D {
        Segment2D {
            s: self.e,
            e: self.s,
        }
    }
}

/// Signed endpoint distances to `l′`: `[p̃₁ᵀl′, p̃₂ᵀl′] / √(l₁² + l₂²)`.
pub fn line_reprojection_error(l: &Vec3, obs: &Segment2D) -> Result<Vec2> {
    let nn = l.x * l.x + l.y * l.y;
    if nn < DEGENERATE_PROJECTION_EPS {
        return Err(Error::DegenerateProjection);
    }
    let inv = 1.0 / nn.sqrt();
    let p1 = obs.start().push(1.0);
    let p2 = obs.end().push(1.0);
    Ok(Vec2::new(p1.dot(l) * inv, p2.dot(l) * inv))
}

/// Derivative of [`line_reprojection_error`] with respect to `l′` (2×3).
pub fn line_error_jacobian(l: &Vec3, obs: &Segment2D) -> nalgebra::Matrix2x3<f64> {
    let nn = l.x * l.x + l.y * l.y;
    let s = nn.sqrt();
    let s3 = nn * s;
    let mut j = nalgebra::Matrix2x3::zeros();
    for (row, p) in [obs.start(), obs.end()].iter().enumerate() {
        let ph = p.push(1.0);
        let dot = ph.dot(l);
        j[(row, 0)] = ph.x / s - dot * l.x / s3;
        j[(row, 1)] = ph.y / s - dot * l.y / s3;
        j[(row, 2)] = 1.0 / s;
    }
    j
}

/// Unit vector from a possibly unnormalized direction.
pub fn unit(v: &Vec3) -> Result<Unit<Vec3>> {
    Unit::try_new(*v, 1e-300).ok_or(Error::InvalidDirection)
}
