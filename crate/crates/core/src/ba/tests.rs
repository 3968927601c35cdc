use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Rotation3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::axes::{AxisPolicy, PrincipalAxis};
use crate::geometry::{
    anchor_inverse_depth, latlong_from_direction, ortho_from_plucker, AnchoredLine, AxisDirection,
    AxisRef, CameraIntrinsics, PluckerLine, Pose, Segment2D, Vec2, Vec3,
};
use crate::ids::{AxisId, LineId, PointId, PoseId};

fn k() -> CameraIntrinsics {
    CameraIntrinsics::default()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() > 0.1 && v.norm() < 1.0 {
            return v.normalize();
        }
    }
}

fn random_pose(rng: &mut ChaCha8Rng, center_scale: f64) -> Pose {
    let center = Vec3::new(
        rng.random_range(-1.0..1.0),
        -6.0 + rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ) * center_scale;
    let target = Vec3::new(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    );
    Pose::look_at(&center, &target, &Vec3::z())
}

fn project(pose: &Pose, p: &Vec3) -> Vec2 {
    k().project(&pose.transform_point(p)).expect("in front")
}

fn segment(pose: &Pose, a: &Vec3, b: &Vec3) -> Segment2D {
    Segment2D::new(project(pose, a), project(pose, b)).unwrap()
}

/// Noise-free graph: 4 poses (first fixed), 2 axes, `n_lines` anchored
/// lines per axis, 6 points. Everything sits at ground truth.
fn truth_graph(rng: &mut ChaCha8Rng, n_lines: usize) -> FactorGraph {
    let mut g = FactorGraph::new(k());
    for i in 0..4 {
        let p = if i == 0 {
            Pose::look_at(&Vec3::new(0.0, -6.0, 0.5), &Vec3::zeros(), &Vec3::z())
        } else {
            random_pose(rng, 1.0)
        };
        g.poses.insert(PoseId(i), PoseVertex { pose: p, fixed: i == 0 });
    }
    let dirs = [Vec3::new(0.1, 0.05, 1.0).normalize(), Vec3::new(1.0, 0.2, 0.05).normalize()];
    for (i, d) in dirs.iter().enumerate() {
        g.axes.insert(AxisId(i as u32), PrincipalAxis::new(AxisId(i as u32), d).unwrap());
    }
    let ref_pose = g.poses[&PoseId(0)].pose;
    let mut lid = 0;
    for (ai, d) in dirs.iter().enumerate() {
        for _ in 0..n_lines {
            let c = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let (a, b) = (c - d * 0.7, c + d * 0.7);
            let l_w = PluckerLine::from_point_direction(&c, d).unwrap();
            let seg0 = segment(&ref_pose, &a, &b);
            let r = anchor_inverse_depth(&l_w, &seg0.midpoint(), &ref_pose.inverse(), &k()).unwrap();
            let id = LineId(lid);
            lid += 1;
            g.lines.insert(
                id,
                LineVertex::new(LineState::Anchored(AnchoredLine {
                    anchor_pixel: seg0.midpoint().into(),
                    ref_keyframe: PoseId(0),
                    inv_depth: r,
                    axis_ref: AxisRef::Axis(AxisId(ai as u32)),
                })),
            );
            for (pid, pv) in &g.poses {
                g.line_observations.push(LineObservation {
                    pose: *pid,
                    line: id,
                    segment: segment(&pv.pose, &a, &b),
                });
            }
        }
    }
    for i in 0..6 {
        let p = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        g.points.insert(PointId(i), PointVertex { position: p, fixed: false });
        for (pid, pv) in &g.poses {
            g.point_observations.push(PointObservation {
                pose: *pid,
                point: PointId(i),
                pixel: project(&pv.pose, &p).into(),
            });
        }
    }
    g
}

/// Random small step from the current state.
fn jitter(g: &mut FactorGraph, scale: f64, rng: &mut ChaCha8Rng) {
    let layout = g.layout();
    let mut d = DVector::zeros(layout.dim);
    for (id, &off) in &layout.lines {
        let s = match g.lines[id].state {
            LineState::Anchored(a) => 0.05 * a.inv_depth,
            _ => 0.02,
        };
        d[off] = rng.random_range(-s..s) * scale;
        for j in 1..g.lines[id].state.dim() {
            d[off + j] = rng.random_range(-0.02..0.02) * scale;
        }
    }
    for &off in layout.poses.values() {
        for j in 0..6 {
            d[off + j] = rng.random_range(-0.02..0.02) * scale;
        }
    }
    for &off in layout.points.values().chain(layout.axes.values()) {
        let w = if layout.axes.values().any(|&a| a == off) { 2 } else { 3 };
        for j in 0..w {
            d[off + j] = rng.random_range(-0.02..0.02) * scale;
        }
    }
    g.apply_step(&layout, &d).unwrap();
}

fn fd_columns<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, dim: usize) -> DMatrix<f64> {
    let h = 1e-6;
    let mut cols = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut d = DVector::zeros(dim);
        d[i] = h;
        let plus = f(&d);
        d[i] = -h;
        let minus = f(&d);
        cols.push((plus - minus) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

fn assert_jacobian_close(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>, what: &str) {
    assert_eq!(analytic.shape(), numeric.shape(), "{what}");
    // Columns that are nearly zero are compared against the Jacobian scale
    // instead of their own norm, which finite differences cannot resolve.
    let floor = (0..numeric.ncols())
        .map(|c| numeric.column(c).norm())
        .fold(0.0, f64::max)
        * 1e-3;
    for c in 0..analytic.ncols() {
        let a = analytic.column(c);
        let n = numeric.column(c);
        let err = (a - n).norm() / n.norm().max(a.norm()).max(floor).max(1e-9);
        assert!(err < 1e-5, "{what}: column {c} rel err {err:e}\n{a}\n{n}");
    }
}

fn v6(d: &DVector<f64>, off: usize) -> Vector6<f64> {
    Vector6::from_iterator(d.rows(off, 6).iter().copied())
}

#[test]
fn point_residual_examples() {
    let k1 = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
    let e = residual_point(&Pose::identity(), &Vec3::new(1.0, 2.0, 2.0), &Vec2::zeros(), &k1).unwrap();
    assert!((e - Vec2::new(0.5, 1.0)).norm() < 1e-15);
    let p = Vec3::new(0.3, -0.2, 4.0);
    let obs = k().project(&p).unwrap();
    assert!(residual_point(&Pose::identity(), &p, &obs, &k()).unwrap().norm() < 1e-12);
    for z in [0.0, -1.0] {
        assert!(matches!(
            residual_point(&Pose::identity(), &Vec3::new(0.0, 0.0, z), &Vec2::zeros(), &k()),
            Err(crate::Error::InvalidDepth(_))
        ));
    }
}

#[test]
fn structural_residual_zero_at_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = truth_graph(&mut rng, 5);
    for o in &g.line_observations {
        let LineState::Anchored(a) = g.lines[&o.line].state else { unreachable!() };
        let AxisRef::Axis(ax) = a.axis_ref else { unreachable!() };
        let e = residual_structural_line(
            &a,
            &g.axes[&ax].direction(),
            &g.poses[&a.ref_keyframe].pose,
            &g.poses[&o.pose].pose,
            &o.segment,
            &k(),
        )
        .unwrap();
        assert!(e.norm() < 1e-9, "{e}");
    }
    let lin = linearize(&g, 0.0).unwrap();
    assert!(lin.cost < 1e-18, "{}", lin.cost);
}

/// Distances of the observed endpoints to the image line through the
/// projections of two points of the 3D line.
fn two_point_oracle(p: &Vec3, d: &Vec3, pose: &Pose, obs: &Segment2D) -> Vec2 {
    let a = project(pose, p).push(1.0);
    let b = project(pose, &(p + d)).push(1.0);
    let l = a.cross(&b);
    let nn = (l.x * l.x + l.y * l.y).sqrt();
    Vec2::new(obs.start().push(1.0).dot(&l) / nn, obs.end().push(1.0).dot(&l) / nn)
}

#[test]
fn structural_residual_matches_two_point_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = truth_graph(&mut rng, 4);
    for o in &g.line_observations {
        let LineState::Anchored(mut a) = g.lines[&o.line].state else { unreachable!() };
        let AxisRef::Axis(ax) = a.axis_ref else { unreachable!() };
        a.inv_depth *= 1.1;
        let ref_pose = g.poses[&a.ref_keyframe].pose;
        let obs_pose = g.poses[&o.pose].pose;
        let d = g.axes[&ax].direction();
        let e = residual_structural_line(&a, &d, &ref_pose, &obs_pose, &o.segment, &k()).unwrap();
        let p_c = k().unproject(&a.anchor()) / a.inv_depth;
        let p_w = ref_pose.inverse().transform_point(&p_c);
        let oracle = two_point_oracle(&p_w, &d, &obs_pose, &o.segment);
        let err = (e - oracle).norm().min((e + oracle).norm());
        assert!(err < 1e-9 * (1.0 + e.norm()), "{e} vs {oracle}");
    }
}

#[test]
fn ortho_and_anchored_residuals_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = truth_graph(&mut rng, 4);
    let mut perturbed = g.clone();
    jitter(&mut perturbed, 1.0, &mut rng);
    for o in &perturbed.line_observations {
        let LineState::Anchored(a) = perturbed.lines[&o.line].state else { unreachable!() };
        let AxisRef::Axis(ax) = a.axis_ref else { unreachable!() };
        let d = perturbed.axes[&ax].direction();
        let ref_pose = perturbed.poses[&a.ref_keyframe].pose;
        let obs_pose = perturbed.poses[&o.pose].pose;
        let e = residual_structural_line(&a, &d, &ref_pose, &obs_pose, &o.segment, &k()).unwrap();
        let ortho = ortho_from_plucker(&perturbed.world_line(o.line).unwrap()).unwrap();
        let e2 = residual_ortho_line(&ortho, &obs_pose, &o.segment, &k()).unwrap();
        assert!((e - e2).norm() < 1e-9 * (1.0 + e.norm()), "{e} vs {e2}");
    }
}

#[test]
fn degenerate_line_projection_is_dropped() {
    // A line through the optical center projects to l′ = 0.
    let l = PluckerLine::new(Vec3::zeros(), Vec3::z()).unwrap();
    let o = ortho_from_plucker(&l).unwrap();
    let seg = Segment2D::new(Vec2::new(1.0, 2.0), Vec2::new(3.0, 4.0)).unwrap();
    assert_eq!(
        residual_ortho_line(&o, &Pose::identity(), &seg, &k()),
        Err(crate::Error::DegenerateProjection)
    );

    let mut g = FactorGraph::new(k());
    g.poses.insert(PoseId(0), PoseVertex { pose: Pose::identity(), fixed: true });
    g.lines.insert(LineId(0), LineVertex::new(LineState::Ortho(o)));
    g.line_observations.push(LineObservation { pose: PoseId(0), line: LineId(0), segment: seg });
    let lin = linearize(&g, 0.0).unwrap();
    assert_eq!(lin.dropped, 1);
    assert_eq!(lin.cost, 0.0);
}

fn axis_at(prior: AxisDirection, current: AxisDirection) -> PrincipalAxis {
    let mut a = PrincipalAxis::new(AxisId(0), &prior.to_vector()).unwrap();
    a.dir = current;
    a
}

#[test]
fn axis_residual_examples() {
    let p = AxisDirection { phi: 1.0, theta: 2.0 };
    assert!(residual_axis(&axis_at(p, p)).norm() < 1e-12);
    let e = residual_axis(&axis_at(p, AxisDirection { phi: 1.0, theta: 2.1 }));
    assert!((e - Vec2::new(0.0, 0.1)).norm() < 1e-12, "{e}");
    let e = residual_axis(&axis_at(
        AxisDirection { phi: 1.2, theta: 0.05 },
        AxisDirection { phi: 1.2, theta: std::f64::consts::TAU - 0.05 },
    ));
    assert!((e - Vec2::new(0.0, -0.1)).norm() < 1e-12, "{e}");
    // Near the pole the residual stays proportional to the angular change.
    let prior = Vec3::new(0.01, 0.0, 1.0).normalize();
    let mut a = PrincipalAxis::new(AxisId(0), &prior).unwrap();
    a.dir = latlong_from_direction(&(Rotation3::from_axis_angle(&Vec3::y_axis(), 0.01) * prior)).unwrap();
    let e = residual_axis(&a);
    assert!((e.norm() - 0.01).abs() < 1e-4, "{e}");
}

#[test]
fn point_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..100 {
        let pose = random_pose(&mut rng, 1.0);
        let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let obs = project(&pose, &p) + Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let j = point_jacobians(&pose, &p, &obs, &k()).unwrap();
        let f = |d: &DVector<f64>| {
            let e = residual_point(&pose.retract(&v6(d, 0)), &(p + d.fixed_rows::<3>(6)), &obs, &k()).unwrap();
            DVector::from_column_slice(e.as_slice())
        };
        let num = fd_columns(f, 9);
        let mut ana = DMatrix::zeros(2, 9);
        ana.view_mut((0, 0), (2, 6)).copy_from(&j.pose);
        ana.view_mut((0, 6), (2, 3)).copy_from(&j.point);
        assert_jacobian_close(&ana, &num, "point");
    }
}

#[test]
fn structural_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 100 {
        let g = truth_graph(&mut rng, 1);
        let mut g = g;
        jitter(&mut g, 1.0, &mut rng);
        let o = g.line_observations[rng.random_range(0..g.line_observations.len())];
        let LineState::Anchored(a) = g.lines[&o.line].state else { unreachable!() };
        if o.pose == a.ref_keyframe {
            continue;
        }
        let ref_pose = g.poses[&a.ref_keyframe].pose;
        let obs_pose = g.poses[&o.pose].pose;
        let dir = random_unit(&mut rng);
        let j = structural_line_jacobians(&a, &dir, &ref_pose, &obs_pose, &o.segment, &k()).unwrap();
        let f = |d: &DVector<f64>| {
            let mut l = a;
            l.inv_depth += d[12];
            let dd = dir + d.fixed_rows::<3>(13);
            let e = residual_structural_line(
                &l,
                &dd,
                &ref_pose.retract(&v6(d, 6)),
                &obs_pose.retract(&v6(d, 0)),
                &o.segment,
                &k(),
            )
            .unwrap();
            DVector::from_column_slice(e.as_slice())
        };
        let num = fd_columns(f, 16);
        let mut ana = DMatrix::zeros(2, 16);
        ana.view_mut((0, 0), (2, 6)).copy_from(&j.obs_pose);
        ana.view_mut((0, 6), (2, 6)).copy_from(&j.ref_pose);
        ana.view_mut((0, 12), (2, 1)).copy_from(&j.inv_depth);
        ana.view_mut((0, 13), (2, 3)).copy_from(&j.direction);
        assert_jacobian_close(&ana, &num, "structural");
        checked += 1;
    }
}

#[test]
fn ortho_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let pose = random_pose(&mut rng, 1.0);
        let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let d = random_unit(&mut rng);
        let l = PluckerLine::from_point_direction(&c, &d).unwrap();
        let o = ortho_from_plucker(&l).unwrap();
        let jitter = Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let obs = Segment2D::new(project(&pose, &(c - d)) + jitter, project(&pose, &(c + d)) - jitter).unwrap();
        let j = ortho_line_jacobians(&o, &pose, &obs, &k()).unwrap();
        let f = |x: &DVector<f64>| {
            let oo = o.retract(&Vec3::new(x[6], x[7], x[8]), x[9]);
            let e = residual_ortho_line(&oo, &pose.retract(&v6(x, 0)), &obs, &k()).unwrap();
            DVector::from_column_slice(e.as_slice())
        };
        let num = fd_columns(f, 10);
        let mut ana = DMatrix::zeros(2, 10);
        ana.view_mut((0, 0), (2, 6)).copy_from(&j.pose);
        ana.view_mut((0, 6), (2, 4)).copy_from(&j.line);
        assert_jacobian_close(&ana, &num, "ortho");
    }
}

#[test]
fn fixed_direction_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let pose = random_pose(&mut rng, 1.0);
        let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let d = random_unit(&mut rng);
        let l = PluckerLine::from_point_direction(&c, &d).unwrap();
        let obs = Segment2D::new(project(&pose, &(c - d)), project(&pose, &(c + d * 0.5))).unwrap();
        let j = fixed_direction_jacobians(&l, &pose, &obs, &k()).unwrap();
        let (e1, e2) = crate::geometry::orthogonal_basis(&l.v);
        let f = |x: &DVector<f64>| {
            let ll = PluckerLine { n: l.n + e1 * x[6] + e2 * x[7], v: l.v };
            let e = residual_world_line(&ll, &pose.retract(&v6(x, 0)), &obs, &k()).unwrap();
            DVector::from_column_slice(e.as_slice())
        };
        let num = fd_columns(f, 8);
        let mut ana = DMatrix::zeros(2, 8);
        ana.view_mut((0, 0), (2, 6)).copy_from(&j.pose);
        ana.view_mut((0, 6), (2, 2)).copy_from(&j.line);
        assert_jacobian_close(&ana, &num, "fixed direction");
    }
}

#[test]
fn axis_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for i in 0..100 {
        // Every fourth prior sits near the pole to exercise the rotated chart.
        let prior = if i % 4 == 0 {
            (Vec3::z() + random_unit(&mut rng) * 0.1).normalize()
        } else {
            random_unit(&mut rng)
        };
        let mut axis = PrincipalAxis::new(AxisId(0), &prior).unwrap();
        let cur = retract_direction(&prior, rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        axis.dir = latlong_from_direction(&cur).unwrap();
        let (_, j) = axis_residual_and_jacobian(&axis);
        let f = |x: &DVector<f64>| {
            let mut a = axis.clone();
            a.dir = latlong_from_direction(&retract_direction(&axis.direction(), x[0], x[1])).unwrap();
            DVector::from_column_slice(residual_axis(&a).as_slice())
        };
        let num = fd_columns(f, 2);
        assert_jacobian_close(&DMatrix::from_column_slice(2, 2, j.as_slice()), &num, "axis");
    }
}

/// Graph with every line state, shared and distinct reference poses and soft
/// associations.
fn mixed_graph(rng: &mut ChaCha8Rng) -> FactorGraph {
    let mut g = truth_graph(rng, 3);
    // Soft association across both axes for the first line.
    g.association.weights.insert(LineId(0), BTreeMap::from([(AxisId(0), 0.7), (AxisId(1), 0.3)]));
    let l3 = g.world_line(LineId(3)).unwrap();
    g.lines.get_mut(&LineId(3)).unwrap().state = LineState::Ortho(ortho_from_plucker(&l3).unwrap());
    let l4 = g.world_line(LineId(4)).unwrap();
    g.lines.get_mut(&LineId(4)).unwrap().state =
        LineState::FixedDirection(PluckerLine { n: l4.n / l4.v.norm(), v: l4.v.normalize() });
    if let LineState::Anchored(a) = &mut g.lines.get_mut(&LineId(5)).unwrap().state {
        a.axis_ref = AxisRef::Temporary(Vec3::new(1.0, 0.25, 0.05).normalize().into());
    }
    let d = (g.poses[&PoseId(2)].pose.center() - g.poses[&PoseId(1)].pose.center()).norm();
    g.scale_gauge = Some(ScaleGauge {
        reference: PoseId(1),
        poses: vec![PoseId(2)],
        mean_distance: d * 1.1,
    });
    g
}

/// Truth graph with the world scaled by `s` about the fixed camera center.
fn scaled_about_first_camera(g: &FactorGraph, s: f64) -> FactorGraph {
    let mut out = g.clone();
    let c0 = g.poses[&PoseId(0)].pose.center();
    for v in out.poses.values_mut() {
        let c = c0 + (v.pose.center() - c0) * s;
        v.pose = Pose::new(v.pose.rotation, -(v.pose.rotation * c));
    }
    for p in out.points.values_mut() {
        p.position = c0 + (p.position - c0) * s;
    }
    for l in out.lines.values_mut() {
        if let LineState::Anchored(a) = &mut l.state {
            a.inv_depth /= s;
        }
    }
    out
}

#[test]
fn scale_is_free_without_gauge_and_held_with_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let g = truth_graph(&mut rng, 3);
    let scaled = scaled_about_first_camera(&g, 1.2);
    assert!(linearize(&scaled, 0.0).unwrap().cost < 1e-12);

    let mut gauged = g.clone();
    let c0 = g.poses[&PoseId(0)].pose.center();
    let ids = vec![PoseId(1), PoseId(2), PoseId(3)];
    let d = ids.iter().map(|id| (g.poses[id].pose.center() - c0).norm()).sum::<f64>() / 3.0;
    gauged.scale_gauge = Some(ScaleGauge {
        reference: PoseId(0),
        poses: ids,
        mean_distance: d,
    });
    assert!(linearize(&gauged, 0.0).unwrap().cost < 1e-12);
    let scaled = scaled_about_first_camera(&gauged, 1.2);
    let expected = gauged.information.scale * (0.2 * d).powi(2);
    let cost = linearize(&scaled, 0.0).unwrap().cost;
    assert!((cost - expected).abs() < 1e-6 * expected, "{cost} vs {expected}");
}

#[test]
fn scale_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..100 {
        let r = random_pose(&mut rng, 1.0);
        let ps = [random_pose(&mut rng, 1.5), random_pose(&mut rng, 2.0)];
        let j = scale_jacobians(&r, &ps, 0.7).unwrap();
        let f = |x: &DVector<f64>| {
            let pr = r.retract(&v6(x, 0));
            let pp = [ps[0].retract(&v6(x, 6)), ps[1].retract(&v6(x, 12))];
            DVector::from_column_slice(scale_jacobians(&pr, &pp, 0.7).unwrap().residual.as_slice())
        };
        let num = fd_columns(f, 18);
        let mut ana = DMatrix::zeros(2, 18);
        ana.view_mut((0, 0), (2, 6)).copy_from(&j.reference);
        ana.view_mut((0, 6), (2, 6)).copy_from(&j.poses[0]);
        ana.view_mut((0, 12), (2, 6)).copy_from(&j.poses[1]);
        assert_jacobian_close(&ana, &num, "scale");
    }
}

#[test]
fn stacked_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..10 {
        let mut g = mixed_graph(&mut rng);
        jitter(&mut g, 1.0, &mut rng);
        for axis in g.axes.values_mut() {
            let v = retract_direction(&axis.direction(), 0.03, -0.02);
            axis.dir = latlong_from_direction(&v).unwrap();
        }
        let lin = linearize(&g, 0.0).unwrap();
        assert_eq!(lin.dropped, 0);
        let f = |d: &DVector<f64>| {
            let mut gg = g.clone();
            gg.apply_step(&lin.layout, d).unwrap();
            linearize(&gg, 0.0).unwrap().residuals
        };
        let num = fd_columns(f, lin.layout.dim);
        assert_jacobian_close(&lin.jacobian, &num, "stacked");
    }
}

#[test]
fn parameter_counts_follow_representation() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mut g = truth_graph(&mut rng, 10);
    // Keep only the ten lines of axis 0.
    let keep: Vec<LineId> = (0..10).map(LineId).collect();
    g.lines.retain(|id, _| keep.contains(id));
    g.line_observations.retain(|o| keep.contains(&o.line));
    g.axes.retain(|id, _| *id == AxisId(0));
    for p in g.poses.values_mut() {
        p.fixed = true;
    }
    for p in g.points.values_mut() {
        p.fixed = true;
    }
    let lin = linearize(&g, 2.0).unwrap();
    assert_eq!(lin.layout.counts.line_related(), 12);
    assert_eq!(lin.jacobian.ncols(), 12);
    assert_eq!(lin.layout.counts.pose, 0);

    let mut ortho = g.clone();
    let mut fixed = g.clone();
    for id in &keep {
        let l = g.world_line(*id).unwrap();
        ortho.lines.get_mut(id).unwrap().state = LineState::Ortho(ortho_from_plucker(&l).unwrap());
        fixed.lines.get_mut(id).unwrap().state = LineState::FixedDirection(l);
    }
    assert_eq!(linearize(&ortho, 2.0).unwrap().jacobian.ncols(), 40);
    assert_eq!(linearize(&fixed, 2.0).unwrap().jacobian.ncols(), 20);
}

#[test]
fn zero_weight_pair_contributes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let mut g = truth_graph(&mut rng, 3);
    jitter(&mut g, 1.0, &mut rng);
    g.association.weights.insert(LineId(0), BTreeMap::from([(AxisId(0), 1.0)]));
    let without = linearize(&g, 2.0).unwrap();
    g.association.weights.insert(LineId(0), BTreeMap::from([(AxisId(0), 1.0), (AxisId(1), 0.0)]));
    let with = linearize(&g, 2.0).unwrap();
    assert_eq!(without.cost, with.cost);
    assert_eq!(without.gradient(), with.gradient());
}

#[test]
fn solve_at_truth_makes_no_progress() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut g = truth_graph(&mut rng, 4);
    let report = solve(&mut g, &LMConfig::default()).unwrap();
    assert_eq!(report.accepted_steps, 0);
    assert!(report.final_cost < 1e-18, "{}", report.final_cost);
}

#[test]
fn solve_converges_from_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..5 {
        let truth = truth_graph(&mut rng, 6);
        let mut g = truth.clone();
        jitter(&mut g, 0.5, &mut rng);
        let report = solve(&mut g, &LMConfig::default()).unwrap();
        assert!(report.monotone());
        assert!(!report.diverged);
        assert!(report.final_cost < 1e-9, "{report:?}");
        assert!(report.final_cost < report.initial_cost);
    }
}

#[test]
fn inverse_depth_step_is_rescaled() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let g = truth_graph(&mut rng, 2);
    let layout = g.layout();
    let mut d = DVector::zeros(layout.dim);
    let off = layout.lines[&LineId(0)];
    let LineState::Anchored(a) = g.lines[&LineId(0)].state else { unreachable!() };
    d[off] = -3.0 * a.inv_depth;
    let alpha = super::solver::depth_step_scale(&g, &layout, &d);
    assert!((alpha - 1.0 / 6.0).abs() < 1e-12);
    let mut g2 = g.clone();
    g2.apply_step(&layout, &(d * alpha)).unwrap();
    let LineState::Anchored(b) = g2.lines[&LineId(0)].state else { unreachable!() };
    assert!(b.inv_depth > 0.0);
    assert!((b.inv_depth - 0.5 * a.inv_depth).abs() < 1e-12);
}

#[test]
fn fresh_line_starts_with_temporary_axis() {
    let seg = Segment2D::new(Vec2::new(100.0, 100.0), Vec2::new(200.0, 150.0)).unwrap();
    let pose = Pose::look_at(&Vec3::new(0.0, -5.0, 0.0), &Vec3::zeros(), &Vec3::z());
    let d = temporary_axis_direction(&Vec3::new(0.0, 1.0, 0.0), &pose).unwrap();
    assert!((d.abs() - Vec3::z()).norm() < 1e-12);
    let v = new_structural_line(&seg, PoseId(0), 0.2, &d).unwrap();
    assert_eq!(v.stage(), Some(Stage::InitialTempAxis));
    assert_eq!(v.anchor.unwrap().pixel, [150.0, 125.0]);
}

#[test]
fn stage_policy_transitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut g = truth_graph(&mut rng, 2);
    // Line 0: temporary, not yet optimized. Line 1: temporary, optimized.
    for id in [LineId(0), LineId(1)] {
        let l = g.world_line(id).unwrap();
        if let LineState::Anchored(a) = &mut g.lines.get_mut(&id).unwrap().state {
            a.axis_ref = AxisRef::Temporary(l.v.normalize().into());
        }
    }
    g.lines.get_mut(&LineId(1)).unwrap().optimized = 1;
    let before = g.world_lines().unwrap();
    let t = stage_policy(&mut g).unwrap();
    assert_eq!(g.lines[&LineId(0)].stage(), Some(Stage::InitialTempAxis));
    assert_eq!(g.lines[&LineId(1)].stage(), Some(Stage::OrthoFallback));
    assert!(t.contains(&StageTransition { line: LineId(1), from: Stage::InitialTempAxis, to: Stage::OrthoFallback }));
    assert!(g.world_line(LineId(1)).unwrap().projective_distance(&before[&LineId(1)]) < 1e-12);

    // Association to axis 0 anchors both.
    g.association.assign(LineId(0), AxisId(0));
    g.association.assign(LineId(1), AxisId(0));
    stage_policy(&mut g).unwrap();
    for id in [LineId(0), LineId(1)] {
        let LineState::Anchored(a) = g.lines[&id].state else { panic!("not anchored") };
        assert_eq!(a.axis_ref, AxisRef::Axis(AxisId(0)));
    }
    assert!(g.world_line(LineId(1)).unwrap().projective_distance(&before[&LineId(1)]) < 1e-9);

    // Losing the association falls back to the orthonormal form.
    g.association.remove_line(LineId(1));
    stage_policy(&mut g).unwrap();
    assert_eq!(g.lines[&LineId(1)].stage(), Some(Stage::OrthoFallback));
}

#[test]
fn ortho_anchored_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let g = truth_graph(&mut rng, 5);
    for (id, v) in &g.lines {
        let l = g.world_line(*id).unwrap();
        let o = to_ortho(&l).unwrap();
        let LineState::Anchored(a) = v.state else { unreachable!() };
        let AxisRef::Axis(ax) = a.axis_ref else { unreachable!() };
        let back = to_anchored(&o.to_plucker(), &v.anchor.unwrap(), ax, &g.poses[&PoseId(0)].pose, &k()).unwrap();
        assert!((back.inv_depth - a.inv_depth).abs() < 1e-9 * a.inv_depth);
        let mut g2 = g.clone();
        g2.lines.get_mut(id).unwrap().state = LineState::Anchored(back);
        let again = to_ortho(&g2.world_line(*id).unwrap()).unwrap();
        assert!(again.to_plucker().projective_distance(&l) < 1e-9);
    }
}

#[test]
fn parallel_line_stays_in_fallback() {
    let pose = Pose::identity();
    let anchor = LineAnchor { pixel: [320.0, 240.0], ref_keyframe: PoseId(0) };
    // Along the optical axis, offset sideways: parallel to the anchor ray.
    let l = PluckerLine::from_point_direction(&Vec3::new(1.0, 0.0, 0.0), &Vec3::z()).unwrap();
    assert!(to_anchored(&l, &anchor, AxisId(0), &pose, &k()).is_err());
}

#[test]
fn em_rounds_associate_and_anchor() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let truth = truth_graph(&mut rng, 6);
    let mut g = truth.clone();
    // Start every line in the fallback stage.
    for id in truth.lines.keys() {
        let l = truth.world_line(*id).unwrap();
        g.lines.get_mut(id).unwrap().state = LineState::Ortho(ortho_from_plucker(&l).unwrap());
        g.lines.get_mut(id).unwrap().optimized = 1;
    }
    jitter(&mut g, 0.3, &mut rng);
    let rounds = run_em(&mut g, &AxisPolicy::default(), &LMConfig::default(), 3).unwrap();
    assert_eq!(rounds.len(), 3);
    for (id, v) in &g.lines {
        assert_eq!(v.stage(), Some(Stage::AxisAnchored), "{id}");
        let want = if id.0 < 6 { AxisId(0) } else { AxisId(1) };
        assert_eq!(g.association.primary(*id), Some(want));
    }
    assert!(rounds.iter().all(|r| r.report.monotone()));
    assert!(rounds.last().unwrap().report.final_cost < 1e-6);
}

#[test]
fn graph_validation_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let g = truth_graph(&mut rng, 2);
    let mut bad = g.clone();
    for p in bad.poses.values_mut() {
        p.fixed = false;
    }
    assert!(matches!(bad.validate(), Err(crate::Error::InvalidGraph(_))));
    let mut bad = g.clone();
    bad.line_observations[0].pose = PoseId(99);
    assert!(matches!(linearize(&bad, 0.0), Err(crate::Error::InvalidGraph(_))));
    let mut bad = g.clone();
    bad.axes.clear();
    assert!(bad.validate().is_err());
}

#[test]
fn graph_json_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let g = mixed_graph(&mut rng);
    let s = serde_json::to_string(&g).unwrap();
    let back: FactorGraph = serde_json::from_str(&s).unwrap();
    assert_eq!(serde_json::to_string(&back).unwrap(), s);
}
