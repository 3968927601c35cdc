//! Levenberg–Marquardt over dense normal equations, with the points
//! eliminated by Schur complement before each solve.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use super::residuals::{factor_cost, FactorPlan, JacobianBlock};
use super::{FactorGraph, LineState, LineVertex, ParamCounts, ParamLayout, PointVertex, PoseVertex};
use crate::axes::PrincipalAxis;
use crate::error::{Error, Result};
use crate::ids::{AxisId, LineId, PointId, PoseId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LMConfig {
    pub max_iters: usize,
    /// Initial damping, as a multiple of the diagonal of `JᵀJ`.
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    /// Stop when the largest step component falls below this.
    pub param_tolerance: f64,
    /// Huber width on pixel residuals; 0 disables the kernel.
    pub robust_width_px: f64,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            max_iters: 50,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.3,
            cost_tolerance: 1e-10,
            param_tolerance: 1e-10,
            robust_width_px: 2.0,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters > 0
            && self.initial_damping > 0.0
            && self.damping_up > 1.0
            && self.damping_down > 0.0
            && self.damping_down < 1.0
            && self.cost_tolerance > 0.0
            && self.param_tolerance > 0.0
            && self.robust_width_px >= 0.0;
        if !ok {
            return Err(Error::InvalidConfig(
                "lm: tolerances and damping must be positive, damping_up > 1 > damping_down"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ZeroCost,
    CostTolerance,
    ParamTolerance,
    MaxIterations,
    DampingExhausted,
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub lambda: f64,
    /// Cost of the trial state (not finite when evaluation failed).
    pub trial_cost: f64,
    pub accepted: bool,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    /// Initial cost followed by the cost after each accepted step.
    pub cost_trace: Vec<f64>,
    pub iteration_log: Vec<IterationRecord>,
    pub wall_time_s: f64,
    pub termination: Termination,
    pub diverged: bool,
    pub params: ParamCounts,
    pub dropped_residuals: usize,
}

impl OptimizationReport {
    /// True when no accepted step raised the cost.
    pub fn monotone(&self) -> bool {
        self.cost_trace.windows(2).all(|w| w[1] <= w[0])
    }
}

/// One point's diagonal block, gradient and couplings to the reduced
/// columns, kept apart so the point can be eliminated.
#[derive(Clone)]
struct PointBlock {
    h: Matrix3<f64>,
    g: Vector3<f64>,
    /// Reduced column offset, width and cross block (first `width` rows).
    coupling: Vec<(usize, usize, SMatrix<f64, 6, 3>)>,
}

/// Gauss-Newton system with the point columns split off. Every other
/// column is "reduced": it keeps its layout order with the point range cut
/// out.
struct Normal {
    cost: f64,
    dropped: usize,
    /// Upper triangle only.
    h: DMatrix<f64>,
    g: DVector<f64>,
    points: Vec<PointBlock>,
    /// Layout column range of the points.
    point_cols: Range<usize>,
    /// Marquardt scaling over the reduced columns, then the points.
    damping: DVector<f64>,
    damping_points: Vec<Vector3<f64>>,
}

impl Normal {
    fn reduced(&self, offset: usize) -> usize {
        reduced_offset(&self.point_cols, offset)
    }
}

fn reduced_offset(points: &Range<usize>, offset: usize) -> usize {
    if offset >= points.end {
        offset - points.len()
    } else {
        offset
    }
}

fn point_columns(layout: &ParamLayout) -> Range<usize> {
    let start = layout.points.values().min().copied().unwrap_or(0);
    start..start + layout.counts.point
}

fn normal_equations(graph: &FactorGraph, layout: &ParamLayout, plan: &FactorPlan, width: f64) -> Result<Normal> {
    let point_cols = point_columns(layout);
    let n = layout.dim - point_cols.len();
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let empty = PointBlock {
        h: Matrix3::zeros(),
        g: Vector3::zeros(),
        coupling: Vec::new(),
    };
    let mut points = vec![empty; layout.points.len()];
    let mut cost = 0.0;
    let is_point = |off: usize| point_cols.contains(&off);
    let dropped = plan.for_each(graph, true, |_, eval| {
        let (rho, scale) = factor_cost(eval, width);
        cost += rho;
        let s2 = scale * scale;
        let (e0, e1) = (eval.residual.x * s2, eval.residual.y * s2);
        // `lo.j[:, r] · hi.j[:, c]`, scaled.
        let dot = |lo: &JacobianBlock, r: usize, hi: &JacobianBlock, c: usize| {
            (lo.j[(0, r)] * hi.j[(0, c)] + lo.j[(1, r)] * hi.j[(1, c)]) * s2
        };
        for (i, a) in eval.blocks.iter().enumerate() {
            let grad = |r: usize| a.j[(0, r)] * e0 + a.j[(1, r)] * e1;
            if is_point(a.offset) {
                let p = &mut points[(a.offset - point_cols.start) / 3];
                for r in 0..3 {
                    p.g[r] += grad(r);
                }
            } else {
                let ro = reduced_offset(&point_cols, a.offset);
                for r in 0..a.dim {
                    g[ro + r] += grad(r);
                }
            }
            for b in &eval.blocks[i..] {
                let (lo, hi) = if a.offset <= b.offset { (a, b) } else { (b, a) };
                match (is_point(lo.offset), is_point(hi.offset)) {
                    (false, false) => {
                        let ro = reduced_offset(&point_cols, lo.offset);
                        let co = reduced_offset(&point_cols, hi.offset);
                        let hs = h.as_mut_slice();
                        for c in 0..hi.dim {
                            let col = (co + c) * n + ro;
                            for r in 0..lo.dim {
                                hs[col + r] += dot(lo, r, hi, c);
                            }
                        }
                    }
                    (true, true) => {
                        debug_assert_eq!(lo.offset, hi.offset, "a factor touches one point");
                        let p = &mut points[(lo.offset - point_cols.start) / 3];
                        for c in 0..3 {
                            for r in 0..3 {
                                p.h[(r, c)] += dot(lo, r, hi, c);
                            }
                        }
                    }
                    (p_lo, _) => {
                        let (p, o) = if p_lo { (lo, hi) } else { (hi, lo) };
                        let mut cross = SMatrix::<f64, 6, 3>::zeros();
                        for c in 0..3 {
                            for r in 0..o.dim {
                                cross[(r, c)] = dot(o, r, p, c);
                            }
                        }
                        let block = &mut points[(p.offset - point_cols.start) / 3];
                        let ro = reduced_offset(&point_cols, o.offset);
                        match block.coupling.iter_mut().find(|c| c.0 == ro) {
                            Some(c) => c.2 += cross,
                            None => block.coupling.push((ro, o.dim, cross)),
                        }
                    }
                }
            }
        }
    })?;
    // Marquardt scaling: damping proportional to each diagonal entry of
    // `JᵀJ`, floored so unobserved directions stay positive definite.
    let max = (0..n)
        .map(|i| h[(i, i)])
        .chain(points.iter().flat_map(|p| (0..3).map(|i| p.h[(i, i)])))
        .fold(0.0, f64::max);
    let floor = if max > 0.0 { 1e-9 * max } else { 1.0 };
    let damping = DVector::from_iterator(n, (0..n).map(|i| h[(i, i)].max(floor)));
    let damping_points = points
        .iter()
        .map(|p| Vector3::from_fn(|i, _| p.h[(i, i)].max(floor)))
        .collect();
    Ok(Normal {
        cost,
        dropped,
        h,
        g,
        points,
        point_cols,
        damping,
        damping_points,
    })
}

/// Solves the damped system for the full layout step, eliminating the
/// points first. `None` when the damped system is not positive definite.
fn damped_step(normal: &Normal, lambda: f64, dim: usize) -> Option<DVector<f64>> {
    let n = normal.h.nrows();
    let mut a = normal.h.clone();
    let mut rhs = -&normal.g;
    for i in 0..n {
        a[(i, i)] += lambda * normal.damping[i];
    }
    let mut inverses = Vec::with_capacity(normal.points.len());
    for (p, d) in normal.points.iter().zip(&normal.damping_points) {
        let c = p.h + Matrix3::from_diagonal(&(d * lambda));
        let c_inv = c.cholesky()?.inverse();
        let b_c = -p.g;
        for (k, &(ok, wk, bk)) in p.coupling.iter().enumerate() {
            let w = bk * c_inv;
            let mut rv = rhs.rows_mut(ok, wk);
            rv -= (w * b_c).rows(0, wk);
            for &(ol, wl, bl) in &p.coupling[k..] {
                let s = w * bl.transpose();
                if ok <= ol {
                    let mut av = a.view_mut((ok, ol), (wk, wl));
                    av -= s.view((0, 0), (wk, wl));
                } else {
                    let mut av = a.view_mut((ol, ok), (wl, wk));
                    av -= s.transpose().view((0, 0), (wl, wk));
                }
            }
        }
        inverses.push(c_inv);
    }
    a.fill_lower_triangle_with_upper_triangle();
    let dr = a.cholesky()?.solve(&rhs);

    let mut delta = DVector::zeros(dim);
    let pc = &normal.point_cols;
    for i in 0..dim {
        if !pc.contains(&i) {
            delta[i] = dr[normal.reduced(i)];
        }
    }
    for (i, (p, c_inv)) in normal.points.iter().zip(&inverses).enumerate() {
        let mut b = -p.g;
        for &(o, w, bk) in &p.coupling {
            b -= bk.rows(0, w).transpose() * dr.rows(o, w);
        }
        delta.fixed_rows_mut::<3>(pc.start + 3 * i).copy_from(&(c_inv * b));
    }
    Some(delta)
}

/// Largest step fraction that keeps every inverse depth at or above half its
/// current value.
pub(crate) fn depth_step_scale(graph: &FactorGraph, layout: &ParamLayout, delta: &DVector<f64>) -> f64 {
    let mut alpha: f64 = 1.0;
    for (id, &off) in &layout.lines {
        if let LineState::Anchored(a) = &graph.lines[id].state {
            let d = delta[off];
            if a.inv_depth + d < 0.5 * a.inv_depth {
                alpha = alpha.min(-0.5 * a.inv_depth / d);
            }
        }
    }
    alpha
}

/// Optimizable state of a graph, for undoing a rejected step.
struct Vertices {
    poses: BTreeMap<PoseId, PoseVertex>,
    points: BTreeMap<PointId, PointVertex>,
    lines: BTreeMap<LineId, LineVertex>,
    axes: BTreeMap<AxisId, PrincipalAxis>,
}

impl Vertices {
    fn save(graph: &FactorGraph) -> Self {
        Vertices {
            poses: graph.poses.clone(),
            points: graph.points.clone(),
            lines: graph.lines.clone(),
            axes: graph.axes.clone(),
        }
    }

    fn restore(self, graph: &mut FactorGraph) {
        graph.poses = self.poses;
        graph.points = self.points;
        graph.lines = self.lines;
        graph.axes = self.axes;
    }
}

/// Minimizes the robustified cost in place. Only accepted steps change the
/// graph, so on failure it holds the best state found.
pub fn solve(graph: &mut FactorGraph, cfg: &LMConfig) -> Result<OptimizationReport> {
    let start = Instant::now();
    cfg.validate()?;
    graph.validate()?;
    let layout = graph.layout();
    let plan = FactorPlan::new(graph, &layout)?;
    let width = cfg.robust_width_px;

    let mut normal = normal_equations(graph, &layout, &plan, width)?;
    let mut report = OptimizationReport {
        initial_cost: normal.cost,
        final_cost: normal.cost,
        iterations: 0,
        accepted_steps: 0,
        cost_trace: vec![normal.cost],
        iteration_log: Vec::new(),
        wall_time_s: 0.0,
        termination: Termination::MaxIterations,
        diverged: false,
        params: layout.counts,
        dropped_residuals: normal.dropped,
    };
    if !normal.cost.is_finite() {
        report.termination = Termination::NonFinite;
        report.diverged = true;
        report.wall_time_s = start.elapsed().as_secs_f64();
        return Ok(report);
    }

    let lambda_min = 1e-12;
    let lambda_max = 1e16;
    let mut lambda = cfg.initial_damping;

    if layout.dim == 0 || normal.cost == 0.0 {
        report.termination = Termination::ZeroCost;
    } else {
        report.termination = Termination::MaxIterations;
        for _ in 0..cfg.max_iters {
            let it_start = Instant::now();
            report.iterations += 1;
            let Some(mut delta) = damped_step(&normal, lambda, layout.dim) else {
                report.iteration_log.push(IterationRecord {
                    lambda,
                    trial_cost: f64::NAN,
                    accepted: false,
                    time_s: it_start.elapsed().as_secs_f64(),
                });
                lambda *= cfg.damping_up;
                if lambda > lambda_max {
                    report.termination = Termination::DampingExhausted;
                    break;
                }
                continue;
            };
            if delta.amax() < cfg.param_tolerance {
                report.iteration_log.push(IterationRecord {
                    lambda,
                    trial_cost: normal.cost,
                    accepted: false,
                    time_s: it_start.elapsed().as_secs_f64(),
                });
                report.termination = Termination::ParamTolerance;
                break;
            }
            let alpha = depth_step_scale(graph, &layout, &delta);
            if alpha < 1.0 {
                delta *= alpha;
            }
            // Most steps are accepted, so the trial state is linearized
            // straight away and only the vertices are kept for rollback.
            let saved = Vertices::save(graph);
            let trial = graph
                .apply_step(&layout, &delta)
                .and_then(|()| normal_equations(graph, &layout, &plan, width));
            let trial = match trial {
                Ok(t) => t,
                Err(e) => {
                    saved.restore(graph);
                    return Err(e);
                }
            };
            let trial_cost = trial.cost;
            let accepted =
                trial_cost.is_finite() && trial.dropped <= normal.dropped && trial_cost < normal.cost;
            report.iteration_log.push(IterationRecord {
                lambda,
                trial_cost,
                accepted,
                time_s: 0.0,
            });
            if accepted {
                let relative = (normal.cost - trial_cost) / normal.cost;
                normal = trial;
                report.accepted_steps += 1;
                report.cost_trace.push(normal.cost);
                lambda = (lambda * cfg.damping_down).max(lambda_min);
                report.iteration_log.last_mut().expect("pushed").time_s =
                    it_start.elapsed().as_secs_f64();
                if normal.cost == 0.0 {
                    report.termination = Termination::ZeroCost;
                    break;
                }
                if relative < cfg.cost_tolerance {
                    report.termination = Termination::CostTolerance;
                    break;
                }
            } else {
                saved.restore(graph);
                report.iteration_log.last_mut().expect("pushed").time_s =
                    it_start.elapsed().as_secs_f64();
                lambda *= cfg.damping_up;
                if lambda > lambda_max {
                    report.termination = Termination::DampingExhausted;
                    break;
                }
            }
        }
    }

    for id in layout.lines.keys() {
        graph.lines.get_mut(id).expect("layout matches graph").optimized += 1;
    }
    report.final_cost = normal.cost;
    report.dropped_residuals = normal.dropped;
    report.diverged = !normal.cost.is_finite();
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}
