//! One vehicle's computational node.
//!
//! For a candidate entry/exit time pair the agent solves its tracking QP with the
//! position pinned to `p_in` at `t_in` and to `p_out` at `t_out`, and reports the
//! optimal value together with its first and second derivatives with respect to the
//! two times. It also solves the LPs that bound the times it can physically achieve.
//!
//! The QP is condensed: the decision variables are the accelerations `u_0..u_{N-1}`
//! (plus two slacks in relaxed mode). Initial condition and dynamics hold by
//! construction; the trajectory is recovered by forward simulation.
//!
//! In projection mode the bound LPs must be solved before the QP, since the QP is
//! evaluated at the projected time pair.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::convex::{self, ConvexProgram, SolveResult, SolveStatus, Tolerances};
use crate::dynamics::{AffineRow, StateTrajectory, VehicleParams};
use crate::error::{Error, Result};

/// Entry and exit time of one vehicle (s).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimePair {
    pub t_in: f64,
    pub t_out: f64,
}

impl TimePair {
    pub fn new(t_in: f64, t_out: f64) -> Self {
        TimePair { t_in, t_out }
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.t_in, self.t_out)
    }

    pub fn validate(&self, horizon_end: f64) -> Result<()> {
        let in_range = |t: f64| (0.0..=horizon_end).contains(&t);
        if !(self.t_in < self.t_out) || !in_range(self.t_in) || !in_range(self.t_out) {
            return Err(Error::InvalidParameter(format!(
                "time pair ({}, {}) must satisfy 0 <= t_in < t_out <= {horizon_end}",
                self.t_in, self.t_out
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Entry and exit positions are hard equality constraints.
    Exact,
    /// The exit condition is softened with two slacks penalized by `rho`.
    Relaxed { rho: f64 },
}

/// Exit times are reported this far (s) inside the exact extremes. On the exact
/// extreme only one trajectory is feasible and the interior-point solve of the local
/// problem can fail to certify it.
pub const EXIT_EDGE: f64 = 1e-7;

/// Feasible time window of one vehicle. The out-time bounds are those at `t_in`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeBounds {
    pub t_in_min: f64,
    pub t_in_max: f64,
    pub t_in: f64,
    pub t_out_min: f64,
    pub t_out_max: f64,
}

impl TimeBounds {
    /// Window pulled in by `margin` on every side; a window narrower than `2 margin`
    /// collapses to its midpoint.
    pub fn shrink(&self, margin: f64) -> TimeBounds {
        let pull = |lo: f64, hi: f64| {
            if hi - lo > 2.0 * margin {
                (lo + margin, hi - margin)
            } else {
                let mid = 0.5 * (lo + hi);
                (mid, mid)
            }
        };
        let (t_in_min, t_in_max) = pull(self.t_in_min, self.t_in_max);
        let (t_out_min, t_out_max) = pull(self.t_out_min, self.t_out_max);
        TimeBounds {
            t_in_min,
            t_in_max,
            t_in: self.t_in,
            t_out_min,
            t_out_max,
        }
    }

    pub fn contains(&self, times: TimePair, margin: f64) -> bool {
        times.t_in >= self.t_in_min - margin
            && times.t_in <= self.t_in_max + margin
            && times.t_out >= self.t_out_min - margin
            && times.t_out <= self.t_out_max + margin
    }
}

/// Multipliers of the two time-coupling rows and the time derivative of the
/// position at the optimum, `ṗ(t, w*)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub lambda_in: f64,
    pub lambda_out: f64,
    pub rate_in: f64,
    pub rate_out: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalEvaluation {
    pub times: TimePair,
    pub mode: Mode,
    pub feasible: bool,
    /// Optimal cost, including the slack penalty in relaxed mode. `None` when infeasible.
    pub value: Option<f64>,
    pub trajectory: Option<StateTrajectory>,
    pub coupling: Option<Coupling>,
    /// `(s_1, s_2)` in relaxed mode.
    pub slacks: Option<(f64, f64)>,
    /// Largest absolute multiplier over all constraints.
    pub max_multiplier: f64,
    pub status: SolveStatus,
}

impl LocalEvaluation {
    pub fn slack_sum(&self) -> f64 {
        self.slacks.map_or(0.0, |(a, b)| a + b)
    }

    /// `∇V = (λ_in ṗ(t_in), λ_out ṗ(t_out))`.
    pub fn gradient(&self) -> Result<Vector2<f64>> {
        gradient(self)
    }
}

/// Value-function gradient from the coupling multipliers.
pub fn gradient(evaluation: &LocalEvaluation) -> Result<Vector2<f64>> {
    match (evaluation.feasible, evaluation.coupling) {
        (true, Some(c)) => Ok(Vector2::new(c.lambda_in * c.rate_in, c.lambda_out * c.rate_out)),
        _ => Err(Error::UndefinedGradient),
    }
}

/// Clamps `t_out` into the out-time window; `t_in` is left alone.
pub fn project_times(times: TimePair, bounds: &TimeBounds) -> TimePair {
    TimePair {
        t_in: times.t_in,
        t_out: times.t_out.min(bounds.t_out_max).max(bounds.t_out_min),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub tolerances: Tolerances,
    /// Finite-difference step for second-order and bound sensitivities (s).
    pub fd_step: f64,
    /// Safety factor applied to the sampled multiplier maximum when estimating ρ.
    pub rho_safety: f64,
    /// Grid points per time axis for the ρ estimate.
    pub rho_grid: usize,
    /// Stencil points closer than this to the feasible-set boundary count as outside (s).
    pub stencil_margin: f64,
    /// Distance kept from the edges of the feasible time set when reporting it to the
    /// coordinator (s). On the edge itself the local problem has a single feasible
    /// trajectory and its multipliers are not unique.
    pub window_margin: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            tolerances: Tolerances {
                kkt: 1e-10,
                gap: 1e-12,
                ..Tolerances::default()
            },
            fd_step: 1e-4,
            rho_safety: 10.0,
            rho_grid: 5,
            stencil_margin: 1e-7,
            window_margin: 1e-3,
        }
    }
}

/// First- and second-order information at an accepted iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivities {
    pub hessian: Option<Matrix2<f64>>,
    /// `d t_out_min / d t_in` and `d t_out_max / d t_in`.
    pub slope_min: f64,
    pub slope_max: f64,
}

/// Cost data of the condensed tracking problem, shared by every solve.
#[derive(Debug, Clone)]
struct TrackingCost {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    constant: f64,
}

impl TrackingCost {
    fn new(params: &VehicleParams) -> Self {
        let n = params.horizon;
        let ts = params.sampling_time;
        let (q, r) = (params.q, params.r);
        // v_k - vd_k = e_k + T_s Σ_{j<k} u_j for k = 1..N; e_0 is constant.
        let e: Vec<f64> = params.v_desired.iter().map(|vd| params.v0 - vd).collect();
        let hessian = DMatrix::from_fn(n, n, |i, j| {
            let gram = (n - i.max(j)) as f64;
            2.0 * q * ts * ts * gram + if i == j { 2.0 * r } else { 0.0 }
        });
        let mut tail = 0.0;
        let mut linear = DVector::zeros(n);
        for j in (0..n).rev() {
            tail += e[j + 1];
            linear[j] = 2.0 * q * ts * tail;
        }
        let constant = q * e.iter().map(|x| x * x).sum::<f64>();
        TrackingCost {
            hessian,
            linear,
            constant,
        }
    }
}

/// Path constraints `u_lb <= u_k <= u_ub` and `v_k >= 0`, as `(row, rhs)` for `row·u <= rhs`.
/// Velocity rows that the acceleration bound already implies are left out.
pub fn path_constraint_rows(params: &VehicleParams) -> Vec<(Vec<f64>, f64)> {
    let n = params.horizon;
    let mut rows = Vec::with_capacity(3 * n);
    for k in 0..n {
        let mut up = vec![0.0; n];
        up[k] = 1.0;
        rows.push((up, params.u_ub));
        let mut lo = vec![0.0; n];
        lo[k] = -1.0;
        rows.push((lo, -params.u_lb));
    }
    for (k, row) in params.velocity_rows().into_iter().enumerate() {
        let stages = (k + 1) as f64;
        if params.v0 + params.u_lb.min(0.0) * stages * params.sampling_time >= 0.0 {
            continue;
        }
        rows.push(((-row.coeffs).iter().cloned().collect(), row.offset));
    }
    rows
}

fn time_row(params: &VehicleParams, t: f64, target: f64, width: usize) -> Result<(Vec<f64>, f64, AffineRow)> {
    let row = params.position_row(t)?;
    let mut coeffs = vec![0.0; width];
    coeffs[..params.horizon].copy_from_slice(row.coeffs.as_slice());
    let rhs = target - row.offset;
    Ok((coeffs, rhs, row))
}

/// A time row with all-zero coefficients (t = 0) is either trivially satisfied or
/// impossible; it is never handed to the solver.
fn is_degenerate(row: &AffineRow) -> bool {
    row.coeffs.iter().all(|&c| c == 0.0)
}

/// Tracking cost and path constraints alone, with no time conditions.
pub fn build_tracking_qp(params: &VehicleParams) -> ConvexProgram {
    let cost = TrackingCost::new(params);
    let paths = path_constraint_rows(params);
    ConvexProgram::from_rows(cost.hessian, cost.linear, cost.constant, &[], &paths)
}

/// Builds the local tracking QP for fixed times.
pub fn build_local_qp(params: &VehicleParams, times: TimePair, mode: Mode) -> Result<ConvexProgram> {
    let cost = TrackingCost::new(params);
    let paths = path_constraint_rows(params);
    build_with(params, &cost, &paths, times, mode).map(|(p, _)| p)
}

struct RowMap {
    /// Index in the equality system of the entry and exit rows, if present.
    eq_in: Option<usize>,
    eq_out: Option<usize>,
    /// Degenerate row that cannot be satisfied.
    impossible: bool,
}

fn build_with(
    params: &VehicleParams,
    cost: &TrackingCost,
    paths: &[(Vec<f64>, f64)],
    times: TimePair,
    mode: Mode,
) -> Result<(ConvexProgram, RowMap)> {
    let end = params.horizon_end();
    for t in [times.t_in, times.t_out] {
        if !(0.0..=end).contains(&t) {
            return Err(Error::InvalidParameter(format!(
                "time {t} s is outside the horizon [0, {end}] s"
            )));
        }
    }
    let n = params.horizon;
    let width = match mode {
        Mode::Exact => n,
        Mode::Relaxed { .. } => n + 2,
    };
    let mut hessian = DMatrix::zeros(width, width);
    hessian.view_mut((0, 0), (n, n)).copy_from(&cost.hessian);
    let mut linear = DVector::zeros(width);
    linear.rows_mut(0, n).copy_from(&cost.linear);

    let widen = |row: &Vec<f64>| {
        let mut r = row.clone();
        r.resize(width, 0.0);
        r
    };
    let mut in_rows: Vec<(Vec<f64>, f64)> = paths.iter().map(|(r, b)| (widen(r), *b)).collect();
    let mut eq_rows = Vec::with_capacity(2);
    let mut map = RowMap {
        eq_in: None,
        eq_out: None,
        impossible: false,
    };

    let (row_in, rhs_in, aff_in) = time_row(params, times.t_in, params.p_in, width)?;
    if is_degenerate(&aff_in) {
        map.impossible |= rhs_in.abs() > 1e-9;
    } else {
        map.eq_in = Some(eq_rows.len());
        eq_rows.push((row_in, rhs_in));
    }

    let (mut row_out, rhs_out, aff_out) = time_row(params, times.t_out, params.p_out, width)?;
    match mode {
        Mode::Exact => {
            if is_degenerate(&aff_out) {
                map.impossible |= rhs_out.abs() > 1e-9;
            } else {
                map.eq_out = Some(eq_rows.len());
                eq_rows.push((row_out, rhs_out));
            }
        }
        Mode::Relaxed { rho } => {
            // p(t_out) - p_out + s_1 - s_2 = 0
            row_out[n] = 1.0;
            row_out[n + 1] = -1.0;
            map.eq_out = Some(eq_rows.len());
            eq_rows.push((row_out, rhs_out));
            linear[n] = rho;
            linear[n + 1] = rho;
            for j in [n, n + 1] {
                let mut sign = vec![0.0; width];
                sign[j] = -1.0;
                in_rows.push((sign, 0.0));
            }
        }
    }
    Ok((
        ConvexProgram::from_rows(hessian, linear, cost.constant, &eq_rows, &in_rows),
        map,
    ))
}

/// A vehicle together with its cached problem data.
#[derive(Debug, Clone)]
pub struct Agent {
    params: VehicleParams,
    config: AgentConfig,
    cost: TrackingCost,
    paths: Vec<(Vec<f64>, f64)>,
    in_bounds: (f64, f64),
}

impl Agent {
    /// Prepares the agent and solves the two entry-time LPs.
    pub fn new(params: VehicleParams, config: AgentConfig) -> Result<Self> {
        let cost = TrackingCost::new(&params);
        let paths = path_constraint_rows(&params);
        let mut agent = Agent {
            params,
            config,
            cost,
            paths,
            in_bounds: (0.0, 0.0),
        };
        agent.in_bounds = agent.solve_in_bounds()?;
        Ok(agent)
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn id(&self) -> usize {
        self.params.id
    }

    pub fn build_local_qp(&self, times: TimePair, mode: Mode) -> Result<ConvexProgram> {
        build_with(&self.params, &self.cost, &self.paths, times, mode).map(|(p, _)| p)
    }

    /// Solves the local QP at `times`.
    pub fn evaluate(&self, times: TimePair, mode: Mode) -> Result<LocalEvaluation> {
        let (program, map) = build_with(&self.params, &self.cost, &self.paths, times, mode)?;
        let infeasible = |status| LocalEvaluation {
            times,
            mode,
            feasible: false,
            value: None,
            trajectory: None,
            coupling: None,
            slacks: None,
            max_multiplier: f64::NAN,
            status,
        };
        if map.impossible {
            return Ok(infeasible(SolveStatus::Infeasible));
        }
        let mut result = convex::solve(&program, &self.config.tolerances);
        if result.status == SolveStatus::Infeasible && mode == Mode::Exact && self.within_windows(times) {
            // The bound LPs certify feasibility; the interior-point iterate jammed in a
            // thin feasible set, so solve again without the stall test.
            let patient = Tolerances {
                stall_iterations: usize::MAX,
                ..self.config.tolerances
            };
            result = convex::solve(&program, &patient);
        }
        if result.status != SolveStatus::Optimal {
            return Ok(infeasible(result.status));
        }
        let n = self.params.horizon;
        let controls = &result.x.as_slice()[..n];
        let trajectory = self.params.trajectory(controls)?;
        let lambda = |idx: Option<usize>| idx.map_or(0.0, |i| result.lambda_eq[i]);
        let coupling = Coupling {
            lambda_in: lambda(map.eq_in),
            lambda_out: lambda(map.eq_out),
            rate_in: trajectory.velocity_at(times.t_in)?,
            rate_out: trajectory.velocity_at(times.t_out)?,
        };
        let slacks = match mode {
            Mode::Exact => None,
            Mode::Relaxed { .. } => Some((result.x[n].max(0.0), result.x[n + 1].max(0.0))),
        };
        let max_multiplier = result
            .lambda_eq
            .iter()
            .chain(result.lambda_in.iter())
            .fold(0.0f64, |m, l| m.max(l.abs()));
        Ok(LocalEvaluation {
            times,
            mode,
            feasible: true,
            value: Some(result.objective.max(0.0)),
            trajectory: Some(trajectory),
            coupling: Some(coupling),
            slacks,
            max_multiplier,
            status: result.status,
        })
    }

    /// Whether `times` lies in the entry window and in the exit window at `t_in`.
    fn within_windows(&self, times: TimePair) -> bool {
        let (lo, hi) = self.in_bounds;
        (lo..=hi).contains(&times.t_in)
            && self
                .time_bounds_out(times.t_in)
                .is_ok_and(|(omin, omax)| (omin..=omax).contains(&times.t_out))
    }

    /// `(t_in_min, t_in_max)`, computed once at construction.
    pub fn time_bounds_in(&self) -> (f64, f64) {
        self.in_bounds
    }

    fn extremal_trajectories(&self, pin_entry: Option<f64>) -> Result<Option<(StateTrajectory, StateTrajectory)>> {
        let n = self.params.horizon;
        let terminal = self.params.terminal_position_row();
        let mut eq_rows = Vec::new();
        if let Some(t_in) = pin_entry {
            let (row, rhs, aff) = time_row(&self.params, t_in, self.params.p_in, n)?;
            if is_degenerate(&aff) {
                if rhs.abs() > 1e-9 {
                    return Ok(None);
                }
            } else {
                eq_rows.push((row, rhs));
            }
        }
        let solve_lp = |sign: f64| -> Result<Option<StateTrajectory>> {
            let program = ConvexProgram::from_rows(
                DMatrix::zeros(n, n),
                &terminal.coeffs * sign,
                0.0,
                &eq_rows,
                &self.paths,
            );
            let result: SolveResult = convex::solve(&program, &self.config.tolerances);
            if result.status != SolveStatus::Optimal {
                return Ok(None);
            }
            Ok(Some(self.params.trajectory(result.x.as_slice())?))
        };
        let fastest = solve_lp(-1.0)?;
        let slowest = solve_lp(1.0)?;
        Ok(fastest.zip(slowest))
    }

    fn solve_in_bounds(&self) -> Result<(f64, f64)> {
        let p_in = self.params.p_in;
        let (fast, slow) = self.extremal_trajectories(None)?.ok_or_else(|| {
            Error::NoFeasibleCrossing(format!("vehicle {}: path constraints are infeasible", self.id()))
        })?;
        if *fast.positions.last().unwrap() < p_in {
            return Err(Error::NoFeasibleCrossing(format!(
                "vehicle {} cannot reach p_in = {p_in} m within the horizon",
                self.id()
            )));
        }
        let t_min = fast.crossing_time(p_in)?;
        let t_max = if *slow.positions.last().unwrap() < p_in {
            self.params.horizon_end()
        } else {
            slow.crossing_time(p_in)?
        };
        Ok((t_min, t_max))
    }

    /// `(t_out_min(t_in), t_out_max(t_in))`, pulled in by [`EXIT_EDGE`].
    pub fn time_bounds_out(&self, t_in: f64) -> Result<(f64, f64)> {
        let p_out = self.params.p_out;
        let infeasible = || {
            Error::NoFeasibleCrossing(format!(
                "vehicle {}: entry at t_in = {t_in} s is not achievable",
                self.id()
            ))
        };
        if !(0.0..=self.params.horizon_end()).contains(&t_in) {
            return Err(infeasible());
        }
        let (fast, slow) = self.extremal_trajectories(Some(t_in))?.ok_or_else(infeasible)?;
        if *fast.positions.last().unwrap() < p_out {
            return Err(Error::NoFeasibleCrossing(format!(
                "vehicle {} entering at {t_in} s cannot reach p_out = {p_out} m within the horizon",
                self.id()
            )));
        }
        let t_min = fast.crossing_time(p_out)?;
        let t_max = if *slow.positions.last().unwrap() < p_out {
            self.params.horizon_end()
        } else {
            slow.crossing_time(p_out)?
        };
        let (lo, hi) = (t_min + EXIT_EDGE, t_max - EXIT_EDGE);
        Ok(if lo <= hi {
            (lo, hi)
        } else {
            let mid = 0.5 * (t_min + t_max.max(t_min));
            (mid, mid)
        })
    }

    pub fn time_bounds(&self, t_in: f64) -> Result<TimeBounds> {
        let (t_in_min, t_in_max) = self.in_bounds;
        let (t_out_min, t_out_max) = self.time_bounds_out(t_in)?;
        Ok(TimeBounds {
            t_in_min,
            t_in_max,
            t_in,
            t_out_min,
            t_out_max,
        })
    }

    /// Unconstrained tracking optimum and its crossing times.
    pub fn free_flow(&self) -> Result<(TimePair, StateTrajectory)> {
        let n = self.params.horizon;
        let program = ConvexProgram::from_rows(
            self.cost.hessian.clone(),
            self.cost.linear.clone(),
            self.cost.constant,
            &[],
            &self.paths,
        );
        let result = convex::solve(&program, &self.config.tolerances);
        if !result.is_optimal() {
            return Err(Error::Solver(format!(
                "free-flow problem of vehicle {} did not solve ({:?})",
                self.id(),
                result.status
            )));
        }
        let traj = self.params.trajectory(&result.x.as_slice()[..n])?;
        let t_in = traj.crossing_time(self.params.p_in)?;
        let t_out = traj.crossing_time(self.params.p_out)?;
        Ok((TimePair::new(t_in, t_out), traj))
    }

    /// Gradient at a point, or `None` when it is infeasible.
    fn gradient_at(&self, times: TimePair, mode: Mode) -> Result<Option<Vector2<f64>>> {
        let eval = self.evaluate(times, mode)?;
        eval.feasible.then(|| gradient(&eval)).transpose()
    }

    /// Central finite differences of the gradient, symmetrized.
    pub fn hessian_block(&self, times: TimePair, mode: Mode) -> Result<Matrix2<f64>> {
        let inside = |t: TimePair| -> Result<bool> {
            if matches!(mode, Mode::Relaxed { .. }) {
                let end = self.params.horizon_end();
                return Ok(t.t_in >= 0.0 && t.t_out <= end && t.t_in <= end && t.t_out >= 0.0);
            }
            match self.time_bounds(t.t_in) {
                Ok(b) => Ok(b.contains(t, -self.config.stencil_margin)),
                Err(Error::NoFeasibleCrossing(_)) => Ok(false),
                Err(e) => Err(e),
            }
        };
        let base = self.evaluate(times, mode)?;
        let base_grad = gradient(&base)?;
        self.hessian_with(times, mode, base_grad, inside)
    }

    /// Finite-difference Hessian with a caller-supplied feasibility test for stencil points.
    /// Tries a central stencil with `h`, then `h/10`, then one-sided with `h`.
    pub fn hessian_with(
        &self,
        times: TimePair,
        mode: Mode,
        base_grad: Vector2<f64>,
        mut inside: impl FnMut(TimePair) -> Result<bool>,
    ) -> Result<Matrix2<f64>> {
        let h0 = self.config.fd_step;
        let shift = |j: usize, d: f64| {
            let mut t = times;
            if j == 0 {
                t.t_in += d;
            } else {
                t.t_out += d;
            }
            t
        };
        let mut cols = [Vector2::zeros(); 2];
        for (j, col) in cols.iter_mut().enumerate() {
            let mut done = false;
            for h in [h0, h0 / 10.0] {
                let (tp, tm) = (shift(j, h), shift(j, -h));
                if inside(tp)? && inside(tm)? {
                    if let (Some(gp), Some(gm)) = (self.gradient_at(tp, mode)?, self.gradient_at(tm, mode)?) {
                        *col = (gp - gm) / (2.0 * h);
                        done = true;
                        break;
                    }
                }
            }
            if !done {
                for d in [h0, -h0] {
                    let t = shift(j, d);
                    if inside(t)? {
                        if let Some(g) = self.gradient_at(t, mode)? {
                            *col = (g - base_grad) / d;
                            done = true;
                            break;
                        }
                    }
                }
            }
            if !done {
                return Err(Error::BoundaryHessian {
                    t_in: times.t_in,
                    t_out: times.t_out,
                });
            }
        }
        let h = Matrix2::from_columns(&cols);
        Ok((h + h.transpose()) * 0.5)
    }

    /// Out-time bounds and their slopes with respect to `t_in`, by finite differences.
    /// Falls back to one-sided differences at the ends of the entry window.
    pub fn bound_slopes(&self, bounds: &TimeBounds) -> Result<(f64, f64, [Option<(f64, f64)>; 2])> {
        let h = self.config.fd_step;
        let (lo, hi) = self.in_bounds;
        let t_in = bounds.t_in;
        let probe = |t: f64| -> Result<Option<(f64, f64)>> {
            if t < lo || t > hi {
                return Ok(None);
            }
            match self.time_bounds_out(t) {
                Ok(b) => Ok(Some(b)),
                Err(Error::NoFeasibleCrossing(_)) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let plus = probe(t_in + h)?;
        let minus = probe(t_in - h)?;
        let here = (bounds.t_out_min, bounds.t_out_max);
        let slope = |pick: fn((f64, f64)) -> f64| match (plus, minus) {
            (Some(p), Some(m)) => (pick(p) - pick(m)) / (2.0 * h),
            (Some(p), None) => (pick(p) - pick(here)) / h,
            (None, Some(m)) => (pick(here) - pick(m)) / h,
            (None, None) => 0.0,
        };
        Ok((slope(|b| b.0), slope(|b| b.1), [plus, minus]))
    }

    /// Bound slopes and the Hessian block at an accepted iterate. The Hessian is
    /// `None` when no stencil fits inside the feasible set.
    pub fn sensitivities(
        &self,
        eval: &LocalEvaluation,
        bounds: &TimeBounds,
    ) -> Result<Sensitivities> {
        let (slope_min, slope_max, [plus, minus]) = self.bound_slopes(bounds)?;
        let h = self.config.fd_step;
        let margin = self.config.stencil_margin;
        let times = eval.times;
        let mode = eval.mode;
        let end = self.params.horizon_end();
        let in_horizon = |t: TimePair| t.t_in >= 0.0 && t.t_in <= end && t.t_out >= 0.0 && t.t_out <= end;
        let inside = |t: TimePair| -> Result<bool> {
            if !in_horizon(t) {
                return Ok(false);
            }
            if matches!(mode, Mode::Relaxed { .. }) {
                return Ok(true);
            }
            let window = if t.t_in == times.t_in {
                Some((bounds.t_out_min, bounds.t_out_max))
            } else if (t.t_in - (times.t_in + h)).abs() < 1e-15 {
                plus
            } else if (t.t_in - (times.t_in - h)).abs() < 1e-15 {
                minus
            } else {
                let (lo, hi) = self.in_bounds;
                if t.t_in < lo || t.t_in > hi {
                    None
                } else {
                    match self.time_bounds_out(t.t_in) {
                        Ok(b) => Some(b),
                        Err(Error::NoFeasibleCrossing(_)) => None,
                        Err(e) => return Err(e),
                    }
                }
            };
            Ok(window.is_some_and(|(lo, hi)| t.t_out >= lo + margin && t.t_out <= hi - margin))
        };
        let hessian = match gradient(eval) {
            Ok(g) => match self.hessian_with(times, mode, g, inside) {
                Ok(hb) => Some(hb),
                Err(Error::BoundaryHessian { .. }) => None,
                Err(e) => return Err(e),
            },
            Err(_) => None,
        };
        Ok(Sensitivities {
            hessian,
            slope_min,
            slope_max,
        })
    }

    /// Exact-penalty weight: the largest multiplier sampled on a grid over the
    /// feasible time set, times the safety factor.
    pub fn estimate_rho(&self) -> Result<f64> {
        let m = self.config.rho_grid.max(1);
        let frac = |i: usize| (i as f64 + 0.5) / m as f64;
        let (lo, hi) = self.in_bounds;
        let mut largest = 0.0f64;
        for i in 0..m {
            let t_in = lo + frac(i) * (hi - lo);
            let (omin, omax) = match self.time_bounds_out(t_in) {
                Ok(b) => b,
                Err(Error::NoFeasibleCrossing(_)) => continue,
                Err(e) => return Err(e),
            };
            for k in 0..m {
                let t_out = omin + frac(k) * (omax - omin);
                let eval = self.evaluate(TimePair::new(t_in, t_out), Mode::Exact)?;
                if eval.feasible {
                    largest = largest.max(eval.max_multiplier);
                }
            }
        }
        Ok(self.config.rho_safety * largest.max(0.1))
    }
}
