//! Central SQP coordinator over the entry/exit times of all vehicles.
//!
//! The coupled problem is `min Σ V_i(t_i)` subject to each vehicle's feasible time
//! window and the precedence rows `t_in,(i+1) >= t_out,i` of the crossing order.
//! Each iteration solves a QP model built from the agents' sensitivities,
//! globalized by an ℓ1-merit backtracking linesearch.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen};

use crate::agent::TimePair;
use crate::convex::{self, ConvexProgram, SolveStatus, Tolerances};
use crate::dynamics::StateTrajectory;
use crate::error::{Error, Result};
pub use crate::protocol::FeasibilityMode;
use crate::protocol::{AgentRequest, Backend, RequestKind, SetupReply, VehicleSnapshot};

/// Entry/exit times of all vehicles, listed in crossing order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimesVector(pub Vec<TimePair>);

impl TimesVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.len(), self.0.iter().flat_map(|t| [t.t_in, t.t_out]))
    }

    pub fn from_slice(v: &[f64]) -> Self {
        TimesVector(v.chunks(2).map(|c| TimePair::new(c[0], c[1])).collect())
    }

    /// Smallest precedence slack `t_in,(i+1) - t_out,i`.
    pub fn min_precedence_gap(&self) -> f64 {
        self.0
            .windows(2)
            .map(|w| w[1].t_in - w[0].t_out)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqpConfig {
    /// Armijo sufficient-decrease constant, in (0, 0.5].
    pub gamma: f64,
    /// Backtracking factor, in (0, 1).
    pub beta: f64,
    /// KKT tolerance for stopping.
    pub epsilon: f64,
    /// Initial ℓ1 merit weight.
    pub sigma: f64,
    /// Relaxation penalty; `None` lets each agent estimate its own.
    pub rho: Option<f64>,
    /// Eigenvalue floor for the Hessian blocks.
    pub eps_h: f64,
    pub max_sqp_iters: usize,
    pub max_ls_iters: usize,
    pub mode: FeasibilityMode,
    /// Precedence margin used when building the initial guess (s).
    pub init_margin: f64,
    /// Largest relaxation slack accepted at a solution (m).
    pub slack_tol: f64,
}

impl Default for SqpConfig {
    fn default() -> Self {
        SqpConfig {
            gamma: 0.01,
            beta: 0.5,
            epsilon: 1e-2,
            sigma: 1.0,
            rho: None,
            eps_h: 1e-6,
            max_sqp_iters: 50,
            max_ls_iters: 30,
            mode: FeasibilityMode::Projection,
            init_margin: 1e-3,
            slack_tol: 1e-6,
        }
    }
}

impl SqpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 0.5) {
            return bad("gamma must lie in (0, 0.5]");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) || !(self.eps_h > 0.0) || !(self.sigma > 0.0) {
            return bad("epsilon, eps_h and sigma must be positive");
        }
        if self.rho.is_some_and(|r| !(r > 0.0)) {
            return bad("rho must be positive");
        }
        if self.max_ls_iters == 0 {
            return bad("max_ls_iters must be at least 1");
        }
        Ok(())
    }
}

/// Gradient, constraints and curvature of the coupled problem at one iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpData {
    pub f: f64,
    pub grad_f: DVector<f64>,
    /// Constraint values; feasible means `h >= 0`.
    pub h: DVector<f64>,
    /// Jacobian of `h`, one row per constraint.
    pub jac_h: DMatrix<f64>,
    pub blocks: Vec<Matrix2<f64>>,
}

/// Steps below this size (s) only update the multipliers; the merit cannot resolve them.
pub const NEGLIGIBLE_STEP: f64 = 1e-9;

/// True when the step is too small for the merit function to resolve: either its
/// length is below [`NEGLIGIBLE_STEP`] or its predicted effect is at roundoff level.
fn negligible(step: &DVector<f64>, slope: f64, merit: f64) -> bool {
    inf_norm(step) <= NEGLIGIBLE_STEP || slope.abs() <= 1e-12 * (1.0 + merit.abs())
}

fn raise_sigma(sigma: &mut f64, mu: &DVector<f64>) {
    let largest = inf_norm(mu);
    if *sigma <= largest {
        *sigma = 2.0 * largest;
    }
}

/// Rows of `h` per vehicle: `t_in - t_in_min`, `t_in_max - t_in`,
/// `t_out - t_out_min(t_in)`, `t_out_max(t_in) - t_out`.
pub const ROWS_PER_VEHICLE: usize = 4;

/// Builds `f`, `∇f`, `h`, `∇h` and the block-diagonal Hessian from per-vehicle
/// snapshots listed in crossing order. A vehicle without a Hessian block gets
/// `eps_h · I`.
pub fn assemble_nlp(snapshots: &[Option<VehicleSnapshot>], eps_h: f64) -> Result<NlpData> {
    let na = snapshots.len();
    let snaps: Vec<&VehicleSnapshot> = snapshots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.as_ref()
                .ok_or_else(|| Error::Protocol(format!("missing evaluation for vehicle slot {i}")))
        })
        .collect::<Result<_>>()?;
    let nrows = ROWS_PER_VEHICLE * na + na.saturating_sub(1);
    let mut h = DVector::zeros(nrows);
    let mut jac = DMatrix::zeros(nrows, 2 * na);
    let mut grad = DVector::zeros(2 * na);
    let mut f = 0.0;
    let mut blocks = Vec::with_capacity(na);
    for (i, s) in snaps.iter().enumerate() {
        let (ci, co) = (2 * i, 2 * i + 1);
        let r = ROWS_PER_VEHICLE * i;
        let t = s.times;
        let b = &s.bounds;
        f += s.value;
        grad[ci] = s.gradient[0];
        grad[co] = s.gradient[1];
        h[r] = t.t_in - b.t_in_min;
        jac[(r, ci)] = 1.0;
        h[r + 1] = b.t_in_max - t.t_in;
        jac[(r + 1, ci)] = -1.0;
        h[r + 2] = t.t_out - b.t_out_min;
        jac[(r + 2, co)] = 1.0;
        jac[(r + 2, ci)] = -s.slope_min;
        h[r + 3] = b.t_out_max - t.t_out;
        jac[(r + 3, co)] = -1.0;
        jac[(r + 3, ci)] = s.slope_max;
        blocks.push(s.hessian.unwrap_or_else(|| Matrix2::identity() * eps_h));
    }
    for i in 0..na.saturating_sub(1) {
        let r = ROWS_PER_VEHICLE * na + i;
        h[r] = snaps[i + 1].times.t_in - snaps[i].times.t_out;
        jac[(r, 2 * (i + 1))] = 1.0;
        jac[(r, 2 * i + 1)] = -1.0;
    }
    Ok(NlpData {
        f,
        grad_f: grad,
        h,
        jac_h: jac,
        blocks,
    })
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `‖(∇f - ∇hᵀμ, min(0, h))‖∞`.
pub fn kkt_residual(nlp: &NlpData, mu: &DVector<f64>) -> f64 {
    let stationarity = &nlp.grad_f - nlp.jac_h.transpose() * mu;
    let violation = nlp.h.map(|x| x.min(0.0));
    inf_norm(&stationarity).max(inf_norm(&violation))
}

/// Lifts every eigenvalue of each 2×2 block to at least `eps_h`. Blocks that are
/// already above the floor are returned untouched. Returns the number of blocks modified.
pub fn regularize_hessian(blocks: &[Matrix2<f64>], eps_h: f64) -> (Vec<Matrix2<f64>>, usize) {
    let mut modified = 0;
    let out = blocks
        .iter()
        .map(|b| {
            let sym = (b + b.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            if eig.eigenvalues.iter().all(|&l| l >= eps_h) {
                return *b;
            }
            modified += 1;
            let clamped = eig.eigenvalues.map(|l| l.max(eps_h));
            eig.eigenvectors * Matrix2::from_diagonal(&clamped) * eig.eigenvectors.transpose()
        })
        .collect();
    (out, modified)
}

/// Primal step and new multiplier estimate from the QP model.
#[derive(Debug, Clone, PartialEq)]
pub struct Subproblem {
    pub step: DVector<f64>,
    pub mu: DVector<f64>,
}

/// `min ½ΔᵀHΔ + ∇fᵀΔ  s.t.  h + ∇h Δ >= 0`.
pub fn solve_subproblem(nlp: &NlpData, blocks: &[Matrix2<f64>], iteration: usize) -> Result<Subproblem> {
    let n = nlp.grad_f.len();
    let mut program = ConvexProgram::new(n);
    for (i, b) in blocks.iter().enumerate() {
        program.hessian.view_mut((2 * i, 2 * i), (2, 2)).copy_from(b);
    }
    program.linear = nlp.grad_f.clone();
    program.a_in = -nlp.jac_h.clone();
    program.b_in = nlp.h.clone();
    let tol = Tolerances {
        kkt: 1e-10,
        gap: 1e-12,
        ..Tolerances::default()
    };
    let result = convex::solve(&program, &tol);
    match result.status {
        SolveStatus::Optimal => Ok(Subproblem {
            step: result.x,
            mu: result.lambda_in,
        }),
        status => Err(Error::LinearizationInfeasible {
            iteration,
            detail: format!(
                "QP status {status:?}, primal infeasibility {:e}",
                result.primal_infeasibility
            ),
        }),
    }
}

/// ℓ1 merit `f + σ‖min(h, 0)‖₁`.
pub fn merit(f: f64, h: &DVector<f64>, sigma: f64) -> f64 {
    f + sigma * violation_l1(h)
}

/// First-order change of the merit along the step, `∇fᵀΔ - σ‖min(h, 0)‖₁`.
pub fn merit_slope(grad_f: &DVector<f64>, h: &DVector<f64>, sigma: f64, step: &DVector<f64>) -> f64 {
    grad_f.dot(step) - sigma * violation_l1(h)
}

fn violation_l1(h: &DVector<f64>) -> f64 {
    h.iter().map(|x| (-x).max(0.0)).sum()
}

/// Armijo test used by the linesearch.
pub fn armijo_accepts(trial: f64, current: f64, slope: f64, alpha: f64, gamma: f64) -> bool {
    trial <= current + gamma * alpha * slope
}

/// Backtracking over precomputed trial merits; used to check the acceptance arithmetic.
pub fn backtrack(
    current: f64,
    slope: f64,
    gamma: f64,
    beta: f64,
    max_trials: usize,
    mut trial_merit: impl FnMut(f64) -> f64,
) -> Option<(f64, usize)> {
    let mut alpha = 1.0;
    for k in 1..=max_trials {
        if armijo_accepts(trial_merit(alpha), current, slope, alpha, gamma) {
            return Some((alpha, k));
        }
        alpha *= beta;
    }
    None
}

/// One line of the iteration log.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub kkt_residual: f64,
    pub step_norm: f64,
    pub alpha: f64,
    pub ls_trials: usize,
    pub mode: FeasibilityMode,
    pub regularized_blocks: usize,
    pub sigma: f64,
    pub merit_before: f64,
    pub merit_after: f64,
    pub merit_slope: f64,
    /// Largest change of any out-time made by projection in the accepted trial (s).
    pub projection_shift: f64,
    /// Step taken without the decrease test because the merit cannot resolve it.
    pub micro: bool,
    /// Trials rejected because some agent found its times infeasible.
    pub infeasible_trials: usize,
    /// Accepted iterate.
    pub times: TimesVector,
}

impl fmt::Display for IterationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} r={:.6e} step={:.6e} alpha={} n_ls={} mode={} reg={} sigma={:.6e} merit={:.9e}->{:.9e} dm={:.6e}{}",
            self.iteration,
            self.kkt_residual,
            self.step_norm,
            self.alpha,
            self.ls_trials,
            self.mode,
            self.regularized_blocks,
            self.sigma,
            self.merit_before,
            self.merit_after,
            self.merit_slope,
            if self.micro { " micro" } else { "" }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoordinationStatus {
    Converged,
    MaxIterations,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinationResult {
    pub status: CoordinationStatus,
    /// Final times in crossing order.
    pub times: TimesVector,
    pub values: Vec<f64>,
    pub objective: f64,
    pub trajectories: Vec<Option<StateTrajectory>>,
    pub slacks: Vec<f64>,
    pub multipliers: DVector<f64>,
    pub residual_history: Vec<f64>,
    pub final_residual: f64,
    pub n_sqp: usize,
    pub n_ls: usize,
    pub regularizations: usize,
    pub log: Vec<IterationRecord>,
    pub rho: Vec<Option<f64>>,
}

impl CoordinationResult {
    pub fn converged(&self) -> bool {
        self.status == CoordinationStatus::Converged
    }

    pub fn log_lines(&self) -> String {
        self.log.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Primal-dual iterate and bookkeeping.
#[derive(Debug, Clone)]
pub struct SqpState {
    pub times: TimesVector,
    pub mu: DVector<f64>,
    pub iteration: usize,
    pub residual: f64,
    pub sigma: f64,
    pub snapshots: Vec<VehicleSnapshot>,
}

/// Free-flow times shifted forward so consecutive vehicles keep `margin` apart, with
/// entry times clamped into their windows.
pub fn initial_guess(setups: &[SetupReply], horizon_ends: &[f64], margin: f64) -> TimesVector {
    let mut prev_out = f64::NEG_INFINITY;
    let mut out = Vec::with_capacity(setups.len());
    for (s, &end) in setups.iter().zip(horizon_ends) {
        let ff = s.free_flow;
        let shift = (prev_out + margin - ff.t_in).max(0.0);
        let mut t_in = ff.t_in + shift;
        let mut t_out = ff.t_out + shift;
        let clamped = t_in.clamp(s.t_in_min, s.t_in_max);
        t_out += clamped - t_in;
        t_in = clamped;
        t_out = t_out.clamp(t_in, end);
        prev_out = t_out;
        out.push(TimePair::new(t_in, t_out));
    }
    TimesVector(out)
}

struct Coordinator<'a, B: Backend> {
    backend: &'a mut B,
    config: SqpConfig,
    rho: Vec<Option<f64>>,
    horizon_ends: Vec<f64>,
    in_windows: Vec<(f64, f64)>,
    n_ls: usize,
}

impl<B: Backend> Coordinator<'_, B> {
    fn requests(&self, kind: RequestKind, times: &TimesVector) -> Vec<AgentRequest> {
        times
            .0
            .iter()
            .enumerate()
            .map(|(i, &t)| AgentRequest {
                kind,
                times: t,
                mode: self.config.mode,
                rho: self.rho[i],
            })
            .collect()
    }

    fn evaluate(&mut self, kind: RequestKind, times: &TimesVector) -> Result<Vec<VehicleSnapshot>> {
        let requests = self.requests(kind, times);
        self.backend
            .round(&requests)
            .and_then(|replies| replies.into_iter().map(|r| r.into_snapshot()).collect())
    }

    /// Keeps candidate entry times inside their windows and all times inside the horizon.
    fn sanitize(&self, v: &DVector<f64>) -> TimesVector {
        let mut t = TimesVector::from_slice(v.as_slice());
        for (i, pair) in t.0.iter_mut().enumerate() {
            let (lo, hi) = self.in_windows[i];
            pair.t_in = pair.t_in.clamp(lo, hi);
            pair.t_out = pair.t_out.clamp(0.0, self.horizon_ends[i]);
        }
        t
    }

    /// Merit of a trial evaluation; infinite if any agent found it infeasible.
    fn trial_merit(&self, snaps: &[VehicleSnapshot], sigma: f64) -> Result<(f64, NlpData)> {
        let wrapped: Vec<Option<VehicleSnapshot>> = snaps.iter().cloned().map(Some).collect();
        let nlp = assemble_nlp(&wrapped, self.config.eps_h)?;
        let m = if snaps.iter().all(|s| s.feasible) {
            merit(nlp.f, &nlp.h, sigma)
        } else {
            f64::INFINITY
        };
        Ok((m, nlp))
    }
}

/// Outcome of one backtracking linesearch.
#[derive(Debug, Clone)]
pub struct LinesearchOutcome {
    pub alpha: f64,
    pub trials: usize,
    pub times: TimesVector,
    pub snapshots: Vec<VehicleSnapshot>,
    pub merit: f64,
    pub infeasible_trials: usize,
}

fn linesearch<B: Backend>(
    co: &mut Coordinator<'_, B>,
    state: &SqpState,
    step: &DVector<f64>,
    merit0: f64,
    slope: f64,
) -> Result<LinesearchOutcome> {
    let base = state.times.to_dvector();
    let mut alpha = 1.0;
    let mut last = (f64::INFINITY, f64::INFINITY);
    let mut infeasible_trials = 0;
    for trial in 1..=co.config.max_ls_iters {
        co.n_ls += 1;
        let candidate = co.sanitize(&(&base + step * alpha));
        let snaps = co.evaluate(RequestKind::Trial, &candidate)?;
        let (m, _) = co.trial_merit(&snaps, state.sigma)?;
        let target = merit0 + co.config.gamma * alpha * slope;
        if !m.is_finite() {
            infeasible_trials += 1;
        }
        if armijo_accepts(m, merit0, slope, alpha, co.config.gamma) {
            let times = TimesVector(snaps.iter().map(|s| s.times).collect());
            return Ok(LinesearchOutcome {
                alpha,
                trials: trial,
                times,
                snapshots: snaps,
                merit: m,
                infeasible_trials,
            });
        }
        last = (m, target);
        alpha *= co.config.beta;
    }
    Err(Error::LinesearchFailure {
        iteration: state.iteration,
        trials: co.config.max_ls_iters,
        alpha: alpha / co.config.beta,
        merit: last.0,
        target: last.1,
    })
}

/// Runs the SQP loop against `backend`, whose agents are listed in crossing order.
pub fn coordinate<B: Backend>(backend: &mut B, horizon_ends: &[f64], config: &SqpConfig) -> Result<CoordinationResult> {
    config.validate()?;
    let na = backend.num_agents();
    if na == 0 || horizon_ends.len() != na {
        return Err(Error::InvalidParameter(format!(
            "{na} agents with {} horizon entries",
            horizon_ends.len()
        )));
    }
    let setup_requests: Vec<AgentRequest> = (0..na)
        .map(|_| AgentRequest {
            kind: RequestKind::Setup,
            times: TimePair::default(),
            mode: config.mode,
            rho: config.rho,
        })
        .collect();
    let setups: Vec<SetupReply> = backend
        .round(&setup_requests)?
        .into_iter()
        .map(|r| r.into_setup())
        .collect::<Result<_>>()?;

    let mut co = Coordinator {
        backend,
        config: *config,
        rho: setups.iter().map(|s| s.rho).collect(),
        horizon_ends: horizon_ends.to_vec(),
        in_windows: setups.iter().map(|s| (s.t_in_min, s.t_in_max)).collect(),
        n_ls: 0,
    };

    let guess = initial_guess(&setups, horizon_ends, config.init_margin);
    let first = co.evaluate(RequestKind::Trial, &guess)?;
    if let Some(bad) = first.iter().position(|s| !s.feasible) {
        return Err(Error::NoFeasibleCrossing(format!(
            "initial guess is infeasible for vehicle slot {bad}"
        )));
    }
    let times = TimesVector(first.iter().map(|s| s.times).collect());
    let snapshots = co.evaluate(RequestKind::Sensitivities, &times)?;
    let nrows = ROWS_PER_VEHICLE * na + na - 1;
    let mut state = SqpState {
        times,
        mu: DVector::zeros(nrows),
        iteration: 0,
        residual: f64::INFINITY,
        sigma: config.sigma,
        snapshots,
    };

    let mut log = Vec::new();
    let mut history = Vec::new();
    let mut regularizations = 0;
    let mut status = CoordinationStatus::MaxIterations;

    loop {
        let wrapped: Vec<Option<VehicleSnapshot>> = state.snapshots.iter().cloned().map(Some).collect();
        let nlp = assemble_nlp(&wrapped, config.eps_h)?;
        state.residual = kkt_residual(&nlp, &state.mu);
        history.push(state.residual);
        if state.residual <= config.epsilon {
            let worst_slack = state.snapshots.iter().map(|s| s.slack).fold(0.0, f64::max);
            status = if worst_slack <= config.slack_tol {
                CoordinationStatus::Converged
            } else {
                CoordinationStatus::Failed(format!(
                    "stationary point with relaxation slack {worst_slack:e} m"
                ))
            };
            break;
        }
        if state.iteration >= config.max_sqp_iters {
            break;
        }

        let missing_hessians = state.snapshots.iter().filter(|s| s.hessian.is_none()).count();
        let (blocks, mut reg) = regularize_hessian(&nlp.blocks, config.eps_h);
        reg += missing_hessians;
        let mut sub = match solve_subproblem(&nlp, &blocks, state.iteration) {
            Ok(s) => s,
            Err(e) => {
                status = CoordinationStatus::Failed(e.to_string());
                break;
            }
        };
        raise_sigma(&mut state.sigma, &sub.mu);
        let mut merit0 = merit(nlp.f, &nlp.h, state.sigma);
        let mut slope = merit_slope(&nlp.grad_f, &nlp.h, state.sigma, &sub.step);
        if slope >= 0.0 && !negligible(&sub.step, slope, merit0) {
            // One stronger regularization before giving up on descent.
            let floor = (config.eps_h * 1e4).max(1e-2);
            let (stronger, extra) = regularize_hessian(&nlp.blocks, floor);
            reg += extra;
            sub = match solve_subproblem(&nlp, &stronger, state.iteration) {
                Ok(s) => s,
                Err(e) => {
                    status = CoordinationStatus::Failed(e.to_string());
                    break;
                }
            };
            raise_sigma(&mut state.sigma, &sub.mu);
            merit0 = merit(nlp.f, &nlp.h, state.sigma);
            slope = merit_slope(&nlp.grad_f, &nlp.h, state.sigma, &sub.step);
            if slope >= 0.0 && !negligible(&sub.step, slope, merit0) {
                let e = Error::NonDescent {
                    iteration: state.iteration,
                    slope,
                };
                status = CoordinationStatus::Failed(e.to_string());
                break;
            }
        }
        regularizations += reg;
        let step_norm = inf_norm(&sub.step);

        let micro = negligible(&sub.step, slope, merit0);
        let outcome = if micro {
            // Below merit resolution: take the step without a decrease test.
            let candidate = co.sanitize(&(state.times.to_dvector() + &sub.step));
            co.n_ls += 1;
            let snaps = co.evaluate(RequestKind::Trial, &candidate)?;
            let (m, _) = co.trial_merit(&snaps, state.sigma)?;
            if m.is_finite() {
                LinesearchOutcome {
                    alpha: 1.0,
                    trials: 1,
                    times: TimesVector(snaps.iter().map(|s| s.times).collect()),
                    snapshots: snaps,
                    merit: m,
                    infeasible_trials: 0,
                }
            } else {
                LinesearchOutcome {
                    alpha: 0.0,
                    trials: 1,
                    times: state.times.clone(),
                    snapshots: state.snapshots.clone(),
                    merit: merit0,
                    infeasible_trials: 1,
                }
            }
        } else {
            match linesearch(&mut co, &state, &sub.step, merit0, slope) {
                Ok(o) => o,
                Err(e @ Error::LinesearchFailure { .. }) => {
                    status = CoordinationStatus::Failed(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        };

        let unprojected = co.sanitize(&(state.times.to_dvector() + &sub.step * outcome.alpha));
        let projection_shift = unprojected
            .0
            .iter()
            .zip(&outcome.times.0)
            .map(|(a, b)| (a.t_out - b.t_out).abs())
            .fold(0.0, f64::max);
        log.push(IterationRecord {
            iteration: state.iteration,
            kkt_residual: state.residual,
            step_norm,
            alpha: outcome.alpha,
            ls_trials: outcome.trials,
            mode: config.mode,
            regularized_blocks: reg,
            sigma: state.sigma,
            merit_before: merit0,
            merit_after: outcome.merit,
            merit_slope: slope,
            projection_shift,
            micro,
            infeasible_trials: outcome.infeasible_trials,
            times: outcome.times.clone(),
        });

        state.mu = (&state.mu + (&sub.mu - &state.mu) * outcome.alpha).map(|m| m.max(0.0));
        state.times = outcome.times;
        state.snapshots = if outcome.alpha == 0.0 {
            outcome.snapshots
        } else {
            co.evaluate(RequestKind::Sensitivities, &state.times)?
        };
        state.iteration += 1;
    }

    let objective = state.snapshots.iter().map(|s| s.value).sum();
    Ok(CoordinationResult {
        status,
        values: state.snapshots.iter().map(|s| s.value).collect(),
        objective,
        trajectories: state.snapshots.iter().map(|s| s.evaluation.trajectory.clone()).collect(),
        slacks: state.snapshots.iter().map(|s| s.slack).collect(),
        times: state.times,
        multipliers: state.mu,
        final_residual: state.residual,
        residual_history: history,
        n_sqp: state.iteration,
        n_ls: co.n_ls,
        regularizations,
        log,
        rho: co.rho,
    })
}
