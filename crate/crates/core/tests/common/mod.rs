//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use intersect_core::agent::{Agent, AgentConfig, Mode, TimePair};
use intersect_core::convex::{ConvexProgram, Tolerances};
use intersect_core::dynamics::VehicleParams;
use intersect_core::scenario::ScenarioConfig;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FEAS_TOL: f64 = 1e-9;

/// Tolerances used by the agents, also used for oracle comparisons.
pub fn tight() -> Tolerances {
    AgentConfig::default().tolerances
}

/// The six vehicles of the bundled scenarios, by id.
pub fn table_agents() -> Vec<Agent> {
    let config = ScenarioConfig::builtin(1).unwrap();
    let mut params = config.vehicles.clone();
    params.sort_by_key(|p| p.id);
    params
        .into_iter()
        .map(|p| Agent::new(p, AgentConfig::default()).unwrap())
        .collect()
}

/// Agents of a bundled scenario in crossing order.
pub fn scenario_agents(config: &ScenarioConfig) -> Vec<Agent> {
    config
        .vehicles_in_order()
        .into_iter()
        .map(|p| Agent::new(p, AgentConfig::default()).unwrap())
        .collect()
}

/// Random convex program with a known feasible point. `lp` drops the quadratic term
/// and adds a box so the LP is bounded.
pub fn random_program(rng: &mut ChaCha8Rng, lp: bool) -> ConvexProgram {
    random_program_with(rng, lp, true)
}

/// As [`random_program`]; without `touching` no inequality passes through the
/// known feasible point, so the optimal multipliers are unique with probability one.
pub fn random_program_with(rng: &mut ChaCha8Rng, lp: bool, touching: bool) -> ConvexProgram {
    let n = rng.random_range(2..=4usize);
    let m_in = rng.random_range(1..=5usize);
    let m_eq = if rng.random_bool(0.3) { 1 } else { 0 };
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let hessian = if lp {
        DMatrix::zeros(n, n)
    } else {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(n, n) * rng.random_range(0.05..1.0)
    };
    let linear = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let mut p = ConvexProgram {
        hessian,
        linear,
        constant: 0.0,
        a_eq: DMatrix::zeros(0, n),
        b_eq: DVector::zeros(0),
        a_in: DMatrix::zeros(0, n),
        b_in: DVector::zeros(0),
    };
    for _ in 0..m_eq {
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rhs = row.iter().zip(x0.iter()).map(|(a, x)| a * x).sum();
        p.push_eq(&row, rhs);
    }
    for _ in 0..m_in {
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ax: f64 = row.iter().zip(x0.iter()).map(|(a, x)| a * x).sum();
        let slack = if touching && rng.random_bool(0.3) {
            0.0
        } else {
            rng.random_range(0.05..1.0)
        };
        p.push_in(&row, ax + slack);
    }
    if lp {
        for i in 0..n {
            p.push_bounds(i, -5.0, 5.0);
        }
    }
    p
}

fn feasible(p: &ConvexProgram, x: &DVector<f64>) -> bool {
    let scale = 1.0 + x.amax();
    let eq_ok = (&p.a_eq * x - &p.b_eq).iter().all(|r| r.abs() <= FEAS_TOL * scale);
    let in_ok = (&p.a_in * x - &p.b_in).iter().all(|r| *r <= FEAS_TOL * scale);
    eq_ok && in_ok
}

fn subsets(m: usize) -> impl Iterator<Item = Vec<usize>> {
    (0u32..(1 << m)).map(move |mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
}

/// Optimal value of a strictly convex QP by enumerating active sets: the KKT point
/// of the first set whose solution is primal feasible with nonnegative multipliers.
pub fn qp_by_active_sets(p: &ConvexProgram) -> Option<f64> {
    let n = p.num_vars();
    let mut best: Option<f64> = None;
    for set in subsets(p.num_in()) {
        let k = p.num_eq() + set.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        rhs.rows_mut(0, n).copy_from(&(-&p.linear));
        let rows: Vec<(DVector<f64>, f64)> = (0..p.num_eq())
            .map(|i| (p.a_eq.row(i).transpose(), p.b_eq[i]))
            .chain(set.iter().map(|&i| (p.a_in.row(i).transpose(), p.b_in[i])))
            .collect();
        for (j, (a, b)) in rows.iter().enumerate() {
            kkt.view_mut((0, n + j), (n, 1)).copy_from(a);
            kkt.view_mut((n + j, 0), (1, n)).copy_from(&a.transpose());
            rhs[n + j] = *b;
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        if (&kkt * &sol - &rhs).amax() > 1e-8 {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        // Hx + g + Aᵀλ = 0 with λ >= 0 on active inequalities.
        let duals_ok = (0..set.len()).all(|j| sol[n + p.num_eq() + j] >= -1e-9);
        if duals_ok && feasible(p, &x) {
            let obj = p.objective(&x);
            best = Some(best.map_or(obj, |b: f64| b.min(obj)));
        }
    }
    best
}

/// Optimal value of a bounded LP by enumerating vertices.
pub fn lp_by_vertices(p: &ConvexProgram) -> Option<f64> {
    let n = p.num_vars();
    let m = p.num_in();
    let mut best: Option<f64> = None;
    for set in subsets(m) {
        if p.num_eq() + set.len() != n {
            continue;
        }
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i < p.num_eq() {
                p.a_eq[(i, j)]
            } else {
                p.a_in[(set[i - p.num_eq()], j)]
            }
        });
        let b = DVector::from_fn(n, |i, _| {
            if i < p.num_eq() {
                p.b_eq[i]
            } else {
                p.b_in[set[i - p.num_eq()]]
            }
        });
        if a.determinant().abs() < 1e-12 {
            continue;
        }
        let Some(x) = a.lu().solve(&b) else { continue };
        if feasible(p, &x) {
            let obj = p.objective(&x);
            best = Some(best.map_or(obj, |c: f64| c.min(obj)));
        }
    }
    best
}

/// Keeps samples this far (s) from every edge of the feasible time set.
pub const INTERIOR: f64 = 1e-2;

/// A time pair drawn uniformly from the interior of the agent's feasible set.
pub fn interior_pair(agent: &Agent, rng: &mut ChaCha8Rng) -> Option<TimePair> {
    let (lo, hi) = agent.time_bounds_in();
    if hi - lo <= 2.0 * INTERIOR {
        return None;
    }
    for _ in 0..50 {
        let t_in = rng.random_range(lo + INTERIOR..hi - INTERIOR);
        let Ok((omin, omax)) = agent.time_bounds_out(t_in) else { continue };
        if omax - omin > 2.0 * INTERIOR {
            return Some(TimePair::new(t_in, rng.random_range(omin + INTERIOR..omax - INTERIOR)));
        }
    }
    None
}

/// Worst relative error between the reported gradient and central differences of
/// the value with step `h`.
pub fn gradient_error(agent: &Agent, times: TimePair, h: f64) -> f64 {
    let value = |t_in: f64, t_out: f64| {
        let e = agent.evaluate(TimePair::new(t_in, t_out), Mode::Exact).unwrap();
        assert!(e.feasible, "stencil point ({t_in}, {t_out}) infeasible");
        e.value.unwrap()
    };
    let g = agent.evaluate(times, Mode::Exact).unwrap().gradient().unwrap();
    let fd_in = (value(times.t_in + h, times.t_out) - value(times.t_in - h, times.t_out)) / (2.0 * h);
    let fd_out = (value(times.t_in, times.t_out + h) - value(times.t_in, times.t_out - h)) / (2.0 * h);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-6);
    rel(g[0], fd_in).max(rel(g[1], fd_out))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PenaltyCheck {
    pub max_slack: f64,
    /// Largest `|V_relaxed - V_exact| / (1 + V_exact)`.
    pub max_value_error: f64,
}

pub fn exact_penalty_check(agent: &Agent, rho: f64, pairs: &[TimePair]) -> PenaltyCheck {
    let mut out = PenaltyCheck::default();
    for &t in pairs {
        let exact = agent.evaluate(t, Mode::Exact).unwrap();
        let relaxed = agent.evaluate(t, Mode::Relaxed { rho }).unwrap();
        assert!(exact.feasible && relaxed.feasible, "{t:?}");
        let (s1, s2) = relaxed.slacks.unwrap();
        let ve = exact.value.unwrap();
        let vr = relaxed.value.unwrap();
        out.max_slack = out.max_slack.max(s1).max(s2);
        out.max_value_error = out.max_value_error.max((vr - ve).abs() / (1.0 + ve));
    }
    out
}

/// Two vehicles heading for the same gap: the first must pass before the second.
pub fn toy_agents() -> Vec<Agent> {
    let v = |id, p0| {
        VehicleParams::new(id, 0.1, 40, (-2.0, 2.0), (1.0, 1.0), 10.0, (p0, 10.0), (0.0, 8.0)).unwrap()
    };
    [v(1, -20.0), v(2, -22.0)]
        .into_iter()
        .map(|p| Agent::new(p, AgentConfig::default()).unwrap())
        .collect()
}

/// Minimum of the joint objective over a lattice of feasible time vectors with
/// spacing `step`, for a two-vehicle crossing order (first vehicle exits before the
/// second enters).
pub fn grid_search_two(agents: &[Agent], step: f64) -> f64 {
    assert_eq!(agents.len(), 2);
    // Lattice index -> best value over the other coordinate.
    let sweep = |agent: &Agent, keep_out: bool| -> Vec<(i64, f64)> {
        let (lo, hi) = agent.time_bounds_in();
        let mut best = std::collections::BTreeMap::new();
        let first = (lo / step).ceil() as i64;
        let last = (hi / step).floor() as i64;
        for i in first..=last {
            let t_in = i as f64 * step;
            let Ok((omin, omax)) = agent.time_bounds_out(t_in) else { continue };
            for j in (omin / step).ceil() as i64..=(omax / step).floor() as i64 {
                let t_out = j as f64 * step;
                let e = agent.evaluate(TimePair::new(t_in, t_out), Mode::Exact).unwrap();
                if !e.feasible {
                    continue;
                }
                let key = if keep_out { j } else { i };
                let v = e.value.unwrap();
                let slot = best.entry(key).or_insert(f64::INFINITY);
                *slot = f64::min(*slot, v);
            }
        }
        best.into_iter().collect()
    };
    let first = sweep(&agents[0], true);
    let second = sweep(&agents[1], false);
    let mut result = f64::INFINITY;
    for &(out_idx, v1) in &first {
        for &(in_idx, v2) in &second {
            if in_idx >= out_idx {
                result = result.min(v1 + v2);
            }
        }
    }
    result
}
