//! Closed-loop validation: coordinate a scenario over the simulated channel, then
//! let every vehicle track its assigned times with a receding-horizon MPC.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agent::{build_tracking_qp, Agent, AgentConfig, TimePair};
use crate::convex::{self, ConvexProgram, SolveStatus, Tolerances};
use crate::dynamics::{StateTrajectory, VehicleParams};
use crate::error::{Error, Result};
use crate::runtime::{Fabric, RoundStats};
use crate::scenario::{NoiseConfig, ScenarioConfig};
use crate::sqp::{coordinate, CoordinationResult, FeasibilityMode, TimesVector};

/// Positions within this distance of an intersection edge count as outside (m).
pub const OCCUPANCY_TOLERANCE: f64 = 1e-6;

/// Tracking MPC with soft time conditions `p(t_in) <= p_in + s_1` and
/// `p(t_out) >= p_out - s_2`, each slack penalized by `penalty`.
///
/// Times are relative to the start of the horizon. A condition whose time has
/// already passed or lies beyond the horizon is dropped; its slack stays in the
/// problem and is driven to zero by the penalty. Variables are the controls
/// followed by the two slacks.
pub fn build_tracking_mpc(params: &VehicleParams, times: TimePair, penalty: f64) -> Result<ConvexProgram> {
    if !(penalty > 0.0 && penalty.is_finite()) {
        return Err(Error::InvalidParameter(format!("penalty must be positive, got {penalty}")));
    }
    let base = build_tracking_qp(params);
    let n = params.horizon;
    let width = n + 2;
    let mut hessian = DMatrix::zeros(width, width);
    hessian.view_mut((0, 0), (n, n)).copy_from(&base.hessian);
    let mut linear = DVector::zeros(width);
    linear.rows_mut(0, n).copy_from(&base.linear);
    linear[n] = penalty;
    linear[n + 1] = penalty;

    let mut in_rows: Vec<(Vec<f64>, f64)> = base
        .a_in
        .row_iter()
        .zip(base.b_in.iter())
        .map(|(row, &b)| {
            let mut r: Vec<f64> = row.iter().cloned().collect();
            r.resize(width, 0.0);
            (r, b)
        })
        .collect();
    let end = params.horizon_end();
    let active = |t: f64| t > 0.0 && t <= end;
    if active(times.t_in) {
        let row = params.position_row(times.t_in)?;
        let mut r: Vec<f64> = row.coeffs.iter().cloned().collect();
        r.resize(width, 0.0);
        r[n] = -1.0;
        in_rows.push((r, params.p_in - row.offset));
    }
    if active(times.t_out) {
        let row = params.position_row(times.t_out)?;
        let mut r: Vec<f64> = row.coeffs.iter().map(|c| -c).collect();
        r.resize(width, 0.0);
        r[n + 1] = -1.0;
        in_rows.push((r, row.offset - params.p_out));
    }
    for j in [n, n + 1] {
        let mut r = vec![0.0; width];
        r[j] = -1.0;
        in_rows.push((r, 0.0));
    }
    Ok(ConvexProgram::from_rows(hessian, linear, base.constant, &[], &in_rows))
}

/// Solver settings of the closed-loop MPC. Polishing makes successive replans
/// agree to near machine precision, so a feasible plan is carried out unchanged.
pub fn mpc_tolerances() -> Tolerances {
    Tolerances {
        polish: true,
        ..AgentConfig::default().tolerances
    }
}

/// Seeded Gaussian measurement noise.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    config: NoiseConfig,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(config: NoiseConfig) -> Self {
        NoiseSource {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        }
    }

    pub fn measure(&mut self, x: Vector2<f64>) -> Vector2<f64> {
        let dp: f64 = self.rng.sample(StandardNormal);
        let dv: f64 = self.rng.sample(StandardNormal);
        Vector2::new(
            x[0] + self.config.position_std * dp,
            x[1] + self.config.velocity_std * dv,
        )
    }
}

/// Advances the plant by one sample with the control clamped to its bounds.
/// Returns the new state and its noisy measurement.
pub fn step_plant(
    x: Vector2<f64>,
    u: f64,
    params: &VehicleParams,
    noise: &mut NoiseSource,
) -> (Vector2<f64>, Vector2<f64>) {
    let u = u.clamp(params.u_lb, params.u_ub);
    let next = params.a * x + params.b * u;
    (next, noise.measure(next))
}

/// Closed-loop record of one vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleRun {
    pub id: usize,
    pub assigned: TimePair,
    /// True states and applied controls.
    pub trajectory: StateTrajectory,
    pub realized_in: Option<f64>,
    pub realized_out: Option<f64>,
    /// Soft-constraint penalty used by this vehicle's MPC.
    pub penalty: f64,
    /// Slacks `(entry, exit)` of the first MPC solve.
    pub first_slacks: (f64, f64),
    /// Largest slack over all MPC solves.
    pub max_slack: f64,
}

impl VehicleRun {
    pub fn delta_in(&self) -> Option<f64> {
        self.realized_in.map(|t| t - self.assigned.t_in)
    }

    pub fn delta_out(&self) -> Option<f64> {
        self.realized_out.map(|t| t - self.assigned.t_out)
    }

    pub fn times(&self) -> Vec<f64> {
        let ts = self.trajectory.sampling_time;
        (0..self.trajectory.positions.len()).map(|k| k as f64 * ts).collect()
    }

    /// Deviation from the constant-speed motion of the initial state.
    pub fn position_deviation(&self) -> Vec<f64> {
        let (p0, v0) = (self.trajectory.positions[0], self.trajectory.velocities[0]);
        self.times()
            .iter()
            .zip(&self.trajectory.positions)
            .map(|(t, p)| p - (p0 + v0 * t))
            .collect()
    }

    /// CSV with columns `t,p,v,u,p_dev`. The last row repeats no control and leaves `u` empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "p", "v", "u", "p_dev"])?;
        let dev = self.position_deviation();
        for (k, t) in self.times().iter().enumerate() {
            let u = self
                .trajectory
                .controls
                .get(k)
                .map(|u| u.to_string())
                .unwrap_or_default();
            w.write_record([
                t.to_string(),
                self.trajectory.positions[k].to_string(),
                self.trajectory.velocities[k].to_string(),
                u,
                dev[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyViolation {
    pub sample: usize,
    pub time: f64,
    /// `(id, position)` of every vehicle inside at that sample.
    pub inside: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyReport {
    pub samples: usize,
    pub violations: Vec<OccupancyViolation>,
}

impl OccupancyReport {
    pub fn exclusive(&self) -> bool {
        self.violations.is_empty()
    }
}

/// At every sample, at most one vehicle strictly inside `(p_in, p_out)`.
pub fn check_occupancy(runs: &[VehicleRun], p_in: f64, p_out: f64) -> OccupancyReport {
    let samples = runs.iter().map(|r| r.trajectory.positions.len()).min().unwrap_or(0);
    let ts = runs.first().map_or(0.0, |r| r.trajectory.sampling_time);
    let violations = (0..samples)
        .filter_map(|k| {
            let inside: Vec<(usize, f64)> = runs
                .iter()
                .map(|r| (r.id, r.trajectory.positions[k]))
                .filter(|&(_, p)| p > p_in + OCCUPANCY_TOLERANCE && p < p_out - OCCUPANCY_TOLERANCE)
                .collect();
            (inside.len() > 1).then_some(OccupancyViolation {
                sample: k,
                time: k as f64 * ts,
                inside,
            })
        })
        .collect();
    OccupancyReport { samples, violations }
}

/// Coordination of one scenario over the simulated channel.
#[derive(Debug, Clone)]
pub struct ScenarioCoordination {
    /// Agents in crossing order.
    pub agents: Vec<Agent>,
    pub result: CoordinationResult,
    pub rounds: Vec<RoundStats>,
    /// Channel ticks until every agent acknowledged its assignment.
    pub ticks: u64,
}

impl ScenarioCoordination {
    pub fn messages(&self) -> u64 {
        self.rounds.iter().map(|r| r.messages).sum()
    }

    pub fn retransmissions(&self) -> u64 {
        self.rounds.iter().map(|r| r.retransmissions).sum()
    }
}

/// Runs the SQP coordination and distributes the final times.
pub fn coordinate_scenario(config: &ScenarioConfig) -> Result<ScenarioCoordination> {
    let agents = config
        .vehicles_in_order()
        .into_iter()
        .map(|p| Agent::new(p, AgentConfig::default()))
        .collect::<Result<Vec<_>>>()?;
    let ends: Vec<f64> = agents.iter().map(|a| a.params().horizon_end()).collect();
    let mut fabric = Fabric::new(&agents, config.channel)?;
    let result = coordinate(&mut fabric, &ends, &config.sqp)?;
    fabric.assign(&result.times)?;
    let rounds = fabric.round_stats().to_vec();
    let ticks = fabric.tick();
    drop(fabric);
    Ok(ScenarioCoordination {
        agents,
        result,
        rounds,
        ticks,
    })
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub scenario: String,
    pub mode: FeasibilityMode,
    pub coordination: ScenarioCoordination,
    pub assignment: TimesVector,
    /// Runs in crossing order.
    pub vehicles: Vec<VehicleRun>,
    pub occupancy: OccupancyReport,
}

impl SimulationResult {
    /// Vehicle ids sorted by realized entry time; vehicles that never enter go last.
    pub fn realized_order(&self) -> Vec<usize> {
        let mut runs: Vec<&VehicleRun> = self.vehicles.iter().collect();
        runs.sort_by(|a, b| {
            let key = |r: &VehicleRun| r.realized_in.unwrap_or(f64::INFINITY);
            key(a).total_cmp(&key(b))
        });
        runs.iter().map(|r| r.id).collect()
    }

    pub fn order_preserved(&self) -> bool {
        let planned: Vec<usize> = self.vehicles.iter().map(|r| r.id).collect();
        self.realized_order() == planned
    }

    pub fn max_time_violation(&self) -> f64 {
        self.vehicles
            .iter()
            .flat_map(|r| [r.delta_in(), r.delta_out()])
            .map(|d| d.map_or(f64::INFINITY, f64::abs))
            .fold(0.0, f64::max)
    }

    pub fn summary(&self) -> SummaryRow {
        SummaryRow::new(&self.scenario, &self.coordination.result, self.mode)
    }

    /// Writes `vehicle_<id>.csv` for every vehicle into `dir`.
    pub fn write_vehicle_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for run in &self.vehicles {
            let file = std::fs::File::create(dir.join(format!("vehicle_{}.csv", run.id)))?;
            run.write_csv(std::io::BufWriter::new(file))?;
        }
        Ok(())
    }
}

/// Coordinates the scenario, fixes the assigned times and runs every vehicle's MPC
/// in lockstep until the end of the simulation.
pub fn run_scenario(config: &ScenarioConfig) -> Result<SimulationResult> {
    let coordination = coordinate_scenario(config)?;
    let assignment = coordination.result.times.clone();
    let tol = mpc_tolerances();

    let mut penalties = Vec::with_capacity(coordination.agents.len());
    for (agent, rho) in coordination.agents.iter().zip(&coordination.result.rho) {
        penalties.push(match (config.soft_penalty, rho) {
            (Some(w), _) => w,
            (None, Some(r)) => *r,
            (None, None) => agent.estimate_rho()?,
        });
    }
    let vehicles = closed_loop(
        &coordination.agents,
        &assignment,
        &penalties,
        config.sim_steps,
        config.noise,
        &tol,
    )?;
    let occupancy = check_occupancy(&vehicles, config.intersection.p_in, config.intersection.p_out);
    Ok(SimulationResult {
        scenario: config.name.clone(),
        mode: config.sqp.mode,
        coordination,
        assignment,
        vehicles,
        occupancy,
    })
}

/// Receding-horizon tracking of fixed times. The horizon shrinks so that it never
/// extends past the end of the simulation.
pub fn closed_loop(
    agents: &[Agent],
    assignment: &TimesVector,
    penalties: &[f64],
    sim_steps: usize,
    noise: NoiseConfig,
    tol: &Tolerances,
) -> Result<Vec<VehicleRun>> {
    let mut source = NoiseSource::new(noise);
    let mut states: Vec<Vector2<f64>> = agents
        .iter()
        .map(|a| Vector2::new(a.params().p0, a.params().v0))
        .collect();
    let mut measured = states.clone();
    let mut controls = vec![Vec::with_capacity(sim_steps); agents.len()];
    let mut first_slacks = vec![(0.0, 0.0); agents.len()];
    let mut max_slack = vec![0.0f64; agents.len()];

    for k in 0..sim_steps {
        let mut step_controls = Vec::with_capacity(agents.len());
        for (i, agent) in agents.iter().enumerate() {
            let base = agent.params();
            let horizon = base.horizon.min(sim_steps - k);
            let params = base.replanned(measured[i][0], measured[i][1], k, horizon)?;
            let shift = k as f64 * base.sampling_time;
            let times = TimePair::new(assignment.0[i].t_in - shift, assignment.0[i].t_out - shift);
            let program = build_tracking_mpc(&params, times, penalties[i])?;
            let result = convex::solve(&program, tol);
            if result.status != SolveStatus::Optimal {
                return Err(Error::Solver(format!(
                    "vehicle {} MPC at sample {k}: {:?}",
                    base.id, result.status
                )));
            }
            let n = params.horizon;
            let slacks = (result.x[n].max(0.0), result.x[n + 1].max(0.0));
            if k == 0 {
                first_slacks[i] = slacks;
            }
            max_slack[i] = max_slack[i].max(slacks.0).max(slacks.1);
            step_controls.push(result.x[0]);
        }
        for (i, agent) in agents.iter().enumerate() {
            let u = step_controls[i].clamp(agent.params().u_lb, agent.params().u_ub);
            let (next, meas) = step_plant(states[i], u, agent.params(), &mut source);
            states[i] = next;
            measured[i] = meas;
            controls[i].push(u);
        }
    }

    agents
        .iter()
        .enumerate()
        .map(|(i, agent)| {
            let p = agent.params();
            let trajectory = StateTrajectory::simulate(p.sampling_time, Vector2::new(p.p0, p.v0), &controls[i]);
            Ok(VehicleRun {
                id: p.id,
                assigned: assignment.0[i],
                realized_in: trajectory.crossing_time(p.p_in).ok(),
                realized_out: trajectory.crossing_time(p.p_out).ok(),
                trajectory,
                penalty: penalties[i],
                first_slacks: first_slacks[i],
                max_slack: max_slack[i],
            })
        })
        .collect()
}

/// One line of the run summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: String,
    pub n_sqp: usize,
    pub n_ls: usize,
    pub mode: FeasibilityMode,
    pub regularizations: usize,
    pub converged: bool,
}

impl SummaryRow {
    pub fn new(scenario: &str, result: &CoordinationResult, mode: FeasibilityMode) -> Self {
        SummaryRow {
            scenario: scenario.to_string(),
            n_sqp: result.n_sqp,
            n_ls: result.n_ls,
            mode,
            regularizations: result.regularizations,
            converged: result.converged(),
        }
    }
}

/// Summary CSV with columns `scenario,n_sqp,n_ls,mode,regularizations,converged`.
pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "n_sqp", "n_ls", "mode", "regularizations", "converged"])?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.n_sqp.to_string(),
            r.n_ls.to_string(),
            r.mode.to_string(),
            r.regularizations.to_string(),
            r.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(p0: f64, v0: f64) -> VehicleParams {
        VehicleParams::new(1, 0.1, 40, (-2.0, 2.0), (1.0, 1.0), 10.0, (p0, v0), (0.0, 8.0)).unwrap()
    }

    #[test]
    fn plant_step_examples() {
        let p = params(0.0, 10.0);
        let mut quiet = NoiseSource::new(NoiseConfig::default());
        let (x, m) = step_plant(Vector2::new(0.0, 10.0), 0.0, &p, &mut quiet);
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 10.0, epsilon = 1e-12);
        assert_eq!(x, m);
        let (clamped, _) = step_plant(Vector2::new(0.0, 10.0), 50.0, &p, &mut quiet);
        let (at_bound, _) = step_plant(Vector2::new(0.0, 10.0), 2.0, &p, &mut quiet);
        assert_eq!(clamped, at_bound);
    }

    #[test]
    fn noise_is_seeded() {
        let cfg = NoiseConfig {
            position_std: 0.5,
            velocity_std: 0.1,
            seed: 9,
        };
        let x = Vector2::new(1.0, 2.0);
        let a: Vec<_> = {
            let mut s = NoiseSource::new(cfg);
            (0..5).map(|_| s.measure(x)).collect()
        };
        let b: Vec<_> = {
            let mut s = NoiseSource::new(cfg);
            (0..5).map(|_| s.measure(x)).collect()
        };
        assert_eq!(a, b);
        assert!(a.iter().any(|m| *m != x));
    }

    #[test]
    fn soft_mpc_absorbs_impossible_times() {
        // At 10 m/s from -20 m the entry cannot happen before roughly 1.8 s.
        let p = params(-20.0, 10.0);
        let early = TimePair::new(0.5, 1.5);
        let program = build_tracking_mpc(&p, early, 1e3).unwrap();
        let r = convex::solve(&program, &AgentConfig::default().tolerances);
        assert_eq!(r.status, SolveStatus::Optimal);
        let n = p.horizon;
        assert!(r.x[n] < 1e-6, "entry slack {}", r.x[n]);
        assert!(r.x[n + 1] > 1.0, "exit slack {}", r.x[n + 1]);

        let hard = crate::agent::build_local_qp(&p, early, crate::agent::Mode::Exact).unwrap();
        let r = convex::solve(&hard, &AgentConfig::default().tolerances);
        assert_ne!(r.status, SolveStatus::Optimal);

        // Braking at the limit still covers 25 m, so the vehicle cannot wait before the entry.
        let late = TimePair::new(3.5, 3.9);
        let program = build_tracking_mpc(&p, late, 1e3).unwrap();
        let r = convex::solve(&program, &AgentConfig::default().tolerances);
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(r.x[n] > 1.0, "entry slack {}", r.x[n]);
    }

    #[test]
    fn past_conditions_are_dropped() {
        let p = params(20.0, 10.0);
        let with = build_tracking_mpc(&p, TimePair::new(-1.0, -0.2), 10.0).unwrap();
        let free = build_tracking_qp(&p);
        assert_eq!(with.num_in(), free.num_in() + 2);
    }

    #[test]
    fn summary_csv_layout() {
        let row = SummaryRow {
            scenario: "s".into(),
            n_sqp: 3,
            n_ls: 4,
            mode: FeasibilityMode::Relaxation,
            regularizations: 0,
            converged: true,
        };
        let mut buf = Vec::new();
        write_summary(&[row], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "scenario,n_sqp,n_ls,mode,regularizations,converged\ns,3,4,relaxation,0,true\n"
        );
    }
}
