//! Request/reply payloads exchanged between the coordinator and the agents, and the
//! agent-side handler that turns one into the other.

use nalgebra::{Matrix2, Vector2};

use crate::agent::{project_times, Agent, LocalEvaluation, Mode, TimeBounds, TimePair};
use crate::error::{Error, Result};

/// How iterates are kept inside each vehicle's feasible time set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeasibilityMode {
    /// Clamp each out-time into its window before evaluating.
    Projection,
    /// Soften the exit condition with penalized slacks.
    Relaxation,
}

impl FeasibilityMode {
    pub fn name(&self) -> &'static str {
        match self {
            FeasibilityMode::Projection => "projection",
            FeasibilityMode::Relaxation => "relaxation",
        }
    }
}

impl std::fmt::Display for FeasibilityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FeasibilityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(FeasibilityMode::Projection),
            "relaxation" => Ok(FeasibilityMode::Relaxation),
            other => Err(Error::InvalidParameter(format!(
                "unknown mode '{other}' (expected projection or relaxation)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RequestKind {
    /// Entry window, free-flow times and (relaxation) the penalty estimate.
    Setup,
    /// Value, gradient and out-time window at a candidate time pair.
    Trial,
    /// Trial data plus bound slopes and the Hessian block at an accepted iterate.
    Sensitivities,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentRequest {
    pub kind: RequestKind,
    pub times: TimePair,
    pub mode: FeasibilityMode,
    /// Penalty weight for relaxation mode. On setup it overrides the agent's estimate.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetupReply {
    pub t_in_min: f64,
    pub t_in_max: f64,
    pub free_flow: TimePair,
    pub rho: Option<f64>,
}

/// Everything the coordinator needs about one vehicle at one iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleSnapshot {
    /// Times actually evaluated (projected in projection mode).
    pub times: TimePair,
    pub feasible: bool,
    pub value: f64,
    pub gradient: Vector2<f64>,
    pub bounds: TimeBounds,
    pub slack: f64,
    pub slope_min: f64,
    pub slope_max: f64,
    /// `None` when the finite-difference stencil does not fit in the feasible set.
    pub hessian: Option<Matrix2<f64>>,
    pub evaluation: LocalEvaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentReply {
    Setup(SetupReply),
    Snapshot(Box<VehicleSnapshot>),
}

impl AgentReply {
    pub fn into_snapshot(self) -> Result<VehicleSnapshot> {
        match self {
            AgentReply::Snapshot(s) => Ok(*s),
            AgentReply::Setup(_) => Err(Error::Protocol("expected an evaluation reply".into())),
        }
    }

    pub fn into_setup(self) -> Result<SetupReply> {
        match self {
            AgentReply::Setup(s) => Ok(s),
            AgentReply::Snapshot(_) => Err(Error::Protocol("expected a setup reply".into())),
        }
    }
}

/// Agent-side handler. The entry/exit-window LPs are solved before the QP, which is
/// required in projection mode.
pub fn respond(agent: &Agent, request: &AgentRequest) -> Result<AgentReply> {
    let margin = agent.config().window_margin;
    let (raw_min, raw_max) = agent.time_bounds_in();
    let entry = TimeBounds {
        t_in_min: raw_min,
        t_in_max: raw_max,
        t_in: raw_min,
        t_out_min: 0.0,
        t_out_max: 0.0,
    }
    .shrink(margin);
    let (t_in_min, t_in_max) = (entry.t_in_min, entry.t_in_max);
    if request.kind == RequestKind::Setup {
        let (free_flow, _) = agent.free_flow()?;
        let rho = match request.mode {
            FeasibilityMode::Projection => None,
            FeasibilityMode::Relaxation => Some(match request.rho {
                Some(r) => r,
                None => agent.estimate_rho()?,
            }),
        };
        return Ok(AgentReply::Setup(SetupReply {
            t_in_min,
            t_in_max,
            free_flow,
            rho,
        }));
    }

    let end = agent.params().horizon_end();
    let t_in = request.times.t_in.clamp(t_in_min, t_in_max);
    let bounds = agent.time_bounds(t_in)?.shrink(margin);
    let (times, mode) = match request.mode {
        FeasibilityMode::Projection => (project_times(TimePair::new(t_in, request.times.t_out), &bounds), Mode::Exact),
        FeasibilityMode::Relaxation => {
            let rho = request.rho.ok_or_else(|| {
                Error::Protocol("relaxation request without a penalty weight".into())
            })?;
            (
                TimePair::new(t_in, request.times.t_out.clamp(0.0, end)),
                Mode::Relaxed { rho },
            )
        }
    };
    let evaluation = agent.evaluate(times, mode)?;
    let (value, gradient) = match evaluation.feasible {
        true => (evaluation.value.unwrap_or(f64::INFINITY), evaluation.gradient()?),
        false => (f64::INFINITY, Vector2::zeros()),
    };
    let mut snapshot = VehicleSnapshot {
        times,
        feasible: evaluation.feasible,
        value,
        gradient,
        bounds,
        slack: evaluation.slack_sum(),
        slope_min: 0.0,
        slope_max: 0.0,
        hessian: None,
        evaluation,
    };
    if request.kind == RequestKind::Sensitivities {
        let sens = agent.sensitivities(&snapshot.evaluation, &bounds)?;
        snapshot.slope_min = sens.slope_min;
        snapshot.slope_max = sens.slope_max;
        snapshot.hessian = sens.hessian;
    }
    Ok(AgentReply::Snapshot(Box::new(snapshot)))
}

/// Something that can run one synchronous round of agent requests.
pub trait Backend {
    fn num_agents(&self) -> usize;

    /// One request per agent, in agent order; replies come back in the same order.
    fn round(&mut self, requests: &[AgentRequest]) -> Result<Vec<AgentReply>>;
}

/// In-process backend with a perfect channel.
pub struct Direct<'a> {
    agents: &'a [Agent],
}

impl<'a> Direct<'a> {
    pub fn new(agents: &'a [Agent]) -> Self {
        Direct { agents }
    }
}

impl Backend for Direct<'_> {
    fn num_agents(&self) -> usize {
        self.agents.len()
    }

    fn round(&mut self, requests: &[AgentRequest]) -> Result<Vec<AgentReply>> {
        if requests.len() != self.agents.len() {
            return Err(Error::Protocol(format!(
                "{} requests for {} agents",
                requests.len(),
                self.agents.len()
            )));
        }
        self.agents
            .iter()
            .zip(requests)
            .map(|(agent, req)| respond(agent, req))
            .collect()
    }
}
