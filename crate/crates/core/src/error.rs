use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {t} s is outside the horizon [0, {end}] s")]
    OutOfHorizon { t: f64, end: f64 },

    #[error("position {target} m is not reached by the trajectory (range [{start}, {end}] m)")]
    Unreachable { target: f64, start: f64, end: f64 },

    #[error("trajectory invariant violated: {0}")]
    InvariantViolation(String),

    #[error("no feasible crossing: {0}")]
    NoFeasibleCrossing(String),

    #[error("gradient undefined: evaluation is infeasible")]
    UndefinedGradient,

    #[error("finite-difference stencil leaves the feasible time set at ({t_in}, {t_out})")]
    BoundaryHessian { t_in: f64, t_out: f64 },

    #[error("convex solve failed: {0}")]
    Solver(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("QP subproblem linearization is infeasible at iteration {iteration}: {detail}")]
    LinearizationInfeasible { iteration: usize, detail: String },

    #[error("search direction is not a descent direction (DM = {slope:e}) at iteration {iteration}")]
    NonDescent { iteration: usize, slope: f64 },

    #[error("linesearch failed after {trials} trials at iteration {iteration} (last alpha = {alpha:e}, merit {merit} vs target {target})")]
    LinesearchFailure {
        iteration: usize,
        trials: usize,
        alpha: f64,
        merit: f64,
        target: f64,
    },

    #[error("round {round} failed: agent {agent} unreachable after {attempts} transmissions")]
    RoundFailure {
        round: u64,
        agent: usize,
        attempts: u32,
    },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
