//! Longitudinal double-integrator model of a vehicle moving along a fixed path.
//!
//! The state is `x = (p, v)` and the control is the acceleration `u`. Controls are
//! held constant over each sampling interval, so the position between samples is
//! the exact quadratic `p_k + v_k τ + u_k τ² / 2`. That interpolant is what
//! turns the entry/exit conditions `p(t) = p_in`, `p(t) = p_out` into rows that
//! are linear in the controls once the time is fixed.

use nalgebra::{DVector, Matrix2, Vector2};

use crate::error::{Error, Result};

/// Velocities down to this value are treated as zero when checking monotonicity.
const VELOCITY_SLACK: f64 = 1e-6;

/// Zero-order-hold discretization of `ṗ = v, v̇ = u`.
pub fn discretize_zoh(sampling_time: f64) -> Result<(Matrix2<f64>, Vector2<f64>)> {
    if !(sampling_time > 0.0) || !sampling_time.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sampling time must be positive, got {sampling_time}"
        )));
    }
    let ts = sampling_time;
    Ok((
        Matrix2::new(1.0, ts, 0.0, 1.0),
        Vector2::new(0.5 * ts * ts, ts),
    ))
}

/// Everything that defines one vehicle's local problem.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleParams {
    pub id: usize,
    pub sampling_time: f64,
    pub horizon: usize,
    pub u_lb: f64,
    pub u_ub: f64,
    /// Weight on squared velocity error (s²/m²).
    pub q: f64,
    /// Weight on squared acceleration (s⁴/m²).
    pub r: f64,
    /// Desired speed per stage, `horizon + 1` entries.
    pub v_desired: Vec<f64>,
    pub p0: f64,
    pub v0: f64,
    pub p_in: f64,
    pub p_out: f64,
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
}

impl VehicleParams {
    /// Builds and validates a parameter set with a constant desired speed.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        sampling_time: f64,
        horizon: usize,
        (u_lb, u_ub): (f64, f64),
        (q, r): (f64, f64),
        v_desired: f64,
        (p0, v0): (f64, f64),
        (p_in, p_out): (f64, f64),
    ) -> Result<Self> {
        Self::with_profile(
            id,
            sampling_time,
            horizon,
            (u_lb, u_ub),
            (q, r),
            vec![v_desired; horizon + 1],
            (p0, v0),
            (p_in, p_out),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_profile(
        id: usize,
        sampling_time: f64,
        horizon: usize,
        (u_lb, u_ub): (f64, f64),
        (q, r): (f64, f64),
        v_desired: Vec<f64>,
        (p0, v0): (f64, f64),
        (p_in, p_out): (f64, f64),
    ) -> Result<Self> {
        let (a, b) = discretize_zoh(sampling_time)?;
        let invalid = |msg: String| Err(Error::InvalidParameter(msg));
        if horizon == 0 {
            return invalid("horizon must be at least one stage".into());
        }
        if !(u_lb < u_ub) {
            return invalid(format!("need u_lb < u_ub, got [{u_lb}, {u_ub}]"));
        }
        if !(p_in < p_out) {
            return invalid(format!("need p_in < p_out, got [{p_in}, {p_out}]"));
        }
        if !(q >= 0.0) || !(r > 0.0) {
            return invalid(format!("need Q >= 0 and R > 0, got Q={q}, R={r}"));
        }
        if v_desired.len() != horizon + 1 {
            return invalid(format!(
                "desired speed profile has {} entries, expected {}",
                v_desired.len(),
                horizon + 1
            ));
        }
        if v0 < 0.0 {
            return invalid(format!("initial velocity must be nonnegative, got {v0}"));
        }
        let all_finite = [sampling_time, u_lb, u_ub, q, r, p0, v0, p_in, p_out]
            .iter()
            .chain(v_desired.iter())
            .all(|x| x.is_finite());
        if !all_finite {
            return invalid("parameters must be finite".into());
        }
        Ok(VehicleParams {
            id,
            sampling_time,
            horizon,
            u_lb,
            u_ub,
            q,
            r,
            v_desired,
            p0,
            v0,
            p_in,
            p_out,
            a,
            b,
        })
    }

    pub fn horizon_end(&self) -> f64 {
        self.horizon as f64 * self.sampling_time
    }

    /// Same vehicle, re-planned from a new state over a (possibly shorter) horizon.
    /// The desired-speed profile is shifted by `elapsed` stages.
    pub fn replanned(&self, p0: f64, v0: f64, elapsed: usize, horizon: usize) -> Result<Self> {
        let profile: Vec<f64> = (0..=horizon)
            .map(|k| {
                let idx = (elapsed + k).min(self.v_desired.len() - 1);
                self.v_desired[idx]
            })
            .collect();
        Self::with_profile(
            self.id,
            self.sampling_time,
            horizon,
            (self.u_lb, self.u_ub),
            (self.q, self.r),
            profile,
            (p0, v0.max(0.0)),
            (self.p_in, self.p_out),
        )
    }

    /// Stage index and offset inside that stage for a time in the horizon.
    /// The horizon end maps to the end of the last stage.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        locate(t, self.sampling_time, self.horizon)
    }

    /// `p(t)` as an affine function of the control sequence.
    pub fn position_row(&self, t: f64) -> Result<AffineRow> {
        let (k, tau) = self.locate(t)?;
        let ts = self.sampling_time;
        let mut coeffs = DVector::zeros(self.horizon);
        for j in 0..k {
            // u_j enters p_k through (k-1-j) full stages of velocity plus its own stage,
            // and keeps contributing T_s per unit through v_k during τ.
            coeffs[j] = 0.5 * ts * ts + (k - 1 - j) as f64 * ts * ts + ts * tau;
        }
        coeffs[k] += 0.5 * tau * tau;
        Ok(AffineRow {
            offset: self.p0 + self.v0 * t,
            coeffs,
        })
    }

    /// `p_N` as an affine function of the controls.
    pub fn terminal_position_row(&self) -> AffineRow {
        let ts = self.sampling_time;
        let n = self.horizon;
        let coeffs = DVector::from_fn(n, |j, _| 0.5 * ts * ts + (n - 1 - j) as f64 * ts * ts);
        AffineRow {
            offset: self.p0 + self.v0 * self.horizon_end(),
            coeffs,
        }
    }

    /// `v_k` for `k = 1..=N`; row `k-1` holds `v_k = v0 + T_s Σ_{j<k} u_j`.
    pub fn velocity_rows(&self) -> Vec<AffineRow> {
        let ts = self.sampling_time;
        (1..=self.horizon)
            .map(|k| {
                let mut coeffs = DVector::zeros(self.horizon);
                coeffs.rows_mut(0, k).fill(ts);
                AffineRow {
                    offset: self.v0,
                    coeffs,
                }
            })
            .collect()
    }

    pub fn trajectory(&self, controls: &[f64]) -> Result<StateTrajectory> {
        if controls.len() != self.horizon {
            return Err(Error::InvalidParameter(format!(
                "expected {} controls, got {}",
                self.horizon,
                controls.len()
            )));
        }
        Ok(StateTrajectory::simulate(
            self.sampling_time,
            Vector2::new(self.p0, self.v0),
            controls,
        ))
    }
}

/// `offset + coeffs · u`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRow {
    pub offset: f64,
    pub coeffs: DVector<f64>,
}

impl AffineRow {
    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        self.offset + self.coeffs.dot(u)
    }
}

fn locate(t: f64, ts: f64, horizon: usize) -> Result<(usize, f64)> {
    let end = horizon as f64 * ts;
    if !(t >= 0.0 && t <= end) {
        return Err(Error::OutOfHorizon { t, end });
    }
    let k = ((t / ts).floor() as usize).min(horizon - 1);
    Ok((k, t - k as f64 * ts))
}

/// States `x_0..x_N` and controls `u_0..u_{N-1}` of one vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub sampling_time: f64,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub controls: Vec<f64>,
}

impl StateTrajectory {
    /// Rolls the discrete dynamics forward from `x0`.
    pub fn simulate(sampling_time: f64, x0: Vector2<f64>, controls: &[f64]) -> Self {
        let ts = sampling_time;
        let mut positions = Vec::with_capacity(controls.len() + 1);
        let mut velocities = Vec::with_capacity(controls.len() + 1);
        let (mut p, mut v) = (x0[0], x0[1]);
        positions.push(p);
        velocities.push(v);
        for &u in controls {
            p += v * ts + 0.5 * u * ts * ts;
            v += u * ts;
            positions.push(p);
            velocities.push(v);
        }
        StateTrajectory {
            sampling_time,
            positions,
            velocities,
            controls: controls.to_vec(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn horizon_end(&self) -> f64 {
        self.horizon() as f64 * self.sampling_time
    }

    /// Largest violation of `x_{k+1} = A x_k + B u_k` over the trajectory.
    pub fn dynamics_defect(&self) -> f64 {
        let ts = self.sampling_time;
        (0..self.horizon())
            .map(|k| {
                let u = self.controls[k];
                let p = self.positions[k] + self.velocities[k] * ts + 0.5 * u * ts * ts;
                let v = self.velocities[k] + u * ts;
                (p - self.positions[k + 1])
                    .abs()
                    .max((v - self.velocities[k + 1]).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn position_at(&self, t: f64) -> Result<f64> {
        let (k, tau) = locate(t, self.sampling_time, self.horizon())?;
        Ok(self.positions[k] + self.velocities[k] * tau + 0.5 * self.controls[k] * tau * tau)
    }

    /// Time derivative of [`position_at`](Self::position_at).
    pub fn velocity_at(&self, t: f64) -> Result<f64> {
        let (k, tau) = locate(t, self.sampling_time, self.horizon())?;
        Ok(self.velocities[k] + self.controls[k] * tau)
    }

    pub fn is_monotone(&self) -> bool {
        self.velocities.iter().all(|&v| v >= -VELOCITY_SLACK)
    }

    /// First time the vehicle reaches `target`.
    pub fn crossing_time(&self, target: f64) -> Result<f64> {
        if !self.is_monotone() {
            let worst = self.velocities.iter().cloned().fold(f64::INFINITY, f64::min);
            return Err(Error::InvariantViolation(format!(
                "velocity {worst} m/s is negative; position is not monotone"
            )));
        }
        let start = self.positions[0];
        let end = *self.positions.last().unwrap();
        // Relative slack for positions produced by an iterative solver.
        let slack = 1e-9 * (1.0 + target.abs());
        if target < start - slack || target > end + slack {
            return Err(Error::Unreachable { target, start, end });
        }
        if target <= start {
            return Ok(0.0);
        }
        let ts = self.sampling_time;
        let n = self.horizon();
        let k = (0..n)
            .find(|&k| self.positions[k + 1] >= target)
            .unwrap_or(n - 1);
        let gap = (target - self.positions[k]).max(0.0);
        let v = self.velocities[k].max(0.0);
        let u = self.controls[k];
        let disc = (v * v + 2.0 * u * gap).max(0.0);
        let denom = v + disc.sqrt();
        let tau = if gap == 0.0 {
            0.0
        } else if denom > 0.0 {
            // Smaller nonnegative root of u τ²/2 + v τ - gap = 0, in cancellation-free form.
            2.0 * gap / denom
        } else {
            ts
        };
        Ok((k as f64 * ts + tau.min(ts)).min(self.horizon_end()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn constant(ts: f64, p0: f64, v0: f64, u: f64, n: usize) -> StateTrajectory {
        StateTrajectory::simulate(ts, Vector2::new(p0, v0), &vec![u; n])
    }

    /// exp(M T) for the augmented continuous system, by truncated power series.
    fn expm_series(ts: f64) -> (Matrix2<f64>, Vector2<f64>) {
        let m = nalgebra::Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0) * ts;
        let mut term = nalgebra::Matrix3::identity();
        let mut sum = nalgebra::Matrix3::identity();
        for i in 1..20 {
            term = term * m / i as f64;
            sum += term;
        }
        (
            sum.fixed_view::<2, 2>(0, 0).into_owned(),
            sum.fixed_view::<2, 1>(0, 2).into_owned(),
        )
    }

    #[test]
    fn zoh_closed_form() {
        let (a, b) = discretize_zoh(0.05).unwrap();
        assert_eq!(a, Matrix2::new(1.0, 0.05, 0.0, 1.0));
        assert_abs_diff_eq!(b[0], 0.00125, epsilon = 1e-15);
        assert_abs_diff_eq!(b[1], 0.05, epsilon = 1e-15);
        let (a, b) = discretize_zoh(1.0).unwrap();
        assert_eq!(a, Matrix2::new(1.0, 1.0, 0.0, 1.0));
        assert_eq!(b, Vector2::new(0.5, 1.0));
        assert!(discretize_zoh(0.0).is_err());
        assert!(discretize_zoh(-0.1).is_err());
    }

    #[test]
    fn zoh_matches_matrix_exponential() {
        for ts in [0.01, 0.05, 0.1, 1.0] {
            let (a, b) = discretize_zoh(ts).unwrap();
            let (ea, eb) = expm_series(ts);
            assert!((a - ea).amax() <= 1e-12);
            assert!((b - eb).amax() <= 1e-12);
        }
    }

    #[test]
    fn position_examples() {
        let traj = StateTrajectory {
            sampling_time: 1.0,
            positions: vec![0.0, 11.0],
            velocities: vec![10.0, 12.0],
            controls: vec![2.0],
        };
        assert_abs_diff_eq!(traj.position_at(0.5).unwrap(), 5.25, epsilon = 1e-12);
        assert_abs_diff_eq!(traj.velocity_at(0.5).unwrap(), 11.0, epsilon = 1e-12);
        assert_eq!(traj.position_at(0.0).unwrap(), 0.0);
        assert_eq!(traj.velocity_at(0.0).unwrap(), 10.0);

        let uniform = constant(0.1, -60.0, 10.0, 0.0, 100);
        assert_abs_diff_eq!(uniform.position_at(3.0).unwrap(), -30.0, epsilon = 1e-9);
        assert!(matches!(
            uniform.position_at(10.5),
            Err(Error::OutOfHorizon { .. })
        ));
        assert!(uniform.position_at(-1e-3).is_err());
    }

    #[test]
    fn velocity_matches_central_difference() {
        let traj = StateTrajectory::simulate(
            0.1,
            Vector2::new(-20.0, 8.0),
            &(0..50).map(|k| ((k as f64) * 0.37).sin()).collect::<Vec<_>>(),
        );
        let h = 1e-6;
        for &t in &[0.05, 0.73, 1.234, 2.5, 4.41] {
            let fd = (traj.position_at(t + h).unwrap() - traj.position_at(t - h).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(traj.velocity_at(t).unwrap(), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn crossing_time_examples() {
        let uniform = constant(0.1, -60.0, 10.0, 0.0, 100);
        assert_abs_diff_eq!(uniform.crossing_time(0.0).unwrap(), 6.0, epsilon = 1e-9);
        assert_eq!(uniform.crossing_time(-60.0).unwrap(), 0.0);

        // Closed form t = -2 + sqrt(24), checked by bisection on position_at.
        let accel = constant(0.1, -10.0, 2.0, 1.0, 100);
        let t = accel.crossing_time(0.0).unwrap();
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if accel.position_at(mid).unwrap() < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert_abs_diff_eq!(t, -2.0 + 24f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(t, lo, epsilon = 1e-9);

        assert!(matches!(
            uniform.crossing_time(100.0),
            Err(Error::Unreachable { .. })
        ));
        let backwards = constant(0.1, 0.0, 1.0, -2.0, 20);
        assert!(matches!(
            backwards.crossing_time(0.1),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn braking_root_selection() {
        // Decelerating stage: the first root inside the stage is the physical crossing.
        let traj = constant(1.0, 0.0, 10.0, -2.0, 3);
        let t = traj.crossing_time(8.0).unwrap();
        // 10 t - t² = 8 -> t = 5 - sqrt(17)
        assert_abs_diff_eq!(t, 5.0 - 17f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn position_row_matches_simulation() {
        let params = VehicleParams::new(1, 0.1, 30, (-2.0, 2.0), (1.0, 1.0), 10.0, (-20.0, 9.0), (0.0, 8.0)).unwrap();
        let u = DVector::from_fn(30, |k, _| ((k as f64) * 0.7).cos() * 1.5);
        let traj = params.trajectory(u.as_slice()).unwrap();
        for &t in &[0.0, 0.05, 0.1, 1.37, 2.99, 3.0] {
            let row = params.position_row(t).unwrap();
            assert_abs_diff_eq!(row.eval(&u), traj.position_at(t).unwrap(), epsilon = 1e-10);
        }
        assert_abs_diff_eq!(
            params.terminal_position_row().eval(&u),
            *traj.positions.last().unwrap(),
            epsilon = 1e-10
        );
        for (k, row) in params.velocity_rows().iter().enumerate() {
            assert_abs_diff_eq!(row.eval(&u), traj.velocities[k + 1], epsilon = 1e-10);
        }
    }

    #[test]
    fn params_validation() {
        let ok = |ts, n, u: (f64, f64), io: (f64, f64)| {
            VehicleParams::new(1, ts, n, u, (1.0, 1.0), 10.0, (-10.0, 5.0), io)
        };
        assert!(ok(0.1, 10, (-1.0, 1.0), (0.0, 8.0)).is_ok());
        assert!(ok(0.0, 10, (-1.0, 1.0), (0.0, 8.0)).is_err());
        assert!(ok(0.1, 0, (-1.0, 1.0), (0.0, 8.0)).is_err());
        assert!(ok(0.1, 10, (1.0, 1.0), (0.0, 8.0)).is_err());
        assert!(ok(0.1, 10, (-1.0, 1.0), (8.0, 8.0)).is_err());
    }

    fn monotone_trajectory() -> impl Strategy<Value = StateTrajectory> {
        (1usize..40, 0.01f64..0.5, -50.0f64..50.0, 0.5f64..20.0, prop::collection::vec(-1.0f64..1.0, 40))
            .prop_map(|(n, ts, p0, v0, raw)| {
                // Cap decelerations so the velocity never drops below zero.
                let mut v = v0;
                let controls: Vec<f64> = raw[..n]
                    .iter()
                    .map(|&r| {
                        let u = (3.0 * r).max(-v / ts);
                        v += u * ts;
                        u
                    })
                    .collect();
                StateTrajectory::simulate(ts, Vector2::new(p0, v0), &controls)
            })
    }

    proptest! {
        #[test]
        fn crossing_inverts_position(traj in monotone_trajectory(), frac in 0.0f64..1.0) {
            let t = frac * traj.horizon_end();
            let p = traj.position_at(t).unwrap();
            // Only meaningful where the vehicle is actually moving.
            prop_assume!(traj.velocity_at(t).unwrap() > 1e-3);
            let back = traj.crossing_time(p).unwrap();
            prop_assert!((back - t).abs() <= 1e-9, "t={t} back={back}");
        }

        #[test]
        fn c1_at_stage_boundaries(traj in monotone_trajectory()) {
            let ts = traj.sampling_time;
            for k in 1..traj.horizon() {
                let t = k as f64 * ts;
                let (km, taum) = (k - 1, ts);
                let left_p = traj.positions[km] + traj.velocities[km] * taum + 0.5 * traj.controls[km] * taum * taum;
                let left_v = traj.velocities[km] + traj.controls[km] * taum;
                prop_assert!((left_p - traj.position_at(t).unwrap()).abs() <= 1e-12 * (1.0 + left_p.abs()));
                prop_assert!((left_v - traj.velocity_at(t).unwrap()).abs() <= 1e-12 * (1.0 + left_v.abs()));
            }
        }
    }
}
