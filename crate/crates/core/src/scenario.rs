//! Scenario files.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! name = "scenario-1"
//! order = [1, 2, 6, 3, 4, 5]   # vehicle ids, first to cross first
//! speed_unit = "km/h"          # unit of v_desired and v0 ("m/s" or "km/h")
//! sim_steps = 80               # closed-loop samples, at least the horizon
//!
//! [intersection]
//! p_in = 0.0                   # m
//! p_out = 8.0                  # m
//!
//! [defaults]                   # per-vehicle values unless overridden
//! sampling_time = 0.1          # s
//! horizon = 80                 # samples
//! u_lb = -2.0                  # m/s^2
//! u_ub = 2.0                   # m/s^2
//!
//! [[vehicle]]
//! id = 1
//! q = 1.0
//! r = 1.0
//! v_desired = 80.0
//! p0 = -55.0                   # m
//! v0 = 80.0
//! ```
//!
//! Optional sections `[sqp]`, `[channel]` and `[noise]` override the defaults of
//! [`SqpConfig`], [`ChannelConfig`] and [`NoiseConfig`]. `soft_penalty` sets the
//! exact-penalty weight of the closed-loop MPC; without it each vehicle estimates one.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleParams;
use crate::error::{Error, Result};
use crate::runtime::ChannelConfig;
use crate::sqp::SqpConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SpeedUnit {
    #[default]
    #[serde(rename = "m/s")]
    MetersPerSecond,
    #[serde(rename = "km/h")]
    KilometersPerHour,
}

impl SpeedUnit {
    pub fn to_mps(&self, v: f64) -> f64 {
        match self {
            SpeedUnit::MetersPerSecond => v,
            SpeedUnit::KilometersPerHour => v / 3.6,
        }
    }
}

/// White measurement noise added to the closed-loop state estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// m
    pub position_std: f64,
    /// m/s
    pub velocity_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intersection {
    pub p_in: f64,
    pub p_out: f64,
}

impl Default for Intersection {
    fn default() -> Self {
        Intersection { p_in: 0.0, p_out: 8.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleDefaults {
    pub sampling_time: f64,
    pub horizon: usize,
    pub u_lb: f64,
    pub u_ub: f64,
}

impl Default for VehicleDefaults {
    fn default() -> Self {
        VehicleDefaults {
            sampling_time: 0.1,
            horizon: 80,
            u_lb: -2.0,
            u_ub: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleEntry {
    pub id: usize,
    pub q: f64,
    pub r: f64,
    pub v_desired: f64,
    pub p0: f64,
    pub v0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_lb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_ub: Option<f64>,
}

/// On-disk form of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub order: Vec<usize>,
    #[serde(default)]
    pub speed_unit: SpeedUnit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_penalty: Option<f64>,
    #[serde(default)]
    pub intersection: Intersection,
    #[serde(default)]
    pub defaults: VehicleDefaults,
    pub vehicle: Vec<VehicleEntry>,
    #[serde(default)]
    pub sqp: SqpConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
}

/// A validated scenario with vehicle parameters in SI units.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    /// Indexed like `order`'s ids, in file order.
    pub vehicles: Vec<VehicleParams>,
    /// Vehicle ids in crossing order.
    pub order: Vec<usize>,
    pub intersection: Intersection,
    pub sqp: SqpConfig,
    pub channel: ChannelConfig,
    pub noise: NoiseConfig,
    pub sim_steps: usize,
    pub soft_penalty: Option<f64>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        Self::from_file_data(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Scenario(m) => Error::Scenario(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_file_data(file: ScenarioFile) -> Result<Self> {
        let bad = |m: String| Error::Scenario(m);
        if file.vehicle.is_empty() {
            return Err(bad("scenario has no vehicles".into()));
        }
        let ids: HashSet<usize> = file.vehicle.iter().map(|v| v.id).collect();
        if ids.len() != file.vehicle.len() {
            return Err(bad("vehicle ids are not unique".into()));
        }
        let ordered: HashSet<usize> = file.order.iter().copied().collect();
        if ordered.len() != file.order.len() || ordered != ids {
            return Err(bad(format!(
                "order {:?} is not a permutation of the vehicle ids",
                file.order
            )));
        }
        let Intersection { p_in, p_out } = file.intersection;
        if !(p_in.is_finite() && p_out.is_finite() && p_in < p_out) {
            return Err(bad(format!("intersection [{p_in}, {p_out}] is empty")));
        }
        let d = file.defaults;
        let vehicles = file
            .vehicle
            .iter()
            .map(|v| {
                let unit = file.speed_unit;
                VehicleParams::new(
                    v.id,
                    v.sampling_time.unwrap_or(d.sampling_time),
                    v.horizon.unwrap_or(d.horizon),
                    (v.u_lb.unwrap_or(d.u_lb), v.u_ub.unwrap_or(d.u_ub)),
                    (v.q, v.r),
                    unit.to_mps(v.v_desired),
                    (v.p0, unit.to_mps(v.v0)),
                    (p_in, p_out),
                )
                .map_err(|e| bad(format!("vehicle {}: {e}", v.id)))
            })
            .collect::<Result<Vec<_>>>()?;

        let longest = vehicles.iter().map(|v| v.horizon).max().unwrap_or(0);
        let sim_steps = file.sim_steps.unwrap_or(longest);
        if sim_steps < longest {
            return Err(bad(format!(
                "sim_steps = {sim_steps} is shorter than the horizon {longest}"
            )));
        }
        if file.soft_penalty.is_some_and(|w| !(w > 0.0)) {
            return Err(bad("soft_penalty must be positive".into()));
        }
        let n = file.noise;
        if !(n.position_std >= 0.0 && n.velocity_std >= 0.0) {
            return Err(bad("noise standard deviations must be nonnegative".into()));
        }
        file.sqp.validate().map_err(|e| bad(format!("[sqp] {e}")))?;
        file.channel.validate().map_err(|e| bad(format!("[channel] {e}")))?;

        Ok(ScenarioConfig {
            name: file.name,
            vehicles,
            order: file.order,
            intersection: file.intersection,
            sqp: file.sqp,
            channel: file.channel,
            noise: file.noise,
            sim_steps,
            soft_penalty: file.soft_penalty,
        })
    }

    pub fn num_vehicles(&self) -> usize {
        self.vehicles.len()
    }

    pub fn vehicle(&self, id: usize) -> Option<&VehicleParams> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    /// Vehicle parameters listed in crossing order.
    pub fn vehicles_in_order(&self) -> Vec<VehicleParams> {
        self.order
            .iter()
            .map(|id| self.vehicle(*id).expect("order validated against ids").clone())
            .collect()
    }

    /// One of the seven bundled scenarios (1-based).
    pub fn builtin(index: usize) -> Result<Self> {
        let text = BUILTIN
            .get(index.wrapping_sub(1))
            .ok_or_else(|| Error::Scenario(format!("no built-in scenario {index} (1..=7)")))?;
        Self::from_toml_str(text)
    }

    pub fn builtins() -> Vec<Self> {
        (1..=BUILTIN.len())
            .map(|k| Self::builtin(k).expect("bundled scenarios are valid"))
            .collect()
    }
}

/// Text of the bundled scenario files.
pub const BUILTIN: [&str; 7] = [
    include_str!("../scenarios/scenario1.toml"),
    include_str!("../scenarios/scenario2.toml"),
    include_str!("../scenarios/scenario3.toml"),
    include_str!("../scenarios/scenario4.toml"),
    include_str!("../scenarios/scenario5.toml"),
    include_str!("../scenarios/scenario6.toml"),
    include_str!("../scenarios/scenario7.toml"),
];
