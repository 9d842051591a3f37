//! Deterministic time-stepped microsimulation: car-following dynamics,
//! simplified lane assignment, fixed-time signals, controlled vehicles, and
//! measurement extraction on the two observation grids.

pub mod ring;
mod world;

pub use world::{run, GapStats, MeasurementFrame, SimOptions, TrajectorySample, World};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::PathId;

/// Hard deceleration floor applied to every model output, m/s².
pub const MAX_DECEL: f64 = 8.0;

/// Default integration step, seconds.
pub const DEFAULT_DT: f64 = 0.5;

/// Default factor by which desired speeds exceed the posted limit.
pub const DEFAULT_SPEED_FACTOR: f64 = 1.05;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("collision at t={t:.2}s on link {link}: vehicle {rear} reached vehicle {front}")]
    Collision {
        t: f64,
        link: String,
        front: u64,
        rear: u64,
    },
    #[error("agent {agent}: {msg}")]
    BadPlan { agent: u64, msg: String },
    #[error("ring overfilled: {n} vehicles need {needed:.1} m but circumference is {circumference:.1} m")]
    RingOverfilled {
        n: usize,
        needed: f64,
        circumference: f64,
    },
    #[error("{0}")]
    BadOptions(String),
}

/// Nonpositive space gap handed to a car-following model; the caller turns
/// this into a collision fault with context.
#[derive(Debug, Clone, Copy, Error)]
#[error("nonpositive gap")]
pub struct GapFault;

/// Intelligent Driver Model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Maximum acceleration `a`, m/s².
    pub max_accel: f64,
    /// Comfortable deceleration `b`, m/s².
    pub comfort_decel: f64,
    /// Time headway `T`, s.
    pub time_headway: f64,
    /// Jam gap `s_m`, m.
    pub jam_gap: f64,
    /// Desired speed `v_m`, m/s.
    pub desired_speed: f64,
    /// Acceleration exponent, dimensionless.
    pub exponent: f64,
    /// Vehicle length, m.
    pub length: f64,
}

impl IdmParams {
    /// Literature defaults with the desired speed derived from a link speed
    /// limit and the configured speed factor.
    pub fn for_speed_limit(speed_limit: f64, speed_factor: f64) -> Self {
        IdmParams {
            max_accel: 1.3,
            comfort_decel: 2.0,
            time_headway: 1.5,
            jam_gap: 2.0,
            desired_speed: speed_limit * speed_factor,
            exponent: 4.0,
            length: 5.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let all_pos = self.max_accel > 0.0
            && self.comfort_decel > 0.0
            && self.time_headway > 0.0
            && self.jam_gap > 0.0
            && self.desired_speed > 0.0
            && self.length > 0.0;
        if !all_pos || self.exponent < 1.0 {
            return Err(SimError::BadOptions(
                "IDM parameters must be strictly positive with exponent >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Desired dynamic gap `s*(v, Δv)`.
    pub fn desired_gap(&self, v: f64, approach_rate: f64) -> f64 {
        self.jam_gap
            + v * self.time_headway
            + v * approach_rate / (2.0 * (self.max_accel * self.comfort_decel).sqrt())
    }

    /// Equilibrium gap at cruise speed `v` (zero approach rate, zero accel).
    pub fn equilibrium_gap(&self, v: f64) -> f64 {
        self.desired_gap(v, 0.0) / (1.0 - (v / self.desired_speed).powf(self.exponent)).sqrt()
    }
}

/// IDM acceleration. `approach_rate` is own speed minus leader speed; `gap`
/// is bumper-to-bumper. Output is clamped below at `-MAX_DECEL`.
pub fn idm_accel(v: f64, approach_rate: f64, gap: f64, p: &IdmParams) -> Result<f64, GapFault> {
    if gap <= 0.0 {
        return Err(GapFault);
    }
    let s_star = p.desired_gap(v, approach_rate);
    let a = p.max_accel
        * (1.0 - (v / p.desired_speed).powf(p.exponent) - (s_star / gap) * (s_star / gap));
    Ok(a.max(-MAX_DECEL))
}

/// Free-road IDM acceleration (no interaction term).
pub fn idm_free_accel(v: f64, p: &IdmParams) -> f64 {
    (p.max_accel * (1.0 - (v / p.desired_speed).powf(p.exponent))).max(-MAX_DECEL)
}

/// Bando-Follow-The-Leader parameters with the optimal-velocity function
/// `V(gap) = v_max * tanh(gap / ov_scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandoFtlParams {
    /// Relaxation rate toward the optimal velocity, 1/s.
    pub relax: f64,
    /// Follow-the-leader gain, m²/s.
    pub ftl_gain: f64,
    /// Optimal-velocity scale, m/s.
    pub v_max: f64,
    /// Gap scale of the optimal-velocity function, m.
    pub ov_scale: f64,
}

impl BandoFtlParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.relax < 0.0 || self.ftl_gain < 0.0 || self.v_max < 0.0 || self.ov_scale <= 0.0 {
            return Err(SimError::BadOptions(
                "Bando-FTL parameters must be nonnegative with a positive gap scale".into(),
            ));
        }
        Ok(())
    }

    /// Optimal velocity for a bumper-to-bumper gap; nondecreasing, V(0) = 0.
    pub fn optimal_velocity(&self, gap: f64) -> f64 {
        self.v_max * (gap / self.ov_scale).tanh()
    }

    /// Slope of the optimal-velocity function at `gap`.
    pub fn optimal_velocity_slope(&self, gap: f64) -> f64 {
        let c = (gap / self.ov_scale).cosh();
        self.v_max / (self.ov_scale * c * c)
    }
}

/// Bando-FTL acceleration: relaxation toward `V(gap)` plus a follow-the-leader
/// term decaying with the square of the gap.
pub fn bando_ftl_accel(
    v: f64,
    v_leader: f64,
    gap: f64,
    p: &BandoFtlParams,
) -> Result<f64, GapFault> {
    if gap <= 0.0 {
        return Err(GapFault);
    }
    let a = p.relax * (p.optimal_velocity(gap) - v) + p.ftl_gain * (v_leader - v) / (gap * gap);
    Ok(a.max(-MAX_DECEL))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VehicleClass {
    Hdv,
    Av,
}

/// One agent to simulate: class, route, departure instant, and optionally a
/// fixed lane (controlled vehicles) and custom model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPlan {
    pub id: u64,
    pub class: VehicleClass,
    /// Index into the path set handed to [`run`].
    pub path: PathId,
    /// Departure time in simulation seconds (0 = warm-up start).
    pub depart_s: f64,
    /// 1-based lane kept on links that have it; `None` = least-occupied.
    pub fixed_lane: Option<usize>,
    /// Per-agent model override; `None` derives IDM defaults per link.
    pub params: Option<IdmParams>,
}
