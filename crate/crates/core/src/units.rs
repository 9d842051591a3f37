//! Unit conversions. Everything internal is SI (m, s, m/s); miles per hour
//! appear only at file boundaries and in speed-error reporting.

/// Meters per second in one mile per hour.
pub const MPS_PER_MPH: f64 = 0.44704;

/// Meters in one mile.
pub const METERS_PER_MILE: f64 = 1609.344;

/// Nominal INRIX-style segment length: half a mile.
pub const HALF_MILE_M: f64 = METERS_PER_MILE / 2.0;

pub fn mph_to_mps(mph: f64) -> f64 {
    mph * MPS_PER_MPH
}

pub fn mps_to_mph(mps: f64) -> f64 {
    mps / MPS_PER_MPH
}
