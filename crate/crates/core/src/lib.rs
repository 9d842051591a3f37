//! Freeway-corridor microsimulation and bi-level demand calibration.
//!
//! The crate is organized around the calibration loop it implements:
//!
//! * [`net`] — corridor network, observation grids, paths, and file ingestion.
//! * [`sim`] — deterministic time-stepped microsimulation (IDM, Bando-FTL,
//!   simplified lanes, fixed-time signals, controlled vehicles).
//! * [`flowcal`] — upper level: integer path flows fitted to link counts.
//! * [`speedcal`] — lower level: departure-time profiles fitted to segment
//!   speeds with SPSA.
//! * [`bilevel`] — the outer loop coupling both levels through an LOS-based
//!   feedback on the flow targets, plus the sequential baseline.
//! * [`avplan`] — controlled-fleet deployment analytics and injection.
//! * [`synth`] — synthetic corridors with known ground truth.
//! * [`report`] — histogram/heatmap/trace exports shared by the CLI.

pub mod avplan;
pub mod bilevel;
pub mod exec;
pub mod flowcal;
pub mod net;
pub mod report;
pub mod sim;
pub mod speedcal;
pub mod synth;
pub mod units;
