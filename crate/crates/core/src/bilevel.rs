//! Outer calibration loop: flow calibration, SPSA speed calibration, the
//! quality gate, and the LOS-based feedback that retargets link flows when
//! simulated speeds disagree with the data. Also the sequential
//! (feedback-free) baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowcal::{
    calibrate_flow, FlowCalError, FlowCalOptions, FlowObjectiveReport, PathFlowSolution,
};
use crate::net::{
    enumerate_all_paths, Grid, LinkIdx, LinkKind, NetError, ObservationSet, Path, RoadNetwork,
    TimeGrids,
};
use crate::sim::{AgentPlan, MeasurementFrame, SimError, SimOptions};
use crate::speedcal::{
    spsa_calibrate, InflowProfile, SpeedCalError, SpeedObjectiveReport, SpsaOptions, TraceRecord,
};
use crate::units::MPS_PER_MPH;

#[derive(Debug, Error)]
pub enum BilevelError {
    #[error("outer iteration {m}: {source}")]
    Flow {
        m: usize,
        #[source]
        source: FlowCalError,
    },
    #[error("outer iteration {m}: {source}")]
    Speed {
        m: usize,
        #[source]
        source: SpeedCalError,
    },
    #[error("link {link}: no LOS rows for its road kind")]
    LosKindMissing { link: String },
    #[error("no speed discrepancy on any segment-mapped link")]
    NoDiscrepancy,
    #[error("RMSN undefined: no overlapping cells or zero target sum")]
    RmsnUndefined,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LosGrade {
    A,
    B,
    C,
    D,
    E,
    F,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LosRow {
    pub kind: LinkKind,
    pub grade: LosGrade,
    /// Minimum speed sustaining this grade, m/s.
    pub min_speed: f64,
    /// Service flow at this grade, vehicles per hour per lane.
    pub max_flow_vph_per_lane: f64,
}

/// Level-of-service lookup: road kind + grade → (min speed, service flow).
/// Grades are ordered A–F with nonincreasing min speed and nondecreasing
/// service flow within a kind.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LosTable {
    rows: Vec<LosRow>,
}

impl LosTable {
    pub fn new(mut rows: Vec<LosRow>) -> Result<Self, String> {
        rows.sort_by_key(|r| (kind_rank(r.kind), r.grade as u8));
        for pair in rows.windows(2) {
            if pair[0].kind != pair[1].kind {
                continue;
            }
            if pair[1].min_speed > pair[0].min_speed + 1e-9 {
                return Err(format!(
                    "LOS min speeds must not increase from grade {:?} to {:?}",
                    pair[0].grade, pair[1].grade
                ));
            }
            if pair[1].max_flow_vph_per_lane < pair[0].max_flow_vph_per_lane - 1e-9 {
                return Err(format!(
                    "LOS service flows must not decrease from grade {:?} to {:?}",
                    pair[0].grade, pair[1].grade
                ));
            }
        }
        Ok(LosTable { rows })
    }

    pub fn rows(&self) -> &[LosRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Service flow for the grade a given speed falls into: the first grade
    /// (A downward) whose minimum speed the target speed still meets.
    pub fn flow_for_speed(&self, kind: LinkKind, speed: f64) -> Option<f64> {
        let mut fallback = None;
        for row in self.rows.iter().filter(|r| r.kind == kind) {
            fallback = Some(row.max_flow_vph_per_lane);
            if speed >= row.min_speed {
                return Some(row.max_flow_vph_per_lane);
            }
        }
        // Below every grade's floor: worst grade of the kind.
        fallback
    }

    /// Desk-scale freeway defaults, loosely HCM-shaped.
    pub fn standard_freeway() -> Self {
        let mph = |v: f64| v * MPS_PER_MPH;
        LosTable::new(vec![
            LosRow { kind: LinkKind::Freeway, grade: LosGrade::A, min_speed: mph(60.0), max_flow_vph_per_lane: 700.0 },
            LosRow { kind: LinkKind::Freeway, grade: LosGrade::B, min_speed: mph(57.0), max_flow_vph_per_lane: 1100.0 },
            LosRow { kind: LinkKind::Freeway, grade: LosGrade::C, min_speed: mph(54.0), max_flow_vph_per_lane: 1550.0 },
            LosRow { kind: LinkKind::Freeway, grade: LosGrade::D, min_speed: mph(46.0), max_flow_vph_per_lane: 1950.0 },
            LosRow { kind: LinkKind::Freeway, grade: LosGrade::E, min_speed: mph(30.0), max_flow_vph_per_lane: 2300.0 },
            LosRow { kind: LinkKind::Freeway, grade: LosGrade::F, min_speed: 0.0, max_flow_vph_per_lane: 2300.0 },
        ])
        .expect("static table is ordered")
    }
}

fn kind_rank(kind: LinkKind) -> u8 {
    match kind {
        LinkKind::Freeway => 0,
        LinkKind::Ramp => 1,
        LinkKind::Arterial => 2,
    }
}

/// One concrete target-flow change applied by the feedback function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetChange {
    pub link: String,
    pub interval_k: usize,
    pub old: f64,
    pub new: f64,
    /// Signed simulated-minus-target speed deviation driving the change, mph.
    pub speed_dev_mph: f64,
}

/// Feedback bookkeeping across outer iterations.
#[derive(Debug, Clone)]
pub struct FeedbackState {
    /// Outer iteration m.
    pub iteration: usize,
    /// Consecutive-modification count per link.
    pub counters: Vec<u32>,
    /// Adaptive step size per link, vehicles per coarse interval.
    pub step_sizes: Vec<f64>,
    /// Sign of the aggregate speed deviation at each link's last change.
    pub last_dev_sign: Vec<f64>,
    pub last_modified: Option<LinkIdx>,
    /// Max relative target change applied by the latest feedback call.
    pub last_mutation_rel: f64,
}

impl FeedbackState {
    pub fn new(n_links: usize) -> Self {
        FeedbackState {
            iteration: 0,
            counters: vec![0; n_links],
            step_sizes: vec![0.0; n_links],
            last_dev_sign: vec![0.0; n_links],
            last_modified: None,
            last_mutation_rel: 0.0,
        }
    }
}

/// Maximum consecutive modifications of one edge before the feedback must
/// switch to the next-ranked edge.
pub const MAX_CONSECUTIVE_MODIFICATIONS: u32 = 5;

/// Aggregate the speed report's per-cell deviations up to links:
/// length-weighted over segments, returned per coarse interval and as a
/// per-link scalar used for ranking (mean |deviation| in mph).
fn link_speed_errors(
    report: &SpeedObjectiveReport,
    net: &RoadNetwork,
    grids: &TimeGrids,
    targets_speed: &Grid,
) -> Vec<LinkSpeedError> {
    let n_coarse = grids.n_coarse();
    let mut acc: Vec<LinkSpeedError> = (0..net.links.len())
        .map(|_| LinkSpeedError {
            abs_weight: 0.0,
            abs_sum: 0.0,
            per_k_dev: vec![(0.0, 0.0); n_coarse],
            per_k_target_speed: vec![(0.0, 0.0); n_coarse],
        })
        .collect();
    for &(seg, r, dev) in &report.deviations {
        let segment = &net.segments[seg];
        let w = segment.length();
        let k = grids.coarse_of_fine(r);
        let e = &mut acc[segment.link];
        e.abs_weight += w;
        e.abs_sum += w * dev.abs();
        e.per_k_dev[k].0 += w;
        e.per_k_dev[k].1 += w * dev;
        if let Some(t) = targets_speed.get(seg, r) {
            e.per_k_target_speed[k].0 += w;
            e.per_k_target_speed[k].1 += w * t;
        }
    }
    acc
}

struct LinkSpeedError {
    abs_weight: f64,
    abs_sum: f64,
    /// (weight, weighted signed dev mph) per coarse interval.
    per_k_dev: Vec<(f64, f64)>,
    /// (weight, weighted target speed m/s) per coarse interval.
    per_k_target_speed: Vec<(f64, f64)>,
}

impl LinkSpeedError {
    fn ranking_error(&self) -> f64 {
        if self.abs_weight > 0.0 {
            self.abs_sum / self.abs_weight
        } else {
            0.0
        }
    }
}

/// Step 7: mutate the flow targets of the worst-speed-error edge using the
/// LOS table on first selection and an adaptive gradient step afterwards.
/// Returns the new targets and the list of changes applied.
pub fn feedback_adjust(
    state: &mut FeedbackState,
    targets: &Grid,
    speed_report: &SpeedObjectiveReport,
    speed_targets: &Grid,
    los: &LosTable,
    net: &RoadNetwork,
    grids: &TimeGrids,
) -> Result<(Grid, Vec<TargetChange>), BilevelError> {
    let errors = link_speed_errors(speed_report, net, grids, speed_targets);
    let mut ranked: Vec<LinkIdx> = (0..net.links.len())
        .filter(|&i| errors[i].ranking_error() > 1e-9)
        .collect();
    ranked.sort_by(|&a, &b| {
        errors[b]
            .ranking_error()
            .total_cmp(&errors[a].ranking_error())
            .then(a.cmp(&b))
    });
    let Some(&top) = ranked.first() else {
        return Err(BilevelError::NoDiscrepancy);
    };

    // Stagnation rule: after five consecutive modifications the next-ranked
    // edge takes over and the saturated counter resets.
    let mut chosen = top;
    if state.counters[top] >= MAX_CONSECUTIVE_MODIFICATIONS {
        state.counters[top] = 0;
        if let Some(&second) = ranked.get(1) {
            chosen = second;
        }
    }

    let link = &net.links[chosen];
    if los.flow_for_speed(link.kind, 1.0).is_none() {
        return Err(BilevelError::LosKindMissing {
            link: link.id.clone(),
        });
    }

    let freshly_selected = state.last_modified != Some(chosen);
    let err = &errors[chosen];
    let total_dev = {
        let w: f64 = err.per_k_dev.iter().map(|(w, _)| w).sum();
        let s: f64 = err.per_k_dev.iter().map(|(_, d)| d).sum();
        if w > 0.0 {
            s / w
        } else {
            0.0
        }
    };

    // Adaptive step size: halve on a sign flip of the aggregate deviation,
    // grow 1.2x otherwise.
    if state.step_sizes[chosen] > 0.0 {
        if total_dev * state.last_dev_sign[chosen] < 0.0 {
            state.step_sizes[chosen] *= 0.5;
        } else {
            state.step_sizes[chosen] *= 1.2;
        }
    }
    state.last_dev_sign[chosen] = total_dev.signum();

    let mut new_targets = targets.clone();
    let mut changes = Vec::new();
    let mut max_rel: f64 = 0.0;

    for k in 0..grids.n_coarse() {
        let (w, s) = err.per_k_dev[k];
        if w <= 0.0 {
            continue;
        }
        let dev = s / w;
        if dev.abs() < 1e-9 {
            continue;
        }
        let old = targets.get(chosen, k).unwrap_or(0.0);
        let direction = dev.signum();

        if state.step_sizes[chosen] == 0.0 {
            state.step_sizes[chosen] = (0.05 * old).max(10.0);
        }

        let new = if freshly_selected {
            // First selection: jump to the LOS service flow for the target
            // speed, clamped to the side the speed deviation demands.
            let (tw, ts) = err.per_k_target_speed[k];
            let target_speed = if tw > 0.0 { ts / tw } else { link.speed_limit };
            let los_flow = los
                .flow_for_speed(link.kind, target_speed)
                .expect("kind checked above")
                * link.lanes as f64
                * grids.coarse_s as f64
                / 3600.0;
            let clamped = if direction > 0.0 {
                los_flow.max(old)
            } else {
                los_flow.min(old)
            };
            if (clamped - old).abs() < 1e-9 {
                // LOS value sits on the wrong side; fall back to a gradient
                // step so the change direction follows the deviation sign.
                (old + direction * state.step_sizes[chosen]).max(0.0)
            } else {
                clamped
            }
        } else {
            (old + direction * state.step_sizes[chosen]).max(0.0)
        };

        if (new - old).abs() < 1e-9 {
            continue;
        }
        new_targets.set(chosen, k, new);
        max_rel = max_rel.max((new - old).abs() / old.max(1.0));
        changes.push(TargetChange {
            link: link.id.clone(),
            interval_k: k,
            old,
            new,
            speed_dev_mph: dev,
        });
    }

    if changes.is_empty() {
        return Err(BilevelError::NoDiscrepancy);
    }

    if state.last_modified == Some(chosen) {
        state.counters[chosen] += 1;
    } else {
        for c in state.counters.iter_mut() {
            *c = 0;
        }
        state.counters[chosen] = 1;
    }
    state.last_modified = Some(chosen);
    state.last_mutation_rel = max_rel;
    Ok((new_targets, changes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateVerdict {
    Converged,
    Feedback,
    Continue,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GateLimits {
    /// Per-link relative flow error above which feedback triggers.
    pub max_rel_flow_error: f64,
    /// Speed MSE (mph²) considered acceptable.
    pub speed_mse_threshold: f64,
    /// Max relative target change still considered a minor mutation.
    pub minor_target_change: f64,
    /// Hard stop for the outer loop.
    pub max_outer_iters: usize,
}

impl Default for GateLimits {
    fn default() -> Self {
        GateLimits {
            max_rel_flow_error: 0.10,
            speed_mse_threshold: 50.0,
            minor_target_change: 0.05,
            max_outer_iters: 10,
        }
    }
}

/// Step 6: converged only when flows fit within 10%, the speed MSE is
/// acceptable, and the last target mutation was minor; feedback when any
/// link exceeds the flow-error limit; continue otherwise.
pub fn quality_gate(
    flow: &FlowObjectiveReport,
    speed: &SpeedObjectiveReport,
    last_mutation_rel: f64,
    limits: &GateLimits,
) -> GateVerdict {
    let flow_ok = flow.max_rel_error() <= limits.max_rel_flow_error;
    let speed_ok = speed.objective <= limits.speed_mse_threshold;
    let minor = last_mutation_rel <= limits.minor_target_change;
    if flow_ok && speed_ok && minor {
        GateVerdict::Converged
    } else if !flow_ok {
        GateVerdict::Feedback
    } else {
        GateVerdict::Continue
    }
}

/// Normalized root-mean-square error between two speed tensors over their
/// overlapping cells: sqrt(N * Σd²) / Σ target.
pub fn rmsn(sim: &Grid, targets: &Grid) -> Result<f64, BilevelError> {
    let mut n = 0u64;
    let mut sum_sq = 0.0;
    let mut sum_target = 0.0;
    for (row, col, target) in targets.cells() {
        if let Some(s) = sim.get(row, col) {
            n += 1;
            let d = s - target;
            sum_sq += d * d;
            sum_target += target;
        }
    }
    if n == 0 || sum_target <= 0.0 {
        return Err(BilevelError::RmsnUndefined);
    }
    Ok((n as f64 * sum_sq).sqrt() / sum_target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunVerdict {
    Converged,
    IterationLimit,
}

/// One outer iteration's audit line (JSON-lines record). `changes` carries
/// the per-interval feedback detail for conformance checks and is not part
/// of the serialized schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub m: usize,
    pub flow_mse: f64,
    pub speed_mse: f64,
    pub rmsn: f64,
    pub modified_edge: Option<String>,
    pub target_delta: f64,
    pub verdict: String,
    pub spsa_seed: u64,
    #[serde(skip)]
    pub changes: Vec<TargetChange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    Sequential,
    Bilevel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BilevelOptions {
    pub mode: CalibrationMode,
    pub max_paths: usize,
    pub flow: FlowCalOptions,
    pub spsa: SpsaOptions,
    pub gate: GateLimits,
    pub sim: SimOptions,
    pub seed: u64,
}

impl Default for BilevelOptions {
    fn default() -> Self {
        BilevelOptions {
            mode: CalibrationMode::Bilevel,
            max_paths: 3,
            flow: FlowCalOptions::default(),
            spsa: SpsaOptions::default(),
            gate: GateLimits::default(),
            sim: SimOptions::default(),
            seed: 0,
        }
    }
}

/// Everything the calibration produced: final demand, the frame it
/// generates, fit metrics, and the audit trail.
#[derive(Debug, Clone)]
pub struct CalibratedScenario {
    pub paths: Vec<Path>,
    pub pi: PathFlowSolution,
    pub profile: InflowProfile,
    pub plans: Vec<AgentPlan>,
    pub frame: MeasurementFrame,
    pub flow_report: FlowObjectiveReport,
    pub speed_report: SpeedObjectiveReport,
    pub rmsn: f64,
    pub verdict: RunVerdict,
    pub reason: String,
    pub audit: Vec<AuditRecord>,
    pub spsa_traces: Vec<Vec<TraceRecord>>,
    /// Seed that regenerates `plans` from `(pi, profile)`.
    pub seed: u64,
}

fn derived_seed(base: u64, m: usize) -> u64 {
    base.wrapping_add(1).wrapping_add(m as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Run the full calibration loop (or the sequential baseline) against an
/// observation set.
pub fn run_bilevel(
    network: &RoadNetwork,
    observations: &ObservationSet,
    grids: &TimeGrids,
    opts: &BilevelOptions,
) -> Result<CalibratedScenario, BilevelError> {
    let paths = enumerate_all_paths(network, opts.max_paths)?;
    let n_bins = grids.n_fine();
    let mut targets = observations.flow_targets.clone();
    let mut state = FeedbackState::new(network.links.len());
    let mut warm_profile: Option<InflowProfile> = None;
    let mut audit: Vec<AuditRecord> = Vec::new();
    let mut traces = Vec::new();

    let mut m = 0usize;
    loop {
        // Step 1: upper level on the current targets.
        let (mut pi, flow_report) =
            calibrate_flow(&targets, &paths, network, grids, &opts.flow)
                .map_err(|source| BilevelError::Flow { m, source })?;
        pi.iteration = m;

        // Steps 2–5: lower level; the SPSA iteration counter restarts every
        // outer pass, warm-starting from the previous incumbent profile.
        let init = warm_profile
            .clone()
            .unwrap_or_else(|| InflowProfile::uniform(paths.len(), n_bins));
        let spsa_seed = derived_seed(opts.seed, m);
        let spsa_opts = SpsaOptions {
            seed: spsa_seed,
            ..opts.spsa
        };
        let outcome = spsa_calibrate(
            &pi,
            &init,
            network,
            &paths,
            &observations.speed_targets,
            grids,
            opts.sim,
            &spsa_opts,
        )
        .map_err(|source| BilevelError::Speed { m, source })?;
        let rmsn_value = rmsn(&outcome.frame.segment_speeds, &observations.speed_targets)?;

        // Step 6.
        let gate = quality_gate(
            &flow_report,
            &outcome.report,
            state.last_mutation_rel,
            &opts.gate,
        );
        let at_limit = m >= opts.gate.max_outer_iters;
        let sequential = opts.mode == CalibrationMode::Sequential;

        let mut record = AuditRecord {
            m,
            flow_mse: flow_report.objective,
            speed_mse: outcome.report.objective,
            rmsn: rmsn_value,
            modified_edge: None,
            target_delta: 0.0,
            verdict: String::new(),
            spsa_seed,
            changes: Vec::new(),
        };

        let exit: Option<(RunVerdict, String)> = if gate == GateVerdict::Converged {
            Some((RunVerdict::Converged, "quality gate satisfied".into()))
        } else if sequential {
            Some((
                RunVerdict::IterationLimit,
                "sequential mode: single pass, no feedback".into(),
            ))
        } else if at_limit {
            Some((
                RunVerdict::IterationLimit,
                format!("outer iteration limit {} reached", opts.gate.max_outer_iters),
            ))
        } else {
            None
        };

        if let Some((verdict, reason)) = exit {
            record.verdict = match verdict {
                RunVerdict::Converged => "converged".into(),
                RunVerdict::IterationLimit => "iteration-limit".into(),
            };
            audit.push(record);
            traces.push(outcome.trace);
            return Ok(CalibratedScenario {
                paths,
                pi,
                profile: outcome.profile,
                plans: outcome.plans,
                frame: outcome.frame,
                flow_report,
                speed_report: outcome.report,
                rmsn: rmsn_value,
                verdict,
                reason,
                audit,
                spsa_traces: traces,
                seed: spsa_seed,
            });
        }

        // Step 7 on a feedback verdict; `continue` reruns the levels with
        // unchanged targets but fresh SPSA perturbations.
        match gate {
            GateVerdict::Feedback => {
                match feedback_adjust(
                    &mut state,
                    &targets,
                    &outcome.report,
                    &observations.speed_targets,
                    &observations.los,
                    network,
                    grids,
                ) {
                    Ok((new_targets, changes)) => {
                        record.modified_edge =
                            changes.first().map(|c| c.link.clone());
                        record.target_delta =
                            changes.iter().map(|c| c.new - c.old).sum();
                        record.changes = changes;
                        record.verdict = "feedback".into();
                        targets = new_targets;
                    }
                    Err(BilevelError::NoDiscrepancy) => {
                        // Flows misfit but speeds agree everywhere: nothing
                        // for the feedback to retarget.
                        record.verdict = "continue".into();
                        state.last_mutation_rel = 0.0;
                    }
                    Err(e) => return Err(e),
                }
            }
            GateVerdict::Continue => {
                record.verdict = "continue".into();
                state.last_mutation_rel = 0.0;
            }
            GateVerdict::Converged => unreachable!(),
        }

        audit.push(record);
        traces.push(outcome.trace);
        warm_profile = Some(outcome.profile);
        state.iteration += 1;
        m += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::Histogram;

    fn empty_speed_report(objective: f64) -> SpeedObjectiveReport {
        SpeedObjectiveReport {
            objective,
            deviations: vec![],
            histogram: Histogram::from_values(&[], 4),
            p70: 0.0,
            p90: 0.0,
            n_cells: 0,
        }
    }

    fn flow_report_with_rel(rel: f64) -> FlowObjectiveReport {
        FlowObjectiveReport {
            objective: 0.0,
            relaxation_objective: 0.0,
            per_link_sq_error: vec![0.0],
            per_link_rel_error: vec![rel],
            n_links: 1,
        }
    }

    #[test]
    fn rmsn_examples() {
        let mut a = Grid::new(1, 1);
        let mut b = Grid::new(1, 1);
        a.set(0, 0, 50.0);
        b.set(0, 0, 40.0);
        // sqrt(1 * 100) / 40
        assert!((rmsn(&a, &b).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(rmsn(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn rmsn_permutation_invariant() {
        let mut sim = Grid::new(2, 2);
        let mut tgt = Grid::new(2, 2);
        let cells = [(0, 0, 50.0, 45.0), (0, 1, 60.0, 62.0), (1, 0, 30.0, 20.0)];
        for &(i, j, s, t) in &cells {
            sim.set(i, j, s);
            tgt.set(i, j, t);
        }
        let r1 = rmsn(&sim, &tgt).unwrap();
        // Permute cell placement.
        let mut sim2 = Grid::new(2, 2);
        let mut tgt2 = Grid::new(2, 2);
        for &(i, j, s, t) in &[(1, 1, 50.0, 45.0), (0, 0, 60.0, 62.0), (0, 1, 30.0, 20.0)] {
            sim2.set(i, j, s);
            tgt2.set(i, j, t);
        }
        let r2 = rmsn(&sim2, &tgt2).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn rmsn_needs_overlap_and_mass() {
        let a = Grid::new(1, 1);
        let b = Grid::new(1, 1);
        assert!(matches!(rmsn(&a, &b), Err(BilevelError::RmsnUndefined)));
    }

    #[test]
    fn gate_zero_errors_converges() {
        let verdict = quality_gate(
            &flow_report_with_rel(0.0),
            &empty_speed_report(0.0),
            0.0,
            &GateLimits::default(),
        );
        assert_eq!(verdict, GateVerdict::Converged);
    }

    #[test]
    fn gate_twelve_percent_link_triggers_feedback() {
        let verdict = quality_gate(
            &flow_report_with_rel(0.12),
            &empty_speed_report(0.0),
            0.0,
            &GateLimits::default(),
        );
        assert_eq!(verdict, GateVerdict::Feedback);
    }

    #[test]
    fn gate_speed_miss_continues() {
        let verdict = quality_gate(
            &flow_report_with_rel(0.05),
            &empty_speed_report(1e6),
            0.0,
            &GateLimits::default(),
        );
        assert_eq!(verdict, GateVerdict::Continue);
    }

    #[test]
    fn los_lookup_picks_grade_by_speed() {
        let table = LosTable::standard_freeway();
        let mph = |v: f64| v * MPS_PER_MPH;
        assert_eq!(
            table.flow_for_speed(LinkKind::Freeway, mph(65.0)),
            Some(700.0)
        );
        assert_eq!(
            table.flow_for_speed(LinkKind::Freeway, mph(50.0)),
            Some(1950.0)
        );
        assert_eq!(
            table.flow_for_speed(LinkKind::Freeway, mph(10.0)),
            Some(2300.0)
        );
        assert_eq!(table.flow_for_speed(LinkKind::Ramp, 10.0), None);
    }

    #[test]
    fn los_table_rejects_misordering() {
        let rows = vec![
            LosRow {
                kind: LinkKind::Freeway,
                grade: LosGrade::A,
                min_speed: 20.0,
                max_flow_vph_per_lane: 1000.0,
            },
            LosRow {
                kind: LinkKind::Freeway,
                grade: LosGrade::B,
                min_speed: 25.0,
                max_flow_vph_per_lane: 1200.0,
            },
        ];
        assert!(LosTable::new(rows).is_err());
    }
}
