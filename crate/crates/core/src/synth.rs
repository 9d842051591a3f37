//! Synthetic corridors with known ground-truth demand, standing in for the
//! unpublished field data: every calibration claim is testable against the
//! (Π*, I*) that generated the observations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilevel::LosTable;
use crate::flowcal::PathFlowSolution;
use crate::net::{
    enumerate_all_paths, Grid, LinkKind, NetError, Node, ObservationSet, Path, RoadNetwork,
    SegIdx, TimeGrids,
};
use crate::sim::{MeasurementFrame, SimError, SimOptions};
use crate::speedcal::{simulate_demand, InflowProfile};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario spec: {0}")]
    BadSpec(String),
    #[error("demand infeasible: path {path} interval {k} asks {demand:.0} veh/h against ~{capacity:.0} veh/h entry capacity")]
    InfeasibleDemand {
        path: usize,
        k: usize,
        demand: f64,
        capacity: f64,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemandShape {
    FreeFlow,
    Bottleneck,
    StopAndGo,
}

/// Parameters of a synthetic corridor scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub corridor_km: f64,
    pub lanes: usize,
    pub on_ramps: usize,
    pub off_ramps: usize,
    /// Signalized turnaround exits connecting the westbound mainline to the
    /// eastbound return, for controlled-vehicle loops.
    pub turnarounds: usize,
    pub shape: DemandShape,
    /// Total ground-truth demand over the horizon, vehicles.
    pub total_demand: u32,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            corridor_km: 4.0,
            lanes: 2,
            on_ramps: 1,
            off_ramps: 1,
            turnarounds: 2,
            shape: DemandShape::FreeFlow,
            total_demand: 1200,
            seed: 1,
        }
    }
}

/// A generated scenario: the corridor, its candidate paths, the ground-truth
/// demand, and the observation set measured from simulating that truth.
#[derive(Debug, Clone)]
pub struct SynthScenario {
    pub network: RoadNetwork,
    pub paths: Vec<Path>,
    pub pi: PathFlowSolution,
    pub profile: InflowProfile,
    pub observations: ObservationSet,
    pub frame: MeasurementFrame,
    /// Westbound mainline link ids, upstream to downstream.
    pub mainline_links: Vec<String>,
    /// Turnaround loop descriptions: (route name, wb links, eb links, signal node).
    pub loops: Vec<LoopSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopSpec {
    pub name: String,
    pub westbound: Vec<String>,
    pub eastbound: Vec<String>,
    pub signal_node: String,
}

/// Straight chain of freeway links with one OD pair end to end. Shared by
/// many tests.
pub fn line_network(lengths: &[f64], lanes: usize, speed_limit: f64) -> RoadNetwork {
    let nodes: Vec<Node> = (0..=lengths.len())
        .map(|i| Node {
            id: format!("n{i}"),
            x: lengths[..i].iter().sum(),
            y: 0.0,
        })
        .collect();
    let links = lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            (
                format!("e{}", i + 1),
                format!("n{i}"),
                format!("n{}", i + 1),
                len,
                lanes,
                speed_limit,
                LinkKind::Freeway,
            )
        })
        .collect();
    let od = vec![("n0".to_string(), format!("n{}", lengths.len()))];
    RoadNetwork::build(nodes, links, vec![], od, RoadNetwork::default_segment_length())
        .expect("line network is valid")
}

/// Build the corridor topology for a spec: westbound mainline with ramps and
/// an optional lane drop, an eastbound return, and signalized turnarounds.
pub fn build_corridor(spec: &ScenarioSpec) -> Result<(RoadNetwork, Vec<LoopSpec>), SynthError> {
    if spec.corridor_km <= 0.0 || spec.lanes == 0 {
        return Err(SynthError::BadSpec(
            "corridor length and lanes must be positive".into(),
        ));
    }
    let n_seg = ((spec.corridor_km * 1000.0 / 500.0).round() as usize).max(2);
    let seg_len = spec.corridor_km * 1000.0 / n_seg as f64;
    if spec.on_ramps + spec.off_ramps + spec.turnarounds > n_seg.saturating_sub(1) {
        return Err(SynthError::BadSpec(format!(
            "{} ramps/turnarounds do not fit on {} mainline nodes",
            spec.on_ramps + spec.off_ramps + spec.turnarounds,
            n_seg - 1
        )));
    }
    let limit = 29.06; // 65 mph mainline
    let ramp_limit = 15.0;

    let mut nodes = Vec::new();
    let mut links = Vec::new();
    let mut signals = Vec::new();
    let mut ods = Vec::new();

    // Westbound mainline w0..w{n_seg}; the lane drop sits at two thirds.
    for i in 0..=n_seg {
        nodes.push(Node {
            id: format!("w{i}"),
            x: i as f64 * seg_len,
            y: 0.0,
        });
    }
    let drop_at = match spec.shape {
        DemandShape::FreeFlow => usize::MAX,
        _ => (2 * n_seg) / 3,
    };
    for i in 0..n_seg {
        let lanes = if i == drop_at {
            (spec.lanes - 1).max(1)
        } else {
            spec.lanes
        };
        links.push((
            format!("wb{i}"),
            format!("w{i}"),
            format!("w{}", i + 1),
            seg_len,
            lanes,
            limit,
            LinkKind::Freeway,
        ));
    }
    ods.push(("w0".to_string(), format!("w{n_seg}")));

    // Eastbound return e0..e{n_seg} (e0 under w{n_seg}).
    for i in 0..=n_seg {
        nodes.push(Node {
            id: format!("e{i}"),
            x: (n_seg - i) as f64 * seg_len,
            y: 30.0,
        });
    }
    for i in 0..n_seg {
        links.push((
            format!("eb{i}"),
            format!("e{i}"),
            format!("e{}", i + 1),
            seg_len,
            spec.lanes,
            limit,
            LinkKind::Freeway,
        ));
    }

    // On-ramps feed the first half, off-ramps drain the middle.
    for r in 0..spec.on_ramps {
        let at = 1 + r * (n_seg / 2).max(1) / spec.on_ramps.max(1);
        let origin = format!("on{r}");
        nodes.push(Node {
            id: origin.clone(),
            x: at as f64 * seg_len,
            y: -20.0,
        });
        links.push((
            format!("onr{r}"),
            origin.clone(),
            format!("w{at}"),
            250.0,
            1,
            ramp_limit,
            LinkKind::Ramp,
        ));
        ods.push((origin, format!("w{n_seg}")));
    }
    for r in 0..spec.off_ramps {
        let at = (n_seg / 2) + 1 + r;
        let sink = format!("off{r}");
        nodes.push(Node {
            id: sink.clone(),
            x: at as f64 * seg_len,
            y: -20.0,
        });
        links.push((
            format!("offr{r}"),
            format!("w{at}"),
            sink.clone(),
            250.0,
            1,
            ramp_limit,
            LinkKind::Ramp,
        ));
        ods.push(("w0".to_string(), sink));
    }

    // Signalized turnarounds near the downstream end, alternating exits.
    let mut loops = Vec::new();
    for t in 0..spec.turnarounds {
        let at = n_seg - 1 - t;
        let a = format!("t{t}a");
        let b = format!("t{t}b");
        nodes.push(Node {
            id: a.clone(),
            x: at as f64 * seg_len,
            y: 15.0,
        });
        nodes.push(Node {
            id: b.clone(),
            x: at as f64 * seg_len + 50.0,
            y: 15.0,
        });
        let off = format!("tout{t}");
        let conn = format!("tconn{t}");
        let on = format!("tin{t}");
        links.push((
            off.clone(),
            format!("w{at}"),
            a.clone(),
            200.0,
            1,
            ramp_limit,
            LinkKind::Ramp,
        ));
        links.push((
            conn.clone(),
            a.clone(),
            b.clone(),
            150.0,
            1,
            ramp_limit,
            LinkKind::Arterial,
        ));
        let eb_entry = n_seg - at;
        links.push((
            on.clone(),
            b.clone(),
            format!("e{eb_entry}"),
            200.0,
            1,
            ramp_limit,
            LinkKind::Ramp,
        ));
        // 60 s cycle: 15 s green for the turnaround, 45 s for the cross
        // street (no modeled movements).
        signals.push((
            b.clone(),
            60.0,
            vec![
                (vec![(conn.clone(), on.clone())], 15.0),
                (vec![], 45.0),
            ],
        ));

        let wb: Vec<String> = (0..at).map(|i| format!("wb{i}")).collect();
        let mut west = wb;
        west.push(off);
        west.push(conn);
        let mut east = vec![on];
        east.extend((eb_entry..n_seg).map(|i| format!("eb{i}")));
        loops.push(LoopSpec {
            name: if t == 0 { "orange".into() } else if t == 1 { "yellow".into() } else { format!("loop{t}") },
            westbound: west,
            eastbound: east,
            signal_node: b,
        });
    }

    let network = RoadNetwork::build(
        nodes,
        links,
        signals,
        ods,
        RoadNetwork::default_segment_length(),
    )?;
    Ok((network, loops))
}

/// Ground-truth inflow profile for a shape, one simplex row per path.
fn truth_profile(shape: DemandShape, n_paths: usize, n_bins: usize) -> InflowProfile {
    let weights: Vec<f64> = (0..n_bins)
        .map(|b| {
            let x = (b as f64 + 0.5) / n_bins as f64;
            match shape {
                DemandShape::FreeFlow => 1.0,
                DemandShape::Bottleneck => {
                    // One strong mid-horizon surge over a low floor.
                    let z = (x - 0.45) / 0.12;
                    0.25 + 3.0 * (-0.5 * z * z).exp()
                }
                DemandShape::StopAndGo => {
                    // Three bursts over a floor: oscillating upstream demand.
                    let mut w = 0.35;
                    for center in [0.18, 0.5, 0.82] {
                        let z = (x - center) / 0.07;
                        w += 2.2 * (-0.5 * z * z).exp();
                    }
                    w
                }
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let row: Vec<f64> = weights.iter().map(|w| w / total).collect();
    InflowProfile {
        shares: vec![row; n_paths],
    }
}

/// Ground-truth path flows: the mainline OD carries most of the demand, the
/// ramp ODs share the rest; interval weights follow the shape.
fn truth_flows(
    spec: &ScenarioSpec,
    paths: &[Path],
    profile: &InflowProfile,
    grids: &TimeGrids,
) -> PathFlowSolution {
    let n_k = grids.n_coarse();
    let fpc = grids.fine_per_coarse();
    let n_paths = paths.len();
    // Split demand: 70% to the first path (mainline), the rest evenly.
    let mut path_share = vec![0.0; n_paths];
    if n_paths == 1 {
        path_share[0] = 1.0;
    } else {
        path_share[0] = 0.7;
        for s in path_share.iter_mut().skip(1) {
            *s = 0.3 / (n_paths - 1) as f64;
        }
    }
    let mut counts = vec![vec![0u32; n_k]; n_paths];
    for j in 0..n_paths {
        for k in 0..n_k {
            let k_mass: f64 = profile.shares[j][k * fpc..(k + 1) * fpc].iter().sum();
            counts[j][k] =
                (spec.total_demand as f64 * path_share[j] * k_mass).round() as u32;
        }
    }
    PathFlowSolution {
        counts,
        iteration: 0,
    }
}

fn check_feasible(
    pi: &PathFlowSolution,
    paths: &[Path],
    network: &RoadNetwork,
    grids: &TimeGrids,
) -> Result<(), SynthError> {
    // Desk-scale feasibility: hourly entry demand per path must not exceed a
    // rough per-lane saturation flow on its entry link.
    const SAT_FLOW: f64 = 2400.0;
    for (j, counts) in pi.counts.iter().enumerate() {
        let entry = paths[j].links[0];
        let capacity = SAT_FLOW * network.links[entry].lanes as f64;
        for (k, &c) in counts.iter().enumerate() {
            let demand = c as f64 * 3600.0 / grids.coarse_s as f64;
            if demand > capacity {
                return Err(SynthError::InfeasibleDemand {
                    path: j,
                    k,
                    demand,
                    capacity,
                });
            }
        }
    }
    Ok(())
}

/// Generate a corridor, sample its ground-truth demand, simulate once, and
/// record the measured flows/speeds as the observation targets.
pub fn generate(spec: &ScenarioSpec, grids: &TimeGrids) -> Result<SynthScenario, SynthError> {
    grids.validate()?;
    let (network, loops) = build_corridor(spec)?;
    let paths = enumerate_all_paths(&network, 3)?;
    let profile = truth_profile(spec.shape, paths.len(), grids.n_fine());
    let pi = truth_flows(spec, &paths, &profile, grids);
    check_feasible(&pi, &paths, &network, grids)?;

    let (_, frame) = simulate_demand(
        &network,
        &paths,
        &pi,
        &profile,
        grids,
        SimOptions::default(),
        spec.seed,
    )?;

    let mut observations = ObservationSet::empty(&network, grids);
    for (i, row) in frame.link_flows.iter().enumerate() {
        for (k, &c) in row.iter().enumerate() {
            observations.flow_targets.set(i, k, c as f64);
        }
    }
    observations.speed_targets = frame.segment_speeds.clone();
    observations.los = LosTable::standard_freeway();

    let n_seg_mainline = ((spec.corridor_km * 1000.0 / 500.0).round() as usize).max(2);
    let mainline_links = (0..n_seg_mainline).map(|i| format!("wb{i}")).collect();

    Ok(SynthScenario {
        network,
        paths,
        pi,
        profile,
        observations,
        frame,
        mainline_links,
        loops,
    })
}

/// Multiplicative lognormal noise on every present flow/speed target.
pub fn perturb_targets(
    observations: &ObservationSet,
    noise_level: f64,
    seed: u64,
) -> Result<ObservationSet, SynthError> {
    if noise_level < 0.0 {
        return Err(SynthError::BadSpec("noise level must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = observations.clone();
    let mut noisy = |v: f64, floor: f64| -> f64 {
        // Box-Muller standard normal.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        (v * (noise_level * z).exp()).max(floor)
    };
    let flow_cells: Vec<(usize, usize, f64)> = observations.flow_targets.cells().collect();
    for (i, k, v) in flow_cells {
        out.flow_targets.set(i, k, noisy(v, 0.0));
    }
    let speed_cells: Vec<(usize, usize, f64)> = observations.speed_targets.cells().collect();
    for (s, r, v) in speed_cells {
        out.speed_targets.set(s, r, noisy(v, 0.1));
    }
    Ok(out)
}

/// Segments of the given links in travel order with their cumulative start
/// positions (m), for wave detection along a corridor.
pub fn segment_positions(
    network: &RoadNetwork,
    link_ids: &[String],
) -> Vec<(SegIdx, f64)> {
    let mut out = Vec::new();
    let mut offset = 0.0;
    for id in link_ids {
        let Some(li) = network.link_idx(id) else { continue };
        for &si in network.segments_of_link(li) {
            out.push((si, offset + network.segments[si].start));
        }
        offset += network.links[li].length;
    }
    out
}

/// Count backward-propagating low-speed bands in a speed field.
///
/// A band is a maximal run of fine intervals whose minimum-speed ridge (over
/// segments below `threshold`) penetrates upstream by at least
/// `min_excursion_m` relative to where the run started. Runs are split by
/// clear intervals or by the ridge jumping back downstream.
pub fn count_backward_waves(
    speeds: &Grid,
    segments: &[(SegIdx, f64)],
    threshold: f64,
    min_excursion_m: f64,
) -> usize {
    let n_fine = speeds.cols();
    let mut ridge: Vec<Option<f64>> = vec![None; n_fine];
    for r in 0..n_fine {
        let mut best: Option<(f64, f64)> = None; // (speed, position)
        for &(seg, pos) in segments {
            if let Some(v) = speeds.get(seg, r) {
                if v < threshold && best.map_or(true, |(bv, _)| v < bv) {
                    best = Some((v, pos));
                }
            }
        }
        ridge[r] = best.map(|(_, p)| p);
    }

    let mut bands = 0;
    let mut run_start_pos: Option<f64> = None;
    let mut run_min_pos = f64::INFINITY;
    let mut last_pos = f64::NAN;
    let mut gap = 0usize;
    let mut counted = false;

    for r in 0..n_fine {
        match ridge[r] {
            Some(pos) => {
                let downstream_jump =
                    run_start_pos.is_some() && pos > last_pos + 2.0 * min_excursion_m;
                if run_start_pos.is_none() || downstream_jump {
                    run_start_pos = Some(pos);
                    run_min_pos = pos;
                    counted = false;
                }
                run_min_pos = run_min_pos.min(pos);
                if !counted {
                    if let Some(start) = run_start_pos {
                        if start - run_min_pos >= min_excursion_m {
                            bands += 1;
                            counted = true;
                        }
                    }
                }
                last_pos = pos;
                gap = 0;
            }
            None => {
                gap += 1;
                if gap >= 2 {
                    run_start_pos = None;
                    run_min_pos = f64::INFINITY;
                    counted = false;
                }
            }
        }
    }
    bands
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_grids() -> TimeGrids {
        TimeGrids {
            start_s: 0,
            end_s: 1800,
            coarse_s: 900,
            fine_s: 60,
            warmup_s: 300,
        }
    }

    #[test]
    fn corridor_builds_and_validates() {
        let spec = ScenarioSpec::default();
        let (net, loops) = build_corridor(&spec).unwrap();
        assert_eq!(loops.len(), 2);
        assert!(net.signals.len() >= 2);
        // Mainline plus return plus ramps resolve into paths for every OD.
        let paths = enumerate_all_paths(&net, 3).unwrap();
        assert!(!paths.is_empty());
        for p in &paths {
            net.validate_path(p).unwrap();
        }
    }

    #[test]
    fn free_flow_targets_near_speed_limit() {
        let spec = ScenarioSpec {
            total_demand: 600,
            ..Default::default()
        };
        let grids = short_grids();
        let scenario = generate(&spec, &grids).unwrap();
        let mut checked = 0;
        for (seg, _, v) in scenario.observations.speed_targets.cells().take(500) {
            let link = scenario.network.segments[seg].link;
            let limit = scenario.network.links[link].speed_limit;
            assert!(
                v > 0.9 * limit,
                "free-flow segment {seg} at {v:.1} m/s vs limit {limit:.1}"
            );
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn round_trip_fidelity_same_seed() {
        let spec = ScenarioSpec {
            shape: DemandShape::Bottleneck,
            total_demand: 900,
            ..Default::default()
        };
        let grids = short_grids();
        let scenario = generate(&spec, &grids).unwrap();
        let (_, frame) = simulate_demand(
            &scenario.network,
            &scenario.paths,
            &scenario.pi,
            &scenario.profile,
            &grids,
            SimOptions::default(),
            spec.seed,
        )
        .unwrap();
        assert_eq!(frame, scenario.frame);
        for (i, row) in frame.link_flows.iter().enumerate() {
            for (k, &c) in row.iter().enumerate() {
                assert_eq!(
                    scenario.observations.flow_targets.get(i, k),
                    Some(c as f64)
                );
            }
        }
    }

    #[test]
    fn perturbation_statistics_and_validation() {
        let spec = ScenarioSpec::default();
        let grids = short_grids();
        let scenario = generate(&spec, &grids).unwrap();
        assert!(matches!(
            perturb_targets(&scenario.observations, -0.1, 0),
            Err(SynthError::BadSpec(_))
        ));
        let same = perturb_targets(&scenario.observations, 0.0, 0).unwrap();
        assert_eq!(same, scenario.observations);

        // Mean relative change of lognormal(sigma=0.1) is ~8%, within 10±3%.
        let mut rel_sum = 0.0;
        let mut n = 0u64;
        for seed in 0..100 {
            let noisy = perturb_targets(&scenario.observations, 0.1, seed).unwrap();
            for ((_, _, a), (_, _, b)) in scenario
                .observations
                .flow_targets
                .cells()
                .zip(noisy.flow_targets.cells())
            {
                if a > 0.0 {
                    rel_sum += (b - a).abs() / a;
                    n += 1;
                }
            }
        }
        let mean_rel = rel_sum / n as f64;
        assert!(
            (0.07..=0.13).contains(&mean_rel),
            "mean relative change {mean_rel}"
        );
    }

    #[test]
    fn infeasible_demand_rejected() {
        let spec = ScenarioSpec {
            total_demand: 60_000,
            ..Default::default()
        };
        let grids = short_grids();
        assert!(matches!(
            generate(&spec, &grids),
            Err(SynthError::InfeasibleDemand { .. })
        ));
    }

    #[test]
    fn wave_detector_counts_synthetic_ridges() {
        // Hand-built field: two upstream-moving cold bands on a 10-segment,
        // 40-interval grid, everything else warm.
        let net = line_network(&[5000.0], 1, 30.0);
        let segs = segment_positions(&net, &["e1".into()]);
        assert!(segs.len() >= 6);
        let mut grid = Grid::new(net.segments.len(), 40);
        for (si, _) in &segs {
            for r in 0..40 {
                grid.set(*si, r, 28.0);
            }
        }
        // Band 1: ridge walks upstream segments 4->1 over r=5..12.
        for (step, r) in (5..13).enumerate() {
            let idx = 4usize.saturating_sub(step / 2);
            grid.set(segs[idx].0, r, 5.0);
        }
        // Band 2: same shape over r=25..32.
        for (step, r) in (25..33).enumerate() {
            let idx = 5usize.saturating_sub(step / 2);
            grid.set(segs[idx].0, r, 5.0);
        }
        let bands = count_backward_waves(&grid, &segs, 15.0, 1000.0);
        assert_eq!(bands, 2);
    }

    #[test]
    fn bottleneck_scenario_has_sustained_slowdown() {
        let spec = ScenarioSpec {
            shape: DemandShape::Bottleneck,
            total_demand: 2600,
            seed: 3,
            ..Default::default()
        };
        let grids = short_grids();
        let scenario = generate(&spec, &grids).unwrap();
        // Some segment's target speed drops below half the limit for at
        // least 10 consecutive minutes.
        let mut best_run = 0;
        for seg in 0..scenario.network.segments.len() {
            let link = scenario.network.segments[seg].link;
            let half = 0.5 * scenario.network.links[link].speed_limit;
            let mut run = 0;
            for r in 0..grids.n_fine() {
                match scenario.observations.speed_targets.get(seg, r) {
                    Some(v) if v < half => {
                        run += 1;
                        best_run = best_run.max(run);
                    }
                    _ => run = 0,
                }
            }
        }
        assert!(
            best_run >= 10,
            "longest sub-half-limit run {best_run} minutes"
        );
    }

    #[test]
    fn stop_and_go_scenario_shows_backward_waves() {
        let spec = ScenarioSpec {
            shape: DemandShape::StopAndGo,
            total_demand: 2900,
            seed: 5,
            ..Default::default()
        };
        let grids = TimeGrids {
            start_s: 0,
            end_s: 2700,
            coarse_s: 900,
            fine_s: 60,
            warmup_s: 300,
        };
        let scenario = generate(&spec, &grids).unwrap();
        let segs = segment_positions(&scenario.network, &scenario.mainline_links);
        let bands = count_backward_waves(
            &scenario.observations.speed_targets,
            &segs,
            0.5 * 29.06,
            400.0,
        );
        assert!(bands >= 2, "detected {bands} backward bands");
    }
}
