//! Controlled-fleet deployment analytics: effective vehicles per hour,
//! temporal and spatial penetration, break-aware release schedules, and
//! with/without-fleet impact comparison on a calibrated scenario.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::run_pair;
use crate::net::{LinkIdx, NetError, NodeIdx, Path, RoadNetwork, TimeGrids};
use crate::sim::{run, AgentPlan, GapStats, MeasurementFrame, SimError, SimOptions, VehicleClass};

#[derive(Debug, Error)]
pub enum AvPlanError {
    #[error("{0}")]
    BadInput(String),
    #[error("need at least 2 controlled vehicles on the section")]
    TooFewAvs,
    #[error("schedule references unknown route {0}")]
    UnknownRoute(String),
    #[error("infeasible break policy: {0}")]
    InfeasiblePolicy(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// A controlled-vehicle loop: westbound, through a signalized turnaround,
/// back eastbound. Lane 1 (the HOV lane) is excluded by default.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AvRoute {
    pub id: String,
    pub westbound: Vec<LinkIdx>,
    pub eastbound: Vec<LinkIdx>,
    pub turnaround_nodes: Vec<NodeIdx>,
    /// 1-based lanes the fleet may use on the mainline.
    pub permitted_lanes: Vec<usize>,
}

impl AvRoute {
    /// Default permitted lanes for a mainline lane count: everything but
    /// lane 1.
    pub fn default_permitted_lanes(lane_count: usize) -> Vec<usize> {
        (2..=lane_count.max(2)).collect()
    }

    /// The full loop as one ordered link sequence.
    pub fn loop_links(&self) -> Vec<LinkIdx> {
        let mut links = self.westbound.clone();
        links.extend(&self.eastbound);
        links
    }

    pub fn validate(&self, net: &RoadNetwork) -> Result<(), AvPlanError> {
        if self.permitted_lanes.contains(&1) {
            return Err(AvPlanError::BadInput(format!(
                "route {}: lane 1 is reserved",
                self.id
            )));
        }
        let links = self.loop_links();
        let path = Path {
            id: 0,
            od: usize::MAX,
            links,
        };
        net.validate_path(&path)?;
        Ok(())
    }
}

/// Hourly westbound contribution of a looping fleet: one vehicle completing
/// its loop in `loop_minutes` contributes 60/loop_minutes drives per hour.
pub fn effective_vehicles_per_hour(loop_minutes: f64, fleet_size: usize) -> (f64, f64) {
    let per_vehicle = 60.0 / loop_minutes;
    (per_vehicle, fleet_size as f64 * per_vehicle)
}

/// Fraction of fleet drives among the traffic the fleet actually mixes with;
/// the background scales by the share of lanes the fleet occupies.
pub fn temporal_penetration(fleet_rate: f64, background_vph: f64, lane_share: f64) -> f64 {
    fleet_rate / (lane_share * background_vph + fleet_rate)
}

/// Expected background vehicles between consecutive controlled vehicles on a
/// section, assuming the controlled vehicles are uniformly spaced.
pub fn spatial_penetration(
    av_count_on_section: usize,
    background_count: f64,
) -> Result<f64, AvPlanError> {
    if av_count_on_section < 2 {
        return Err(AvPlanError::TooFewAvs);
    }
    Ok(background_count / av_count_on_section as f64)
}

/// Break policy: drive `loops_per_shift` full loops, rest for
/// `break_loops` loop-durations while a reserve keeps the vehicle moving.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BreakPolicy {
    pub loops_per_shift: usize,
    pub break_loops: f64,
    /// Planning horizon of the schedule, minutes.
    pub horizon_minutes: f64,
}

impl Default for BreakPolicy {
    fn default() -> Self {
        BreakPolicy {
            loops_per_shift: 2,
            break_loops: 1.0,
            horizon_minutes: 240.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub driver_id: usize,
    pub route: String,
    /// 1-based lane assignment.
    pub lane: usize,
    /// First wheel-on-road time, seconds from release start.
    pub depart_s: f64,
    /// Break windows (start, end), seconds.
    pub breaks: Vec<(f64, f64)>,
}

/// Staggered, alternating-route release plan with reserve coverage so the
/// whole fleet stays on the road through every break.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseSchedule {
    pub entries: Vec<ScheduleEntry>,
    pub headway_s: f64,
    pub loop_minutes: f64,
    /// Extra drivers beyond the fleet size needed for zero downtime.
    pub reserves_needed: usize,
}

impl ReleaseSchedule {
    /// Vehicle release times: entry i of the fleet departs at i × headway.
    pub fn release_end_s(&self, fleet_size: usize) -> f64 {
        self.headway_s * fleet_size.saturating_sub(1) as f64
    }
}

/// Build the release schedule: vehicles leave every `headway_s` seconds,
/// alternating routes and cycling lanes; drivers hand vehicles to reserves
/// for their breaks. Reports how many reserves zero downtime needs.
pub fn build_schedule(
    fleet_size: usize,
    headway_s: f64,
    loop_minutes: f64,
    routes: &[String],
    policy: &BreakPolicy,
) -> Result<ReleaseSchedule, AvPlanError> {
    if headway_s <= 0.0 {
        return Err(AvPlanError::BadInput("headway must be > 0".into()));
    }
    if loop_minutes <= 0.0 {
        return Err(AvPlanError::BadInput("loop time must be > 0".into()));
    }
    if routes.is_empty() {
        return Err(AvPlanError::BadInput("need at least one route".into()));
    }
    if policy.loops_per_shift == 0 && policy.break_loops > 0.0 {
        return Err(AvPlanError::InfeasiblePolicy(
            "drivers would always be on break".into(),
        ));
    }

    let loop_s = loop_minutes * 60.0;
    let horizon_s = policy.horizon_minutes * 60.0;
    let lanes = [2usize, 3, 4];

    // Driver pool: fleet drivers first, reserves created on demand.
    struct Driver {
        entry: ScheduleEntry,
        free_at: f64,
    }
    let mut drivers: Vec<Driver> = Vec::new();
    let mut reserves_needed = 0usize;

    for v in 0..fleet_size {
        let release = v as f64 * headway_s;
        let route = routes[v % routes.len()].clone();
        let lane = lanes[v % lanes.len()];
        let mut driver = v; // initial driver index == vehicle index
        drivers.push(Driver {
            entry: ScheduleEntry {
                driver_id: v,
                route: route.clone(),
                lane,
                depart_s: release,
                breaks: Vec::new(),
            },
            free_at: f64::INFINITY, // currently driving
        });

        if policy.break_loops == 0.0 {
            continue;
        }
        // Walk this vehicle's loop boundaries; every `loops_per_shift` loops
        // the current driver swaps out for a reserve.
        let mut t = release;
        let mut loops_done = 0usize;
        while t + loop_s <= horizon_s {
            t += loop_s;
            loops_done += 1;
            if loops_done % policy.loops_per_shift != 0 {
                continue;
            }
            let break_end = t + policy.break_loops * loop_s;
            drivers[driver].entry.breaks.push((t, break_end));
            drivers[driver].free_at = break_end;

            // Deterministic reserve pick: lowest-index driver who is free.
            let substitute = drivers
                .iter()
                .position(|d| d.free_at <= t)
                .unwrap_or_else(|| {
                    reserves_needed += 1;
                    drivers.push(Driver {
                        entry: ScheduleEntry {
                            driver_id: drivers.len(),
                            route: route.clone(),
                            lane,
                            depart_s: t,
                            breaks: Vec::new(),
                        },
                        free_at: t,
                    });
                    drivers.len() - 1
                });
            if drivers[substitute].entry.breaks.is_empty()
                && drivers[substitute].entry.depart_s > t
            {
                drivers[substitute].entry.depart_s = t;
            }
            drivers[substitute].free_at = f64::INFINITY;
            driver = substitute;
        }
    }

    Ok(ReleaseSchedule {
        entries: drivers.into_iter().map(|d| d.entry).collect(),
        headway_s,
        loop_minutes,
        reserves_needed,
    })
}

/// Accounting check: at any instant every driver is on the road, on a break,
/// or in reserve.
pub fn drivers_accounted(schedule: &ReleaseSchedule, fleet_size: usize, t: f64) -> (usize, usize, usize) {
    let mut on_break = 0;
    let mut on_road = 0;
    for e in &schedule.entries {
        if e.breaks.iter().any(|&(s, en)| t >= s && t < en) {
            on_break += 1;
        } else if t >= e.depart_s {
            // Driving or back in the pool; the fleet size bounds the road.
            on_road += 1;
        }
    }
    let in_reserve = schedule.entries.len() - on_break - on_road.min(fleet_size);
    (on_road.min(fleet_size), on_break, in_reserve)
}

/// Macro and micro indicators from one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Indicators {
    pub mean_speed_mps: Option<f64>,
    pub density_veh_per_lane_km: f64,
    pub mean_travel_time_s: Option<f64>,
    pub gap_mean_m: f64,
    pub gap_variance: f64,
    pub gap_min_m: f64,
    pub gap_max_m: f64,
}

impl Indicators {
    pub fn from_frame(frame: &MeasurementFrame) -> Self {
        let GapStats { mean, min, max, .. } = frame.gap_stats.clone();
        Indicators {
            mean_speed_mps: frame.mean_speed(),
            density_veh_per_lane_km: frame.mean_density(),
            mean_travel_time_s: frame.mean_travel_time(),
            gap_mean_m: mean,
            gap_variance: frame.gap_stats.variance(),
            gap_min_m: min,
            gap_max_m: max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalQueueComparison {
    pub node: String,
    pub baseline_max_queue: u32,
    pub with_av_max_queue: u32,
}

/// Side-by-side baseline vs with-fleet report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactReport {
    pub av_agents: usize,
    pub baseline: Indicators,
    pub with_av: Indicators,
    /// with_av − baseline for the macro indicators.
    pub mean_speed_delta_mps: f64,
    pub density_delta: f64,
    pub mean_travel_time_delta_s: f64,
    pub mean_travel_time_rel_change: f64,
    pub signal_queues: Vec<SignalQueueComparison>,
    pub baseline_spillback: Vec<String>,
    pub with_av_spillback: Vec<String>,
}

/// Expand a release schedule into per-drive agent plans over the loop paths.
/// Each completed loop is one agent; departures chain at loop-time spacing.
/// Returns the extended path set and the AV plans.
pub fn schedule_to_plans(
    network: &RoadNetwork,
    paths: &[Path],
    routes: &[AvRoute],
    schedule: &ReleaseSchedule,
    grids: &TimeGrids,
    first_agent_id: u64,
) -> Result<(Vec<Path>, Vec<AgentPlan>), AvPlanError> {
    let mut all_paths = paths.to_vec();
    let mut route_path: Vec<usize> = Vec::new();
    for route in routes {
        route.validate(network)?;
        route_path.push(all_paths.len());
        all_paths.push(Path {
            id: all_paths.len(),
            od: usize::MAX,
            links: route.loop_links(),
        });
    }

    let loop_s = schedule.loop_minutes * 60.0;
    let horizon = grids.horizon_s() as f64;
    let mut plans = Vec::new();
    let mut id = first_agent_id;
    for entry in &schedule.entries {
        let Some(route_idx) = routes.iter().position(|r| r.id == entry.route) else {
            return Err(AvPlanError::UnknownRoute(entry.route.clone()));
        };
        let route = &routes[route_idx];
        if !route.permitted_lanes.contains(&entry.lane) {
            return Err(AvPlanError::BadInput(format!(
                "driver {} assigned lane {} not permitted on route {}",
                entry.driver_id, entry.lane, entry.route
            )));
        }
        // Drives start at the release and repeat each loop until the horizon
        // ends, skipping loops that fall inside this driver's breaks.
        let mut t = entry.depart_s;
        while t < horizon {
            let on_break = entry.breaks.iter().any(|&(s, e)| t >= s && t < e);
            if !on_break {
                plans.push(AgentPlan {
                    id,
                    class: VehicleClass::Av,
                    path: route_path[route_idx],
                    depart_s: grids.warmup_s as f64 + t,
                    fixed_lane: Some(entry.lane),
                    params: None,
                });
                id += 1;
            }
            t += loop_s;
        }
    }
    Ok((all_paths, plans))
}

/// Run the baseline and the with-fleet simulation on identical seeds and
/// report indicator deltas, turnaround queue growth, and spillback flags.
pub fn inject_and_compare(
    network: &RoadNetwork,
    paths: &[Path],
    background_plans: &[AgentPlan],
    routes: &[AvRoute],
    schedule: &ReleaseSchedule,
    grids: &TimeGrids,
    opts: SimOptions,
    seed: u64,
) -> Result<ImpactReport, AvPlanError> {
    let max_bg_id = background_plans.iter().map(|p| p.id).max().unwrap_or(0);
    let (all_paths, av_plans) =
        schedule_to_plans(network, paths, routes, schedule, grids, max_bg_id + 1)?;
    let mut combined = background_plans.to_vec();
    combined.extend(av_plans.iter().cloned());

    let (baseline, with_av) = run_pair(
        || run(network, &all_paths, background_plans, grids, opts, seed),
        || run(network, &all_paths, &combined, grids, opts, seed),
    );
    let baseline = baseline?;
    let with_av = with_av?;

    let base_ind = Indicators::from_frame(&baseline);
    let av_ind = Indicators::from_frame(&with_av);
    let tt_base = base_ind.mean_travel_time_s.unwrap_or(0.0);
    let tt_av = av_ind.mean_travel_time_s.unwrap_or(tt_base);

    let signal_queues = baseline
        .max_signal_queue
        .iter()
        .zip(&with_av.max_signal_queue)
        .map(|((node, bq), (_, aq))| SignalQueueComparison {
            node: node.clone(),
            baseline_max_queue: *bq,
            with_av_max_queue: *aq,
        })
        .collect();

    Ok(ImpactReport {
        av_agents: av_plans.len(),
        mean_speed_delta_mps: av_ind.mean_speed_mps.unwrap_or(0.0)
            - base_ind.mean_speed_mps.unwrap_or(0.0),
        density_delta: av_ind.density_veh_per_lane_km - base_ind.density_veh_per_lane_km,
        mean_travel_time_delta_s: tt_av - tt_base,
        mean_travel_time_rel_change: if tt_base > 0.0 {
            (tt_av - tt_base) / tt_base
        } else {
            0.0
        },
        baseline: base_ind,
        with_av: av_ind,
        signal_queues,
        baseline_spillback: baseline.spillback_links.clone(),
        with_av_spillback: with_av.spillback_links.clone(),
    })
}

/// Loop time measured from an otherwise-empty simulation: free-flow travel
/// plus turnaround signal delay.
pub fn measure_loop_minutes(
    network: &RoadNetwork,
    route: &AvRoute,
    grids: &TimeGrids,
    opts: SimOptions,
) -> Result<f64, AvPlanError> {
    route.validate(network)?;
    let path = Path {
        id: 0,
        od: usize::MAX,
        links: route.loop_links(),
    };
    let lane = route.permitted_lanes.first().copied().unwrap_or(2);
    let plan = AgentPlan {
        id: 0,
        class: VehicleClass::Av,
        path: 0,
        depart_s: 0.0,
        fixed_lane: Some(lane),
        params: None,
    };
    let frame = run(
        network,
        std::slice::from_ref(&path),
        std::slice::from_ref(&plan),
        grids,
        opts,
        0,
    )?;
    let Some(&(_, tt)) = frame.travel_times.first() else {
        return Err(AvPlanError::BadInput(
            "loop did not complete within the horizon".into(),
        ));
    };
    Ok(tt / 60.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_vehicles_paper_arithmetic() {
        let (per, fleet) = effective_vehicles_per_hour(42.0, 1);
        assert!((per - 1.43).abs() < 0.01);
        assert_eq!(per, fleet);
        let (_, fleet) = effective_vehicles_per_hour(34.0, 100);
        assert!((fleet - 176.0).abs() < 1.0);
        let (per, _) = effective_vehicles_per_hour(60.0, 1);
        assert_eq!(per, 1.0);
    }

    #[test]
    fn rate_identity_round_trip() {
        for x in [0.5f64, 1.0, 1.43, 3.7] {
            let (per, fleet) = effective_vehicles_per_hour(60.0 / x, 7);
            assert!((per - x).abs() < 1e-12);
            assert!((fleet - 7.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_penetration_examples_and_bounds() {
        let p = temporal_penetration(143.0, 4000.0, 0.75);
        assert!((p - 143.0 / 3143.0).abs() < 1e-12);
        assert_eq!(temporal_penetration(0.0, 4000.0, 0.75), 0.0);
        assert!((temporal_penetration(500.0, 500.0, 1.0) - 0.5).abs() < 1e-12);
        // Monotone in fleet rate, antitone in background.
        assert!(
            temporal_penetration(200.0, 4000.0, 0.75) > temporal_penetration(100.0, 4000.0, 0.75)
        );
        assert!(
            temporal_penetration(100.0, 5000.0, 0.75) < temporal_penetration(100.0, 4000.0, 0.75)
        );
    }

    #[test]
    fn spatial_penetration_basics() {
        assert_eq!(spatial_penetration(10, 100.0).unwrap(), 10.0);
        assert_eq!(spatial_penetration(2, 0.0).unwrap(), 0.0);
        assert!(matches!(
            spatial_penetration(1, 50.0),
            Err(AvPlanError::TooFewAvs)
        ));
    }

    #[test]
    fn schedule_two_vehicles_no_breaks() {
        let policy = BreakPolicy {
            break_loops: 0.0,
            ..Default::default()
        };
        let routes = vec!["orange".to_string(), "yellow".to_string()];
        let s = build_schedule(2, 120.0, 34.0, &routes, &policy).unwrap();
        assert_eq!(s.entries.len(), 2);
        assert_eq!(s.reserves_needed, 0);
        assert_eq!(s.entries[0].depart_s, 0.0);
        assert_eq!(s.entries[1].depart_s, 120.0);
        assert_eq!(s.entries[0].route, "orange");
        assert_eq!(s.entries[1].route, "yellow");
        assert!(s.entries.iter().all(|e| e.breaks.is_empty()));
    }

    #[test]
    fn schedule_hundred_vehicles_with_breaks() {
        let policy = BreakPolicy::default();
        let routes = vec!["orange".to_string(), "yellow".to_string()];
        let s = build_schedule(100, 60.0, 34.0, &routes, &policy).unwrap();
        // All vehicles on the road by the last release.
        assert_eq!(s.release_end_s(100), 99.0 * 60.0);
        assert!(s.reserves_needed > 0);
        assert_eq!(s.entries.len(), 100 + s.reserves_needed);

        // Conservation at sampled instants: road + break + reserve = total.
        for t in [0.0, 1800.0, 3600.0, 7200.0, 10800.0] {
            let (road, brk, reserve) = drivers_accounted(&s, 100, t);
            assert_eq!(road + brk + reserve, s.entries.len(), "at t={t}");
        }

        // No driver breaks while still marked driving before their release.
        for e in &s.entries {
            for &(start, end) in &e.breaks {
                assert!(start >= e.depart_s && end > start);
            }
        }
    }

    #[test]
    fn infeasible_break_policy_rejected() {
        let policy = BreakPolicy {
            loops_per_shift: 0,
            break_loops: 1.0,
            horizon_minutes: 60.0,
        };
        assert!(matches!(
            build_schedule(2, 60.0, 34.0, &["orange".to_string()], &policy),
            Err(AvPlanError::InfeasiblePolicy(_))
        ));
    }
}
