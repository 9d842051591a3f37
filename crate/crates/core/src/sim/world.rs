//! Time-stepped corridor world: insertion, car following, lane keeping,
//! signal queues, link transitions, and measurement extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    idm_accel, idm_free_accel, AgentPlan, GapFault, IdmParams, SimError, VehicleClass, DEFAULT_DT,
    DEFAULT_SPEED_FACTOR,
};
use crate::net::{Grid, LinkIdx, Movement, Path, RoadNetwork, TimeGrids};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Integration step, s.
    pub dt: f64,
    /// Desired speed = link limit × this factor (non-custom vehicles).
    pub speed_factor: f64,
    /// Record trajectory samples at this cadence (s); `None` disables.
    pub trajectory_every_s: Option<f64>,
    /// Speed below which a vehicle counts as queued, m/s.
    pub queue_speed: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            dt: DEFAULT_DT,
            speed_factor: DEFAULT_SPEED_FACTOR,
            trajectory_every_s: None,
            queue_speed: 2.0,
        }
    }
}

/// Space-gap statistics accumulated over vehicle-steps (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub count: u64,
    pub mean: f64,
    m2: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for GapStats {
    fn default() -> Self {
        GapStats {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl GapStats {
    fn push(&mut self, gap: f64) {
        self.count += 1;
        let delta = gap - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (gap - self.mean);
        self.min = self.min.min(gap);
        self.max = self.max.max(gap);
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub agent_id: u64,
    pub link_id: String,
    pub lane: usize,
    pub pos_m: f64,
    pub speed_mps: f64,
    pub gap_m: Option<f64>,
}

/// Everything measured from one simulation run. Warm-up is excluded from all
/// grid-based measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFrame {
    /// Vehicles crossing each link's downstream end per coarse interval.
    pub link_flows: Vec<Vec<u32>>,
    /// Mean sampled speed per segment per fine interval, m/s.
    pub segment_speeds: Grid,
    /// (agent id, travel time s) for every arrived agent, in arrival order.
    pub travel_times: Vec<(u64, f64)>,
    pub gap_stats: GapStats,
    /// Network mean speed per fine interval, m/s (None if no vehicles).
    pub mean_speed_per_fine: Vec<Option<f64>>,
    /// Mean vehicles per lane-km per fine interval.
    pub density_per_fine: Vec<f64>,
    pub departed: u64,
    pub arrived: u64,
    pub in_network_at_end: u64,
    /// Agents whose insertion had to be delayed at least one step.
    pub deferred: u64,
    /// Agents never inserted by the end of the run.
    pub never_inserted: u64,
    /// Max queued-vehicle count per signalized node id.
    pub max_signal_queue: Vec<(String, u32)>,
    /// Links whose signal queue reached their upstream end.
    pub spillback_links: Vec<String>,
    pub trajectories: Vec<TrajectorySample>,
}

impl MeasurementFrame {
    /// Mean network speed over the measured horizon, m/s.
    pub fn mean_speed(&self) -> Option<f64> {
        let xs: Vec<f64> = self.mean_speed_per_fine.iter().flatten().copied().collect();
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    }

    /// Mean density over the measured horizon, veh/lane-km.
    pub fn mean_density(&self) -> f64 {
        if self.density_per_fine.is_empty() {
            0.0
        } else {
            self.density_per_fine.iter().sum::<f64>() / self.density_per_fine.len() as f64
        }
    }

    /// Mean travel time of arrived agents, s.
    pub fn mean_travel_time(&self) -> Option<f64> {
        if self.travel_times.is_empty() {
            None
        } else {
            Some(self.travel_times.iter().map(|(_, t)| t).sum::<f64>() / self.travel_times.len() as f64)
        }
    }
}

#[derive(Debug, Clone)]
struct Vehicle {
    id: u64,
    path: usize,
    leg: usize,
    link: LinkIdx,
    lane: usize,
    pos: f64,
    speed: f64,
    accel: f64,
    params: IdmParams,
    custom_params: bool,
    fixed_lane: Option<usize>,
    entered_at: f64,
}

struct PendingAgent {
    plan: usize,
    depart: f64,
    tie: u64,
    attempted: bool,
}

/// Mutable simulation state. Build with [`World::new`], advance with
/// [`World::step`]; [`run`] drives a full warm-up + horizon and finalizes the
/// measurement frame.
pub struct World<'a> {
    net: &'a RoadNetwork,
    paths: &'a [Path],
    grids: &'a TimeGrids,
    opts: SimOptions,
    time: f64,
    vehicles: Vec<Vehicle>,
    /// Per link, per lane: vehicle indices ordered front (downstream) first.
    lanes: Vec<Vec<Vec<usize>>>,
    pending: Vec<PendingAgent>,
    next_pending: usize,
    waiting: Vec<usize>,
    plans: &'a [AgentPlan],
    // measurement accumulators
    flow_counts: Vec<Vec<u32>>,
    seg_speed_sum: Vec<Vec<f64>>,
    seg_speed_n: Vec<Vec<u32>>,
    net_speed_sum: Vec<f64>,
    net_speed_n: Vec<u64>,
    density_sum: Vec<f64>,
    density_n: Vec<u64>,
    gap_stats: GapStats,
    travel_times: Vec<(u64, f64)>,
    departed: u64,
    arrived: u64,
    deferred: u64,
    queue_max: Vec<u32>,
    spillback: Vec<bool>,
    trajectories: Vec<TrajectorySample>,
    lane_km: f64,
}

impl<'a> World<'a> {
    pub fn new(
        net: &'a RoadNetwork,
        paths: &'a [Path],
        plans: &'a [AgentPlan],
        grids: &'a TimeGrids,
        opts: SimOptions,
        seed: u64,
    ) -> Result<Self, SimError> {
        if !(opts.dt > 0.0) {
            return Err(SimError::BadOptions("dt must be > 0".into()));
        }
        let horizon_end = grids.total_sim_s() as f64;
        for plan in plans {
            if plan.depart_s < 0.0 || plan.depart_s >= horizon_end {
                return Err(SimError::BadPlan {
                    agent: plan.id,
                    msg: format!("departure {:.1}s outside warm-up + horizon", plan.depart_s),
                });
            }
            let path = paths.get(plan.path).ok_or_else(|| SimError::BadPlan {
                agent: plan.id,
                msg: format!("unknown path {}", plan.path),
            })?;
            if let Some(lane) = plan.fixed_lane {
                let max_lanes = path
                    .links
                    .iter()
                    .map(|&l| net.links[l].lanes)
                    .max()
                    .unwrap_or(0);
                if lane == 0 || lane > max_lanes {
                    return Err(SimError::BadPlan {
                        agent: plan.id,
                        msg: format!("fixed lane {lane} exceeds path lane counts"),
                    });
                }
            }
            if let Some(p) = &plan.params {
                p.validate().map_err(|e| SimError::BadPlan {
                    agent: plan.id,
                    msg: e.to_string(),
                })?;
            }
        }

        // The seed only breaks insertion-order ties between agents with equal
        // departure times.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ties: Vec<u64> = (0..plans.len()).map(|_| rng.gen()).collect();
        let mut pending: Vec<PendingAgent> = plans
            .iter()
            .enumerate()
            .map(|(i, p)| PendingAgent {
                plan: i,
                depart: p.depart_s,
                tie: ties[i],
                attempted: false,
            })
            .collect();
        pending.sort_by(|a, b| {
            a.depart
                .total_cmp(&b.depart)
                .then(a.tie.cmp(&b.tie))
                .then(plans[a.plan].id.cmp(&plans[b.plan].id))
        });

        let lanes = net
            .links
            .iter()
            .map(|l| vec![Vec::new(); l.lanes])
            .collect();

        Ok(World {
            net,
            paths,
            grids,
            opts,
            time: 0.0,
            vehicles: Vec::new(),
            lanes,
            pending,
            next_pending: 0,
            waiting: Vec::new(),
            plans,
            flow_counts: vec![vec![0; grids.n_coarse()]; net.links.len()],
            seg_speed_sum: vec![vec![0.0; grids.n_fine()]; net.segments.len()],
            seg_speed_n: vec![vec![0; grids.n_fine()]; net.segments.len()],
            net_speed_sum: vec![0.0; grids.n_fine()],
            net_speed_n: vec![0; grids.n_fine()],
            density_sum: vec![0.0; grids.n_fine()],
            density_n: vec![0; grids.n_fine()],
            gap_stats: GapStats::default(),
            travel_times: Vec::new(),
            departed: 0,
            arrived: 0,
            deferred: 0,
            queue_max: vec![0; net.signals.len()],
            spillback: vec![false; net.links.len()],
            trajectories: Vec::new(),
            lane_km: net.lane_km(),
        })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    fn desired_speed(&self, params: &IdmParams, custom: bool, link: LinkIdx) -> f64 {
        if custom {
            params.desired_speed
        } else {
            self.net.links[link].speed_limit * self.opts.speed_factor
        }
    }

    /// Least-occupied permitted lane on `link` for a vehicle, ties to the
    /// lowest index. A fixed lane wins whenever the link has it.
    fn choose_lane(&self, link: LinkIdx, fixed: Option<usize>) -> usize {
        let n = self.net.links[link].lanes;
        if let Some(lane) = fixed {
            if lane <= n {
                return lane - 1;
            }
        }
        let mut best = 0;
        let mut best_n = usize::MAX;
        for (i, lane) in self.lanes[link].iter().enumerate() {
            if lane.len() < best_n {
                best_n = lane.len();
                best = i;
            }
        }
        best
    }

    fn try_insert(&mut self, plan_idx: usize) -> bool {
        let plan = &self.plans[plan_idx];
        let path = &self.paths[plan.path];
        let link = path.links[0];
        let lane = self.choose_lane(link, plan.fixed_lane);
        let limit = self.net.links[link].speed_limit;

        let mut params = plan
            .params
            .unwrap_or_else(|| IdmParams::for_speed_limit(limit, self.opts.speed_factor));
        let custom = plan.params.is_some();
        if !custom {
            params.desired_speed = limit * self.opts.speed_factor;
        }

        // Headroom against the rearmost vehicle in the lane.
        let mut speed = params.desired_speed.min(limit);
        if let Some(&back) = self.lanes[link][lane].last() {
            let leader = &self.vehicles[back];
            let gap = leader.pos - leader.params.length;
            if gap <= params.jam_gap {
                return false;
            }
            let safe = ((gap - params.jam_gap) / params.time_headway).max(0.0);
            speed = speed.min(safe);
        }

        let idx = self.vehicles.len();
        self.vehicles.push(Vehicle {
            id: plan.id,
            class: plan.class,
            path: plan.path,
            leg: 0,
            link,
            lane,
            pos: 0.0,
            speed,
            accel: 0.0,
            params,
            custom_params: custom,
            fixed_lane: plan.fixed_lane,
            entered_at: self.time,
        });
        self.lanes[link][lane].push(idx);
        self.departed += 1;
        true
    }

    fn process_insertions(&mut self) {
        // Retry earlier deferments first, then agents newly due. Both sets
        // stay in (departure, tie, id) order.
        let mut still_waiting = Vec::new();
        let waiting = std::mem::take(&mut self.waiting);
        for pending_idx in waiting {
            let plan = self.pending[pending_idx].plan;
            if !self.try_insert(plan) {
                still_waiting.push(pending_idx);
            }
        }
        while self.next_pending < self.pending.len()
            && self.pending[self.next_pending].depart <= self.time
        {
            let pending_idx = self.next_pending;
            self.next_pending += 1;
            let plan = self.pending[pending_idx].plan;
            if !self.try_insert(plan) {
                if !self.pending[pending_idx].attempted {
                    self.pending[pending_idx].attempted = true;
                    self.deferred += 1;
                }
                still_waiting.push(pending_idx);
            }
        }
        self.waiting = still_waiting;
    }

    /// Movement from the vehicle's current link to its next, if any.
    fn next_movement(&self, v: &Vehicle) -> Option<Movement> {
        let path = &self.paths[v.path];
        if v.leg + 1 < path.links.len() {
            Some(Movement {
                from: v.link,
                to: path.links[v.leg + 1],
            })
        } else {
            None
        }
    }

    fn movement_is_green(&self, movement: Movement, t: f64) -> bool {
        let node = self.net.links[movement.from].to;
        match self.net.signal_at(node) {
            Some(plan) => plan.is_green(movement, t),
            None => true,
        }
    }

    fn collision(&self, t: f64, link: LinkIdx, front: usize, rear: usize) -> SimError {
        SimError::Collision {
            t,
            link: self.net.links[link].id.clone(),
            front: self.vehicles[front].id,
            rear: self.vehicles[rear].id,
        }
    }

    fn compute_accels(&mut self) -> Result<(), SimError> {
        let t = self.time;
        let mut accels = vec![0.0f64; self.vehicles.len()];
        for link_idx in 0..self.net.links.len() {
            let length = self.net.links[link_idx].length;
            for lane in 0..self.lanes[link_idx].len() {
                let ids = &self.lanes[link_idx][lane];
                for (slot, &vi) in ids.iter().enumerate() {
                    let v = &self.vehicles[vi];
                    let mut accel = idm_free_accel(v.speed, &v.params);
                    if slot > 0 {
                        // In-lane leader.
                        let leader = &self.vehicles[ids[slot - 1]];
                        let gap = leader.pos - leader.params.length - v.pos;
                        let a = idm_accel(v.speed, v.speed - leader.speed, gap, &v.params)
                            .map_err(|GapFault| self.collision(t, link_idx, ids[slot - 1], vi))?;
                        accel = accel.min(a);
                    } else {
                        accel = accel.min(self.front_vehicle_accel(vi, length, t)?);
                    }
                    accels[vi] = accel;
                }
            }
        }
        for (vi, a) in accels.into_iter().enumerate() {
            self.vehicles[vi].accel = a;
        }
        Ok(())
    }

    /// Constraints on the first vehicle of a lane: red signals, the leader on
    /// the next link, and a slower next link.
    fn front_vehicle_accel(&self, vi: usize, length: f64, t: f64) -> Result<f64, SimError> {
        let v = &self.vehicles[vi];
        let mut accel = f64::INFINITY;
        let Some(movement) = self.next_movement(v) else {
            return Ok(accel); // exits freely at the end of its last link
        };
        let dist_to_end = length - v.pos;
        if !self.movement_is_green(movement, t) {
            // Virtual standing leader of zero length at the stop line.
            let a = idm_accel(v.speed, v.speed, dist_to_end.max(0.01), &v.params)
                .map_err(|GapFault| self.collision(t, v.link, vi, vi))?;
            return Ok(accel.min(a));
        }
        let next = movement.to;
        let entry_lane = self.choose_lane(next, v.fixed_lane);
        if let Some(&back) = self.lanes[next][entry_lane].last() {
            let leader = &self.vehicles[back];
            let gap = dist_to_end + leader.pos - leader.params.length;
            let a = idm_accel(v.speed, v.speed - leader.speed, gap, &v.params)
                .map_err(|GapFault| self.collision(t, v.link, back, vi))?;
            accel = accel.min(a);
        }
        // Anticipate a lower desired speed on the next link.
        let next_desired = self.desired_speed(&v.params, v.custom_params, next);
        if v.speed > next_desired {
            let needed = (next_desired * next_desired - v.speed * v.speed)
                / (2.0 * dist_to_end.max(0.1));
            accel = accel.min(needed.max(-super::MAX_DECEL));
        }
        Ok(accel)
    }

    fn integrate(&mut self) {
        let dt = self.opts.dt;
        for v in &mut self.vehicles {
            let new_speed = (v.speed + v.accel * dt).max(0.0);
            v.pos += 0.5 * (v.speed + new_speed) * dt;
            v.speed = new_speed;
        }
    }

    /// Resolve link transitions in fixed link-index order (synthetic and
    /// loaded corridors number links upstream to downstream).
    fn process_transitions(&mut self, t_new: f64) {
        for link_idx in 0..self.net.links.len() {
            let length = self.net.links[link_idx].length;
            for lane in 0..self.lanes[link_idx].len() {
                loop {
                    let Some(&front) = self.lanes[link_idx][lane].first() else {
                        break;
                    };
                    if self.vehicles[front].pos < length {
                        break;
                    }
                    if !self.advance_vehicle(front, link_idx, lane, length, t_new) {
                        break;
                    }
                }
            }
        }
    }

    /// Move a boundary-crossing vehicle onto its next link (or out of the
    /// network). Returns false if it had to be held at the stop line.
    fn advance_vehicle(
        &mut self,
        vi: usize,
        link_idx: LinkIdx,
        lane: usize,
        length: f64,
        t_new: f64,
    ) -> bool {
        let hold = |world: &mut World, vi: usize| {
            let v = &mut world.vehicles[vi];
            v.pos = length - 0.1;
            v.speed = 0.0;
        };

        let movement = self.next_movement(&self.vehicles[vi]);
        match movement {
            None => {
                // Arrival: crossing the downstream end of the last link.
                self.record_crossing(link_idx, t_new);
                let v = &self.vehicles[vi];
                let tt = t_new - v.entered_at;
                let id = v.id;
                self.travel_times.push((id, tt));
                self.arrived += 1;
                self.lanes[link_idx][lane].remove(0);
                true
            }
            Some(m) => {
                if !self.movement_is_green(m, t_new) {
                    hold(self, vi);
                    return false;
                }
                let next = m.to;
                let entry_lane = self.choose_lane(next, self.vehicles[vi].fixed_lane);
                let entry_pos = self.vehicles[vi].pos - length;
                let my_len = self.vehicles[vi].params.length;
                let my_jam = self.vehicles[vi].params.jam_gap;

                // Find the insertion slot by position and check both gaps.
                let ids = &self.lanes[next][entry_lane];
                let mut slot = ids.len();
                for (i, &other) in ids.iter().enumerate() {
                    if self.vehicles[other].pos < entry_pos {
                        slot = i;
                        break;
                    }
                }
                if slot > 0 {
                    let leader = &self.vehicles[ids[slot - 1]];
                    if leader.pos - leader.params.length - entry_pos <= 0.5 * my_jam {
                        hold(self, vi);
                        return false;
                    }
                }
                if slot < ids.len() {
                    let follower = &self.vehicles[ids[slot]];
                    if entry_pos - my_len - follower.pos <= 0.5 * my_jam {
                        hold(self, vi);
                        return false;
                    }
                }

                self.record_crossing(link_idx, t_new);
                let desired = self.desired_speed(
                    &self.vehicles[vi].params,
                    self.vehicles[vi].custom_params,
                    next,
                );
                let limit = self.net.links[next].speed_limit;
                {
                    let v = &mut self.vehicles[vi];
                    v.link = next;
                    v.leg += 1;
                    v.lane = entry_lane;
                    v.pos = entry_pos;
                    if !v.custom_params {
                        v.params.desired_speed = desired;
                    }
                    // Entry clamp: anticipation braking leaves at most a small
                    // residual overshoot relative to the new link's bound.
                    v.speed = v.speed.min(desired.max(limit));
                }
                self.lanes[link_idx][lane].remove(0);
                self.lanes[next][entry_lane].insert(slot, vi);
                true
            }
        }
    }

    fn record_crossing(&mut self, link: LinkIdx, t: f64) {
        if let Some(k) = self.grids.coarse_of_sim_time(t) {
            self.flow_counts[link][k] += 1;
        }
    }

    fn check_collisions(&self, t: f64) -> Result<(), SimError> {
        for link_idx in 0..self.net.links.len() {
            for lane in &self.lanes[link_idx] {
                for pair in lane.windows(2) {
                    let front = &self.vehicles[pair[0]];
                    let rear = &self.vehicles[pair[1]];
                    if front.pos - front.params.length - rear.pos <= 0.0 {
                        return Err(self.collision(t, link_idx, pair[0], pair[1]));
                    }
                }
            }
        }
        Ok(())
    }

    fn measure(&mut self, t_new: f64) {
        let fine = self.grids.fine_of_sim_time(t_new);
        let mut n_active: u64 = 0;
        let mut speed_sum = 0.0;

        for link_idx in 0..self.net.links.len() {
            for lane in 0..self.lanes[link_idx].len() {
                let ids = &self.lanes[link_idx][lane];
                for (slot, &vi) in ids.iter().enumerate() {
                    let v = &self.vehicles[vi];
                    n_active += 1;
                    speed_sum += v.speed;
                    if let Some(r) = fine {
                        if let Some(seg) = self.net.segment_at(link_idx, v.pos) {
                            self.seg_speed_sum[seg][r] += v.speed;
                            self.seg_speed_n[seg][r] += 1;
                        }
                        if slot > 0 {
                            let leader = &self.vehicles[ids[slot - 1]];
                            let gap = leader.pos - leader.params.length - v.pos;
                            self.gap_stats.push(gap);
                        }
                    }
                }
            }
        }

        if let Some(r) = fine {
            if n_active > 0 {
                self.net_speed_sum[r] += speed_sum;
                self.net_speed_n[r] += n_active;
            }
            self.density_sum[r] += n_active as f64 / self.lane_km;
            self.density_n[r] += 1;

            // Signal queues and ramp spillback.
            for (si, plan) in self.net.signals.iter().enumerate() {
                let mut queued = 0u32;
                for phase in &plan.phases {
                    for m in &phase.movements {
                        for &vi in self.lanes[m.from].iter().flatten() {
                            let v = &self.vehicles[vi];
                            if v.speed < self.opts.queue_speed {
                                queued += 1;
                                if v.pos <= v.params.length + v.params.jam_gap {
                                    self.spillback[m.from] = true;
                                }
                            }
                        }
                    }
                }
                self.queue_max[si] = self.queue_max[si].max(queued);
            }
        }

        if let Some(every) = self.opts.trajectory_every_s {
            let steps = t_new / every;
            if (steps - steps.round()).abs() < 1e-6 {
                for link_idx in 0..self.net.links.len() {
                    for (lane, lane_ids) in self.lanes[link_idx].iter().enumerate() {
                        for (slot, &vi) in lane_ids.iter().enumerate() {
                            let v = &self.vehicles[vi];
                            let gap = (slot > 0).then(|| {
                                let leader = &self.vehicles[lane_ids[slot - 1]];
                                leader.pos - leader.params.length - v.pos
                            });
                            self.trajectories.push(TrajectorySample {
                                t: t_new,
                                agent_id: v.id,
                                link_id: self.net.links[link_idx].id.clone(),
                                lane: lane + 1,
                                pos_m: v.pos,
                                speed_mps: v.speed,
                                gap_m: gap,
                            });
                        }
                    }
                }
            }
        }
    }

    /// Advance the world by one step. Deterministic given the current state.
    pub fn step(&mut self) -> Result<(), SimError> {
        self.process_insertions();
        self.compute_accels()?;
        self.integrate();
        let t_new = self.time + self.opts.dt;
        self.process_transitions(t_new);
        self.check_collisions(t_new)?;
        self.measure(t_new);
        self.time = t_new;
        Ok(())
    }

    fn finish(self) -> MeasurementFrame {
        let mut segment_speeds = Grid::new(self.net.segments.len(), self.grids.n_fine());
        for s in 0..self.net.segments.len() {
            for r in 0..self.grids.n_fine() {
                let n = self.seg_speed_n[s][r];
                if n > 0 {
                    segment_speeds.set(s, r, self.seg_speed_sum[s][r] / n as f64);
                }
            }
        }
        let mean_speed_per_fine = (0..self.grids.n_fine())
            .map(|r| {
                (self.net_speed_n[r] > 0).then(|| self.net_speed_sum[r] / self.net_speed_n[r] as f64)
            })
            .collect();
        let density_per_fine = (0..self.grids.n_fine())
            .map(|r| {
                if self.density_n[r] > 0 {
                    self.density_sum[r] / self.density_n[r] as f64
                } else {
                    0.0
                }
            })
            .collect();
        let in_network = self.lanes.iter().flatten().map(|l| l.len() as u64).sum();
        let never_inserted = self.waiting.len() as u64
            + (self.pending.len() - self.next_pending) as u64;
        MeasurementFrame {
            link_flows: self.flow_counts,
            segment_speeds,
            travel_times: self.travel_times,
            gap_stats: self.gap_stats,
            mean_speed_per_fine,
            density_per_fine,
            departed: self.departed,
            arrived: self.arrived,
            in_network_at_end: in_network,
            deferred: self.deferred,
            never_inserted,
            max_signal_queue: self
                .net
                .signals
                .iter()
                .zip(&self.queue_max)
                .map(|(p, &q)| (self.net.nodes[p.node].id.clone(), q))
                .collect(),
            spillback_links: self
                .net
                .links
                .iter()
                .zip(&self.spillback)
                .filter(|(_, &s)| s)
                .map(|(l, _)| l.id.clone())
                .collect(),
            trajectories: self.trajectories,
        }
    }
}

/// Simulate warm-up plus the measured horizon and extract the measurement
/// frame. Deterministic: identical inputs yield a bit-identical frame.
pub fn run(
    net: &RoadNetwork,
    paths: &[Path],
    plans: &[AgentPlan],
    grids: &TimeGrids,
    opts: SimOptions,
    seed: u64,
) -> Result<MeasurementFrame, SimError> {
    grids
        .validate()
        .map_err(|e| SimError::BadOptions(e.to_string()))?;
    let mut world = World::new(net, paths, plans, grids, opts, seed)?;
    let total = grids.total_sim_s() as f64;
    let steps = (total / opts.dt).round() as u64;
    for _ in 0..steps {
        world.step()?;
    }
    Ok(world.finish())
}
