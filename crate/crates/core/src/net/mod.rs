//! Corridor network model: links, INRIX-style segments, signals, OD pairs,
//! candidate paths, and the two observation grids (hourly flows, per-minute
//! speeds).

mod load;
mod paths;

pub use load::{
    load_network, load_observations, LinkRow, MovementRow, NetworkFile, OdRow, PhaseRow, SignalRow,
};
pub use paths::{enumerate_all_paths, enumerate_paths, incidence, incidence_matrix};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilevel::LosTable;
use crate::units::HALF_MILE_M;

pub type NodeIdx = usize;
pub type LinkIdx = usize;
pub type SegIdx = usize;
pub type PathId = usize;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("link {link}: reference to missing node {node}")]
    DanglingNode { link: String, node: String },
    #[error("link {link}: length must be > 0")]
    ZeroLengthLink { link: String },
    #[error("link {link}: lane count must be >= 1")]
    BadLaneCount { link: String },
    #[error("link {link}: speed limit must be > 0")]
    BadSpeedLimit { link: String },
    #[error("link {link}: segments overlap or leave gaps")]
    BadSegmentTiling { link: String },
    #[error("duplicate id {id}")]
    DuplicateId { id: String },
    #[error("signal at {node}: phase durations must be > 0 and sum to the cycle time")]
    BadSignalPlan { node: String },
    #[error("signal references unknown node {node}")]
    UnknownSignalNode { node: String },
    #[error("signal at {node}: movement references unknown link {link}")]
    UnknownMovementLink { node: String, link: String },
    #[error("od pair references unknown node {node}")]
    UnknownOdNode { node: String },
    #[error("od pair {origin} -> {destination}: origin equals destination")]
    DegenerateOd { origin: String, destination: String },
    #[error("no path from {origin} to {destination}")]
    NoPath { origin: String, destination: String },
    #[error("unknown link id {id}")]
    UnknownLink { id: String },
    #[error("unknown segment id {id}")]
    UnknownSegment { id: String },
    #[error("link {link} interval {interval}: negative count")]
    NegativeCount { link: String, interval: String },
    #[error("segment {segment} interval {interval}: speed must be > 0")]
    BadSpeed { segment: String, interval: String },
    #[error("{file} line {line}: {msg}")]
    BadRow {
        file: String,
        line: u64,
        msg: String,
    },
    #[error("time grids: {0}")]
    BadGrids(String),
    #[error("path {path}: links {a} and {b} are not consecutive")]
    BrokenPath { path: PathId, a: String, b: String },
    #[error("path {path}: revisits node {node}")]
    CyclicPath { path: PathId, node: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Freeway,
    Ramp,
    Arterial,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone)]
pub struct Link {
    pub id: String,
    pub from: NodeIdx,
    pub to: NodeIdx,
    /// Length in meters.
    pub length: f64,
    pub lanes: usize,
    /// Speed limit in m/s.
    pub speed_limit: f64,
    pub kind: LinkKind,
}

impl Link {
    pub fn free_flow_time(&self) -> f64 {
        self.length / self.speed_limit
    }
}

/// A half-mile-style measurement segment tiled onto a freeway link.
#[derive(Debug, Clone)]
pub struct Segment {
    pub id: String,
    pub link: LinkIdx,
    /// Offset of the segment start from the link start, meters.
    pub start: f64,
    /// Offset of the segment end, meters.
    pub end: f64,
}

impl Segment {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// A signalized movement: traffic leaving `from` for `to` across the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Movement {
    pub from: LinkIdx,
    pub to: LinkIdx,
}

#[derive(Debug, Clone)]
pub struct Phase {
    pub movements: Vec<Movement>,
    /// Green duration in seconds.
    pub green: f64,
}

/// Fixed-time signal plan. The cycle starts at simulation clock zero.
#[derive(Debug, Clone)]
pub struct SignalPlan {
    pub node: NodeIdx,
    pub cycle: f64,
    pub phases: Vec<Phase>,
}

impl SignalPlan {
    /// Whether `movement` has green at time `t`. Movements that appear in no
    /// phase of this plan are not governed by it and are always allowed.
    pub fn is_green(&self, movement: Movement, t: f64) -> bool {
        let governed = self
            .phases
            .iter()
            .any(|p| p.movements.contains(&movement));
        if !governed {
            return true;
        }
        let mut pos = t.rem_euclid(self.cycle);
        for phase in &self.phases {
            if pos < phase.green {
                return phase.movements.contains(&movement);
            }
            pos -= phase.green;
        }
        // Numerical edge at the cycle boundary.
        self.phases
            .last()
            .map(|p| p.movements.contains(&movement))
            .unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OdPair {
    pub origin: NodeIdx,
    pub destination: NodeIdx,
}

/// An acyclic route: an ordered list of consecutive links.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub id: PathId,
    pub od: usize,
    pub links: Vec<LinkIdx>,
}

/// The two measurement grids plus the simulation warm-up.
///
/// Flow observations live on the coarse grid (`coarse_s`, hourly by default),
/// speed observations on the fine grid (`fine_s`, per minute by default).
/// The warm-up precedes the measured horizon and is excluded from every
/// measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrids {
    /// Horizon start, seconds of clock time (e.g. 6:30 am = 23400).
    pub start_s: u64,
    /// Horizon end, seconds of clock time.
    pub end_s: u64,
    /// Coarse (flow) interval duration, seconds.
    pub coarse_s: u64,
    /// Fine (speed) interval duration, seconds.
    pub fine_s: u64,
    /// Warm-up duration, seconds.
    pub warmup_s: u64,
}

impl Default for TimeGrids {
    fn default() -> Self {
        TimeGrids {
            start_s: 6 * 3600 + 1800,
            end_s: 8 * 3600 + 1800,
            coarse_s: 3600,
            fine_s: 60,
            warmup_s: 1200,
        }
    }
}

impl TimeGrids {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.end_s <= self.start_s {
            return Err(NetError::BadGrids("horizon end must be after start".into()));
        }
        if self.fine_s == 0 || self.coarse_s == 0 {
            return Err(NetError::BadGrids("interval durations must be > 0".into()));
        }
        if self.fine_s >= self.coarse_s {
            return Err(NetError::BadGrids(
                "fine interval must be shorter than coarse interval".into(),
            ));
        }
        if self.coarse_s % self.fine_s != 0 {
            return Err(NetError::BadGrids(
                "coarse duration must be a multiple of the fine duration".into(),
            ));
        }
        let h = self.horizon_s();
        if h % self.coarse_s != 0 || h % self.fine_s != 0 {
            return Err(NetError::BadGrids(
                "horizon must be divisible by both interval durations".into(),
            ));
        }
        Ok(())
    }

    pub fn horizon_s(&self) -> u64 {
        self.end_s - self.start_s
    }

    pub fn n_coarse(&self) -> usize {
        (self.horizon_s() / self.coarse_s) as usize
    }

    pub fn n_fine(&self) -> usize {
        (self.horizon_s() / self.fine_s) as usize
    }

    pub fn fine_per_coarse(&self) -> usize {
        (self.coarse_s / self.fine_s) as usize
    }

    /// The coarse interval containing fine interval `r`.
    pub fn coarse_of_fine(&self, r: usize) -> usize {
        r / self.fine_per_coarse()
    }

    /// Total simulated duration including warm-up, seconds.
    pub fn total_sim_s(&self) -> u64 {
        self.warmup_s + self.horizon_s()
    }

    /// Map a simulation time (0 = warm-up start) to a fine interval, if it
    /// falls inside the measured horizon.
    pub fn fine_of_sim_time(&self, t: f64) -> Option<usize> {
        let rel = t - self.warmup_s as f64;
        if rel < 0.0 || rel >= self.horizon_s() as f64 {
            return None;
        }
        Some((rel / self.fine_s as f64) as usize)
    }

    /// Map a simulation time to a coarse interval, if measured.
    pub fn coarse_of_sim_time(&self, t: f64) -> Option<usize> {
        let rel = t - self.warmup_s as f64;
        if rel < 0.0 || rel >= self.horizon_s() as f64 {
            return None;
        }
        Some((rel / self.coarse_s as f64) as usize)
    }
}

/// Dense row-major grid with missing cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<Option<f64>>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Grid {
            rows,
            cols,
            data: vec![None; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = Some(value);
    }

    pub fn clear(&mut self, row: usize, col: usize) {
        self.data[row * self.cols + col] = None;
    }

    /// All present cells as (row, col, value).
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.data.iter().enumerate().filter_map(move |(i, v)| {
            v.map(|value| (i / self.cols, i % self.cols, value))
        })
    }

    pub fn n_present(&self) -> usize {
        self.data.iter().filter(|v| v.is_some()).count()
    }
}

/// Calibration targets: link-flow counts on the coarse grid and segment
/// speeds (stored in m/s) on the fine grid, plus the LOS lookup used by the
/// bi-level feedback. Missing cells are excluded from every objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    /// Vehicles per coarse interval, indexed `[link][k]`.
    pub flow_targets: Grid,
    /// Mean speeds in m/s, indexed `[segment][r]`.
    pub speed_targets: Grid,
    pub los: LosTable,
}

impl ObservationSet {
    pub fn empty(network: &RoadNetwork, grids: &TimeGrids) -> Self {
        ObservationSet {
            flow_targets: Grid::new(network.links.len(), grids.n_coarse()),
            speed_targets: Grid::new(network.segments.len(), grids.n_fine()),
            los: LosTable::default(),
        }
    }
}

/// The corridor network. Immutable after construction; loaders validate every
/// cross-reference and tile measurement segments onto freeway links.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    pub segments: Vec<Segment>,
    pub signals: Vec<SignalPlan>,
    pub od_pairs: Vec<OdPair>,
    node_ids: HashMap<String, NodeIdx>,
    link_ids: HashMap<String, LinkIdx>,
    segment_ids: HashMap<String, SegIdx>,
    out_links: Vec<Vec<LinkIdx>>,
    segments_of_link: Vec<Vec<SegIdx>>,
    signal_at_node: Vec<Option<usize>>,
}

impl RoadNetwork {
    /// Build and validate a network from already-resolved parts. `signals`
    /// and `od_pairs` reference nodes/links by id; errors name the offender.
    pub fn build(
        nodes: Vec<Node>,
        links: Vec<(String, String, String, f64, usize, f64, LinkKind)>,
        signals: Vec<(String, f64, Vec<(Vec<(String, String)>, f64)>)>,
        od_pairs: Vec<(String, String)>,
        segment_nominal_m: f64,
    ) -> Result<Self, NetError> {
        let mut node_ids = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if node_ids.insert(n.id.clone(), i).is_some() {
                return Err(NetError::DuplicateId { id: n.id.clone() });
            }
        }

        let mut link_ids = HashMap::new();
        let mut resolved = Vec::with_capacity(links.len());
        for (id, from, to, length, lanes, speed_limit, kind) in links {
            let from = *node_ids.get(&from).ok_or_else(|| NetError::DanglingNode {
                link: id.clone(),
                node: from.clone(),
            })?;
            let to = *node_ids.get(&to).ok_or_else(|| NetError::DanglingNode {
                link: id.clone(),
                node: to.clone(),
            })?;
            if !(length > 0.0) {
                return Err(NetError::ZeroLengthLink { link: id });
            }
            if lanes < 1 {
                return Err(NetError::BadLaneCount { link: id });
            }
            if !(speed_limit > 0.0) {
                return Err(NetError::BadSpeedLimit { link: id });
            }
            if link_ids.insert(id.clone(), resolved.len()).is_some() {
                return Err(NetError::DuplicateId { id });
            }
            resolved.push(Link {
                id,
                from,
                to,
                length,
                lanes,
                speed_limit,
                kind,
            });
        }

        let mut plans = Vec::with_capacity(signals.len());
        for (node, cycle, phases) in signals {
            let node_idx = *node_ids
                .get(&node)
                .ok_or_else(|| NetError::UnknownSignalNode { node: node.clone() })?;
            let mut resolved_phases = Vec::with_capacity(phases.len());
            let mut total = 0.0;
            for (movements, green) in phases {
                if !(green > 0.0) {
                    return Err(NetError::BadSignalPlan { node });
                }
                total += green;
                let mut ms = Vec::with_capacity(movements.len());
                for (from, to) in movements {
                    let from =
                        *link_ids
                            .get(&from)
                            .ok_or_else(|| NetError::UnknownMovementLink {
                                node: node.clone(),
                                link: from.clone(),
                            })?;
                    let to = *link_ids
                        .get(&to)
                        .ok_or_else(|| NetError::UnknownMovementLink {
                            node: node.clone(),
                            link: to.clone(),
                        })?;
                    ms.push(Movement { from, to });
                }
                resolved_phases.push(Phase {
                    movements: ms,
                    green,
                });
            }
            if (total - cycle).abs() > 1e-9 {
                return Err(NetError::BadSignalPlan { node });
            }
            plans.push(SignalPlan {
                node: node_idx,
                cycle,
                phases: resolved_phases,
            });
        }

        let mut ods = Vec::with_capacity(od_pairs.len());
        for (origin, destination) in od_pairs {
            let o = *node_ids.get(&origin).ok_or_else(|| NetError::UnknownOdNode {
                node: origin.clone(),
            })?;
            let d = *node_ids
                .get(&destination)
                .ok_or_else(|| NetError::UnknownOdNode {
                    node: destination.clone(),
                })?;
            if o == d {
                return Err(NetError::DegenerateOd {
                    origin,
                    destination,
                });
            }
            ods.push(OdPair {
                origin: o,
                destination: d,
            });
        }

        // Tile measurement segments onto freeway links: whole nominal tiles
        // plus a shorter terminal segment.
        let mut segments = Vec::new();
        let mut segment_ids = HashMap::new();
        let mut segments_of_link = vec![Vec::new(); resolved.len()];
        for (li, link) in resolved.iter().enumerate() {
            if link.kind != LinkKind::Freeway {
                continue;
            }
            let mut start = 0.0;
            let mut n = 0;
            while start < link.length - 1e-9 {
                let end = (start + segment_nominal_m).min(link.length);
                let id = format!("{}#{}", link.id, n);
                segment_ids.insert(id.clone(), segments.len());
                segments_of_link[li].push(segments.len());
                segments.push(Segment {
                    id,
                    link: li,
                    start,
                    end,
                });
                start = end;
                n += 1;
            }
        }

        let mut out_links = vec![Vec::new(); nodes.len()];
        for (i, link) in resolved.iter().enumerate() {
            out_links[link.from].push(i);
        }

        let mut signal_at_node = vec![None; nodes.len()];
        for (i, plan) in plans.iter().enumerate() {
            signal_at_node[plan.node] = Some(i);
        }

        let net = RoadNetwork {
            nodes,
            links: resolved,
            segments,
            signals: plans,
            od_pairs: ods,
            node_ids,
            link_ids,
            segment_ids,
            out_links,
            segments_of_link,
            signal_at_node,
        };
        net.check_segment_tiling()?;
        Ok(net)
    }

    /// Default nominal segment length: half a mile.
    pub fn default_segment_length() -> f64 {
        HALF_MILE_M
    }

    fn check_segment_tiling(&self) -> Result<(), NetError> {
        for (li, link) in self.links.iter().enumerate() {
            let segs = &self.segments_of_link[li];
            if link.kind != LinkKind::Freeway {
                continue;
            }
            let mut cursor = 0.0;
            for &si in segs {
                let s = &self.segments[si];
                if (s.start - cursor).abs() > 1e-9 || s.end <= s.start {
                    return Err(NetError::BadSegmentTiling {
                        link: link.id.clone(),
                    });
                }
                cursor = s.end;
            }
            if (cursor - link.length).abs() > 1e-9 {
                return Err(NetError::BadSegmentTiling {
                    link: link.id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn node_idx(&self, id: &str) -> Option<NodeIdx> {
        self.node_ids.get(id).copied()
    }

    pub fn link_idx(&self, id: &str) -> Option<LinkIdx> {
        self.link_ids.get(id).copied()
    }

    pub fn segment_idx(&self, id: &str) -> Option<SegIdx> {
        self.segment_ids.get(id).copied()
    }

    pub fn out_links(&self, node: NodeIdx) -> &[LinkIdx] {
        &self.out_links[node]
    }

    pub fn segments_of_link(&self, link: LinkIdx) -> &[SegIdx] {
        &self.segments_of_link[link]
    }

    /// The segment covering position `pos` on `link`, if the link is tiled.
    pub fn segment_at(&self, link: LinkIdx, pos: f64) -> Option<SegIdx> {
        let segs = &self.segments_of_link[link];
        if segs.is_empty() {
            return None;
        }
        // Segments tile the link uniformly except for the terminal one.
        for &si in segs {
            let s = &self.segments[si];
            if pos < s.end || si == *segs.last().unwrap() {
                if pos >= s.start {
                    return Some(si);
                }
            }
        }
        None
    }

    pub fn signal_at(&self, node: NodeIdx) -> Option<&SignalPlan> {
        self.signal_at_node[node].map(|i| &self.signals[i])
    }

    /// Validate one path against the network: consecutive links must share a
    /// node and no node may repeat.
    pub fn validate_path(&self, path: &Path) -> Result<(), NetError> {
        if path.links.is_empty() {
            return Err(NetError::BrokenPath {
                path: path.id,
                a: "<empty>".into(),
                b: "<empty>".into(),
            });
        }
        let mut seen = vec![self.links[path.links[0]].from];
        for w in path.links.windows(2) {
            let (a, b) = (&self.links[w[0]], &self.links[w[1]]);
            if a.to != b.from {
                return Err(NetError::BrokenPath {
                    path: path.id,
                    a: a.id.clone(),
                    b: b.id.clone(),
                });
            }
        }
        for &l in &path.links {
            let to = self.links[l].to;
            if seen.contains(&to) {
                return Err(NetError::CyclicPath {
                    path: path.id,
                    node: self.nodes[to].id.clone(),
                });
            }
            seen.push(to);
        }
        Ok(())
    }

    /// Free-flow travel time of a path, seconds.
    pub fn path_free_flow_time(&self, links: &[LinkIdx]) -> f64 {
        links.iter().map(|&l| self.links[l].free_flow_time()).sum()
    }

    /// Total lane-kilometers over all links.
    pub fn lane_km(&self) -> f64 {
        self.links
            .iter()
            .map(|l| l.length * l.lanes as f64 / 1000.0)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::line_network;

    #[test]
    fn grids_validate_defaults() {
        let g = TimeGrids::default();
        g.validate().unwrap();
        assert_eq!(g.n_coarse(), 2);
        assert_eq!(g.n_fine(), 120);
        assert_eq!(g.fine_per_coarse(), 60);
        assert_eq!(g.coarse_of_fine(59), 0);
        assert_eq!(g.coarse_of_fine(60), 1);
    }

    #[test]
    fn grids_reject_bad_durations() {
        let mut g = TimeGrids::default();
        g.fine_s = 3600;
        assert!(g.validate().is_err());
        let mut g = TimeGrids::default();
        g.end_s = g.start_s + 5400; // not divisible by 3600
        assert!(g.validate().is_err());
    }

    #[test]
    fn fine_interval_mapping_excludes_warmup() {
        let g = TimeGrids::default();
        assert_eq!(g.fine_of_sim_time(0.0), None);
        assert_eq!(g.fine_of_sim_time(1199.9), None);
        assert_eq!(g.fine_of_sim_time(1200.0), Some(0));
        assert_eq!(g.fine_of_sim_time(1200.0 + 59.9), Some(0));
        assert_eq!(g.fine_of_sim_time(1200.0 + 60.0), Some(1));
        assert_eq!(g.fine_of_sim_time(1200.0 + 7200.0), None);
    }

    #[test]
    fn segment_tiling_covers_links() {
        // 2000 m at half-mile tiling: 804.672, 804.672, 390.656.
        let net = line_network(&[2000.0], 2, 29.06);
        let segs = net.segments_of_link(0);
        assert_eq!(segs.len(), 3);
        assert!((net.segments[segs[0]].length() - HALF_MILE_M).abs() < 1e-9);
        assert!((net.segments[segs[2]].end - 2000.0).abs() < 1e-9);
        // Union equals [0, length] without overlap is checked at build time;
        // segment_at resolves interior positions.
        assert_eq!(net.segment_at(0, 0.0), Some(segs[0]));
        assert_eq!(net.segment_at(0, 804.7), Some(segs[1]));
        assert_eq!(net.segment_at(0, 1999.9), Some(segs[2]));
    }

    #[test]
    fn signal_green_windows() {
        let plan = SignalPlan {
            node: 0,
            cycle: 60.0,
            phases: vec![
                Phase {
                    movements: vec![Movement { from: 0, to: 1 }],
                    green: 20.0,
                },
                Phase {
                    movements: vec![Movement { from: 2, to: 3 }],
                    green: 40.0,
                },
            ],
        };
        let m = Movement { from: 0, to: 1 };
        assert!(plan.is_green(m, 0.0));
        assert!(plan.is_green(m, 19.9));
        assert!(!plan.is_green(m, 20.0));
        assert!(!plan.is_green(m, 59.9));
        assert!(plan.is_green(m, 60.0));
        // Ungoverned movements pass freely.
        assert!(plan.is_green(Movement { from: 5, to: 6 }, 30.0));
    }
}
