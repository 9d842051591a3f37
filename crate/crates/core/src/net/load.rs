//! File ingestion: JSON network files and CSV observation files.

use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use super::{LinkKind, NetError, Node, ObservationSet, RoadNetwork, TimeGrids};
use crate::bilevel::{LosGrade, LosRow, LosTable};
use crate::units::mph_to_mps;

/// On-disk network schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkFile {
    pub nodes: Vec<Node>,
    pub links: Vec<LinkRow>,
    #[serde(default)]
    pub signals: Vec<SignalRow>,
    #[serde(default)]
    pub od_pairs: Vec<OdRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkRow {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub lanes: usize,
    pub speed_limit_mps: f64,
    pub kind: LinkKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalRow {
    pub node: String,
    pub cycle_s: f64,
    pub phases: Vec<PhaseRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseRow {
    pub movements: Vec<MovementRow>,
    pub green_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MovementRow {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdRow {
    pub origin: String,
    pub destination: String,
}

impl NetworkFile {
    pub fn into_network(self) -> Result<RoadNetwork, NetError> {
        self.into_network_with_segments(RoadNetwork::default_segment_length())
    }

    pub fn into_network_with_segments(self, nominal_m: f64) -> Result<RoadNetwork, NetError> {
        let links = self
            .links
            .into_iter()
            .map(|l| {
                (
                    l.id,
                    l.from,
                    l.to,
                    l.length_m,
                    l.lanes,
                    l.speed_limit_mps,
                    l.kind,
                )
            })
            .collect();
        let signals = self
            .signals
            .into_iter()
            .map(|s| {
                (
                    s.node,
                    s.cycle_s,
                    s.phases
                        .into_iter()
                        .map(|p| {
                            (
                                p.movements.into_iter().map(|m| (m.from, m.to)).collect(),
                                p.green_s,
                            )
                        })
                        .collect(),
                )
            })
            .collect();
        let ods = self
            .od_pairs
            .into_iter()
            .map(|od| (od.origin, od.destination))
            .collect();
        RoadNetwork::build(self.nodes, links, signals, ods, nominal_m)
    }
}

/// Load and validate a network JSON file.
pub fn load_network(path: &FsPath) -> Result<RoadNetwork, NetError> {
    let text = std::fs::read_to_string(path)?;
    let file: NetworkFile = serde_json::from_str(&text)?;
    file.into_network()
}

#[derive(Debug, Deserialize)]
struct FlowCsvRow {
    link_id: String,
    interval_k: i64,
    count: f64,
}

#[derive(Debug, Deserialize)]
struct SpeedCsvRow {
    segment_id: String,
    interval_r: i64,
    speed_mph: f64,
}

#[derive(Debug, Deserialize)]
struct LosCsvRow {
    kind: LinkKind,
    los_grade: LosGrade,
    min_speed_mph: f64,
    max_flow_vph_per_lane: f64,
}

/// Load flow, speed, and LOS targets. Speeds are converted to m/s here;
/// cells absent from the files stay missing and are excluded from objectives.
pub fn load_observations(
    flow_csv: &FsPath,
    speed_csv: &FsPath,
    los_csv: &FsPath,
    network: &RoadNetwork,
    grids: &TimeGrids,
) -> Result<ObservationSet, NetError> {
    let mut obs = ObservationSet::empty(network, grids);

    let mut rdr = csv::Reader::from_path(flow_csv)?;
    for (line, rec) in rdr.deserialize().enumerate() {
        let row: FlowCsvRow = rec?;
        let link = network
            .link_idx(&row.link_id)
            .ok_or_else(|| NetError::UnknownLink {
                id: row.link_id.clone(),
            })?;
        if row.interval_k < 0 || row.interval_k as usize >= grids.n_coarse() {
            return Err(NetError::BadRow {
                file: flow_csv.display().to_string(),
                line: line as u64 + 2,
                msg: format!("interval_k {} outside horizon", row.interval_k),
            });
        }
        if row.count < 0.0 {
            return Err(NetError::NegativeCount {
                link: row.link_id,
                interval: row.interval_k.to_string(),
            });
        }
        obs.flow_targets.set(link, row.interval_k as usize, row.count);
    }

    let mut rdr = csv::Reader::from_path(speed_csv)?;
    for (line, rec) in rdr.deserialize().enumerate() {
        let row: SpeedCsvRow = rec?;
        let seg = network
            .segment_idx(&row.segment_id)
            .ok_or_else(|| NetError::UnknownSegment {
                id: row.segment_id.clone(),
            })?;
        if row.interval_r < 0 || row.interval_r as usize >= grids.n_fine() {
            return Err(NetError::BadRow {
                file: speed_csv.display().to_string(),
                line: line as u64 + 2,
                msg: format!("interval_r {} outside horizon", row.interval_r),
            });
        }
        if !(row.speed_mph > 0.0) {
            return Err(NetError::BadSpeed {
                segment: row.segment_id,
                interval: row.interval_r.to_string(),
            });
        }
        obs.speed_targets
            .set(seg, row.interval_r as usize, mph_to_mps(row.speed_mph));
    }

    let mut rows = Vec::new();
    let mut rdr = csv::Reader::from_path(los_csv)?;
    for rec in rdr.deserialize() {
        let row: LosCsvRow = rec?;
        rows.push(LosRow {
            kind: row.kind,
            grade: row.los_grade,
            min_speed: mph_to_mps(row.min_speed_mph),
            max_flow_vph_per_lane: row.max_flow_vph_per_lane,
        });
    }
    obs.los = LosTable::new(rows).map_err(NetError::BadGrids)?;

    Ok(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        p
    }

    const THREE_LINK_LINE: &str = r#"{
        "nodes": [
            {"id": "n0", "x": 0, "y": 0},
            {"id": "n1", "x": 500, "y": 0},
            {"id": "n2", "x": 1000, "y": 0},
            {"id": "n3", "x": 1500, "y": 0}
        ],
        "links": [
            {"id": "e1", "from": "n0", "to": "n1", "length_m": 500, "lanes": 2, "speed_limit_mps": 29.06, "kind": "freeway"},
            {"id": "e2", "from": "n1", "to": "n2", "length_m": 500, "lanes": 2, "speed_limit_mps": 29.06, "kind": "freeway"},
            {"id": "e3", "from": "n2", "to": "n3", "length_m": 500, "lanes": 2, "speed_limit_mps": 29.06, "kind": "freeway"}
        ],
        "od_pairs": [{"origin": "n0", "destination": "n3"}]
    }"#;

    #[test]
    fn loads_three_link_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_temp(&dir, "net.json", THREE_LINK_LINE);
        let net = load_network(&p).unwrap();
        assert_eq!(net.nodes.len(), 4);
        assert_eq!(net.links.len(), 3);
        assert_eq!(net.od_pairs.len(), 1);
        // 500 m links get a single short segment each.
        assert_eq!(net.segments.len(), 3);
    }

    #[test]
    fn dangling_node_reference_names_link() {
        let dir = tempfile::tempdir().unwrap();
        let bad = THREE_LINK_LINE.replace("\"to\": \"n3\"", "\"to\": \"n9\"");
        let p = write_temp(&dir, "net.json", &bad);
        let err = load_network(&p).unwrap_err();
        match err {
            NetError::DanglingNode { link, node } => {
                assert_eq!(link, "e3");
                assert_eq!(node, "n9");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn observation_ingestion_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_temp(&dir, "net.json", THREE_LINK_LINE);
        let net = load_network(&p).unwrap();
        let grids = TimeGrids::default();

        let flows = write_temp(&dir, "flows.csv", "link_id,interval_k,count\ne1,0,355\n");
        let speeds = write_temp(
            &dir,
            "speeds.csv",
            "segment_id,interval_r,speed_mph\ne1#0,0,60\n",
        );
        let los = write_temp(
            &dir,
            "los.csv",
            "kind,los_grade,min_speed_mph,max_flow_vph_per_lane\nfreeway,A,60,700\nfreeway,F,0,2400\n",
        );
        let obs = load_observations(&flows, &speeds, &los, &net, &grids).unwrap();
        assert_eq!(obs.flow_targets.get(0, 0), Some(355.0));
        let v = obs.speed_targets.get(0, 0).unwrap();
        assert!((v - mph_to_mps(60.0)).abs() < 1e-12);
        assert_eq!(obs.flow_targets.get(1, 0), None);

        // Unknown segment id is rejected by name.
        let bad_speeds = write_temp(
            &dir,
            "bad_speeds.csv",
            "segment_id,interval_r,speed_mph\nnope#0,0,60\n",
        );
        match load_observations(&flows, &bad_speeds, &los, &net, &grids).unwrap_err() {
            NetError::UnknownSegment { id } => assert_eq!(id, "nope#0"),
            other => panic!("unexpected error {other}"),
        }

        // Negative counts are rejected.
        let bad_flows = write_temp(&dir, "bad_flows.csv", "link_id,interval_k,count\ne1,0,-3\n");
        assert!(matches!(
            load_observations(&bad_flows, &speeds, &los, &net, &grids).unwrap_err(),
            NetError::NegativeCount { .. }
        ));

        // An empty speed file leaves all cells missing.
        let empty = write_temp(&dir, "empty.csv", "segment_id,interval_r,speed_mph\n");
        let obs = load_observations(&flows, &empty, &los, &net, &grids).unwrap();
        assert_eq!(obs.speed_targets.n_present(), 0);
    }
}
