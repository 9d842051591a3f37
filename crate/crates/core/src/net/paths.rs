//! Candidate-path enumeration and link-path incidence.

use std::collections::{BinaryHeap, HashSet};

use super::{LinkIdx, NetError, NodeIdx, OdPair, Path, RoadNetwork};

/// Link-path incidence: 1 iff `link` is part of `path`.
pub fn incidence(path: &Path, link: LinkIdx) -> u8 {
    u8::from(path.links.contains(&link))
}

/// Dense incidence matrix indexed `[link][path]`.
pub fn incidence_matrix(network: &RoadNetwork, paths: &[Path]) -> Vec<Vec<u8>> {
    let mut m = vec![vec![0u8; paths.len()]; network.links.len()];
    for (j, p) in paths.iter().enumerate() {
        for &l in &p.links {
            m[l][j] = 1;
        }
    }
    m
}

#[derive(PartialEq)]
struct HeapEntry {
    cost: f64,
    node: NodeIdx,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap on cost, ties broken by node index for determinism.
        other
            .cost
            .total_cmp(&self.cost)
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra by free-flow time with removable links/nodes. Returns the link
/// sequence of one shortest path, or None if unreachable.
fn shortest_path(
    net: &RoadNetwork,
    from: NodeIdx,
    to: NodeIdx,
    banned_links: &HashSet<LinkIdx>,
    banned_nodes: &HashSet<NodeIdx>,
) -> Option<Vec<LinkIdx>> {
    let n = net.nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev: Vec<Option<LinkIdx>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[from] = 0.0;
    heap.push(HeapEntry {
        cost: 0.0,
        node: from,
    });
    while let Some(HeapEntry { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        if node == to {
            break;
        }
        for &li in net.out_links(node) {
            if banned_links.contains(&li) {
                continue;
            }
            let link = &net.links[li];
            if banned_nodes.contains(&link.to) {
                continue;
            }
            let next = cost + link.free_flow_time();
            if next < dist[link.to] - 1e-12 {
                dist[link.to] = next;
                prev[link.to] = Some(li);
                heap.push(HeapEntry {
                    cost: next,
                    node: link.to,
                });
            }
        }
    }
    if dist[to].is_infinite() {
        return None;
    }
    let mut links = Vec::new();
    let mut node = to;
    while node != from {
        let li = prev[node]?;
        links.push(li);
        node = net.links[li].from;
    }
    links.reverse();
    Some(links)
}

/// Up to `max_paths` loop-free shortest paths by free-flow time (Yen),
/// ascending, equal costs ordered by the lexicographic link-id sequence.
pub fn enumerate_paths(
    net: &RoadNetwork,
    od: OdPair,
    max_paths: usize,
) -> Result<Vec<Path>, NetError> {
    if od.origin == od.destination {
        return Err(NetError::DegenerateOd {
            origin: net.nodes[od.origin].id.clone(),
            destination: net.nodes[od.destination].id.clone(),
        });
    }
    let od_index = net
        .od_pairs
        .iter()
        .position(|p| *p == od)
        .unwrap_or(usize::MAX);

    let key = |links: &[LinkIdx]| -> (u64, Vec<String>) {
        let cost = net.path_free_flow_time(links);
        (cost.to_bits(), links.iter().map(|&l| net.links[l].id.clone()).collect())
    };

    let first = shortest_path(net, od.origin, od.destination, &HashSet::new(), &HashSet::new())
        .ok_or_else(|| NetError::NoPath {
            origin: net.nodes[od.origin].id.clone(),
            destination: net.nodes[od.destination].id.clone(),
        })?;

    let mut accepted: Vec<Vec<LinkIdx>> = vec![first];
    // Candidates sorted by (cost, lexicographic id sequence).
    let mut candidates: Vec<Vec<LinkIdx>> = Vec::new();

    while accepted.len() < max_paths {
        let last = accepted.last().unwrap().clone();
        // Spur from every node of the last accepted path.
        for spur_idx in 0..last.len() {
            let root = &last[..spur_idx];
            let spur_node = if spur_idx == 0 {
                od.origin
            } else {
                net.links[last[spur_idx - 1]].to
            };
            let mut banned_links = HashSet::new();
            for p in accepted.iter().chain(candidates.iter()) {
                if p.len() > spur_idx && p[..spur_idx] == *root {
                    banned_links.insert(p[spur_idx]);
                }
            }
            // Nodes on the root path (excluding the spur node) stay banned to
            // keep paths loop-free.
            let mut banned_nodes = HashSet::new();
            if spur_idx > 0 {
                banned_nodes.insert(od.origin);
            }
            for &li in &root[..root.len().saturating_sub(0)] {
                let to = net.links[li].to;
                if to != spur_node {
                    banned_nodes.insert(to);
                }
            }
            if let Some(spur) =
                shortest_path(net, spur_node, od.destination, &banned_links, &banned_nodes)
            {
                let mut full = root.to_vec();
                full.extend(spur);
                if !accepted.contains(&full) && !candidates.contains(&full) {
                    candidates.push(full);
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| key(a).cmp(&key(b)));
        accepted.push(candidates.remove(0));
    }

    accepted.sort_by(|a, b| key(a).cmp(&key(b)));
    Ok(accepted
        .into_iter()
        .enumerate()
        .map(|(i, links)| Path {
            id: i,
            od: od_index,
            links,
        })
        .collect())
}

/// Enumerate paths for every OD pair of the network, numbering path ids
/// consecutively in OD order.
pub fn enumerate_all_paths(net: &RoadNetwork, max_paths: usize) -> Result<Vec<Path>, NetError> {
    let mut all = Vec::new();
    for (oi, od) in net.od_pairs.iter().enumerate() {
        let mut paths = enumerate_paths(net, *od, max_paths)?;
        for p in &mut paths {
            p.id = all.len();
            p.od = oi;
            all.push(p.clone());
        }
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LinkKind, Node, RoadNetwork};

    /// Diamond: n0 -> n1 via upper (u1,u2) or lower (d1,d2), then n1 -> n2.
    fn diamond(upper_len: f64, lower_len: f64) -> RoadNetwork {
        let nodes = ["n0", "na", "nb", "n1", "n2"]
            .iter()
            .map(|id| Node {
                id: id.to_string(),
                x: 0.0,
                y: 0.0,
            })
            .collect();
        let mk = |id: &str, from: &str, to: &str, len: f64| {
            (
                id.to_string(),
                from.to_string(),
                to.to_string(),
                len,
                1,
                20.0,
                LinkKind::Freeway,
            )
        };
        RoadNetwork::build(
            nodes,
            vec![
                mk("u1", "n0", "na", upper_len),
                mk("u2", "na", "n1", upper_len),
                mk("d1", "n0", "nb", lower_len),
                mk("d2", "nb", "n1", lower_len),
                mk("e", "n1", "n2", 500.0),
            ],
            vec![],
            vec![("n0".into(), "n2".into())],
            RoadNetwork::default_segment_length(),
        )
        .unwrap()
    }

    #[test]
    fn single_route_corridor_yields_one_path() {
        let net = crate::synth::line_network(&[500.0, 500.0, 500.0], 2, 29.06);
        let paths = enumerate_paths(&net, net.od_pairs[0], 3).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].links, vec![0, 1, 2]);
    }

    #[test]
    fn diamond_enumerates_both_routes_shorter_first() {
        let net = diamond(400.0, 300.0);
        let paths = enumerate_paths(&net, net.od_pairs[0], 3).unwrap();
        assert_eq!(paths.len(), 2);
        // Lower route (d1,d2) is shorter, so it comes first.
        let ids: Vec<&str> = paths[0].links.iter().map(|&l| net.links[l].id.as_str()).collect();
        assert_eq!(ids, ["d1", "d2", "e"]);
        let ids: Vec<&str> = paths[1].links.iter().map(|&l| net.links[l].id.as_str()).collect();
        assert_eq!(ids, ["u1", "u2", "e"]);
        for p in &paths {
            net.validate_path(p).unwrap();
        }
    }

    #[test]
    fn equal_cost_ties_break_lexicographically() {
        let net = diamond(350.0, 350.0);
        let paths = enumerate_paths(&net, net.od_pairs[0], 3).unwrap();
        assert_eq!(paths.len(), 2);
        let ids: Vec<&str> = paths[0].links.iter().map(|&l| net.links[l].id.as_str()).collect();
        assert_eq!(ids, ["d1", "d2", "e"]);
    }

    #[test]
    fn degenerate_od_rejected() {
        let net = diamond(400.0, 300.0);
        let od = OdPair {
            origin: 0,
            destination: 0,
        };
        assert!(matches!(
            enumerate_paths(&net, od, 3),
            Err(NetError::DegenerateOd { .. })
        ));
    }

    #[test]
    fn unreachable_od_is_an_error() {
        let net = diamond(400.0, 300.0);
        let od = OdPair {
            origin: 4, // n2 has no outgoing links
            destination: 0,
        };
        assert!(matches!(
            enumerate_paths(&net, od, 3),
            Err(NetError::NoPath { .. })
        ));
    }

    #[test]
    fn incidence_matches_membership() {
        let net = diamond(400.0, 300.0);
        let paths = enumerate_paths(&net, net.od_pairs[0], 3).unwrap();
        let lam = incidence_matrix(&net, &paths);
        for (j, p) in paths.iter().enumerate() {
            for li in 0..net.links.len() {
                let expect = u8::from(p.links.contains(&li));
                assert_eq!(incidence(p, li), expect);
                assert_eq!(lam[li][j], expect);
            }
        }
    }
}
