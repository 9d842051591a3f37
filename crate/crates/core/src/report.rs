//! Shared reporting: histograms, percentile markers, and all CSV/JSON-lines
//! artifact formats. Writers keep a fixed row order so artifacts are
//! byte-reproducible.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::flowcal::PathFlowSolution;
use crate::net::{Grid, RoadNetwork, Path};
use crate::sim::{MeasurementFrame, TrajectorySample};
use crate::speedcal::{InflowProfile, TraceRecord};
use crate::units::mps_to_mph;

/// Equal-width histogram over `[0, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn from_values(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let max = values.iter().copied().fold(0.0f64, f64::max);
        // Degenerate case (e.g. a perfect fit): everything lands in [0, eps).
        let hi = if max > 0.0 { max } else { 1e-9 };
        let width = hi / bins as f64;
        let mut counts = vec![0u64; bins];
        for &v in values {
            let mut b = (v / width) as usize;
            if b >= bins {
                b = bins - 1;
            }
            counts[b] += 1;
        }
        let edges = (0..=bins).map(|i| i as f64 * width).collect();
        Histogram { edges, counts }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "bin_lo,bin_hi,count")?;
        for (i, &c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{},{}", self.edges[i], self.edges[i + 1], c)?;
        }
        Ok(())
    }
}

/// Nearest-rank percentile of an unsorted sample; `p` in (0, 100].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// `link_id,interval_k,count` rows for simulated link flows.
pub fn write_flows_csv<W: Write>(
    mut w: W,
    net: &RoadNetwork,
    flows: &[Vec<u32>],
) -> io::Result<()> {
    writeln!(w, "link_id,interval_k,count")?;
    for (i, row) in flows.iter().enumerate() {
        for (k, &c) in row.iter().enumerate() {
            writeln!(w, "{},{},{}", net.links[i].id, k, c)?;
        }
    }
    Ok(())
}

/// `segment_id,interval_r,speed_mph` rows; missing cells are skipped.
pub fn write_speeds_csv<W: Write>(mut w: W, net: &RoadNetwork, speeds: &Grid) -> io::Result<()> {
    writeln!(w, "segment_id,interval_r,speed_mph")?;
    for s in 0..speeds.rows() {
        for r in 0..speeds.cols() {
            if let Some(v) = speeds.get(s, r) {
                writeln!(w, "{},{},{}", net.segments[s].id, r, mps_to_mph(v))?;
            }
        }
    }
    Ok(())
}

/// Heatmap matrix (segments × fine intervals) of speeds in mph; empty cells
/// stay empty. First column is the segment id.
pub fn write_heatmap_csv<W: Write>(mut w: W, net: &RoadNetwork, speeds: &Grid) -> io::Result<()> {
    write!(w, "segment_id")?;
    for r in 0..speeds.cols() {
        write!(w, ",t{r}")?;
    }
    writeln!(w)?;
    for s in 0..speeds.rows() {
        write!(w, "{}", net.segments[s].id)?;
        for r in 0..speeds.cols() {
            match speeds.get(s, r) {
                Some(v) => write!(w, ",{:.3}", mps_to_mph(v))?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

/// `path_id,interval_k,count` rows.
pub fn write_pi_csv<W: Write>(mut w: W, sol: &PathFlowSolution) -> io::Result<()> {
    writeln!(w, "path_id,interval_k,count")?;
    for (j, row) in sol.counts.iter().enumerate() {
        for (k, &c) in row.iter().enumerate() {
            writeln!(w, "{j},{k},{c}")?;
        }
    }
    Ok(())
}

pub fn read_pi_csv<R: io::Read>(
    r: R,
    n_paths: usize,
    n_coarse: usize,
) -> Result<PathFlowSolution, csv::Error> {
    #[derive(serde::Deserialize)]
    struct Row {
        path_id: usize,
        interval_k: usize,
        count: u32,
    }
    let mut sol = PathFlowSolution::zero(n_paths, n_coarse);
    let mut rdr = csv::Reader::from_reader(r);
    for rec in rdr.deserialize() {
        let row: Row = rec?;
        if row.path_id < n_paths && row.interval_k < n_coarse {
            sol.counts[row.path_id][row.interval_k] = row.count;
        }
    }
    Ok(sol)
}

/// `path_id,bin,share` rows.
pub fn write_inflow_csv<W: Write>(mut w: W, profile: &InflowProfile) -> io::Result<()> {
    writeln!(w, "path_id,bin,share")?;
    for (j, row) in profile.shares.iter().enumerate() {
        for (b, &s) in row.iter().enumerate() {
            writeln!(w, "{j},{b},{s}")?;
        }
    }
    Ok(())
}

pub fn read_inflow_csv<R: io::Read>(
    r: R,
    n_paths: usize,
    n_bins: usize,
) -> Result<InflowProfile, csv::Error> {
    #[derive(serde::Deserialize)]
    struct Row {
        path_id: usize,
        bin: usize,
        share: f64,
    }
    let mut profile = InflowProfile {
        shares: vec![vec![0.0; n_bins]; n_paths],
    };
    let mut rdr = csv::Reader::from_reader(r);
    for rec in rdr.deserialize() {
        let row: Row = rec?;
        if row.path_id < n_paths && row.bin < n_bins {
            profile.shares[row.path_id][row.bin] = row.share;
        }
    }
    Ok(profile)
}

/// `iter,f_plus,f_minus,f_best,step_a,step_c` rows.
pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TraceRecord]) -> io::Result<()> {
    writeln!(w, "iter,f_plus,f_minus,f_best,step_a,step_c")?;
    for t in trace {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            t.iter, t.f_plus, t.f_minus, t.f_best, t.step_a, t.step_c
        )?;
    }
    Ok(())
}

/// `t,agent_id,link_id,lane,pos_m,speed_mps,gap_m` rows.
pub fn write_trajectories_csv<W: Write>(mut w: W, samples: &[TrajectorySample]) -> io::Result<()> {
    writeln!(w, "t,agent_id,link_id,lane,pos_m,speed_mps,gap_m")?;
    for s in samples {
        let gap = s.gap_m.map(|g| g.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.t, s.agent_id, s.link_id, s.lane, s.pos_m, s.speed_mps, gap
        )?;
    }
    Ok(())
}

/// `path_id,links` rows (links joined by `|`), for audit replay.
pub fn write_paths_csv<W: Write>(mut w: W, net: &RoadNetwork, paths: &[Path]) -> io::Result<()> {
    writeln!(w, "path_id,links")?;
    for p in paths {
        let ids: Vec<&str> = p.links.iter().map(|&l| net.links[l].id.as_str()).collect();
        writeln!(w, "{},{}", p.id, ids.join("|"))?;
    }
    Ok(())
}

/// One JSON document per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, records: &[T]) -> io::Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Export a measurement frame's flow and speed tensors in the observation
/// CSV schemas, so simulated and observed data diff with one tool.
pub fn export_frame(
    frame: &MeasurementFrame,
    net: &RoadNetwork,
    flows_out: impl Write,
    speeds_out: impl Write,
) -> io::Result<()> {
    write_flows_csv(flows_out, net, &frame.link_flows)?;
    write_speeds_csv(speeds_out, net, &frame.segment_speeds)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_perfect_fit_lands_in_first_bin() {
        let h = Histogram::from_values(&[0.0, 0.0, 0.0], 4);
        assert_eq!(h.counts[0], 3);
        assert!(h.counts[1..].iter().all(|&c| c == 0));
        assert!(h.edges[1] <= 1e-9);
    }

    #[test]
    fn histogram_known_two_values() {
        // {0, 4} over 2 bins of width 2: one count each.
        let h = Histogram::from_values(&[0.0, 4.0], 2);
        assert_eq!(h.counts, vec![1, 1]);
        assert_eq!(h.edges, vec![0.0, 2.0, 4.0]);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 70.0), 7.0);
        assert_eq!(percentile(&v, 90.0), 9.0);
        assert_eq!(percentile(&v, 100.0), 10.0);
    }

    #[test]
    fn histogram_csv_shape() {
        let h = Histogram::from_values(&[1.0, 3.0], 2);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "bin_lo,bin_hi,count");
        assert_eq!(lines.len(), 3);
    }
}
