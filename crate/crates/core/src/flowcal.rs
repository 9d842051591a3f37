//! Upper calibration level: fit nonnegative integer path flows to link-count
//! targets, interval by interval. The continuous relaxation is solved with
//! active-set nonnegative least squares, then finished to integers by
//! rounding and exhaustive ±1 coordinate descent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{Grid, Path, RoadNetwork, TimeGrids};
use crate::report::Histogram;

#[derive(Debug, Error)]
pub enum FlowCalError {
    #[error("empty path set")]
    NoPaths,
    #[error("no flow targets present")]
    NoTargets,
}

/// Nonnegative integer agents per path per coarse interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathFlowSolution {
    /// Counts indexed `[path][k]`.
    pub counts: Vec<Vec<u32>>,
    /// Outer (bi-level) iteration that produced this solution.
    pub iteration: usize,
}

impl PathFlowSolution {
    pub fn zero(n_paths: usize, n_coarse: usize) -> Self {
        PathFlowSolution {
            counts: vec![vec![0; n_coarse]; n_paths],
            iteration: 0,
        }
    }

    pub fn total_agents(&self) -> u64 {
        self.counts
            .iter()
            .flat_map(|row| row.iter().map(|&c| c as u64))
            .sum()
    }

    /// Marginal agents per OD pair (the OD-matrix view of the solution).
    pub fn od_marginals(&self, paths: &[Path], n_ods: usize) -> Vec<u64> {
        let mut out = vec![0u64; n_ods];
        for (j, row) in self.counts.iter().enumerate() {
            if let Some(p) = paths.get(j) {
                if p.od < n_ods {
                    out[p.od] += row.iter().map(|&c| c as u64).sum::<u64>();
                }
            }
        }
        out
    }
}

/// Fit quality of a path-flow solution against the flow targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowObjectiveReport {
    /// Mean squared error normalized by the link count (summed over
    /// intervals, divided by |E| only).
    pub objective: f64,
    /// Same objective at the continuous-relaxation optimum.
    pub relaxation_objective: f64,
    /// Squared error per link, summed over intervals (observed cells only).
    pub per_link_sq_error: Vec<f64>,
    /// Max over intervals of |x - x̂| / max(x̂, 1) per link.
    pub per_link_rel_error: Vec<f64>,
    pub n_links: usize,
}

impl FlowObjectiveReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_link_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowCalOptions {
    /// Randomized floor/ceil rounding before descent; `None` rounds to the
    /// nearest integer.
    pub rounding_seed: Option<u64>,
}

impl Default for FlowCalOptions {
    fn default() -> Self {
        FlowCalOptions { rounding_seed: None }
    }
}

/// Link flows implied by a path-flow solution: x[i][k] = Σ_j λ_ij π_j^k.
pub fn link_flows(solution: &PathFlowSolution, incidence: &[Vec<u8>]) -> Vec<Vec<u32>> {
    let n_coarse = solution.counts.first().map_or(0, Vec::len);
    incidence
        .iter()
        .map(|row| {
            (0..n_coarse)
                .map(|k| {
                    row.iter()
                        .enumerate()
                        .filter(|(_, &lam)| lam == 1)
                        .map(|(j, _)| solution.counts[j][k])
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Solve min ||Ax - b|| s.t. x >= 0 by Lawson-Hanson active sets. `a` is
/// row-major m×n. Dimensions here are tiny (paths per corridor), so the
/// normal equations with a small ridge are accurate enough.
fn nnls(a: &[Vec<f64>], b: &[f64], n: usize) -> Vec<f64> {
    let m = a.len();
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let tol = 1e-10;

    let residual_grad = |x: &[f64]| -> Vec<f64> {
        let mut r = vec![0.0; m];
        for i in 0..m {
            let mut ax = 0.0;
            for j in 0..n {
                ax += a[i][j] * x[j];
            }
            r[i] = b[i] - ax;
        }
        (0..n)
            .map(|j| (0..m).map(|i| a[i][j] * r[i]).sum())
            .collect()
    };

    for _outer in 0..(3 * n + 10) {
        let w = residual_grad(&x);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !passive[j] && w[j] > tol {
                if best.map_or(true, |(_, bw)| w[j] > bw) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((enter, _)) = best else { break };
        passive[enter] = true;

        loop {
            let z = solve_passive(a, b, &passive, n);
            let mut all_pos = true;
            let mut alpha = 1.0f64;
            for j in 0..n {
                if passive[j] && z[j] <= tol {
                    all_pos = false;
                    let denom = x[j] - z[j];
                    if denom > 1e-15 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if all_pos {
                for j in 0..n {
                    x[j] = if passive[j] { z[j] } else { 0.0 };
                }
                break;
            }
            for j in 0..n {
                if passive[j] {
                    x[j] += alpha * (z[j] - x[j]);
                    if x[j] <= tol {
                        x[j] = 0.0;
                        passive[j] = false;
                    }
                }
            }
        }
    }
    x
}

/// Least squares restricted to the passive set via ridge-stabilized normal
/// equations and Gaussian elimination.
fn solve_passive(a: &[Vec<f64>], b: &[f64], passive: &[bool], n: usize) -> Vec<f64> {
    let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
    let p = idx.len();
    if p == 0 {
        return vec![0.0; n];
    }
    let m = a.len();
    let mut ata = vec![vec![0.0; p]; p];
    let mut atb = vec![0.0; p];
    for (r, &jr) in idx.iter().enumerate() {
        for (c, &jc) in idx.iter().enumerate() {
            ata[r][c] = (0..m).map(|i| a[i][jr] * a[i][jc]).sum();
        }
        ata[r][r] += 1e-10;
        atb[r] = (0..m).map(|i| a[i][jr] * b[i]).sum();
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..p {
        let mut piv = col;
        for r in col + 1..p {
            if ata[r][col].abs() > ata[piv][col].abs() {
                piv = r;
            }
        }
        ata.swap(col, piv);
        atb.swap(col, piv);
        let d = ata[col][col];
        if d.abs() < 1e-14 {
            continue;
        }
        for r in col + 1..p {
            let f = ata[r][col] / d;
            for c in col..p {
                ata[r][c] -= f * ata[col][c];
            }
            atb[r] -= f * atb[col];
        }
    }
    let mut z = vec![0.0; p];
    for r in (0..p).rev() {
        let mut s = atb[r];
        for c in r + 1..p {
            s -= ata[r][c] * z[c];
        }
        z[r] = if ata[r][r].abs() < 1e-14 {
            0.0
        } else {
            s / ata[r][r]
        };
    }
    let mut out = vec![0.0; n];
    for (r, &j) in idx.iter().enumerate() {
        out[j] = z[r];
    }
    out
}

/// One interval's integerization: round the relaxed solution, then descend
/// over single ±1 coordinate moves until none improves; ties go to the
/// lowest path id.
fn integer_finish(
    relaxed: &[f64],
    obs: &[(usize, f64)],       // (link row in `lam`, target)
    lam: &[Vec<u8>],            // incidence [link][path]
    rng: Option<&mut ChaCha8Rng>,
) -> Vec<u32> {
    let n = relaxed.len();
    let mut pi: Vec<i64> = match rng {
        None => relaxed.iter().map(|&v| v.round().max(0.0) as i64).collect(),
        Some(rng) => relaxed
            .iter()
            .map(|&v| {
                let f = v.floor().max(0.0);
                let frac = (v - f).clamp(0.0, 1.0);
                f as i64 + i64::from(rng.gen_bool(frac.clamp(0.0, 1.0).min(1.0).max(0.0)))
            })
            .collect(),
    };

    // Current flows on observed links.
    let mut x: Vec<f64> = obs
        .iter()
        .map(|&(i, _)| {
            (0..n)
                .map(|j| lam[i][j] as f64 * pi[j] as f64)
                .sum()
        })
        .collect();

    loop {
        let mut best_delta = -1e-9;
        let mut best_move: Option<(usize, i64)> = None;
        for j in 0..n {
            for d in [1i64, -1] {
                if pi[j] + d < 0 {
                    continue;
                }
                let mut delta = 0.0;
                for (row, &(i, target)) in obs.iter().enumerate() {
                    if lam[i][j] == 1 {
                        let e = x[row] - target;
                        delta += 2.0 * d as f64 * e + 1.0;
                    }
                }
                if delta < best_delta {
                    best_delta = delta;
                    best_move = Some((j, d));
                }
            }
        }
        let Some((j, d)) = best_move else { break };
        pi[j] += d;
        for (row, &(i, _)) in obs.iter().enumerate() {
            if lam[i][j] == 1 {
                x[row] += d as f64;
            }
        }
    }
    pi.into_iter().map(|v| v as u32).collect()
}

/// Fit integer path flows to the flow targets by per-interval nonnegative
/// least squares plus integer finishing, and report both objectives.
pub fn calibrate_flow(
    targets: &Grid,
    paths: &[Path],
    network: &RoadNetwork,
    grids: &TimeGrids,
    opts: &FlowCalOptions,
) -> Result<(PathFlowSolution, FlowObjectiveReport), FlowCalError> {
    if paths.is_empty() {
        return Err(FlowCalError::NoPaths);
    }
    if targets.n_present() == 0 {
        return Err(FlowCalError::NoTargets);
    }
    let lam = crate::net::incidence_matrix(network, paths);
    let n = paths.len();
    let n_coarse = grids.n_coarse();
    let mut rng = opts.rounding_seed.map(ChaCha8Rng::seed_from_u64);

    let mut solution = PathFlowSolution::zero(n, n_coarse);
    let mut relaxation_objective = 0.0;

    for k in 0..n_coarse {
        let obs: Vec<(usize, f64)> = (0..network.links.len())
            .filter_map(|i| targets.get(i, k).map(|v| (i, v)))
            .collect();
        if obs.is_empty() {
            continue;
        }
        let a: Vec<Vec<f64>> = obs
            .iter()
            .map(|&(i, _)| (0..n).map(|j| lam[i][j] as f64).collect())
            .collect();
        let b: Vec<f64> = obs.iter().map(|&(_, t)| t).collect();
        let relaxed = nnls(&a, &b, n);
        for (row, &(_, target)) in obs.iter().enumerate() {
            let ax: f64 = (0..n).map(|j| a[row][j] * relaxed[j]).sum();
            relaxation_objective += (ax - target) * (ax - target);
        }
        let pi = integer_finish(&relaxed, &obs, &lam, rng.as_mut());
        for j in 0..n {
            solution.counts[j][k] = pi[j];
        }
    }

    let report = flow_report(&solution, targets, &lam, network, relaxation_objective);
    Ok((solution, report))
}

/// Recompute the fit report of a solution against targets.
pub fn flow_report(
    solution: &PathFlowSolution,
    targets: &Grid,
    incidence: &[Vec<u8>],
    network: &RoadNetwork,
    relaxation_objective_sum: f64,
) -> FlowObjectiveReport {
    let n_links = network.links.len();
    let flows = link_flows(solution, incidence);
    let mut per_link_sq = vec![0.0f64; n_links];
    let mut per_link_rel = vec![0.0f64; n_links];
    let mut total = 0.0;
    for (i, k, target) in targets.cells() {
        let x = flows[i][k] as f64;
        let e = x - target;
        per_link_sq[i] += e * e;
        per_link_rel[i] = per_link_rel[i].max(e.abs() / target.max(1.0));
        total += e * e;
    }
    FlowObjectiveReport {
        objective: total / n_links as f64,
        relaxation_objective: relaxation_objective_sum / n_links as f64,
        per_link_sq_error: per_link_sq,
        per_link_rel_error: per_link_rel,
        n_links,
    }
}

/// Histogram of per-link squared errors (the flow-error distribution view).
pub fn flow_error_histogram(report: &FlowObjectiveReport, bins: usize) -> Histogram {
    Histogram::from_values(&report.per_link_sq_error, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{enumerate_paths, incidence_matrix, LinkKind, Node, OdPair, RoadNetwork};

    fn test_grids() -> TimeGrids {
        TimeGrids {
            start_s: 0,
            end_s: 3600,
            coarse_s: 3600,
            fine_s: 60,
            warmup_s: 0,
        }
    }

    fn diamond() -> (RoadNetwork, Vec<Path>) {
        let nodes = ["n0", "na", "nb", "n1"]
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
        let net = RoadNetwork::build(
            nodes,
            vec![
                mk("entry", "n0", "na", 300.0),
                mk("upper", "na", "n1", 500.0),
                mk("lower", "na", "n1", 400.0),
            ],
            vec![],
            vec![("n0".into(), "n1".into())],
            RoadNetwork::default_segment_length(),
        )
        .unwrap();
        // Both routes share the entry link.
        let paths = enumerate_paths(&net, OdPair { origin: 0, destination: 3 }, 3).unwrap();
        assert_eq!(paths.len(), 2);
        (net, paths)
    }

    /// Exhaustive search over the bounded integer lattice.
    fn brute_force(obs: &[(usize, f64)], lam: &[Vec<u8>], n: usize, bound: u32) -> f64 {
        fn rec(
            j: usize,
            n: usize,
            bound: u32,
            pi: &mut Vec<u32>,
            obs: &[(usize, f64)],
            lam: &[Vec<u8>],
            best: &mut f64,
        ) {
            if j == n {
                let mut total = 0.0;
                for &(i, target) in obs {
                    let x: f64 = (0..n).map(|jj| lam[i][jj] as f64 * pi[jj] as f64).sum();
                    total += (x - target) * (x - target);
                }
                if total < *best {
                    *best = total;
                }
                return;
            }
            for v in 0..=bound {
                pi[j] = v;
                rec(j + 1, n, bound, pi, obs, lam, best);
            }
        }
        let mut best = f64::INFINITY;
        rec(0, n, bound, &mut vec![0; n], obs, lam, &mut best);
        best
    }

    #[test]
    fn zero_solution_zero_flows() {
        let (net, paths) = diamond();
        let lam = incidence_matrix(&net, &paths);
        let sol = PathFlowSolution::zero(paths.len(), 1);
        let flows = link_flows(&sol, &lam);
        assert!(flows.iter().all(|row| row.iter().all(|&x| x == 0)));
    }

    #[test]
    fn link_flows_sum_over_shared_links() {
        let (net, paths) = diamond();
        let lam = incidence_matrix(&net, &paths);
        // Path 0 is the lower (shorter) route.
        let sol = PathFlowSolution {
            counts: vec![vec![6], vec![4]],
            iteration: 0,
        };
        let flows = link_flows(&sol, &lam);
        let entry = net.link_idx("entry").unwrap();
        let upper = net.link_idx("upper").unwrap();
        let lower = net.link_idx("lower").unwrap();
        assert_eq!(flows[entry][0], 10);
        assert_eq!(flows[upper][0], 4);
        assert_eq!(flows[lower][0], 6);
    }

    #[test]
    fn single_path_single_link_exact() {
        let net = crate::synth::line_network(&[500.0], 1, 20.0);
        let paths = enumerate_paths(&net, net.od_pairs[0], 3).unwrap();
        let grids = test_grids();
        let mut targets = Grid::new(1, 1);
        targets.set(0, 0, 10.0);
        let (sol, report) =
            calibrate_flow(&targets, &paths, &net, &grids, &FlowCalOptions::default()).unwrap();
        assert_eq!(sol.counts[0][0], 10);
        assert_eq!(report.objective, 0.0);
    }

    #[test]
    fn diamond_consistent_targets_recovered_exactly() {
        let (net, paths) = diamond();
        let grids = test_grids();
        let mut targets = Grid::new(net.links.len(), 1);
        targets.set(net.link_idx("entry").unwrap(), 0, 10.0);
        targets.set(net.link_idx("lower").unwrap(), 0, 6.0);
        targets.set(net.link_idx("upper").unwrap(), 0, 4.0);
        let (sol, report) =
            calibrate_flow(&targets, &paths, &net, &grids, &FlowCalOptions::default()).unwrap();
        assert_eq!(report.objective, 0.0);
        assert_eq!(sol.counts[0][0] + sol.counts[1][0], 10);
        // Gate-style relative errors are all zero.
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn inconsistent_targets_match_brute_force() {
        let (net, paths) = diamond();
        let grids = test_grids();
        let lam = incidence_matrix(&net, &paths);
        let mut targets = Grid::new(net.links.len(), 1);
        targets.set(net.link_idx("entry").unwrap(), 0, 10.0);
        targets.set(net.link_idx("lower").unwrap(), 0, 3.0);
        targets.set(net.link_idx("upper").unwrap(), 0, 4.0);
        let (sol, report) =
            calibrate_flow(&targets, &paths, &net, &grids, &FlowCalOptions::default()).unwrap();
        let obs: Vec<(usize, f64)> = (0..net.links.len())
            .filter_map(|i| targets.get(i, 0).map(|v| (i, v)))
            .collect();
        let best = brute_force(&obs, &lam, paths.len(), 15);
        let got = report.objective * net.links.len() as f64;
        assert!(
            (got - best).abs() < 1e-9,
            "descent {got} vs exhaustive {best} (pi={:?})",
            sol.counts
        );
        // The integer objective can never beat the relaxation.
        assert!(report.objective >= report.relaxation_objective - 1e-9);
    }

    #[test]
    fn empty_paths_and_empty_targets_are_errors() {
        let (net, paths) = diamond();
        let grids = test_grids();
        let targets = Grid::new(net.links.len(), 1);
        assert!(matches!(
            calibrate_flow(&targets, &paths, &net, &grids, &FlowCalOptions::default()),
            Err(FlowCalError::NoTargets)
        ));
        let mut targets = Grid::new(net.links.len(), 1);
        targets.set(0, 0, 5.0);
        assert!(matches!(
            calibrate_flow(&targets, &[], &net, &grids, &FlowCalOptions::default()),
            Err(FlowCalError::NoPaths)
        ));
    }

    #[test]
    fn doubling_targets_doubles_consistent_solution() {
        let (net, paths) = diamond();
        let grids = test_grids();
        let mut targets = Grid::new(net.links.len(), 1);
        targets.set(net.link_idx("entry").unwrap(), 0, 10.0);
        targets.set(net.link_idx("lower").unwrap(), 0, 6.0);
        targets.set(net.link_idx("upper").unwrap(), 0, 4.0);
        let (sol1, _) =
            calibrate_flow(&targets, &paths, &net, &grids, &FlowCalOptions::default()).unwrap();
        let mut doubled = Grid::new(net.links.len(), 1);
        for (i, k, v) in targets.cells() {
            doubled.set(i, k, 2.0 * v);
        }
        let (sol2, report2) =
            calibrate_flow(&doubled, &paths, &net, &grids, &FlowCalOptions::default()).unwrap();
        assert_eq!(report2.objective, 0.0);
        for j in 0..paths.len() {
            assert_eq!(sol2.counts[j][0], 2 * sol1.counts[j][0]);
        }
    }

    #[test]
    fn rerun_histograms_overlap() {
        // Noisy instance: five randomized-rounding reruns must produce
        // near-identical per-link error histograms.
        let (net, paths) = diamond();
        let grids = test_grids();
        let mut targets = Grid::new(net.links.len(), 1);
        targets.set(net.link_idx("entry").unwrap(), 0, 11.0);
        targets.set(net.link_idx("lower").unwrap(), 0, 5.0);
        targets.set(net.link_idx("upper").unwrap(), 0, 4.0);
        let mut hists = Vec::new();
        for seed in 0..5 {
            let opts = FlowCalOptions {
                rounding_seed: Some(seed),
            };
            let (_, report) = calibrate_flow(&targets, &paths, &net, &grids, &opts).unwrap();
            hists.push(flow_error_histogram(&report, 4));
        }
        let tol = (0.1 * net.links.len() as f64).max(1.0) as i64;
        for h in &hists[1..] {
            for (a, b) in h.counts.iter().zip(&hists[0].counts) {
                assert!((*a as i64 - *b as i64).abs() <= tol);
            }
        }
    }
}
