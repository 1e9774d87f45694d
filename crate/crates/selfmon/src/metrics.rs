//! Evaluation: navigation error, success and oracle success rates, path
//! efficiency, and the textual-attention diagonality audit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldgen::NavGraph;

/// Shortest-path distance from where the agent stopped to the goal.
pub fn navigation_error(graph: &NavGraph, stopped: usize, goal: usize) -> Result<f64> {
    graph.shortest_path_distance(stopped, goal)
}

/// Strictly less than the threshold counts as success.
pub fn success(ne: f64, threshold: f64) -> bool {
    ne < threshold
}

/// Success had the agent stopped at its closest visited point.
pub fn oracle_success(
    graph: &NavGraph,
    trajectory: &[usize],
    goal: usize,
    threshold: f64,
) -> Result<bool> {
    if trajectory.is_empty() {
        return Err(Error::Data("oracle success of an empty trajectory".into()));
    }
    let mut best = f64::INFINITY;
    for &v in trajectory {
        best = best.min(graph.shortest_path_distance(v, goal)?);
    }
    Ok(best < threshold)
}

/// Success weighted by inverse normalized path length.
pub fn spl(success: bool, shortest: f64, taken: f64) -> Result<f64> {
    if !(shortest > 0.0) {
        return Err(Error::Data(format!(
            "path efficiency needs a positive shortest path, got {shortest}"
        )));
    }
    if taken < 0.0 {
        return Err(Error::Data(format!("negative taken length {taken}")));
    }
    Ok(if success {
        shortest / shortest.max(taken)
    } else {
        0.0
    })
}

/// Per-episode evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub episode_id: usize,
    pub ne: f64,
    pub success: bool,
    pub oracle: bool,
    pub spl: f64,
    pub shortest_m: f64,
    pub taken_m: f64,
}

/// Evaluate one executed walk against its episode.
pub fn evaluate_trajectory(
    graph: &NavGraph,
    episode_id: usize,
    start: usize,
    goal: usize,
    trajectory: &[usize],
    threshold: f64,
) -> Result<EpisodeEval> {
    if trajectory.first() != Some(&start) {
        return Err(Error::Data(format!(
            "trajectory must start at {start}, got {:?}",
            trajectory.first()
        )));
    }
    let shortest = graph.shortest_path_distance(start, goal)?;
    let taken = graph.walk_length(trajectory)?;
    let ne = navigation_error(graph, *trajectory.last().unwrap(), goal)?;
    let ok = success(ne, threshold);
    Ok(EpisodeEval {
        episode_id,
        ne,
        success: ok,
        oracle: oracle_success(graph, trajectory, goal, threshold)?,
        spl: spl(ok, shortest, taken)?,
        shortest_m: shortest,
        taken_m: taken,
    })
}

/// Split-level aggregates; every field is the mean of the per-episode
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub n: usize,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
}

pub fn summarize(evals: &[EpisodeEval]) -> Result<SplitSummary> {
    if evals.is_empty() {
        return Err(Error::Data("summary of zero episodes".into()));
    }
    let n = evals.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeEval) -> f64| evals.iter().map(f).sum::<f64>() / n;
    Ok(SplitSummary {
        n: evals.len(),
        ne: mean(&|e| e.ne),
        sr: mean(&|e| if e.success { 1.0 } else { 0.0 }),
        osr: mean(&|e| if e.oracle { 1.0 } else { 0.0 }),
        spl: mean(&|e| e.spl),
    })
}

/// Textual attention over one episode: one row of weights per executed
/// step, plus how many leading positions are real tokens.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub alphas: Vec<Vec<f64>>,
    pub real_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalityReport {
    /// Mean attention center of mass at each step index, averaged over
    /// the episodes still running at that step.
    pub mean_center_by_step: Vec<f64>,
    /// Spearman rank correlation between step index and center of mass
    /// over all (episode, step) pairs.
    pub spearman: f64,
    /// True when either variable is constant and the correlation is
    /// reported as 0 by convention.
    pub degenerate: bool,
    pub pairs: usize,
}

/// Center of mass of one attention row over the real tokens, as a
/// fraction of instruction length (token l contributes weight at l/L).
fn attention_center(alpha: &[f64], real_len: usize) -> f64 {
    (0..real_len.min(alpha.len()))
        .map(|l| alpha[l] * (l as f64 / real_len as f64))
        .sum()
}

/// Average ranks, ties shared (1-based).
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = shared;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// How diagonally the textual attention sweeps the instruction: the rank
/// correlation between step index and attention center of mass.
pub fn attention_diagonality(traces: &[AttentionTrace]) -> Result<DiagonalityReport> {
    let mut ts: Vec<f64> = Vec::new();
    let mut ms: Vec<f64> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for trace in traces {
        if trace.real_len == 0 {
            return Err(Error::Data("attention trace with zero real tokens".into()));
        }
        for (t, alpha) in trace.alphas.iter().enumerate() {
            let m = attention_center(alpha, trace.real_len);
            ts.push(t as f64);
            ms.push(m);
            if sums.len() <= t {
                sums.resize(t + 1, (0.0, 0));
            }
            sums[t].0 += m;
            sums[t].1 += 1;
        }
    }
    if ts.is_empty() {
        return Err(Error::Data("attention diagonality of zero steps".into()));
    }
    let rho = pearson(&ranks(&ts), &ranks(&ms));
    Ok(DiagonalityReport {
        mean_center_by_step: sums.iter().map(|(s, c)| s / *c as f64).collect(),
        spearman: rho.unwrap_or(0.0),
        degenerate: rho.is_none(),
        pairs: ts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{NavigableDirection, Viewpoint};
    use numcore::Tensor;

    /// Corridor 0-1-2-3 with 5 m edges.
    fn corridor() -> NavGraph {
        let n = 4;
        let viewpoints: Vec<Viewpoint> = (0..n)
            .map(|i| Viewpoint {
                id: i,
                position: [5.0 * i as f64, 0.0, 0.0],
                landmark: i % 2,
            })
            .collect();
        let mut adjacency = vec![Vec::new(); n];
        for i in 0..n - 1 {
            let f = || NavigableDirection {
                target: 0,
                heading: 0.0,
                elevation: 0.0,
                feature: Tensor::zeros(&[2]),
            };
            adjacency[i].push(NavigableDirection { target: i + 1, ..f() });
            adjacency[i + 1].push(NavigableDirection { target: i, ..f() });
        }
        for a in adjacency.iter_mut() {
            a.sort_by_key(|d| d.target);
        }
        NavGraph::new(7, viewpoints, adjacency).unwrap()
    }

    #[test]
    fn navigation_error_examples() {
        let g = corridor();
        assert_eq!(navigation_error(&g, 3, 3).unwrap(), 0.0);
        assert_eq!(navigation_error(&g, 0, 1).unwrap(), 5.0);
        assert_eq!(navigation_error(&g, 0, 3).unwrap(), 15.0);
    }

    #[test]
    fn success_is_strict() {
        assert!(success(2.9, 3.0));
        assert!(!success(3.0, 3.0));
        assert!(success(0.0, 3.0));
    }

    #[test]
    fn oracle_beats_final() {
        let g = corridor();
        // pass through the goal (2), end far away (0)
        let walk = vec![0, 1, 2, 1, 0];
        assert!(oracle_success(&g, &walk, 2, 1.0).unwrap());
        let ne = navigation_error(&g, 0, 2).unwrap();
        assert!(!success(ne, 1.0));
    }

    #[test]
    fn spl_examples() {
        assert_eq!(spl(true, 10.0, 10.0).unwrap(), 1.0);
        assert_eq!(spl(true, 10.0, 20.0).unwrap(), 0.5);
        assert_eq!(spl(false, 10.0, 10.0).unwrap(), 0.0);
        // shorter-than-shortest (stopped early, still within threshold)
        assert_eq!(spl(true, 10.0, 5.0).unwrap(), 1.0);
        assert!(spl(true, 0.0, 5.0).is_err());
    }

    #[test]
    fn trajectory_eval_and_summary() {
        let g = corridor();
        let a = evaluate_trajectory(&g, 0, 0, 3, &[0, 1, 2, 3], 1.0).unwrap();
        assert_eq!(a.ne, 0.0);
        assert!(a.success && a.oracle);
        assert_eq!(a.spl, 1.0);
        let b = evaluate_trajectory(&g, 1, 0, 3, &[0, 1, 2, 1, 2, 3], 1.0).unwrap();
        assert!(b.success);
        assert!((b.spl - 15.0 / 25.0).abs() < 1e-12);
        let c = evaluate_trajectory(&g, 2, 0, 3, &[0, 1], 1.0).unwrap();
        assert!(!c.success && !c.oracle);
        assert_eq!(c.spl, 0.0);

        let summary = summarize(&[a, b, c]).unwrap();
        assert_eq!(summary.n, 3);
        assert!((summary.sr - 2.0 / 3.0).abs() < 1e-12);
        assert!((summary.osr - 2.0 / 3.0).abs() < 1e-12);
        assert!(summary.spl <= summary.sr + 1e-12);
        assert!(summary.osr >= summary.sr);
        let want_ne = (0.0 + 0.0 + 10.0) / 3.0;
        assert!((summary.ne - want_ne).abs() < 1e-12);
    }

    #[test]
    fn trajectory_must_start_at_start() {
        let g = corridor();
        assert!(evaluate_trajectory(&g, 0, 0, 3, &[1, 2], 1.0).is_err());
    }

    #[test]
    fn metrics_invariant_under_relabeling() {
        // corridor with ids reversed: 3-2-1-0 geometrically identical
        let g = corridor();
        let n = 4;
        let viewpoints: Vec<Viewpoint> = (0..n)
            .map(|i| Viewpoint {
                id: i,
                position: [5.0 * (n - 1 - i) as f64, 0.0, 0.0],
                landmark: 0,
            })
            .collect();
        let mut adjacency = vec![Vec::new(); n];
        for i in 0..n - 1 {
            let f = || NavigableDirection {
                target: 0,
                heading: 0.0,
                elevation: 0.0,
                feature: Tensor::zeros(&[2]),
            };
            adjacency[i].push(NavigableDirection { target: i + 1, ..f() });
            adjacency[i + 1].push(NavigableDirection { target: i, ..f() });
        }
        for a in adjacency.iter_mut() {
            a.sort_by_key(|d| d.target);
        }
        let h = NavGraph::new(8, viewpoints, adjacency).unwrap();
        let ea = evaluate_trajectory(&g, 0, 0, 3, &[0, 1, 2], 4.9).unwrap();
        let eb = evaluate_trajectory(&h, 0, 3, 0, &[3, 2, 1], 4.9).unwrap();
        assert_eq!(ea.ne, eb.ne);
        assert_eq!(ea.success, eb.success);
        assert_eq!(ea.oracle, eb.oracle);
        assert_eq!(ea.spl, eb.spl);
    }

    #[test]
    fn diagonality_hand_case() {
        // one-hot attention marching 0.2 -> 0.5 -> 0.9 of the way
        let mk = |pos: usize| {
            let mut a = vec![0.0; 10];
            a[pos] = 1.0;
            a
        };
        let trace = AttentionTrace {
            alphas: vec![mk(2), mk(5), mk(9)],
            real_len: 10,
        };
        let report = attention_diagonality(&[trace]).unwrap();
        assert_eq!(report.spearman, 1.0);
        assert!(!report.degenerate);
        assert_eq!(report.pairs, 3);
        assert_eq!(report.mean_center_by_step, vec![0.2, 0.5, 0.9]);
    }

    #[test]
    fn uniform_attention_is_degenerate() {
        let trace = AttentionTrace {
            alphas: vec![vec![0.25; 4]; 3],
            real_len: 4,
        };
        let report = attention_diagonality(&[trace]).unwrap();
        assert_eq!(report.spearman, 0.0);
        assert!(report.degenerate);
    }

    #[test]
    fn reversed_attention_is_anti_diagonal() {
        let mk = |pos: usize| {
            let mut a = vec![0.0; 5];
            a[pos] = 1.0;
            a
        };
        let trace = AttentionTrace {
            alphas: vec![mk(4), mk(2), mk(0)],
            real_len: 5,
        };
        let report = attention_diagonality(&[trace]).unwrap();
        assert_eq!(report.spearman, -1.0);
    }

    #[test]
    fn diagonality_pools_episodes() {
        let mk = |pos: usize, len: usize| {
            let mut a = vec![0.0; len];
            a[pos] = 1.0;
            a
        };
        let t1 = AttentionTrace {
            alphas: vec![mk(0, 4), mk(2, 4)],
            real_len: 4,
        };
        let t2 = AttentionTrace {
            alphas: vec![mk(1, 8), mk(6, 8)],
            real_len: 8,
        };
        let report = attention_diagonality(&[t1, t2]).unwrap();
        assert_eq!(report.pairs, 4);
        // ranks of t are (1.5, 3.5, 1.5, 3.5), of m (1, 3, 2, 4):
        // covariance 4 over sqrt(4 * 5)
        assert!((report.spearman - 4.0 / 20.0_f64.sqrt()).abs() < 1e-12);
        // step 0 mean of 0/4 and 1/8; step 1 mean of 2/4 and 6/8
        assert!((report.mean_center_by_step[0] - (0.0 + 0.125) / 2.0).abs() < 1e-12);
        assert!((report.mean_center_by_step[1] - (0.5 + 0.75) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_single_step_reports_zero() {
        // a single (episode, step) pair has constant ranks on both sides
        let trace = AttentionTrace {
            alphas: vec![vec![1.0, 0.0]],
            real_len: 2,
        };
        let report = attention_diagonality(&[trace]).unwrap();
        assert!(report.degenerate);
        assert_eq!(report.spearman, 0.0);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(summarize(&[]).is_err());
        assert!(attention_diagonality(&[]).is_err());
        let g = corridor();
        assert!(oracle_success(&g, &[], 0, 1.0).is_err());
    }
}
