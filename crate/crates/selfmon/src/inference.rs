//! Decoding procedures: greedy, progress-guided backtracking, and
//! state-factored beam search with progress-weighted scores, plus the
//! stitching rule that folds a beam's explored trajectories into one
//! physical walk.

use serde::{Deserialize, Serialize};

use numcore::{ParamSet, Tape, Tensor};

use crate::agent::{
    agent_step, row_linear, AgentNodes, AgentState, BnStats, ModelDims, Observation, StepEnv,
    STOP_ACTION,
};
use crate::encoder::{encode_instruction, EncoderNodes, InstructionEncoding, Mode};
use crate::error::{Error, Result};
use crate::worldgen::NavGraph;

/// Map a progress estimate from (-1, 1) onto (0, 1).
pub fn normalize_progress(p_pm: f64) -> f64 {
    (p_pm + 1.0) / 2.0
}

/// Viewpoint reached by an action at a viewpoint; None is STOP. Action
/// indices follow observation layout: 0 is STOP, k is the (k-1)-th
/// navigable direction in adjacency order.
pub fn action_target(graph: &NavGraph, viewpoint: usize, action: usize) -> Result<Option<usize>> {
    if action == STOP_ACTION {
        return Ok(None);
    }
    graph
        .neighbors(viewpoint)
        .get(action - 1)
        .map(|d| Some(d.target))
        .ok_or_else(|| {
            Error::Data(format!(
                "action {action} out of range at viewpoint {viewpoint}"
            ))
        })
}

/// One expansion's outputs, as plain values.
#[derive(Debug, Clone)]
pub struct StepScores {
    pub p: Vec<f64>,
    pub p_pm: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Anything that can score actions at a viewpoint. The decoders drive a
/// policy; the trained agent implements it, and tests script it.
/// `expand` evaluates one step from a state without committing to an
/// action; `advance` commits one, producing the state the next expansion
/// starts from.
pub trait Policy {
    type State: Clone;
    type Expansion;

    fn start(&mut self, graph: &NavGraph, start: usize) -> Result<Self::State>;
    fn expand(
        &mut self,
        graph: &NavGraph,
        viewpoint: usize,
        state: &Self::State,
    ) -> Result<(StepScores, Self::Expansion)>;
    fn advance(&mut self, expansion: &Self::Expansion, action: usize) -> Result<Self::State>;
}

/// One executed step for the trace export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub viewpoint: usize,
    pub action: usize,
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub p_pm: f64,
}

/// An executed walk with its per-step records. The trajectory includes
/// backtracks, so its length is the physical path length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub trajectory: Vec<usize>,
    pub steps: Vec<StepTrace>,
    /// The agent chose STOP (rather than running out of steps or budget).
    pub stopped: bool,
    /// Progress-guided decoding exhausted every action at some viewpoint
    /// and fell back to the original best.
    pub fallback_used: bool,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = k;
        }
    }
    best
}

fn check_scores(graph: &NavGraph, viewpoint: usize, scores: &StepScores) -> Result<()> {
    let k = graph.neighbors(viewpoint).len() + 1;
    if scores.p.len() != k {
        return Err(Error::Data(format!(
            "policy produced {} action probabilities at viewpoint {viewpoint} with {k} actions",
            scores.p.len()
        )));
    }
    Ok(())
}

/// Argmax action each step until STOP or the step bound.
pub fn greedy_decode<P: Policy>(
    policy: &mut P,
    graph: &NavGraph,
    start: usize,
    max_steps: usize,
) -> Result<TrajectoryLog> {
    let mut state = policy.start(graph, start)?;
    let mut current = start;
    let mut log = TrajectoryLog {
        trajectory: vec![start],
        steps: Vec::new(),
        stopped: false,
        fallback_used: false,
    };
    for t in 0..max_steps {
        let (scores, expansion) = policy.expand(graph, current, &state)?;
        check_scores(graph, current, &scores)?;
        let action = argmax(&scores.p);
        log.steps.push(StepTrace {
            t,
            viewpoint: current,
            action,
            p: scores.p.clone(),
            alpha: scores.alpha.clone(),
            beta: scores.beta.clone(),
            p_pm: scores.p_pm,
        });
        if action == STOP_ACTION {
            log.stopped = true;
            break;
        }
        state = policy.advance(&expansion, action)?;
        current = action_target(graph, current, action)?.unwrap();
        log.trajectory.push(current);
    }
    Ok(log)
}

/// Greedy decoding that tests each move before committing: if the
/// progress estimate at the new viewpoint is lower than at the current
/// one, the agent walks back and tries the next-best untried action.
/// When every action has been tried and rejected, it falls back to the
/// original best and keeps going. Total expansions are bounded by
/// max_steps * (k_max + 1); hitting the bound ends the episode.
pub fn progress_inference<P: Policy>(
    policy: &mut P,
    graph: &NavGraph,
    start: usize,
    max_steps: usize,
    k_max: usize,
) -> Result<TrajectoryLog> {
    let budget = max_steps * (k_max + 1);
    let mut expansions = 0;
    let expand = |policy: &mut P,
                      viewpoint: usize,
                      state: &P::State,
                      expansions: &mut usize|
     -> Result<Option<(StepScores, P::Expansion)>> {
        if *expansions >= budget {
            return Ok(None);
        }
        *expansions += 1;
        let out = policy.expand(graph, viewpoint, state)?;
        check_scores(graph, viewpoint, &out.0)?;
        Ok(Some(out))
    };

    let mut log = TrajectoryLog {
        trajectory: vec![start],
        steps: Vec::new(),
        stopped: false,
        fallback_used: false,
    };
    let state = policy.start(graph, start)?;
    let mut current = start;
    let Some((mut scores, mut expansion)) = expand(policy, current, &state, &mut expansions)?
    else {
        return Ok(log);
    };

    for t in 0..max_steps {
        // STOP is taken exactly when it is the argmax, as in greedy
        // decoding; the retry rule below only reorders moves
        if argmax(&scores.p) == STOP_ACTION {
            log.steps.push(StepTrace {
                t,
                viewpoint: current,
                action: STOP_ACTION,
                p: scores.p.clone(),
                alpha: scores.alpha.clone(),
                beta: scores.beta.clone(),
                p_pm: scores.p_pm,
            });
            log.stopped = true;
            return Ok(log);
        }
        // moves ordered by probability, ties toward lower index
        let mut order: Vec<usize> = (1..scores.p.len()).collect();
        order.sort_by(|&a, &b| scores.p[b].partial_cmp(&scores.p[a]).unwrap().then(a.cmp(&b)));

        let mut accepted: Option<(usize, usize, StepScores, P::Expansion)> = None;
        let mut first_probe: Option<(usize, usize, StepScores, P::Expansion)> = None;
        let mut out_of_budget = false;
        for &k in &order {
            let next = action_target(graph, current, k)?.unwrap();
            let next_state = policy.advance(&expansion, k)?;
            let Some((next_scores, next_expansion)) =
                expand(policy, next, &next_state, &mut expansions)?
            else {
                out_of_budget = true;
                break;
            };
            if next_scores.p_pm >= scores.p_pm {
                accepted = Some((k, next, next_scores, next_expansion));
                break;
            }
            // rejected: the agent physically moved there and back
            log.trajectory.push(next);
            log.trajectory.push(current);
            if first_probe.is_none() {
                first_probe = Some((k, next, next_scores, next_expansion));
            }
        }

        let (k, next, next_scores, next_expansion) = match accepted {
            Some(found) => found,
            None => match first_probe {
                // every action rejected: commit to the original best
                Some(probe) => {
                    log.fallback_used = true;
                    probe
                }
                None => {
                    debug_assert!(out_of_budget);
                    return Ok(log);
                }
            },
        };
        log.steps.push(StepTrace {
            t,
            viewpoint: current,
            action: k,
            p: scores.p.clone(),
            alpha: scores.alpha.clone(),
            beta: scores.beta.clone(),
            p_pm: scores.p_pm,
        });
        log.trajectory.push(next);
        current = next;
        scores = next_scores;
        expansion = next_expansion;
    }
    Ok(log)
}

/// A (possibly finished) beam-search candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub trajectory: Vec<usize>,
    pub score: f64,
    pub steps: Vec<StepTrace>,
    pub finished: bool,
}

#[derive(Debug, Clone)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Every hypothesis that held a beam slot at any depth, plus all
    /// finished ones, in discovery order.
    pub retained: Vec<Hypothesis>,
    /// False when nothing finished within the step bound and the best
    /// active hypothesis was returned instead.
    pub finished_found: bool,
}

/// Candidate ordering: score first, then lexicographic trajectory, then
/// action index. Total and deterministic (scores are never NaN).
fn candidate_key(
    score_a: f64,
    traj_a: &[usize],
    act_a: usize,
    score_b: f64,
    traj_b: &[usize],
    act_b: usize,
) -> std::cmp::Ordering {
    score_b
        .partial_cmp(&score_a)
        .unwrap()
        .then_with(|| traj_a.cmp(traj_b))
        .then_with(|| act_a.cmp(&act_b))
}

/// Breadth-wise search keeping at most `beam_size` hypotheses per depth,
/// at most one per viewpoint. Each action extends the score by
/// log(normalized progress * action probability); `use_pm_score = false`
/// drops the progress factor. STOP candidates compete for slots and
/// retire. The search ends when the step bound is hit, the beam empties,
/// or no active hypothesis can beat the best finished one.
pub fn beam_search<P: Policy>(
    policy: &mut P,
    graph: &NavGraph,
    start: usize,
    max_steps: usize,
    beam_size: usize,
    use_pm_score: bool,
) -> Result<BeamResult> {
    if beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }

    struct Active<S> {
        hyp: Hypothesis,
        state: S,
    }
    let mut actives = vec![Active {
        hyp: Hypothesis {
            trajectory: vec![start],
            score: 0.0,
            steps: Vec::new(),
            finished: false,
        },
        state: policy.start(graph, start)?,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut retained: Vec<Hypothesis> = vec![actives[0].hyp.clone()];

    struct Candidate {
        parent: usize,
        action: usize,
        target: Option<usize>,
        score: f64,
        step: StepTrace,
    }

    for depth in 0..max_steps {
        if actives.is_empty() {
            break;
        }
        let mut expansions = Vec::with_capacity(actives.len());
        let mut candidates: Vec<Candidate> = Vec::new();
        for (idx, active) in actives.iter().enumerate() {
            let viewpoint = *active.hyp.trajectory.last().unwrap();
            let (scores, expansion) = policy.expand(graph, viewpoint, &active.state)?;
            check_scores(graph, viewpoint, &scores)?;
            let pm_factor = if use_pm_score {
                normalize_progress(scores.p_pm)
            } else {
                1.0
            };
            for (k, &p_k) in scores.p.iter().enumerate() {
                candidates.push(Candidate {
                    parent: idx,
                    action: k,
                    target: action_target(graph, viewpoint, k)?,
                    score: active.hyp.score + (pm_factor * p_k).ln(),
                    step: StepTrace {
                        t: depth,
                        viewpoint,
                        action: k,
                        p: scores.p.clone(),
                        alpha: scores.alpha.clone(),
                        beta: scores.beta.clone(),
                        p_pm: scores.p_pm,
                    },
                });
            }
            expansions.push(expansion);
        }

        candidates.sort_by(|a, b| {
            candidate_key(
                a.score,
                &actives[a.parent].hyp.trajectory,
                a.action,
                b.score,
                &actives[b.parent].hyp.trajectory,
                b.action,
            )
        });

        // state factoring: among move candidates landing on the same
        // viewpoint keep only the best-ordered one
        let mut seen = std::collections::HashSet::new();
        candidates.retain(|c| match c.target {
            Some(v) => seen.insert(v),
            None => true,
        });
        candidates.truncate(beam_size);

        let mut next_actives = Vec::new();
        for c in candidates {
            let parent = &actives[c.parent];
            let mut hyp = Hypothesis {
                trajectory: parent.hyp.trajectory.clone(),
                score: c.score,
                steps: parent.hyp.steps.clone(),
                finished: c.target.is_none(),
            };
            hyp.steps.push(c.step);
            match c.target {
                None => {
                    finished.push(hyp.clone());
                    retained.push(hyp);
                }
                Some(v) => {
                    hyp.trajectory.push(v);
                    retained.push(hyp.clone());
                    next_actives.push(Active {
                        state: policy.advance(&expansions[c.parent], c.action)?,
                        hyp,
                    });
                }
            }
        }
        actives = next_actives;

        // scores only shrink with depth, so once the best active is no
        // better than the best finished, searching further cannot win
        if let Some(best_finished) = finished.iter().map(|h| h.score).fold(None, |m: Option<f64>, s| {
            Some(m.map_or(s, |m| m.max(s)))
        }) {
            let best_active = actives.iter().map(|a| a.hyp.score).fold(f64::NEG_INFINITY, f64::max);
            if actives.is_empty() || best_active <= best_finished {
                break;
            }
        }
    }

    let finished_found = !finished.is_empty();
    let pool: Vec<&Hypothesis> = if finished_found {
        finished.iter().collect()
    } else {
        actives.iter().map(|a| &a.hyp).collect()
    };
    let best = pool
        .into_iter()
        .min_by(|a, b| {
            candidate_key(a.score, &a.trajectory, 0, b.score, &b.trajectory, 0)
        })
        .ok_or_else(|| Error::Data("beam search retained no hypotheses".into()))?
        .clone();
    // actives that never finished are still explored trajectories
    for a in actives {
        retained.push(a.hyp);
    }
    Ok(BeamResult {
        best,
        retained,
        finished_found,
    })
}

fn common_prefix_len(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Fold a beam's explored trajectories into one physical walk: cover
/// each candidate trajectory in an order that maximizes shared prefixes,
/// backtracking along visited edges between them, and walk the final
/// (selected) trajectory last so the walk ends where it ends.
pub fn stitch_full_trajectory(
    retained: &[Hypothesis],
    final_hyp: &Hypothesis,
    graph: &NavGraph,
) -> Result<Vec<usize>> {
    let start = *final_hyp
        .trajectory
        .first()
        .ok_or_else(|| Error::Data("final hypothesis has an empty trajectory".into()))?;
    let mut pending: Vec<&[usize]> = Vec::new();
    for h in retained {
        if h.trajectory.first() != Some(&start) {
            return Err(Error::Data(
                "stitching requires all hypotheses to share the start viewpoint".into(),
            ));
        }
        let t = h.trajectory.as_slice();
        if t != final_hyp.trajectory.as_slice() && !pending.contains(&t) {
            pending.push(t);
        }
    }

    let mut walk: Vec<usize> = vec![start];
    let start_only = [start];
    let mut prev: &[usize] = &start_only;
    let mut order: Vec<&[usize]> = Vec::with_capacity(pending.len() + 1);
    while !pending.is_empty() {
        let (i, _) = pending
            .iter()
            .enumerate()
            .max_by_key(|(i, t)| (common_prefix_len(prev, t), usize::MAX - i))
            .unwrap();
        prev = pending.remove(i);
        order.push(prev);
    }
    order.push(&final_hyp.trajectory);

    let mut at: &[usize] = &start_only;
    for t in order {
        let l = common_prefix_len(at, t);
        debug_assert!(l >= 1, "hypotheses share the start viewpoint");
        // walk back from the end of the previous trajectory to the fork
        for i in (l - 1..at.len() - 1).rev() {
            walk.push(at[i]);
        }
        walk.extend_from_slice(&t[l..]);
        at = t;
    }
    // the stitched walk must be physically executable
    graph.walk_length(&walk)?;
    debug_assert_eq!(walk.last(), final_hyp.trajectory.last());
    Ok(walk)
}

/// The trained agent as a policy. Expansions run eval-mode forward
/// passes on throwaway tapes; the instruction encoding is computed once
/// and reused as a constant, which is exact because it does not depend
/// on agent state.
pub struct AgentPolicy<'a> {
    params: &'a ParamSet,
    dims: &'a ModelDims,
    stats: &'a BnStats,
    instruction: &'a [usize],
    cached_x: Option<(Tensor, usize)>,
}

#[derive(Debug, Clone)]
pub struct AgentInferState {
    pub h: Tensor,
    pub c: Tensor,
    pub prev_action: Tensor,
}

pub struct AgentExpansion {
    h: Tensor,
    c: Tensor,
    g_proj: Tensor,
}

impl<'a> AgentPolicy<'a> {
    pub fn new(
        params: &'a ParamSet,
        dims: &'a ModelDims,
        stats: &'a BnStats,
        instruction: &'a [usize],
    ) -> Self {
        AgentPolicy {
            params,
            dims,
            stats,
            instruction,
            cached_x: None,
        }
    }

    fn encoding(&mut self, tape: &mut Tape) -> Result<InstructionEncoding> {
        if self.cached_x.is_none() {
            let mut scratch = Tape::new();
            let binding = self.params.bind(&mut scratch);
            let nodes = EncoderNodes::bind(self.params, &binding)?;
            let enc = encode_instruction(
                &mut scratch,
                &nodes,
                self.instruction,
                self.dims.l_max,
                &mut Mode::Eval,
            )?;
            self.cached_x = Some((scratch.value(enc.x).clone(), enc.length));
        }
        let (x, length) = self.cached_x.as_ref().unwrap();
        let mut mask = vec![false; self.dims.l_max];
        for m in mask.iter_mut().take(*length) {
            *m = true;
        }
        Ok(InstructionEncoding {
            x: tape.leaf(x.clone()),
            length: *length,
            mask,
        })
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        Ok(self
            .params
            .by_name(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))?
            .tensor
            .clone())
    }
}

impl Policy for AgentPolicy<'_> {
    type State = AgentInferState;
    type Expansion = AgentExpansion;

    fn start(&mut self, _graph: &NavGraph, _start: usize) -> Result<AgentInferState> {
        Ok(AgentInferState {
            h: Tensor::zeros(&[self.dims.d_h]),
            c: Tensor::zeros(&[self.dims.d_h]),
            prev_action: self.tensor("act_embed.start")?,
        })
    }

    fn expand(
        &mut self,
        graph: &NavGraph,
        viewpoint: usize,
        state: &AgentInferState,
    ) -> Result<(StepScores, AgentExpansion)> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape);
        let nodes = AgentNodes::bind(self.params, &binding, self.dims)?;
        let enc = self.encoding(&mut tape)?;
        let obs = Observation::from_graph(graph, viewpoint, self.dims.d_v)?;
        let agent_state = AgentState::from_values(
            &mut tape,
            state.h.clone(),
            state.c.clone(),
            state.prev_action.clone(),
        );
        let mut env = StepEnv::new(Mode::Eval, self.stats);
        let out = agent_step(&mut tape, &nodes, &mut env, &enc, &obs, &agent_state)?;
        let scores = StepScores {
            p: tape.value(out.p).values().to_vec(),
            p_pm: tape.value(out.p_pm).values()[0],
            alpha: tape.value(out.alpha).values().to_vec(),
            beta: tape.value(out.beta).values().to_vec(),
        };
        let expansion = AgentExpansion {
            h: tape.value(out.state.h).clone(),
            c: tape.value(out.state.c).clone(),
            g_proj: tape.value(out.g_proj).clone(),
        };
        Ok((scores, expansion))
    }

    fn advance(&mut self, ex: &AgentExpansion, action: usize) -> Result<AgentInferState> {
        let mut tape = Tape::new();
        let g = tape.leaf(ex.g_proj.clone());
        let w = tape.leaf(self.tensor("act_embed.w")?);
        let b = tape.leaf(self.tensor("act_embed.b")?);
        let row = tape.row(g, action)?;
        let emb = row_linear(&mut tape, row, w, b)?;
        Ok(AgentInferState {
            h: ex.h.clone(),
            c: ex.c.clone(),
            prev_action: tape.value(emb).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{NavigableDirection, Viewpoint};
    use std::collections::HashMap;

    /// Graph from an undirected edge list, unit feature, 1 m spacing on
    /// a line (positions only matter for metrics, not these tests).
    fn graph_from_edges(n: usize, edges: &[(usize, usize)]) -> NavGraph {
        let viewpoints: Vec<Viewpoint> = (0..n)
            .map(|i| Viewpoint {
                id: i,
                position: [i as f64, 0.0, 0.0],
                landmark: 0,
            })
            .collect();
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v) in edges {
            for (a, b) in [(u, v), (v, u)] {
                adjacency[a].push(NavigableDirection {
                    target: b,
                    heading: 0.0,
                    elevation: 0.0,
                    feature: Tensor::zeros(&[1]),
                });
            }
        }
        for a in adjacency.iter_mut() {
            a.sort_by_key(|d| d.target);
        }
        NavGraph::new(1, viewpoints, adjacency).unwrap()
    }

    /// Scripted policy: scores keyed by (viewpoint, step index). The
    /// state is the step index, so the script is Markov in (viewpoint, t).
    struct Script {
        table: HashMap<(usize, usize), (Vec<f64>, f64)>,
        expansions: usize,
    }

    impl Script {
        fn new(entries: &[((usize, usize), (&[f64], f64))]) -> Self {
            Script {
                table: entries
                    .iter()
                    .map(|(k, (p, pm))| (*k, (p.to_vec(), *pm)))
                    .collect(),
                expansions: 0,
            }
        }
    }

    impl Policy for Script {
        type State = usize;
        type Expansion = usize;

        fn start(&mut self, _graph: &NavGraph, _start: usize) -> Result<usize> {
            Ok(0)
        }

        fn expand(
            &mut self,
            _graph: &NavGraph,
            viewpoint: usize,
            state: &usize,
        ) -> Result<(StepScores, usize)> {
            self.expansions += 1;
            let (p, p_pm) = self
                .table
                .get(&(viewpoint, *state))
                .unwrap_or_else(|| panic!("no script entry for ({viewpoint}, {state})"))
                .clone();
            Ok((
                StepScores {
                    p,
                    p_pm,
                    alpha: vec![],
                    beta: vec![],
                },
                state + 1,
            ))
        }

        fn advance(&mut self, expansion: &usize, _action: usize) -> Result<usize> {
            Ok(*expansion)
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_progress(0.0), 0.5);
        assert_eq!(normalize_progress(0.9), 0.95);
        let eps = 1e-6;
        assert!((normalize_progress(-1.0 + eps) - eps / 2.0).abs() < 1e-15);
    }

    #[test]
    fn action_targets_follow_adjacency() {
        let g = graph_from_edges(3, &[(0, 1), (0, 2)]);
        assert_eq!(action_target(&g, 0, 0).unwrap(), None);
        assert_eq!(action_target(&g, 0, 1).unwrap(), Some(1));
        assert_eq!(action_target(&g, 0, 2).unwrap(), Some(2));
        assert!(action_target(&g, 0, 3).is_err());
    }

    #[test]
    fn greedy_follows_corridor_and_stops() {
        let g = graph_from_edges(3, &[(0, 1), (1, 2)]);
        let mut policy = Script::new(&[
            ((0, 0), (&[0.1, 0.9], 0.0)),
            ((1, 1), (&[0.2, 0.1, 0.7], 0.2)),
            ((2, 2), (&[0.8, 0.2], 0.4)),
        ]);
        let log = greedy_decode(&mut policy, &g, 0, 10).unwrap();
        assert_eq!(log.trajectory, vec![0, 1, 2]);
        assert!(log.stopped);
        assert_eq!(log.steps.len(), 3);
        assert_eq!(log.steps[2].action, STOP_ACTION);
        assert_eq!(log.steps[1].p_pm, 0.2);
    }

    #[test]
    fn greedy_breaks_ties_toward_lower_action() {
        let g = graph_from_edges(2, &[(0, 1)]);
        let mut policy = Script::new(&[((0, 0), (&[0.5, 0.5], 0.0))]);
        let log = greedy_decode(&mut policy, &g, 0, 10).unwrap();
        assert_eq!(log.trajectory, vec![0]);
        assert!(log.stopped);
    }

    #[test]
    fn greedy_respects_step_bound() {
        let g = graph_from_edges(2, &[(0, 1)]);
        let mut policy = Script::new(&[
            ((0, 0), (&[0.1, 0.9], 0.0)),
            ((1, 1), (&[0.1, 0.9], 0.0)),
            ((0, 2), (&[0.1, 0.9], 0.0)),
            ((1, 3), (&[0.1, 0.9], 0.0)),
        ]);
        let log = greedy_decode(&mut policy, &g, 0, 4).unwrap();
        assert_eq!(log.trajectory, vec![0, 1, 0, 1, 0]);
        assert!(!log.stopped);
    }

    #[test]
    fn progress_inference_matches_greedy_when_monotone() {
        let g = graph_from_edges(3, &[(0, 1), (1, 2)]);
        let entries: &[((usize, usize), (&[f64], f64))] = &[
            ((0, 0), (&[0.1, 0.9], 0.0)),
            ((1, 1), (&[0.2, 0.1, 0.7], 0.3)),
            ((2, 2), (&[0.8, 0.2], 0.6)),
        ];
        let mut a = Script::new(entries);
        let mut b = Script::new(entries);
        let greedy = greedy_decode(&mut a, &g, 0, 10).unwrap();
        let guided = progress_inference(&mut b, &g, 0, 10, 5).unwrap();
        assert_eq!(greedy.trajectory, guided.trajectory);
        assert_eq!(greedy.steps, guided.steps);
        assert!(!guided.fallback_used);
    }

    #[test]
    fn progress_inference_backtracks_to_better_branch() {
        // fork: 0 connects to 1 and 2; the agent prefers 1 but progress
        // drops there, so it walks back and takes 2
        let g = graph_from_edges(3, &[(0, 1), (0, 2)]);
        let mut policy = Script::new(&[
            ((0, 0), (&[0.05, 0.6, 0.35], 0.2)),
            ((1, 1), (&[0.1, 0.9], 0.1)), // progress drops: rejected
            ((2, 1), (&[0.8, 0.2], 0.5)), // progress rises: accepted
        ]);
        let log = progress_inference(&mut policy, &g, 0, 10, 5).unwrap();
        assert_eq!(log.trajectory, vec![0, 1, 0, 2]);
        assert!(!log.fallback_used);
        assert_eq!(log.steps[0].action, 2); // the accepted action at 0
        // at 2 the argmax is STOP, so the episode ends there
        assert!(log.stopped);
    }

    #[test]
    fn progress_inference_takes_stop_only_as_argmax() {
        // STOP is second best at the start; rejecting the best move must
        // lead to the fallback, not to stopping
        let g = graph_from_edges(2, &[(0, 1)]);
        let mut policy = Script::new(&[
            ((0, 0), (&[0.4, 0.6], 0.5)),
            ((1, 1), (&[0.9, 0.1], 0.1)), // rejected on probe
        ]);
        let log = progress_inference(&mut policy, &g, 0, 10, 5).unwrap();
        assert!(log.fallback_used);
        assert_eq!(log.trajectory, vec![0, 1, 0, 1]);
        // after the fallback commits, STOP is the argmax at 1
        assert!(log.stopped);
        assert_eq!(log.steps.len(), 2);
        assert_eq!(log.steps[0].action, 1);
        assert_eq!(log.steps[1].action, STOP_ACTION);
    }

    #[test]
    fn progress_inference_falls_back_when_exhausted() {
        let g = graph_from_edges(3, &[(0, 1), (0, 2)]);
        let mut policy = Script::new(&[
            ((0, 0), (&[0.05, 0.6, 0.35], 0.9)),
            ((1, 1), (&[0.9, 0.1], 0.1)), // rejected; STOP argmax after fallback
            ((2, 1), (&[0.1, 0.9], 0.2)), // rejected
        ]);
        let log = progress_inference(&mut policy, &g, 0, 10, 5).unwrap();
        assert!(log.fallback_used);
        // probes 1 and 2 each walk out and back, then the fallback
        // commits to 1
        assert_eq!(log.trajectory, vec![0, 1, 0, 2, 0, 1]);
        assert!(log.stopped);
    }

    #[test]
    fn progress_inference_expansion_budget_holds() {
        // progress always drops, STOP never preferred: worst case probing
        let g = graph_from_edges(3, &[(0, 1), (0, 2), (1, 2)]);
        let mut entries: Vec<((usize, usize), (&[f64], f64))> = Vec::new();
        for vp in 0..3 {
            for t in 0..200 {
                entries.push(((vp, t), (&[0.0, 0.5, 0.5], 1.0 - t as f64 * 0.004)));
            }
        }
        let mut policy = Script::new(&entries);
        let max_steps = 10;
        let k_max = 2;
        let log = progress_inference(&mut policy, &g, 0, max_steps, k_max).unwrap();
        assert!(policy.expansions <= max_steps * (k_max + 1));
        assert!(!log.stopped);
    }

    #[test]
    fn beam_size_one_equals_greedy() {
        let g = graph_from_edges(4, &[(0, 1), (1, 2), (1, 3)]);
        let entries: &[((usize, usize), (&[f64], f64))] = &[
            ((0, 0), (&[0.2, 0.8], 0.0)),
            ((1, 1), (&[0.1, 0.3, 0.4, 0.2], 0.2)),
            ((2, 2), (&[0.6, 0.4], 0.4)),
        ];
        let mut a = Script::new(entries);
        let mut b = Script::new(entries);
        let greedy = greedy_decode(&mut a, &g, 0, 6).unwrap();
        let beam = beam_search(&mut b, &g, 0, 6, 1, true).unwrap();
        assert_eq!(greedy.trajectory, vec![0, 1, 2]);
        assert_eq!(beam.best.trajectory, greedy.trajectory);
        assert!(beam.finished_found == greedy.stopped);
    }

    #[test]
    fn beam_size_one_equals_greedy_when_stop_wins_immediately() {
        let g = graph_from_edges(2, &[(0, 1)]);
        let entries: &[((usize, usize), (&[f64], f64))] = &[((0, 0), (&[0.7, 0.3], 0.0))];
        let mut a = Script::new(entries);
        let mut b = Script::new(entries);
        let greedy = greedy_decode(&mut a, &g, 0, 6).unwrap();
        let beam = beam_search(&mut b, &g, 0, 6, 1, true).unwrap();
        assert_eq!(beam.best.trajectory, greedy.trajectory);
        assert_eq!(beam.best.trajectory, vec![0]);
        assert!(beam.finished_found);
    }

    #[test]
    fn beam_factors_states_by_viewpoint() {
        // diamond: 0-1-3 and 0-2-3; both depth-2 candidates land on 3,
        // only the better prefix may keep it. Back-moves rank below the
        // beam cutoff of 2, keeping the script small.
        let g = graph_from_edges(4, &[(0, 1), (0, 2), (1, 3), (2, 3)]);
        let mut policy = Script::new(&[
            ((0, 0), (&[0.01, 0.54, 0.45], 0.0)),
            ((1, 1), (&[0.25, 0.05, 0.7], 0.0)), // to 3 with 0.7
            ((2, 1), (&[0.25, 0.05, 0.7], 0.0)), // to 3 with 0.7
            ((3, 2), (&[0.9, 0.04, 0.06], 0.0)),
        ]);
        let result = beam_search(&mut policy, &g, 0, 5, 2, false).unwrap();
        let at_depth2: Vec<&Hypothesis> = result
            .retained
            .iter()
            .filter(|h| h.trajectory.len() == 3 && !h.finished)
            .collect();
        assert_eq!(at_depth2.len(), 1, "one retained hypothesis at viewpoint 3");
        // the surviving prefix is the higher-probability branch through 1
        assert_eq!(at_depth2[0].trajectory, vec![0, 1, 3]);
        // and the best finished trajectory went through it
        assert_eq!(result.best.trajectory, vec![0, 1, 3]);
    }

    #[test]
    fn beam_matches_exhaustive_enumeration_on_fork() {
        // scores are Markov in (viewpoint, t), so state factoring is
        // lossless and a wide beam must find the exact argmax trajectory
        let g = graph_from_edges(4, &[(0, 1), (0, 2), (2, 3)]);
        let entries: &[((usize, usize), (&[f64], f64))] = &[
            ((0, 0), (&[0.1, 0.5, 0.4], 0.0)),
            ((1, 1), (&[0.6, 0.4], 0.2)),
            ((2, 1), (&[0.2, 0.3, 0.5], 0.6)),
            ((3, 2), (&[0.9, 0.1], 0.8)),
            ((0, 2), (&[0.5, 0.25, 0.25], 0.1)),
            ((1, 3), (&[0.9, 0.1], 0.1)),
            ((2, 3), (&[0.5, 0.3, 0.2], 0.1)),
            ((0, 4), (&[0.9, 0.05, 0.05], 0.1)),
            ((3, 4), (&[0.9, 0.1], 0.1)),
            ((1, 2), (&[0.8, 0.2], 0.1)),
            ((2, 2), (&[0.6, 0.2, 0.2], 0.1)),
            ((3, 3), (&[0.7, 0.3], 0.1)),
            ((0, 3), (&[0.6, 0.2, 0.2], 0.1)),
        ];
        let max_steps = 4;

        // exhaustive: depth-first over all action sequences ending in STOP
        fn enumerate(
            policy: &mut Script,
            g: &NavGraph,
            vp: usize,
            state: usize,
            depth: usize,
            max_steps: usize,
            score: f64,
            traj: &mut Vec<usize>,
            best: &mut Option<(f64, Vec<usize>)>,
        ) {
            if depth == max_steps {
                return;
            }
            let (scores, next_state) = policy.expand(g, vp, &state).unwrap();
            for (k, &p_k) in scores.p.iter().enumerate() {
                let s = score + (normalize_progress(scores.p_pm) * p_k).ln();
                match action_target(g, vp, k).unwrap() {
                    None => {
                        let better = match best {
                            None => true,
                            Some((bs, bt)) => {
                                s > *bs || (s == *bs && traj.as_slice() < bt.as_slice())
                            }
                        };
                        if better {
                            *best = Some((s, traj.clone()));
                        }
                    }
                    Some(v) => {
                        traj.push(v);
                        enumerate(policy, g, v, next_state, depth + 1, max_steps, s, traj, best);
                        traj.pop();
                    }
                }
            }
        }

        let mut oracle_policy = Script::new(entries);
        let mut best = None;
        let mut traj = vec![0];
        enumerate(&mut oracle_policy, &g, 0, 0, 0, max_steps, 0.0, &mut traj, &mut best);
        let (oracle_score, oracle_traj) = best.unwrap();

        let mut beam_policy = Script::new(entries);
        let result = beam_search(&mut beam_policy, &g, 0, max_steps, 50, true).unwrap();
        assert!(result.finished_found);
        assert_eq!(result.best.trajectory, oracle_traj);
        assert!((result.best.score - oracle_score).abs() < 1e-12);
    }

    #[test]
    fn pm_scoring_changes_beam_ranking() {
        // two branches with equal action probability; progress separates
        // them only when the progress factor is enabled
        let g = graph_from_edges(3, &[(0, 1), (0, 2)]);
        let entries: &[((usize, usize), (&[f64], f64))] = &[
            ((0, 0), (&[0.2, 0.4, 0.4], 0.0)),
            ((1, 1), (&[0.6, 0.4], -0.5)), // low progress branch
            ((2, 1), (&[0.5, 0.5], 0.9)),  // high progress branch
        ];
        let mut with = Script::new(entries);
        let mut without = Script::new(entries);
        let scored = beam_search(&mut with, &g, 0, 3, 2, true).unwrap();
        let unscored = beam_search(&mut without, &g, 0, 3, 2, false).unwrap();
        assert_eq!(scored.best.trajectory, vec![0, 2]);
        // without the progress factor, branch 1 wins on action
        // probability alone (0.6 stop beats 0.5 stop), tie broken the
        // same way both runs
        assert_eq!(unscored.best.trajectory, vec![0, 1]);
    }

    #[test]
    fn stitch_single_hypothesis_is_identity() {
        let g = graph_from_edges(3, &[(0, 1), (1, 2)]);
        let h = Hypothesis {
            trajectory: vec![0, 1, 2],
            score: -1.0,
            steps: vec![],
            finished: true,
        };
        let walk = stitch_full_trajectory(&[h.clone()], &h, &g).unwrap();
        assert_eq!(walk, vec![0, 1, 2]);
    }

    #[test]
    fn stitch_covers_fork_then_final_branch() {
        // 0-1, 1-2 (branch A), 1-3, 3-4 (branch B, final)
        let g = graph_from_edges(5, &[(0, 1), (1, 2), (1, 3), (3, 4)]);
        let a = Hypothesis {
            trajectory: vec![0, 1, 2],
            score: -2.0,
            steps: vec![],
            finished: true,
        };
        let b = Hypothesis {
            trajectory: vec![0, 1, 3, 4],
            score: -1.0,
            steps: vec![],
            finished: true,
        };
        let walk = stitch_full_trajectory(&[a, b.clone()], &b, &g).unwrap();
        assert_eq!(walk, vec![0, 1, 2, 1, 3, 4]);
        assert_eq!(walk.last(), b.trajectory.last());
    }

    #[test]
    fn stitch_handles_prefix_hypotheses() {
        let g = graph_from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
        let prefix = Hypothesis {
            trajectory: vec![0, 1],
            score: -0.5,
            steps: vec![],
            finished: false,
        };
        let full = Hypothesis {
            trajectory: vec![0, 1, 2, 3],
            score: -1.0,
            steps: vec![],
            finished: true,
        };
        let walk = stitch_full_trajectory(&[prefix, full.clone()], &full, &g).unwrap();
        assert_eq!(walk, vec![0, 1, 2, 3]);
    }

    #[test]
    fn stitch_endpoint_matches_final_on_beam_output() {
        // every viewpoint here has exactly two neighbors
        let g = graph_from_edges(5, &[(0, 1), (0, 2), (1, 3), (2, 4), (3, 4)]);
        let mut entries: Vec<((usize, usize), (&[f64], f64))> = Vec::new();
        let p3: &[f64] = &[0.3, 0.3, 0.4];
        for t in 0..8 {
            for vp in 0..5 {
                entries.push(((vp, t), (p3, 0.1 * vp as f64)));
            }
        }
        let mut policy = Script::new(&entries);
        let result = beam_search(&mut policy, &g, 0, 6, 3, true).unwrap();
        let walk = stitch_full_trajectory(&result.retained, &result.best, &g).unwrap();
        assert_eq!(walk.last(), result.best.trajectory.last());
        // the stitched walk is at least as long as the selected one
        assert!(walk.len() >= result.best.trajectory.len());
    }
}
