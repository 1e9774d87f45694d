//! Episode-level evaluation shared by the training loop and the CLI.

use crate::agent::{BnStats, ModelDims};
use crate::error::{Error, Result};
use crate::inference::{
    beam_search, greedy_decode, progress_inference, stitch_full_trajectory, AgentPolicy,
    TrajectoryLog,
};
use crate::metrics::{evaluate_trajectory, summarize, EpisodeEval, SplitSummary};
use crate::worldgen::{Benchmark, Episode, Split};
use numcore::ParamSet;
use serde::{Deserialize, Serialize};

/// How actions are selected at test time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    Progress,
    Beam { beam_size: usize, use_pm_score: bool },
}

impl DecodeMode {
    pub fn label(&self) -> String {
        match self {
            DecodeMode::Greedy => "greedy".into(),
            DecodeMode::Progress => "progress".into(),
            DecodeMode::Beam {
                beam_size,
                use_pm_score,
            } => {
                if *use_pm_score {
                    format!("beam{beam_size}")
                } else {
                    format!("beam{beam_size}-nopm")
                }
            }
        }
    }
}

/// One evaluated episode: the rollout, its metrics, and (for beam
/// search) the physically executable stitched walk.
#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub episode_id: usize,
    pub split: Split,
    pub log: TrajectoryLog,
    pub eval: EpisodeEval,
    /// Beam search only: stitched walk and its metrics.
    pub stitched: Option<(Vec<usize>, EpisodeEval)>,
    pub instruction_len: usize,
}

/// Run one episode under the given decode mode and score the result.
pub fn run_episode(
    params: &ParamSet,
    dims: &ModelDims,
    stats: &BnStats,
    bench: &Benchmark,
    episode: &Episode,
    mode: DecodeMode,
    max_steps: usize,
) -> Result<EpisodeRun> {
    let graph = bench.world(episode.world_id)?;
    let mut policy = AgentPolicy::new(params, dims, stats, &episode.instruction);
    let (log, stitched_walk) = match mode {
        DecodeMode::Greedy => (
            greedy_decode(&mut policy, graph, episode.start, max_steps)?,
            None,
        ),
        DecodeMode::Progress => (
            progress_inference(&mut policy, graph, episode.start, max_steps, dims.k_max)?,
            None,
        ),
        DecodeMode::Beam {
            beam_size,
            use_pm_score,
        } => {
            let result = beam_search(
                &mut policy,
                graph,
                episode.start,
                max_steps,
                beam_size,
                use_pm_score,
            )?;
            let walk = stitch_full_trajectory(&result.retained, &result.best, graph)?;
            let log = TrajectoryLog {
                trajectory: result.best.trajectory.clone(),
                steps: result.best.steps.clone(),
                stopped: result.finished_found,
                fallback_used: false,
            };
            (log, Some(walk))
        }
    };
    let eval = evaluate_trajectory(
        graph,
        episode.id,
        episode.start,
        episode.goal,
        &log.trajectory,
        bench.success_threshold_m,
    )?;
    let stitched = match stitched_walk {
        Some(walk) => {
            let stitched_eval = evaluate_trajectory(
                graph,
                episode.id,
                episode.start,
                episode.goal,
                &walk,
                bench.success_threshold_m,
            )?;
            Some((walk, stitched_eval))
        }
        None => None,
    };
    Ok(EpisodeRun {
        episode_id: episode.id,
        split: episode.split,
        log,
        eval,
        stitched,
        instruction_len: episode.instruction.len(),
    })
}

/// Evaluate every episode in a split and aggregate the metrics.
pub fn evaluate_split(
    params: &ParamSet,
    dims: &ModelDims,
    stats: &BnStats,
    bench: &Benchmark,
    split: Split,
    mode: DecodeMode,
    max_steps: usize,
) -> Result<(SplitSummary, Vec<EpisodeRun>)> {
    let episodes = bench.episodes_for(split);
    if episodes.is_empty() {
        return Err(Error::Data(format!("split {split} has no episodes")));
    }
    let mut runs = Vec::with_capacity(episodes.len());
    for episode in episodes {
        runs.push(run_episode(
            params, dims, stats, bench, episode, mode, max_steps,
        )?);
    }
    let evals: Vec<EpisodeEval> = runs.iter().map(|r| r.eval.clone()).collect();
    let summary = summarize(&evals)?;
    Ok((summary, runs))
}
