//! Episode rollouts, the joint action/progress objective, mini-batch
//! Adam training, and checkpointing.

use crate::agent::{
    action_embedding, agent_step, init_params, AgentNodes, AgentState, BnBatchRecord, BnSite,
    BnStats, ModelDims, Observation, StepEnv, STOP_ACTION,
};
use crate::encoder::{encode_instruction, EncoderNodes, Mode};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, DecodeMode};
use crate::io;
use crate::rng::{stream, tag};
use crate::worldgen::{Benchmark, Episode, NavGraph, Split};
use numcore::{
    adam_step, clip_global_norm, AdamConfig, AdamState, NodeId, ParamBinding, ParamSet, Tape,
    Tensor,
};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_SCHEMA_VERSION: u64 = 1;

/// Objective settings shared by every rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight on the action cross-entropy term; 1 - lambda weighs the
    /// progress regression term.
    pub lambda: f64,
    /// Distance under which an episode counts as successful; also the
    /// clamp point of the progress target.
    pub success_threshold_m: f64,
    pub max_steps: usize,
}

impl LossConfig {
    pub fn new(lambda: f64, success_threshold_m: f64, max_steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {lambda}"
            )));
        }
        if !(success_threshold_m > 0.0) {
            return Err(Error::Config(format!(
                "success threshold must be positive, got {success_threshold_m}"
            )));
        }
        if max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(LossConfig {
            lambda,
            success_threshold_m,
            max_steps,
        })
    }
}

/// Progress the agent should report at distance `d_now` from the goal,
/// for an episode that started at distance `d_start`. 0 at the start,
/// 1 inside the success region, negative when moving away.
pub fn progress_target(d_start: f64, d_now: f64, threshold: f64) -> Result<f64> {
    if !(d_start > 0.0) {
        return Err(Error::Data(format!(
            "progress target needs d_start > 0, got {d_start}"
        )));
    }
    if d_now < threshold {
        Ok(1.0)
    } else {
        Ok((d_start - d_now) / d_start)
    }
}

/// Ground-truth action: STOP at the goal, otherwise the move that
/// minimizes remaining shortest-path distance measured through the edge
/// (edge length + distance from the edge's target). Minimizing the bare
/// target-to-goal distance instead can leave the shortest path, which
/// would make the teacher contradict the instruction it is paired with.
/// Adjacency order is sorted by target id, so a strict-less scan breaks
/// cost ties toward the lowest id.
pub fn teacher_action(graph: &NavGraph, current: usize, goal: usize) -> Result<usize> {
    if current == goal {
        return Ok(STOP_ACTION);
    }
    let neighbors = graph.neighbors(current);
    let mut best: Option<(usize, f64)> = None;
    for (i, dir) in neighbors.iter().enumerate() {
        let cost =
            graph.euclidean(current, dir.target) + graph.shortest_path_distance(dir.target, goal)?;
        if best.map_or(true, |(_, bc)| cost < bc) {
            best = Some((i + 1, cost));
        }
    }
    best.map(|(action, _)| action)
        .ok_or_else(|| Error::Data(format!("viewpoint {current} has no navigable directions")))
}

/// Encoder and decoder parameters bound onto one tape.
pub struct BoundNet {
    pub enc: EncoderNodes,
    pub agent: AgentNodes,
}

impl BoundNet {
    pub fn bind(
        tape: &mut Tape,
        params: &ParamSet,
        dims: &ModelDims,
    ) -> Result<(Self, ParamBinding)> {
        let binding = params.bind(tape);
        let enc = EncoderNodes::bind(params, &binding)?;
        let agent = AgentNodes::bind(params, &binding, dims)?;
        Ok((BoundNet { enc, agent }, binding))
    }
}

/// Whether the environment is stepped with sampled or teacher actions.
/// The loss targets the teacher action either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSource {
    Teacher,
    Sample,
}

/// Observed values for one rollout step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub viewpoint: usize,
    /// Action actually executed.
    pub action: usize,
    /// Ground-truth action the loss targets.
    pub teacher: usize,
    /// Progress target, recorded before acting.
    pub y_pm: f64,
    pub d_now: f64,
    pub p: Vec<f64>,
    pub p_pm: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Tape nodes the objective needs from one step.
#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    pub logits: NodeId,
    pub p_pm: NodeId,
    pub teacher: usize,
    pub y_pm: f64,
}

/// Scalar loss nodes living on the rollout's tape. `ce` and `pm` are the
/// unweighted component sums; `total` is their lambda-weighted blend.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub ce: NodeId,
    pub pm: NodeId,
}

/// One completed rollout with everything needed to compute gradients.
pub struct Rollout {
    pub steps: Vec<StepRecord>,
    pub trajectory: Vec<usize>,
    pub stopped: bool,
    pub loss: LossNodes,
    pub bn_records: Vec<BnBatchRecord>,
}

fn sum_nodes(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// L = lambda * sum_t -log p_t(k*) + (1 - lambda) * sum_t (y_t - p_pm,t)^2.
/// Bare sums over executed steps, no length normalization. The log
/// probability goes through log-softmax, never a literal log of p.
pub fn episode_loss(tape: &mut Tape, steps: &[StepNodes], lambda: f64) -> Result<LossNodes> {
    if steps.is_empty() {
        return Err(Error::Data("episode loss needs at least one step".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let mut logp_terms = Vec::with_capacity(steps.len());
    let mut pm_terms = Vec::with_capacity(steps.len());
    for s in steps {
        let logp = tape.log_softmax(s.logits)?;
        logp_terms.push(tape.index(logp, s.teacher)?);
        let y = tape.leaf(Tensor::scalar(s.y_pm));
        let diff = tape.sub(y, s.p_pm)?;
        pm_terms.push(tape.mul(diff, diff)?);
    }
    let logp_sum = sum_nodes(tape, &logp_terms)?;
    let ce = tape.scale(logp_sum, -1.0);
    let pm = sum_nodes(tape, &pm_terms)?;
    let weighted_ce = tape.scale(ce, lambda);
    let weighted_pm = tape.scale(pm, 1.0 - lambda);
    let total = tape.add(weighted_ce, weighted_pm)?;
    Ok(LossNodes { total, ce, pm })
}

/// Roll one episode forward in train mode, recording per-step values and
/// the loss graph. The environment is stepped with sampled or teacher
/// actions per `source`; the loss always targets the teacher action.
#[allow(clippy::too_many_arguments)]
pub fn rollout_episode(
    tape: &mut Tape,
    net: &BoundNet,
    dims: &ModelDims,
    stats: &BnStats,
    graph: &NavGraph,
    episode: &Episode,
    cfg: &LossConfig,
    source: ActionSource,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let d_start = graph.shortest_path_distance(episode.start, episode.goal)?;
    if !(d_start > 0.0) {
        return Err(Error::Data(format!(
            "episode {} starts at its goal",
            episode.id
        )));
    }
    let enc = encode_instruction(
        tape,
        &net.enc,
        &episode.instruction,
        dims.l_max,
        &mut Mode::Train(&mut *rng),
    )?;
    let mut state = AgentState::initial(tape, &net.agent, dims);
    let mut current = episode.start;
    let mut trajectory = vec![current];
    let mut steps = Vec::new();
    let mut step_nodes = Vec::new();
    let mut bn_records = Vec::new();
    let mut stopped = false;
    for _ in 0..cfg.max_steps {
        let obs = Observation::from_graph(graph, current, dims.d_v)?;
        let d_now = graph.shortest_path_distance(current, episode.goal)?;
        let y_pm = progress_target(d_start, d_now, cfg.success_threshold_m)?;
        let teacher = teacher_action(graph, current, episode.goal)?;
        let mut env = StepEnv::new(Mode::Train(&mut *rng), stats);
        let out = agent_step(tape, &net.agent, &mut env, &enc, &obs, &state)?;
        bn_records.append(&mut env.bn_records);
        drop(env);
        let p = tape.value(out.p).values().to_vec();
        let action = match source {
            ActionSource::Teacher => teacher,
            ActionSource::Sample => {
                let dist = WeightedIndex::new(&p)
                    .map_err(|e| Error::Sampling(format!("action distribution: {e}")))?;
                dist.sample(rng)
            }
        };
        steps.push(StepRecord {
            viewpoint: current,
            action,
            teacher,
            y_pm,
            d_now,
            p,
            p_pm: tape.value(out.p_pm).values()[0],
            alpha: tape.value(out.alpha).values().to_vec(),
            beta: tape.value(out.beta).values().to_vec(),
        });
        step_nodes.push(StepNodes {
            logits: out.logits,
            p_pm: out.p_pm,
            teacher,
            y_pm,
        });
        if action == STOP_ACTION {
            stopped = true;
            break;
        }
        let target = obs.targets[action].ok_or_else(|| {
            Error::Data(format!("action {action} has no target at {current}"))
        })?;
        let prev_action = action_embedding(tape, &net.agent, out.g_proj, action)?;
        state = AgentState {
            h: out.state.h,
            c: out.state.c,
            prev_action,
        };
        current = target;
        trajectory.push(current);
    }
    let loss = episode_loss(tape, &step_nodes, cfg.lambda)?;
    Ok(Rollout {
        steps,
        trajectory,
        stopped,
        loss,
        bn_records,
    })
}

/// Training hyperparameters. `threads` only affects wall-clock speed;
/// results are bit-identical for any value because every episode draws
/// from its own derived RNG stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs rolled out with teacher actions before switching to
    /// categorical sampling. Sampling from a cold start never leaves the
    /// random-walk regime, so the schedule bootstraps grounding first.
    pub teacher_epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub threads: usize,
    pub max_steps: usize,
}

impl TrainConfig {
    /// Desk-scale preset: small worlds, larger learning rate. Teacher
    /// actions throughout: desk-sized models keep enough per-step entropy
    /// that sampled rollouts derail and the off-path gradient swamps the
    /// on-path signal.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            epochs: 60,
            teacher_epochs: 60,
            lambda: 0.5,
            seed,
            clip_norm: 5.0,
            threads: 1,
            max_steps: 10,
        }
    }

    /// Full-scale preset: lr 1e-4, batch 64.
    pub fn full_scale(seed: u64) -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 64,
            epochs: 300,
            teacher_epochs: 50,
            lambda: 0.5,
            seed,
            clip_norm: 5.0,
            threads: 1,
            max_steps: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self, success_threshold_m: f64) -> Result<LossConfig> {
        LossConfig::new(self.lambda, success_threshold_m, self.max_steps)
    }
}

/// A tensor with its parameter name, for the checkpoint container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    fn of(name: &str, tensor: &Tensor) -> Self {
        NamedTensor {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            values: tensor.values().to_vec(),
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.values.clone()).map_err(Error::from)
    }
}

/// Complete training state. Saving at an epoch boundary and reloading
/// continues bit-identically: every RNG stream is derived from
/// (seed, purpose, epoch, episode id), so the counters stored here are
/// the entire RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u64,
    pub dims: ModelDims,
    pub train_config: TrainConfig,
    /// First epoch the next `train` call will run.
    pub next_epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub params: Vec<NamedTensor>,
    pub adam_m: Vec<NamedTensor>,
    pub adam_v: Vec<NamedTensor>,
    pub bn: BnStats,
    pub best_val_unseen_sr: f64,
}

impl Checkpoint {
    /// Untrained starting point with freshly initialized parameters.
    pub fn fresh(dims: &ModelDims, train_config: &TrainConfig) -> Result<Self> {
        train_config.validate()?;
        let params = init_params(dims, train_config.seed)?;
        let adam = AdamState::for_params(&params);
        let bn = BnStats::fresh(dims);
        Ok(Checkpoint::capture(
            dims,
            train_config,
            &params,
            &adam,
            &bn,
            0,
            -1.0,
        ))
    }

    pub fn capture(
        dims: &ModelDims,
        train_config: &TrainConfig,
        params: &ParamSet,
        adam: &AdamState,
        bn: &BnStats,
        next_epoch: usize,
        best_val_unseen_sr: f64,
    ) -> Self {
        let named: Vec<NamedTensor> = params
            .iter()
            .map(|p| NamedTensor::of(&p.name, &p.tensor))
            .collect();
        let moments = |ms: &[Tensor]| -> Vec<NamedTensor> {
            params
                .iter()
                .zip(ms)
                .map(|(p, t)| NamedTensor::of(&p.name, t))
                .collect()
        };
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            dims: dims.clone(),
            train_config: train_config.clone(),
            next_epoch,
            step: adam.step,
            params: named,
            adam_m: moments(&adam.m),
            adam_v: moments(&adam.v),
            bn: bn.clone(),
            best_val_unseen_sr,
        }
    }

    /// Rebuild live training state. Optimizer moments must align with
    /// the parameter list one-to-one.
    pub fn restore(&self) -> Result<(ParamSet, AdamState, BnStats)> {
        if self.adam_m.len() != self.params.len() || self.adam_v.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters but {}/{} optimizer moments",
                self.params.len(),
                self.adam_m.len(),
                self.adam_v.len()
            )));
        }
        let mut params = ParamSet::new();
        let mut m = Vec::with_capacity(self.params.len());
        let mut v = Vec::with_capacity(self.params.len());
        for ((p, pm), pv) in self.params.iter().zip(&self.adam_m).zip(&self.adam_v) {
            if pm.name != p.name || pv.name != p.name || pm.shape != p.shape || pv.shape != p.shape
            {
                return Err(Error::Data(format!(
                    "optimizer moments misaligned at parameter {:?}",
                    p.name
                )));
            }
            params.insert(&p.name, p.to_tensor()?)?;
            m.push(pm.to_tensor()?);
            v.push(pv.to_tensor()?);
        }
        let adam = AdamState {
            step: self.step,
            m,
            v,
        };
        Ok((params, adam, self.bn.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json_file(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        io::check_schema_version(&body, CHECKPOINT_SCHEMA_VERSION)?;
        io::parse_json_str(&body)
    }
}

/// One metrics-log line; the training loop emits one per split per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    /// Mean per-episode training loss over the epoch.
    pub loss: f64,
}

pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    /// True when some epoch improved on the starting best val_unseen SR.
    pub improved: bool,
    pub log: Vec<EpochMetrics>,
}

struct RolloutOutput {
    episode_id: usize,
    loss: f64,
    ce: f64,
    pm: f64,
    grads: Vec<Tensor>,
    bn_records: Vec<BnBatchRecord>,
}

fn run_one(
    params: &ParamSet,
    dims: &ModelDims,
    stats: &BnStats,
    bench: &Benchmark,
    episode: &Episode,
    loss_cfg: &LossConfig,
    source: ActionSource,
    seed: u64,
    epoch: usize,
) -> Result<RolloutOutput> {
    let graph = bench.world(episode.world_id)?;
    let mut rng = stream(seed, &[tag::ROLLOUT, epoch as u64, episode.id as u64]);
    let mut tape = Tape::new();
    let (net, binding) = BoundNet::bind(&mut tape, params, dims)?;
    let rollout = rollout_episode(
        &mut tape, &net, dims, stats, graph, episode, loss_cfg, source, &mut rng,
    )?;
    let grads = tape.backward(rollout.loss.total)?;
    Ok(RolloutOutput {
        episode_id: episode.id,
        loss: tape.value(rollout.loss.total).values()[0],
        ce: tape.value(rollout.loss.ce).values()[0],
        pm: tape.value(rollout.loss.pm).values()[0],
        grads: binding.gradients(params, &grads),
        bn_records: rollout.bn_records,
    })
}

/// Roll out a batch of episodes, each on its own tape with its own
/// derived RNG stream. With threads > 1 the episodes are split into
/// contiguous chunks; outputs come back in input order either way.
#[allow(clippy::too_many_arguments)]
fn run_batch(
    params: &ParamSet,
    dims: &ModelDims,
    stats: &BnStats,
    bench: &Benchmark,
    episodes: &[&Episode],
    loss_cfg: &LossConfig,
    source: ActionSource,
    seed: u64,
    epoch: usize,
    threads: usize,
) -> Result<Vec<RolloutOutput>> {
    if threads <= 1 || episodes.len() <= 1 {
        return episodes
            .iter()
            .map(|ep| run_one(params, dims, stats, bench, ep, loss_cfg, source, seed, epoch))
            .collect();
    }
    let chunk = episodes.len().div_ceil(threads);
    let mut indexed: Vec<(usize, Result<RolloutOutput>)> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (c, block) in episodes.chunks(chunk).enumerate() {
            handles.push(scope.spawn(move || {
                block
                    .iter()
                    .enumerate()
                    .map(|(i, ep)| {
                        (
                            c * chunk + i,
                            run_one(params, dims, stats, bench, ep, loss_cfg, source, seed, epoch),
                        )
                    })
                    .collect::<Vec<_>>()
            }));
        }
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("rollout thread panicked"))
            .collect()
    });
    indexed.sort_by_key(|(i, _)| *i);
    indexed.into_iter().map(|(_, r)| r).collect()
}

/// One EMA update per site per optimizer step, from the within-batch
/// average of the per-step batch statistics. Folding every step record
/// separately would leave the running stats tracking only the last few
/// forwards of the last episode in the batch.
fn fold_bn(bn: &mut BnStats, outputs: &[RolloutOutput]) {
    for site in [BnSite::Pre, BnSite::Post] {
        let mut mean: Option<Vec<f64>> = None;
        let mut var: Option<Vec<f64>> = None;
        let mut n = 0usize;
        for out in outputs {
            for rec in out.bn_records.iter().filter(|r| r.site == site) {
                let m = mean.get_or_insert_with(|| vec![0.0; rec.mean.len()]);
                for (a, b) in m.iter_mut().zip(&rec.mean) {
                    *a += b;
                }
                let v = var.get_or_insert_with(|| vec![0.0; rec.var.len()]);
                for (a, b) in v.iter_mut().zip(&rec.var) {
                    *a += b;
                }
                n += 1;
            }
        }
        if let (Some(mut m), Some(mut v)) = (mean, var) {
            let inv = 1.0 / n as f64;
            m.iter_mut().for_each(|x| *x *= inv);
            v.iter_mut().for_each(|x| *x *= inv);
            match site {
                BnSite::Pre => bn.pre.update(&m, &v),
                BnSite::Post => bn.post.update(&m, &v),
            }
        }
    }
}

/// Mini-batch Adam over episode losses, starting from (or resuming) the
/// given checkpoint. Validation runs greedy decoding on both validation
/// splits after every epoch; the best checkpoint by val_unseen SR is
/// retained alongside the final one.
pub fn train(bench: &Benchmark, start: &Checkpoint) -> Result<TrainOutcome> {
    train_with(bench, start, |_| {})
}

/// `train` with a per-epoch observer for live progress reporting.
pub fn train_with(
    bench: &Benchmark,
    start: &Checkpoint,
    mut on_metrics: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let cfg = start.train_config.clone();
    cfg.validate()?;
    if start.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Version {
            found: start.schema_version,
            supported: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let dims = start.dims.clone();
    let loss_cfg = cfg.loss_config(bench.success_threshold_m)?;
    let (mut params, mut adam, mut bn) = start.restore()?;
    let train_eps = bench.episodes_for(Split::Train);
    if train_eps.is_empty() {
        return Err(Error::Data("benchmark has no training episodes".into()));
    }
    let mut best = start.clone();
    let mut best_sr = start.best_val_unseen_sr;
    let mut improved = false;
    let mut log = Vec::new();
    for epoch in start.next_epoch..cfg.epochs {
        let source = if epoch < cfg.teacher_epochs {
            ActionSource::Teacher
        } else {
            ActionSource::Sample
        };
        let mut order: Vec<usize> = (0..train_eps.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut n_episodes = 0usize;
        for batch_ids in order.chunks(cfg.batch_size) {
            let batch: Vec<&Episode> = batch_ids.iter().map(|&i| train_eps[i]).collect();
            let outputs = run_batch(
                &params,
                &dims,
                &bn,
                bench,
                &batch,
                &loss_cfg,
                source,
                cfg.seed,
                epoch,
                cfg.threads,
            )?;
            if outputs.iter().any(|o| !o.loss.is_finite()) {
                let bad: Vec<(usize, f64, f64)> = outputs
                    .iter()
                    .filter(|o| !o.loss.is_finite())
                    .map(|o| (o.episode_id, o.ce, o.pm))
                    .collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, optimizer step {}; \
                     (episode id, ce, pm) = {bad:?}",
                    adam.step
                )));
            }
            loss_sum += outputs.iter().map(|o| o.loss).sum::<f64>();
            n_episodes += outputs.len();
            if cfg.lr > 0.0 {
                let weight = 1.0 / outputs.len() as f64;
                let mut avg: Vec<Tensor> = params
                    .iter()
                    .map(|p| Tensor::zeros(p.tensor.shape()))
                    .collect();
                for out in &outputs {
                    for (acc, g) in avg.iter_mut().zip(&out.grads) {
                        for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
                            *a += weight * b;
                        }
                    }
                }
                clip_global_norm(&mut avg, cfg.clip_norm);
                adam_step(&mut params, &avg, &mut adam, &AdamConfig::with_lr(cfg.lr))?;
            }
            fold_bn(&mut bn, &outputs);
        }
        let train_loss = loss_sum / n_episodes as f64;
        for split in [Split::ValSeen, Split::ValUnseen] {
            let (summary, _) = evaluate_split(
                &params,
                &dims,
                &bn,
                bench,
                split,
                DecodeMode::Greedy,
                cfg.max_steps,
            )?;
            let line = EpochMetrics {
                epoch,
                split,
                ne: summary.ne,
                sr: summary.sr,
                osr: summary.osr,
                spl: summary.spl,
                loss: train_loss,
            };
            on_metrics(&line);
            log.push(line);
            if split == Split::ValUnseen && summary.sr > best_sr {
                best_sr = summary.sr;
                improved = true;
                best = Checkpoint::capture(&dims, &cfg, &params, &adam, &bn, epoch + 1, best_sr);
            }
        }
    }
    let final_checkpoint =
        Checkpoint::capture(&dims, &cfg, &params, &adam, &bn, cfg.epochs, best_sr);
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint: best,
        improved,
        log,
    })
}
