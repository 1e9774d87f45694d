use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::rng::{self, tag};
use crate::worldgen::gen::{generate_world, sample_episode, EpisodeConstraints, WorldParams};
use crate::worldgen::grammar::{Vocab, BOS, EOS, PAD};
use crate::worldgen::graph::{NavGraph, NavigableDirection, Viewpoint};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: usize,
    pub world_id: u64,
    pub start: usize,
    pub goal: usize,
    pub path: Vec<usize>,
    pub instruction: Vec<usize>,
    pub split: Split,
}

/// Everything needed to regenerate or interpret a benchmark file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub world: WorldParams,
    pub n_train_worlds: usize,
    pub episodes_per_train_world: usize,
    pub n_val_seen_episodes: usize,
    pub n_val_unseen_worlds: usize,
    pub episodes_per_unseen_world: usize,
    pub min_path_edges: usize,
    pub max_path_edges: usize,
    pub l_max: usize,
    pub success_threshold_factor: f64,
}

impl GenConfig {
    pub fn desk(seed: u64) -> Self {
        GenConfig {
            seed,
            world: WorldParams::desk(),
            n_train_worlds: 40,
            episodes_per_train_world: 24,
            n_val_seen_episodes: 10,
            n_val_unseen_worlds: 10,
            episodes_per_unseen_world: 2,
            min_path_edges: 3,
            max_path_edges: 6,
            l_max: 44,
            success_threshold_factor: 0.3,
        }
    }

    fn constraints(&self) -> EpisodeConstraints {
        EpisodeConstraints {
            min_edges: self.min_path_edges,
            max_edges: self.max_path_edges,
            l_max: self.l_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.n_train_worlds == 0 || self.episodes_per_train_world == 0 {
            return Err(Error::Config("need at least one train world and episode".into()));
        }
        if self.min_path_edges == 0 || self.min_path_edges > self.max_path_edges {
            return Err(Error::Config(format!(
                "bad path length range {}..={}",
                self.min_path_edges, self.max_path_edges
            )));
        }
        if self.max_path_edges >= self.world.n_viewpoints {
            return Err(Error::Config(
                "max_path_edges must be below n_viewpoints".into(),
            ));
        }
        // longest instruction: BOS + 5 first clause + 6 per later clause
        // + stop + period + EOS
        let longest = 1 + 5 + 6 * (self.max_path_edges - 1) + 3;
        if longest > self.l_max {
            return Err(Error::Config(format!(
                "l_max {} cannot hold a {}-edge instruction ({} tokens)",
                self.l_max, self.max_path_edges, longest
            )));
        }
        if !(self.success_threshold_factor > 0.0 && self.success_threshold_factor < 1.0) {
            return Err(Error::Config(
                "success_threshold_factor must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// In-memory benchmark: generated worlds plus episodes across the three
/// splits and the success threshold they were generated under.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub gen_config: GenConfig,
    pub success_threshold_m: f64,
    pub vocab: Vocab,
    pub worlds: Vec<NavGraph>,
    pub episodes: Vec<Episode>,
    world_index: HashMap<u64, usize>,
}

impl Benchmark {
    pub fn new(
        gen_config: GenConfig,
        success_threshold_m: f64,
        vocab: Vocab,
        worlds: Vec<NavGraph>,
        episodes: Vec<Episode>,
    ) -> Result<Self> {
        let mut world_index = HashMap::new();
        for (i, w) in worlds.iter().enumerate() {
            if world_index.insert(w.world_id, i).is_some() {
                return Err(Error::Data(format!("duplicate world id {}", w.world_id)));
            }
        }
        let bench = Benchmark {
            gen_config,
            success_threshold_m,
            vocab,
            worlds,
            episodes,
            world_index,
        };
        bench.validate()?;
        Ok(bench)
    }

    pub fn world(&self, world_id: u64) -> Result<&NavGraph> {
        self.world_index
            .get(&world_id)
            .map(|&i| &self.worlds[i])
            .ok_or_else(|| Error::Data(format!("unknown world id {world_id}")))
    }

    pub fn episodes_for(&self, split: Split) -> Vec<&Episode> {
        self.episodes.iter().filter(|e| e.split == split).collect()
    }

    fn validate(&self) -> Result<()> {
        if !(self.success_threshold_m.is_finite() && self.success_threshold_m > 0.0) {
            return Err(Error::Data(format!(
                "bad success threshold {}",
                self.success_threshold_m
            )));
        }
        if self.vocab.id("<pad>")? != PAD
            || self.vocab.id("<bos>")? != BOS
            || self.vocab.id("<eos>")? != EOS
        {
            return Err(Error::Data("vocabulary reserved ids out of place".into()));
        }
        let d_v = self.gen_config.world.d_v();
        for w in &self.worlds {
            if !w.is_connected() {
                return Err(Error::Data(format!("world {} is disconnected", w.world_id)));
            }
            for v in 0..w.len() {
                let deg = w.neighbors(v).len();
                if deg == 0 || deg > self.gen_config.world.k_max {
                    return Err(Error::Data(format!(
                        "world {} viewpoint {v} has degree {deg}",
                        w.world_id
                    )));
                }
                for d in w.neighbors(v) {
                    if d.feature.shape() != [d_v] {
                        return Err(Error::Data(format!(
                            "world {} has a feature of shape {:?}, expected [{d_v}]",
                            w.world_id,
                            d.feature.shape()
                        )));
                    }
                }
            }
        }
        let mut seen_ids = HashSet::new();
        let mut train_worlds = HashSet::new();
        let mut unseen_worlds = HashSet::new();
        for ep in &self.episodes {
            if !seen_ids.insert(ep.id) {
                return Err(Error::Data(format!("duplicate episode id {}", ep.id)));
            }
            let graph = self.world(ep.world_id)?;
            if ep.path.first() != Some(&ep.start) || ep.path.last() != Some(&ep.goal) {
                return Err(Error::Data(format!(
                    "episode {}: path endpoints disagree with start/goal",
                    ep.id
                )));
            }
            let len = graph.walk_length(&ep.path)?;
            let shortest = graph.shortest_path_distance(ep.start, ep.goal)?;
            if (len - shortest).abs() > 1e-9 {
                return Err(Error::Data(format!(
                    "episode {}: path is not shortest ({len} vs {shortest})",
                    ep.id
                )));
            }
            if len <= self.success_threshold_m {
                return Err(Error::Data(format!(
                    "episode {}: start already within the success threshold",
                    ep.id
                )));
            }
            if ep.instruction.len() > self.gen_config.l_max {
                return Err(Error::Data(format!(
                    "episode {}: instruction longer than l_max",
                    ep.id
                )));
            }
            if ep.instruction.first() != Some(&BOS) || ep.instruction.last() != Some(&EOS) {
                return Err(Error::Data(format!(
                    "episode {}: instruction missing BOS/EOS frame",
                    ep.id
                )));
            }
            for &t in &ep.instruction {
                self.vocab.token(t)?;
            }
            match ep.split {
                Split::Train | Split::ValSeen => train_worlds.insert(ep.world_id),
                Split::ValUnseen => unseen_worlds.insert(ep.world_id),
            };
        }
        if let Some(id) = train_worlds.intersection(&unseen_worlds).next() {
            return Err(Error::Data(format!(
                "world {id} appears in both seen and unseen splits"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json_string(&BenchmarkFile::from_benchmark(self))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json_file(path, &BenchmarkFile::from_benchmark(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        io::check_schema_version(&body, SCHEMA_VERSION)?;
        let file: BenchmarkFile = io::parse_json_str(&body)?;
        file.into_benchmark()
    }
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    u: usize,
    v: usize,
    phi_uv: f64,
    theta_uv: f64,
    phi_vu: f64,
    theta_vu: f64,
    feat_uv: Vec<f64>,
    feat_vu: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WorldRecord {
    world_id: u64,
    viewpoints: Vec<Viewpoint>,
    edges: Vec<EdgeRecord>,
}

impl WorldRecord {
    fn from_graph(g: &NavGraph) -> Result<Self> {
        let mut edges = Vec::new();
        for u in 0..g.len() {
            for d in g.neighbors(u) {
                let v = d.target;
                if v < u {
                    continue;
                }
                let back = g
                    .neighbors(v)
                    .iter()
                    .find(|r| r.target == u)
                    .ok_or_else(|| {
                        Error::Data(format!("world {}: edge {u},{v} lacks a mirror", g.world_id))
                    })?;
                edges.push(EdgeRecord {
                    u,
                    v,
                    phi_uv: d.heading,
                    theta_uv: d.elevation,
                    phi_vu: back.heading,
                    theta_vu: back.elevation,
                    feat_uv: d.feature.values().to_vec(),
                    feat_vu: back.feature.values().to_vec(),
                });
            }
        }
        Ok(WorldRecord {
            world_id: g.world_id,
            viewpoints: g.viewpoints.clone(),
            edges,
        })
    }

    fn into_graph(self) -> Result<NavGraph> {
        let n = self.viewpoints.len();
        let mut adjacency: Vec<Vec<NavigableDirection>> = vec![Vec::new(); n];
        for e in self.edges {
            if e.u >= n || e.v >= n {
                return Err(Error::Data(format!(
                    "world {}: edge ({}, {}) out of range",
                    self.world_id, e.u, e.v
                )));
            }
            adjacency[e.u].push(NavigableDirection {
                target: e.v,
                heading: e.phi_uv,
                elevation: e.theta_uv,
                feature: numcore::Tensor::vector(e.feat_uv),
            });
            adjacency[e.v].push(NavigableDirection {
                target: e.u,
                heading: e.phi_vu,
                elevation: e.theta_vu,
                feature: numcore::Tensor::vector(e.feat_vu),
            });
        }
        for list in adjacency.iter_mut() {
            list.sort_by_key(|d| d.target);
        }
        NavGraph::new(self.world_id, self.viewpoints, adjacency)
    }
}

#[derive(Serialize, Deserialize)]
struct BenchmarkFile {
    schema_version: u64,
    gen_config: GenConfig,
    success_threshold_m: f64,
    vocab: Vocab,
    worlds: Vec<WorldRecord>,
    episodes: Vec<Episode>,
}

impl BenchmarkFile {
    fn from_benchmark(b: &Benchmark) -> Self {
        let worlds = b
            .worlds
            .iter()
            .map(|g| WorldRecord::from_graph(g).expect("generated graphs are mirror-complete"))
            .collect();
        BenchmarkFile {
            schema_version: SCHEMA_VERSION,
            gen_config: b.gen_config.clone(),
            success_threshold_m: b.success_threshold_m,
            vocab: b.vocab.clone(),
            worlds,
            episodes: b.episodes.clone(),
        }
    }

    fn into_benchmark(self) -> Result<Benchmark> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Version {
                found: self.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        let mut vocab = self.vocab;
        vocab.reindex();
        let worlds: Result<Vec<NavGraph>> =
            self.worlds.into_iter().map(WorldRecord::into_graph).collect();
        Benchmark::new(
            self.gen_config,
            self.success_threshold_m,
            vocab,
            worlds?,
            self.episodes,
        )
    }
}

const THRESHOLD_PASSES: usize = 8;

/// Build the full desk benchmark: train worlds with several episodes
/// each, a val_seen slice drawn from train worlds with fresh pairs, and
/// val_unseen episodes on held-out worlds. The success threshold is a
/// fixed fraction of the mean shortest-path length; episodes already
/// inside it are resampled until none remain.
pub fn generate_benchmark(config: &GenConfig) -> Result<Benchmark> {
    config.validate()?;
    let vocab = Vocab::standard();
    let constraints = config.constraints();
    let seed = config.seed;

    let total_worlds = config.n_train_worlds + config.n_val_unseen_worlds;
    let mut worlds = Vec::with_capacity(total_worlds);
    for i in 0..total_worlds {
        let world_seed = rng::derive_seed(seed, &[tag::WORLD, i as u64]);
        worlds.push(generate_world(world_seed, &config.world)?);
    }

    let mut taken: HashSet<(u64, usize, usize)> = HashSet::new();
    let mut episodes: Vec<Episode> = Vec::new();
    let push_episode = |episodes: &mut Vec<Episode>,
                            taken: &mut HashSet<(u64, usize, usize)>,
                            graph: &NavGraph,
                            stream_tags: &[u64],
                            split: Split|
     -> Result<()> {
        let mut ep_rng = rng::stream(seed, stream_tags);
        let (start, goal, path, instruction) =
            sample_episode(graph, &mut ep_rng, &constraints, &vocab, taken, 0.0)?;
        taken.insert((graph.world_id, start, goal));
        episodes.push(Episode {
            id: episodes.len(),
            world_id: graph.world_id,
            start,
            goal,
            path,
            instruction,
            split,
        });
        Ok(())
    };

    for i in 0..config.n_train_worlds {
        for e in 0..config.episodes_per_train_world {
            push_episode(
                &mut episodes,
                &mut taken,
                &worlds[i],
                &[tag::EPISODE, 0, i as u64, e as u64],
                Split::Train,
            )?;
        }
    }
    for e in 0..config.n_val_seen_episodes {
        let mut pick_rng = rng::stream(seed, &[tag::EPISODE, 1, 0, e as u64]);
        use rand::Rng;
        let i = pick_rng.gen_range(0..config.n_train_worlds);
        push_episode(
            &mut episodes,
            &mut taken,
            &worlds[i],
            &[tag::EPISODE, 1, 1, e as u64],
            Split::ValSeen,
        )?;
    }
    for j in 0..config.n_val_unseen_worlds {
        for e in 0..config.episodes_per_unseen_world {
            push_episode(
                &mut episodes,
                &mut taken,
                &worlds[config.n_train_worlds + j],
                &[tag::EPISODE, 2, j as u64, e as u64],
                Split::ValUnseen,
            )?;
        }
    }

    // Threshold depends on the episode mix; resample episodes that start
    // inside it until the set is consistent.
    for pass in 0..THRESHOLD_PASSES {
        let mut lengths = Vec::with_capacity(episodes.len());
        for ep in &episodes {
            let graph = worlds
                .iter()
                .find(|w| w.world_id == ep.world_id)
                .expect("episode references generated world");
            lengths.push(graph.walk_length(&ep.path)?);
        }
        let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
        let threshold = config.success_threshold_factor * mean;
        let violators: Vec<usize> = (0..episodes.len())
            .filter(|&i| lengths[i] <= threshold)
            .collect();
        if violators.is_empty() {
            return Benchmark::new(config.clone(), threshold, vocab, worlds, episodes);
        }
        for &idx in &violators {
            let (world_id, start, goal) = {
                let ep = &episodes[idx];
                (ep.world_id, ep.start, ep.goal)
            };
            let graph = worlds
                .iter()
                .find(|w| w.world_id == world_id)
                .expect("episode references generated world");
            taken.remove(&(world_id, start, goal));
            let mut ep_rng = rng::stream(seed, &[tag::EPISODE, 3, idx as u64, pass as u64]);
            let (s, g, path, instruction) =
                sample_episode(graph, &mut ep_rng, &constraints, &vocab, &taken, threshold)?;
            taken.insert((world_id, s, g));
            let ep = &mut episodes[idx];
            ep.start = s;
            ep.goal = g;
            ep.path = path;
            ep.instruction = instruction;
        }
    }
    Err(Error::Generation(format!(
        "threshold did not stabilize after {THRESHOLD_PASSES} passes"
    )))
}
