use numcore::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::worldgen::grammar::{render_instruction, Vocab, LANDMARK_NOUNS};
use crate::worldgen::graph::{NavGraph, NavigableDirection, Viewpoint};

/// Shape and scale of a single generated world.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WorldParams {
    pub n_viewpoints: usize,
    pub n_landmarks: usize,
    /// Max navigable neighbors per viewpoint (action space is this + STOP).
    pub k_max: usize,
    /// Side length of the square x/y area, meters.
    pub extent_m: f64,
    /// z coordinate of each floor, meters.
    pub floor_heights: Vec<f64>,
    /// Appearance block width of a direction feature.
    pub d_app: usize,
    /// Times the 4-wide orientation block is tiled.
    pub orientation_tiles: usize,
    /// Std of the Gaussian perturbation baked into appearance blocks.
    pub feature_noise_std: f64,
    /// Assign each viewpoint a different landmark (requires n_landmarks
    /// >= n_viewpoints). Keeps landmark mentions unambiguous, so every
    /// instruction identifies its path exactly.
    pub distinct_landmarks: bool,
}

impl WorldParams {
    pub fn desk() -> Self {
        WorldParams {
            n_viewpoints: 25,
            n_landmarks: 25,
            k_max: 5,
            extent_m: 20.0,
            floor_heights: vec![0.0, 3.0],
            d_app: 32,
            orientation_tiles: 2,
            feature_noise_std: 0.05,
            distinct_landmarks: true,
        }
    }

    /// Shape parity with the full-scale perception stack; not meant for
    /// desk training runs.
    pub fn full_scale_shapes() -> Self {
        WorldParams {
            d_app: 2048,
            orientation_tiles: 32,
            ..WorldParams::desk()
        }
    }

    pub fn d_v(&self) -> usize {
        self.d_app + 4 * self.orientation_tiles
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_viewpoints < 2 {
            return Err(Error::Config("n_viewpoints must be at least 2".into()));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if self.n_landmarks == 0 || self.n_landmarks > LANDMARK_NOUNS.len() {
            return Err(Error::Config(format!(
                "n_landmarks must be in 1..={}, got {}",
                LANDMARK_NOUNS.len(),
                self.n_landmarks
            )));
        }
        if self.d_app < self.n_landmarks {
            return Err(Error::Config(format!(
                "d_app ({}) must cover all {} landmarks",
                self.d_app, self.n_landmarks
            )));
        }
        if self.distinct_landmarks && self.n_landmarks < self.n_viewpoints {
            return Err(Error::Config(format!(
                "distinct landmarks need n_landmarks >= n_viewpoints, got {} < {}",
                self.n_landmarks, self.n_viewpoints
            )));
        }
        if self.orientation_tiles == 0 {
            return Err(Error::Config("orientation_tiles must be at least 1".into()));
        }
        if !(self.extent_m.is_finite() && self.extent_m > 0.0) {
            return Err(Error::Config("extent_m must be positive".into()));
        }
        if self.floor_heights.is_empty() {
            return Err(Error::Config("floor_heights must be nonempty".into()));
        }
        if !(self.feature_noise_std.is_finite() && self.feature_noise_std >= 0.0) {
            return Err(Error::Config("feature_noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Orientation part of a direction feature: [sin phi, cos phi, sin theta,
/// cos theta] tiled.
pub fn orientation_block(phi: f64, theta: f64, tiles: usize) -> Vec<f64> {
    let base = [phi.sin(), phi.cos(), theta.sin(), theta.cos()];
    let mut out = Vec::with_capacity(4 * tiles);
    for _ in 0..tiles {
        out.extend_from_slice(&base);
    }
    out
}

/// Full direction feature: unit-length appearance block (one-hot of the
/// target's landmark plus Gaussian noise) followed by the orientation
/// block. noise_std = 0 yields the exact one-hot.
pub fn direction_feature<R: Rng>(
    landmark: usize,
    phi: f64,
    theta: f64,
    d_app: usize,
    tiles: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if landmark >= d_app {
        return Err(Error::Config(format!(
            "landmark {landmark} does not fit appearance block of width {d_app}"
        )));
    }
    let mut appearance = vec![0.0; d_app];
    appearance[landmark] = 1.0;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std)
            .map_err(|e| Error::Config(format!("bad feature noise std: {e}")))?;
        for a in appearance.iter_mut() {
            *a += normal.sample(rng);
        }
    }
    let norm = appearance.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::Generation(
            "appearance block collapsed to zero".into(),
        ));
    }
    for a in appearance.iter_mut() {
        *a /= norm;
    }
    appearance.extend(orientation_block(phi, theta, tiles));
    Ok(Tensor::vector(appearance))
}

const TOPOLOGY_RETRIES: usize = 32;

/// Deterministic world construction: positions sampled per floor, a
/// degree-capped nearest-first spanning tree, then a few extra short
/// edges to open alternative routes. Pure function of (seed, params).
pub fn generate_world(seed: u64, params: &WorldParams) -> Result<NavGraph> {
    params.validate()?;
    let mut world_rng = rng::stream(seed, &[tag::WORLD]);
    for _ in 0..TOPOLOGY_RETRIES {
        let positions = sample_positions(params, &mut world_rng);
        let edges = match build_topology(&positions, params, &mut world_rng) {
            Some(edges) => edges,
            None => continue,
        };
        let landmarks: Vec<usize> = if params.distinct_landmarks {
            let mut pool: Vec<usize> = (0..params.n_landmarks).collect();
            pool.shuffle(&mut world_rng);
            pool.truncate(params.n_viewpoints);
            pool
        } else {
            (0..params.n_viewpoints)
                .map(|_| world_rng.gen_range(0..params.n_landmarks))
                .collect()
        };
        return assemble(seed, params, &positions, &landmarks, &edges);
    }
    Err(Error::Generation(format!(
        "world {seed:#018x}: no spanning tree under degree cap {} after {TOPOLOGY_RETRIES} attempts",
        params.k_max
    )))
}

fn sample_positions<R: Rng>(params: &WorldParams, rng: &mut R) -> Vec<[f64; 3]> {
    (0..params.n_viewpoints)
        .map(|_| {
            let x = rng.gen::<f64>() * params.extent_m;
            let y = rng.gen::<f64>() * params.extent_m;
            let z = params.floor_heights[rng.gen_range(0..params.floor_heights.len())];
            [x, y, z]
        })
        .collect()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Nearest-first spanning tree under the degree cap; ties break toward
/// the lowest (u, v) pair so the result is a pure function of positions.
/// Returns None when every in-tree node is saturated (caller retries).
fn build_topology<R: Rng>(
    positions: &[[f64; 3]],
    params: &WorldParams,
    rng: &mut R,
) -> Option<Vec<(usize, usize)>> {
    let n = positions.len();
    let k_max = params.k_max;
    let mut degree = vec![0usize; n];
    let mut in_tree = vec![false; n];
    let mut edges: Vec<(usize, usize)> = Vec::new();
    in_tree[0] = true;
    for _ in 1..n {
        let mut best: Option<(f64, usize, usize)> = None;
        for u in 0..n {
            if !in_tree[u] || degree[u] >= k_max {
                continue;
            }
            for v in 0..n {
                if in_tree[v] {
                    continue;
                }
                let d = dist(positions[u], positions[v]);
                let better = match best {
                    None => true,
                    Some((bd, bu, bv)) => d < bd || (d == bd && (u, v) < (bu, bv)),
                };
                if better {
                    best = Some((d, u, v));
                }
            }
        }
        let (_, u, v) = best?;
        edges.push((u.min(v), u.max(v)));
        degree[u] += 1;
        degree[v] += 1;
        in_tree[v] = true;
    }

    // Extra short edges create cycles so the shortest path is not the
    // only route. Candidates are scanned nearest-first; each is taken
    // with probability 1/2 while both endpoints have spare degree.
    let edge_set: HashSet<(usize, usize)> = edges.iter().copied().collect();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if edge_set.contains(&(u, v)) {
                continue;
            }
            let d = dist(positions[u], positions[v]);
            if d <= 0.5 * params.extent_m {
                candidates.push((d, u, v));
            }
        }
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let target_extra = n / 3;
    let mut added = 0;
    for (_, u, v) in candidates {
        if added >= target_extra {
            break;
        }
        if degree[u] < k_max && degree[v] < k_max && rng.gen_bool(0.5) {
            edges.push((u, v));
            degree[u] += 1;
            degree[v] += 1;
            added += 1;
        }
    }
    Some(edges)
}

fn assemble(
    seed: u64,
    params: &WorldParams,
    positions: &[[f64; 3]],
    landmarks: &[usize],
    edges: &[(usize, usize)],
) -> Result<NavGraph> {
    let n = positions.len();
    let viewpoints: Vec<Viewpoint> = (0..n)
        .map(|id| Viewpoint {
            id,
            position: positions[id],
            landmark: landmarks[id],
        })
        .collect();
    let mut adjacency: Vec<Vec<NavigableDirection>> = vec![Vec::new(); n];
    for &(u, v) in edges {
        for (a, b) in [(u, v), (v, u)] {
            let pa = positions[a];
            let pb = positions[b];
            let dx = pb[0] - pa[0];
            let dy = pb[1] - pa[1];
            let dz = pb[2] - pa[2];
            let phi = dx.atan2(dy);
            let theta = dz.atan2((dx * dx + dy * dy).sqrt());
            let mut feat_rng = rng::stream(seed, &[tag::FEATURE, a as u64, b as u64]);
            let feature = direction_feature(
                landmarks[b],
                phi,
                theta,
                params.d_app,
                params.orientation_tiles,
                params.feature_noise_std,
                &mut feat_rng,
            )?;
            adjacency[a].push(NavigableDirection {
                target: b,
                heading: phi,
                elevation: theta,
                feature,
            });
        }
    }
    for list in adjacency.iter_mut() {
        list.sort_by_key(|d| d.target);
    }
    NavGraph::new(seed, viewpoints, adjacency)
}

/// Path-length constraints for episode sampling.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpisodeConstraints {
    pub min_edges: usize,
    pub max_edges: usize,
    pub l_max: usize,
}

const SAMPLE_ATTEMPTS: usize = 500;

/// Draw a (start, goal) pair whose shortest path fits the constraints and
/// render its instruction. `taken` pairs and paths shorter than
/// `min_length_m` are rejected. Deterministic given the rng state.
pub fn sample_episode<R: Rng>(
    graph: &NavGraph,
    rng: &mut R,
    constraints: &EpisodeConstraints,
    vocab: &Vocab,
    taken: &HashSet<(u64, usize, usize)>,
    min_length_m: f64,
) -> Result<(usize, usize, Vec<usize>, Vec<usize>)> {
    let n = graph.len();
    if n < 2 {
        return Err(Error::Sampling(format!(
            "world {}: too small to sample an episode",
            graph.world_id
        )));
    }
    for _ in 0..SAMPLE_ATTEMPTS {
        let start = rng.gen_range(0..n);
        let goal = rng.gen_range(0..n);
        if start == goal || taken.contains(&(graph.world_id, start, goal)) {
            continue;
        }
        let path = graph.shortest_path(start, goal)?;
        let edges = path.len() - 1;
        if edges < constraints.min_edges || edges > constraints.max_edges {
            continue;
        }
        if graph.walk_length(&path)? <= min_length_m {
            continue;
        }
        let instruction = render_instruction(graph, &path, vocab, rng)?;
        if instruction.len() > constraints.l_max {
            continue;
        }
        return Ok((start, goal, path, instruction));
    }
    Err(Error::Sampling(format!(
        "world {}: no admissible (start, goal) pair after {SAMPLE_ATTEMPTS} attempts",
        graph.world_id
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_params() -> WorldParams {
        WorldParams {
            n_viewpoints: 8,
            ..WorldParams::desk()
        }
    }

    #[test]
    fn orientation_block_at_zero_angles() {
        assert_eq!(
            orientation_block(0.0, 0.0, 2),
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn orientation_block_quarter_turn() {
        let b = orientation_block(std::f64::consts::FRAC_PI_2, 0.0, 1);
        assert!((b[0] - 1.0).abs() < 1e-12);
        assert!(b[1].abs() < 1e-12);
        assert!(b[2].abs() < 1e-12);
        assert!((b[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feature_dims_full_scale() {
        let p = WorldParams::full_scale_shapes();
        assert_eq!(p.d_v(), 2176);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = direction_feature(3, 0.3, -0.1, p.d_app, p.orientation_tiles, 0.05, &mut rng)
            .unwrap();
        assert_eq!(f.shape(), &[2176]);
    }

    #[test]
    fn appearance_block_is_unit_length() {
        let p = WorldParams::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for lm in 0..p.n_landmarks {
            let f = direction_feature(lm, 1.0, 0.2, p.d_app, p.orientation_tiles, 0.05, &mut rng)
                .unwrap();
            let norm: f64 = f.values()[..p.d_app].iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            // the landmark slot dominates the noisy rest
            let dominant = f.values()[..p.d_app]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .unwrap()
                .0;
            assert_eq!(dominant, lm);
        }
    }

    #[test]
    fn noise_free_feature_is_exact_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = direction_feature(2, 0.0, 0.0, 4, 2, 0.0, &mut rng).unwrap();
        assert_eq!(
            f.values(),
            &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn two_viewpoints_yield_single_edge() {
        let params = WorldParams {
            n_viewpoints: 2,
            k_max: 1,
            ..WorldParams::desk()
        };
        let g = generate_world(7, &params).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.neighbors(0).len(), 1);
        assert_eq!(g.neighbors(1).len(), 1);
        assert_eq!(g.neighbors(0)[0].target, 1);
    }

    #[test]
    fn degree_cap_one_with_three_nodes_fails() {
        let params = WorldParams {
            n_viewpoints: 3,
            k_max: 1,
            ..WorldParams::desk()
        };
        match generate_world(7, &params) {
            Err(Error::Generation(_)) => {}
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let params = tiny_params();
        let a = generate_world(99, &params).unwrap();
        let b = generate_world(99, &params).unwrap();
        assert_eq!(a.len(), b.len());
        for v in 0..a.len() {
            assert_eq!(a.viewpoints[v].position, b.viewpoints[v].position);
            assert_eq!(a.viewpoints[v].landmark, b.viewpoints[v].landmark);
            let na = a.neighbors(v);
            let nb = b.neighbors(v);
            assert_eq!(na.len(), nb.len());
            for (da, db) in na.iter().zip(nb) {
                assert_eq!(da.target, db.target);
                assert_eq!(da.heading, db.heading);
                assert_eq!(da.elevation, db.elevation);
                assert_eq!(da.feature.values(), db.feature.values());
            }
        }
    }

    #[test]
    fn fuzz_connectivity_and_degree_bounds() {
        let params = WorldParams::desk();
        for seed in 0..100u64 {
            let g = generate_world(seed, &params).unwrap();
            assert!(g.is_connected(), "seed {seed} disconnected");
            for v in 0..g.len() {
                let deg = g.neighbors(v).len();
                assert!(
                    (1..=params.k_max).contains(&deg),
                    "seed {seed} viewpoint {v} degree {deg}"
                );
            }
        }
    }

    #[test]
    fn headings_match_displacement() {
        let g = generate_world(13, &WorldParams::desk()).unwrap();
        for u in 0..g.len() {
            for d in g.neighbors(u) {
                let pa = g.position(u);
                let pb = g.position(d.target);
                let phi = (pb[0] - pa[0]).atan2(pb[1] - pa[1]);
                let theta = (pb[2] - pa[2])
                    .atan2(((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt());
                assert_eq!(d.heading, phi);
                assert_eq!(d.elevation, theta);
                // orientation block embedded in the feature agrees
                let vals = d.feature.values();
                let ori = &vals[WorldParams::desk().d_app..];
                assert!((ori[0] - phi.sin()).abs() < 1e-12);
                assert!((ori[1] - phi.cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elevation_is_nontrivial_across_floors() {
        let params = WorldParams::desk();
        let mut saw_vertical = false;
        for seed in 0..10u64 {
            let g = generate_world(seed, &params).unwrap();
            for u in 0..g.len() {
                for d in g.neighbors(u) {
                    if d.elevation.abs() > 0.1 {
                        saw_vertical = true;
                    }
                }
            }
        }
        assert!(saw_vertical, "no cross-floor edges in 10 worlds");
    }

    #[test]
    fn sampled_episode_is_deterministic_and_in_bounds() {
        let g = generate_world(21, &WorldParams::desk()).unwrap();
        let vocab = Vocab::standard();
        let constraints = EpisodeConstraints {
            min_edges: 3,
            max_edges: 6,
            l_max: 44,
        };
        let taken = HashSet::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let a = sample_episode(&g, &mut r1, &constraints, &vocab, &taken, 0.0).unwrap();
        let b = sample_episode(&g, &mut r2, &constraints, &vocab, &taken, 0.0).unwrap();
        assert_eq!(a, b);
        let (start, goal, path, instruction) = a;
        assert_eq!(path[0], start);
        assert_eq!(*path.last().unwrap(), goal);
        assert!((3..=6).contains(&(path.len() - 1)));
        assert!(instruction.len() <= 44);
        // path is shortest
        let d = g.shortest_path_distance(start, goal).unwrap();
        assert!((g.walk_length(&path).unwrap() - d).abs() < 1e-9);
    }

    #[test]
    fn sampling_respects_taken_pairs() {
        let g = generate_world(21, &WorldParams::desk()).unwrap();
        let vocab = Vocab::standard();
        let constraints = EpisodeConstraints {
            min_edges: 3,
            max_edges: 6,
            l_max: 44,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let taken = HashSet::new();
        let (s, g0, _, _) = sample_episode(&g, &mut rng, &constraints, &vocab, &taken, 0.0).unwrap();
        let mut taken = HashSet::new();
        taken.insert((g.world_id, s, g0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s2, g2, _, _) =
            sample_episode(&g, &mut rng, &constraints, &vocab, &taken, 0.0).unwrap();
        assert_ne!((s, g0), (s2, g2));
    }

    #[test]
    fn impossible_constraints_raise_sampling_error() {
        let g = generate_world(21, &WorldParams::desk()).unwrap();
        let vocab = Vocab::standard();
        let constraints = EpisodeConstraints {
            min_edges: 50,
            max_edges: 60,
            l_max: 44,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        match sample_episode(&g, &mut rng, &constraints, &vocab, &HashSet::new(), 0.0) {
            Err(Error::Sampling(_)) => {}
            other => panic!("expected sampling error, got {other:?}"),
        }
    }
}
