use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A node in the navigation graph. Positions are meters; landmark is an
/// index into the shared landmark noun list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: usize,
    pub position: [f64; 3],
    pub landmark: usize,
}

/// One navigable direction out of a viewpoint. heading is the compass
/// angle of the displacement (atan2(dx, dy), radians in (-pi, pi]);
/// elevation is atan2(dz, horizontal distance). The feature is the
/// observation the agent sees for this direction: unit-length appearance
/// block followed by [sin phi, cos phi, sin theta, cos theta] tiled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NavigableDirection {
    pub target: usize,
    pub heading: f64,
    pub elevation: f64,
    pub feature: Tensor,
}

/// Undirected connected navigation graph. Adjacency lists are sorted by
/// target id; an edge (u,v) always has a mirror (v,u) with its own
/// heading, elevation and feature noise.
#[derive(Debug, Clone)]
pub struct NavGraph {
    pub world_id: u64,
    pub viewpoints: Vec<Viewpoint>,
    adjacency: Vec<Vec<NavigableDirection>>,
}

impl NavGraph {
    pub fn new(
        world_id: u64,
        viewpoints: Vec<Viewpoint>,
        adjacency: Vec<Vec<NavigableDirection>>,
    ) -> Result<Self> {
        if viewpoints.len() != adjacency.len() {
            return Err(Error::Data(format!(
                "world {world_id}: {} viewpoints but {} adjacency lists",
                viewpoints.len(),
                adjacency.len()
            )));
        }
        for (i, vp) in viewpoints.iter().enumerate() {
            if vp.id != i {
                return Err(Error::Data(format!(
                    "world {world_id}: viewpoint ids must be dense, found {} at slot {i}",
                    vp.id
                )));
            }
        }
        let graph = NavGraph {
            world_id,
            viewpoints,
            adjacency,
        };
        graph.validate()?;
        Ok(graph)
    }

    fn validate(&self) -> Result<()> {
        let n = self.viewpoints.len();
        for (u, dirs) in self.adjacency.iter().enumerate() {
            if dirs.is_empty() && n > 1 {
                return Err(Error::Data(format!(
                    "world {}: viewpoint {u} has no neighbors",
                    self.world_id
                )));
            }
            let mut prev = None;
            for d in dirs {
                if d.target >= n || d.target == u {
                    return Err(Error::Data(format!(
                        "world {}: bad edge {u} -> {}",
                        self.world_id, d.target
                    )));
                }
                if prev == Some(d.target) || prev.map_or(false, |p| p > d.target) {
                    return Err(Error::Data(format!(
                        "world {}: adjacency of {u} not strictly sorted",
                        self.world_id
                    )));
                }
                if !self.adjacency[d.target].iter().any(|r| r.target == u) {
                    return Err(Error::Data(format!(
                        "world {}: edge {u} -> {} has no mirror",
                        self.world_id, d.target
                    )));
                }
                prev = Some(d.target);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewpoints.is_empty()
    }

    pub fn neighbors(&self, v: usize) -> &[NavigableDirection] {
        &self.adjacency[v]
    }

    pub fn position(&self, v: usize) -> [f64; 3] {
        self.viewpoints[v].position
    }

    pub fn euclidean(&self, a: usize, b: usize) -> f64 {
        let pa = self.position(a);
        let pb = self.position(b);
        ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt()
    }

    /// Dijkstra over Euclidean edge weights. Ties in the scan order break
    /// toward the lower viewpoint id, which makes paths deterministic.
    fn dijkstra(&self, source: usize) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
        let n = self.len();
        if source >= n {
            return Err(Error::Data(format!(
                "world {}: viewpoint {source} out of range",
                self.world_id
            )));
        }
        let mut dist = vec![f64::INFINITY; n];
        let mut prev: Vec<Option<usize>> = vec![None; n];
        let mut done = vec![false; n];
        dist[source] = 0.0;
        for _ in 0..n {
            let mut u = None;
            let mut best = f64::INFINITY;
            for v in 0..n {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = Some(v);
                }
            }
            let u = match u {
                Some(u) => u,
                None => break,
            };
            done[u] = true;
            for d in &self.adjacency[u] {
                let alt = dist[u] + self.euclidean(u, d.target);
                if alt < dist[d.target] {
                    dist[d.target] = alt;
                    prev[d.target] = Some(u);
                }
            }
        }
        Ok((dist, prev))
    }

    /// Metric length of the shortest path between two viewpoints.
    pub fn shortest_path_distance(&self, a: usize, b: usize) -> Result<f64> {
        if a == b {
            if a >= self.len() {
                return Err(Error::Data(format!(
                    "world {}: viewpoint {a} out of range",
                    self.world_id
                )));
            }
            return Ok(0.0);
        }
        let (dist, _) = self.dijkstra(a)?;
        let d = dist[b];
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Error::Data(format!(
                "world {}: viewpoints {a} and {b} are disconnected",
                self.world_id
            )))
        }
    }

    /// Shortest path as a viewpoint sequence, start and goal inclusive.
    pub fn shortest_path(&self, a: usize, b: usize) -> Result<Vec<usize>> {
        if a == b {
            return Ok(vec![a]);
        }
        let (dist, prev) = self.dijkstra(a)?;
        if !dist[b].is_finite() {
            return Err(Error::Data(format!(
                "world {}: viewpoints {a} and {b} are disconnected",
                self.world_id
            )));
        }
        let mut path = vec![b];
        let mut cur = b;
        while let Some(p) = prev[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        Ok(path)
    }

    /// Metric length of an arbitrary walk along graph edges.
    pub fn walk_length(&self, walk: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for pair in walk.windows(2) {
            if !self.adjacency[pair[0]].iter().any(|d| d.target == pair[1]) {
                return Err(Error::Data(format!(
                    "world {}: walk step {} -> {} is not an edge",
                    self.world_id, pair[0], pair[1]
                )));
            }
            total += self.euclidean(pair[0], pair[1]);
        }
        Ok(total)
    }

    /// Connectivity check by traversal; used by load-time validation.
    pub fn is_connected(&self) -> bool {
        if self.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for d in &self.adjacency[u] {
                if !seen[d.target] {
                    seen[d.target] = true;
                    count += 1;
                    stack.push(d.target);
                }
            }
        }
        count == self.len()
    }

    pub fn adjacency(&self) -> &[Vec<NavigableDirection>] {
        &self.adjacency
    }
}
