use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::worldgen::graph::NavGraph;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const VERBS: [&str; 8] = [
    "go", "walk", "head", "move", "proceed", "continue", "advance", "travel",
];
const ADVERBS: [&str; 3] = ["left", "right", "straight"];
pub const LANDMARK_NOUNS: [&str; 25] = [
    "table", "couch", "lamp", "stairs", "door", "window", "plant", "shelf", "mirror", "rug",
    "piano", "sink", "desk", "chair", "vase", "clock", "stove", "bench", "easel", "cabinet",
    "sofa", "stool", "fridge", "mat", "lantern",
];

/// Turns sharper than this are verbalized as left/right; gentler ones as
/// straight.
const TURN_THRESHOLD_RAD: f64 = 30.0 * std::f64::consts::PI / 180.0;

/// Fixed word list shared by generator and model. Index = token id.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = vec!["<pad>", "<bos>", "<eos>", "."]
            .into_iter()
            .map(String::from)
            .collect();
        tokens.extend(VERBS.iter().map(|s| s.to_string()));
        tokens.extend(ADVERBS.iter().map(|s| s.to_string()));
        tokens.extend(["to", "the", "stop"].iter().map(|s| s.to_string()));
        tokens.extend(LANDMARK_NOUNS.iter().map(|s| s.to_string()));
        let mut v = Vocab {
            tokens,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Data(format!("token {token:?} not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("token id {id} out of range")))
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&id| self.token(id)).collect();
        Ok(words?.join(" "))
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = a % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// left / right / straight given the signed turn between two headings.
fn turn_adverb(prev_heading: f64, heading: f64) -> &'static str {
    let turn = wrap_angle(heading - prev_heading);
    if turn < -TURN_THRESHOLD_RAD {
        "left"
    } else if turn > TURN_THRESHOLD_RAD {
        "right"
    } else {
        "straight"
    }
}

/// Render one movement clause per path edge plus a closing stop clause.
/// The first clause names no turn direction (there is no prior heading).
/// Verbs are drawn uniformly per clause from the verb list.
pub fn render_instruction<R: Rng>(
    graph: &NavGraph,
    path: &[usize],
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if path.len() < 2 {
        return Err(Error::Generation(format!(
            "world {}: instruction needs a path with at least one edge",
            graph.world_id
        )));
    }
    let period = vocab.id(".")?;
    let to = vocab.id("to")?;
    let the = vocab.id("the")?;
    let stop = vocab.id("stop")?;

    let mut ids = vec![BOS];
    let mut prev_heading: Option<f64> = None;
    for pair in path.windows(2) {
        let (u, v) = (pair[0], pair[1]);
        let dir = graph
            .neighbors(u)
            .iter()
            .find(|d| d.target == v)
            .ok_or_else(|| {
                Error::Generation(format!(
                    "world {}: path step {u} -> {v} is not an edge",
                    graph.world_id
                ))
            })?;
        let verb = VERBS[rng.gen_range(0..VERBS.len())];
        ids.push(vocab.id(verb)?);
        if let Some(prev) = prev_heading {
            ids.push(vocab.id(turn_adverb(prev, dir.heading))?);
        }
        ids.push(to);
        ids.push(the);
        ids.push(vocab.id(LANDMARK_NOUNS[graph.viewpoints[v].landmark])?);
        ids.push(period);
        prev_heading = Some(dir.heading);
    }
    ids.push(stop);
    ids.push(period);
    ids.push(EOS);
    Ok(ids)
}
