//! Synthetic navigation benchmark: layered worlds, direction features,
//! template instructions, and the dataset file format.

pub mod dataset;
pub mod gen;
pub mod grammar;
pub mod graph;

pub use dataset::{generate_benchmark, Benchmark, Episode, GenConfig, Split, SCHEMA_VERSION};
pub use gen::{
    direction_feature, generate_world, orientation_block, sample_episode, EpisodeConstraints,
    WorldParams,
};
pub use grammar::{render_instruction, Vocab, BOS, EOS, LANDMARK_NOUNS, PAD};
pub use graph::{NavGraph, NavigableDirection, Viewpoint};
