//! Seeded generators of desk-scale episodes with known ground-truth
//! bottlenecks, plus the binary dataset format.
//!
//! Each world is built so that *when* things happen varies across episodes
//! while *what* must happen does not: the gripper always meets the object,
//! the pusher always finishes one object before starting the next, the maze
//! agent always crosses the doorway. Those forced states are recorded per
//! episode as `bottleneck_truth`, and they are re-derivable from the stored
//! positions by each world's geometric predicate.

mod format;
mod gridpick;
mod gridpush;
mod maze;
mod render;
mod walk;

pub use format::{read_dataset, write_dataset, DATASET_MAGIC};
pub use render::{frame_to_pgm, frame_to_ppm};

use crate::autodiff::Tensor;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Per-frame location of one entity, in pixel units (top-left of its
/// sprite). Entity id 0 is the agent (gripper / pusher / maze runner);
/// ids >= 1 are objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPos {
    pub id: u16,
    pub x: u16,
    pub y: u16,
}

/// One generated trajectory: frames, ground-truth entity positions, and
/// the generator-known bottleneck frame indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<Tensor>,
    pub positions: Vec<Vec<EntityPos>>,
    pub bottleneck_truth: Vec<usize>,
}

impl Episode {
    pub fn t_len(&self) -> usize {
        self.frames.len()
    }

    pub fn entity(&self, frame: usize, id: u16) -> Option<EntityPos> {
        self.positions[frame].iter().copied().find(|e| e.id == id)
    }

    /// Object entities (id >= 1) at a frame, ordered by id.
    pub fn objects(&self, frame: usize) -> Vec<EntityPos> {
        let mut v: Vec<EntityPos> = self.positions[frame].iter().copied().filter(|e| e.id >= 1).collect();
        v.sort_by_key(|e| e.id);
        v
    }
}

/// Which generator produced a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorldId {
    /// 15-frame grasp-and-lift episodes.
    #[serde(rename = "gridpick")]
    GridPick,
    /// 20-frame pick-and-place episodes (grasp, carry, place).
    #[serde(rename = "gridpickplace")]
    GridPickPlace,
    /// 40-frame two-object pushing.
    #[serde(rename = "gridpush")]
    GridPush2,
    /// 40-frame three-object pushing.
    #[serde(rename = "gridpush3")]
    GridPush3,
    /// 20-frame two-room maze traversal through a doorway.
    #[serde(rename = "maze")]
    Maze,
}

impl WorldId {
    pub fn code(self) -> u8 {
        match self {
            WorldId::GridPick => 1,
            WorldId::GridPickPlace => 2,
            WorldId::GridPush2 => 3,
            WorldId::GridPush3 => 4,
            WorldId::Maze => 5,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            1 => WorldId::GridPick,
            2 => WorldId::GridPickPlace,
            3 => WorldId::GridPush2,
            4 => WorldId::GridPush3,
            5 => WorldId::Maze,
            other => return Err(Error::Data(format!("unknown world id {other}"))),
        })
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "gridpick" => WorldId::GridPick,
            "gridpickplace" | "gridpick-place" => WorldId::GridPickPlace,
            "gridpush" | "gridpush2" => WorldId::GridPush2,
            "gridpush3" => WorldId::GridPush3,
            "maze" => WorldId::Maze,
            other => {
                return Err(Error::Config(format!(
                    "unknown world {other:?} (expected gridpick, gridpickplace, gridpush, gridpush3, or maze)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            WorldId::GridPick => "gridpick",
            WorldId::GridPickPlace => "gridpickplace",
            WorldId::GridPush2 => "gridpush",
            WorldId::GridPush3 => "gridpush3",
            WorldId::Maze => "maze",
        }
    }

    pub fn t_len(self) -> usize {
        match self {
            WorldId::GridPick => 15,
            WorldId::GridPickPlace => 20,
            WorldId::GridPush2 | WorldId::GridPush3 => 40,
            WorldId::Maze => 20,
        }
    }

    pub fn object_count(self) -> usize {
        match self {
            WorldId::GridPick | WorldId::GridPickPlace => 1,
            WorldId::GridPush2 => 2,
            WorldId::GridPush3 => 3,
            WorldId::Maze => 0,
        }
    }
}

/// Frame size shared by all worlds.
pub const FRAME_H: usize = 16;
pub const FRAME_W: usize = 16;
pub const FRAME_C: usize = 3;

/// A generated or loaded collection of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: WorldId,
    pub t_len: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Indices of the held-out test episodes (deterministic 5% split).
    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.episodes.len()).filter(|&i| is_test_episode(i)).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.episodes.len()).filter(|&i| !is_test_episode(i)).collect()
    }
}

/// Deterministic 5% holdout by hash of the episode index.
pub fn is_test_episode(index: usize) -> bool {
    splitmix64(index as u64 ^ 0x7459_35f1_9c2a_11d3).is_multiple_of(20)
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// RNG seed for one episode of one dataset.
pub(crate) fn episode_seed(dataset_seed: u64, index: usize) -> u64 {
    splitmix64(dataset_seed ^ splitmix64(index as u64))
}

/// Derives an independent stream seed from a base seed and an index;
/// shared by everything that seeds per-item RNGs.
pub(crate) fn mix_seed(seed: u64, index: usize) -> u64 {
    episode_seed(seed, index)
}

/// Generates `n_episodes` of the given world. Episodes are pure functions
/// of `(seed, index)`, so generation parallelizes without affecting the
/// result.
pub fn generate(world: WorldId, seed: u64, n_episodes: usize) -> Result<Dataset> {
    let episodes: Vec<Episode> = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let es = episode_seed(seed, i);
            match world {
                WorldId::GridPick => gridpick::episode(es, false),
                WorldId::GridPickPlace => gridpick::episode(es, true),
                WorldId::GridPush2 => gridpush::episode(es, 2),
                WorldId::GridPush3 => gridpush::episode(es, 3),
                WorldId::Maze => maze::episode(es),
            }
        })
        .collect();
    Ok(Dataset {
        world,
        t_len: world.t_len(),
        height: FRAME_H,
        width: FRAME_W,
        channels: FRAME_C,
        episodes,
    })
}

/// `gen_gridpick`: grasp-and-lift (or pick-and-place with `place`).
pub fn gen_gridpick(seed: u64, n_episodes: usize, place: bool) -> Result<Dataset> {
    generate(
        if place { WorldId::GridPickPlace } else { WorldId::GridPick },
        seed,
        n_episodes,
    )
}

/// `gen_gridpush`: sequential multi-object pushing, 2 or 3 objects.
pub fn gen_gridpush(seed: u64, n_episodes: usize, n_objects: usize) -> Result<Dataset> {
    let world = match n_objects {
        2 => WorldId::GridPush2,
        3 => WorldId::GridPush3,
        other => {
            return Err(Error::Config(format!(
                "gridpush supports 2 or 3 objects, got {other}"
            )))
        }
    };
    generate(world, seed, n_episodes)
}

/// `gen_maze`: two-room traversal through a 2-cell doorway.
pub fn gen_maze(seed: u64, n_episodes: usize) -> Result<Dataset> {
    generate(WorldId::Maze, seed, n_episodes)
}

/// Geometric bottleneck predicate of each world, evaluated on the stored
/// positions of one frame. `start`/`goal` positions come from the first and
/// last frame. Property tests check that `bottleneck_truth` is exactly the
/// set of frames satisfying this.
pub fn bottleneck_predicate(world: WorldId, ep: &Episode, frame: usize) -> bool {
    match world {
        WorldId::GridPick | WorldId::GridPickPlace => gridpick::is_bottleneck(ep, frame),
        WorldId::GridPush2 | WorldId::GridPush3 => gridpush::is_bottleneck(ep, frame),
        WorldId::Maze => maze::is_bottleneck(ep, frame),
    }
}

#[cfg(test)]
mod tests;
