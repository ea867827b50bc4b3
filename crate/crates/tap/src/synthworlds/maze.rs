//! Two-room maze traversal through a one-gap doorway.
//!
//! The agent random-walks around the left room, crosses the doorway at a
//! randomized frame, and random-walks to the goal in the right room. Every
//! successful traversal must pass the doorway, so the crossing frames are
//! the bottleneck.

use super::render::{Canvas, AGENT, WALL};
use super::walk::{chebyshev, conditioned_walk};
use super::{Episode, EntityPos, FRAME_H};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Wall column; the doorway spans rows `DOOR_Y..DOOR_Y+2` so the 2x2 agent
/// fits through.
const WALL_X: i32 = 8;
const DOOR_Y: i32 = 7;
const T_LEN: usize = 20;

/// Agent box (2x2 at top-left `c`) stays off wall cells.
fn clear_of_wall(c: (i32, i32)) -> bool {
    if c.0 != WALL_X - 1 && c.0 != WALL_X {
        return true;
    }
    // box covers column WALL_X; allowed only exactly at the doorway rows
    c.1 == DOOR_Y
}

fn in_bounds(c: (i32, i32)) -> bool {
    (0..=14).contains(&c.0) && (0..=14).contains(&c.1)
}

pub(super) fn episode(seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..500 {
        if let Some(ep) = try_episode(&mut rng) {
            return ep;
        }
    }
    unreachable!("maze scenario sampling failed 500 times");
}

fn try_episode(rng: &mut impl Rng) -> Option<Episode> {
    let start = (rng.random_range(0..=5), rng.random_range(0..=13));
    let goal = (rng.random_range(10..=13), rng.random_range(0..=13));
    let door_left = (WALL_X - 1, DOOR_Y);
    let door_right = (WALL_X, DOOR_Y);

    let t_door = rng.random_range(7..=12usize);
    if chebyshev(start, door_left) > t_door as i32 {
        return None;
    }
    // right-room leg: from the doorway exit to the goal in the remaining
    // frames (crossing takes one step)
    let steps_right = T_LEN - 1 - (t_door + 1);
    if chebyshev(door_right, goal) > steps_right as i32 {
        return None;
    }

    // Left room, strictly away from the wall until the doorway approach.
    let left = conditioned_walk(rng, start, door_left, t_door, 1, |c, k| {
        in_bounds(c) && if k < t_door { c.0 <= WALL_X - 2 } else { c == door_left }
    })?;
    // Right room, never re-crossing.
    let right = conditioned_walk(rng, door_right, goal, steps_right, 1, |c, k| {
        in_bounds(c) && if k == 0 { true } else { c.0 > WALL_X && clear_of_wall(c) }
    })?;

    let mut track = left;
    track.extend(right);
    debug_assert_eq!(track.len(), T_LEN);

    let truth = vec![t_door, t_door + 1];
    let mut frames = Vec::with_capacity(T_LEN);
    let mut positions = Vec::with_capacity(T_LEN);
    for &cell in track.iter().take(T_LEN) {
        let mut canvas = Canvas::new();
        for y in 0..FRAME_H as i32 {
            if y != DOOR_Y && y != DOOR_Y + 1 {
                canvas.fill_rect(WALL_X, y, 1, 1, WALL);
            }
        }
        canvas.sprite(cell.0, cell.1, AGENT);
        frames.push(canvas.into_tensor());
        positions.push(vec![EntityPos {
            id: 0,
            x: cell.0 as u16,
            y: cell.1 as u16,
        }]);
    }
    Some(Episode {
        frames,
        positions,
        bottleneck_truth: truth,
    })
}

/// Doorway crossing: the agent box covers the wall column.
pub(super) fn is_bottleneck(ep: &Episode, frame: usize) -> bool {
    let a = ep.entity(frame, 0).expect("agent present");
    a.x as i32 == WALL_X - 1 || a.x as i32 == WALL_X
}
