//! Grasp-and-lift episodes (with an optional place phase).
//!
//! A gripper random-walks down to a randomly placed object on the table —
//! contact timing and approach path vary per episode — then lifts it
//! straight up, which is deterministic given the contact pose. The contact
//! frame is the bottleneck. The 20-frame variant carries the object
//! sideways and sets it down again, adding a second bottleneck at the
//! place moment.

use super::render::{random_object_color, Canvas, AGENT, TABLE};
use super::walk::{chebyshev, conditioned_walk, Cell};
use super::{Episode, EntityPos, FRAME_H, FRAME_W};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Top row of the table strip; objects rest with their top at `TABLE_Y - 2`.
const TABLE_Y: i32 = 14;
const OBJECT_REST_Y: i32 = TABLE_Y - 2;
/// Gripper row at contact: one row of overlap with a resting object.
const CONTACT_Y: i32 = OBJECT_REST_Y - 1;

fn boxes_overlap(a: Cell, b: Cell) -> bool {
    (a.0 - b.0).abs() <= 1 && (a.1 - b.1).abs() <= 1
}

pub(super) fn episode(seed: u64, place: bool) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = if place { 20 } else { 15 };

    for _attempt in 0..500 {
        if let Some(ep) = try_episode(&mut rng, t_len, place) {
            return ep;
        }
    }
    unreachable!("grid-pick scenario sampling failed 500 times");
}

fn try_episode(rng: &mut impl Rng, t_len: usize, place: bool) -> Option<Episode> {
    let ox = rng.random_range(1..=13);
    let object_color = random_object_color(rng);
    let contact: Cell = (ox, CONTACT_Y);

    let gx0 = rng.random_range(0..=14);
    let gy0 = rng.random_range(0..=3);
    let start: Cell = (gx0, gy0);
    let min_steps = ((chebyshev(start, contact) + 1) / 2) as usize;
    let latest = if place { 8 } else { 10 };
    let earliest = min_steps.max(5);
    if earliest > latest {
        return None;
    }
    let t_contact = rng.random_range(earliest..=latest);

    // Approach: reach the contact pose exactly at t_contact without
    // touching the object earlier.
    let object_pos: Cell = (ox, OBJECT_REST_Y);
    let approach = conditioned_walk(rng, start, contact, t_contact, 2, |c, k| {
        let in_bounds = (0..=14).contains(&c.0) && (0..=CONTACT_Y).contains(&c.1);
        let contact_now = boxes_overlap(c, object_pos);
        in_bounds && (!contact_now || (k == t_contact && c == contact))
    })?;

    let mut gripper = approach;
    let mut object: Vec<Cell> = vec![object_pos; t_contact + 1];
    let mut truth = vec![t_contact];

    if !place {
        // Lift straight up, clamped at the top.
        for t in t_contact + 1..t_len {
            let gy = (CONTACT_Y - (t - t_contact) as i32).max(0);
            gripper.push((ox, gy));
            object.push((ox, gy + 1));
        }
    } else {
        // Lift to carry height, move sideways, lower, release, depart.
        let px = loop {
            let px = rng.random_range(1..=13);
            if (px - ox).abs() >= 2 {
                break px;
            }
        };

        let lateral_steps = ((px - ox).unsigned_abs() as usize).div_ceil(2);
        let t_place = t_contact + 3 + lateral_steps + 3;
        if t_place > t_len - 2 {
            return None;
        }
        let mut g = (ox, CONTACT_Y);
        for _ in 0..3 {
            g.1 -= 1;
            gripper.push(g);
            object.push((g.0, g.1 + 1));
        }
        for _ in 0..lateral_steps {
            let step = (px - g.0).clamp(-2, 2);
            g.0 += step;
            gripper.push(g);
            object.push((g.0, g.1 + 1));
        }
        for _ in 0..3 {
            g.1 += 1;
            gripper.push(g);
            object.push((g.0, g.1 + 1));
        }
        debug_assert_eq!(gripper.len() - 1, t_place);
        debug_assert_eq!(*object.last().expect("object path"), (px, OBJECT_REST_Y));
        truth.push(t_place);
        // Departure jitter, never re-touching the placed object.
        let placed = (px, OBJECT_REST_Y);
        while gripper.len() < t_len {
            let cur = *gripper.last().expect("non-empty");
            let mut candidates = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let next = (cur.0 + dx, cur.1 + dy);
                    let in_bounds = (0..=14).contains(&next.0) && (0..=CONTACT_Y).contains(&next.1);
                    if in_bounds && !boxes_overlap(next, placed) {
                        candidates.push(next);
                    }
                }
            }
            let next = candidates[rng.random_range(0..candidates.len())];
            gripper.push(next);
            object.push(placed);
        }
    }

    debug_assert_eq!(gripper.len(), t_len);
    let mut frames = Vec::with_capacity(t_len);
    let mut positions = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut canvas = Canvas::new();
        canvas.fill_rect(0, TABLE_Y, FRAME_W as i32, FRAME_H as i32 - TABLE_Y, TABLE);
        canvas.sprite(object[t].0, object[t].1, object_color);
        canvas.sprite(gripper[t].0, gripper[t].1, AGENT);
        frames.push(canvas.into_tensor());
        positions.push(vec![
            EntityPos {
                id: 0,
                x: gripper[t].0 as u16,
                y: gripper[t].1 as u16,
            },
            EntityPos {
                id: 1,
                x: object[t].0 as u16,
                y: object[t].1 as u16,
            },
        ]);
    }
    Some(Episode {
        frames,
        positions,
        bottleneck_truth: truth,
    })
}

/// A frame is a bottleneck when the gripper overlaps the object while the
/// object rests on the table: true at the grasp moment and (for the place
/// variant) at the set-down moment, and nowhere else.
pub(super) fn is_bottleneck(ep: &Episode, frame: usize) -> bool {
    let g = ep.entity(frame, 0).expect("gripper present");
    let o = ep.entity(frame, 1).expect("object present");
    let overlap = boxes_overlap((g.x as i32, g.y as i32), (o.x as i32, o.y as i32));
    overlap && o.y as i32 == OBJECT_REST_Y
}
