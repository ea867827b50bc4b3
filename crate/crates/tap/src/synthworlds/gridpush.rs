//! Sequential multi-object pushing episodes.
//!
//! A pusher delivers each object from its start to its goal, one at a
//! time: walk behind the object, push along one axis, restage, push along
//! the other. Object order is randomized but forced to a collision-free
//! order when paths would cross. The frames between two deliveries — one
//! object at its goal, the rest still at their starts — are the recorded
//! bottleneck window.

use super::render::{random_object_color, Canvas, AGENT};
use super::walk::Cell;
use super::{Episode, EntityPos};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

const POS_MAX: i32 = 14; // top-left range for 2x2 sprites on a 16x16 grid
const T_LEN: usize = 40;

fn boxes_overlap(a: Cell, b: Cell) -> bool {
    (a.0 - b.0).abs() <= 1 && (a.1 - b.1).abs() <= 1
}

fn clear_of(c: Cell, others: &[Cell], margin: i32) -> bool {
    others
        .iter()
        .all(|&o| (c.0 - o.0).abs().max((c.1 - o.1).abs()) >= margin)
}

pub(super) fn episode(seed: u64, n_objects: usize) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..2000 {
        if let Some(ep) = try_episode(&mut rng, n_objects) {
            return ep;
        }
    }
    unreachable!("grid-push scenario sampling failed 2000 times");
}

struct Layout {
    starts: Vec<Cell>,
    goals: Vec<Cell>,
    pusher: Cell,
    order: Vec<usize>,
}

/// Cells swept by an object pushed along its L-shaped path (first axis
/// `x_first`, then the other).
fn swept_cells(from: Cell, to: Cell, x_first: bool) -> Vec<Cell> {
    let mut cells = vec![from];
    let mut cur = from;
    let (first, second) = if x_first { (0, 1) } else { (1, 0) };
    for axis in [first, second] {
        let (target, step): (i32, i32) = if axis == 0 {
            (to.0, (to.0 - cur.0).signum())
        } else {
            (to.1, (to.1 - cur.1).signum())
        };
        while (if axis == 0 { cur.0 } else { cur.1 }) != target {
            if axis == 0 {
                cur.0 += step;
            } else {
                cur.1 += step;
            }
            cells.push(cur);
        }
    }
    cells
}

fn sample_layout(rng: &mut impl Rng, n_objects: usize) -> Option<Layout> {
    let max_push = if n_objects >= 3 { 4 } else { 7 };
    let mut starts: Vec<Cell> = Vec::new();
    for _ in 0..n_objects {
        let c = (0..20)
            .map(|_| (rng.random_range(2..=12), rng.random_range(2..=12)))
            .find(|&c| clear_of(c, &starts, 4))?;
        starts.push(c);
    }
    let mut goals: Vec<Cell> = Vec::new();
    for k in 0..n_objects {
        let c = (0..40)
            .map(|_| (rng.random_range(1..=13), rng.random_range(1..=13)))
            .find(|&c| {
                let d = (c.0 - starts[k].0).abs().max((c.1 - starts[k].1).abs());
                let mut occupied = goals.clone();
                occupied.extend(starts.iter().copied());
                (3..=max_push).contains(&d) && clear_of(c, &occupied, 3)
            })?;
        goals.push(c);
    }
    let pusher = (0..20)
        .map(|_| (rng.random_range(0..=POS_MAX), rng.random_range(0..=POS_MAX)))
        .find(|&c| clear_of(c, &starts, 3))?;

    // Find a delivery order whose pushes never disturb the other objects.
    let mut orders: Vec<Vec<usize>> = permutations(n_objects);
    orders.shuffle(rng);
    let order = orders.into_iter().find(|order| {
        let mut placed: Vec<(usize, Cell)> = (0..n_objects).map(|k| (k, starts[k])).collect();
        for &k in order {
            let others: Vec<Cell> = placed.iter().filter(|(id, _)| *id != k).map(|(_, c)| *c).collect();
            // require clearance for both the object track and the pusher
            // trailing two cells behind along each axis leg
            let ok = [true, false].iter().any(|&x_first| {
                swept_cells(starts[k], goals[k], x_first)
                    .iter()
                    .all(|&c| in_bounds(c) && clear_of(c, &others, 2))
            });
            if !ok {
                return false;
            }
            let slot = placed.iter_mut().find(|(id, _)| *id == k).expect("object present");
            slot.1 = goals[k];
        }
        true
    })?;
    Some(Layout {
        starts,
        goals,
        pusher,
        order,
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..n).collect();
    permute(&mut items, 0, &mut out);
    out
}

fn permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, out);
        items.swap(k, i);
    }
}

fn in_bounds(c: Cell) -> bool {
    (0..=POS_MAX).contains(&c.0) && (0..=POS_MAX).contains(&c.1)
}

/// 8-neighbor distance field to `to`, avoiding object boxes; `None` where
/// unreachable.
fn distance_field(to: Cell, obstacles: &[Cell]) -> Option<Vec<i32>> {
    let blocked = |c: Cell| !in_bounds(c) || obstacles.iter().any(|&o| boxes_overlap(c, o));
    if blocked(to) {
        return None;
    }
    let side = (POS_MAX + 1) as usize;
    let idx = |c: Cell| c.1 as usize * side + c.0 as usize;
    let mut field = vec![-1i32; side * side];
    let mut q = VecDeque::new();
    field[idx(to)] = 0;
    q.push_back(to);
    while let Some(cur) = q.pop_front() {
        for dx in -1..=1 {
            for dy in -1..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let next = (cur.0 + dx, cur.1 + dy);
                if !blocked(next) && field[idx(next)] < 0 {
                    field[idx(next)] = field[idx(cur)] + 1;
                    q.push_back(next);
                }
            }
        }
    }
    Some(field)
}

/// Random wander from `from` to `to` in exactly `steps` moves, never
/// leaving the reachable region: each step samples uniformly among moves
/// that keep the target reachable within the remaining budget.
fn wander(
    rng: &mut impl Rng,
    from: Cell,
    to: Cell,
    steps: usize,
    obstacles: &[Cell],
) -> Option<Vec<Cell>> {
    let blocked = |c: Cell| !in_bounds(c) || obstacles.iter().any(|&o| boxes_overlap(c, o));
    if blocked(from) {
        return None;
    }
    let field = distance_field(to, obstacles)?;
    let side = (POS_MAX + 1) as usize;
    let dist = |c: Cell| field[c.1 as usize * side + c.0 as usize];
    if dist(from) < 0 || dist(from) > steps as i32 {
        return None;
    }
    let mut path = Vec::with_capacity(steps + 1);
    path.push(from);
    let mut pos = from;
    for k in 0..steps {
        let remaining = (steps - k - 1) as i32;
        let mut candidates = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                let next = (pos.0 + dx, pos.1 + dy);
                if !blocked(next) && dist(next) >= 0 && dist(next) <= remaining {
                    candidates.push(next);
                }
            }
        }
        debug_assert!(!candidates.is_empty(), "distance field keeps the walk feasible");
        pos = candidates[rng.random_range(0..candidates.len())];
        path.push(pos);
    }
    debug_assert_eq!(pos, to);
    Some(path)
}

/// Shortest pusher path avoiding all object boxes (4-neighbor BFS; the
/// pusher box must not overlap any object box along the way).
fn bfs_path(from: Cell, to: Cell, obstacles: &[Cell]) -> Option<Vec<Cell>> {
    let blocked = |c: Cell| !in_bounds(c) || obstacles.iter().any(|&o| boxes_overlap(c, o));
    if blocked(to) || blocked(from) {
        return None;
    }
    let idx = |c: Cell| (c.1 * (POS_MAX + 1) + c.0) as usize;
    let mut prev: Vec<Option<Cell>> = vec![None; ((POS_MAX + 1) * (POS_MAX + 1)) as usize];
    let mut seen = vec![false; prev.len()];
    let mut q = VecDeque::new();
    seen[idx(from)] = true;
    q.push_back(from);
    while let Some(cur) = q.pop_front() {
        if cur == to {
            let mut path = vec![to];
            let mut c = to;
            while let Some(p) = prev[idx(c)] {
                path.push(p);
                c = p;
            }
            path.reverse();
            return Some(path);
        }
        for (dx, dy) in [(0, -1), (1, 0), (0, 1), (-1, 0)] {
            let next = (cur.0 + dx, cur.1 + dy);
            if !blocked(next) && !seen[idx(next)] {
                seen[idx(next)] = true;
                prev[idx(next)] = Some(cur);
                q.push_back(next);
            }
        }
    }
    None
}

struct Timeline {
    pusher: Vec<Cell>,
    objects: Vec<Vec<Cell>>, // [object][frame]
    truth: Vec<usize>,
}

fn try_episode(rng: &mut impl Rng, n_objects: usize) -> Option<Episode> {
    let layout = sample_layout(rng, n_objects)?;
    let timeline = script(rng, &layout)?;

    let colors: Vec<_> = (0..n_objects).map(|_| random_object_color(rng)).collect();
    let t_len = timeline.pusher.len();
    debug_assert_eq!(t_len, T_LEN);
    let mut frames = Vec::with_capacity(t_len);
    let mut positions = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut canvas = Canvas::new();
        for (k, color) in colors.iter().enumerate() {
            let c = timeline.objects[k][t];
            canvas.sprite(c.0, c.1, *color);
        }
        let p = timeline.pusher[t];
        canvas.sprite(p.0, p.1, AGENT);
        frames.push(canvas.into_tensor());
        let mut row = vec![EntityPos {
            id: 0,
            x: p.0 as u16,
            y: p.1 as u16,
        }];
        for k in 0..n_objects {
            let c = timeline.objects[k][t];
            row.push(EntityPos {
                id: (k + 1) as u16,
                x: c.0 as u16,
                y: c.1 as u16,
            });
        }
        positions.push(row);
    }
    Some(Episode {
        frames,
        positions,
        bottleneck_truth: timeline.truth,
    })
}

/// True when pushing `from -> to` with the given leg order keeps both the
/// object and the pusher trailing two cells behind it clear of every other
/// object and inside the grid.
fn leg_plan_clear(from: Cell, to: Cell, x_first: bool, others: &[Cell]) -> bool {
    let mut cur = from;
    let axes: [usize; 2] = if x_first { [0, 1] } else { [1, 0] };
    for axis in axes {
        let delta = if axis == 0 { to.0 - cur.0 } else { to.1 - cur.1 };
        if delta == 0 {
            continue;
        }
        let dir: Cell = if axis == 0 { (delta.signum(), 0) } else { (0, delta.signum()) };
        let staging = (cur.0 - 2 * dir.0, cur.1 - 2 * dir.1);
        if !in_bounds(staging) {
            return false;
        }
        for step in 0..=delta.abs() {
            let obj = (cur.0 + step * dir.0, cur.1 + step * dir.1);
            let pusher = (obj.0 - 2 * dir.0, obj.1 - 2 * dir.1);
            if !in_bounds(obj)
                || others.iter().any(|&o| boxes_overlap(obj, o) || boxes_overlap(pusher, o))
            {
                return false;
            }
        }
        cur = (cur.0 + delta * dir.0, cur.1 + delta * dir.1);
    }
    true
}

fn script(rng: &mut impl Rng, layout: &Layout) -> Option<Timeline> {
    let mut pusher_track: Vec<Cell> = vec![layout.pusher];
    let mut object_tracks: Vec<Vec<Cell>> = layout.starts.iter().map(|&s| vec![s]).collect();
    let mut pushes: Vec<(usize, usize)> = Vec::new(); // per delivery: (first-move frame, delivered frame)

    let hold = |tracks: &mut Vec<Vec<Cell>>, except: Option<usize>| {
        for (k, tr) in tracks.iter_mut().enumerate() {
            if Some(k) != except {
                let last = *tr.last().expect("non-empty track");
                tr.push(last);
            }
        }
    };

    let n_pushes = layout.order.len();
    for (push_idx, &k) in layout.order.iter().enumerate() {
        let mut cur = *object_tracks[k].last().expect("non-empty");
        let goal = layout.goals[k];
        // pick a leg order whose object sweep and trailing pusher sweep
        // stay clear of every other object; x-first when possible, so the
        // pusher's delivery pose is a pure function of the layout
        let others: Vec<Cell> = object_tracks
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .map(|(_, tr)| *tr.last().expect("non-empty"))
            .collect();
        let x_first = [true, false]
            .into_iter()
            .find(|&xf| leg_plan_clear(cur, goal, xf, &others))?;
        let mut first_move_frame: Option<usize> = None;
        let axes: Vec<usize> = if x_first { vec![0, 1] } else { vec![1, 0] };
        for axis in axes {
            let delta = if axis == 0 { goal.0 - cur.0 } else { goal.1 - cur.1 };
            if delta == 0 {
                continue;
            }
            let dir: Cell = if axis == 0 { (delta.signum(), 0) } else { (0, delta.signum()) };
            let staging = (cur.0 - 2 * dir.0, cur.1 - 2 * dir.1);
            // wander to the staging cell, everyone else frozen: the walk is
            // stochastic (only its endpoint is forced), so approach frames
            // stay unpredictable while delivered states are exact
            let obstacles: Vec<Cell> = object_tracks
                .iter()
                .map(|tr| *tr.last().expect("non-empty"))
                .collect();
            let from = *pusher_track.last().expect("non-empty");
            let field = distance_field(staging, &obstacles)?;
            let base = field[from.1 as usize * (POS_MAX + 1) as usize + from.0 as usize];
            if base < 0 {
                return None;
            }
            let jitter = if layout.starts.len() >= 3 { 1 } else { 3 };
            let steps = base as usize + rng.random_range(0..=jitter);
            let walk = wander(rng, from, staging, steps, &obstacles)?;
            for &step in walk.iter().skip(1) {
                pusher_track.push(step);
                hold(&mut object_tracks, None);
            }
            // push |delta| cells
            for _ in 0..delta.abs() {
                if first_move_frame.is_none() {
                    first_move_frame = Some(pusher_track.len());
                }
                let p = *pusher_track.last().expect("non-empty");
                pusher_track.push((p.0 + dir.0, p.1 + dir.1));
                cur = (cur.0 + dir.0, cur.1 + dir.1);
                if !in_bounds(cur) {
                    return None;
                }
                hold(&mut object_tracks, Some(k));
                object_tracks[k].push(cur);
            }
        }
        debug_assert_eq!(cur, goal);
        let delivered = pusher_track.len() - 1;
        pushes.push((first_move_frame.expect("push moved the object"), delivered));
        // idle gap between deliveries: the delivered state holds while the
        // pusher rests at its delivery pose
        if push_idx + 1 < n_pushes {
            let gap = if layout.starts.len() >= 3 { 1..=1 } else { 2..=4 };
            for _ in 0..rng.random_range(gap) {
                pusher_track.push(*pusher_track.last().expect("non-empty"));
                hold(&mut object_tracks, None);
            }
        }
        if pusher_track.len() > T_LEN {
            return None;
        }
    }

    // Tail: the pusher wanders without touching anything.
    while pusher_track.len() < T_LEN {
        let cur = *pusher_track.last().expect("non-empty");
        let placed: Vec<Cell> = object_tracks
            .iter()
            .map(|tr| *tr.last().expect("non-empty"))
            .collect();
        let mut candidates = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                let next = (cur.0 + dx, cur.1 + dy);
                if in_bounds(next) && placed.iter().all(|&o| !boxes_overlap(next, o)) {
                    candidates.push(next);
                }
            }
        }
        if candidates.is_empty() {
            // cornered pusher; scrap the scenario
            return None;
        }
        let next = candidates[rng.random_range(0..candidates.len())];
        pusher_track.push(next);
        hold(&mut object_tracks, None);
    }

    // Bottleneck windows: from each delivery to the frame before the next
    // push first moves an object.
    let mut truth = Vec::new();
    for pair in pushes.windows(2) {
        let (_, delivered) = pair[0];
        let (next_first_move, _) = pair[1];
        truth.extend(delivered..next_first_move);
    }
    if truth.is_empty() {
        return None;
    }

    Some(Timeline {
        pusher: pusher_track,
        objects: object_tracks,
        truth,
    })
}

/// A frame is a bottleneck when every object is exactly at its start or
/// its goal and the number delivered is strictly between zero and all.
pub(super) fn is_bottleneck(ep: &Episode, frame: usize) -> bool {
    let starts = ep.objects(0);
    let goals = ep.objects(ep.t_len() - 1);
    let now = ep.objects(frame);
    let n = now.len();
    let mut at_goal = 0;
    for i in 0..n {
        let (s, g, c) = (starts[i], goals[i], now[i]);
        if (c.x, c.y) == (g.x, g.y) {
            at_goal += 1;
        } else if (c.x, c.y) != (s.x, s.y) {
            return false;
        }
    }
    at_goal >= 1 && at_goal < n
}
