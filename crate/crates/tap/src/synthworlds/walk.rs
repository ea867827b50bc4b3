//! Conditioned random walks: paths that wander but arrive exactly on time.

use rand::Rng;

pub(crate) type Cell = (i32, i32);

pub(crate) fn chebyshev(a: Cell, b: Cell) -> i32 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// Random walk from `from` to `to` in exactly `steps` moves, each move a
/// per-axis displacement in `[-speed, speed]`, visiting only cells allowed
/// by `valid(cell, step_index)`. Returns the `steps + 1` visited cells, or
/// `None` when the endpoint is unreachable under the constraints (callers
/// resample the scenario).
///
/// At each step the walk picks uniformly among the moves that keep the
/// target reachable in the remaining budget, which concentrates randomness
/// early and guarantees exact arrival.
pub(crate) fn conditioned_walk(
    rng: &mut impl Rng,
    from: Cell,
    to: Cell,
    steps: usize,
    speed: i32,
    mut valid: impl FnMut(Cell, usize) -> bool,
) -> Option<Vec<Cell>> {
    if chebyshev(from, to) > steps as i32 * speed || !valid(from, 0) {
        return None;
    }
    let mut path = Vec::with_capacity(steps + 1);
    path.push(from);
    let mut pos = from;
    for k in 0..steps {
        let remaining = (steps - k - 1) as i32;
        let mut candidates = Vec::new();
        for dx in -speed..=speed {
            for dy in -speed..=speed {
                let next = (pos.0 + dx, pos.1 + dy);
                if chebyshev(next, to) <= remaining * speed && valid(next, k + 1) {
                    candidates.push(next);
                }
            }
        }
        if candidates.is_empty() {
            return None;
        }
        pos = candidates[rng.random_range(0..candidates.len())];
        path.push(pos);
    }
    debug_assert_eq!(*path.last().expect("non-empty path"), to);
    Some(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn arrives_exactly_on_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for steps in [3usize, 5, 9] {
            let path = conditioned_walk(&mut rng, (0, 0), (2, 3), steps, 1, |c, _| {
                (0..10).contains(&c.0) && (0..10).contains(&c.1)
            })
            .unwrap();
            assert_eq!(path.len(), steps + 1);
            assert_eq!(path[0], (0, 0));
            assert_eq!(*path.last().unwrap(), (2, 3));
            for w in path.windows(2) {
                assert!(chebyshev(w[0], w[1]) <= 1);
            }
        }
    }

    #[test]
    fn unreachable_returns_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(conditioned_walk(&mut rng, (0, 0), (9, 9), 3, 1, |_, _| true).is_none());
    }
}
