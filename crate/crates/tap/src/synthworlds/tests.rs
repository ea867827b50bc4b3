use super::*;
use proptest::prelude::*;

fn all_values_in_range(ds: &Dataset) -> bool {
    ds.episodes
        .iter()
        .flat_map(|e| &e.frames)
        .all(|f| f.data().iter().all(|v| (-1.0..=1.0).contains(v)))
}

fn truth_matches_predicate(ds: &Dataset) {
    for ep in &ds.episodes {
        let derived: Vec<usize> = (0..ep.t_len())
            .filter(|&t| bottleneck_predicate(ds.world, ep, t))
            .collect();
        assert_eq!(
            derived, ep.bottleneck_truth,
            "recorded bottleneck frames disagree with the geometric predicate"
        );
    }
}

#[test]
fn gridpick_contract() {
    let ds = gen_gridpick(11, 40, false).unwrap();
    assert_eq!(ds.t_len, 15);
    assert!(all_values_in_range(&ds));
    truth_matches_predicate(&ds);
    for ep in &ds.episodes {
        // exactly one bottleneck; gripper and object overlap there
        assert_eq!(ep.bottleneck_truth.len(), 1);
        let t = ep.bottleneck_truth[0];
        let g = ep.entity(t, 0).unwrap();
        let o = ep.entity(t, 1).unwrap();
        assert!((g.x as i32 - o.x as i32).abs() <= 1 && (g.y as i32 - o.y as i32).abs() <= 1);
        // first frame shows the object resting on the table strip
        let o0 = ep.entity(0, 1).unwrap();
        assert_eq!(o0.y, 12);
        // the lift is deterministic given the contact pose
        for (i, f) in (t..ep.t_len()).enumerate() {
            let g = ep.entity(f, 0).unwrap();
            let o = ep.entity(f, 1).unwrap();
            let expect_y = (11 - i as i32).max(0);
            assert_eq!(g.y as i32, expect_y);
            assert_eq!(o.y as i32, expect_y + 1);
            assert_eq!(g.x, o.x);
        }
    }
    // pre-contact frames differ across episodes (approach is stochastic)
    let mid_positions: std::collections::BTreeSet<(u16, u16)> = ds
        .episodes
        .iter()
        .map(|e| {
            let g = e.entity(2, 0).unwrap();
            (g.x, g.y)
        })
        .collect();
    assert!(mid_positions.len() > 3);
}

#[test]
fn gridpickplace_has_two_bottlenecks() {
    let ds = gen_gridpick(13, 25, true).unwrap();
    assert_eq!(ds.t_len, 20);
    truth_matches_predicate(&ds);
    for ep in &ds.episodes {
        assert_eq!(ep.bottleneck_truth.len(), 2);
        let (grasp, place) = (ep.bottleneck_truth[0], ep.bottleneck_truth[1]);
        assert!(grasp < place);
        // object ends somewhere else than it started, back on the table
        let o0 = ep.entity(0, 1).unwrap();
        let o_end = ep.entity(ep.t_len() - 1, 1).unwrap();
        assert_ne!(o0.x, o_end.x);
        assert_eq!(o_end.y, 12);
    }
}

#[test]
fn gridpush_contract() {
    for n_objects in [2usize, 3] {
        let ds = gen_gridpush(17, 20, n_objects).unwrap();
        assert_eq!(ds.t_len, 40);
        assert!(all_values_in_range(&ds));
        truth_matches_predicate(&ds);
        for ep in &ds.episodes {
            assert!(!ep.bottleneck_truth.is_empty());
            let starts = ep.objects(0);
            let goals = ep.objects(ep.t_len() - 1);
            assert_eq!(starts.len(), n_objects);
            // objects genuinely move
            for (s, g) in starts.iter().zip(&goals) {
                let d = (s.x as i32 - g.x as i32).abs().max((s.y as i32 - g.y as i32).abs());
                assert!(d >= 3, "object moved only {} cells", d);
            }
            // at every bottleneck frame: some delivered, the rest at start
            for &t in &ep.bottleneck_truth {
                let now = ep.objects(t);
                let at_goal = now
                    .iter()
                    .zip(&goals)
                    .filter(|(c, g)| (c.x, c.y) == (g.x, g.y))
                    .count();
                let at_start = now
                    .iter()
                    .zip(&starts)
                    .filter(|(c, s)| (c.x, c.y) == (s.x, s.y))
                    .count();
                assert!(at_goal >= 1 && at_goal < n_objects);
                assert_eq!(at_goal + at_start, n_objects);
            }
        }
    }
}

#[test]
fn gridpush_is_deterministic_per_seed() {
    let a = gen_gridpush(23, 8, 2).unwrap();
    let b = gen_gridpush(23, 8, 2).unwrap();
    assert_eq!(a, b);
    let c = gen_gridpush(24, 8, 2).unwrap();
    assert_ne!(a, c);
}

#[test]
fn maze_contract() {
    let ds = gen_maze(31, 40).unwrap();
    assert_eq!(ds.t_len, 20);
    truth_matches_predicate(&ds);
    for ep in &ds.episodes {
        // crosses the doorway at least once
        assert!(!ep.bottleneck_truth.is_empty());
        // start and goal in distinct rooms
        let a0 = ep.entity(0, 0).unwrap();
        let a_end = ep.entity(ep.t_len() - 1, 0).unwrap();
        assert!(a0.x <= 5, "start in left room");
        assert!(a_end.x >= 9, "goal in right room");
    }
}

#[test]
fn maze_mid_trajectory_is_stochastic() {
    // measured over 100 seeds: at mid-trajectory frames, at least 30% of
    // consecutive-seed pairs show the agent in different cells
    let datasets: Vec<Dataset> = (0..100).map(|s| gen_maze(s, 1).unwrap()).collect();
    let mut differ = 0usize;
    let mut total = 0usize;
    for t in 5..15 {
        for pair in datasets.windows(2) {
            let a = pair[0].episodes[0].entity(t, 0).unwrap();
            let b = pair[1].episodes[0].entity(t, 0).unwrap();
            total += 1;
            if (a.x, a.y) != (b.x, b.y) {
                differ += 1;
            }
        }
    }
    let frac = differ as f64 / total as f64;
    assert!(frac >= 0.3, "only {:.0}% of mid-trajectory frames differ", frac * 100.0);
}

#[test]
fn dataset_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for ds in [
        gen_gridpick(5, 12, false).unwrap(),
        gen_gridpush(6, 6, 2).unwrap(),
        gen_maze(7, 9).unwrap(),
    ] {
        let path = dir.path().join(format!("{}.tapds", ds.world.name()));
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }
}

#[test]
fn empty_dataset_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_gridpick(1, 0, false).unwrap();
    let path = dir.path().join("empty.tapds");
    write_dataset(&ds, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.world, WorldId::GridPick);
}

#[test]
fn corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_gridpick(9, 3, false).unwrap();
    let path = dir.path().join("ok.tapds");
    write_dataset(&ds, &path).unwrap();

    // flip one payload byte in the middle of an episode
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    let bad = dir.path().join("bad.tapds");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(
        read_dataset(&bad),
        Err(crate::Error::ChecksumMismatch { .. })
    ));

    // wrong magic
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(read_dataset(&bad), Err(crate::Error::BadMagic { .. })));

    // truncation
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&bad, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(read_dataset(&bad), Err(crate::Error::Truncated { .. })));
}

#[test]
fn test_split_is_about_five_percent() {
    let test: Vec<usize> = (0..2000).filter(|&i| is_test_episode(i)).collect();
    let frac = test.len() as f64 / 2000.0;
    assert!((0.03..=0.07).contains(&frac), "test split fraction {}", frac);
    // deterministic
    assert_eq!(test, (0..2000).filter(|&i| is_test_episode(i)).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_worlds_always_satisfy_predicates(seed in 0u64..5000) {
        let pick = gen_gridpick(seed, 2, false).unwrap();
        truth_matches_predicate(&pick);
        let push = gen_gridpush(seed, 1, 2).unwrap();
        truth_matches_predicate(&push);
        let maze = gen_maze(seed, 1).unwrap();
        truth_matches_predicate(&maze);
    }
}
