//! How the minimum-over-time and generalized-minimum losses pick their
//! target, on hand-made per-time error vectors.
//!
//! ```bash
//! cargo run --release -p tap --example loss_selection
//! ```

use tap::autodiff::Tape;
use tap::taploss::{
    generalized_min_loss, make_time_preference, recursive_target_update, PreferenceKind, TargetSet,
    TimePreference,
};

fn pick(errors: &[f64], weights: &TimePreference, targets: &TargetSet) -> (usize, f64) {
    let mut tape = Tape::new();
    let outer: Vec<_> = errors.iter().map(|&e| tape.scalar(e).unwrap()).collect();
    let (_, report) = generalized_min_loss(&mut tape, &outer, errors, weights, targets).unwrap();
    (report.match_index, report.total)
}

fn main() {
    // per-time l1 errors of some imaginary predictor: poor early, a clean
    // mid-episode bottleneck, and a slightly better but drifting tail
    let errors = [0.30, 0.14, 0.09, 0.075, 0.068, 0.066, 0.067, 0.070, 0.066, 0.060];
    let targets = TargetSet::range(1, 11);
    println!("per-time errors: {:?}\n", errors);

    let uniform = make_time_preference(PreferenceKind::Uniform, &targets).unwrap();
    let (step, total) = pick(&errors, &uniform, &targets);
    println!("min-over-time            -> match t={step}, penalty {total}");

    for beta in [7.0, 2.0, 0.5] {
        let linear = make_time_preference(PreferenceKind::Linear { beta }, &targets).unwrap();
        let (step, total) = pick(&errors, &linear, &targets);
        println!("genmin linear beta={beta:<4} -> match t={step}, penalty {total}");
    }

    let bell = make_time_preference(PreferenceKind::Bell { sigma: None }, &targets).unwrap();
    let (step, total) = pick(&errors, &bell, &targets);
    println!("genmin bell (midpoint)   -> match t={step}, penalty {total}");

    // recursive narrowing: each level targets only what comes after the match
    println!("\nrecursive target updates from a match at t=6:");
    let mut set = targets;
    let mut matched = 6;
    while !set.is_empty() {
        set = recursive_target_update(&set, matched).unwrap();
        println!("  level {} targets {:?}", set.recursion_level(), set.indices());
        match set.indices().first() {
            Some(&first) => matched = first + 1.min(set.len() - 1),
            None => break,
        }
        if !set.contains(matched) {
            matched = *set.indices().last().unwrap();
        }
    }
}
