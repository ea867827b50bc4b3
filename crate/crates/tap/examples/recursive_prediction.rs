//! Recursive subgoal discovery: predict an intermediate frame, make it the
//! new goal, and repeat. Each level's match lands strictly earlier in time.
//!
//! ```bash
//! cargo run --release -p tap --example recursive_prediction
//! ```

use tap::cli::{train, LossKind, Mode, RunConfig, RunPlan};
use tap::metrics::min_l1_and_match;
use tap::synthworlds::gen_gridpick;
use tap::taploss::recursive_target_update_before;

fn main() -> tap::Result<()> {
    let dataset = gen_gridpick(33, 300, true)?; // pick-and-place: two bottlenecks
    let cfg = RunConfig {
        world: dataset.world,
        mode: Mode::Bidirectional,
        loss: LossKind::GenminNoGan,
        epochs: 8,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 6,
        code_dim: 32,
        latent_dim: 8,
        widths: vec![8, 16, 32],
        disc_widths: Some(vec![6, 12, 18]),
        ..RunConfig::default()
    };
    println!("training on pick-and-place ({} frames per episode)...", dataset.t_len);
    let outcome = train(&cfg, &dataset)?;
    let plan = RunPlan::new(&cfg, dataset.t_len)?;

    let episode = &dataset.episodes[dataset.test_indices()[0]];
    println!("episode bottlenecks at frames {:?}\n", episode.bottleneck_truth);

    let start = episode.frames[0].clone();
    let mut goal = episode.frames[episode.t_len() - 1].clone();
    let mut targets = plan.targets.clone();
    let mut level = 0;
    while !targets.is_empty() && level < 6 {
        let frames = outcome.models.generator.predict_frames(&[&start, &goal], None)?;
        let pairs: Vec<_> = targets.indices().iter().map(|&i| (i, &episode.frames[i])).collect();
        let (err, matched) = min_l1_and_match(&frames.composited, &pairs)?;
        println!(
            "level {level}: targets {:?} -> matched frame {} (min_l1 {:.4})",
            targets.indices(),
            matched,
            err
        );
        targets = recursive_target_update_before(&targets, matched)?;
        goal = frames.composited;
        level += 1;
    }
    println!("\neach level re-targets only the frames before its match, so the");
    println!("subgoal chain walks backward from the goal toward the start");
    Ok(())
}
