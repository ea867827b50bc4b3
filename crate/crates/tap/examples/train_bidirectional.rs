//! Train a small bidirectional predictor on grasp-and-lift episodes with
//! the generalized-minimum loss, next to a fixed-time baseline, and compare
//! test errors.
//!
//! Takes a couple of minutes on one CPU core:
//!
//! ```bash
//! cargo run --release -p tap --example train_bidirectional
//! ```

use tap::cli::{eval_split, train, LossKind, Mode, RunConfig, RunPlan};
use tap::synthworlds::gen_gridpick;

fn main() -> tap::Result<()> {
    let dataset = gen_gridpick(42, 400, false)?;
    println!(
        "gridpick: {} episodes ({} held out for testing)\n",
        dataset.len(),
        dataset.test_indices().len()
    );

    let base = RunConfig {
        world: dataset.world,
        mode: Mode::Bidirectional,
        epochs: 10,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 1,
        code_dim: 32,
        latent_dim: 8,
        widths: vec![8, 16, 32],
        disc_widths: Some(vec![6, 12, 18]),
        ..RunConfig::default()
    };

    for loss in [LossKind::Genmin, LossKind::Fix] {
        let cfg = RunConfig { loss, ..base.clone() };
        let outcome = train(&cfg, &dataset)?;
        let plan = RunPlan::new(&cfg, dataset.t_len)?;
        let (err, step) = eval_split(
            &outcome.models,
            &plan,
            &dataset,
            &dataset.test_indices(),
            cfg.seed,
        )?;
        println!(
            "{:<7} test min_l1_err {:.5}  mean match-step {:.2}",
            loss.name(),
            err,
            step
        );
        for row in outcome.rows.iter().step_by(3) {
            println!(
                "    epoch {:>2}: train l1 {:.5}, test min_l1_err {:.5}",
                row.epoch, row.components.l1, row.test_min_l1_err
            );
        }
    }
    println!("\nlower is better; the time-agnostic loss is free to match whichever");
    println!("frame the prediction lands on, so it converges to the grasp moment");
    Ok(())
}
