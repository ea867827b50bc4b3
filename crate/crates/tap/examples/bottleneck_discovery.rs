//! Bottleneck discovery on two-object pushing: train warp-only predictors
//! and measure how often their predictions land on the "one object moved,
//! the other still in place" state.
//!
//! Runs a few minutes on one CPU core:
//!
//! ```bash
//! cargo run --release -p tap --example bottleneck_discovery
//! ```

use tap::cli::{train, LossKind, Mode, RunConfig, RunPlan};
use tap::metrics::{bottleneck_frequency_curve, bottleneck_score, subgoal_locations};
use tap::synthworlds::gen_gridpush;

fn main() -> tap::Result<()> {
    let dataset = gen_gridpush(21, 300, 2)?;
    let base = RunConfig {
        world: dataset.world,
        mode: Mode::Bidirectional,
        use_new_pixels: false, // warp-only so pixel origins can be tracked
        epochs: 8,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 2,
        code_dim: 32,
        latent_dim: 8,
        widths: vec![8, 16, 32],
        disc_widths: Some(vec![6, 12, 18]),
        ..RunConfig::default()
    };

    for loss in [LossKind::Genmin, LossKind::Fix] {
        let cfg = RunConfig { loss, ..base.clone() };
        println!("training {} (warp-only)...", loss.name());
        let outcome = train(&cfg, &dataset)?;
        let plan = RunPlan::new(&cfg, dataset.t_len)?;

        let mut scores = Vec::new();
        for &idx in &dataset.test_indices() {
            let ep = &dataset.episodes[idx];
            let context: Vec<_> = plan.context_indices.iter().map(|&i| &ep.frames[i]).collect();
            let frames = outcome.models.generator.predict_frames(&context, None)?;
            let last = ep.t_len() - 1;
            let objects = ep.objects(0);
            let positions: Vec<Vec<(usize, usize)>> = objects
                .iter()
                .map(|o| {
                    vec![
                        (o.x as usize, o.y as usize),
                        ep.entity(last, o.id).map(|e| (e.x as usize, e.y as usize)).expect("entity"),
                    ]
                })
                .collect();
            let maps = subgoal_locations(&frames, &positions)?;
            let starts: Vec<_> = objects.iter().map(|o| (o.x as f64, o.y as f64)).collect();
            let goals: Vec<_> = ep.objects(last).iter().map(|o| (o.x as f64, o.y as f64)).collect();
            scores.push(bottleneck_score(&maps, &starts, &goals)?);
        }
        let thresholds: Vec<f64> = (1..=8).map(|k| k as f64).collect();
        let curve = bottleneck_frequency_curve(&scores, &thresholds)?;
        print!("  frequency by threshold px:");
        for (t, f) in curve {
            print!("  {t}:{:.2}", f);
        }
        println!();
    }
    println!("\nhigh frequency at low thresholds means the predictor consistently");
    println!("lands on the between-pushes state instead of an arbitrary instant");
    Ok(())
}
