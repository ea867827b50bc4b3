//! Variational prediction: train a small latent-variable predictor and
//! evaluate the best of N prior samples per episode.
//!
//! ```bash
//! cargo run --release -p tap --example vae_best_of_n
//! ```

use tap::cli::{train, LossKind, Mode, RunConfig, RunPlan};
use tap::metrics::best_of_n_eval;
use tap::synthworlds::gen_gridpick;

fn main() -> tap::Result<()> {
    let dataset = gen_gridpick(9, 300, false)?;
    let cfg = RunConfig {
        world: dataset.world,
        mode: Mode::Bidirectional,
        loss: LossKind::GenminVae,
        epochs: 8,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 4,
        code_dim: 32,
        latent_dim: 8,
        widths: vec![8, 16, 32],
        disc_widths: Some(vec![6, 12, 18]),
        ..RunConfig::default()
    };
    println!("training a variational predictor ({} episodes)...", dataset.len());
    let outcome = train(&cfg, &dataset)?;
    let plan = RunPlan::new(&cfg, dataset.t_len)?;

    println!("\nbest-of-N over the test split (same prior sample stream per n):");
    for n in [1usize, 10, 100] {
        let mut total = 0.0;
        let test = dataset.test_indices();
        for &idx in &test {
            let ep = &dataset.episodes[idx];
            let context: Vec<_> = plan.context_indices.iter().map(|&i| &ep.frames[i]).collect();
            let targets: Vec<_> = plan
                .targets
                .indices()
                .iter()
                .map(|&i| (i, &ep.frames[i]))
                .collect();
            let (err, _) = best_of_n_eval(&outcome.models.generator, &context, &targets, n, idx as u64)?;
            total += err;
        }
        println!("  best-of-{:<3} mean min_l1_err {:.5}", n, total / test.len() as f64);
    }
    println!("\nmore samples never hurt: the minimum is over a fixed sample prefix");
    Ok(())
}
