//! Hierarchical planning: cross-entropy-method MPC on push dynamics,
//! steered toward predicted subgoal object locations for the first half of
//! the budget, against planning straight at the final goal.
//!
//! Runs a few minutes on one CPU core:
//!
//! ```bash
//! cargo run --release -p tap --example plan_with_subgoals
//! ```

use tap::cli::{train, LossKind, Mode, RunConfig, RunPlan};
use tap::metrics::subgoal_locations;
use tap::planner::{hierarchical_episode, PlanConfig, PushState};
use tap::synthworlds::gen_gridpush;

fn main() -> tap::Result<()> {
    let train_data = gen_gridpush(55, 400, 3)?;
    let plan_data = gen_gridpush(77, 12, 3)?;
    let cfg = RunConfig {
        world: train_data.world,
        mode: Mode::Bidirectional,
        loss: LossKind::Genmin,
        use_new_pixels: false,
        epochs: 6,
        batch_size: 16,
        learning_rate: 1e-3,
        lambda_gan: 2e-3,
        seed: 8,
        code_dim: 32,
        latent_dim: 8,
        widths: vec![8, 16, 32],
        disc_widths: Some(vec![6, 12, 18]),
        ..RunConfig::default()
    };
    println!("training a warp-only 3-object pushing predictor...");
    let outcome = train(&cfg, &train_data)?;
    let plan = RunPlan::new(&cfg, train_data.t_len)?;
    let pcfg = PlanConfig::for_objects(3);

    let mut totals = (0.0, 0.0);
    for (idx, ep) in plan_data.episodes.iter().enumerate() {
        let pusher = ep.entity(0, 0).expect("pusher");
        let state = PushState {
            pusher: (pusher.x as f64, pusher.y as f64),
            objects: ep.objects(0).iter().map(|o| (o.x as f64, o.y as f64)).collect(),
        };
        let last = ep.t_len() - 1;
        let finals: Vec<_> = ep.objects(last).iter().map(|o| (o.x as f64, o.y as f64)).collect();

        // subgoal: argmax of each object's warped location map
        let context: Vec<_> = plan.context_indices.iter().map(|&i| &ep.frames[i]).collect();
        let frames = outcome.models.generator.predict_frames(&context, None)?;
        let positions: Vec<Vec<(usize, usize)>> = ep
            .objects(0)
            .iter()
            .map(|o| {
                vec![
                    (o.x as usize, o.y as usize),
                    ep.entity(last, o.id).map(|e| (e.x as usize, e.y as usize)).expect("entity"),
                ]
            })
            .collect();
        let maps = subgoal_locations(&frames, &positions)?;
        let subgoal: Vec<_> = maps
            .iter()
            .map(|m| {
                let (x, y) = m.argmax();
                (x as f64, y as f64)
            })
            .collect();

        let direct = hierarchical_episode(&state, &finals, None, &pcfg, idx as u64)?;
        let steered = hierarchical_episode(&state, &finals, Some(&subgoal), &pcfg, idx as u64)?;
        totals.0 += direct.final_mean_distance;
        totals.1 += steered.final_mean_distance;
        println!(
            "episode {idx:>2}: direct {:.2} px, with subgoal {:.2} px",
            direct.final_mean_distance, steered.final_mean_distance
        );
    }
    let n = plan_data.len() as f64;
    println!(
        "\nmean final object distance: direct {:.2} px, subgoal {:.2} px",
        totals.0 / n,
        totals.1 / n
    );
    Ok(())
}
