//! Implementations behind the `tap` subcommands.

use super::config::{CheckpointMeta, Mode, RunConfig};
use super::train::{eval_episode, train, ModelSet, RunPlan};
use crate::autodiff::Tensor;
use crate::metrics::{
    best_of_n_eval, bottleneck_frequency_curve, bottleneck_score, min_l1_and_match,
    subgoal_locations, write_curve_csv, write_eval_csv, EvalRecord, LocationMap,
};
use crate::planner::{hierarchical_episode, write_plan_csv, PlanConfig, PushState};
use crate::synthworlds::{
    frame_to_pgm, frame_to_ppm, generate, mix_seed, read_dataset, write_dataset, Dataset, Episode,
    WorldId,
};
use crate::taploss::recursive_target_update_before;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// `gen`: dataset generation.
pub fn cmd_gen(world: WorldId, n: usize, seed: u64, out: &Path) -> Result<()> {
    let dataset = generate(world, seed, n)?;
    write_dataset(&dataset, out)?;
    println!(
        "wrote {}: world={} episodes={} t_len={} frame={}x{}x{}",
        out.display(),
        world.name(),
        dataset.len(),
        dataset.t_len,
        dataset.height,
        dataset.width,
        dataset.channels,
    );
    Ok(())
}

/// `train`: optimize the configured loss and write checkpoint + log CSV.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let dataset_path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("train requires a dataset path".into()))?;
    let dataset = read_dataset(dataset_path)?;
    let outcome = train(cfg, &dataset)?;

    let mut csv = String::from(
        "epoch,total,l1,gan_gen,gan_disc,cvae_gan_disc,kl,test_min_l1_err,test_match_step\n",
    );
    for r in &outcome.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.total,
            r.components.l1,
            r.components.gan_gen,
            r.components.gan_disc,
            r.components.cvae_gan_disc,
            r.components.kl,
            r.test_min_l1_err,
            r.test_match_step
        ));
    }
    if let Some(log) = &cfg.log_out {
        std::fs::write(log, &csv).map_err(|e| Error::io(log, e))?;
    }
    let ckpt = cfg
        .checkpoint_out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}_{}.tapckpt", cfg.world.name(), cfg.loss.name())));
    outcome.models.save(&ckpt, &outcome.meta)?;
    if let Some(last) = outcome.rows.last() {
        println!(
            "trained {} epochs: train total {:.6}, test min_l1_err {:.6} -> {}",
            last.epoch + 1,
            last.total,
            last.test_min_l1_err,
            ckpt.display()
        );
    }
    Ok(())
}

fn load_for_dataset(checkpoint: &Path, dataset: &Dataset) -> Result<(CheckpointMeta, ModelSet, RunPlan)> {
    let (meta, models) = ModelSet::load(checkpoint)?;
    if meta.t_len != dataset.t_len {
        return Err(Error::Data(format!(
            "checkpoint targets {} frames per episode but the dataset has {}",
            meta.t_len, dataset.t_len
        )));
    }
    if meta.config.world.object_count() != dataset.world.object_count()
        || meta.config.world.t_len() != dataset.world.t_len()
    {
        return Err(Error::Data(format!(
            "checkpoint world {} is incompatible with dataset world {}",
            meta.config.world.name(),
            dataset.world.name()
        )));
    }
    let plan = RunPlan::new(&meta.config, dataset.t_len)?;
    Ok((meta, models, plan))
}

/// `eval`: per-test-episode min-l1 and match-step records.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset_path: &Path,
    out: &Path,
    seed: u64,
    best_of: usize,
) -> Result<()> {
    let dataset = read_dataset(dataset_path)?;
    let (meta, models, plan) = load_for_dataset(checkpoint, &dataset)?;
    let method = if best_of > 1 {
        format!("{}_best_of_{}", meta.config.loss.name(), best_of)
    } else {
        meta.config.loss.name().to_string()
    };
    let mut records = Vec::new();
    for &idx in &dataset.test_indices() {
        let ep = &dataset.episodes[idx];
        let (err, step) = if best_of > 1 {
            let context: Vec<&Tensor> = plan.context_indices.iter().map(|&i| &ep.frames[i]).collect();
            let targets: Vec<(usize, &Tensor)> = plan
                .targets
                .indices()
                .iter()
                .map(|&i| (i, &ep.frames[i]))
                .collect();
            best_of_n_eval(&models.generator, &context, &targets, best_of, mix_seed(seed, idx))?
        } else {
            eval_episode(&models, &plan, ep, mix_seed(seed ^ 0xE7A1, idx))?
        };
        records.push(EvalRecord {
            episode: idx,
            method: method.clone(),
            min_l1_err: err,
            match_step: step,
        });
    }
    write_eval_csv(out, &records)?;
    let mean: f64 = records.iter().map(|r| r.min_l1_err).sum::<f64>() / records.len().max(1) as f64;
    println!(
        "evaluated {} test episodes ({}): mean min_l1_err {:.6} -> {}",
        records.len(),
        method,
        mean,
        out.display()
    );
    Ok(())
}

/// Object entity positions (ids >= 1) in one frame, ordered by id.
fn object_positions(ep: &Episode, frame: usize) -> Vec<(f64, f64)> {
    ep.objects(frame)
        .iter()
        .map(|e| (e.x as f64, e.y as f64))
        .collect()
}

/// Warp-only subgoal maps for every object of one episode.
fn episode_subgoal_maps(models: &ModelSet, plan: &RunPlan, ep: &Episode) -> Result<Vec<LocationMap>> {
    let context: Vec<&Tensor> = plan.context_indices.iter().map(|&i| &ep.frames[i]).collect();
    let frames = models.generator.predict_frames(&context, None)?;
    let objects = ep.objects(0);
    let last = ep.t_len() - 1;
    let entity_positions: Vec<Vec<(usize, usize)>> = objects
        .iter()
        .map(|o| {
            plan.context_indices
                .iter()
                .map(|&ci| {
                    let frame_idx = if ci == 0 { 0 } else { last };
                    let e = ep.entity(frame_idx, o.id).expect("entity present");
                    (e.x as usize, e.y as usize)
                })
                .collect()
        })
        .collect();
    subgoal_locations(&frames, &entity_positions)
}

/// `bottleneck`: score the warp-only predictions of every test episode and
/// write the frequency-vs-threshold curve.
pub fn cmd_bottleneck(checkpoint: &Path, dataset_path: &Path, out: &Path) -> Result<()> {
    let dataset = read_dataset(dataset_path)?;
    let (meta, models, plan) = load_for_dataset(checkpoint, &dataset)?;
    if meta.config.use_new_pixels {
        return Err(Error::Config(
            "bottleneck analysis requires a warp-only checkpoint (trained with use_new_pixels=false)"
                .into(),
        ));
    }
    if dataset.world.object_count() != 2 {
        return Err(Error::Data(format!(
            "bottleneck scoring is defined for 2-object pushing, dataset is {}",
            dataset.world.name()
        )));
    }
    if meta.config.base_mode() != Mode::Bidirectional {
        return Err(Error::Config("bottleneck analysis needs a bidirectional checkpoint".into()));
    }
    let mut scores = Vec::new();
    for &idx in &dataset.test_indices() {
        let ep = &dataset.episodes[idx];
        let maps = episode_subgoal_maps(&models, &plan, ep)?;
        let starts = object_positions(ep, 0);
        let goals = object_positions(ep, ep.t_len() - 1);
        scores.push(bottleneck_score(&maps, &starts, &goals)?);
    }
    let thresholds: Vec<f64> = (1..=16).map(|k| k as f64 * 0.5).collect();
    let curve = bottleneck_frequency_curve(&scores, &thresholds)?;
    write_curve_csv(out, &curve, meta.config.loss.name())?;
    let at2 = curve
        .iter()
        .find(|(t, _)| (*t - 2.0).abs() < 1e-9)
        .map(|(_, f)| *f)
        .unwrap_or(f64::NAN);
    println!(
        "bottleneck frequency at 2 px: {:.3} over {} episodes ({}) -> {}",
        at2,
        scores.len(),
        meta.config.loss.name(),
        out.display()
    );
    Ok(())
}

/// Subgoal provider for planning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanMethod {
    Direct,
    Genmin,
    Fix,
}

impl PlanMethod {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "direct" => PlanMethod::Direct,
            "genmin" => PlanMethod::Genmin,
            "fix" => PlanMethod::Fix,
            other => return Err(Error::Config(format!("unknown plan method {other:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            PlanMethod::Direct => "direct",
            PlanMethod::Genmin => "genmin",
            PlanMethod::Fix => "fix",
        }
    }
}

/// `plan`: CEM-MPC episodes over the first `n_episodes` of the dataset,
/// optionally steered by model subgoals for the first half of the budget.
pub fn cmd_plan(
    method: PlanMethod,
    checkpoint: Option<&Path>,
    dataset_path: &Path,
    out: &Path,
    n_episodes: usize,
    seed: u64,
) -> Result<()> {
    let dataset = read_dataset(dataset_path)?;
    let n_objects = dataset.world.object_count();
    if n_objects < 2 {
        return Err(Error::Data(format!(
            "planning runs on pushing worlds, dataset is {}",
            dataset.world.name()
        )));
    }
    let loaded = match method {
        PlanMethod::Direct => None,
        _ => {
            let path = checkpoint.ok_or_else(|| {
                Error::Config(format!("plan method {} requires --checkpoint", method.name()))
            })?;
            let (meta, models, plan) = load_for_dataset(path, &dataset)?;
            if meta.config.use_new_pixels {
                return Err(Error::Config(
                    "subgoal planning requires a warp-only checkpoint".into(),
                ));
            }
            Some((models, plan))
        }
    };

    let cfg = PlanConfig::for_objects(n_objects);
    let n_episodes = n_episodes.min(dataset.len());
    let mut rows = Vec::with_capacity(n_episodes);
    for idx in 0..n_episodes {
        let ep = &dataset.episodes[idx];
        let pusher0 = ep.entity(0, 0).expect("pusher present");
        let state = PushState {
            pusher: (pusher0.x as f64, pusher0.y as f64),
            objects: object_positions(ep, 0),
        };
        let finals = object_positions(ep, ep.t_len() - 1);
        let subgoal = match &loaded {
            None => None,
            Some((models, plan)) => {
                let maps = episode_subgoal_maps(models, plan, ep)?;
                Some(
                    maps.iter()
                        .map(|m| {
                            let (x, y) = m.argmax();
                            (x as f64, y as f64)
                        })
                        .collect::<Vec<_>>(),
                )
            }
        };
        let result = hierarchical_episode(
            &state,
            &finals,
            subgoal.as_deref(),
            &cfg,
            mix_seed(seed, idx),
        )?;
        rows.push((
            idx,
            method.name().to_string(),
            result.final_mean_distance,
            result.actions.len(),
        ));
    }
    write_plan_csv(out, &rows)?;
    let mean: f64 = rows.iter().map(|r| r.2).sum::<f64>() / rows.len().max(1) as f64;
    println!(
        "planned {} episodes ({}): mean final distance {:.3} -> {}",
        rows.len(),
        method.name(),
        mean,
        out.display()
    );
    Ok(())
}

/// `recursive`: chained goal-side prediction with frame dumps and a CSV of
/// the match indices per recursion level.
pub fn cmd_recursive(
    checkpoint: &Path,
    dataset_path: &Path,
    episode: usize,
    max_depth: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<()> {
    let dataset = read_dataset(dataset_path)?;
    let (meta, models, plan) = load_for_dataset(checkpoint, &dataset)?;
    if meta.config.base_mode() != Mode::Bidirectional {
        return Err(Error::Config(
            "recursive prediction requires a bidirectional checkpoint".into(),
        ));
    }
    if episode >= dataset.len() {
        return Err(Error::Data(format!(
            "episode {} out of range ({} available)",
            episode,
            dataset.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ep = &dataset.episodes[episode];
    let start = ep.frames[0].clone();
    let mut goal = ep.frames[ep.t_len() - 1].clone();
    let mut targets = plan.targets.clone();
    let mut csv = String::from("level,match_index,min_l1_err\n");
    let mut level = 0usize;
    while !targets.is_empty() && level < max_depth {
        let z = models.generator.cfg.use_vae.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, level));
            Tensor::randn(&[models.generator.cfg.latent_dim], 1.0, &mut rng)
        });
        let frames = models.generator.predict_frames(&[&start, &goal], z.as_ref())?;
        let pairs: Vec<(usize, &Tensor)> = targets
            .indices()
            .iter()
            .map(|&i| (i, &ep.frames[i]))
            .collect();
        let (err, matched) = min_l1_and_match(&frames.composited, &pairs)?;
        let dump = out_dir.join(format!("level_{level}.ppm"));
        if dataset.channels == 3 {
            frame_to_ppm(&frames.composited, &dump)?;
        } else {
            frame_to_pgm(&frames.composited, &out_dir.join(format!("level_{level}.pgm")))?;
        }
        csv.push_str(&format!("{},{},{}\n", level, matched, err));
        targets = recursive_target_update_before(&targets, matched)?;
        goal = frames.composited;
        level += 1;
    }
    let csv_path = out_dir.join("recursive.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    println!("recursive prediction stopped after {} levels -> {}", level, out_dir.display());
    Ok(())
}

/// `dump-frames`: PPM (or PGM for single-channel data) dumps of one
/// episode.
pub fn cmd_dump_frames(dataset_path: &Path, episode: usize, out_dir: &Path) -> Result<()> {
    let dataset = read_dataset(dataset_path)?;
    if episode >= dataset.len() {
        return Err(Error::Data(format!(
            "episode {} out of range ({} available)",
            episode,
            dataset.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ep = &dataset.episodes[episode];
    for (t, frame) in ep.frames.iter().enumerate() {
        if dataset.channels == 3 {
            frame_to_ppm(frame, &out_dir.join(format!("frame_{t:03}.ppm")))?;
        } else {
            frame_to_pgm(frame, &out_dir.join(format!("frame_{t:03}.pgm")))?;
        }
    }
    println!(
        "dumped {} frames of episode {} (bottlenecks at {:?}) -> {}",
        ep.t_len(),
        episode,
        ep.bottleneck_truth,
        out_dir.display()
    );
    Ok(())
}
