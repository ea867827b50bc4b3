//! Sampling-based hierarchical planning on push-world dynamics.
//!
//! The low-level planner is model-predictive control with cross-entropy
//! search: sample Gaussian action sequences, score each by the final
//! distance of every object to its target, refit the Gaussian to the
//! elites, and execute only the first action of the best sequence found.
//! The hierarchical wrapper steers toward predicted subgoal locations for
//! the first half of the step budget and the final goal afterwards.
//!
//! Dynamics stand in for a learned action-conditioned forward model: the
//! pusher displaces an object it contacts along its motion, pushes chain
//! through touching objects, and everything stays on the grid.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Sprite edge length; boxes overlap when top-left corners are closer than
/// this along both axes.
const SPRITE: f64 = 2.0;
/// Top-left coordinate range on the 16x16 grid.
const POS_MAX: f64 = 14.0;
/// Sub-step length for contact resolution.
const SUBSTEP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    /// CEM planning horizon (actions per candidate sequence).
    pub horizon: usize,
    /// Candidate sequences per CEM iteration.
    pub n_samples: usize,
    /// CEM refit iterations.
    pub cem_iters: usize,
    /// Fraction of samples refit as elites.
    pub elite_frac: f64,
    /// Total MPC steps for one episode.
    pub budget: usize,
    /// Maximum action magnitude in cells per step.
    pub action_max: f64,
}

impl PlanConfig {
    /// Defaults for an n-object pushing episode: budget 40 for two
    /// objects, 75 for three.
    pub fn for_objects(n_objects: usize) -> Self {
        PlanConfig {
            horizon: 15,
            n_samples: 200,
            cem_iters: 3,
            elite_frac: 0.1,
            budget: if n_objects >= 3 { 75 } else { 40 },
            action_max: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.elite_frac > 0.0 && self.elite_frac <= 1.0) {
            return Err(Error::Config(format!("elite_frac must be in (0, 1], got {}", self.elite_frac)));
        }
        if self.horizon == 0 || self.horizon > self.budget {
            return Err(Error::Config(format!(
                "horizon {} must be in [1, budget {}]",
                self.horizon, self.budget
            )));
        }
        if self.n_samples == 0 || self.cem_iters == 0 {
            return Err(Error::Config("n_samples and cem_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// The subgoal hands off to the final goal at this step.
    pub fn subgoal_switch(&self) -> usize {
        self.budget / 2
    }

    fn elite_count(&self) -> usize {
        ((self.n_samples as f64 * self.elite_frac).ceil() as usize).clamp(1, self.n_samples)
    }
}

/// Pusher and object top-left positions, in cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PushState {
    pub pusher: (f64, f64),
    pub objects: Vec<(f64, f64)>,
}

impl PushState {
    pub fn in_bounds(&self) -> bool {
        let ok = |p: (f64, f64)| (0.0..=POS_MAX).contains(&p.0) && (0.0..=POS_MAX).contains(&p.1);
        ok(self.pusher) && self.objects.iter().all(|&o| ok(o))
    }

    /// Sum of object distances to targets.
    pub fn cost(&self, targets: &[(f64, f64)]) -> f64 {
        self.objects
            .iter()
            .zip(targets)
            .map(|(o, t)| ((o.0 - t.0).powi(2) + (o.1 - t.1).powi(2)).sqrt())
            .sum()
    }

    /// Mean object distance to targets (the reported episode error).
    pub fn mean_distance(&self, targets: &[(f64, f64)]) -> f64 {
        self.cost(targets) / self.objects.len().max(1) as f64
    }
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    (a.0 - b.0).abs() < SPRITE && (a.1 - b.1).abs() < SPRITE
}

fn clamp_pos(p: (f64, f64)) -> (f64, f64) {
    (p.0.clamp(0.0, POS_MAX), p.1.clamp(0.0, POS_MAX))
}

/// One dynamics step. The action is clipped to `action_max` and integrated
/// in sub-steps; an object in contact along the motion is displaced by the
/// same sub-step, chaining through touching objects. A sub-step that would
/// drive any object off the grid is blocked entirely.
pub fn step(state: &PushState, action: (f64, f64), action_max: f64) -> PushState {
    let mag = (action.0 * action.0 + action.1 * action.1).sqrt();
    let action = if mag > action_max {
        (action.0 / mag * action_max, action.1 / mag * action_max)
    } else {
        action
    };
    let mag = (action.0 * action.0 + action.1 * action.1).sqrt();
    if mag == 0.0 {
        return state.clone();
    }
    let n_sub = (mag / SUBSTEP).ceil() as usize;
    let delta = (action.0 / n_sub as f64, action.1 / n_sub as f64);

    let mut cur = state.clone();
    'substeps: for _ in 0..n_sub {
        let new_pusher = (cur.pusher.0 + delta.0, cur.pusher.1 + delta.1);
        if new_pusher != clamp_pos(new_pusher) {
            break 'substeps; // pusher hit the wall
        }
        let mut new_objects = cur.objects.clone();
        // resolve chained contacts: push every object overlapped by a
        // moved box, repeated until stable
        let mut moved = vec![false; new_objects.len()];
        let mut frontier = vec![new_pusher];
        while let Some(mover) = frontier.pop() {
            for (k, obj) in new_objects.iter_mut().enumerate() {
                if !moved[k] && overlap(mover, *obj) {
                    let pushed = (obj.0 + delta.0, obj.1 + delta.1);
                    if pushed != clamp_pos(pushed) {
                        break 'substeps; // an object would leave the grid
                    }
                    *obj = pushed;
                    moved[k] = true;
                    frontier.push(pushed);
                }
            }
        }
        cur = PushState {
            pusher: new_pusher,
            objects: new_objects,
        };
    }
    cur
}

/// Applies an action sequence, returning every intermediate state
/// (`actions.len() + 1` entries including the start).
pub fn rollout(state: &PushState, actions: &[(f64, f64)], action_max: f64) -> Result<Vec<PushState>> {
    if !state.in_bounds() {
        return Err(Error::invalid("rollout", "start state out of bounds"));
    }
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(state.clone());
    for &a in actions {
        let next = step(states.last().expect("non-empty"), a, action_max);
        states.push(next);
    }
    Ok(states)
}

/// Diagnostics from one CEM search.
#[derive(Debug, Clone)]
pub struct CemStats {
    /// Mean elite cost after each iteration.
    pub elite_means: Vec<f64>,
    /// Best cost in the first (unrefined) sample batch.
    pub first_batch_best: f64,
}

/// Outcome of one CEM search: the best action sequence ever sampled.
#[derive(Debug, Clone)]
pub struct CemOutcome {
    pub actions: Vec<(f64, f64)>,
    pub cost: f64,
    pub stats: CemStats,
}

/// Generic cross-entropy optimization over action sequences: sample from a
/// per-step Gaussian, keep the elites, refit, repeat. Returns the best
/// sequence seen in any batch, so the result can never be worse than the
/// best of the first batch.
pub fn cem_optimize(
    cfg: &PlanConfig,
    rng: &mut ChaCha8Rng,
    cost_fn: impl Fn(&[(f64, f64)]) -> f64 + Sync,
) -> Result<CemOutcome> {
    cfg.validate()?;
    let h = cfg.horizon;
    let mut mean = vec![(0.0f64, 0.0f64); h];
    let mut std = vec![(1.0f64, 1.0f64); h];
    let mut best: Option<(f64, Vec<(f64, f64)>)> = None;
    let mut elite_means = Vec::with_capacity(cfg.cem_iters);
    let mut first_batch_best = f64::INFINITY;

    for iter in 0..cfg.cem_iters {
        let samples: Vec<Vec<(f64, f64)>> = (0..cfg.n_samples)
            .map(|_| {
                (0..h)
                    .map(|t| {
                        let nx: f64 = rng.sample(StandardNormal);
                        let ny: f64 = rng.sample(StandardNormal);
                        let a = (mean[t].0 + std[t].0 * nx, mean[t].1 + std[t].1 * ny);
                        let mag = (a.0 * a.0 + a.1 * a.1).sqrt();
                        if mag > cfg.action_max {
                            (a.0 / mag * cfg.action_max, a.1 / mag * cfg.action_max)
                        } else {
                            a
                        }
                    })
                    .collect()
            })
            .collect();
        let costs: Vec<f64> = samples.par_iter().map(|s| cost_fn(s)).collect();

        let mut order: Vec<usize> = (0..cfg.n_samples).collect();
        order.sort_by(|&a, &b| costs[a].partial_cmp(&costs[b]).expect("finite costs").then(a.cmp(&b)));
        let elites = &order[..cfg.elite_count()];

        if iter == 0 {
            first_batch_best = costs[order[0]];
        }
        if best.as_ref().is_none_or(|(c, _)| costs[order[0]] < *c) {
            best = Some((costs[order[0]], samples[order[0]].clone()));
        }
        elite_means.push(elites.iter().map(|&i| costs[i]).sum::<f64>() / elites.len() as f64);

        for t in 0..h {
            let n = elites.len() as f64;
            let mx = elites.iter().map(|&i| samples[i][t].0).sum::<f64>() / n;
            let my = elites.iter().map(|&i| samples[i][t].1).sum::<f64>() / n;
            let vx = elites.iter().map(|&i| (samples[i][t].0 - mx).powi(2)).sum::<f64>() / n;
            let vy = elites.iter().map(|&i| (samples[i][t].1 - my).powi(2)).sum::<f64>() / n;
            mean[t] = (mx, my);
            std[t] = (vx.sqrt().max(0.05), vy.sqrt().max(0.05));
        }
    }

    let (cost, actions) = best.expect("at least one CEM iteration");
    Ok(CemOutcome {
        actions,
        cost,
        stats: CemStats {
            elite_means,
            first_batch_best,
        },
    })
}

/// CEM plan toward per-object target positions: candidates are scored by
/// the final summed object-to-target distance of their rollout.
pub fn cem_plan(
    state: &PushState,
    targets: &[(f64, f64)],
    cfg: &PlanConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CemOutcome> {
    if targets.len() != state.objects.len() {
        return Err(Error::invalid(
            "cem_plan",
            format!("{} targets for {} objects", targets.len(), state.objects.len()),
        ));
    }
    if !state.in_bounds() {
        return Err(Error::invalid("cem_plan", "start state out of bounds"));
    }
    let state = state.clone();
    cem_optimize(cfg, rng, move |actions| {
        let mut cur = state.clone();
        for &a in actions {
            cur = step(&cur, a, cfg.action_max);
        }
        cur.cost(targets)
    })
}

/// Result of one planned episode.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub actions: Vec<(f64, f64)>,
    pub final_positions: Vec<(f64, f64)>,
    pub final_mean_distance: f64,
    pub per_step_costs: Vec<f64>,
}

/// Full MPC episode: replan each step with CEM and execute the first
/// action. With a subgoal, the first `budget/2` steps target the subgoal
/// positions and the rest target the final goal; without one, the final
/// goal is targeted throughout.
pub fn hierarchical_episode(
    start: &PushState,
    final_targets: &[(f64, f64)],
    subgoal: Option<&[(f64, f64)]>,
    cfg: &PlanConfig,
    seed: u64,
) -> Result<PlanResult> {
    cfg.validate()?;
    if final_targets.len() != start.objects.len()
        || subgoal.is_some_and(|s| s.len() != start.objects.len())
    {
        return Err(Error::invalid(
            "hierarchical_episode",
            "target count must match object count",
        ));
    }
    let switch = cfg.subgoal_switch();
    let mut state = start.clone();
    let mut actions = Vec::new();
    let mut per_step_costs = Vec::new();
    for mpc_step in 0..cfg.budget {
        let targets = match subgoal {
            Some(sub) if mpc_step < switch => sub,
            _ => final_targets,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(crate::synthworlds::mix_seed(seed, mpc_step));
        let plan = cem_plan(&state, targets, cfg, &mut rng)?;
        let a = plan.actions[0];
        state = step(&state, a, cfg.action_max);
        actions.push(a);
        per_step_costs.push(state.cost(final_targets));
        // final-goal phase may stop early once everything is in place
        if mpc_step >= switch && state.cost(final_targets) < 0.25 {
            break;
        }
    }
    Ok(PlanResult {
        final_mean_distance: state.mean_distance(final_targets),
        final_positions: state.objects.clone(),
        actions,
        per_step_costs,
    })
}

/// `plan_results.csv` rows: (episode, method, final_mean_distance,
/// steps_used).
pub fn write_plan_csv(path: &Path, rows: &[(usize, String, f64, usize)]) -> Result<()> {
    let mut out = String::from("episode,method,final_mean_distance,steps_used\n");
    for (episode, method, dist, steps) in rows {
        out.push_str(&format!("{},{},{},{}\n", episode, method, dist, steps));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
