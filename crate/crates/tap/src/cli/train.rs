//! Model construction, the Adam trainer, and checkpoint load/save.

use super::config::{CheckpointMeta, LossKind, Mode, RunConfig};
use crate::autodiff::{Tape, Tensor, TensorId};
use crate::models::{
    read_checkpoint, sample_latent, write_checkpoint, Bound, Discriminator, InferenceNet,
    Predictor,
};
use crate::synthworlds::{mix_seed, Dataset, Episode};
use crate::taploss::{
    combined_loss, generalized_min_l1_loss, make_time_preference, recursive_target_update,
    recursive_target_update_before, BankTerms, CombinedLoss, LossComponents, LossReport,
    PreferenceKind, SelectionRule, TargetSet, TimePreference,
};
use crate::{metrics, Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

/// The networks one run trains or evaluates.
pub struct ModelSet {
    pub generator: Predictor,
    pub disc_prior: Option<Discriminator>,
    pub disc_post: Option<Discriminator>,
    pub inference: Option<InferenceNet>,
}

impl ModelSet {
    pub fn new(cfg: &RunConfig, t_len: usize, seed: u64) -> Result<Self> {
        let plan = RunPlan::new(cfg, t_len)?;
        let t_count = plan.targets.len();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC0DE));
        let generator = Predictor::new(cfg.predictor_config(), &mut rng)?;
        let disc_prior = cfg
            .loss
            .uses_gan()
            .then(|| Discriminator::new(&cfg.disc_config(), t_count, &mut rng))
            .transpose()?;
        let disc_post = cfg
            .loss
            .uses_vae()
            .then(|| Discriminator::new(&cfg.disc_config(), t_count, &mut rng))
            .transpose()?;
        let inference = cfg
            .loss
            .uses_vae()
            .then(|| InferenceNet::new(&cfg.disc_config(), plan.video_len, &mut rng))
            .transpose()?;
        Ok(ModelSet {
            generator,
            disc_prior,
            disc_post,
            inference,
        })
    }

    /// Parameter sections in checkpoint/optimizer order.
    fn section_names(&self) -> Vec<&'static str> {
        let mut names = vec!["gen"];
        if self.disc_prior.is_some() {
            names.push("disc");
        }
        if self.disc_post.is_some() {
            names.push("disc_post");
        }
        if self.inference.is_some() {
            names.push("inf");
        }
        names
    }

    fn part_numel(&self) -> Vec<usize> {
        let mut v = vec![self.generator.params.numel()];
        if let Some(d) = &self.disc_prior {
            v.push(d.params.numel());
        }
        if let Some(d) = &self.disc_post {
            v.push(d.params.numel());
        }
        if let Some(i) = &self.inference {
            v.push(i.params.numel());
        }
        v
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let mut sections = vec![("gen", &self.generator.params)];
        if let Some(d) = &self.disc_prior {
            sections.push(("disc", &d.params));
        }
        if let Some(d) = &self.disc_post {
            sections.push(("disc_post", &d.params));
        }
        if let Some(i) = &self.inference {
            sections.push(("inf", &i.params));
        }
        write_checkpoint(path, meta, &sections)
    }

    pub fn load(path: &Path) -> Result<(CheckpointMeta, Self)> {
        let (meta, sections): (CheckpointMeta, _) = read_checkpoint(path)?;
        meta.config.validate()?;
        let mut models = ModelSet::new(&meta.config, meta.t_len, meta.config.seed)?;
        let lookup = |name: &str| -> Option<&crate::models::Params> {
            sections.iter().find(|(n, _)| n == name).map(|(_, p)| p)
        };
        for name in models.section_names() {
            let src = lookup(name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing section {name:?}")))?;
            match name {
                "gen" => models.generator.params.load_from(src)?,
                "disc" => models.disc_prior.as_mut().expect("present").params.load_from(src)?,
                "disc_post" => models.disc_post.as_mut().expect("present").params.load_from(src)?,
                "inf" => models.inference.as_mut().expect("present").params.load_from(src)?,
                _ => unreachable!(),
            }
        }
        Ok((meta, models))
    }
}

/// Context indices, target set, and selection machinery resolved for one
/// world's episode length.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub context_indices: Vec<usize>,
    pub targets: TargetSet,
    pub weights: TimePreference,
    pub selection: SelectionRule,
    /// Frames the whole-video inference network sees.
    pub video_len: usize,
}

impl RunPlan {
    pub fn new(cfg: &RunConfig, t_len: usize) -> Result<Self> {
        if t_len < 3 {
            return Err(Error::Config(format!("episode length {t_len} too short")));
        }
        let (context_indices, targets) = match cfg.base_mode() {
            Mode::Forward => (vec![0], TargetSet::range(1, t_len)),
            Mode::Bidirectional => (vec![0, t_len - 1], TargetSet::range(1, t_len - 1)),
            Mode::Recursive => unreachable!("base_mode resolves recursion"),
        };
        targets.check_disjoint(&context_indices)?;

        let kind = match (cfg.loss, cfg.preference) {
            (LossKind::Min, _) | (LossKind::Fix, _) => PreferenceKind::Uniform,
            (_, Some(kind)) => kind,
            (_, None) => match cfg.base_mode() {
                Mode::Forward => PreferenceKind::Linear { beta: cfg.beta },
                _ => PreferenceKind::Bell { sigma: cfg.bell_sigma },
            },
        };
        let weights = make_time_preference(kind, &targets)?;

        let selection = if cfg.loss == LossKind::Fix {
            let raw = (cfg.fix_fraction * (t_len - 1) as f64).round() as usize;
            let first = targets.indices()[0];
            let last = *targets.indices().last().expect("non-empty targets");
            SelectionRule::Fixed(raw.clamp(first, last))
        } else {
            SelectionRule::ArgminInner
        };

        Ok(RunPlan {
            video_len: context_indices.len() + targets.len(),
            context_indices,
            targets,
            weights,
            selection,
        })
    }

    /// The frame index the fixed-time baseline targets, if applicable.
    pub fn fixed_target(&self) -> Option<usize> {
        match self.selection {
            SelectionRule::Fixed(i) => Some(i),
            SelectionRule::ArgminInner => None,
        }
    }
}

// ── per-sample training step ─────────────────────────────────────────

struct SampleGrads {
    grads: Vec<Vec<f64>>, // one flat vector per model part
    report: LossReport,
}

fn flatten_grads(tape: &Tape, bound: &Bound) -> Vec<f64> {
    let mut out = Vec::new();
    for &id in bound.ids() {
        let g = tape.grad_slice(id).expect("trainable leaf has a gradient");
        out.extend_from_slice(g);
    }
    out
}

/// Builds one training video's loss on a fresh tape and extracts the
/// parameter gradients of every part.
fn sample_step(
    models: &ModelSet,
    plan: &RunPlan,
    cfg: &RunConfig,
    episode: &Episode,
    sample_seed: u64,
) -> Result<SampleGrads> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut tape = Tape::new();

    let gen_bound = models.generator.bind(&mut tape, true)?;
    let context: Vec<TensorId> = plan
        .context_indices
        .iter()
        .map(|&i| tape.constant(&episode.frames[i]))
        .collect::<Result<_>>()?;
    let target_frames: Vec<TensorId> = plan
        .targets
        .indices()
        .iter()
        .map(|&i| tape.constant(&episode.frames[i]))
        .collect::<Result<_>>()?;

    // Variational path: whole-video posterior and a reparameterized sample.
    let inf_bound = models
        .inference
        .as_ref()
        .map(|inf| inf.bind(&mut tape, true))
        .transpose()?;
    let (posterior, z_post) = match (&models.inference, &inf_bound) {
        (Some(inf), Some(bound)) => {
            let video: Vec<TensorId> = context.iter().chain(target_frames.iter()).copied().collect();
            let (mu, logvar) = inf.posterior(&mut tape, bound, &video)?;
            let noise = Tensor::randn(&[inf.latent_dim()], 1.0, &mut rng);
            let z = sample_latent(&mut tape, mu, logvar, &noise)?;
            (Some((mu, logvar)), Some(z))
        }
        _ => (None, None),
    };

    let pred = models
        .generator
        .predict(&mut tape, &gen_bound, &context, z_post)?;

    // Prior-side generation for the first bank: a fresh prior sample when
    // variational, the deterministic prediction otherwise.
    let pred_prior = if cfg.loss.uses_vae() {
        let noise = Tensor::randn(&[cfg.latent_dim], 1.0, &mut rng);
        let z_prior = tape.constant(&noise)?;
        models
            .generator
            .predict(&mut tape, &gen_bound, &context, Some(z_prior))?
            .composited
    } else {
        pred.composited
    };

    let t_prime_pos = rng.random_range(0..plan.targets.len());

    let mut bank_nodes = |disc: &Discriminator, fake_src: TensorId| -> Result<(Vec<TensorId>, TensorId, TensorId, Bound)> {
        let bound_train = disc.bind(&mut tape, true)?;
        let bound_const = disc.bind(&mut tape, false)?;
        let real: Vec<TensorId> = target_frames
            .iter()
            .map(|&f| disc.probabilities(&mut tape, &bound_train, &context, f))
            .collect::<Result<_>>()?;
        let fake_detached = tape.detach(fake_src)?;
        let fake_for_disc = disc.probabilities(&mut tape, &bound_train, &context, fake_detached)?;
        let fake_for_gen = disc.probabilities(&mut tape, &bound_const, &context, fake_src)?;
        Ok((real, fake_for_disc, fake_for_gen, bound_train))
    };

    let prior_terms = models
        .disc_prior
        .as_ref()
        .map(|d| bank_nodes(d, pred_prior))
        .transpose()?;
    let post_terms = models
        .disc_post
        .as_ref()
        .map(|d| bank_nodes(d, pred.composited))
        .transpose()?;

    let spec = CombinedLoss {
        pred: pred.composited,
        frames: &target_frames,
        targets: &plan.targets,
        weights: &plan.weights,
        selection: plan.selection,
        prior_bank: prior_terms.as_ref().map(|(real, fd, fg, _)| BankTerms {
            real,
            fake_for_disc: *fd,
            fake_for_gen: *fg,
            t_prime_pos,
        }),
        posterior_bank: post_terms.as_ref().map(|(real, fd, fg, _)| BankTerms {
            real,
            fake_for_disc: *fd,
            fake_for_gen: *fg,
            t_prime_pos,
        }),
        posterior,
        label_smoothing_alpha: cfg.label_smoothing_alpha,
        lambda_kl: cfg.lambda_kl,
        lambda_gan: cfg.lambda_gan,
    };
    let (nodes, mut report) = combined_loss(&mut tape, &spec)?;
    let mut root = nodes.backward_root;

    // Recursive mode: feed the (detached) prediction back as context and
    // penalize the remaining targets at each level with the plain
    // generalized minimum; adversarial terms apply to the first level only.
    if cfg.mode == Mode::Recursive {
        let goal_side = cfg.base_mode() == Mode::Bidirectional;
        let mut targets = plan.targets.clone();
        let mut match_index = report.match_index;
        let mut last_pred = pred.composited;
        for _level in 1..cfg.recursion_depth {
            let next = if goal_side {
                recursive_target_update_before(&targets, match_index)?
            } else {
                recursive_target_update(&targets, match_index)?
            };
            if next.is_empty() {
                break;
            }
            let fed_back = tape.detach(last_pred)?;
            let level_context: Vec<TensorId> = if goal_side {
                vec![context[0], fed_back]
            } else {
                vec![fed_back]
            };
            let level_frames: Vec<TensorId> = next
                .indices()
                .iter()
                .map(|&i| tape.constant(&episode.frames[i]))
                .collect::<Result<_>>()?;
            let level_weights = make_time_preference(plan.weights.kind(), &next)?;
            let z_level = z_post;
            let level_pred =
                models
                    .generator
                    .predict(&mut tape, &gen_bound, &level_context, z_level)?;
            let (level_loss, level_report) = generalized_min_l1_loss(
                &mut tape,
                level_pred.composited,
                &level_frames,
                &next,
                &level_weights,
            )?;
            root = tape.add(root, level_loss)?;
            report.total += level_report.total;
            report.components.l1 += level_report.components.l1;
            match_index = level_report.match_index;
            targets = next;
            last_pred = level_pred.composited;
        }
    }

    tape.backward(root)?;

    let mut grads = vec![flatten_grads(&tape, &gen_bound)];
    if let Some((_, _, _, bound)) = &prior_terms {
        grads.push(flatten_grads(&tape, bound));
    }
    if let Some((_, _, _, bound)) = &post_terms {
        grads.push(flatten_grads(&tape, bound));
    }
    if let Some(bound) = &inf_bound {
        grads.push(flatten_grads(&tape, bound));
    }
    Ok(SampleGrads { grads, report })
}

// ── optimizer ────────────────────────────────────────────────────────

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    moments: Vec<(Vec<f64>, Vec<f64>)>, // (m, v) per part
}

impl Adam {
    fn new(lr: f64, part_sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: part_sizes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect(),
        }
    }

    fn update_part(&mut self, part: usize, grad: &[f64], apply: impl FnOnce(&dyn Fn(usize, f64) -> f64)) {
        let (m, v) = &mut self.moments[part];
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..grad.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        }
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.lr;
        let (m, v) = (&self.moments[part].0, &self.moments[part].1);
        let eps = self.eps;
        apply(&move |i: usize, value: f64| {
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            value - lr * mh / (vh.sqrt() + eps)
        });
    }
}

fn apply_part(params: &mut crate::models::Params, adam: &mut Adam, part: usize, grad: &[f64]) {
    adam.update_part(part, grad, |update| {
        let mut off = 0;
        for idx in 0..params.len() {
            let t = params.tensor_mut(idx);
            for v in t.data_mut() {
                *v = update(off, *v);
                off += 1;
            }
        }
    });
}

// ── training loop ────────────────────────────────────────────────────

/// One epoch row of the training log.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub total: f64,
    pub components: LossComponents,
    pub test_min_l1_err: f64,
    pub test_match_step: f64,
}

pub struct TrainOutcome {
    pub models: ModelSet,
    pub rows: Vec<EpochRow>,
    pub meta: CheckpointMeta,
}

/// Evaluates one episode with the deterministic prediction (or a seeded
/// prior sample for variational models).
pub fn eval_episode(
    models: &ModelSet,
    plan: &RunPlan,
    episode: &Episode,
    z_seed: u64,
) -> Result<(f64, usize)> {
    let context: Vec<&Tensor> = plan.context_indices.iter().map(|&i| &episode.frames[i]).collect();
    let z = models.generator.cfg.use_vae.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(z_seed);
        Tensor::randn(&[models.generator.cfg.latent_dim], 1.0, &mut rng)
    });
    let frames = models.generator.predict_frames(&context, z.as_ref())?;
    let targets: Vec<(usize, &Tensor)> = plan
        .targets
        .indices()
        .iter()
        .map(|&i| (i, &episode.frames[i]))
        .collect();
    metrics::min_l1_and_match(&frames.composited, &targets)
}

/// Mean test min-l1 error and match step over the given episodes.
pub fn eval_split(
    models: &ModelSet,
    plan: &RunPlan,
    dataset: &Dataset,
    indices: &[usize],
    seed: u64,
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let results: Vec<(f64, usize)> = indices
        .par_iter()
        .map(|&i| eval_episode(models, plan, &dataset.episodes[i], mix_seed(seed ^ 0xE7A1, i)))
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    Ok((
        results.iter().map(|r| r.0).sum::<f64>() / n,
        results.iter().map(|r| r.1 as f64).sum::<f64>() / n,
    ))
}

/// Full training run: Adam over the configured loss, per-epoch test
/// evaluation, and a final checkpoint.
pub fn train(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.world != cfg.world {
        return Err(Error::Data(format!(
            "dataset holds {:?} episodes but the config trains {:?}",
            dataset.world.name(),
            cfg.world.name()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let plan = RunPlan::new(cfg, dataset.t_len)?;
    let mut models = ModelSet::new(cfg, dataset.t_len, cfg.seed)?;
    if cfg.decoder_pretrain_epochs > 0 {
        pretrain_decoder(cfg, &mut models, dataset)?;
    }

    let part_sizes = models.part_numel();
    let mut adam = Adam::new(cfg.learning_rate, &part_sizes);
    let train_idx = dataset.train_indices();
    let test_idx = dataset.test_indices();
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x5u64, epoch));
        order.shuffle(&mut shuffle_rng);

        let mut sum = LossComponents::default();
        let mut total_sum = 0.0;
        let mut seen = 0usize;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step_base = epoch * train_idx.len() + batch_no * cfg.batch_size;
            let models_view = &models;
            let results: Vec<SampleGrads> = batch
                .par_iter()
                .enumerate()
                .map(|(i, &ep_idx)| {
                    sample_step(
                        models_view,
                        &plan,
                        cfg,
                        &dataset.episodes[ep_idx],
                        mix_seed(cfg.seed, step_base + i),
                    )
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NumericFailure {
                        epoch,
                        batch: batch_no,
                        detail: "non-finite value in forward or backward pass".into(),
                    },
                    other => other,
                })?;

            // deterministic mean over the batch in sample order
            let scale = 1.0 / results.len() as f64;
            let mut mean_grads: Vec<Vec<f64>> =
                part_sizes.iter().map(|&n| vec![0.0; n]).collect();
            for r in &results {
                for (dst, src) in mean_grads.iter_mut().zip(&r.grads) {
                    for i in 0..src.len() {
                        dst[i] += scale * src[i];
                    }
                }
                total_sum += r.report.total;
                sum.l1 += r.report.components.l1;
                sum.gan_gen += r.report.components.gan_gen;
                sum.gan_disc += r.report.components.gan_disc;
                sum.cvae_gan_disc += r.report.components.cvae_gan_disc;
                sum.kl += r.report.components.kl;
                seen += 1;
            }
            if !total_sum.is_finite() {
                return Err(Error::NumericFailure {
                    epoch,
                    batch: batch_no,
                    detail: format!("loss became non-finite ({total_sum})"),
                });
            }

            adam.t += 1;
            let mut part = 0;
            apply_part(&mut models.generator.params, &mut adam, part, &mean_grads[part]);
            if let Some(d) = &mut models.disc_prior {
                part += 1;
                apply_part(&mut d.params, &mut adam, part, &mean_grads[part]);
            }
            if let Some(d) = &mut models.disc_post {
                part += 1;
                apply_part(&mut d.params, &mut adam, part, &mean_grads[part]);
            }
            if let Some(inf) = &mut models.inference {
                part += 1;
                apply_part(&mut inf.params, &mut adam, part, &mean_grads[part]);
            }
        }

        let n = seen.max(1) as f64;
        let (test_err, test_step) = eval_split(&models, &plan, dataset, &test_idx, cfg.seed)?;
        rows.push(EpochRow {
            epoch,
            total: total_sum / n,
            components: LossComponents {
                l1: sum.l1 / n,
                gan_gen: sum.gan_gen / n,
                gan_disc: sum.gan_disc / n,
                cvae_gan_disc: sum.cvae_gan_disc / n,
                kl: sum.kl / n,
            },
            test_min_l1_err: test_err,
            test_match_step: test_step,
        });
    }

    // paths are run-local; the stored config describes the model only
    let mut stored = cfg.clone();
    stored.dataset = None;
    stored.checkpoint_out = None;
    stored.log_out = None;
    let meta = CheckpointMeta {
        format_version: 1,
        config: stored,
        t_len: dataset.t_len,
        context_indices: plan.context_indices.clone(),
        target_indices: plan.targets.indices().to_vec(),
        trained_epochs: cfg.epochs,
    };
    Ok(TrainOutcome { models, rows, meta })
}

/// Optional warm-up: trains the new-pixel decoder as an unconditional
/// frame generator (random code in, random training frame out) before the
/// main run.
fn pretrain_decoder(cfg: &RunConfig, models: &mut ModelSet, dataset: &Dataset) -> Result<()> {
    if !cfg.use_new_pixels {
        return Err(Error::Config(
            "decoder pretraining needs the new-pixel path".into(),
        ));
    }
    let train_idx = dataset.train_indices();
    let in_dim = cfg.code_dim + if cfg.loss.uses_vae() { cfg.latent_dim } else { 0 };
    let numel = models.generator.params.numel();
    let mut adam = Adam::new(cfg.learning_rate, &[numel]);
    for epoch in 0..cfg.decoder_pretrain_epochs {
        for (batch_no, batch) in train_idx.chunks(cfg.batch_size).enumerate() {
            let grads: Vec<Vec<f64>> = batch
                .par_iter()
                .enumerate()
                .map(|(i, &ep_idx)| -> Result<Vec<f64>> {
                    let seed = mix_seed(cfg.seed ^ 0xDEC0, epoch * train_idx.len() + batch_no * cfg.batch_size + i);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let ep = &dataset.episodes[ep_idx];
                    let frame = &ep.frames[rng.random_range(0..ep.frames.len())];
                    let code = Tensor::randn(&[in_dim], 1.0, &mut rng);
                    let mut tape = Tape::new();
                    let bound = models.generator.bind(&mut tape, true)?;
                    let code_id = tape.constant(&code)?;
                    let out = models.generator.decode_new_pixels(&mut tape, &bound, code_id)?;
                    let target = tape.constant(frame)?;
                    let loss = crate::taploss::l1_mean(&mut tape, out, target)?;
                    tape.backward(loss)?;
                    Ok(flatten_grads(&tape, &bound))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / grads.len() as f64;
            let mut mean = vec![0.0; numel];
            for g in &grads {
                for i in 0..numel {
                    mean[i] += scale * g[i];
                }
            }
            adam.t += 1;
            apply_part(&mut models.generator.params, &mut adam, 0, &mean);
        }
    }
    Ok(())
}
