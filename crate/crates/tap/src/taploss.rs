//! Training objectives for time-agnostic prediction.
//!
//! The family of losses here shares one idea: instead of penalizing the
//! prediction against the frame at a fixed offset, penalize it against the
//! best-matching frame in a window of target times. Selection can be biased
//! by a positive time preference `w(t)` without rescaling the penalty
//! itself: the inner (selection) error is `E'_t = E_t / w(t)` while the
//! outer error at the selected step stays unweighted.
//!
//! Everything operates on tape nodes so the gradients flow exactly where
//! the selection sends them: through the matched target's error and nowhere
//! else.

use crate::autodiff::{Tape, TensorId};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Probability clamp applied before every `ln` in the adversarial terms.
pub const PROB_EPS: f64 = 1e-7;

// ── target sets ──────────────────────────────────────────────────────

/// Ordered set of candidate target frame indices, with the recursion level
/// it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSet {
    indices: Vec<usize>,
    recursion_level: usize,
}

impl TargetSet {
    /// Strictly increasing frame indices.
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        Self::with_level(indices, 0)
    }

    pub fn with_level(indices: Vec<usize>, recursion_level: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "TargetSet",
                format!("indices must be strictly increasing, got {:?}", indices),
            ));
        }
        Ok(TargetSet {
            indices,
            recursion_level,
        })
    }

    /// Contiguous range `[start, end)`.
    pub fn range(start: usize, end: usize) -> Self {
        TargetSet {
            indices: (start..end).collect(),
            recursion_level: 0,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn recursion_level(&self) -> usize {
        self.recursion_level
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.indices.binary_search(&frame).is_ok()
    }

    /// Position of a frame index within the set.
    pub fn position(&self, frame: usize) -> Option<usize> {
        self.indices.binary_search(&frame).ok()
    }

    /// Target indices must never overlap the context frames.
    pub fn check_disjoint(&self, context: &[usize]) -> Result<()> {
        if let Some(&ix) = self.indices.iter().find(|i| context.contains(i)) {
            return Err(Error::invalid(
                "TargetSet",
                format!("target index {} collides with a context frame", ix),
            ));
        }
        Ok(())
    }
}

/// After the level-`r` prediction matched frame `t*`, the next recursion
/// level targets everything strictly after it. An empty result signals that
/// the recursion terminates.
pub fn recursive_target_update(full: &TargetSet, match_index: usize) -> Result<TargetSet> {
    if !full.contains(match_index) {
        return Err(Error::invalid(
            "recursive_target_update",
            format!("match index {} not in target set", match_index),
        ));
    }
    Ok(TargetSet {
        indices: full.indices.iter().copied().filter(|&i| i > match_index).collect(),
        recursion_level: full.recursion_level + 1,
    })
}

/// Mirror of [`recursive_target_update`] for goal-side recursion, where the
/// prediction replaces the goal frame and the remaining targets precede it.
pub fn recursive_target_update_before(full: &TargetSet, match_index: usize) -> Result<TargetSet> {
    if !full.contains(match_index) {
        return Err(Error::invalid(
            "recursive_target_update",
            format!("match index {} not in target set", match_index),
        ));
    }
    Ok(TargetSet {
        indices: full.indices.iter().copied().filter(|&i| i < match_index).collect(),
        recursion_level: full.recursion_level + 1,
    })
}

// ── time preferences ─────────────────────────────────────────────────

/// Shape of the time preference `w(t)` used by the generalized minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PreferenceKind {
    /// Every target equally preferred; reduces to the plain minimum.
    Uniform,
    /// `w(t_k) = beta + k/|T|` for the k-th target (1-indexed): preference
    /// rises linearly from just above `beta` to `beta + 1`.
    Linear { beta: f64 },
    /// Discrete Gaussian centered on the middle target, rescaled so the
    /// ends sit at 2/3 and the middle at 1. `sigma` defaults to `|T|/4`.
    Bell { sigma: Option<f64> },
}

/// Positive selection weights over a target set.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePreference {
    weights: Vec<f64>,
    kind: PreferenceKind,
}

impl TimePreference {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> PreferenceKind {
        self.kind
    }

    /// Build a preference from explicit weights (tests and custom sweeps).
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(Error::invalid("TimePreference", "weights must be positive and finite"));
        }
        Ok(TimePreference {
            weights,
            kind: PreferenceKind::Uniform,
        })
    }
}

pub fn make_time_preference(kind: PreferenceKind, targets: &TargetSet) -> Result<TimePreference> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::invalid("make_time_preference", "empty target set"));
    }
    let weights = match kind {
        PreferenceKind::Uniform => vec![1.0; n],
        PreferenceKind::Linear { beta } => {
            if beta <= 0.0 {
                return Err(Error::invalid("make_time_preference", "beta must be > 0"));
            }
            (1..=n).map(|k| beta + k as f64 / n as f64).collect()
        }
        PreferenceKind::Bell { sigma } => {
            let sigma = sigma.unwrap_or(n as f64 / 4.0);
            if sigma <= 0.0 {
                return Err(Error::invalid("make_time_preference", "sigma must be > 0"));
            }
            let center = (n as f64 - 1.0) / 2.0;
            let raw: Vec<f64> = (0..n)
                .map(|k| (-((k as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
                .collect();
            let (lo, hi) = raw
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            if hi - lo < 1e-12 {
                vec![1.0; n]
            } else {
                raw.iter()
                    .map(|&v| 2.0 / 3.0 + (v - lo) / (hi - lo) * (1.0 - 2.0 / 3.0))
                    .collect()
            }
        }
    };
    Ok(TimePreference { weights, kind })
}

/// Soft discriminator target for a ground-truth frame at `t_prime` judged
/// by the time-`t` head: `max(0, 1 - alpha * |t - t'|)`.
pub fn label_smoothing_weight(t: usize, t_prime: usize, alpha: f64) -> f64 {
    let dt = (t as f64 - t_prime as f64).abs();
    (1.0 - alpha * dt).max(0.0)
}

// ── loss reports ─────────────────────────────────────────────────────

/// Per-component breakdown of a training loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub l1: f64,
    pub gan_gen: f64,
    pub gan_disc: f64,
    pub cvae_gan_disc: f64,
    pub kl: f64,
}

/// Scalar loss plus the selected match index and component breakdown.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub match_index: usize,
    pub components: LossComponents,
}

// ── core losses ──────────────────────────────────────────────────────

/// Mean l1 distance between two same-shaped frames, as a tape node.
pub fn l1_mean(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean_all(d)
}

/// Fixed-time baseline: penalize against the single frame at `target_index`.
pub fn fixed_time_loss(
    tape: &mut Tape,
    pred: TensorId,
    target: TensorId,
    target_index: usize,
) -> Result<(TensorId, LossReport)> {
    let loss = l1_mean(tape, pred, target)?;
    let total = tape.item(loss);
    Ok((
        loss,
        LossReport {
            total,
            match_index: target_index,
            components: LossComponents {
                l1: total,
                ..Default::default()
            },
        },
    ))
}

/// Mean-l1 error nodes against each target frame, in target-set order.
pub fn per_target_l1(tape: &mut Tape, pred: TensorId, frames: &[TensorId]) -> Result<Vec<TensorId>> {
    frames.iter().map(|&f| l1_mean(tape, pred, f)).collect()
}

/// Position of the generalized-minimum selection: `argmin_k inner[k] / w[k]`,
/// first index on ties.
pub fn generalized_min_select(inner: &[f64], weights: &TimePreference) -> Result<usize> {
    if inner.is_empty() {
        return Err(Error::invalid("generalized_min_select", "empty target set"));
    }
    if inner.len() != weights.weights.len() {
        return Err(Error::invalid(
            "generalized_min_select",
            format!("{} errors vs {} weights", inner.len(), weights.weights.len()),
        ));
    }
    let mut best = 0;
    let mut best_v = inner[0] / weights.weights[0];
    for (k, (&e, &w)) in inner.iter().zip(&weights.weights).enumerate().skip(1) {
        let v = e / w;
        if v < best_v {
            best_v = v;
            best = k;
        }
    }
    Ok(best)
}

/// Generalized minimum with decoupled errors: the inner error (divided by
/// the preference) picks the target, the unweighted outer error at that
/// target is the penalty. Gradients flow through the selected outer error
/// only; the selection itself is not differentiated.
pub fn generalized_min_loss(
    tape: &mut Tape,
    outer: &[TensorId],
    inner: &[f64],
    weights: &TimePreference,
    targets: &TargetSet,
) -> Result<(TensorId, LossReport)> {
    if outer.len() != targets.len() || inner.len() != targets.len() {
        return Err(Error::invalid(
            "generalized_min_loss",
            format!(
                "{} outer / {} inner errors for {} targets",
                outer.len(),
                inner.len(),
                targets.len()
            ),
        ));
    }
    let pos = generalized_min_select(inner, weights)?;
    let loss = outer[pos];
    let total = tape.item(loss);
    Ok((
        loss,
        LossReport {
            total,
            match_index: targets.indices[pos],
            components: LossComponents {
                l1: total,
                ..Default::default()
            },
        },
    ))
}

/// Plain minimum-over-time l1 loss (uniform preference, outer == inner).
pub fn min_over_time_loss(
    tape: &mut Tape,
    pred: TensorId,
    frames: &[TensorId],
    targets: &TargetSet,
) -> Result<(TensorId, LossReport)> {
    if frames.is_empty() {
        return Err(Error::invalid("min_over_time_loss", "empty target set"));
    }
    let outer = per_target_l1(tape, pred, frames)?;
    let inner: Vec<f64> = outer.iter().map(|&id| tape.item(id)).collect();
    let uniform = make_time_preference(PreferenceKind::Uniform, targets)?;
    generalized_min_loss(tape, &outer, &inner, &uniform, targets)
}

/// Generalized-minimum l1 loss: outer and inner errors are both the mean l1,
/// selection is preference-weighted.
pub fn generalized_min_l1_loss(
    tape: &mut Tape,
    pred: TensorId,
    frames: &[TensorId],
    targets: &TargetSet,
    weights: &TimePreference,
) -> Result<(TensorId, LossReport)> {
    let outer = per_target_l1(tape, pred, frames)?;
    let inner: Vec<f64> = outer.iter().map(|&id| tape.item(id)).collect();
    generalized_min_loss(tape, &outer, &inner, weights, targets)
}

// ── adversarial terms ────────────────────────────────────────────────

/// Binary cross-entropy of a probability vector against (possibly soft)
/// targets, with an optional 0/1 mask. Probabilities are clamped to
/// `[PROB_EPS, 1 - PROB_EPS]` before the logs.
pub fn bce_masked(tape: &mut Tape, probs: TensorId, targets: &[f64], mask: Option<&[f64]>) -> Result<TensorId> {
    let n = tape.numel(probs);
    if targets.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(Error::shape("bce", format!("{} probs vs {} targets", n, targets.len())));
    }
    let pc = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let lnp = tape.ln(pc)?;
    let q = tape.rsub_scalar(probs, 1.0)?;
    let qc = tape.clamp(q, PROB_EPS, 1.0 - PROB_EPS)?;
    let lnq = tape.ln(qc)?;
    let weight = |v: &[f64]| -> crate::autodiff::Tensor {
        crate::autodiff::Tensor::from_vec(vec![n], v.to_vec()).expect("finite weights")
    };
    let mask_vec: Vec<f64> = match mask {
        Some(m) => m.to_vec(),
        None => vec![1.0; n],
    };
    let l: Vec<f64> = targets.iter().zip(&mask_vec).map(|(&t, &m)| t * m).collect();
    let one_minus_l: Vec<f64> = targets
        .iter()
        .zip(&mask_vec)
        .map(|(&t, &m)| (1.0 - t) * m)
        .collect();
    let lt = tape.constant(&weight(&l))?;
    let omt = tape.constant(&weight(&one_minus_l))?;
    let a = tape.mul(lt, lnp)?;
    let b = tape.mul(omt, lnq)?;
    let s = tape.add(a, b)?;
    let sum = tape.sum_all(s)?;
    tape.mul_scalar(sum, -1.0)
}

/// Discriminator-side loss for one per-time bank on one training video.
///
/// `real[k]` is the bank's full probability vector on `(c, x_{T[k]})`, with
/// discriminator parameters attached; `fake` is the vector on the detached
/// generator output. For each head t: the frame at t is a positive, the
/// generated frame a negative, and the single sampled frame at `t'` a
/// partial positive with weight `max(0, 1 - alpha |t - t'|)`.
pub fn tap_gan_discriminator_loss(
    tape: &mut Tape,
    real: &[TensorId],
    fake: TensorId,
    targets: &TargetSet,
    t_prime_pos: usize,
    alpha: f64,
) -> Result<TensorId> {
    let n = targets.len();
    if real.len() != n {
        return Err(Error::invalid(
            "tap_gan_discriminator_loss",
            format!("{} real outputs for {} targets", real.len(), n),
        ));
    }
    if t_prime_pos >= n {
        return Err(Error::invalid("tap_gan_discriminator_loss", "t' outside target set"));
    }
    if alpha < 0.0 {
        return Err(Error::invalid("tap_gan_discriminator_loss", "alpha must be >= 0"));
    }
    // Positives: the t-th element of the vector computed on (c, x_t).
    let diag: Vec<TensorId> = (0..n)
        .map(|k| tape.narrow(real[k], 0, k, 1))
        .collect::<Result<_>>()?;
    let pos_vec = tape.concat(&diag, 0)?;
    let pos = bce_masked(tape, pos_vec, &vec![1.0; n], None)?;
    // The generated frame is a negative for every head.
    let neg = bce_masked(tape, fake, &vec![0.0; n], None)?;
    // Partial positives for the sampled other-time frame, skipping the head
    // whose positive it already is.
    let t_prime = targets.indices()[t_prime_pos];
    let soft_targets: Vec<f64> = targets
        .indices()
        .iter()
        .map(|&t| label_smoothing_weight(t, t_prime, alpha))
        .collect();
    let mut mask = vec![1.0; n];
    mask[t_prime_pos] = 0.0;
    let soft = bce_masked(tape, real[t_prime_pos], &soft_targets, Some(&mask))?;
    let a = tape.add(pos, neg)?;
    tape.add(a, soft)
}

/// Non-saturating generator term `-ln D_{t*}(c, G(c))` at the selected
/// match step. `fake` must carry gradients into the generator with the
/// discriminator parameters detached.
pub fn tap_gan_generator_term(tape: &mut Tape, fake: TensorId, t_star_pos: usize) -> Result<TensorId> {
    if t_star_pos >= tape.numel(fake) {
        return Err(Error::invalid("tap_gan_generator_term", "t* outside bank output"));
    }
    let el = tape.narrow(fake, 0, t_star_pos, 1)?;
    let el = tape.clamp(el, PROB_EPS, 1.0 - PROB_EPS)?;
    let ln = tape.ln(el)?;
    tape.mul_scalar(ln, -1.0)
}

/// Closed-form KL divergence of a diagonal Gaussian posterior from the
/// standard normal prior: `sum_i (mu_i^2 + sigma_i^2 - 1 - ln sigma_i^2)/2`.
pub fn kl_standard_normal(tape: &mut Tape, mu: TensorId, logvar: TensorId) -> Result<TensorId> {
    if tape.numel(mu) != tape.numel(logvar) {
        return Err(Error::shape(
            "kl_standard_normal",
            format!("{:?} vs {:?}", tape.shape(mu), tape.shape(logvar)),
        ));
    }
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar)?;
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -1.0)?;
    let sum = tape.sum_all(s)?;
    tape.mul_scalar(sum, 0.5)
}

// ── combined objective ───────────────────────────────────────────────

/// How the target step is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionRule {
    /// Generalized minimum over the preference-weighted inner l1 error.
    ArgminInner,
    /// Always the given frame index (the fixed-time baselines).
    Fixed(usize),
}

/// One per-time discriminator bank's contributions to a training step.
pub struct BankTerms<'a> {
    /// Bank probability vectors on `(c, x_t)` for every target t, with the
    /// discriminator parameters attached.
    pub real: &'a [TensorId],
    /// Bank output on the detached generator frame (trains the bank).
    pub fake_for_disc: TensorId,
    /// Bank output on the attached generator frame with bank parameters
    /// detached (trains the generator).
    pub fake_for_gen: TensorId,
    /// Position in the target set of the sampled negative frame t'.
    pub t_prime_pos: usize,
}

/// Everything the combined objective consumes for one video.
pub struct CombinedLoss<'a> {
    pub pred: TensorId,
    pub frames: &'a [TensorId],
    pub targets: &'a TargetSet,
    pub weights: &'a TimePreference,
    pub selection: SelectionRule,
    /// Bank fed with prior-sample (or deterministic) generations.
    pub prior_bank: Option<BankTerms<'a>>,
    /// Bank fed with posterior-sample generations (variational runs).
    pub posterior_bank: Option<BankTerms<'a>>,
    /// `(mu, log_variance)` of the whole-video posterior.
    pub posterior: Option<(TensorId, TensorId)>,
    pub label_smoothing_alpha: f64,
    pub lambda_kl: f64,
    pub lambda_gan: f64,
}

/// Nodes produced by [`combined_loss`].
pub struct CombinedLossNodes {
    /// Generator-side objective plus both discriminator losses. The banks
    /// see only detached generator frames and the generator terms see only
    /// detached bank parameters, so one backward pass from here yields
    /// simultaneous gradients for both sides.
    pub backward_root: TensorId,
    /// The generator-side objective alone (what `LossReport.total` holds);
    /// fully differentiable w.r.t. the generator with no stop-gradients on
    /// that path.
    pub generator_total: TensorId,
}

/// Assembles the full objective on the tape.
///
/// `LossReport.total` covers the generator-side objective only;
/// discriminator losses are reported as separate components.
pub fn combined_loss(tape: &mut Tape, spec: &CombinedLoss<'_>) -> Result<(CombinedLossNodes, LossReport)> {
    if spec.frames.len() != spec.targets.len() || spec.targets.is_empty() {
        return Err(Error::invalid(
            "combined_loss",
            format!("{} frames for {} targets", spec.frames.len(), spec.targets.len()),
        ));
    }
    let outer = per_target_l1(tape, spec.pred, spec.frames)?;
    let inner: Vec<f64> = outer.iter().map(|&id| tape.item(id)).collect();
    let t_star_pos = match spec.selection {
        SelectionRule::ArgminInner => generalized_min_select(&inner, spec.weights)?,
        SelectionRule::Fixed(frame) => spec.targets.position(frame).ok_or_else(|| {
            Error::invalid("combined_loss", format!("fixed target {} not in target set", frame))
        })?,
    };
    let l1_sel = outer[t_star_pos];
    let mut components = LossComponents {
        l1: tape.item(l1_sel),
        ..Default::default()
    };

    let mut total = l1_sel;

    // Generator terms from both banks at the selected step.
    let mut gen_term: Option<TensorId> = None;
    for bank in [&spec.prior_bank, &spec.posterior_bank].into_iter().flatten() {
        let term = tap_gan_generator_term(tape, bank.fake_for_gen, t_star_pos)?;
        gen_term = Some(match gen_term {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    if let Some(g) = gen_term {
        components.gan_gen = tape.item(g);
        let weighted = tape.mul_scalar(g, spec.lambda_gan)?;
        total = tape.add(total, weighted)?;
    }

    if let Some((mu, logvar)) = spec.posterior {
        let kl = kl_standard_normal(tape, mu, logvar)?;
        components.kl = tape.item(kl);
        let weighted = tape.mul_scalar(kl, spec.lambda_kl)?;
        total = tape.add(total, weighted)?;
    } else if spec.posterior_bank.is_some() {
        return Err(Error::invalid("combined_loss", "posterior bank without posterior"));
    }

    let report_total = tape.item(total);

    // Discriminator sides, added to the backward root but not the total.
    let mut root = total;
    if let Some(bank) = &spec.prior_bank {
        let d = tap_gan_discriminator_loss(
            tape,
            bank.real,
            bank.fake_for_disc,
            spec.targets,
            bank.t_prime_pos,
            spec.label_smoothing_alpha,
        )?;
        components.gan_disc = tape.item(d);
        root = tape.add(root, d)?;
    }
    if let Some(bank) = &spec.posterior_bank {
        let d = tap_gan_discriminator_loss(
            tape,
            bank.real,
            bank.fake_for_disc,
            spec.targets,
            bank.t_prime_pos,
            spec.label_smoothing_alpha,
        )?;
        components.cvae_gan_disc = tape.item(d);
        root = tape.add(root, d)?;
    }

    Ok((
        CombinedLossNodes {
            backward_root: root,
            generator_total: total,
        },
        LossReport {
            total: report_total,
            match_index: spec.targets.indices()[t_star_pos],
            components,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use proptest::prelude::*;

    fn frame(data: &[f64]) -> Tensor {
        Tensor::from_vec(vec![data.len()], data.to_vec()).unwrap()
    }

    /// Builds scalar "error" leaves with the given values so selection logic
    /// can be tested against arbitrary error vectors.
    fn scalar_errors(tape: &mut Tape, values: &[f64]) -> Vec<TensorId> {
        values.iter().map(|&v| tape.scalar(v).unwrap()).collect()
    }

    #[test]
    fn fixed_time_zero_on_match_and_offset() {
        let mut tape = Tape::new();
        let p = tape.leaf(&frame(&[0.1, -0.4, 0.2]), false).unwrap();
        let t = tape.leaf(&frame(&[0.1, -0.4, 0.2]), false).unwrap();
        let (_, rep) = fixed_time_loss(&mut tape, p, t, 7).unwrap();
        assert_eq!(rep.total, 0.0);
        assert_eq!(rep.match_index, 7);

        let mut tape = Tape::new();
        let p = tape.leaf(&frame(&[0.6, 0.1, 0.7]), false).unwrap();
        let t = tape.leaf(&frame(&[0.1, -0.4, 0.2]), false).unwrap();
        let (_, rep) = fixed_time_loss(&mut tape, p, t, 0).unwrap();
        assert!((rep.total - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fixed_time_gradient_is_sign_over_n() {
        let pred = frame(&[0.5, -0.2, 0.3, 0.0]);
        let target = frame(&[0.1, 0.1, 0.3, -0.2]);
        let mut tape = Tape::new();
        let p = tape.leaf(&pred, true).unwrap();
        let t = tape.leaf(&target, false).unwrap();
        let (loss, _) = fixed_time_loss(&mut tape, p, t, 0).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap();
        let n = pred.numel() as f64;
        for i in 0..pred.numel() {
            let s = (pred.data()[i] - target.data()[i]).signum();
            let expect = if pred.data()[i] == target.data()[i] { 0.0 } else { s / n };
            assert!((g.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn min_over_time_picks_smallest_and_ties_go_first() {
        let targets = TargetSet::new(vec![3, 5, 9]).unwrap();
        let uniform = make_time_preference(PreferenceKind::Uniform, &targets).unwrap();
        let mut tape = Tape::new();
        let outer = scalar_errors(&mut tape, &[0.5, 0.2, 0.9]);
        let (_, rep) = generalized_min_loss(&mut tape, &outer, &[0.5, 0.2, 0.9], &uniform, &targets).unwrap();
        assert_eq!(rep.total, 0.2);
        assert_eq!(rep.match_index, 5);

        let targets = TargetSet::new(vec![1, 2]).unwrap();
        let uniform = make_time_preference(PreferenceKind::Uniform, &targets).unwrap();
        let mut tape = Tape::new();
        let outer = scalar_errors(&mut tape, &[0.3, 0.3]);
        let (_, rep) = generalized_min_loss(&mut tape, &outer, &[0.3, 0.3], &uniform, &targets).unwrap();
        assert_eq!(rep.match_index, 1);
    }

    #[test]
    fn single_target_reduces_to_fixed_time() {
        let pred = frame(&[0.4, 0.6]);
        let tgt = frame(&[0.0, 0.0]);
        let targets = TargetSet::new(vec![4]).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(&pred, false).unwrap();
        let t = tape.leaf(&tgt, false).unwrap();
        let (_, min_rep) = min_over_time_loss(&mut tape, p, &[t], &targets).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(&pred, false).unwrap();
        let t = tape.leaf(&tgt, false).unwrap();
        let (_, fix_rep) = fixed_time_loss(&mut tape, p, t, 4).unwrap();
        assert_eq!(min_rep.total, fix_rep.total);
        assert_eq!(min_rep.match_index, fix_rep.match_index);
    }

    #[test]
    fn generalized_min_decouples_selection_from_penalty() {
        let targets = TargetSet::new(vec![0, 1, 2]).unwrap();
        // w = [1,2,1]: E' = [0.4, 0.15, 0.5] so t* = 1; penalty is outer 0.3.
        let w = TimePreference::from_weights(vec![1.0, 2.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let outer = scalar_errors(&mut tape, &[0.4, 0.3, 0.5]);
        let (_, rep) = generalized_min_loss(&mut tape, &outer, &[0.4, 0.3, 0.5], &w, &targets).unwrap();
        assert_eq!(rep.match_index, 1);
        assert!((rep.total - 0.3).abs() < 1e-15);

        // Preference changes the selection, not the outer penalty.
        let w = TimePreference::from_weights(vec![1.0, 1.0, 100.0]).unwrap();
        let mut tape = Tape::new();
        let outer = scalar_errors(&mut tape, &[0.4, 0.3, 0.5]);
        let (_, rep) = generalized_min_loss(&mut tape, &outer, &[0.4, 0.3, 0.5], &w, &targets).unwrap();
        assert_eq!(rep.match_index, 2);
        assert!((rep.total - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_weights_reduce_to_plain_min() {
        let targets = TargetSet::new(vec![2, 4, 6]).unwrap();
        let uniform = make_time_preference(PreferenceKind::Uniform, &targets).unwrap();
        let errs = [0.9, 0.05, 0.4];
        let mut tape = Tape::new();
        let outer = scalar_errors(&mut tape, &errs);
        let (_, gen_rep) = generalized_min_loss(&mut tape, &outer, &errs, &uniform, &targets).unwrap();
        assert_eq!(gen_rep.match_index, 4);
        assert_eq!(gen_rep.total, 0.05);
    }

    #[test]
    fn nonpositive_weights_rejected() {
        assert!(TimePreference::from_weights(vec![1.0, 0.0]).is_err());
        assert!(TimePreference::from_weights(vec![1.0, -2.0]).is_err());
    }

    #[test]
    fn linear_preference_matches_published_range() {
        let targets = TargetSet::range(1, 16); // |T| = 15
        let w = make_time_preference(PreferenceKind::Linear { beta: 2.0 }, &targets).unwrap();
        assert_eq!(w.weights().len(), 15);
        assert!((w.weights()[0] - (2.0 + 1.0 / 15.0)).abs() < 1e-12);
        assert!((w.weights()[14] - 3.0).abs() < 1e-12);
        for win in w.weights().windows(2) {
            assert!(win[1] > win[0]);
        }
    }

    #[test]
    fn bell_preference_spans_two_thirds_to_one() {
        let targets = TargetSet::range(1, 22); // |T| = 21
        let w = make_time_preference(PreferenceKind::Bell { sigma: None }, &targets).unwrap();
        assert!((w.weights()[10] - 1.0).abs() < 1e-12);
        assert!((w.weights()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w.weights()[20] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn huge_beta_reduces_to_plain_argmin() {
        let targets = TargetSet::range(0, 9);
        let w = make_time_preference(PreferenceKind::Linear { beta: 1e9 }, &targets).unwrap();
        let uniform = make_time_preference(PreferenceKind::Uniform, &targets).unwrap();
        let mut rng_state = 12345u64;
        for _ in 0..50 {
            let errs: Vec<f64> = (0..9)
                .map(|_| {
                    rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (rng_state >> 11) as f64 / (1u64 << 53) as f64 + 0.01
                })
                .collect();
            assert_eq!(
                generalized_min_select(&errs, &w).unwrap(),
                generalized_min_select(&errs, &uniform).unwrap()
            );
        }
    }

    #[test]
    fn recursive_update_follows_match() {
        let full = TargetSet::new((1..=10).collect()).unwrap();
        let next = recursive_target_update(&full, 5).unwrap();
        assert_eq!(next.indices(), &[6, 7, 8, 9, 10]);
        assert_eq!(next.recursion_level(), 1);

        let stop = recursive_target_update(&full, 10).unwrap();
        assert!(stop.is_empty());

        let tail = recursive_target_update(&full, 1).unwrap();
        assert_eq!(tail.indices(), &(2..=10).collect::<Vec<_>>());

        assert!(recursive_target_update(&full, 11).is_err());
    }

    #[test]
    fn recursive_update_before_mirrors() {
        let full = TargetSet::new((1..=10).collect()).unwrap();
        let next = recursive_target_update_before(&full, 5).unwrap();
        assert_eq!(next.indices(), &[1, 2, 3, 4]);
        assert!(recursive_target_update_before(&full, 1).unwrap().is_empty());
    }

    #[test]
    fn label_smoothing_values() {
        assert_eq!(label_smoothing_weight(5, 5, 0.25), 1.0);
        assert_eq!(label_smoothing_weight(5, 7, 0.25), 0.5);
        assert_eq!(label_smoothing_weight(5, 9, 0.25), 0.0);
        assert_eq!(label_smoothing_weight(9, 5, 0.25), 0.0);
    }

    #[test]
    fn disc_loss_at_half_is_terms_times_ln2() {
        // alpha = 0 makes every smoothed label 0 (hard targets), so with
        // D = 0.5 everywhere each BCE term contributes exactly ln 2.
        let targets = TargetSet::new(vec![0, 1, 2]).unwrap();
        let mut tape = Tape::new();
        let half = frame(&[0.5, 0.5, 0.5]);
        let real: Vec<TensorId> = (0..3).map(|_| tape.leaf(&half, false).unwrap()).collect();
        let fake = tape.leaf(&half, false).unwrap();
        let loss = tap_gan_discriminator_loss(&mut tape, &real, fake, &targets, 1, 0.0).unwrap();
        // terms: 3 positives + 3 fake negatives + 2 masked soft terms
        let expect = 8.0 * f64::ln(2.0);
        assert!((tape.item(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn disc_loss_soft_target_half_is_ln2() {
        // Numeric oracle: -l ln D - (1-l) ln(1-D) at l = 0.5, D = 0.5.
        let oracle = -0.5 * f64::ln(0.5) - 0.5 * f64::ln(0.5);
        let mut tape = Tape::new();
        let p = tape.leaf(&frame(&[0.5]), false).unwrap();
        let loss = bce_masked(&mut tape, p, &[0.5], None).unwrap();
        assert!((tape.item(loss) - oracle).abs() < 1e-12);
        assert!((tape.item(loss) - f64::ln(2.0)).abs() < 1e-12);
    }

    #[test]
    fn disc_loss_vanishes_for_perfect_discriminator() {
        let targets = TargetSet::new(vec![0, 1]).unwrap();
        let e = 1e-9;
        let mut tape = Tape::new();
        // head t is 1-e on its own frame, e elsewhere
        let r0 = tape.leaf(&frame(&[1.0 - e, e]), false).unwrap();
        let r1 = tape.leaf(&frame(&[e, 1.0 - e]), false).unwrap();
        let fake = tape.leaf(&frame(&[e, e]), false).unwrap();
        // alpha large: the sampled t' frame is a pure negative for other heads
        let loss = tap_gan_discriminator_loss(&mut tape, &[r0, r1], fake, &targets, 1, 1.0).unwrap();
        assert!(tape.item(loss) < 1e-6);
    }

    #[test]
    fn generator_term_values_and_monotonicity() {
        let mut tape = Tape::new();
        let p = tape.leaf(&frame(&[1.0 - 1e-7]), false).unwrap();
        let term = tap_gan_generator_term(&mut tape, p, 0).unwrap();
        assert!(tape.item(term).abs() < 1e-6);

        let mut tape = Tape::new();
        let p = tape.leaf(&frame(&[0.5]), false).unwrap();
        let term = tap_gan_generator_term(&mut tape, p, 0).unwrap();
        assert!((tape.item(term) - f64::ln(2.0)).abs() < 1e-12);

        let mut last = f64::NEG_INFINITY;
        for d in [0.9, 0.7, 0.5, 0.3, 0.1] {
            let mut tape = Tape::new();
            let p = tape.leaf(&frame(&[d]), false).unwrap();
            let term = tap_gan_generator_term(&mut tape, p, 0).unwrap();
            assert!(tape.item(term) > last);
            last = tape.item(term);
        }
    }

    #[test]
    fn kl_closed_form_basics() {
        let mut tape = Tape::new();
        let mu = tape.leaf(&frame(&[0.0, 0.0]), false).unwrap();
        let lv = tape.leaf(&frame(&[0.0, 0.0]), false).unwrap();
        let kl = kl_standard_normal(&mut tape, mu, lv).unwrap();
        assert_eq!(tape.item(kl), 0.0);

        let mut tape = Tape::new();
        let mu = tape.leaf(&frame(&[1.0]), false).unwrap();
        let lv = tape.leaf(&frame(&[0.0]), false).unwrap();
        let kl = kl_standard_normal(&mut tape, mu, lv).unwrap();
        assert!((tape.item(kl) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn min_loss_gradient_only_through_match() {
        // Finite-difference check of the gradient sparsity: d(min)/d(x_t)
        // is zero for every non-matched target.
        let pred = frame(&[0.2, -0.1, 0.4, 0.0]);
        let t0 = frame(&[0.9, 0.9, 0.9, 0.9]);
        let t1 = frame(&[0.25, -0.05, 0.35, 0.05]); // closest
        let targets = TargetSet::new(vec![1, 2]).unwrap();
        for (check_idx, expect_zero) in [(0usize, true), (1usize, false)] {
            let (pc, t0c, t1c) = (pred.clone(), t0.clone(), t1.clone());
            let tsc = targets.clone();
            let f = move |tape: &mut Tape, xi: TensorId| {
                let p = tape.leaf(&pc, false)?;
                let frames = [
                    if check_idx == 0 { xi } else { tape.leaf(&t0c, false)? },
                    if check_idx == 1 { xi } else { tape.leaf(&t1c, false)? },
                ];
                let (loss, _) = min_over_time_loss(tape, p, &frames, &tsc)?;
                Ok(loss)
            };
            let x = if check_idx == 0 { t0.clone() } else { t1.clone() };
            let report = grad_check(&f, &x, 1e-4, 1e-3).unwrap();
            assert!(report.pass());
            // verify the analytic gradient magnitude directly
            let mut tape = Tape::new();
            let xi = tape.leaf(&x, true).unwrap();
            let p = tape.leaf(&pred, false).unwrap();
            let frames = [
                if check_idx == 0 { xi } else { tape.leaf(&t0, false).unwrap() },
                if check_idx == 1 { xi } else { tape.leaf(&t1, false).unwrap() },
            ];
            let (loss, _) = min_over_time_loss(&mut tape, p, &frames, &targets).unwrap();
            tape.backward(loss).unwrap();
            let g = tape.grad(xi).unwrap();
            let nonzero = g.data().iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, !expect_zero);
        }
    }

    #[test]
    fn combined_loss_reduces_and_books_cleanly() {
        let pred = frame(&[0.3, -0.2, 0.5]);
        let f0 = frame(&[0.0, 0.0, 0.0]);
        let f1 = frame(&[0.3, -0.1, 0.45]);
        let targets = TargetSet::new(vec![1, 2]).unwrap();
        let weights = make_time_preference(PreferenceKind::Uniform, &targets).unwrap();

        // lambda = 0, no banks: identical to the generalized minimum.
        let mut tape = Tape::new();
        let p = tape.leaf(&pred, false).unwrap();
        let frames = [tape.leaf(&f0, false).unwrap(), tape.leaf(&f1, false).unwrap()];
        let (_, rep) = combined_loss(
            &mut tape,
            &CombinedLoss {
                pred: p,
                frames: &frames,
                targets: &targets,
                weights: &weights,
                selection: SelectionRule::ArgminInner,
                prior_bank: None,
                posterior_bank: None,
                posterior: None,
                label_smoothing_alpha: 0.25,
                lambda_kl: 0.0,
                lambda_gan: 0.0,
            },
        )
        .unwrap();
        let mut tape2 = Tape::new();
        let p2 = tape2.leaf(&pred, false).unwrap();
        let frames2 = [tape2.leaf(&f0, false).unwrap(), tape2.leaf(&f1, false).unwrap()];
        let (_, rep_min) = min_over_time_loss(&mut tape2, p2, &frames2, &targets).unwrap();
        assert_eq!(rep.total, rep_min.total);
        assert_eq!(rep.match_index, rep_min.match_index);

        // bookkeeping identity: total = l1 + lambda_gan*gan_gen + lambda_kl*kl
        let mut tape = Tape::new();
        let p = tape.leaf(&pred, false).unwrap();
        let frames = [tape.leaf(&f0, false).unwrap(), tape.leaf(&f1, false).unwrap()];
        let real: Vec<TensorId> = (0..2)
            .map(|_| tape.leaf(&frame(&[0.6, 0.4]), false).unwrap())
            .collect();
        let fake_d = tape.leaf(&frame(&[0.3, 0.2]), false).unwrap();
        let fake_g = tape.leaf(&frame(&[0.3, 0.2]), false).unwrap();
        let mu = tape.leaf(&frame(&[0.5, -0.5]), false).unwrap();
        let lv = tape.leaf(&frame(&[0.2, -0.3]), false).unwrap();
        let (nodes, rep) = combined_loss(
            &mut tape,
            &CombinedLoss {
                pred: p,
                frames: &frames,
                targets: &targets,
                weights: &weights,
                selection: SelectionRule::ArgminInner,
                prior_bank: Some(BankTerms {
                    real: &real,
                    fake_for_disc: fake_d,
                    fake_for_gen: fake_g,
                    t_prime_pos: 0,
                }),
                posterior_bank: None,
                posterior: Some((mu, lv)),
                label_smoothing_alpha: 0.25,
                lambda_kl: 1e-2,
                lambda_gan: 1e-2,
            },
        )
        .unwrap();
        let c = rep.components;
        assert!(c.l1.is_finite() && c.gan_gen.is_finite() && c.gan_disc.is_finite() && c.kl.is_finite());
        assert!((rep.total - (c.l1 + 1e-2 * c.gan_gen + 1e-2 * c.kl)).abs() < 1e-12);
        // the backward root additionally carries the discriminator loss
        assert!((tape.item(nodes.backward_root) - (rep.total + c.gan_disc)).abs() < 1e-12);
        assert!((tape.item(nodes.generator_total) - rep.total).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rescaling_weights_changes_nothing(
            errs in proptest::collection::vec(0.01f64..10.0, 2..12),
            scale in 0.01f64..100.0,
        ) {
            let n = errs.len();
            let w: Vec<f64> = (1..=n).map(|k| 0.5 + k as f64 / n as f64).collect();
            let pref = TimePreference::from_weights(w.clone()).unwrap();
            let scaled = TimePreference::from_weights(w.iter().map(|&v| v * scale).collect()).unwrap();
            prop_assert_eq!(
                generalized_min_select(&errs, &pref).unwrap(),
                generalized_min_select(&errs, &scaled).unwrap()
            );
        }

        #[test]
        fn raising_one_weight_attracts_selection(
            errs in proptest::collection::vec(0.01f64..10.0, 3..10),
            target in 0usize..3,
        ) {
            let n = errs.len();
            let target = target % n;
            let base = vec![1.0; n];
            let pref = TimePreference::from_weights(base.clone()).unwrap();
            let before = generalized_min_select(&errs, &pref).unwrap();
            // raising w(t0) never moves the selection away from t0...
            let mut raised = base.clone();
            raised[target] = 4.0;
            let pref_r = TimePreference::from_weights(raised).unwrap();
            let after = generalized_min_select(&errs, &pref_r).unwrap();
            if before == target {
                prop_assert_eq!(after, target);
            }
            // ...and a large enough weight always captures it.
            let mut huge = base;
            huge[target] = 1e12;
            let pref_h = TimePreference::from_weights(huge).unwrap();
            prop_assert_eq!(generalized_min_select(&errs, &pref_h).unwrap(), target);
        }

        #[test]
        fn min_never_exceeds_any_fixed_time(
            errs in proptest::collection::vec(0.0f64..5.0, 1..12),
        ) {
            let min = errs.iter().cloned().fold(f64::INFINITY, f64::min);
            for &e in &errs {
                prop_assert!(min <= e);
            }
        }

        #[test]
        fn label_smoothing_symmetric_and_bounded(
            t in 0usize..100, tp in 0usize..100, alpha in 0.0f64..2.0,
        ) {
            let a = label_smoothing_weight(t, tp, alpha);
            let b = label_smoothing_weight(tp, t, alpha);
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn recursive_targets_shrink_strictly(
            len in 1usize..30, pick in 0usize..30,
        ) {
            let full = TargetSet::range(1, 1 + len);
            let pick = 1 + (pick % len);
            let next = recursive_target_update(&full, pick).unwrap();
            prop_assert!(next.len() < full.len());
            prop_assert_eq!(next.recursion_level(), 1);
        }
    }
}
