//! Evaluation protocol: min-l1 / match-step records, best-of-N sampling
//! evaluation, warped-location subgoal extraction, and the bottleneck
//! discovery frequency curve.

use crate::autodiff::{warp_bilinear, Tensor};
use crate::models::{PredictionFrames, Predictor};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// One evaluated episode for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub episode: usize,
    pub method: String,
    pub min_l1_err: f64,
    pub match_step: usize,
}

/// Minimum mean-l1 distance from a prediction to any target frame, plus
/// the frame index of the argmin (first on ties).
pub fn min_l1_and_match(pred: &Tensor, targets: &[(usize, &Tensor)]) -> Result<(f64, usize)> {
    if targets.is_empty() {
        return Err(Error::invalid("min_l1_and_match", "empty target set"));
    }
    let mut best = f64::INFINITY;
    let mut best_idx = targets[0].0;
    for &(idx, frame) in targets {
        let err = pred.mean_abs_diff(frame)?;
        if err < best {
            best = err;
            best_idx = idx;
        }
    }
    Ok((best, best_idx))
}

/// Per-entity probability map over pixel locations, normalized to sum 1.
#[derive(Debug, Clone)]
pub struct LocationMap {
    map: Tensor, // [H, W]
}

impl LocationMap {
    pub fn tensor(&self) -> &Tensor {
        &self.map
    }

    /// (x, y) of the most likely cell (first on ties, row-major scan).
    pub fn argmax(&self) -> (usize, usize) {
        let w = self.map.shape()[1];
        let mut best = 0usize;
        for (i, &v) in self.map.data().iter().enumerate() {
            if v > self.map.data()[best] {
                best = i;
            }
        }
        (best % w, best / w)
    }

    /// Expected Euclidean pixel distance to a target location.
    pub fn expected_distance(&self, target: (f64, f64)) -> f64 {
        let (h, w) = (self.map.shape()[0], self.map.shape()[1]);
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let p = self.map.data()[y * w + x];
                if p > 0.0 {
                    let dx = x as f64 - target.0;
                    let dy = y as f64 - target.1;
                    acc += p * (dx * dx + dy * dy).sqrt();
                }
            }
        }
        acc
    }
}

/// Pushes each entity's one-hot location maps through the same flows and
/// masks the predictor used for the context frames, and renormalizes.
///
/// `entity_positions[e][k]` is entity `e`'s (x, y) in context frame `k`.
/// Requires a warp-only prediction: with a new-pixel path the synthesized
/// pixels have no source location and the tracking is undefined.
pub fn subgoal_locations(
    frames: &PredictionFrames,
    entity_positions: &[Vec<(usize, usize)>],
) -> Result<Vec<LocationMap>> {
    if frames.new_pixels.is_some() {
        return Err(Error::invalid(
            "subgoal_locations",
            "model synthesizes new pixels; warp-only predictions are required",
        ));
    }
    let context_count = frames.flows.len();
    let mshape = frames.masks.shape();
    if mshape[0] != context_count {
        return Err(Error::shape(
            "subgoal_locations",
            format!("{} masks for {} flows", mshape[0], context_count),
        ));
    }
    let (h, w) = (mshape[1], mshape[2]);
    let plane = h * w;
    let mut out = Vec::with_capacity(entity_positions.len());
    for positions in entity_positions {
        if positions.len() != context_count {
            return Err(Error::invalid(
                "subgoal_locations",
                format!("{} positions for {} context frames", positions.len(), context_count),
            ));
        }
        let mut acc = vec![0.0f64; plane];
        for (k, &(x, y)) in positions.iter().enumerate() {
            if x >= w || y >= h {
                return Err(Error::invalid(
                    "subgoal_locations",
                    format!("position ({x},{y}) out of frame"),
                ));
            }
            let mut onehot = Tensor::zeros(&[1, h, w]);
            onehot.set(&[0, y, x], 1.0);
            let warped = warp_bilinear(&onehot, &frames.flows[k])?;
            let mask = &frames.masks.data()[k * plane..(k + 1) * plane];
            for p in 0..plane {
                acc[p] += mask[p] * warped.data()[p];
            }
        }
        let total: f64 = acc.iter().sum();
        if total > 1e-12 {
            for v in &mut acc {
                *v /= total;
            }
        } else {
            // warped mass vanished entirely; fall back to uniform
            acc.fill(1.0 / plane as f64);
        }
        out.push(LocationMap {
            map: Tensor::from_vec(vec![h, w], acc)?,
        });
    }
    Ok(out)
}

/// Bottleneck score of a two-object prediction: for both delivery orders
/// ("A moved first": A at goal with B at start, and vice versa) sum the
/// expected pixel distances of each object map to its candidate position,
/// then take the lower sum.
pub fn bottleneck_score(
    maps: &[LocationMap],
    starts: &[(f64, f64)],
    goals: &[(f64, f64)],
) -> Result<f64> {
    if maps.len() != 2 || starts.len() != 2 || goals.len() != 2 {
        return Err(Error::invalid(
            "bottleneck_score",
            format!("two objects required, got {}", maps.len()),
        ));
    }
    let a_first = maps[0].expected_distance(goals[0]) + maps[1].expected_distance(starts[1]);
    let b_first = maps[0].expected_distance(starts[0]) + maps[1].expected_distance(goals[1]);
    Ok(a_first.min(b_first))
}

/// Fraction of episodes whose score is at or below each threshold.
pub fn bottleneck_frequency_curve(scores: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if scores.is_empty() {
        return Err(Error::invalid("bottleneck_frequency_curve", "no scores"));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = scores.iter().filter(|&&s| s <= t).count();
            (t, hits as f64 / scores.len() as f64)
        })
        .collect())
}

/// Best-of-N evaluation of a variational predictor: draw `n` prior latent
/// samples, predict each, and keep the sample with the lowest min-l1
/// error. The sample stream is a pure function of `seed`, so best-of-n is
/// a prefix minimum: larger `n` with the same seed never does worse.
pub fn best_of_n_eval(
    model: &Predictor,
    context: &[&Tensor],
    targets: &[(usize, &Tensor)],
    n: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    if n == 0 {
        return Err(Error::invalid("best_of_n_eval", "n must be >= 1"));
    }
    if !model.cfg.use_vae {
        return Err(Error::invalid("best_of_n_eval", "model has no latent path"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = (f64::INFINITY, targets.first().map_or(0, |t| t.0));
    for _ in 0..n {
        let z = Tensor::randn(&[model.cfg.latent_dim], 1.0, &mut rng);
        let frames = model.predict_frames(context, Some(&z))?;
        let (err, step) = min_l1_and_match(&frames.composited, targets)?;
        if err < best.0 {
            best = (err, step);
        }
    }
    Ok(best)
}

// ── CSV outputs ──────────────────────────────────────────────────────

pub fn write_eval_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::from("episode,method,min_l1_err,match_step\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.episode, r.method, r.min_l1_err, r.match_step
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_curve_csv(path: &Path, curve: &[(f64, f64)], method: &str) -> Result<()> {
    let mut out = String::from("threshold,frequency,method\n");
    for &(t, f) in curve {
        out.push_str(&format!("{},{},{}\n", t, f, method));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::taploss::{min_over_time_loss, TargetSet};

    fn frame(vals: &[f64]) -> Tensor {
        Tensor::from_vec(vec![1, 1, vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn exact_match_and_tie_rule() {
        let t3 = frame(&[0.0, 0.0]);
        let t4 = frame(&[1.0, 1.0]);
        let t7 = frame(&[0.25, 0.75]);
        let pred = t7.clone();
        let targets = [(3usize, &t3), (4usize, &t4), (7usize, &t7)];
        let (err, step) = min_l1_and_match(&pred, &targets).unwrap();
        assert_eq!(err, 0.0);
        assert_eq!(step, 7);

        // equidistant from frames 3 and 4: tie goes to 3
        let pred = frame(&[0.5, 0.5]);
        let targets = [(3usize, &t3), (4usize, &t4)];
        let (_, step) = min_l1_and_match(&pred, &targets).unwrap();
        assert_eq!(step, 3);
    }

    #[test]
    fn agrees_with_min_over_time_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let pred = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
            let frames: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[2, 3, 3], 1.0, &mut rng)).collect();
            let targets = TargetSet::new(vec![2, 5, 6, 9]).unwrap();
            let pairs: Vec<(usize, &Tensor)> =
                targets.indices().iter().copied().zip(frames.iter()).collect();
            let (err, step) = min_l1_and_match(&pred, &pairs).unwrap();

            let mut tape = Tape::new();
            let p = tape.constant(&pred).unwrap();
            let ids: Vec<_> = frames.iter().map(|f| tape.constant(f).unwrap()).collect();
            let (_, rep) = min_over_time_loss(&mut tape, p, &ids, &targets).unwrap();
            assert_eq!(err, rep.total);
            assert_eq!(step, rep.match_index);
        }
    }

    fn identity_frames(h: usize, w: usize) -> PredictionFrames {
        // two contexts, zero flows, all mask weight on context 0
        let mut masks = Tensor::zeros(&[2, h, w]);
        for p in 0..h * w {
            masks.data_mut()[p] = 1.0;
        }
        PredictionFrames {
            new_pixels: None,
            flows: vec![Tensor::zeros(&[2, h, w]), Tensor::zeros(&[2, h, w])],
            masks,
            composited: Tensor::zeros(&[3, h, w]),
        }
    }

    #[test]
    fn identity_flow_keeps_one_hot() {
        let frames = identity_frames(8, 8);
        let maps = subgoal_locations(&frames, &[vec![(3, 4), (6, 6)]]).unwrap();
        let m = &maps[0];
        assert!((m.tensor().at(&[4, 3]) - 1.0).abs() < 1e-12);
        assert_eq!(m.argmax(), (3, 4));
        let sum: f64 = m.tensor().data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_translation_shifts_argmax() {
        let (h, w) = (8, 8);
        let mut frames = identity_frames(h, w);
        // flow that translates content by (+2, 0): every output pixel reads
        // from 2 cells to the left
        let mut flow = Tensor::zeros(&[2, h, w]);
        for p in 0..h * w {
            flow.data_mut()[p] = -2.0;
        }
        frames.flows[0] = flow;
        let maps = subgoal_locations(&frames, &[vec![(3, 4), (0, 0)]]).unwrap();
        assert_eq!(maps[0].argmax(), (5, 4));
        let sum: f64 = maps[0].tensor().data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn refuses_new_pixel_models() {
        let mut frames = identity_frames(8, 8);
        frames.new_pixels = Some(Tensor::zeros(&[3, 8, 8]));
        assert!(subgoal_locations(&frames, &[vec![(0, 0), (0, 0)]]).is_err());
    }

    fn point_mass(h: usize, w: usize, at: (usize, usize)) -> LocationMap {
        let mut m = Tensor::zeros(&[h, w]);
        m.set(&[at.1, at.0], 1.0);
        LocationMap { map: m }
    }

    #[test]
    fn bottleneck_score_point_masses() {
        // map A at A's goal, map B at B's start: perfect "A moved first"
        let a = point_mass(16, 16, (10, 3));
        let b = point_mass(16, 16, (2, 12));
        let starts = [(4.0, 3.0), (2.0, 12.0)];
        let goals = [(10.0, 3.0), (9.0, 12.0)];
        let score = bottleneck_score(&[a, b], &starts, &goals).unwrap();
        assert!(score.abs() < 1e-12);
    }

    #[test]
    fn bottleneck_score_midpoints_and_symmetry() {
        // both maps at the midpoints of 8-px segments: 4 + 4 = 8 either way
        let a = point_mass(16, 16, (6, 2));
        let b = point_mass(16, 16, (6, 10));
        let starts = [(2.0, 2.0), (2.0, 10.0)];
        let goals = [(10.0, 2.0), (10.0, 10.0)];
        let maps = [a, b];
        let score = bottleneck_score(&maps, &starts, &goals).unwrap();
        assert!((score - 8.0).abs() < 1e-12);

        // swapping entity labels leaves the score unchanged
        let swapped_maps = [maps[1].clone(), maps[0].clone()];
        let sw_starts = [starts[1], starts[0]];
        let sw_goals = [goals[1], goals[0]];
        let score2 = bottleneck_score(&swapped_maps, &sw_starts, &sw_goals).unwrap();
        assert_eq!(score, score2);
    }

    #[test]
    fn frequency_curve_shape() {
        let scores = [0.0, 0.0, 0.0];
        let curve = bottleneck_frequency_curve(&scores, &[0.0, 1.0, 2.0]).unwrap();
        assert!(curve.iter().all(|&(_, f)| f == 1.0));

        let scores = [0.5, 1.5, 2.5, 3.5];
        let curve = bottleneck_frequency_curve(&scores, &[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        for pair in curve.windows(2) {
            assert!(pair[1].1 >= pair[0].1);
        }
        assert_eq!(curve.first().unwrap().1, 0.0);
        assert_eq!(curve.last().unwrap().1, 1.0);
    }

    #[test]
    fn best_of_n_is_prefix_monotone() {
        use crate::models::PredictorConfig;
        let cfg = PredictorConfig {
            frame_size: (8, 8, 2),
            context_count: 2,
            code_dim: 8,
            latent_dim: 3,
            widths: vec![4, 6],
            use_vae: true,
            use_new_pixels: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Predictor::new(cfg, &mut rng).unwrap();
        let c0 = Tensor::randn(&[2, 8, 8], 0.3, &mut rng);
        let c1 = Tensor::randn(&[2, 8, 8], 0.3, &mut rng);
        let t_frames: Vec<Tensor> = (0..3)
            .map(|_| {
                let mut t = Tensor::randn(&[2, 8, 8], 0.3, &mut rng);
                t.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
                t
            })
            .collect();
        let targets: Vec<(usize, &Tensor)> =
            t_frames.iter().enumerate().map(|(i, t)| (i + 1, t)).collect();
        let ctx: Vec<&Tensor> = vec![&c0, &c1];
        let e1 = best_of_n_eval(&model, &ctx, &targets, 1, 99).unwrap().0;
        let e10 = best_of_n_eval(&model, &ctx, &targets, 10, 99).unwrap().0;
        let e100 = best_of_n_eval(&model, &ctx, &targets, 100, 99).unwrap().0;
        assert!(e10 <= e1);
        assert!(e100 <= e10);
        assert!(best_of_n_eval(&model, &ctx, &targets, 0, 99).is_err());
    }
}
