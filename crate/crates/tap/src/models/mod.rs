//! The predictor, the per-time discriminator banks, and the whole-video
//! inference network.
//!
//! The predictor does not paint the output frame directly: it emits
//! appearance flows that warp each context frame, a frame of new pixels,
//! and softmax masks that composite the warped frames (and optionally the
//! new pixels) into the prediction. Warp-only variants drop the new-pixel
//! path entirely, which is what lets evaluation push one-hot location maps
//! through the same flows and masks the prediction used.

mod checkpoint;
mod nets;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use nets::{Bound, Params};

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::{Error, Result};
use nets::{Decoder, LinearLayer, Trunk, LEAKY_SLOPE};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Shape and capacity of the predictor and its satellite networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Frame size as (height, width, channels).
    pub frame_size: (usize, usize, usize),
    /// Number of context frames: 1 for forward prediction, 2 for
    /// bidirectional.
    pub context_count: usize,
    /// Dimension of the encoder code.
    pub code_dim: usize,
    /// Dimension of the variational latent.
    pub latent_dim: usize,
    /// Channel widths of the conv stages (encoder order).
    pub widths: Vec<usize>,
    /// Attach the variational latent path.
    pub use_vae: bool,
    /// Synthesize a frame of new pixels in addition to the warped contexts.
    pub use_new_pixels: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            frame_size: (16, 16, 3),
            context_count: 2,
            code_dim: 64,
            latent_dim: 8,
            widths: vec![16, 32, 64],
            use_vae: false,
            use_new_pixels: true,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.frame_size;
        for (dim, name) in [(h, "height"), (w, "width")] {
            if !dim.is_power_of_two() || !(8..=64).contains(&dim) {
                return Err(Error::Config(format!(
                    "frame {} must be a power of two in [8, 64], got {}",
                    name, dim
                )));
            }
        }
        if c == 0 {
            return Err(Error::Config("frame channel count must be >= 1".into()));
        }
        if !(1..=2).contains(&self.context_count) {
            return Err(Error::Config(format!(
                "context_count must be 1 or 2, got {}",
                self.context_count
            )));
        }
        if self.use_vae && self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1 when use_vae".into()));
        }
        if self.widths.is_empty() {
            return Err(Error::Config("widths must be non-empty".into()));
        }
        if self.code_dim == 0 {
            return Err(Error::Config("code_dim must be >= 1".into()));
        }
        Ok(())
    }

    fn spatial(&self) -> (usize, usize) {
        (self.frame_size.0, self.frame_size.1)
    }

    fn frame_channels(&self) -> usize {
        self.frame_size.2
    }

    /// Mask channels: one per context, plus one for new pixels if enabled.
    pub fn mask_channels(&self) -> usize {
        self.context_count + usize::from(self.use_new_pixels)
    }

    fn decoder_input_dim(&self) -> usize {
        self.code_dim + if self.use_vae { self.latent_dim } else { 0 }
    }
}

// ── predictor ────────────────────────────────────────────────────────

/// Decoded outputs of one prediction, as tape nodes.
pub struct PredictorOutput {
    /// New-pixel frame (tanh range), absent on warp-only models.
    pub new_pixels: Option<TensorId>,
    /// One flow field `[2,H,W]` per context frame.
    pub flows: Vec<TensorId>,
    /// Softmax masks `[K,H,W]`, one channel per context (+1 if new pixels).
    pub masks: TensorId,
    /// The composited prediction `[C,H,W]`.
    pub composited: TensorId,
}

/// Plain-tensor snapshot of a [`PredictorOutput`].
#[derive(Debug, Clone)]
pub struct PredictionFrames {
    pub new_pixels: Option<Tensor>,
    pub flows: Vec<Tensor>,
    pub masks: Tensor,
    pub composited: Tensor,
}

impl PredictorOutput {
    pub fn values(&self, tape: &Tape) -> PredictionFrames {
        PredictionFrames {
            new_pixels: self.new_pixels.map(|id| tape.to_tensor(id)),
            flows: self.flows.iter().map(|&id| tape.to_tensor(id)).collect(),
            masks: tape.to_tensor(self.masks),
            composited: tape.to_tensor(self.composited),
        }
    }
}

/// The frame predictor: shared encoder over context frames, optional code
/// fusion for two contexts, optional latent concatenation, and three
/// decoders (new pixels / flows / masks) feeding the compositor.
pub struct Predictor {
    pub cfg: PredictorConfig,
    pub params: Params,
    encoder: Trunk,
    fuse: Option<(LinearLayer, LinearLayer)>,
    dec_new: Option<Decoder>,
    dec_flow: Decoder,
    dec_mask: Decoder,
}

impl Predictor {
    pub fn new(cfg: PredictorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let encoder = Trunk::new(
            &mut params,
            "enc",
            cfg.frame_channels(),
            &cfg.widths,
            cfg.spatial(),
            cfg.code_dim,
            rng,
        )?;
        let fuse = if cfg.context_count == 2 {
            let a = LinearLayer::new(&mut params, "fuse0", 2 * cfg.code_dim, cfg.code_dim, rng);
            let b = LinearLayer::new(&mut params, "fuse1", cfg.code_dim, cfg.code_dim, rng);
            Some((a, b))
        } else {
            None
        };
        let in_dim = cfg.decoder_input_dim();
        let dec_new = if cfg.use_new_pixels {
            Some(Decoder::new(
                &mut params,
                "dec_new",
                in_dim,
                &cfg.widths,
                cfg.spatial(),
                cfg.frame_channels(),
                rng,
            )?)
        } else {
            None
        };
        let dec_flow = Decoder::new(
            &mut params,
            "dec_flow",
            in_dim,
            &cfg.widths,
            cfg.spatial(),
            2 * cfg.context_count,
            rng,
        )?;
        let dec_mask = Decoder::new(
            &mut params,
            "dec_mask",
            in_dim,
            &cfg.widths,
            cfg.spatial(),
            cfg.mask_channels(),
            rng,
        )?;
        Ok(Predictor {
            cfg,
            params,
            encoder,
            fuse,
            dec_new,
            dec_flow,
            dec_mask,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        self.params.bind(tape, trainable)
    }

    fn check_frame(&self, tape: &Tape, id: TensorId) -> Result<()> {
        let (h, w, c) = self.cfg.frame_size;
        if tape.shape(id) != [c, h, w] {
            return Err(Error::shape(
                "predict",
                format!("frame shape {:?}, expected [{}, {}, {}]", tape.shape(id), c, h, w),
            ));
        }
        Ok(())
    }

    /// Fused context code (before latent concatenation).
    fn encode(&self, tape: &mut Tape, bound: &Bound, context: &[TensorId]) -> Result<TensorId> {
        let codes = context
            .iter()
            .map(|&frame| {
                let code = self.encoder.forward(tape, bound, frame)?;
                tape.leaky_relu(code, LEAKY_SLOPE)
            })
            .collect::<Result<Vec<_>>>()?;
        match (&self.fuse, codes.as_slice()) {
            (None, [single]) => Ok(*single),
            (Some((a, b)), [_, _]) => {
                let cat = tape.concat(&codes, 0)?;
                let h = a.forward(tape, bound, cat)?;
                let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                b.forward(tape, bound, h)
            }
            _ => unreachable!("context arity validated before encode"),
        }
    }

    /// Runs the predictor on context frames already on the tape.
    ///
    /// `z` must be present exactly when the model is variational. The
    /// composited output is a convex mask combination of warped context
    /// frames (and tanh-bounded new pixels), so inputs in [-1, 1] stay in
    /// range.
    pub fn predict(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        context: &[TensorId],
        z: Option<TensorId>,
    ) -> Result<PredictorOutput> {
        if context.len() != self.cfg.context_count {
            return Err(Error::shape(
                "predict",
                format!("{} context frames, expected {}", context.len(), self.cfg.context_count),
            ));
        }
        for &frame in context {
            self.check_frame(tape, frame)?;
        }
        match (self.cfg.use_vae, z) {
            (true, None) => return Err(Error::invalid("predict", "variational model requires z")),
            (false, Some(_)) => return Err(Error::invalid("predict", "non-variational model got z")),
            (true, Some(zid)) => {
                if tape.numel(zid) != self.cfg.latent_dim {
                    return Err(Error::shape(
                        "predict",
                        format!("z has {} elements, expected {}", tape.numel(zid), self.cfg.latent_dim),
                    ));
                }
            }
            (false, None) => {}
        }

        let code = self.encode(tape, bound, context)?;
        let code = match z {
            Some(zid) => tape.concat(&[code, zid], 0)?,
            None => code,
        };

        let new_pixels = match &self.dec_new {
            Some(dec) => {
                let raw = dec.forward(tape, bound, code)?;
                Some(tape.tanh(raw)?)
            }
            None => None,
        };
        let flow_stack = self.dec_flow.forward(tape, bound, code)?;
        let flows = (0..self.cfg.context_count)
            .map(|k| tape.narrow(flow_stack, 0, 2 * k, 2))
            .collect::<Result<Vec<_>>>()?;
        let mask_raw = self.dec_mask.forward(tape, bound, code)?;
        let masks = tape.softmax(mask_raw, 0)?;

        let warped = context
            .iter()
            .zip(&flows)
            .map(|(&frame, &flow)| tape.bilinear_sample(frame, flow))
            .collect::<Result<Vec<_>>>()?;
        let composited = composite(tape, &warped, new_pixels, masks)?;

        Ok(PredictorOutput {
            new_pixels,
            flows,
            masks,
            composited,
        })
    }

    /// New-pixel decoder alone (decoder pretraining).
    pub(crate) fn decode_new_pixels(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        code: TensorId,
    ) -> Result<TensorId> {
        let dec = self
            .dec_new
            .as_ref()
            .ok_or_else(|| Error::invalid("decode_new_pixels", "model is warp-only"))?;
        let raw = dec.forward(tape, bound, code)?;
        tape.tanh(raw)
    }

    /// Convenience forward pass on plain tensors with a throwaway tape.
    pub fn predict_frames(&self, context: &[&Tensor], z: Option<&Tensor>) -> Result<PredictionFrames> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let ctx = context
            .iter()
            .map(|t| tape.constant(t))
            .collect::<Result<Vec<_>>>()?;
        let zid = z.map(|t| tape.constant(t)).transpose()?;
        let out = self.predict(&mut tape, &bound, &ctx, zid)?;
        Ok(out.values(&tape))
    }
}

/// Convex combination of warped context frames and optional new pixels
/// under per-pixel masks: `sum_k mask_k * warped_k (+ mask_last * new)`.
pub fn composite(
    tape: &mut Tape,
    warped: &[TensorId],
    new_pixels: Option<TensorId>,
    masks: TensorId,
) -> Result<TensorId> {
    let k_needed = warped.len() + usize::from(new_pixels.is_some());
    if tape.shape(masks)[0] != k_needed {
        return Err(Error::shape(
            "composite",
            format!("{} mask channels for {} sources", tape.shape(masks)[0], k_needed),
        ));
    }
    let mut acc: Option<TensorId> = None;
    let sources = warped.iter().copied().chain(new_pixels);
    for (k, source) in sources.enumerate() {
        let mask_k = tape.narrow(masks, 0, k, 1)?;
        let term = tape.mul_pixelwise(source, mask_k)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::invalid("composite", "no sources"))
}

// ── discriminator bank ───────────────────────────────────────────────

/// Single network with one sigmoid output per target time: the t-th output
/// judges whether a frame is the ground-truth frame at time t given the
/// context.
pub struct Discriminator {
    pub params: Params,
    pub t_count: usize,
    trunk: Trunk,
    logits: LinearLayer,
}

impl Discriminator {
    pub fn new(cfg: &PredictorConfig, t_count: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if t_count == 0 {
            return Err(Error::Config("discriminator needs at least one target".into()));
        }
        let mut params = Params::new();
        let in_ch = (cfg.context_count + 1) * cfg.frame_channels();
        let trunk = Trunk::new(&mut params, "trunk", in_ch, &cfg.widths, cfg.spatial(), cfg.code_dim, rng)?;
        let logits = LinearLayer::new(&mut params, "logits", cfg.code_dim, t_count, rng);
        Ok(Discriminator {
            params,
            t_count,
            trunk,
            logits,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        self.params.bind(tape, trainable)
    }

    /// Probability vector `[t_count]` for (context, frame); context frames
    /// and the judged frame are channel-concatenated.
    pub fn probabilities(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        context: &[TensorId],
        frame: TensorId,
    ) -> Result<TensorId> {
        let mut inputs = context.to_vec();
        inputs.push(frame);
        let x = tape.concat(&inputs, 0)?;
        let h = self.trunk.forward(tape, bound, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let logits = self.logits.forward(tape, bound, h)?;
        tape.sigmoid(logits)
    }

    /// Value-level bank evaluation on plain tensors.
    pub fn discriminate(&self, context: &[&Tensor], frame: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let ctx = context
            .iter()
            .map(|t| tape.constant(t))
            .collect::<Result<Vec<_>>>()?;
        let f = tape.constant(frame)?;
        let probs = self.probabilities(&mut tape, &bound, &ctx, f)?;
        Ok(tape.to_tensor(probs))
    }
}

// ── inference network ────────────────────────────────────────────────

/// Diagonal Gaussian posterior parameters.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

/// Whole-video inference network producing the variational posterior: the
/// entire video (context + targets, channel-concatenated) goes in, so one
/// pass covers every candidate bottleneck time.
pub struct InferenceNet {
    pub params: Params,
    pub frame_count: usize,
    latent_dim: usize,
    trunk: Trunk,
    mu_head: LinearLayer,
    logvar_head: LinearLayer,
}

impl InferenceNet {
    /// `frame_count` is the full video length: context frames + targets.
    pub fn new(cfg: &PredictorConfig, frame_count: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if frame_count == 0 {
            return Err(Error::Config("inference net needs at least one frame".into()));
        }
        let mut params = Params::new();
        let in_ch = frame_count * cfg.frame_channels();
        let trunk = Trunk::new(&mut params, "trunk", in_ch, &cfg.widths, cfg.spatial(), cfg.code_dim, rng)?;
        let mu_head = LinearLayer::new(&mut params, "mu", cfg.code_dim, cfg.latent_dim, rng);
        let logvar_head = LinearLayer::new(&mut params, "logvar", cfg.code_dim, cfg.latent_dim, rng);
        Ok(InferenceNet {
            params,
            frame_count,
            latent_dim: cfg.latent_dim,
            trunk,
            mu_head,
            logvar_head,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        self.params.bind(tape, trainable)
    }

    /// `(mu, log_variance)` nodes from the whole video.
    pub fn posterior(&self, tape: &mut Tape, bound: &Bound, video: &[TensorId]) -> Result<(TensorId, TensorId)> {
        if video.len() != self.frame_count {
            return Err(Error::shape(
                "infer_posterior",
                format!("{} frames, expected {}", video.len(), self.frame_count),
            ));
        }
        let x = tape.concat(video, 0)?;
        let h = self.trunk.forward(tape, bound, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let mu = self.mu_head.forward(tape, bound, h)?;
        let logvar = self.logvar_head.forward(tape, bound, h)?;
        // keep the variance in a numerically sane band
        let logvar = tape.clamp(logvar, -10.0, 10.0)?;
        Ok((mu, logvar))
    }

    /// Value-level posterior on plain tensors.
    pub fn infer_posterior(&self, video: &[&Tensor]) -> Result<LatentPosterior> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let frames = video
            .iter()
            .map(|t| tape.constant(t))
            .collect::<Result<Vec<_>>>()?;
        let (mu, logvar) = self.posterior(&mut tape, &bound, &frames)?;
        Ok(LatentPosterior {
            mean: tape.to_tensor(mu),
            log_variance: tape.to_tensor(logvar),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

/// Reparameterized sample `z = mu + exp(log_variance / 2) * noise` on the
/// tape; differentiable w.r.t. both posterior parameters.
pub fn sample_latent(tape: &mut Tape, mu: TensorId, logvar: TensorId, noise: &Tensor) -> Result<TensorId> {
    if tape.numel(mu) != noise.numel() || tape.numel(logvar) != noise.numel() {
        return Err(Error::shape(
            "sample_latent",
            format!(
                "posterior dim {} vs noise {}",
                tape.numel(mu),
                noise.numel()
            ),
        ));
    }
    let half = tape.mul_scalar(logvar, 0.5)?;
    let std = tape.exp(half)?;
    let n = tape.constant(noise)?;
    let scaled = tape.mul(std, n)?;
    tape.add(mu, scaled)
}

/// Value-level reparameterized sample from a posterior.
pub fn sample_latent_value(p: &LatentPosterior, noise: &Tensor) -> Result<Tensor> {
    if p.mean.numel() != noise.numel() || p.log_variance.numel() != noise.numel() {
        return Err(Error::shape(
            "sample_latent",
            format!("posterior dim {} vs noise {}", p.mean.numel(), noise.numel()),
        ));
    }
    let data = p
        .mean
        .data()
        .iter()
        .zip(p.log_variance.data())
        .zip(noise.data())
        .map(|((&m, &lv), &n)| m + (0.5 * lv).exp() * n)
        .collect();
    Tensor::from_vec(vec![p.mean.numel()], data)
}

#[cfg(test)]
mod tests;
