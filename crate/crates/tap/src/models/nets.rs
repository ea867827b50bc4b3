//! Parameter storage and the shared conv trunk / decoder blocks.

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::{Error, Result};
use rand::Rng;

/// Ordered, named parameter set of one network.
///
/// Order is fixed at construction and shared by checkpoints and the
/// optimizer, so runs with equal seeds produce byte-identical artifacts.
#[derive(Debug, Clone)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Params { entries: Vec::new() }
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces every tensor with same-shaped values from `other`, matching
    /// by name (checkpoint loading).
    pub fn load_from(&mut self, other: &Params) -> Result<()> {
        for (name, tensor) in &mut self.entries {
            let src = other.by_name(name).ok_or_else(|| {
                Error::Data(format!("checkpoint missing parameter {:?}", name))
            })?;
            if src.shape() != tensor.shape() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {:?} has shape {:?}, expected {:?}",
                    name,
                    src.shape(),
                    tensor.shape()
                )));
            }
            *tensor = src.clone();
        }
        Ok(())
    }

    /// Registers every parameter on a tape, in order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { ids })
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape bindings of a [`Params`] set, aligned with its entry order.
pub struct Bound {
    pub(crate) ids: Vec<TensorId>,
}

impl Bound {
    /// Binds an explicit id list (parameter-surgery tests and demos).
    pub fn from_ids(ids: Vec<TensorId>) -> Self {
        Bound { ids }
    }

    pub fn id(&self, idx: usize) -> TensorId {
        self.ids[idx]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

// ── layers ───────────────────────────────────────────────────────────

pub(crate) struct ConvLayer {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        params: &mut Params,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let w = params.add(format!("{prefix}.w"), Tensor::randn(&[out_ch, in_ch, k, k], std, rng));
        let b = params.add(format!("{prefix}.b"), Tensor::zeros(&[out_ch]));
        ConvLayer { w, b, stride, pad }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, bound: &Bound, x: TensorId) -> Result<TensorId> {
        tape.conv2d(x, bound.id(self.w), bound.id(self.b), self.stride, self.pad)
    }
}

/// Learnable per-channel scale and bias, the batch-norm stand-in.
pub(crate) struct AffineLayer {
    scale: usize,
    bias: usize,
}

impl AffineLayer {
    pub(crate) fn new(params: &mut Params, prefix: &str, channels: usize) -> Self {
        let scale = params.add(format!("{prefix}.scale"), Tensor::full(&[channels], 1.0));
        let bias = params.add(format!("{prefix}.bias"), Tensor::zeros(&[channels]));
        AffineLayer { scale, bias }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, bound: &Bound, x: TensorId) -> Result<TensorId> {
        tape.channel_affine(x, bound.id(self.scale), bound.id(self.bias))
    }
}

pub(crate) struct LinearLayer {
    w: usize,
    b: usize,
    pub(crate) out_dim: usize,
}

impl LinearLayer {
    pub(crate) fn new(params: &mut Params, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let w = params.add(format!("{prefix}.w"), Tensor::randn(&[in_dim, out_dim], std, rng));
        let b = params.add(format!("{prefix}.b"), Tensor::zeros(&[out_dim]));
        LinearLayer { w, b, out_dim }
    }

    /// `[in] -> [out]` on a flat vector.
    pub(crate) fn forward(&self, tape: &mut Tape, bound: &Bound, x: TensorId) -> Result<TensorId> {
        let n = tape.numel(x);
        let row = tape.reshape(x, &[1, n])?;
        let y = tape.matmul(row, bound.id(self.w))?;
        let y = tape.add_bias_rows(y, bound.id(self.b))?;
        tape.reshape(y, &[self.out_dim])
    }
}

// ── conv trunk ───────────────────────────────────────────────────────

/// Strided conv stack shared by the predictor encoder, the discriminators,
/// and the inference network: 4x4 stride-2 convs with per-channel affine
/// and leaky ReLU, then a linear head on the flattened features.
pub(crate) struct Trunk {
    convs: Vec<ConvLayer>,
    affines: Vec<AffineLayer>,
    head: LinearLayer,
}

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

impl Trunk {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        params: &mut Params,
        prefix: &str,
        in_ch: usize,
        widths: &[usize],
        spatial: (usize, usize),
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("conv widths must be non-empty".into()));
        }
        let mut convs = Vec::new();
        let mut affines = Vec::new();
        let mut ch = in_ch;
        let (mut h, mut w) = spatial;
        for (i, &width) in widths.iter().enumerate() {
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "frame {}x{} too small for {} conv stages",
                    spatial.0,
                    spatial.1,
                    widths.len()
                )));
            }
            convs.push(ConvLayer::new(params, &format!("{prefix}.conv{i}"), ch, width, 4, 2, 1, rng));
            affines.push(AffineLayer::new(params, &format!("{prefix}.affine{i}"), width));
            ch = width;
            h /= 2;
            w /= 2;
        }
        let flat = ch * h * w;
        let head = LinearLayer::new(params, &format!("{prefix}.head"), flat, out_dim, rng);
        Ok(Trunk { convs, affines, head })
    }

    /// `[C,H,W] -> [out_dim]`, linear head output (no final activation).
    pub(crate) fn forward(&self, tape: &mut Tape, bound: &Bound, x: TensorId) -> Result<TensorId> {
        let mut h = x;
        for (conv, affine) in self.convs.iter().zip(&self.affines) {
            h = conv.forward(tape, bound, h)?;
            h = affine.forward(tape, bound, h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        self.head.forward(tape, bound, h)
    }
}

// ── decoder ──────────────────────────────────────────────────────────

/// Upsampling decoder: linear from the code to the smallest feature map,
/// then nearest-upsample + 3x3 conv stages mirroring the encoder widths,
/// and a final conv to the requested channel count (no activation).
pub(crate) struct Decoder {
    fc: LinearLayer,
    start_shape: (usize, usize, usize),
    convs: Vec<ConvLayer>,
    affines: Vec<AffineLayer>,
    out: ConvLayer,
}

impl Decoder {
    pub(crate) fn new(
        params: &mut Params,
        prefix: &str,
        in_dim: usize,
        widths: &[usize],
        spatial: (usize, usize),
        out_ch: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stages = widths.len();
        let s0 = (spatial.0 >> stages, spatial.1 >> stages);
        if s0.0 == 0 || s0.1 == 0 {
            return Err(Error::Config(format!(
                "frame {}x{} too small for {} decoder stages",
                spatial.0, spatial.1, stages
            )));
        }
        let top = *widths.last().expect("non-empty widths");
        let fc = LinearLayer::new(params, &format!("{prefix}.fc"), in_dim, top * s0.0 * s0.1, rng);
        let mut convs = Vec::new();
        let mut affines = Vec::new();
        let mut ch = top;
        // widths[k-1] -> widths[k-2] -> ... -> widths[0], one upsample each
        for (i, &width) in widths.iter().rev().skip(1).enumerate() {
            convs.push(ConvLayer::new(params, &format!("{prefix}.conv{i}"), ch, width, 3, 1, 1, rng));
            affines.push(AffineLayer::new(params, &format!("{prefix}.affine{i}"), width));
            ch = width;
        }
        let out = ConvLayer::new(params, &format!("{prefix}.out"), ch, out_ch, 3, 1, 1, rng);
        Ok(Decoder {
            fc,
            start_shape: (top, s0.0, s0.1),
            convs,
            affines,
            out,
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, bound: &Bound, code: TensorId) -> Result<TensorId> {
        let h = self.fc.forward(tape, bound, code)?;
        let (c0, h0, w0) = self.start_shape;
        let mut h = tape.reshape(h, &[c0, h0, w0])?;
        for (conv, affine) in self.convs.iter().zip(&self.affines) {
            h = tape.upsample_nearest2(h)?;
            h = conv.forward(tape, bound, h)?;
            h = affine.forward(tape, bound, h)?;
            h = tape.relu(h)?;
        }
        h = tape.upsample_nearest2(h)?;
        self.out.forward(tape, bound, h)
    }
}
