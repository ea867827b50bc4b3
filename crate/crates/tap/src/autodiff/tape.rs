use super::tensor::{warp_bilinear_into, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    RsubScalar(TensorId),
    Clamp { x: TensorId, lo: f64, hi: f64 },
    Matmul { a: TensorId, b: TensorId },
    AddBiasRows { x: TensorId, bias: TensorId },
    Conv2d { x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize },
    UpsampleNearest2(TensorId),
    LeakyRelu { x: TensorId, slope: f64 },
    Relu(TensorId),
    Tanh(TensorId),
    Sigmoid(TensorId),
    Softmax { x: TensorId, axis: usize },
    Log(TensorId),
    Exp(TensorId),
    Abs(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    MinAll { x: TensorId, argmin: usize },
    SumAxis { x: TensorId, axis: usize },
    MeanAxis { x: TensorId, axis: usize },
    MinAxis { x: TensorId, axis: usize, argmins: Vec<usize> },
    Concat { parts: Vec<TensorId>, axis: usize },
    Reshape(TensorId),
    Narrow { x: TensorId, axis: usize, start: usize },
    BilinearSample { image: TensorId, flow: TensorId },
    ChannelAffine { x: TensorId, scale: TensorId, bias: TensorId },
    MulPixelwise { x: TensorId, m: TensorId },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Execution record for one forward pass.
///
/// Nodes are stored in execution order, so the backward pass is a single
/// reverse sweep that visits each node exactly once. After [`Tape::backward`]
/// the record is cleared: leaf gradients stay readable but no further ops
/// can be gestured onto the tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor::from_vec(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape nodes are always finite and shape-consistent")
    }

    /// Gradient of the loss w.r.t. this node. Available after `backward`
    /// for nodes that required gradients.
    pub fn grad(&self, id: TensorId) -> Result<Tensor> {
        if !self.backward_done {
            return Err(Error::invalid("grad", "backward has not been run"));
        }
        match &self.grads[id.0] {
            Some(g) => Tensor::from_vec(self.nodes[id.0].shape.clone(), g.clone()),
            None => Err(Error::invalid("grad", "node did not require gradients")),
        }
    }

    /// Borrowed view of a node's gradient buffer.
    pub fn grad_slice(&self, id: TensorId) -> Option<&[f64]> {
        if !self.backward_done {
            return None;
        }
        self.grads[id.0].as_deref()
    }

    /// Distance of the recorded graph to its nearest non-differentiable
    /// point: kinks of relu/leaky-relu/abs at zero, clamp boundaries, ties
    /// in min reductions, and bilinear sample positions on the pixel grid.
    ///
    /// Finite-difference gradient checks are only a valid oracle when this
    /// is comfortably larger than the probe step.
    pub fn min_kink_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    for &v in &self.nodes[x.0].data {
                        min = min.min(v.abs());
                    }
                }
                Op::LeakyRelu { x, .. } => {
                    for &v in &self.nodes[x.0].data {
                        min = min.min(v.abs());
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for &v in &self.nodes[x.0].data {
                        min = min.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                Op::MinAll { x, .. } => {
                    min = min.min(runner_up_gap(&self.nodes[x.0].data));
                }
                Op::MinAxis { x, axis, .. } => {
                    let (outer, len, inner) = lanes(&self.nodes[x.0].shape, *axis);
                    let d = &self.nodes[x.0].data;
                    for o in 0..outer {
                        for i in 0..inner {
                            let lane: Vec<f64> = (0..len).map(|k| d[o * len * inner + k * inner + i]).collect();
                            min = min.min(runner_up_gap(&lane));
                        }
                    }
                }
                Op::BilinearSample { image, flow } => {
                    let si = &self.nodes[image.0].shape;
                    let (h, w) = (si[1], si[2]);
                    let f = &self.nodes[flow.0].data;
                    let plane = h * w;
                    for y in 0..h {
                        for x in 0..w {
                            let p = y * w + x;
                            for (axis, dim) in [(0usize, w), (1, h)] {
                                let coord = if axis == 0 { x } else { y } as f64;
                                let pos = coord + f[axis * plane + p];
                                if pos < 0.0 || pos > (dim - 1) as f64 {
                                    // clamped region is flat; only the boundary kinks
                                    min = min.min((pos.abs()).min((pos - (dim - 1) as f64).abs()));
                                } else {
                                    let frac = pos - pos.floor();
                                    min = min.min(frac.min(1.0 - frac));
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        min
    }

    // ── node construction ────────────────────────────────────────────

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Result<TensorId> {
        if self.backward_done {
            return Err(Error::invalid(op_name, "tape already consumed by backward"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers a tensor as a leaf node.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<TensorId> {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<TensorId> {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<TensorId> {
        self.push("scalar", vec![1], vec![v], false, Op::Leaf)
    }

    /// Copies a node's current value into a fresh constant leaf, cutting
    /// the gradient path.
    pub fn detach(&mut self, id: TensorId) -> Result<TensorId> {
        let shape = self.nodes[id.0].shape.clone();
        let data = self.nodes[id.0].data.clone();
        self.push("detach", shape, data, false, Op::Leaf)
    }

    // ── elementwise and scalar ops ───────────────────────────────────

    fn binary_same_shape(&mut self, name: &'static str, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let req = self.requires(a) || self.requires(b);
        self.push(name, self.nodes[a.0].shape.clone(), data, req, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let req = self.requires(x);
        self.push(name, self.nodes[x.0].shape.clone(), data, req, op)
    }

    pub fn add_scalar(&mut self, x: TensorId, s: f64) -> Result<TensorId> {
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: TensorId, s: f64) -> Result<TensorId> {
        self.unary("mul_scalar", x, |v| v * s, Op::MulScalar(x, s))
    }

    /// `s - x`, elementwise.
    pub fn rsub_scalar(&mut self, x: TensorId, s: f64) -> Result<TensorId> {
        self.unary("rsub_scalar", x, |v| s - v, Op::RsubScalar(x))
    }

    /// Clamp into `[lo, hi]`; zero gradient where the input was clamped.
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> Result<TensorId> {
        self.unary("leaky_relu", x, |v| if v >= 0.0 { v } else { slope * v }, Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("ln", x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_mk_kn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let req = self.requires(a) || self.requires(b);
        self.push("matmul", vec![m, n], out, req, Op::Matmul { a, b })
    }

    /// `[m,n] + [n]` broadcast over rows.
    pub fn add_bias_rows(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[bias.0].shape);
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_bias_rows", format!("{:?} + {:?}", sx, sb)));
        }
        let (m, n) = (sx[0], sx[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[x.0].data[i * n..(i + 1) * n];
            let b = &self.nodes[bias.0].data;
            for j in 0..n {
                out[i * n + j] = row[j] + b[j];
            }
        }
        let req = self.requires(x) || self.requires(bias);
        self.push("add_bias_rows", vec![m, n], out, req, Op::AddBiasRows { x, bias })
    }

    // ── convolution & spatial ops ────────────────────────────────────

    /// 2-D convolution: `x [Cin,H,W]`, `w [Cout,Cin,kh,kw]`, `b [Cout]`,
    /// zero padding, stride 1 or 2.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (sx, sw, sb) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape, &self.nodes[b.0].shape);
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 || sw[1] != sx[0] || sb[0] != sw[0] {
            return Err(Error::shape("conv2d", format!("x {:?}, w {:?}, b {:?}", sx, sw, sb)));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let dims = ConvDims::new(sx[0], sx[1], sx[2], sw[0], sw[2], sw[3], stride, pad)?;
        let mut out = vec![0.0; dims.co * dims.ho * dims.wo];
        conv2d_forward(&self.nodes[x.0].data, &self.nodes[w.0].data, &self.nodes[b.0].data, &dims, &mut out);
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(
            "conv2d",
            vec![dims.co, dims.ho, dims.wo],
            out,
            req,
            Op::Conv2d { x, w, b, stride, pad },
        )
    }

    /// Nearest-neighbor 2x upsampling of `[C,H,W]`.
    pub fn upsample_nearest2(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 3 {
            return Err(Error::shape("upsample_nearest2", format!("{:?}", sx)));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        let xin = &self.nodes[x.0].data;
        for ch in 0..c {
            for y in 0..2 * h {
                let src_row = &xin[(ch * h + y / 2) * w..][..w];
                let dst = &mut out[(ch * 2 * h + y) * 2 * w..][..2 * w];
                for xo in 0..2 * w {
                    dst[xo] = src_row[xo / 2];
                }
            }
        }
        let req = self.requires(x);
        self.push("upsample_nearest2", vec![c, 2 * h, 2 * w], out, req, Op::UpsampleNearest2(x))
    }

    /// Differentiable bilinear warp; see [`super::warp_bilinear`] for the
    /// coordinate convention.
    pub fn bilinear_sample(&mut self, image: TensorId, flow: TensorId) -> Result<TensorId> {
        let (si, sf) = (&self.nodes[image.0].shape, &self.nodes[flow.0].shape);
        if si.len() != 3 || sf.len() != 3 || sf[0] != 2 || sf[1] != si[1] || sf[2] != si[2] {
            return Err(Error::shape("bilinear_sample", format!("image {:?}, flow {:?}", si, sf)));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let mut out = vec![0.0; c * h * w];
        warp_bilinear_into(&self.nodes[image.0].data, &self.nodes[flow.0].data, c, h, w, &mut out);
        let req = self.requires(image) || self.requires(flow);
        self.push("bilinear_sample", vec![c, h, w], out, req, Op::BilinearSample { image, flow })
    }

    /// Per-channel affine `x[c,..] * scale[c] + bias[c]` for `[C,..]` input.
    pub fn channel_affine(&mut self, x: TensorId, scale: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, ss, sb) = (&self.nodes[x.0].shape, &self.nodes[scale.0].shape, &self.nodes[bias.0].shape);
        if sx.is_empty() || ss.len() != 1 || sb.len() != 1 || ss[0] != sx[0] || sb[0] != sx[0] {
            return Err(Error::shape("channel_affine", format!("x {:?}, scale {:?}, bias {:?}", sx, ss, sb)));
        }
        let c = sx[0];
        let plane = self.nodes[x.0].data.len() / c;
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            let s = self.nodes[scale.0].data[ch];
            let b = self.nodes[bias.0].data[ch];
            let src = &self.nodes[x.0].data[ch * plane..][..plane];
            let dst = &mut out[ch * plane..][..plane];
            for i in 0..plane {
                dst[i] = src[i] * s + b;
            }
        }
        let req = self.requires(x) || self.requires(scale) || self.requires(bias);
        self.push("channel_affine", sx.clone(), out, req, Op::ChannelAffine { x, scale, bias })
    }

    /// `x [C,H,W] * m [1,H,W]` with the mask broadcast across channels.
    pub fn mul_pixelwise(&mut self, x: TensorId, m: TensorId) -> Result<TensorId> {
        let (sx, sm) = (&self.nodes[x.0].shape, &self.nodes[m.0].shape);
        let plane: usize = sx.iter().skip(1).product();
        if sx.len() != 3 || self.nodes[m.0].data.len() != plane {
            return Err(Error::shape("mul_pixelwise", format!("x {:?}, m {:?}", sx, sm)));
        }
        let c = sx[0];
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            let src = &self.nodes[x.0].data[ch * plane..][..plane];
            let dst = &mut out[ch * plane..][..plane];
            let mm = &self.nodes[m.0].data;
            for i in 0..plane {
                dst[i] = src[i] * mm[i];
            }
        }
        let req = self.requires(x) || self.requires(m);
        self.push("mul_pixelwise", sx.clone(), out, req, Op::MulPixelwise { x, m })
    }

    // ── softmax ──────────────────────────────────────────────────────

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let sx = self.nodes[x.0].shape.clone();
        if axis >= sx.len() {
            return Err(Error::invalid("softmax", format!("axis {} for shape {:?}", axis, sx)));
        }
        let (outer, len, inner) = lanes(&sx, axis);
        let xin = &self.nodes[x.0].data;
        let mut out = vec![0.0; xin.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(xin[base + k * inner]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (xin[base + k * inner] - mx).exp();
                    out[base + k * inner] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[base + k * inner] /= sum;
                }
            }
        }
        let req = self.requires(x);
        self.push("softmax", sx, out, req, Op::Softmax { x, axis })
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let req = self.requires(x);
        self.push("sum_all", vec![1], vec![s], req, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x.0].data.len().max(1);
        let s: f64 = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        let req = self.requires(x);
        self.push("mean_all", vec![1], vec![s], req, Op::MeanAll(x))
    }

    /// Minimum over all elements; the subgradient flows through the first
    /// occurrence of the minimum.
    pub fn min_all(&mut self, x: TensorId) -> Result<TensorId> {
        if self.nodes[x.0].data.is_empty() {
            return Err(Error::invalid("min_all", "empty tensor"));
        }
        let mut argmin = 0;
        let mut best = self.nodes[x.0].data[0];
        for (i, &v) in self.nodes[x.0].data.iter().enumerate().skip(1) {
            if v < best {
                best = v;
                argmin = i;
            }
        }
        let req = self.requires(x);
        self.push("min_all", vec![1], vec![best], req, Op::MinAll { x, argmin })
    }

    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis("sum_axis", x, axis, Reduction::Sum)
    }

    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis("mean_axis", x, axis, Reduction::Mean)
    }

    pub fn min_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis("min_axis", x, axis, Reduction::Min)
    }

    fn reduce_axis(&mut self, name: &'static str, x: TensorId, axis: usize, red: Reduction) -> Result<TensorId> {
        let sx = self.nodes[x.0].shape.clone();
        if axis >= sx.len() {
            return Err(Error::invalid(name, format!("axis {} for shape {:?}", axis, sx)));
        }
        let (outer, len, inner) = lanes(&sx, axis);
        if len == 0 {
            return Err(Error::invalid(name, "reduction over empty axis"));
        }
        let xin = &self.nodes[x.0].data;
        let mut out = vec![0.0; outer * inner];
        let mut argmins = vec![0usize; if matches!(red, Reduction::Min) { outer * inner } else { 0 }];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                match red {
                    Reduction::Sum | Reduction::Mean => {
                        let mut s = 0.0;
                        for k in 0..len {
                            s += xin[base + k * inner];
                        }
                        if matches!(red, Reduction::Mean) {
                            s /= len as f64;
                        }
                        out[o * inner + i] = s;
                    }
                    Reduction::Min => {
                        let mut best = xin[base];
                        let mut arg = 0;
                        for k in 1..len {
                            let v = xin[base + k * inner];
                            if v < best {
                                best = v;
                                arg = k;
                            }
                        }
                        out[o * inner + i] = best;
                        argmins[o * inner + i] = arg;
                    }
                }
            }
        }
        let mut oshape = sx.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let req = self.requires(x);
        let op = match red {
            Reduction::Sum => Op::SumAxis { x, axis },
            Reduction::Mean => Op::MeanAxis { x, axis },
            Reduction::Min => Op::MinAxis { x, axis, argmins },
        };
        self.push(name, oshape, out, req, op)
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[x.0].shape, shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let req = self.requires(x);
        self.push("reshape", shape.to_vec(), data, req, Op::Reshape(x))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {} for shape {:?}", axis, first)));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sp = &self.nodes[p.0].shape;
            if sp.len() != first.len()
                || sp.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", sp, first)));
            }
            axis_total += sp[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = axis_total;
        let (outer, _, inner) = lanes(&oshape, axis);
        let mut out = vec![0.0; outer * axis_total * inner];
        for o in 0..outer {
            let mut off = 0;
            for &p in parts {
                let plen = self.nodes[p.0].shape[axis];
                let block = plen * inner;
                let src = &self.nodes[p.0].data[o * block..(o + 1) * block];
                out[(o * axis_total + off) * inner..][..block].copy_from_slice(src);
                off += plen;
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(
            "concat",
            oshape,
            out,
            req,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let sx = self.nodes[x.0].shape.clone();
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(Error::invalid(
                "narrow",
                format!("axis {} range {}..{} for shape {:?}", axis, start, start + len, sx),
            ));
        }
        let (outer, alen, inner) = lanes(&sx, axis);
        let mut oshape = sx.clone();
        oshape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &self.nodes[x.0].data[(o * alen + start) * inner..][..len * inner];
            out[o * len * inner..][..len * inner].copy_from_slice(src);
        }
        let req = self.requires(x);
        self.push("narrow", oshape, out, req, Op::Narrow { x, axis, start })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every node that
    /// required them become available through [`Tape::grad`]; the op record
    /// is cleared so the tape cannot be extended or replayed.
    /// Reverse sweep from a scalar loss. Gradients of every node that
    /// required them become available through [`Tape::grad`]; the op record
    /// is cleared so the tape cannot be extended or replayed.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid("backward", "double backward is not supported"));
        }
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "empty tape"));
        }
        if self.numel(loss) != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = self
            .nodes
            .iter()
            .map(|n| if n.requires_grad { Some(vec![0.0; n.data.len()]) } else { None })
            .collect();
        if let Some(g) = &mut grads[loss.0] {
            g[0] = 1.0;
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !gout.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            propagate(&self.nodes, &mut grads, idx, &gout)?;
            grads[idx] = Some(gout);
        }

        self.grads = grads;
        self.backward_done = true;
        // Drop the op record; node values and gradients stay readable.
        for n in &mut self.nodes {
            n.op = Op::Leaf;
        }
        Ok(())
    }
}

/// Adds the upstream gradient contribution into `id`'s buffer, if that
/// node tracks gradients.
#[inline]
fn acc(grads: &mut [Option<Vec<f64>>], id: TensorId, f: impl FnOnce(&mut [f64])) {
    if let Some(g) = grads[id.0].as_deref_mut() {
        f(g);
    }
}

#[inline]
fn wants(grads: &[Option<Vec<f64>>], id: TensorId) -> bool {
    grads[id.0].is_some()
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, gout: &[f64]) -> Result<()> {
    let data = |id: TensorId| -> &[f64] { &nodes[id.0].data };
    let shape = |id: TensorId| -> &[usize] { &nodes[id.0].shape };
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, *a, |g| axpy(g, gout, 1.0));
            acc(grads, *b, |g| axpy(g, gout, 1.0));
        }
        Op::Sub(a, b) => {
            acc(grads, *a, |g| axpy(g, gout, 1.0));
            acc(grads, *b, |g| axpy(g, gout, -1.0));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (data(*a), data(*b));
            acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * bv[i];
                }
            });
            acc(grads, *b, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * av[i];
                }
            });
        }
        Op::AddScalar(x) => acc(grads, *x, |g| axpy(g, gout, 1.0)),
        Op::MulScalar(x, s) => {
            let s = *s;
            acc(grads, *x, |g| axpy(g, gout, s));
        }
        Op::RsubScalar(x) => acc(grads, *x, |g| axpy(g, gout, -1.0)),
        Op::Clamp { x, lo, hi } => {
            let xv = data(*x);
            let (lo, hi) = (*lo, *hi);
            acc(grads, *x, |g| {
                for i in 0..g.len() {
                    if xv[i] >= lo && xv[i] <= hi {
                        g[i] += gout[i];
                    }
                }
            });
        }
        Op::LeakyRelu { x, slope } => {
            let xv = data(*x);
            let slope = *slope;
            acc(grads, *x, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * if xv[i] >= 0.0 { 1.0 } else { slope };
                }
            });
        }
        Op::Relu(x) => {
            let xv = data(*x);
            acc(grads, *x, |g| {
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        g[i] += gout[i];
                    }
                }
            });
        }
        Op::Tanh(x) => {
            let yv = &nodes[idx].data;
            acc(grads, *x, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * (1.0 - yv[i] * yv[i]);
                }
            });
        }
        Op::Sigmoid(x) => {
            let yv = &nodes[idx].data;
            acc(grads, *x, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * yv[i] * (1.0 - yv[i]);
                }
            });
        }
        Op::Log(x) => {
            let xv = data(*x);
            acc(grads, *x, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] / xv[i];
                }
            });
        }
        Op::Exp(x) => {
            let yv = &nodes[idx].data;
            acc(grads, *x, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * yv[i];
                }
            });
        }
        Op::Abs(x) => {
            let xv = data(*x);
            acc(grads, *x, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * sign(xv[i]);
                }
            });
        }
        Op::Matmul { a, b } => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            let (av, bv) = (data(*a), data(*b));
            acc(grads, *a, |g| {
                // dA = dC x B^T
                for i in 0..m {
                    let dcrow = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += dcrow[j] * brow[j];
                        }
                        g[i * k + p] += s;
                    }
                }
            });
            acc(grads, *b, |g| {
                // dB = A^T x dC
                for i in 0..m {
                    let dcrow = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip != 0.0 {
                            let grow = &mut g[p * n..(p + 1) * n];
                            for j in 0..n {
                                grow[j] += aip * dcrow[j];
                            }
                        }
                    }
                }
            });
        }
        Op::AddBiasRows { x, bias } => {
            let n = nodes[bias.0].data.len();
            acc(grads, *x, |g| axpy(g, gout, 1.0));
            acc(grads, *bias, |g| {
                for (i, &v) in gout.iter().enumerate() {
                    g[i % n] += v;
                }
            });
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let sx = shape(*x);
            let sw = shape(*w);
            let dims = ConvDims::new(sx[0], sx[1], sx[2], sw[0], sw[2], sw[3], *stride, *pad)?;
            acc(grads, *b, |g| {
                let per = dims.ho * dims.wo;
                for oc in 0..dims.co {
                    g[oc] += gout[oc * per..(oc + 1) * per].iter().sum::<f64>();
                }
            });
            let xv = data(*x);
            acc(grads, *w, |g| conv2d_backward_w(xv, gout, &dims, g));
            let wv = data(*w);
            acc(grads, *x, |g| conv2d_backward_x(wv, gout, &dims, g));
        }
        Op::UpsampleNearest2(x) => {
            let sx = shape(*x);
            let (c, h, w) = (sx[0], sx[1], sx[2]);
            acc(grads, *x, |g| {
                for ch in 0..c {
                    for y in 0..2 * h {
                        let grow = &gout[(ch * 2 * h + y) * 2 * w..][..2 * w];
                        let dst = &mut g[(ch * h + y / 2) * w..][..w];
                        for xo in 0..2 * w {
                            dst[xo / 2] += grow[xo];
                        }
                    }
                }
            });
        }
        Op::Softmax { x, axis } => {
            let oshape = &nodes[idx].shape;
            let (outer, len, inner) = lanes(oshape, *axis);
            let yv = &nodes[idx].data;
            acc(grads, *x, |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for k in 0..len {
                            let p = base + k * inner;
                            dot += gout[p] * yv[p];
                        }
                        for k in 0..len {
                            let p = base + k * inner;
                            g[p] += yv[p] * (gout[p] - dot);
                        }
                    }
                }
            });
        }
        Op::SumAll(x) => {
            let v = gout[0];
            acc(grads, *x, |g| {
                for gi in g.iter_mut() {
                    *gi += v;
                }
            });
        }
        Op::MeanAll(x) => {
            let n = nodes[x.0].data.len().max(1);
            let v = gout[0] / n as f64;
            acc(grads, *x, |g| {
                for gi in g.iter_mut() {
                    *gi += v;
                }
            });
        }
        Op::MinAll { x, argmin } => {
            let v = gout[0];
            let argmin = *argmin;
            acc(grads, *x, |g| g[argmin] += v);
        }
        Op::SumAxis { x, axis } => {
            let sx = shape(*x);
            let (outer, len, inner) = lanes(sx, *axis);
            acc(grads, *x, |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let v = gout[o * inner + i];
                        for k in 0..len {
                            g[o * len * inner + k * inner + i] += v;
                        }
                    }
                }
            });
        }
        Op::MeanAxis { x, axis } => {
            let sx = shape(*x);
            let (outer, len, inner) = lanes(sx, *axis);
            acc(grads, *x, |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let v = gout[o * inner + i] / len as f64;
                        for k in 0..len {
                            g[o * len * inner + k * inner + i] += v;
                        }
                    }
                }
            });
        }
        Op::MinAxis { x, axis, argmins } => {
            let sx = shape(*x);
            let (outer, len, inner) = lanes(sx, *axis);
            acc(grads, *x, |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let k = argmins[o * inner + i];
                        g[o * len * inner + k * inner + i] += gout[o * inner + i];
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let oshape = &nodes[idx].shape;
            let (outer, alen, inner) = lanes(oshape, *axis);
            let mut off = 0;
            for &p in parts {
                let plen = nodes[p.0].shape[*axis];
                let block = plen * inner;
                let start = off;
                acc(grads, p, |g| {
                    for o in 0..outer {
                        let src = &gout[(o * alen + start) * inner..][..block];
                        let dst = &mut g[o * block..][..block];
                        for i in 0..block {
                            dst[i] += src[i];
                        }
                    }
                });
                off += plen;
            }
        }
        Op::Reshape(x) => acc(grads, *x, |g| axpy(g, gout, 1.0)),
        Op::Narrow { x, axis, start } => {
            let sx = shape(*x);
            let (outer, alen, inner) = lanes(sx, *axis);
            let len = nodes[idx].shape[*axis];
            let start = *start;
            acc(grads, *x, |g| {
                for o in 0..outer {
                    let src = &gout[o * len * inner..][..len * inner];
                    let dst = &mut g[(o * alen + start) * inner..][..len * inner];
                    for i in 0..len * inner {
                        dst[i] += src[i];
                    }
                }
            });
        }
        Op::BilinearSample { image, flow } => {
            let si = shape(*image);
            let (c, h, w) = (si[0], si[1], si[2]);
            let need_img = wants(grads, *image);
            let need_flow = wants(grads, *flow);
            let mut gimg = vec![0.0; if need_img { c * h * w } else { 0 }];
            let mut gflow = vec![0.0; if need_flow { 2 * h * w } else { 0 }];
            bilinear_backward(
                data(*image),
                data(*flow),
                gout,
                c,
                h,
                w,
                need_img.then_some(&mut gimg),
                need_flow.then_some(&mut gflow),
            );
            acc(grads, *image, |g| axpy(g, &gimg, 1.0));
            acc(grads, *flow, |g| axpy(g, &gflow, 1.0));
        }
        Op::ChannelAffine { x, scale, bias } => {
            let c = shape(*x)[0];
            let plane = nodes[x.0].data.len() / c;
            let sv = data(*scale);
            let xv = data(*x);
            acc(grads, *x, |g| {
                for ch in 0..c {
                    let s = sv[ch];
                    let go = &gout[ch * plane..][..plane];
                    let dst = &mut g[ch * plane..][..plane];
                    for i in 0..plane {
                        dst[i] += go[i] * s;
                    }
                }
            });
            acc(grads, *scale, |g| {
                for ch in 0..c {
                    let go = &gout[ch * plane..][..plane];
                    let xr = &xv[ch * plane..][..plane];
                    let mut s = 0.0;
                    for i in 0..plane {
                        s += go[i] * xr[i];
                    }
                    g[ch] += s;
                }
            });
            acc(grads, *bias, |g| {
                for ch in 0..c {
                    g[ch] += gout[ch * plane..][..plane].iter().sum::<f64>();
                }
            });
        }
        Op::MulPixelwise { x, m } => {
            let c = shape(*x)[0];
            let plane = nodes[x.0].data.len() / c;
            let mv = data(*m);
            let xv = data(*x);
            acc(grads, *x, |g| {
                for ch in 0..c {
                    let go = &gout[ch * plane..][..plane];
                    let dst = &mut g[ch * plane..][..plane];
                    for i in 0..plane {
                        dst[i] += go[i] * mv[i];
                    }
                }
            });
            acc(grads, *m, |g| {
                for ch in 0..c {
                    let go = &gout[ch * plane..][..plane];
                    let xr = &xv[ch * plane..][..plane];
                    for i in 0..plane {
                        g[i] += go[i] * xr[i];
                    }
                }
            });
        }
    }
    Ok(())
}

// ── kernels ──────────────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for i in 0..dst.len() {
        dst[i] += a * src[i];
    }
}

/// Gap between the smallest and second-smallest values (tie distance of a
/// min reduction); infinite for single-element lanes.
fn runner_up_gap(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::INFINITY;
    }
    let mut best = f64::INFINITY;
    let mut second = f64::INFINITY;
    for &v in values {
        if v < best {
            second = best;
            best = v;
        } else if v < second {
            second = v;
        }
    }
    second - best
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_mk_kn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    #[allow(clippy::too_many_arguments)]
    fn new(ci: usize, h: usize, w: usize, co: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvDims { ci, h, w, co, kh, kw, stride, pad, ho, wo })
    }

}

/// Copies `[C,H,W]` into a zero-padded `[C,H+2p,W+2p]` buffer.
fn pad_input(x: &[f64], ci: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut xp = vec![0.0; ci * hp * wp];
    for c in 0..ci {
        for y in 0..h {
            let src = &x[(c * h + y) * w..][..w];
            let dst = &mut xp[(c * hp + y + pad) * wp + pad..][..w];
            dst.copy_from_slice(src);
        }
    }
    xp
}

/// Patch matrix transposed for long inner loops: `pt[k][p]` holds the
/// input value under kernel offset `k = (ic, ky, kx)` at output position
/// `p = oy * wo + ox`.
fn im2col_t(xp: &[f64], d: &ConvDims) -> Vec<f64> {
    let (hp, wp) = (d.h + 2 * d.pad, d.w + 2 * d.pad);
    let howo = d.ho * d.wo;
    let cikk = d.ci * d.kh * d.kw;
    let mut pt = vec![0.0; cikk * howo];
    let mut k = 0;
    for ic in 0..d.ci {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let dst_base = k * howo;
                for oy in 0..d.ho {
                    let xrow = &xp[(ic * hp + oy * d.stride + ky) * wp..][..wp];
                    let dst = &mut pt[dst_base + oy * d.wo..][..d.wo];
                    if d.stride == 1 {
                        dst.copy_from_slice(&xrow[kx..kx + d.wo]);
                    } else {
                        for (ox, v) in dst.iter_mut().enumerate() {
                            *v = xrow[ox * d.stride + kx];
                        }
                    }
                }
                k += 1;
            }
        }
    }
    pt
}

/// Four-accumulator dot product; fixed association keeps results
/// deterministic while letting the loop vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..n {
        s += a[j] * b[j];
    }
    s
}

fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims, out: &mut [f64]) {
    let xp = pad_input(x, d.ci, d.h, d.w, d.pad);
    let pt = im2col_t(&xp, d);
    let howo = d.ho * d.wo;
    let cikk = d.ci * d.kh * d.kw;
    for oc in 0..d.co {
        let orow = &mut out[oc * howo..][..howo];
        orow.fill(b[oc]);
        for k in 0..cikk {
            let wv = w[oc * cikk + k];
            if wv != 0.0 {
                axpy(orow, &pt[k * howo..][..howo], wv);
            }
        }
    }
}

fn conv2d_backward_w(x: &[f64], dy: &[f64], d: &ConvDims, dw: &mut [f64]) {
    let xp = pad_input(x, d.ci, d.h, d.w, d.pad);
    let pt = im2col_t(&xp, d);
    let howo = d.ho * d.wo;
    let cikk = d.ci * d.kh * d.kw;
    for oc in 0..d.co {
        let dyrow = &dy[oc * howo..][..howo];
        for k in 0..cikk {
            dw[oc * cikk + k] += dot(dyrow, &pt[k * howo..][..howo]);
        }
    }
}

fn conv2d_backward_x(w: &[f64], dy: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let (hp, wp) = (d.h + 2 * d.pad, d.w + 2 * d.pad);
    let howo = d.ho * d.wo;
    let cikk = d.ci * d.kh * d.kw;
    // gradient w.r.t. the patch matrix, then scatter back onto the image
    let mut dpt = vec![0.0; cikk * howo];
    for oc in 0..d.co {
        let dyrow = &dy[oc * howo..][..howo];
        for k in 0..cikk {
            let wv = w[oc * cikk + k];
            if wv != 0.0 {
                axpy(&mut dpt[k * howo..][..howo], dyrow, wv);
            }
        }
    }
    let mut dxp = vec![0.0; d.ci * hp * wp];
    let mut k = 0;
    for ic in 0..d.ci {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                for oy in 0..d.ho {
                    let src = &dpt[k * howo + oy * d.wo..][..d.wo];
                    let xrow = &mut dxp[(ic * hp + oy * d.stride + ky) * wp..][..wp];
                    if d.stride == 1 {
                        let dst = &mut xrow[kx..kx + d.wo];
                        for i in 0..d.wo {
                            dst[i] += src[i];
                        }
                    } else {
                        for (ox, &v) in src.iter().enumerate() {
                            xrow[ox * d.stride + kx] += v;
                        }
                    }
                }
                k += 1;
            }
        }
    }
    for c in 0..d.ci {
        for y in 0..d.h {
            let src = &dxp[(c * hp + y + d.pad) * wp + d.pad..][..d.w];
            let dst = &mut dx[(c * d.h + y) * d.w..][..d.w];
            for i in 0..d.w {
                dst[i] += src[i];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bilinear_backward(
    image: &[f64],
    flow: &[f64],
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    mut dimg: Option<&mut Vec<f64>>,
    mut dflow: Option<&mut Vec<f64>>,
) {
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let raw_x = x as f64 + flow[p];
            let raw_y = y as f64 + flow[plane + p];
            let sx = raw_x.clamp(0.0, (w - 1) as f64);
            let sy = raw_y.clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ax = sx - x0 as f64;
            let ay = sy - y0 as f64;
            // Clamped coordinates have zero derivative w.r.t. the flow.
            let x_active = raw_x > 0.0 && raw_x < (w - 1) as f64;
            let y_active = raw_y > 0.0 && raw_y < (h - 1) as f64;
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ch in 0..c {
                let base = ch * plane;
                let g = dy[base + p];
                if g == 0.0 {
                    continue;
                }
                let v00 = image[base + y0 * w + x0];
                let v01 = image[base + y0 * w + x1];
                let v10 = image[base + y1 * w + x0];
                let v11 = image[base + y1 * w + x1];
                if let Some(di) = dimg.as_deref_mut() {
                    di[base + y0 * w + x0] += g * (1.0 - ay) * (1.0 - ax);
                    di[base + y0 * w + x1] += g * (1.0 - ay) * ax;
                    di[base + y1 * w + x0] += g * ay * (1.0 - ax);
                    di[base + y1 * w + x1] += g * ay * ax;
                }
                gx += g * ((1.0 - ay) * (v01 - v00) + ay * (v11 - v10));
                gy += g * ((1.0 - ax) * (v10 - v00) + ax * (v11 - v01));
            }
            if let Some(df) = dflow.as_deref_mut() {
                if x_active {
                    df[p] += gx;
                }
                if y_active {
                    df[plane + p] += gy;
                }
            }
        }
    }
}

enum Reduction {
    Sum,
    Mean,
    Min,
}
