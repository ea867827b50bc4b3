use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense n-dimensional array of `f64` in row-major order.
///
/// This is the plain value type: model parameters, frames, and datasets are
/// `Tensor`s. Gradient tracking lives on the [`super::Tape`], which owns a
/// copy of the data per node.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that the shape matches the buffer and
    /// that every value is finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "Tensor::from_vec",
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                v * std
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-anything tensor with a single element.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Mean absolute difference against another tensor of the same shape.
    pub fn mean_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "mean_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let n = self.data.len().max(1);
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64)
    }
}

/// Pure bilinear warp of `image [C,H,W]` by `flow [2,H,W]`.
///
/// `flow[0]` holds per-pixel source x-offsets and `flow[1]` y-offsets: the
/// output pixel at (x, y) reads the source at (x + flow[0][y,x],
/// y + flow[1][y,x]). Out-of-bounds reads clamp to the border. This is the
/// same kernel the tape op uses; metrics reuse it on plain tensors.
pub fn warp_bilinear(image: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let ishape = image.shape();
    let fshape = flow.shape();
    if ishape.len() != 3 || fshape.len() != 3 || fshape[0] != 2 {
        return Err(Error::shape(
            "warp_bilinear",
            format!("image {:?}, flow {:?}", ishape, fshape),
        ));
    }
    let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
    if fshape[1] != h || fshape[2] != w {
        return Err(Error::shape(
            "warp_bilinear",
            format!("image {:?}, flow {:?}", ishape, fshape),
        ));
    }
    let mut out = vec![0.0; c * h * w];
    warp_bilinear_into(image.data(), flow.data(), c, h, w, &mut out);
    Tensor::from_vec(vec![c, h, w], out)
}

/// Shared forward kernel for [`warp_bilinear`] and the tape op.
pub(crate) fn warp_bilinear_into(image: &[f64], flow: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = (x as f64 + flow[p]).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + flow[plane + p]).clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ax = sx - x0 as f64;
            let ay = sy - y0 as f64;
            for ch in 0..c {
                let base = ch * plane;
                let v00 = image[base + y0 * w + x0];
                let v01 = image[base + y0 * w + x1];
                let v10 = image[base + y1 * w + x0];
                let v11 = image[base + y1 * w + x1];
                out[base + p] = (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) + ay * ((1.0 - ax) * v10 + ax * v11);
            }
        }
    }
}
