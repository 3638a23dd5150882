//! Dense tensors, the reverse-mode gradient tape, and the pixel optimizers.
//!
//! Everything here is deterministic by construction: reductions run in a
//! fixed order, so replaying the same inputs reproduces gradients bit for
//! bit. The element type is generic over [`Element`] (`f32` or `f64`);
//! production runs default to `f32`, oracles and gradient checks use `f64`.

mod linalg;
mod optim;
mod tape;

pub use optim::{adam_step, sgd_step, OptimKind, OptimState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{GradTape, Value};

pub(crate) use linalg::{conv2d_backward_input, conv2d_forward, gemm_nn, gemm_nt, im2col};
pub(crate) use tape::unfold_positions;

use crate::error::{Error, Result};

/// Plain-tensor convolution (zero padding, stride 1, odd square kernels).
pub fn conv2d_forward_plain<S: Element>(input: &Tensor<S>, filter: &Tensor<S>) -> Result<Tensor<S>> {
    conv2d_forward(input, filter)
}

/// Plain-tensor tile partition + unfold: `[N,C,h,w]` to `[N*gh*gw*tile*tile, C]`
/// rows, borders zero-padded.
pub fn unfold_rows_plain<S: Element>(map: &Tensor<S>, tile: usize) -> Tensor<S> {
    tape::unfold_forward(map, tile)
}

/// Epsilon inside the batch-norm denominator.
pub const BN_EPS: f64 = 1e-5;

/// Scalar element type of the engine. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;
}

impl Element for f32 {
    const NAME: &'static str = "f32";
}

impl Element for f64 {
    const NAME: &'static str = "f64";
}

/// Convert an `f64` literal into the engine element type.
#[inline]
pub fn num<S: Element>(x: f64) -> S {
    S::from_f64(x).expect("literal representable")
}

/// Widen an engine scalar to `f64` (logging, statistics).
#[inline]
pub fn wide<S: Element>(x: S) -> f64 {
    x.to_f64().expect("float widens to f64")
}

/// Dense row-major tensor. Plain value type: weights, pixels, frequency
/// matrices and other constants live here; differentiable intermediates live
/// on a [`GradTape`].
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Element> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterpret the same data under a new shape of equal element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Contract(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert elementwise into another element type (through `f64`).
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| num::<T>(wide(v))).collect(),
        }
    }

    /// Clamp every element into `[lo, hi]` in place.
    pub fn clamp_in_place(&mut self, lo: S, hi: S) {
        for v in &mut self.data {
            if *v < lo {
                *v = lo;
            } else if *v > hi {
                *v = hi;
            }
        }
    }

    /// Euclidean norm of the whole tensor, accumulated in `f64`.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|&v| wide(v) * wide(v)).sum::<f64>().sqrt()
    }
}

impl<S: Element> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", S::NAME, self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Per-channel first and second moments of a feature batch, used as frozen
/// batch-norm statistics. Means and variances are accumulated in `f64`
/// regardless of the engine element type; the variance is the biased
/// (population) estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Element> ChannelStats<S> {
    /// Compute stats over the batch and spatial axes of a `[N, C, h, w]` map.
    pub fn from_features(feat: &Tensor<S>) -> Result<Self> {
        if feat.rank() != 4 {
            return Err(Error::Contract(format!(
                "channel stats want [N,C,h,w], got {:?}",
                feat.shape()
            )));
        }
        let (n, c, h, w) = (feat.dim(0), feat.dim(1), feat.dim(2), feat.dim(3));
        let plane = h * w;
        let count = (n * plane) as f64;
        if count == 0.0 {
            return Err(Error::Contract("channel stats over empty batch".into()));
        }
        let mut mean = vec![0.0f64; c];
        let data = feat.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let mut acc = 0.0f64;
                for &v in &data[base..base + plane] {
                    acc += wide(v);
                }
                mean[ci] += acc;
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        let mut var = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let mu = mean[ci];
                let mut acc = 0.0f64;
                for &v in &data[base..base + plane] {
                    let d = wide(v) - mu;
                    acc += d * d;
                }
                var[ci] += acc;
            }
        }
        for v in &mut var {
            *v /= count;
        }
        Ok(ChannelStats {
            mean: mean.into_iter().map(num::<S>).collect(),
            var: var.into_iter().map(num::<S>).collect(),
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// The affine form of normalization with these stats: `x * scale + shift`.
    pub fn affine(&self) -> (Vec<S>, Vec<S>) {
        let mut scale = Vec::with_capacity(self.mean.len());
        let mut shift = Vec::with_capacity(self.mean.len());
        for (&m, &v) in self.mean.iter().zip(&self.var) {
            let s = 1.0 / (wide(v) + BN_EPS).sqrt();
            scale.push(num::<S>(s));
            shift.push(num::<S>(-wide(m) * s));
        }
        (scale, shift)
    }
}
