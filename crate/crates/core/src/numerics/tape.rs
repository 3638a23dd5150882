//! Reverse-mode autodiff on a Wengert tape.
//!
//! A [`GradTape`] records every operation as a node referencing earlier
//! nodes, so creation order is already a topological order. [`GradTape::backward`]
//! sweeps the tape once in reverse with fixed-order accumulation: replaying
//! the same inputs produces bit-identical gradients. Filters, frequency
//! matrices and normalization statistics enter ops as plain constants, which
//! makes "frozen weights never receive gradients" structural rather than a
//! runtime check.
//!
//! Every operation validates shapes up front and scans its output for
//! non-finite values; NaN/Inf is reported as a numeric error instead of
//! propagating silently.

use super::{num, wide, ChannelStats, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Value(usize);

struct Node<S> {
    data: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

enum Op<S> {
    Leaf { learnable: bool },
    Conv2d { input: Value, filter: Tensor<S> },
    ChannelAffine { input: Value, scale: Vec<S> },
    LeakyRelu { input: Value, slope: S },
    UnfoldRows { input: Value, tile: usize },
    SpatialMean { input: Value },
    MatMulNT { a: Value, b: Tensor<S> },
    GatherRows { input: Value, rows: Vec<usize> },
    Cos { input: Value },
    Sin { input: Value },
    MeanRows { input: Value },
    Hypot { re: Value, im: Value },
    Add { a: Value, b: Value },
    Sub { a: Value, b: Value },
    Mul { a: Value, b: Value },
    SubConst { a: Value },
    ConstSub { b: Value },
    MulConst { a: Value, b: Tensor<S> },
    AddScalar { a: Value },
    Scale { a: Value, c: S },
    Sqrt { input: Value },
    Abs { input: Value },
    Mean { input: Value },
    Sum { input: Value },
    AddWeighted { terms: Vec<(S, Value)> },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelAffine { .. } => "batch_norm",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::UnfoldRows { .. } => "unfold_rows",
            Op::SpatialMean { .. } => "spatial_mean",
            Op::MatMulNT { .. } => "matmul_nt",
            Op::GatherRows { .. } => "gather_rows",
            Op::Cos { .. } => "cos",
            Op::Sin { .. } => "sin",
            Op::MeanRows { .. } => "mean_rows",
            Op::Hypot { .. } => "hypot",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::SubConst { .. } => "sub_const",
            Op::ConstSub { .. } => "const_sub",
            Op::MulConst { .. } => "mul_const",
            Op::AddScalar { .. } => "add_scalar",
            Op::Scale { .. } => "scale",
            Op::Sqrt { .. } => "sqrt",
            Op::Abs { .. } => "abs",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::AddWeighted { .. } => "add_weighted",
        }
    }
}

/// Tile/partition index plan shared by the unfold forward and backward paths
/// and by the plain (non-tape) row extraction in the rlff module.
/// Per-sample row `r` maps to a spatial position or `None` for zero padding
/// of partial border tiles.
pub(crate) fn unfold_positions(h: usize, w: usize, tile: usize) -> (usize, usize, Vec<Option<(usize, usize)>>) {
    let gh = h.div_ceil(tile);
    let gw = w.div_ceil(tile);
    let mut map = Vec::with_capacity(gh * gw * tile * tile);
    for ty in 0..gh {
        for tx in 0..gw {
            for iy in 0..tile {
                for ix in 0..tile {
                    let (y, x) = (ty * tile + iy, tx * tile + ix);
                    map.push((y < h && x < w).then_some((y, x)));
                }
            }
        }
    }
    (gh, gw, map)
}

pub(crate) fn unfold_forward<S: Element>(input: &Tensor<S>, tile: usize) -> Tensor<S> {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (_, _, map) = unfold_positions(h, w, tile);
    let rows_per = map.len();
    let mut out = vec![S::zero(); n * rows_per * c];
    let data = input.data();
    for ni in 0..n {
        for (r, m) in map.iter().enumerate() {
            if let Some((y, x)) = m {
                let dst = &mut out[(ni * rows_per + r) * c..(ni * rows_per + r + 1) * c];
                for (ci, d) in dst.iter_mut().enumerate() {
                    *d = data[((ni * c + ci) * h + y) * w + x];
                }
            }
        }
    }
    Tensor::new(vec![n * rows_per, c], out).expect("unfold shape")
}

/// Reverse-mode gradient tape. See the module docs.
pub struct GradTape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Element> Default for GradTape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Element> GradTape<S> {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Register a learnable leaf. Its gradient is available after [`Self::backward`].
    pub fn leaf(&mut self, t: Tensor<S>) -> Value {
        self.push_node(t, true, Op::Leaf { learnable: true })
    }

    /// Register a constant. No gradient buffer is ever allocated for it.
    pub fn constant(&mut self, t: Tensor<S>) -> Value {
        self.push_node(t, false, Op::Leaf { learnable: false })
    }

    pub fn value(&self, v: Value) -> &Tensor<S> {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].data.shape()
    }

    /// Gradient of the last [`Self::backward`] loss with respect to a learnable
    /// leaf. Zero-filled if the loss did not depend on it.
    pub fn grad(&self, v: Value) -> Result<&Tensor<S>> {
        match &self.nodes[v.0].op {
            Op::Leaf { learnable: true } => self.grads[v.0]
                .as_ref()
                .ok_or_else(|| Error::Contract("grad read before backward".into())),
            _ => Err(Error::Contract("grad is only kept for learnable leaves".into())),
        }
    }

    fn push_node(&mut self, data: Tensor<S>, requires_grad: bool, op: Op<S>) -> Value {
        self.nodes.push(Node {
            data,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Value(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, data: Tensor<S>, requires_grad: bool, op: Op<S>) -> Result<Value> {
        if !data.all_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by {}", op.name())));
        }
        Ok(self.push_node(data, requires_grad, op))
    }

    fn rg(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── forward ops ──────────────────────────────────────────────────────

    /// Zero-padded same-size stride-1 convolution by a constant filter
    /// `[O, C, k, k]` with odd `k`. Differentiable w.r.t. the input only.
    pub fn conv2d(&mut self, input: Value, filter: &Tensor<S>) -> Result<Value> {
        let out = super::conv2d_forward(self.value(input), filter)?;
        let rg = self.rg(input);
        self.push_checked(
            out,
            rg,
            Op::Conv2d {
                input,
                filter: filter.clone(),
            },
        )
    }

    /// Normalize `[N, C, h, w]` features per channel with frozen statistics:
    /// `(x - mean) / sqrt(var + BN_EPS)`. No learnable affine.
    pub fn batch_norm(&mut self, input: Value, stats: &ChannelStats<S>) -> Result<Value> {
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(Error::Contract(format!("batch_norm wants [N,C,h,w], got {:?}", x.shape())));
        }
        if x.dim(1) != stats.channels() {
            return Err(Error::Contract(format!(
                "batch_norm channel mismatch: features have {}, stats have {}",
                x.dim(1),
                stats.channels()
            )));
        }
        let (scale, shift) = stats.affine();
        let (n, c, plane) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let mut out = vec![S::zero(); x.numel()];
        let data = x.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (sc, sh) = (scale[ci], shift[ci]);
                for i in base..base + plane {
                    out[i] = data[i] * sc + sh;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(input);
        self.push_checked(out, rg, Op::ChannelAffine { input, scale })
    }

    pub fn leaky_relu(&mut self, input: Value, slope: f64) -> Result<Value> {
        let slope = num::<S>(slope);
        let x = self.value(input);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| if v > S::zero() { v } else { v * slope }).collect(),
        )?;
        let rg = self.rg(input);
        self.push_checked(out, rg, Op::LeakyRelu { input, slope })
    }

    /// Partition a `[N, C, h, w]` map into non-overlapping `tile x tile` tiles
    /// (borders zero-padded) and emit one row per spatial position:
    /// `[N * ceil(h/tile) * ceil(w/tile) * tile * tile, C]`.
    pub fn unfold_rows(&mut self, input: Value, tile: usize) -> Result<Value> {
        if tile == 0 {
            return Err(Error::Config("unfold tile must be positive".into()));
        }
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(Error::Contract(format!("unfold wants [N,C,h,w], got {:?}", x.shape())));
        }
        let out = unfold_forward(x, tile);
        let rg = self.rg(input);
        self.push_checked(out, rg, Op::UnfoldRows { input, tile })
    }

    /// Mean over the spatial axes: `[N, C, h, w] -> [N, C]`.
    pub fn spatial_mean(&mut self, input: Value) -> Result<Value> {
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(Error::Contract(format!("spatial_mean wants [N,C,h,w], got {:?}", x.shape())));
        }
        let (n, c, plane) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let data = x.data();
        let mut out = vec![S::zero(); n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * plane;
            let mut acc = 0.0f64;
            for &v in &data[base..base + plane] {
                acc += wide(v);
            }
            *o = num::<S>(acc / plane as f64);
        }
        let out = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(input);
        self.push_checked(out, rg, Op::SpatialMean { input })
    }

    /// `a [R, K] x b^T` for a constant `b [T, K]`, yielding `[R, T]`.
    pub fn matmul_nt(&mut self, a: Value, b: &Tensor<S>) -> Result<Value> {
        let av = self.value(a);
        if av.rank() != 2 || b.rank() != 2 || av.dim(1) != b.dim(1) {
            return Err(Error::Contract(format!(
                "matmul_nt wants [R,K] x [T,K], got {:?} x {:?}",
                av.shape(),
                b.shape()
            )));
        }
        let (r, k, t) = (av.dim(0), av.dim(1), b.dim(0));
        let mut out = vec![S::zero(); r * t];
        super::gemm_nt(r, t, k, av.data(), b.data(), &mut out);
        let out = Tensor::new(vec![r, t], out)?;
        let rg = self.rg(a);
        self.push_checked(out, rg, Op::MatMulNT { a, b: b.clone() })
    }

    /// Select rows of a `[R, C]` matrix by index (duplicates allowed).
    pub fn gather_rows(&mut self, input: Value, rows: Vec<usize>) -> Result<Value> {
        let x = self.value(input);
        if x.rank() != 2 {
            return Err(Error::Contract(format!("gather_rows wants [R,C], got {:?}", x.shape())));
        }
        let (r, c) = (x.dim(0), x.dim(1));
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("gather_rows index {bad} out of {r} rows")));
        }
        let mut out = vec![S::zero(); rows.len() * c];
        for (dst, &src) in rows.iter().enumerate() {
            out[dst * c..(dst + 1) * c].copy_from_slice(&x.data()[src * c..(src + 1) * c]);
        }
        let out = Tensor::new(vec![rows.len(), c], out)?;
        let rg = self.rg(input);
        self.push_checked(out, rg, Op::GatherRows { input, rows })
    }

    pub fn cos(&mut self, input: Value) -> Result<Value> {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.cos()).collect())?;
        let rg = self.rg(input);
        self.push_checked(out, rg, Op::Cos { input })
    }

    pub fn sin(&mut self, input: Value) -> Result<Value> {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.sin()).collect())?;
        let rg = self.rg(input);
        self.push_checked(out, rg, Op::Sin { input })
    }

    /// Column means of a `[R, C]` matrix: `[C]`. Accumulates in `f64`.
    pub fn mean_rows(&mut self, input: Value) -> Result<Value> {
        let x = self.value(input);
        if x.rank() != 2 || x.dim(0) == 0 {
            return Err(Error::Contract(format!("mean_rows wants non-empty [R,C], got {:?}", x.shape())));
        }
        let (r, c) = (x.dim(0), x.dim(1));
        let mut acc = vec![0.0f64; c];
        for ri in 0..r {
            let row = &x.data()[ri * c..(ri + 1) * c];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += wide(v);
            }
        }
        let out = Tensor::new(vec![c], acc.into_iter().map(|a| num::<S>(a / r as f64)).collect())?;
        let rg = self.rg(input);
        self.push_checked(out, rg, Op::MeanRows { input })
    }

    /// Elementwise `sqrt(re^2 + im^2)`. The gradient at an exact zero is
    /// taken as 0 (subgradient choice; the true derivative is unbounded).
    pub fn hypot(&mut self, re: Value, im: Value) -> Result<Value> {
        let (rv, iv) = (self.value(re), self.value(im));
        if rv.shape() != iv.shape() {
            return Err(Error::Contract(format!(
                "hypot shape mismatch: {:?} vs {:?}",
                rv.shape(),
                iv.shape()
            )));
        }
        let out = Tensor::new(
            rv.shape().to_vec(),
            rv.data()
                .iter()
                .zip(iv.data())
                .map(|(&a, &b)| (a * a + b * b).sqrt())
                .collect(),
        )?;
        let rg = self.rg(re) || self.rg(im);
        self.push_checked(out, rg, Op::Hypot { re, im })
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.zip_elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_elementwise(&mut self, a: Value, b: Value, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Value> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Contract(format!(
                "{} shape mismatch: {:?} vs {:?}",
                op.name(),
                av.shape(),
                bv.shape()
            )));
        }
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        )?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(out, rg, op)
    }

    /// `a - b` for a constant `b` of the same shape.
    pub fn sub_const(&mut self, a: Value, b: &Tensor<S>) -> Result<Value> {
        let av = self.value(a);
        if av.shape() != b.shape() {
            return Err(Error::Contract(format!(
                "sub_const shape mismatch: {:?} vs {:?}",
                av.shape(),
                b.shape()
            )));
        }
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect(),
        )?;
        let rg = self.rg(a);
        self.push_checked(out, rg, Op::SubConst { a })
    }

    /// `a - b` for a constant `a` of the same shape.
    pub fn const_sub(&mut self, a: &Tensor<S>, b: Value) -> Result<Value> {
        let bv = self.value(b);
        if a.shape() != bv.shape() {
            return Err(Error::Contract(format!(
                "const_sub shape mismatch: {:?} vs {:?}",
                a.shape(),
                bv.shape()
            )));
        }
        let out = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect(),
        )?;
        let rg = self.rg(b);
        self.push_checked(out, rg, Op::ConstSub { b })
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Value, b: &Tensor<S>) -> Result<Value> {
        let av = self.value(a);
        if av.shape() != b.shape() {
            return Err(Error::Contract(format!(
                "mul_const shape mismatch: {:?} vs {:?}",
                av.shape(),
                b.shape()
            )));
        }
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
        )?;
        let rg = self.rg(a);
        self.push_checked(out, rg, Op::MulConst { a, b: b.clone() })
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Result<Value> {
        let cv = num::<S>(c);
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x + cv).collect())?;
        let rg = self.rg(a);
        self.push_checked(out, rg, Op::AddScalar { a })
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Result<Value> {
        let cv = num::<S>(c);
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * cv).collect())?;
        let rg = self.rg(a);
        self.push_checked(out, rg, Op::Scale { a, c: cv })
    }

    /// Elementwise square root. The gradient at an exact zero is taken as 0.
    pub fn sqrt(&mut self, input: Value) -> Result<Value> {
        let x = self.value(input);
        if x.data().iter().any(|&v| v < S::zero()) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.sqrt()).collect())?;
        let rg = self.rg(input);
        self.push_checked(out, rg, Op::Sqrt { input })
    }

    /// Elementwise absolute value; subgradient 0 at zero.
    pub fn abs(&mut self, input: Value) -> Result<Value> {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.abs()).collect())?;
        let rg = self.rg(input);
        self.push_checked(out, rg, Op::Abs { input })
    }

    /// Mean of all elements, as a `[1]` scalar. Accumulates in `f64`.
    pub fn mean(&mut self, input: Value) -> Result<Value> {
        let x = self.value(input);
        if x.numel() == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let acc: f64 = x.data().iter().map(|&v| wide(v)).sum();
        let out = Tensor::scalar(num::<S>(acc / x.numel() as f64));
        let rg = self.rg(input);
        self.push_checked(out, rg, Op::Mean { input })
    }

    /// Sum of all elements, as a `[1]` scalar. Accumulates in `f64`.
    pub fn sum(&mut self, input: Value) -> Result<Value> {
        let x = self.value(input);
        let acc: f64 = x.data().iter().map(|&v| wide(v)).sum();
        let out = Tensor::scalar(num::<S>(acc));
        let rg = self.rg(input);
        self.push_checked(out, rg, Op::Sum { input })
    }

    /// Weighted elementwise sum `Σ w_i * x_i` over same-shape values.
    pub fn add_weighted(&mut self, terms: &[(f64, Value)]) -> Result<Value> {
        let Some(&(_, first)) = terms.first() else {
            return Err(Error::Contract("add_weighted needs at least one term".into()));
        };
        let shape = self.value(first).shape().to_vec();
        for &(_, v) in terms {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "add_weighted shape mismatch: {:?} vs {:?}",
                    self.value(v).shape(),
                    shape
                )));
            }
        }
        let numel: usize = shape.iter().product();
        let mut out = vec![S::zero(); numel];
        let mut ws = Vec::with_capacity(terms.len());
        for &(w, v) in terms {
            let wv = num::<S>(w);
            ws.push((wv, v));
            for (o, &x) in out.iter_mut().zip(self.value(v).data()) {
                *o += wv * x;
            }
        }
        let rg = terms.iter().any(|&(_, v)| self.rg(v));
        let out = Tensor::new(shape, out)?;
        self.push_checked(out, rg, Op::AddWeighted { terms: ws })
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Afterwards every learnable leaf has
    /// a gradient (zero if the loss never touched it); intermediate gradients
    /// are discarded.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.nodes[loss.0].data.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.nodes[loss.0].data.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        for (i, node) in self.nodes.iter().enumerate() {
            self.grads[i] = None;
            if let Op::Leaf { learnable: true } = node.op {
                grads[i] = Some(vec![S::zero(); node.data.numel()]);
            }
        }
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match &mut grads[id] {
                slot @ Some(_) if !matches!(node.op, Op::Leaf { .. }) => slot.take().unwrap(),
                Some(g) => {
                    // learnable leaf: keep the buffer, stash it as the result
                    let t = Tensor::new(node.data.shape().to_vec(), std::mem::take(g))?;
                    if !t.all_finite() {
                        return Err(Error::Numeric("non-finite gradient at leaf".into()));
                    }
                    self.grads[id] = Some(t);
                    grads[id] = None;
                    continue;
                }
                None => continue,
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient flowing into {}", node.op.name())));
            }
            self.propagate(id, &g, &mut grads)?;
        }
        // leaves that were zero-initialized but never reached the loop above
        for id in (loss.0 + 1).min(n)..n {
            if let Some(g) = grads[id].take() {
                let node = &self.nodes[id];
                self.grads[id] = Some(Tensor::new(node.data.shape().to_vec(), g)?);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => unreachable!("leaves are handled in the sweep"),
            Op::Conv2d { input, filter } => {
                if self.rg(*input) {
                    let d_out = Tensor::new(node.data.shape().to_vec(), g.to_vec())?;
                    let d_in = super::conv2d_backward_input(&d_out, filter, self.value(*input).shape())?;
                    self.accumulate(grads, *input, d_in.data());
                }
            }
            Op::ChannelAffine { input, scale } => {
                if self.rg(*input) {
                    let x = self.value(*input);
                    let (nb, c, plane) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
                    let mut d = vec![S::zero(); x.numel()];
                    for ni in 0..nb {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let sc = scale[ci];
                            for i in base..base + plane {
                                d[i] = g[i] * sc;
                            }
                        }
                    }
                    self.accumulate(grads, *input, &d);
                }
            }
            Op::LeakyRelu { input, slope } => {
                if self.rg(*input) {
                    let x = self.value(*input).data();
                    let d: Vec<S> = x
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| if xv > S::zero() { gv } else { gv * *slope })
                        .collect();
                    self.accumulate(grads, *input, &d);
                }
            }
            Op::UnfoldRows { input, tile } => {
                if self.rg(*input) {
                    let x = self.value(*input);
                    let (nb, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                    let (_, _, map) = unfold_positions(h, w, *tile);
                    let rows_per = map.len();
                    let mut d = vec![S::zero(); x.numel()];
                    for ni in 0..nb {
                        for (r, m) in map.iter().enumerate() {
                            if let Some((y, xp)) = m {
                                let row = &g[(ni * rows_per + r) * c..(ni * rows_per + r + 1) * c];
                                for (ci, &gv) in row.iter().enumerate() {
                                    d[((ni * c + ci) * h + y) * w + xp] += gv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, &d);
                }
            }
            Op::SpatialMean { input } => {
                if self.rg(*input) {
                    let x = self.value(*input);
                    let plane = x.dim(2) * x.dim(3);
                    let inv = num::<S>(1.0 / plane as f64);
                    let mut d = vec![S::zero(); x.numel()];
                    for (i, chunk) in d.chunks_mut(plane).enumerate() {
                        let gv = g[i] * inv;
                        chunk.fill(gv);
                    }
                    self.accumulate(grads, *input, &d);
                }
            }
            Op::MatMulNT { a, b } => {
                if self.rg(*a) {
                    let (r, t, k) = (self.value(*a).dim(0), b.dim(0), b.dim(1));
                    let mut d = vec![S::zero(); r * k];
                    super::gemm_nn(r, k, t, g, b.data(), &mut d);
                    self.accumulate(grads, *a, &d);
                }
            }
            Op::GatherRows { input, rows } => {
                if self.rg(*input) {
                    let x = self.value(*input);
                    let c = x.dim(1);
                    let mut d = vec![S::zero(); x.numel()];
                    for (dst, &src) in rows.iter().enumerate() {
                        let gr = &g[dst * c..(dst + 1) * c];
                        let tr = &mut d[src * c..(src + 1) * c];
                        for (t, &gv) in tr.iter_mut().zip(gr) {
                            *t += gv;
                        }
                    }
                    self.accumulate(grads, *input, &d);
                }
            }
            Op::Cos { input } => {
                if self.rg(*input) {
                    let x = self.value(*input).data();
                    let d: Vec<S> = x.iter().zip(g).map(|(&xv, &gv)| -xv.sin() * gv).collect();
                    self.accumulate(grads, *input, &d);
                }
            }
            Op::Sin { input } => {
                if self.rg(*input) {
                    let x = self.value(*input).data();
                    let d: Vec<S> = x.iter().zip(g).map(|(&xv, &gv)| xv.cos() * gv).collect();
                    self.accumulate(grads, *input, &d);
                }
            }
            Op::MeanRows { input } => {
                if self.rg(*input) {
                    let x = self.value(*input);
                    let (r, c) = (x.dim(0), x.dim(1));
                    let inv = num::<S>(1.0 / r as f64);
                    let mut d = vec![S::zero(); r * c];
                    for row in d.chunks_mut(c) {
                        for (dv, &gv) in row.iter_mut().zip(g) {
                            *dv = gv * inv;
                        }
                    }
                    self.accumulate(grads, *input, &d);
                }
            }
            Op::Hypot { re, im } => {
                let out = node.data.data();
                for side in [*re, *im] {
                    if self.rg(side) {
                        let x = self.value(side).data();
                        let d: Vec<S> = x
                            .iter()
                            .zip(out)
                            .zip(g)
                            .map(|((&xv, &ov), &gv)| if ov > S::zero() { gv * xv / ov } else { S::zero() })
                            .collect();
                        self.accumulate(grads, side, &d);
                    }
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let d: Vec<S> = g.iter().map(|&gv| -gv).collect();
                    self.accumulate(grads, *b, &d);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let d: Vec<S> = g.iter().zip(bv).map(|(&gv, &x)| gv * x).collect();
                    self.accumulate(grads, *a, &d);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let d: Vec<S> = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    self.accumulate(grads, *b, &d);
                }
            }
            Op::SubConst { a } | Op::AddScalar { a } => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g);
                }
            }
            Op::ConstSub { b } => {
                if self.rg(*b) {
                    let d: Vec<S> = g.iter().map(|&gv| -gv).collect();
                    self.accumulate(grads, *b, &d);
                }
            }
            Op::MulConst { a, b } => {
                if self.rg(*a) {
                    let d: Vec<S> = g.iter().zip(b.data()).map(|(&gv, &x)| gv * x).collect();
                    self.accumulate(grads, *a, &d);
                }
            }
            Op::Scale { a, c } => {
                if self.rg(*a) {
                    let d: Vec<S> = g.iter().map(|&gv| gv * *c).collect();
                    self.accumulate(grads, *a, &d);
                }
            }
            Op::Sqrt { input } => {
                if self.rg(*input) {
                    let out = node.data.data();
                    let half = num::<S>(0.5);
                    let d: Vec<S> = out
                        .iter()
                        .zip(g)
                        .map(|(&ov, &gv)| if ov > S::zero() { gv * half / ov } else { S::zero() })
                        .collect();
                    self.accumulate(grads, *input, &d);
                }
            }
            Op::Abs { input } => {
                if self.rg(*input) {
                    let x = self.value(*input).data();
                    let d: Vec<S> = x
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| {
                            if xv > S::zero() {
                                gv
                            } else if xv < S::zero() {
                                -gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    self.accumulate(grads, *input, &d);
                }
            }
            Op::Mean { input } => {
                if self.rg(*input) {
                    let numel = self.value(*input).numel();
                    let gv = g[0] * num::<S>(1.0 / numel as f64);
                    let d = vec![gv; numel];
                    self.accumulate(grads, *input, &d);
                }
            }
            Op::Sum { input } => {
                if self.rg(*input) {
                    let numel = self.value(*input).numel();
                    let d = vec![g[0]; numel];
                    self.accumulate(grads, *input, &d);
                }
            }
            Op::AddWeighted { terms } => {
                for &(w, v) in terms {
                    if self.rg(v) {
                        let d: Vec<S> = g.iter().map(|&gv| gv * w).collect();
                        self.accumulate(grads, v, &d);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], target: Value, contribution: &[S]) {
        let slot = grads[target.0].get_or_insert_with(|| vec![S::zero(); contribution.len()]);
        debug_assert_eq!(slot.len(), contribution.len());
        for (s, &c) in slot.iter_mut().zip(contribution) {
            *s += c;
        }
    }
}
