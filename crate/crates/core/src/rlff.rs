//! Random local Fourier features.
//!
//! An identity filter bank `E` of shape `[C', c, k, k]` (C' = c*k*k, each
//! slice a one-hot) extracts every k x k neighborhood as a flattened vector.
//! Taking a 1-D DFT along the output-channel axis and stacking
//! `[Re(DFT(E)), -Im(DFT(E))]` yields a `2C'`-channel bank whose application
//! to a map equals the per-neighborhood DFT split into real and negated
//! imaginary parts. A seeded channel subsample keeps `C_out` of the `2C'`
//! channels; the optimization redraws the subsample every iteration and must
//! use the *same* draw on the real and synthetic branches, which
//! [`apply_rlff_pair`] enforces.
//!
//! Feature maps are batch-normalized (statistics from the real batch, frozen
//! constants on both branches) before the bank is applied. The filtered map
//! is then partitioned into non-overlapping `p x p` tiles (zero-padded at
//! borders) and unfolded so every spatial position becomes one matching row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{num, ChannelStats, Element, GradTape, Tensor, Value};

/// One-hot neighborhood extractor `[c*k*k, c, k, k]`: output channel `m`
/// reads flattened neighborhood position `m` (channel-major, then ky, kx).
pub fn build_identity_filter<S: Element>(c: usize, k: usize) -> Result<Tensor<S>> {
    if c == 0 {
        return Err(Error::Config("identity filter needs at least one channel".into()));
    }
    if k == 0 || k % 2 == 0 {
        return Err(Error::Config(format!("identity filter kernel must be odd, got {k}")));
    }
    let cp = c * k * k;
    let mut data = vec![S::zero(); cp * cp];
    for m in 0..cp {
        data[m * cp + m] = S::one();
    }
    Tensor::new(vec![cp, c, k, k], data)
}

/// A sampled Fourier bank: `filter` holds the `C_out` selected rows of
/// `[Re(DFT(E)), -Im(DFT(E))]` reshaped to conv form, `selected` the sorted
/// row indices into the full `2C'` bank.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierLocalFilter<S: Element> {
    filter: Tensor<S>,
    selected: Vec<usize>,
    seed: u64,
}

impl<S: Element> FourierLocalFilter<S> {
    /// Conv filter `[C_out, c, k, k]`.
    pub fn filter(&self) -> &Tensor<S> {
        &self.filter
    }

    /// The same coefficients viewed as a `[C_out, c*k*k]` matrix (rows act on
    /// flattened neighborhoods).
    pub fn as_matrix(&self) -> Result<Tensor<S>> {
        let f = &self.filter;
        let (o, c, k) = (f.dim(0), f.dim(1), f.dim(2));
        f.clone().reshape(vec![o, c * k * k])
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn out_channels(&self) -> usize {
        self.filter.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.filter.dim(2)
    }

    pub fn in_channels(&self) -> usize {
        self.filter.dim(1)
    }

    /// Fast construction for the identity bank: builds only the selected rows
    /// from the closed-form DFT of one-hot filters. Equal to
    /// `fourier_filter(&build_identity_filter(c, k)?, seed, c_out)`.
    pub fn random(c: usize, k: usize, seed: u64, c_out: usize) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {k}")));
        }
        let m = c * k * k;
        let selected = sample_channels(2 * m, c_out, seed)?;
        let mut data = Vec::with_capacity(c_out * m);
        for &s in &selected {
            let (q, imag) = if s < m { (s, false) } else { (s - m, true) };
            for j in 0..m {
                let angle = 2.0 * std::f64::consts::PI * (q as f64) * (j as f64) / (m as f64);
                data.push(num::<S>(if imag { angle.sin() } else { angle.cos() }));
            }
        }
        Ok(FourierLocalFilter {
            filter: Tensor::new(vec![c_out, c, k, k], data)?,
            selected,
            seed,
        })
    }
}

/// DFT of an arbitrary filter bank `e [M, c, k, k]` along its output-channel
/// axis, stacked as `[Re, -Im]` (`2M` channels), then channel-subsampled to
/// `c_out` without replacement using `seed`.
pub fn fourier_filter<S: Element>(e: &Tensor<S>, seed: u64, c_out: usize) -> Result<FourierLocalFilter<S>> {
    if e.rank() != 4 {
        return Err(Error::Contract(format!("fourier_filter wants [M,c,k,k], got {:?}", e.shape())));
    }
    let (m, c, k) = (e.dim(0), e.dim(1), e.dim(2));
    let slice = c * k * k;
    let selected = sample_channels(2 * m, c_out, seed)?;
    let mut data = Vec::with_capacity(c_out * slice);
    for &s in &selected {
        let (q, imag) = if s < m { (s, false) } else { (s - m, true) };
        for j in 0..slice {
            let mut acc = 0.0f64;
            for mi in 0..m {
                let angle = 2.0 * std::f64::consts::PI * (q as f64) * (mi as f64) / (m as f64);
                let basis = if imag { angle.sin() } else { angle.cos() };
                acc += e.data()[mi * slice + j].to_f64().expect("widen") * basis;
            }
            data.push(num::<S>(acc));
        }
    }
    Ok(FourierLocalFilter {
        filter: Tensor::new(vec![c_out, c, k, k], data)?,
        selected,
        seed,
    })
}

/// Draw `c_out` distinct indices from `0..total` (seeded partial
/// Fisher-Yates), returned sorted.
fn sample_channels(total: usize, c_out: usize, seed: u64) -> Result<Vec<usize>> {
    if c_out == 0 || c_out > total {
        return Err(Error::Config(format!("channel sample size {c_out} out of 1..={total}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..total).collect();
    for i in 0..c_out {
        let j = rng.gen_range(i..total);
        pool.swap(i, j);
    }
    let mut selected = pool[..c_out].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Batch-normalize features with frozen `stats`, then convolve with the
/// Fourier bank. Differentiable w.r.t. `features`.
pub fn apply_rlff<S: Element>(
    tape: &mut GradTape<S>,
    features: Value,
    flt: &FourierLocalFilter<S>,
    stats: &ChannelStats<S>,
) -> Result<Value> {
    let normed = tape.batch_norm(features, stats)?;
    tape.conv2d(normed, flt.filter())
}

/// Plain-tensor variant of [`apply_rlff`] for constant branches.
pub fn apply_rlff_plain<S: Element>(
    features: &Tensor<S>,
    flt: &FourierLocalFilter<S>,
    stats: &ChannelStats<S>,
) -> Result<Tensor<S>> {
    let mut tape = GradTape::new();
    let v = tape.constant(features.clone());
    let out = apply_rlff(&mut tape, v, flt, stats)?;
    Ok(tape.value(out).clone())
}

/// Apply the bank to the real and synthetic branches of one iteration.
/// Both branches must use the *same* filter draw; differing filters are a
/// contract violation and the engine refuses to proceed.
pub fn apply_rlff_pair<S: Element>(
    tape: &mut GradTape<S>,
    real_features: &Tensor<S>,
    syn_features: Value,
    flt_real: &FourierLocalFilter<S>,
    flt_syn: &FourierLocalFilter<S>,
    stats: &ChannelStats<S>,
) -> Result<(Tensor<S>, Value)> {
    if flt_real != flt_syn {
        return Err(Error::Contract(
            "real and synthetic branches must share one filter draw per iteration".into(),
        ));
    }
    let real = apply_rlff_plain(real_features, flt_real, stats)?;
    let syn = apply_rlff(tape, syn_features, flt_syn, stats)?;
    Ok((real, syn))
}

/// Row bookkeeping for unfolded maps: `samples` maps of `grid` tiles, each
/// `tile x tile` positions. Feature patches (tiles) are numbered
/// `sample * gh * gw + ty * gw + tx`; each owns `tile*tile` contiguous rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowLayout {
    pub samples: usize,
    pub grid: (usize, usize),
    pub tile: usize,
}

impl RowLayout {
    pub fn patches(&self) -> usize {
        self.samples * self.grid.0 * self.grid.1
    }

    pub fn rows_per_patch(&self) -> usize {
        self.tile * self.tile
    }

    pub fn total_rows(&self) -> usize {
        self.patches() * self.rows_per_patch()
    }

    pub fn patch_rows(&self, patch: usize) -> std::ops::Range<usize> {
        let rp = self.rows_per_patch();
        patch * rp..(patch + 1) * rp
    }
}

/// Unfolded feature rows `[R, C_out]` plus the tile bookkeeping: row `r`
/// belongs to feature patch `patch_index[r]`.
#[derive(Clone, Debug)]
pub struct LocalFeatureRows<S: Element> {
    pub rows: Tensor<S>,
    pub patch_index: Vec<usize>,
    pub layout: RowLayout,
}

fn layout_for<S: Element>(map: &Tensor<S>, tile: usize) -> Result<RowLayout> {
    if tile == 0 {
        return Err(Error::Config("tile size must be positive".into()));
    }
    if map.rank() != 4 {
        return Err(Error::Contract(format!("partition_unfold wants [N,C,h,w], got {:?}", map.shape())));
    }
    Ok(RowLayout {
        samples: map.dim(0),
        grid: (map.dim(2).div_ceil(tile), map.dim(3).div_ceil(tile)),
        tile,
    })
}

fn patch_index_of(layout: &RowLayout) -> Vec<usize> {
    let rp = layout.rows_per_patch();
    (0..layout.total_rows()).map(|r| r / rp).collect()
}

/// Partition a filtered map into `tile x tile` tiles (borders zero-padded)
/// and unfold every spatial position into a row.
pub fn partition_unfold<S: Element>(map: &Tensor<S>, tile: usize) -> Result<LocalFeatureRows<S>> {
    let layout = layout_for(map, tile)?;
    let rows = crate::numerics::unfold_rows_plain(map, tile);
    Ok(LocalFeatureRows {
        rows,
        patch_index: patch_index_of(&layout),
        layout,
    })
}

/// Tape variant of [`partition_unfold`]: the rows stay differentiable, the
/// bookkeeping is returned alongside.
pub fn partition_unfold_on<S: Element>(
    tape: &mut GradTape<S>,
    map: Value,
    tile: usize,
) -> Result<(Value, RowLayout, Vec<usize>)> {
    let layout = layout_for(tape.value(map), tile)?;
    let rows = tape.unfold_rows(map, tile)?;
    let idx = patch_index_of(&layout);
    Ok((rows, layout, idx))
}
