//! Distribution matching over local feature rows.
//!
//! The matching statistic is the empirical characteristic function
//! `Φ(t) = mean over rows of e^{j<t,row>}` evaluated at `T` random Gaussian
//! frequencies. Real and synthetic row sets are compared by an α-weighted
//! combination of amplitude difference and phase misalignment, averaged in
//! square-root form over the frequencies. On top of the instance-level
//! discrepancy sit a group level (k-means groups of feature patches, same
//! statistic restricted to each group's rows) and a pair level (L1 between
//! paired patch row blocks).

mod assign;
mod kmeans;

pub use assign::{assign_synthetic, largest_remainder};
pub use kmeans::{kmeans_group, GroupAssignment};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::numerics::{gemm_nt, num, wide, Element, GradTape, Tensor, Value};
use crate::rlff::{LocalFeatureRows, RowLayout};
use crate::seed::derive_seed;

/// Stabilizer under the square root of the discrepancy (the root has
/// infinite slope at zero).
pub const CHF_EPS: f64 = 1e-12;

/// Seeded Gaussian frequency source: `count` i.i.d. rows of dimension `dim`,
/// standard deviation `sigma`, redrawn deterministically per draw index.
#[derive(Clone, Debug)]
pub struct FrequencySampler {
    seed: u64,
    sigma: f64,
    count: usize,
    dim: usize,
}

impl FrequencySampler {
    pub fn new(seed: u64, sigma: f64, count: usize, dim: usize) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::Config(format!("frequency sampler needs count and dim >= 1, got {count}x{dim}")));
        }
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::Config(format!("frequency sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(FrequencySampler { seed, sigma, count, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// The `[T, dim]` frequency matrix for one draw index.
    pub fn sample<S: Element>(&self, draw: u64) -> Tensor<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[draw]));
        let normal = rand_distr::Normal::new(0.0f64, self.sigma).expect("validated sigma");
        let data = (0..self.count * self.dim).map(|_| num::<S>(normal.sample(&mut rng))).collect();
        Tensor::new(vec![self.count, self.dim], data).expect("sampler shape")
    }
}

/// Per-frequency characteristic-function statistics of one row set:
/// mean phasor (re, im), its amplitude and phase, each `[T]`.
#[derive(Clone, Debug)]
pub struct ComplexStats<S: Element> {
    pub re: Tensor<S>,
    pub im: Tensor<S>,
    pub amplitude: Tensor<S>,
    pub phase: Tensor<S>,
}

/// `<t_j, row_i>` for every row and frequency: `[R, C] x [T, C] -> [R, T]`.
pub fn frequency_projections<S: Element>(rows: &Tensor<S>, t: &Tensor<S>) -> Result<Tensor<S>> {
    if rows.rank() != 2 || t.rank() != 2 || rows.dim(1) != t.dim(1) {
        return Err(Error::Contract(format!(
            "projections want rows [R,C] and t [T,C], got {:?} and {:?}",
            rows.shape(),
            t.shape()
        )));
    }
    let (r, c, tn) = (rows.dim(0), rows.dim(1), t.dim(0));
    let mut out = Tensor::zeros(&[r, tn]);
    gemm_nt(r, tn, c, rows.data(), t.data(), out.data_mut());
    Ok(out)
}

struct PhasorAcc {
    re: Vec<f64>,
    im: Vec<f64>,
    count: usize,
}

impl PhasorAcc {
    fn new(t: usize) -> Self {
        PhasorAcc { re: vec![0.0; t], im: vec![0.0; t], count: 0 }
    }

    fn finish<S: Element>(self) -> Result<ComplexStats<S>> {
        if self.count == 0 {
            return Err(Error::Contract("characteristic function needs at least one row".into()));
        }
        let t = self.re.len();
        let inv = 1.0 / self.count as f64;
        let mut re = Vec::with_capacity(t);
        let mut im = Vec::with_capacity(t);
        let mut amp = Vec::with_capacity(t);
        let mut phase = Vec::with_capacity(t);
        for j in 0..t {
            let (r, i) = (self.re[j] * inv, self.im[j] * inv);
            re.push(num::<S>(r));
            im.push(num::<S>(i));
            amp.push(num::<S>(r.hypot(i)));
            phase.push(num::<S>(i.atan2(r)));
        }
        Ok(ComplexStats {
            re: Tensor::new(vec![t], re)?,
            im: Tensor::new(vec![t], im)?,
            amplitude: Tensor::new(vec![t], amp)?,
            phase: Tensor::new(vec![t], phase)?,
        })
    }
}

/// Empirical characteristic function of `rows` at frequencies `t`.
pub fn char_fn<S: Element>(rows: &Tensor<S>, t: &Tensor<S>) -> Result<ComplexStats<S>> {
    let ips = frequency_projections(rows, t)?;
    stats_from_projections(&ips, None)
}

/// Characteristic function from precomputed projections, optionally over a
/// row subset.
pub fn stats_from_projections<S: Element>(ips: &Tensor<S>, subset: Option<&[usize]>) -> Result<ComplexStats<S>> {
    let (r, t) = (ips.dim(0), ips.dim(1));
    let mut acc = PhasorAcc::new(t);
    let mut add_row = |row: usize| {
        for j in 0..t {
            let v = wide(ips.data()[row * t + j]);
            acc.re[j] += v.cos();
            acc.im[j] += v.sin();
        }
        acc.count += 1;
    };
    match subset {
        None => (0..r).for_each(&mut add_row),
        Some(rows) => {
            for &row in rows {
                if row >= r {
                    return Err(Error::Contract(format!("row {row} out of range 0..{r}")));
                }
                add_row(row);
            }
        }
    }
    acc.finish()
}

/// Instance-level plus per-group characteristic functions in one pass over
/// the projections. `of_row[r]` is the group of row `r`; groups with no rows
/// come back as `None`.
pub fn grouped_stats_from_projections<S: Element>(
    ips: &Tensor<S>,
    of_row: &[usize],
    groups: usize,
) -> Result<(ComplexStats<S>, Vec<Option<ComplexStats<S>>>)> {
    let (r, t) = (ips.dim(0), ips.dim(1));
    if of_row.len() != r {
        return Err(Error::Contract(format!("{} group labels for {r} rows", of_row.len())));
    }
    let mut inst = PhasorAcc::new(t);
    let mut per: Vec<PhasorAcc> = (0..groups).map(|_| PhasorAcc::new(t)).collect();
    for row in 0..r {
        let g = of_row[row];
        if g >= groups {
            return Err(Error::Contract(format!("row group {g} out of range 0..{groups}")));
        }
        for j in 0..t {
            let v = wide(ips.data()[row * t + j]);
            let (c, s) = (v.cos(), v.sin());
            inst.re[j] += c;
            inst.im[j] += s;
            per[g].re[j] += c;
            per[g].im[j] += s;
        }
        inst.count += 1;
        per[g].count += 1;
    }
    let group_stats = per
        .into_iter()
        .map(|acc| if acc.count == 0 { Ok(None) } else { acc.finish().map(Some) })
        .collect::<Result<Vec<_>>>()?;
    Ok((inst.finish()?, group_stats))
}

/// The α-weighted amplitude/phase discrepancy between two row-set statistics,
/// averaged in square-root form over the frequencies. The phase term is
/// evaluated through the phasor inner product,
/// `2|Φr||Φs|(1-cos(ar-as)) = 2(|Φr||Φs| - (re_r re_s + im_r im_s))`,
/// which is exact and avoids angle unwrapping.
pub fn chf_from_stats<S: Element>(real: &ComplexStats<S>, syn: &ComplexStats<S>, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let t = real.re.dim(0);
    if syn.re.dim(0) != t {
        return Err(Error::Contract(format!("frequency counts differ: {t} vs {}", syn.re.dim(0))));
    }
    let mut acc = 0.0f64;
    for j in 0..t {
        let (ar, asy) = (wide(real.amplitude.data()[j]), wide(syn.amplitude.data()[j]));
        let dot = wide(real.re.data()[j]) * wide(syn.re.data()[j]) + wide(real.im.data()[j]) * wide(syn.im.data()[j]);
        let d = ar - asy;
        // non-negative analytically; rounding may dip below zero
        let cross = (ar * asy - dot).max(0.0);
        acc += (alpha * d * d + (1.0 - alpha) * 2.0 * cross + CHF_EPS).sqrt();
    }
    Ok(acc / t as f64)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0,1], got {alpha}")));
    }
    Ok(())
}

/// Phasor fields of differentiable rows: elementwise cos/sin of the
/// projections, both `[R, T]`.
#[derive(Clone, Copy, Debug)]
pub struct PhasorField {
    pub cos: Value,
    pub sin: Value,
}

pub fn phasor_field<S: Element>(tape: &mut GradTape<S>, rows: Value, t: &Tensor<S>) -> Result<PhasorField> {
    let ips = tape.matmul_nt(rows, t)?;
    Ok(PhasorField { cos: tape.cos(ips)?, sin: tape.sin(ips)? })
}

/// Mean phasor of a row subset (or of all rows): `([T] re, [T] im)`.
pub fn mean_phasor<S: Element>(
    tape: &mut GradTape<S>,
    field: &PhasorField,
    subset: Option<&[usize]>,
) -> Result<(Value, Value)> {
    match subset {
        None => Ok((tape.mean_rows(field.cos)?, tape.mean_rows(field.sin)?)),
        Some(rows) => {
            if rows.is_empty() {
                return Err(Error::Contract("mean phasor over an empty row subset".into()));
            }
            let c = tape.gather_rows(field.cos, rows.to_vec())?;
            let s = tape.gather_rows(field.sin, rows.to_vec())?;
            Ok((tape.mean_rows(c)?, tape.mean_rows(s)?))
        }
    }
}

/// Differentiable discrepancy of a synthetic mean phasor against fixed
/// real-side statistics. Mirrors [`chf_from_stats`] on the tape.
pub fn chf_against<S: Element>(
    tape: &mut GradTape<S>,
    real: &ComplexStats<S>,
    syn_re: Value,
    syn_im: Value,
    alpha: f64,
) -> Result<Value> {
    check_alpha(alpha)?;
    let amp_s = tape.hypot(syn_re, syn_im)?;
    let d = tape.const_sub(&real.amplitude, amp_s)?;
    let d2 = tape.mul(d, d)?;
    let dot = {
        let a = tape.mul_const(syn_re, &real.re)?;
        let b = tape.mul_const(syn_im, &real.im)?;
        tape.add(a, b)?
    };
    let prod = tape.mul_const(amp_s, &real.amplitude)?;
    let cross = tape.sub(prod, dot)?;
    // non-negative analytically; clamp rounding noise so the root stays real
    let cross = tape.leaky_relu(cross, 0.0)?;
    let chf = tape.add_weighted(&[(alpha, d2), (2.0 * (1.0 - alpha), cross)])?;
    let arg = tape.add_scalar(chf, CHF_EPS)?;
    let root = tape.sqrt(arg)?;
    tape.mean(root)
}

/// Differentiable discrepancy between constant real rows and synthetic rows.
pub fn chf_discrepancy_on<S: Element>(
    tape: &mut GradTape<S>,
    real_rows: &Tensor<S>,
    syn_rows: Value,
    t: &Tensor<S>,
    alpha: f64,
) -> Result<Value> {
    let real = char_fn(real_rows, t)?;
    let field = phasor_field(tape, syn_rows, t)?;
    let (re, im) = mean_phasor(tape, &field, None)?;
    chf_against(tape, &real, re, im, alpha)
}

/// Measurement-only variant of [`chf_discrepancy_on`].
pub fn chf_discrepancy<S: Element>(
    real_rows: &Tensor<S>,
    syn_rows: &Tensor<S>,
    t: &Tensor<S>,
    alpha: f64,
) -> Result<f64> {
    chf_from_stats(&char_fn(real_rows, t)?, &char_fn(syn_rows, t)?, alpha)
}

/// Instance-level loss: the discrepancy over all rows at one frequency draw.
pub fn instance_loss_on<S: Element>(
    tape: &mut GradTape<S>,
    real_rows: &Tensor<S>,
    syn_rows: Value,
    fs: &FrequencySampler,
    draw: u64,
    alpha: f64,
) -> Result<Value> {
    let t = fs.sample::<S>(draw);
    chf_discrepancy_on(tape, real_rows, syn_rows, &t, alpha)
}

/// Row-to-group labels from patch-to-group labels.
pub fn rows_to_groups(layout: &RowLayout, patch_groups: &[usize]) -> Result<Vec<usize>> {
    if patch_groups.len() != layout.patches() {
        return Err(Error::Contract(format!(
            "{} patch groups for {} patches",
            patch_groups.len(),
            layout.patches()
        )));
    }
    let rp = layout.rows_per_patch();
    Ok((0..layout.total_rows()).map(|r| patch_groups[r / rp]).collect())
}

/// Per-group row subsets for synthetic patches (unassigned patches belong to
/// no group and appear in no subset).
pub fn group_row_subsets(layout: &RowLayout, patch_groups: &[Option<usize>], groups: usize) -> Result<Vec<Vec<usize>>> {
    if patch_groups.len() != layout.patches() {
        return Err(Error::Contract(format!(
            "{} patch groups for {} patches",
            patch_groups.len(),
            layout.patches()
        )));
    }
    let mut subsets = vec![Vec::new(); groups];
    for (p, g) in patch_groups.iter().enumerate() {
        if let Some(g) = *g {
            if g >= groups {
                return Err(Error::Contract(format!("patch group {g} out of range 0..{groups}")));
            }
            subsets[g].extend(layout.patch_rows(p));
        }
    }
    Ok(subsets)
}

/// Group-level loss: for every group holding both real rows and assigned
/// synthetic rows, the discrepancy between those row subsets (same rows, no
/// further extraction), summed over groups. Groups with no assigned
/// synthetic rows contribute zero.
pub fn group_loss_on<S: Element>(
    tape: &mut GradTape<S>,
    ga: &GroupAssignment<S>,
    real: &LocalFeatureRows<S>,
    syn_rows: Value,
    syn_layout: &RowLayout,
    t: &Tensor<S>,
    alpha: f64,
) -> Result<Value> {
    let groups = ga.groups();
    let of_row = rows_to_groups(&real.layout, &ga.real_groups)?;
    let ips = frequency_projections(&real.rows, t)?;
    let (_, real_stats) = grouped_stats_from_projections(&ips, &of_row, groups)?;
    let subsets = group_row_subsets(syn_layout, &ga.syn_groups, groups)?;
    let field = phasor_field(tape, syn_rows, t)?;
    group_loss_from_stats(tape, &real_stats, &field, &subsets, alpha)
}

/// Group-level loss from precomputed real statistics and a synthetic phasor
/// field (the condensation loop's path).
pub fn group_loss_from_stats<S: Element>(
    tape: &mut GradTape<S>,
    real_stats: &[Option<ComplexStats<S>>],
    field: &PhasorField,
    syn_subsets: &[Vec<usize>],
    alpha: f64,
) -> Result<Value> {
    check_alpha(alpha)?;
    if real_stats.len() != syn_subsets.len() {
        return Err(Error::Contract(format!(
            "{} real group stats vs {} synthetic subsets",
            real_stats.len(),
            syn_subsets.len()
        )));
    }
    let mut terms = Vec::new();
    for (stats, subset) in real_stats.iter().zip(syn_subsets) {
        let Some(stats) = stats else { continue };
        if subset.is_empty() {
            continue;
        }
        let (re, im) = mean_phasor(tape, field, Some(subset))?;
        terms.push((1.0, chf_against(tape, stats, re, im, alpha)?));
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(S::zero())));
    }
    tape.add_weighted(&terms)
}

/// One pairing for the pair-level loss: a synthetic feature patch, its group,
/// and the partner real patch's row block `[tile*tile, C]`.
#[derive(Clone, Debug)]
pub struct PairBlock<S: Element> {
    pub group: usize,
    pub syn_patch: usize,
    pub real_block: Tensor<S>,
}

/// Pair-level loss: within each group the mean over pairs of the L1 distance
/// between paired row blocks, summed over groups.
pub fn pair_loss_from_blocks<S: Element>(
    tape: &mut GradTape<S>,
    blocks: &[PairBlock<S>],
    syn_rows: Value,
    syn_layout: &RowLayout,
) -> Result<Value> {
    if blocks.is_empty() {
        return Ok(tape.constant(Tensor::scalar(S::zero())));
    }
    let groups = blocks.iter().map(|b| b.group).max().expect("non-empty") + 1;
    let mut per_group = vec![0usize; groups];
    for b in blocks {
        per_group[b.group] += 1;
    }
    let mut terms = Vec::with_capacity(blocks.len());
    for b in blocks {
        let rows: Vec<usize> = syn_layout.patch_rows(b.syn_patch).collect();
        let syn_block = tape.gather_rows(syn_rows, rows)?;
        let diff = tape.sub_const(syn_block, &b.real_block)?;
        let l1 = tape.abs(diff)?;
        let sum = tape.sum(l1)?;
        terms.push((1.0 / per_group[b.group] as f64, sum));
    }
    tape.add_weighted(&terms)
}

/// Pair-level loss from an assignment and materialized real rows.
pub fn pair_loss_on<S: Element>(
    tape: &mut GradTape<S>,
    ga: &GroupAssignment<S>,
    real: &LocalFeatureRows<S>,
    syn_rows: Value,
    syn_layout: &RowLayout,
) -> Result<Value> {
    if real.layout.tile != syn_layout.tile {
        return Err(Error::Contract(format!(
            "real and synthetic tiles differ: {} vs {}",
            real.layout.tile, syn_layout.tile
        )));
    }
    let c = real.rows.dim(1);
    let blocks = ga
        .pairs
        .iter()
        .map(|&(syn_patch, real_patch)| {
            let range = real.layout.patch_rows(real_patch);
            let data = real.rows.data()[range.start * c..range.end * c].to_vec();
            let real_block = Tensor::new(vec![range.len(), c], data)?;
            let group = ga.syn_groups[syn_patch]
                .ok_or_else(|| Error::Contract(format!("paired synthetic patch {syn_patch} has no group")))?;
            Ok(PairBlock { group, syn_patch, real_block })
        })
        .collect::<Result<Vec<_>>>()?;
    pair_loss_from_blocks(tape, &blocks, syn_rows, syn_layout)
}

/// Group-wise mean rows (patch means) of feature rows: `[patches, C]`.
/// Padding rows count as zeros, exactly as they sit in the row matrix.
pub fn patch_means<S: Element>(rows: &LocalFeatureRows<S>) -> Tensor<S> {
    let c = rows.rows.dim(1);
    let rp = rows.layout.rows_per_patch();
    let patches = rows.layout.patches();
    let mut out = Vec::with_capacity(patches * c);
    for p in 0..patches {
        let mut acc = vec![0.0f64; c];
        for r in rows.layout.patch_rows(p) {
            for (j, a) in acc.iter_mut().enumerate() {
                *a += wide(rows.rows.data()[r * c + j]);
            }
        }
        out.extend(acc.iter().map(|&a| num::<S>(a / rp as f64)));
    }
    Tensor::new(vec![patches, c], out).expect("patch mean shape")
}

#[cfg(test)]
mod tests;
