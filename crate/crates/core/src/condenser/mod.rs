//! The condensation driver: initialize a small learnable patch set per
//! instance, then iterate extract → project → match → step with three
//! phases — warm-up (instance loss only), an assignment ramp that gradually
//! admits synthetic feature patches into k-means groups, and full-loss
//! optimization with group and pair terms.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{InstancePair, PatchKind, PatchSet};
use crate::error::{Error, Result};
use crate::extractor::Extractor;
use crate::matching::{
    assign_synthetic, chf_against, frequency_projections, grouped_stats_from_projections,
    group_loss_from_stats, group_row_subsets, kmeans_group, mean_phasor, pair_loss_from_blocks,
    phasor_field, rows_to_groups, stats_from_projections, ComplexStats, FrequencySampler,
    GroupAssignment, PairBlock,
};
use crate::numerics::{
    gemm_nn, gemm_nt, im2col, num, unfold_positions, wide, ChannelStats, Element, GradTape,
    OptimKind, OptimState, Tensor, Value,
};
use crate::rlff::{partition_unfold_on, FourierLocalFilter, RowLayout};
use crate::seed::{derive_seed, label_hash};

/// Base seeds for the engine's independent random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Per-iteration Fourier channel selection.
    pub filter: u64,
    /// Group construction.
    pub kmeans: u64,
    /// Synthetic initialization.
    pub init: u64,
    /// Frequency draws.
    pub freqs: u64,
}

/// How synthetic patches start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Copy a distinct uniformly drawn subset of the real patches.
    RealSubset,
    /// Draw pixels from N(0.5, 0.1²), clamped to [0,1].
    GaussianNoise,
}

fn on() -> bool {
    true
}

/// Component switches for ablation runs. Everything on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    /// Off: match raw extractor features instead of random Fourier banks.
    #[serde(default = "on")]
    pub use_local_filter: bool,
    /// Off: one spatial-mean row per patch instead of per-position rows.
    #[serde(default = "on")]
    pub use_unfold: bool,
    #[serde(default = "on")]
    pub use_instance: bool,
    #[serde(default = "on")]
    pub use_group: bool,
    #[serde(default = "on")]
    pub use_pair: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            use_local_filter: true,
            use_unfold: true,
            use_instance: true,
            use_group: true,
            use_pair: true,
        }
    }
}

/// Everything one condensation run needs. `warmup_end` and `assign_end` are
/// iteration indices: warm-up covers `0..warmup_end`, the assignment fraction
/// ramps linearly across `[warmup_end, assign_end]`, and the full loss runs to
/// `iters`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondenseConfig {
    /// Condensation ratio in (0, 1]: keep `max(1, round(r * N))` patches.
    pub r: f64,
    pub iters: usize,
    pub warmup_end: usize,
    pub assign_end: usize,
    pub w_ins: f64,
    pub w_group: f64,
    pub w_pair: f64,
    /// Amplitude/phase balance of the matching discrepancy, in [0, 1].
    pub alpha: f64,
    /// Number of k-means groups.
    pub groups: usize,
    /// Frequencies per iteration.
    pub freqs: usize,
    /// Standard deviation of the frequency distribution.
    pub sigma_t: f64,
    /// Local filter window (odd).
    pub kernel: usize,
    /// Cap on sampled Fourier channels.
    pub c_out: usize,
    /// Tile edge for the partition-unfold.
    pub tile: usize,
    pub lr: f64,
    pub optimizer: OptimKind,
    pub init_mode: InitMode,
    pub seeds: Seeds,
    #[serde(default)]
    pub toggles: Toggles,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        CondenseConfig {
            r: 0.1,
            iters: 2000,
            warmup_end: 200,
            assign_end: 1200,
            w_ins: 1.0,
            w_group: 1.0,
            w_pair: 0.1,
            alpha: 0.5,
            groups: 8,
            freqs: 64,
            sigma_t: 1.0,
            kernel: 3,
            c_out: 128,
            tile: 4,
            lr: 0.1,
            optimizer: OptimKind::Adam,
            init_mode: InitMode::RealSubset,
            seeds: Seeds { filter: 1, kmeans: 2, init: 3, freqs: 4 },
            toggles: Toggles::default(),
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.r.is_finite() || self.r <= 0.0 || self.r > 1.0 {
            return Err(Error::Config(format!("condensation ratio must lie in (0,1], got {}", self.r)));
        }
        if self.iters > 0 && !(0 < self.warmup_end && self.warmup_end <= self.assign_end && self.assign_end <= self.iters) {
            return Err(Error::Config(format!(
                "phase bounds need 0 < warmup_end <= assign_end <= iters, got {}/{}/{}",
                self.warmup_end, self.assign_end, self.iters
            )));
        }
        for (name, w) in [("w_ins", self.w_ins), ("w_group", self.w_group), ("w_pair", self.w_pair)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0,1], got {}", self.alpha)));
        }
        if self.groups == 0 || self.freqs == 0 || self.c_out == 0 || self.tile == 0 {
            return Err(Error::Config("groups, freqs, c_out and tile must all be >= 1".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("filter window must be odd, got {}", self.kernel)));
        }
        if !self.sigma_t.is_finite() || self.sigma_t < 0.0 {
            return Err(Error::Config(format!("sigma_t must be finite and >= 0, got {}", self.sigma_t)));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// The same run re-keyed for one instance: every seed stream is derived
    /// from the instance id, so schedules and manifest order never matter.
    pub fn for_instance(&self, source_id: &str) -> CondenseConfig {
        let h = label_hash(source_id);
        let mut cfg = self.clone();
        cfg.seeds = Seeds {
            filter: derive_seed(self.seeds.filter, &[h]),
            kmeans: derive_seed(self.seeds.kmeans, &[h]),
            init: derive_seed(self.seeds.init, &[h]),
            freqs: derive_seed(self.seeds.freqs, &[h]),
        };
        cfg
    }
}

/// One iteration's log record. Component losses are unweighted; `total` is
/// the weighted sum that was differentiated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub l_ins: f64,
    pub l_group: f64,
    pub l_pair: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub fraction: f64,
}

/// Outcome of condensing one instance.
#[derive(Clone, Debug)]
pub struct InstanceResult<S: Element> {
    pub synthetic: PatchSet<S>,
    pub trajectory: Vec<IterRecord>,
    /// Final grouping and assignment (absent when group and pair losses are
    /// both disabled, or the run ended before the warm-up boundary).
    pub assignment: Option<GroupAssignment<S>>,
    pub elapsed: Duration,
    pub warnings: Vec<String>,
}

impl<S: Element> InstanceResult<S> {
    pub fn iterations(&self) -> usize {
        self.trajectory.len()
    }
}

/// Per-instance result slot of a dataset run.
#[derive(Debug)]
pub struct InstanceOutcome<S: Element> {
    pub source_id: String,
    pub result: Result<InstanceResult<S>>,
}

/// Start the synthetic set for one instance: `max(1, round(r * N))` patches,
/// copied from a distinct random subset of the real set or drawn as clamped
/// Gaussian noise around mid-gray.
pub fn init_synthetic<S: Element>(
    real: &PatchSet<S>,
    r: f64,
    mode: InitMode,
    seed: u64,
) -> Result<PatchSet<S>> {
    if !r.is_finite() || r <= 0.0 || r > 1.0 {
        return Err(Error::Config(format!("condensation ratio must lie in (0,1], got {r}")));
    }
    real.validate()?;
    if real.len() == 0 {
        return Err(Error::Contract("cannot condense an empty patch set".into()));
    }
    let n = ((r * real.len() as f64).round_ties_even() as usize).max(1);
    let (c, h, w) = (real.pixels.dim(1), real.height(), real.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = match mode {
        InitMode::RealSubset => {
            let mut idx: Vec<usize> = (0..real.len()).collect();
            for i in 0..n {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
            }
            let mut data = Vec::with_capacity(n * c * h * w);
            for &p in &idx[..n] {
                data.extend_from_slice(real.patch(p));
            }
            Tensor::new(vec![n, c, h, w], data)?
        }
        InitMode::GaussianNoise => {
            let normal = rand_distr::Normal::new(0.5f64, 0.1).expect("fixed parameters");
            Tensor::from_fn(&[n, c, h, w], |_| num::<S>(normal.sample(&mut rng).clamp(0.0, 1.0)))
        }
    };
    PatchSet::new(pixels, real.source_id.clone(), vec![], PatchKind::SyntheticLr)
}

/// Per-channel normalization `x * scale + shift` on a plain tensor.
fn batch_norm_plain<S: Element>(feat: &Tensor<S>, stats: &ChannelStats<S>) -> Result<Tensor<S>> {
    if feat.rank() != 4 || feat.dim(1) != stats.channels() {
        return Err(Error::Contract(format!(
            "normalization wants [N,{},h,w], got {:?}",
            stats.channels(),
            feat.shape()
        )));
    }
    let (scale, shift) = stats.affine();
    let (n, c, plane) = (feat.dim(0), feat.dim(1), feat.dim(2) * feat.dim(3));
    let mut out = feat.clone();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            for v in &mut out.data_mut()[base..base + plane] {
                *v = *v * scale[ci] + shift[ci];
            }
        }
    }
    Ok(out)
}

/// `a [m,k] @ b[n,k]^T -> [m,n]` on plain tensors.
fn matmul_nt_plain<S: Element>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1) {
        return Err(Error::Contract(format!(
            "matmul_nt wants [m,k] and [n,k], got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(0));
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nt(m, n, k, a.data(), b.data(), out.data_mut());
    Ok(out)
}

/// The real branch's per-position neighborhoods, cached once per instance in
/// partition-unfold row order (border padding appears as zero rows). Because
/// every later transform is linear in the neighborhood vector, projections,
/// patch means and pair blocks all factor through this matrix:
/// `unfold(conv(x, W)) = cols @ W^T` row for row.
struct NeighborhoodCols<S: Element> {
    /// `[total_rows, dim]`, `dim = channels * k²` (`k = 1` when the local
    /// filter is disabled, making rows the raw feature vectors).
    cols: Tensor<S>,
    /// Per feature-patch mean of `cols` rows, `[patches, dim]`.
    mean_cols: Tensor<S>,
    layout: RowLayout,
}

impl<S: Element> NeighborhoodCols<S> {
    fn build(features: &Tensor<S>, k: usize, tile: usize, use_unfold: bool) -> Self {
        let (n, h, w) = (features.dim(0), features.dim(2), features.dim(3));
        let raster = im2col(features, k);
        let dim = raster.dim(1);
        if !use_unfold {
            // spatial-mean mode: one row per sample, which is its own mean
            let mut data = vec![0.0f64; n * dim];
            for ni in 0..n {
                for p in 0..h * w {
                    let row = &raster.data()[(ni * h * w + p) * dim..(ni * h * w + p + 1) * dim];
                    for (a, &v) in data[ni * dim..(ni + 1) * dim].iter_mut().zip(row) {
                        *a += wide(v);
                    }
                }
            }
            let inv = 1.0 / (h * w) as f64;
            let cols = Tensor::new(vec![n, dim], data.iter().map(|&v| num::<S>(v * inv)).collect())
                .expect("mean shape");
            return NeighborhoodCols {
                mean_cols: cols.clone(),
                cols,
                layout: RowLayout { samples: n, grid: (1, 1), tile: 1 },
            };
        }
        let (gh, gw, map) = unfold_positions(h, w, tile);
        let layout = RowLayout { samples: n, grid: (gh, gw), tile };
        let rp = layout.rows_per_patch();
        let rows_per_sample = map.len();
        let mut cols = vec![S::zero(); layout.total_rows() * dim];
        let mut sums = vec![0.0f64; layout.patches() * dim];
        for ni in 0..n {
            for (r, m) in map.iter().enumerate() {
                let Some((y, x)) = m else { continue };
                let src = &raster.data()[((ni * h + y) * w + x) * dim..((ni * h + y) * w + x + 1) * dim];
                let row = ni * rows_per_sample + r;
                cols[row * dim..(row + 1) * dim].copy_from_slice(src);
                let patch = row / rp;
                for (a, &v) in sums[patch * dim..(patch + 1) * dim].iter_mut().zip(src) {
                    *a += wide(v);
                }
            }
        }
        let mean_cols = Tensor::new(
            vec![layout.patches(), dim],
            sums.iter().map(|&v| num::<S>(v / rp as f64)).collect(),
        )
        .expect("mean shape");
        NeighborhoodCols {
            cols: Tensor::new(vec![layout.total_rows(), dim], cols).expect("cols shape"),
            mean_cols,
            layout,
        }
    }

    /// `<t_j, row_i>` for all rows under filter matrix `w` (`[C_out, dim]`),
    /// factored as `cols @ (t w)^T` so the filtered rows never materialize.
    fn projections(&self, w: Option<&Tensor<S>>, t: &Tensor<S>) -> Result<Tensor<S>> {
        match w {
            None => frequency_projections(&self.cols, t),
            Some(w) => {
                if t.dim(1) != w.dim(0) {
                    return Err(Error::Contract(format!(
                        "frequencies [.,{}] do not match filter channels {}",
                        t.dim(1),
                        w.dim(0)
                    )));
                }
                let (tn, c_out, dim) = (t.dim(0), w.dim(0), w.dim(1));
                let mut tw = Tensor::zeros(&[tn, dim]);
                gemm_nn(tn, dim, c_out, t.data(), w.data(), tw.data_mut());
                frequency_projections(&self.cols, &tw)
            }
        }
    }

    /// Feature-patch means in row space: `mean_cols (@ w^T)`, `[patches, C]`.
    fn means(&self, w: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        match w {
            None => Ok(self.mean_cols.clone()),
            Some(w) => matmul_nt_plain(&self.mean_cols, w),
        }
    }

    /// One feature patch's filtered row block `[tile², C]`.
    fn patch_block(&self, patch: usize, w: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let dim = self.cols.dim(1);
        let range = self.layout.patch_rows(patch);
        let data = self.cols.data()[range.start * dim..range.end * dim].to_vec();
        let block = Tensor::new(vec![range.len(), dim], data)?;
        match w {
            None => Ok(block),
            Some(w) => matmul_nt_plain(&block, w),
        }
    }
}

/// Grouping state frozen at the warm-up boundary. The filter drawn at that
/// iteration keeps serving as the geometry for group membership, assignment
/// distances and pairing, while the loss keeps drawing fresh filters.
struct Grouping<S: Element> {
    w_matrix: Option<Tensor<S>>,
    ga: GroupAssignment<S>,
    /// Real row → group, fixed once groups exist.
    of_row: Vec<usize>,
}

/// One iteration's frozen randomness and the real-side statistics under it.
struct DrawState<S: Element> {
    filter: Option<FourierLocalFilter<S>>,
    w_matrix: Option<Tensor<S>>,
    t_mat: Tensor<S>,
    inst_stats: ComplexStats<S>,
    group_stats: Option<Vec<Option<ComplexStats<S>>>>,
    warmup: bool,
}

/// The differentiable synthetic branch up to feature rows.
struct FeatureStage<S: Element> {
    tape: GradTape<S>,
    leaf: Value,
    syn_rows: Value,
    syn_layout: RowLayout,
    /// Plain copy of the (normalized) feature maps for assignment updates,
    /// materialized only once grouping exists.
    syn_features: Option<Tensor<S>>,
}

struct TermValues {
    total_v: Value,
    l_ins: f64,
    l_group: f64,
    l_pair: f64,
    total: f64,
}

struct Driver<'a, S: Element> {
    cfg: &'a CondenseConfig,
    extractor: &'a Extractor<S>,
    stats: ChannelStats<S>,
    real: NeighborhoodCols<S>,
    fs: FrequencySampler,
    channels: usize,
    k_eff: usize,
    c_out_eff: usize,
    grouping: Option<Grouping<S>>,
    syn: PatchSet<S>,
    opt: OptimState<S>,
}

impl<'a, S: Element> Driver<'a, S> {
    fn new(real: &PatchSet<S>, extractor: &'a Extractor<S>, cfg: &'a CondenseConfig) -> Result<Self> {
        cfg.validate()?;
        real.validate()?;
        if real.kind != PatchKind::RealLr {
            return Err(Error::Contract(format!("condensation wants real LR patches, got {:?}", real.kind)));
        }
        let toggles = &cfg.toggles;
        let syn = init_synthetic(real, cfg.r, cfg.init_mode, cfg.seeds.init)?;

        // the real branch never changes: extract, normalize, cache neighborhoods
        let feats_real = extractor.extract_plain(&real.pixels)?;
        let channels = feats_real.dim(1);
        let stats = ChannelStats::from_features(&feats_real)?;
        let k_eff = if toggles.use_local_filter { cfg.kernel } else { 1 };
        let prepared = if toggles.use_local_filter {
            batch_norm_plain(&feats_real, &stats)?
        } else {
            feats_real
        };
        let real_cols = NeighborhoodCols::build(&prepared, k_eff, cfg.tile, toggles.use_unfold);

        let c_out_eff = cfg.c_out.min(2 * channels * k_eff * k_eff);
        let rows_dim = if toggles.use_local_filter { c_out_eff } else { channels };
        let fs = FrequencySampler::new(cfg.seeds.freqs, cfg.sigma_t, cfg.freqs, rows_dim)?;

        let numel = syn.pixels.numel();
        Ok(Driver {
            cfg,
            extractor,
            stats,
            real: real_cols,
            fs,
            channels,
            k_eff,
            c_out_eff,
            grouping: None,
            syn,
            opt: OptimState::new(cfg.optimizer, numel),
        })
    }

    fn fraction_at(&self, j: usize) -> f64 {
        let (w, a) = (self.cfg.warmup_end, self.cfg.assign_end);
        if j < w {
            return 0.0;
        }
        if a == w {
            return 1.0;
        }
        (((j - w) as f64) / ((a - w) as f64)).min(1.0)
    }

    /// Draw iteration `j`'s filter (shared by both branches).
    fn filter_at(&self, j: usize) -> Result<Option<FourierLocalFilter<S>>> {
        if !self.cfg.toggles.use_local_filter {
            return Ok(None);
        }
        let seed = derive_seed(self.cfg.seeds.filter, &[j as u64]);
        FourierLocalFilter::random(self.channels, self.cfg.kernel, seed, self.c_out_eff).map(Some)
    }

    /// Group the real feature patches on this iteration's filter geometry.
    fn build_grouping(&mut self, w_matrix: Option<Tensor<S>>) -> Result<()> {
        let real_means = self.real.means(w_matrix.as_ref())?;
        let ga = kmeans_group(&real_means, self.cfg.groups, self.cfg.seeds.kmeans)?;
        let of_row = rows_to_groups(&self.real.layout, &ga.real_groups)?;
        self.grouping = Some(Grouping { w_matrix, ga, of_row });
        Ok(())
    }

    /// Fix iteration `j`'s randomness and compute the real-side statistics
    /// under it. Crossing the warm-up boundary for the first time freezes the
    /// grouping on this iteration's filter.
    fn draw_at(&mut self, j: usize) -> Result<DrawState<S>> {
        let warmup = j < self.cfg.warmup_end;
        let needs_groups = self.cfg.toggles.use_group || self.cfg.toggles.use_pair;

        let filter = self.filter_at(j)?;
        let w_matrix = filter.as_ref().map(|f| f.as_matrix()).transpose()?;
        let t_mat = self.fs.sample::<S>(j as u64);

        if !warmup && needs_groups && self.grouping.is_none() {
            self.build_grouping(w_matrix.clone())?;
        }

        // instance statistics, and per-group ones once groups exist, in a
        // single pass over the projections
        let ips_real = self.real.projections(w_matrix.as_ref(), &t_mat)?;
        let (inst_stats, group_stats) = match (&self.grouping, warmup) {
            (Some(g), false) => {
                let (inst, per) = grouped_stats_from_projections(&ips_real, &g.of_row, g.ga.groups())?;
                (inst, Some(per))
            }
            _ => (stats_from_projections(&ips_real, None)?, None),
        };
        Ok(DrawState { filter, w_matrix, t_mat, inst_stats, group_stats, warmup })
    }

    /// Run the synthetic branch on a fresh tape: extract, normalize with the
    /// real statistics, map through the draw's filter, and lay the result out
    /// as feature rows.
    fn features_stage(&self, ds: &DrawState<S>, pixels: Tensor<S>) -> Result<FeatureStage<S>> {
        let mut tape = GradTape::new();
        let leaf = tape.leaf(pixels);
        let feats = self.extractor.extract(&mut tape, leaf)?;
        let (mapped, plain_src) = match &ds.filter {
            Some(f) => {
                let normed = tape.batch_norm(feats, &self.stats)?;
                (tape.conv2d(normed, f.filter())?, normed)
            }
            None => (feats, feats),
        };
        let (syn_rows, syn_layout) = if self.cfg.toggles.use_unfold {
            let (rows, layout, _) = partition_unfold_on(&mut tape, mapped, self.cfg.tile)?;
            (rows, layout)
        } else {
            let samples = tape.value(mapped).dim(0);
            let rows = tape.spatial_mean(mapped)?;
            (rows, RowLayout { samples, grid: (1, 1), tile: 1 })
        };
        let syn_features = self.grouping.as_ref().map(|_| tape.value(plain_src).clone());
        Ok(FeatureStage { tape, leaf, syn_rows, syn_layout, syn_features })
    }

    /// Re-run the sticky assignment against the current synthetic features.
    fn update_assignment(&mut self, syn_features: &Tensor<S>, fraction: f64) -> Result<()> {
        let (k_eff, tile, use_unfold) = (self.k_eff, self.cfg.tile, self.cfg.toggles.use_unfold);
        if let Some(g) = &mut self.grouping {
            let cols = NeighborhoodCols::build(syn_features, k_eff, tile, use_unfold);
            let syn_means = cols.means(g.w_matrix.as_ref())?;
            g.ga = assign_synthetic(&g.ga, &syn_means, fraction)?;
        }
        Ok(())
    }

    /// Assemble the loss terms on the stage's tape. Warm-up keeps only the
    /// instance term; afterwards group and pair terms join per the toggles.
    fn terms_stage(&self, ds: &DrawState<S>, stage: &mut FeatureStage<S>) -> Result<TermValues> {
        let toggles = &self.cfg.toggles;
        let tape = &mut stage.tape;
        let field = if toggles.use_instance || (!ds.warmup && toggles.use_group) {
            Some(phasor_field(tape, stage.syn_rows, &ds.t_mat)?)
        } else {
            None
        };
        let mut terms: Vec<(f64, Value)> = Vec::new();
        let (mut l_ins, mut l_group, mut l_pair) = (0.0f64, 0.0f64, 0.0f64);
        if toggles.use_instance {
            let (re, im) = mean_phasor(tape, field.as_ref().expect("built above"), None)?;
            let v = chf_against(tape, &ds.inst_stats, re, im, self.cfg.alpha)?;
            l_ins = wide(tape.value(v).data()[0]);
            terms.push((self.cfg.w_ins, v));
        }
        if !ds.warmup {
            if toggles.use_group {
                let g = self.grouping.as_ref().expect("grouping precedes the main phase");
                let subsets = group_row_subsets(&stage.syn_layout, &g.ga.syn_groups, g.ga.groups())?;
                let stats = ds.group_stats.as_deref().expect("grouped pass above");
                let v = group_loss_from_stats(
                    tape,
                    stats,
                    field.as_ref().expect("built above"),
                    &subsets,
                    self.cfg.alpha,
                )?;
                l_group = wide(tape.value(v).data()[0]);
                terms.push((self.cfg.w_group, v));
            }
            if toggles.use_pair {
                let g = self.grouping.as_ref().expect("grouping precedes the main phase");
                let blocks = g
                    .ga
                    .pairs
                    .iter()
                    .map(|&(syn_patch, real_patch)| {
                        let real_block = self.real.patch_block(real_patch, ds.w_matrix.as_ref())?;
                        let group = g.ga.syn_groups[syn_patch].ok_or_else(|| {
                            Error::Contract(format!("paired synthetic patch {syn_patch} has no group"))
                        })?;
                        Ok(PairBlock { group, syn_patch, real_block })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let v = pair_loss_from_blocks(tape, &blocks, stage.syn_rows, &stage.syn_layout)?;
                l_pair = wide(tape.value(v).data()[0]);
                terms.push((self.cfg.w_pair, v));
            }
        }
        let total_v = if terms.is_empty() {
            tape.constant(Tensor::scalar(S::zero()))
        } else {
            tape.add_weighted(&terms)?
        };
        let total = wide(tape.value(total_v).data()[0]);
        Ok(TermValues { total_v, l_ins, l_group, l_pair, total })
    }

    /// The plain (non-tape) counterpart of the features the assignment sees.
    fn assignment_features(&self, pixels: &Tensor<S>) -> Result<Tensor<S>> {
        let feats = self.extractor.extract_plain(pixels)?;
        if self.cfg.toggles.use_local_filter {
            batch_norm_plain(&feats, &self.stats)
        } else {
            Ok(feats)
        }
    }

    fn iterate(&mut self, j: usize) -> Result<IterRecord> {
        let ds = self.draw_at(j)?;
        let mut stage = self.features_stage(&ds, self.syn.pixels.clone())?;
        let fraction = self.fraction_at(j);
        if !ds.warmup {
            if let Some(feats) = stage.syn_features.take() {
                self.update_assignment(&feats, fraction)?;
            }
        }
        let t = self.terms_stage(&ds, &mut stage)?;

        stage.tape.backward(t.total_v)?;
        let grad = stage.tape.grad(stage.leaf)?;
        let grad_norm = grad.l2_norm();
        self.opt.step(&mut self.syn.pixels, grad, self.cfg.lr)?;
        self.syn.pixels.clamp_in_place(S::zero(), S::one());

        Ok(IterRecord {
            iter: j,
            l_ins: t.l_ins,
            l_group: t.l_group,
            l_pair: t.l_pair,
            total: t.total,
            grad_norm,
            fraction,
        })
    }
}

/// One iteration's loss pinned down as a pure function of the synthetic
/// pixels: the filter, the frequency draw, the real-side statistics, the
/// grouping and the assignment are all frozen at construction, so repeated
/// evaluations see the same smooth surface. This is the entry point for
/// finite-difference verification of the end-to-end gradient.
pub struct LossProbe<'a, S: Element> {
    driver: Driver<'a, S>,
    ds: DrawState<S>,
}

impl<'a, S: Element> LossProbe<'a, S> {
    /// Freeze the loss surface the optimizer would see at iteration `iter`,
    /// with the synthetic set still at its initialization. Past the warm-up
    /// boundary the grouping geometry and the assignment (at that iteration's
    /// ramp fraction) are fixed the same way a run would fix them.
    pub fn at_iteration(
        real: &PatchSet<S>,
        extractor: &'a Extractor<S>,
        cfg: &'a CondenseConfig,
        iter: usize,
    ) -> Result<Self> {
        if iter >= cfg.iters {
            return Err(Error::Config(format!(
                "probe iteration {iter} is out of range for a {}-iteration run",
                cfg.iters
            )));
        }
        let mut driver = Driver::new(real, extractor, cfg)?;
        let needs_groups = cfg.toggles.use_group || cfg.toggles.use_pair;
        if iter >= cfg.warmup_end && needs_groups {
            driver.draw_at(cfg.warmup_end)?; // pins the grouping geometry
            let feats = driver.assignment_features(&driver.syn.pixels)?;
            let fraction = driver.fraction_at(iter);
            driver.update_assignment(&feats, fraction)?;
        }
        let ds = driver.draw_at(iter)?;
        Ok(LossProbe { driver, ds })
    }

    /// The synthetic pixels the probe was frozen at.
    pub fn start(&self) -> &Tensor<S> {
        &self.driver.syn.pixels
    }

    /// The total loss at `pixels`.
    pub fn loss(&self, pixels: &Tensor<S>) -> Result<f64> {
        let mut stage = self.driver.features_stage(&self.ds, pixels.clone())?;
        Ok(self.driver.terms_stage(&self.ds, &mut stage)?.total)
    }

    /// The total loss and its analytic gradient at `pixels`.
    pub fn loss_and_gradient(&self, pixels: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
        let mut stage = self.driver.features_stage(&self.ds, pixels.clone())?;
        let terms = self.driver.terms_stage(&self.ds, &mut stage)?;
        stage.tape.backward(terms.total_v)?;
        Ok((terms.total, stage.tape.grad(stage.leaf)?.clone()))
    }
}

/// Attach the failing iteration and the last complete component breakdown.
fn at_iteration(e: Error, j: usize, last: Option<&IterRecord>) -> Error {
    let ctx = match last {
        Some(r) => format!(
            " (last complete iteration {}: l_ins={:.6e} l_group={:.6e} l_pair={:.6e} total={:.6e})",
            r.iter, r.l_ins, r.l_group, r.l_pair, r.total
        ),
        None => String::new(),
    };
    match e {
        Error::Numeric(m) => Error::Numeric(format!("iteration {j}: {m}{ctx}")),
        other => other,
    }
}

/// Condense one instance: the full three-phase optimization loop.
pub fn condense_instance<S: Element>(
    real: &PatchSet<S>,
    extractor: &Extractor<S>,
    cfg: &CondenseConfig,
) -> Result<InstanceResult<S>> {
    let started = Instant::now();
    let mut warnings = Vec::new();
    let toggles = &cfg.toggles;
    if !(toggles.use_instance || toggles.use_group || toggles.use_pair) {
        warnings.push("all loss components are disabled; the synthetic pixels will not change".to_string());
    }

    let mut driver = Driver::new(real, extractor, cfg)?;
    let mut trajectory = Vec::with_capacity(cfg.iters);
    for j in 0..cfg.iters {
        match driver.iterate(j) {
            Ok(rec) => trajectory.push(rec),
            Err(e) => return Err(at_iteration(e, j, trajectory.last())),
        }
    }

    Ok(InstanceResult {
        synthetic: driver.syn,
        trajectory,
        assignment: driver.grouping.map(|g| g.ga),
        elapsed: started.elapsed(),
        warnings,
    })
}

/// Re-wrap an error with the instance that produced it.
fn for_instance_error(e: Error, id: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("instance {id}: {m}")),
        Error::Contract(m) => Error::Contract(format!("instance {id}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("instance {id}: {m}")),
        Error::Format(m) => Error::Format(format!("instance {id}: {m}")),
        Error::Integrity(m) => Error::Integrity(format!("instance {id}: {m}")),
        Error::Backend(m) => Error::Backend(format!("instance {id}: {m}")),
        io @ Error::Io { .. } => io,
    }
}

/// Condense every instance of a dataset. Instances are independent work
/// items: each gets seed streams derived from its id, so results never
/// depend on `parallelism` or manifest order. Failures are isolated per
/// instance unless `fail_fast` is set, which stops at the first error.
pub fn condense_dataset<S: Element>(
    instances: &[InstancePair<S>],
    extractor: &Extractor<S>,
    cfg: &CondenseConfig,
    parallelism: usize,
    fail_fast: bool,
) -> Result<Vec<InstanceOutcome<S>>> {
    cfg.validate()?;
    if parallelism == 0 {
        return Err(Error::Config("parallelism must be >= 1".into()));
    }
    let mut seen = HashSet::new();
    for pair in instances {
        if !seen.insert(&pair.source_id) {
            return Err(Error::Integrity(format!("duplicate instance id {}", pair.source_id)));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {parallelism}-thread pool: {e}")))?;
    let run = |pair: &InstancePair<S>| -> Result<InstanceResult<S>> {
        condense_instance(&pair.lr, extractor, &cfg.for_instance(&pair.source_id))
            .map_err(|e| for_instance_error(e, &pair.source_id))
    };
    if fail_fast {
        pool.install(|| {
            instances
                .par_iter()
                .map(|p| {
                    run(p).map(|r| InstanceOutcome { source_id: p.source_id.clone(), result: Ok(r) })
                })
                .collect()
        })
    } else {
        Ok(pool.install(|| {
            instances
                .par_iter()
                .map(|p| InstanceOutcome { source_id: p.source_id.clone(), result: run(p) })
                .collect()
        }))
    }
}
