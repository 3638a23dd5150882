//! K-means grouping of real feature patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{num, wide, Element, Tensor};
use crate::seed::derive_seed;

/// Grouping of real feature patches plus the progressive synthetic
/// assignment state layered on top of it.
#[derive(Clone, Debug)]
pub struct GroupAssignment<S: Element> {
    /// Group centroids `[M, D]` in the grouping feature space.
    pub centroids: Tensor<S>,
    /// The grouped real patch means `[P_real, D]` (kept for pairing).
    pub real_means: Tensor<S>,
    /// Group of each real patch.
    pub real_groups: Vec<usize>,
    /// Real patches per group.
    pub group_sizes: Vec<usize>,
    /// Group of each synthetic patch (`None` = not yet assigned). Empty
    /// until the first assignment call fixes the synthetic patch count.
    pub syn_groups: Vec<Option<usize>>,
    /// `(synthetic patch, real patch)` partners, ascending synthetic index.
    pub pairs: Vec<(usize, usize)>,
    /// Largest assignment fraction seen so far; assignment only ramps up.
    pub fraction: f64,
}

impl<S: Element> GroupAssignment<S> {
    pub fn groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn assigned(&self) -> usize {
        self.syn_groups.iter().filter(|g| g.is_some()).count()
    }
}

const RESTARTS: u64 = 8;
const MAX_ROUNDS: usize = 100;
const MOVE_TOL: f64 = 1e-6;

/// Group `means` (`[P, D]` patch-mean rows) into `m` clusters: seeded
/// k-means++ starts, Lloyd refinement until centroids move less than 1e-6
/// or 100 rounds. Distance ties resolve to the lowest centroid index and an
/// emptied cluster is repaired by splitting the largest one at its farthest
/// member. The best of eight restarts (lowest within-cluster cost) wins.
pub fn kmeans_group<S: Element>(means: &Tensor<S>, m: usize, seed: u64) -> Result<GroupAssignment<S>> {
    if means.rank() != 2 {
        return Err(Error::Contract(format!("k-means wants [P,D] patch means, got {:?}", means.shape())));
    }
    let (p, d) = (means.dim(0), means.dim(1));
    if m == 0 || m > p {
        return Err(Error::Config(format!("group count {m} out of 1..={p}")));
    }
    let points: Vec<f64> = means.data().iter().map(|&v| wide(v)).collect();
    let mut best: Option<(f64, Vec<f64>, Vec<usize>)> = None;
    for restart in 0..RESTARTS {
        let run = lloyd(&points, p, d, m, derive_seed(seed, &[restart]));
        if best.as_ref().is_none_or(|b| run.0 < b.0) {
            best = Some(run);
        }
    }
    let (_, centroids, assignment) = best.expect("at least one restart");
    let mut group_sizes = vec![0usize; m];
    for &g in &assignment {
        group_sizes[g] += 1;
    }
    Ok(GroupAssignment {
        centroids: Tensor::new(vec![m, d], centroids.iter().map(|&v| num::<S>(v)).collect())?,
        real_means: means.clone(),
        real_groups: assignment,
        group_sizes,
        syn_groups: Vec::new(),
        pairs: Vec::new(),
        fraction: 0.0,
    })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[f64], m: usize, d: usize) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for g in 0..m {
        let dist = dist2(point, &centroids[g * d..(g + 1) * d]);
        if dist < best.1 {
            best = (g, dist);
        }
    }
    best
}

/// One seeded k-means run; returns (within-cluster cost, centroids, assignment).
fn lloyd(points: &[f64], p: usize, d: usize, m: usize, seed: u64) -> (f64, Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |i: usize| &points[i * d..(i + 1) * d];

    // k-means++ seeding: subsequent centers drawn proportional to squared
    // distance from the chosen set
    let mut centroids = Vec::with_capacity(m * d);
    let first = rng.gen_range(0..p);
    centroids.extend_from_slice(row(first));
    let mut min_d2: Vec<f64> = (0..p).map(|i| dist2(row(i), row(first))).collect();
    for chosen in 1..m {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = p - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // all points coincide with chosen centers; any pick is equivalent
            rng.gen_range(0..p)
        };
        centroids.extend_from_slice(row(pick));
        for i in 0..p {
            let dist = dist2(row(i), &centroids[chosen * d..(chosen + 1) * d]);
            if dist < min_d2[i] {
                min_d2[i] = dist;
            }
        }
    }

    let mut assignment = vec![0usize; p];
    for _ in 0..MAX_ROUNDS {
        for i in 0..p {
            assignment[i] = nearest(row(i), &centroids, m, d).0;
        }
        repair_empty(points, p, d, m, &mut centroids, &mut assignment);

        let mut sums = vec![0.0f64; m * d];
        let mut counts = vec![0usize; m];
        for i in 0..p {
            let g = assignment[i];
            counts[g] += 1;
            for j in 0..d {
                sums[g * d + j] += points[i * d + j];
            }
        }
        let mut movement = 0.0f64;
        for g in 0..m {
            let mut shift = 0.0f64;
            for j in 0..d {
                let nc = sums[g * d + j] / counts[g] as f64;
                let delta = nc - centroids[g * d + j];
                shift += delta * delta;
                centroids[g * d + j] = nc;
            }
            movement = movement.max(shift.sqrt());
        }
        if movement < MOVE_TOL {
            break;
        }
    }

    let mut cost = 0.0f64;
    for i in 0..p {
        let (g, dist) = nearest(row(i), &centroids, m, d);
        assignment[i] = g;
        cost += dist;
    }
    repair_empty(points, p, d, m, &mut centroids, &mut assignment);
    (cost, centroids, assignment)
}

/// Give every empty cluster the farthest member of the largest cluster.
fn repair_empty(points: &[f64], p: usize, d: usize, m: usize, centroids: &mut [f64], assignment: &mut [usize]) {
    for _ in 0..m {
        let mut counts = vec![0usize; m];
        for &g in assignment.iter() {
            counts[g] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let largest = (0..m).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).expect("m >= 1");
        let mut far = (usize::MAX, -1.0f64);
        for i in 0..p {
            if assignment[i] == largest {
                let dist = dist2(&points[i * d..(i + 1) * d], &centroids[largest * d..(largest + 1) * d]);
                if dist > far.1 {
                    far = (i, dist);
                }
            }
        }
        let (mover, _) = far;
        assignment[mover] = empty;
        centroids[empty * d..(empty + 1) * d].copy_from_slice(&points[mover * d..(mover + 1) * d]);
    }
}
