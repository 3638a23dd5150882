//! Progressive assignment of synthetic patches to real groups.

use super::GroupAssignment;
use crate::error::{Error, Result};
use crate::numerics::{wide, Element, Tensor};

/// Largest-remainder apportionment of `seats` across groups proportional to
/// `sizes` (remainder ties favor the lowest group index). Exact integer
/// arithmetic; every quota is within one seat of its proportional share.
pub fn largest_remainder(seats: usize, sizes: &[usize]) -> Result<Vec<usize>> {
    let total: u128 = sizes.iter().map(|&s| s as u128).sum();
    if total == 0 {
        if seats == 0 {
            return Ok(vec![0; sizes.len()]);
        }
        return Err(Error::Contract("cannot apportion seats across empty groups".into()));
    }
    let mut quotas = Vec::with_capacity(sizes.len());
    let mut remainders = Vec::with_capacity(sizes.len());
    let mut handed = 0usize;
    for (g, &size) in sizes.iter().enumerate() {
        let num = seats as u128 * size as u128;
        quotas.push((num / total) as usize);
        remainders.push((num % total, g));
        handed += *quotas.last().expect("just pushed");
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, g) in remainders.iter().take(seats - handed) {
        quotas[g] += 1;
    }
    Ok(quotas)
}

/// Assign synthetic patches to groups for the given schedule fraction.
///
/// Seats = `round(fraction * P_syn)` (ties to even), apportioned across
/// groups proportional to their real patch counts. Existing assignments are
/// kept (the ramp only ever adds); new patches claim seats in order of
/// increasing distance to their nearest centroid, falling back to the
/// next-nearest centroid with quota left. Pairs are recomputed for every
/// assigned patch: its nearest same-group real patch by patch-mean
/// distance, ties to the lowest real index.
pub fn assign_synthetic<S: Element>(
    ga: &GroupAssignment<S>,
    syn_means: &Tensor<S>,
    fraction: f64,
) -> Result<GroupAssignment<S>> {
    if syn_means.rank() != 2 || syn_means.dim(1) != ga.centroids.dim(1) {
        return Err(Error::Contract(format!(
            "synthetic means {:?} do not match centroid dimension {}",
            syn_means.shape(),
            ga.centroids.dim(1)
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Contract(format!("assignment fraction must lie in [0,1], got {fraction}")));
    }
    if fraction < ga.fraction {
        return Err(Error::Contract(format!(
            "assignment fraction decreased: {} after {}",
            fraction, ga.fraction
        )));
    }

    let p_syn = syn_means.dim(0);
    let (m, d) = (ga.groups(), ga.centroids.dim(1));
    let mut next = ga.clone();
    next.fraction = fraction;
    if next.syn_groups.is_empty() {
        next.syn_groups = vec![None; p_syn];
    } else if next.syn_groups.len() != p_syn {
        return Err(Error::Contract(format!(
            "synthetic patch count changed: {} then {p_syn}",
            next.syn_groups.len()
        )));
    }

    let seats = (fraction * p_syn as f64).round_ties_even() as usize;
    let quotas = largest_remainder(seats, &ga.group_sizes)?;
    let mut held = vec![0usize; m];
    for g in next.syn_groups.iter().flatten() {
        held[*g] += 1;
    }
    let assigned: usize = held.iter().sum();
    let mut free: Vec<usize> = (0..m).map(|g| quotas[g].saturating_sub(held[g])).collect();
    let mut need = seats.saturating_sub(assigned);

    if need > 0 {
        let dist_to = |patch: usize, g: usize| -> f64 {
            let pr = &syn_means.data()[patch * d..(patch + 1) * d];
            let cr = &ga.centroids.data()[g * d..(g + 1) * d];
            pr.iter().zip(cr).map(|(&a, &b)| {
                let delta = wide(a) - wide(b);
                delta * delta
            }).sum()
        };
        let mut waiting: Vec<(f64, usize)> = next
            .syn_groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_none())
            .map(|(patch, _)| {
                let best = (0..m).map(|g| dist_to(patch, g)).fold(f64::INFINITY, f64::min);
                (best, patch)
            })
            .collect();
        waiting.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, patch) in waiting {
            if need == 0 {
                break;
            }
            let mut order: Vec<(f64, usize)> = (0..m).map(|g| (dist_to(patch, g), g)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some(&(_, g)) = order.iter().find(|&&(_, g)| free[g] > 0) {
                next.syn_groups[patch] = Some(g);
                free[g] -= 1;
                need -= 1;
            }
        }
    }

    next.pairs = recompute_pairs(&next, syn_means);
    Ok(next)
}

/// Nearest same-group real patch for every assigned synthetic patch.
fn recompute_pairs<S: Element>(ga: &GroupAssignment<S>, syn_means: &Tensor<S>) -> Vec<(usize, usize)> {
    let real_means = &ga.real_means;
    let d = syn_means.dim(1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); ga.groups()];
    for (patch, &g) in ga.real_groups.iter().enumerate() {
        members[g].push(patch);
    }
    let mut pairs = Vec::new();
    for (syn, g) in ga.syn_groups.iter().enumerate() {
        let Some(g) = *g else { continue };
        let sr = &syn_means.data()[syn * d..(syn + 1) * d];
        let mut best: Option<(f64, usize)> = None;
        for &real in &members[g] {
            let rr = &real_means.data()[real * d..(real + 1) * d];
            let dist: f64 = sr.iter().zip(rr).map(|(&a, &b)| {
                let delta = wide(a) - wide(b);
                delta * delta
            }).sum();
            if best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, real));
            }
        }
        if let Some((_, real)) = best {
            pairs.push((syn, real));
        }
    }
    pairs
}
