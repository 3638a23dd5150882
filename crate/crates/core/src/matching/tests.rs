use super::*;
use crate::numerics::GradTape;
use crate::rlff::partition_unfold;
use rand::Rng;

fn rows_of(data: &[f64], c: usize) -> Tensor<f64> {
    Tensor::new(vec![data.len() / c, c], data.to_vec()).unwrap()
}

#[test]
fn sampler_is_deterministic_per_draw() {
    let fs = FrequencySampler::new(7, 1.0, 4, 3).unwrap();
    let a = fs.sample::<f64>(2);
    let b = fs.sample::<f64>(2);
    assert_eq!(a.data(), b.data());
    let c = fs.sample::<f64>(3);
    assert_ne!(a.data(), c.data());
}

#[test]
fn sampler_variance_matches_sigma() {
    let sigma = 0.8f64;
    let fs = FrequencySampler::new(11, sigma, 8, 5).unwrap();
    let mut acc = 0.0f64;
    let mut acc2 = 0.0f64;
    let mut n = 0usize;
    for draw in 0..2500u64 {
        for &v in fs.sample::<f64>(draw).data() {
            acc += v;
            acc2 += v * v;
            n += 1;
        }
    }
    let mean = acc / n as f64;
    let var = acc2 / n as f64 - mean * mean;
    let se = sigma * sigma * (2.0 / (n as f64 - 1.0)).sqrt();
    assert!((var - sigma * sigma).abs() <= 3.0 * se, "var {var} vs {} +- {se}", sigma * sigma);
}

#[test]
fn zero_sigma_gives_zero_frequencies() {
    let fs = FrequencySampler::new(1, 0.0, 3, 2).unwrap();
    assert!(fs.sample::<f64>(0).data().iter().all(|&v| v == 0.0));
}

#[test]
fn char_fn_at_zero_frequency_is_one() {
    let rows = rows_of(&[0.3, -1.2, 4.0, 0.01, 2.2, -0.7], 2);
    let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let stats = char_fn(&rows, &t).unwrap();
    assert_eq!(stats.re.data()[0], 1.0);
    assert_eq!(stats.im.data()[0], 0.0);
    assert_eq!(stats.amplitude.data()[0], 1.0);
    assert_eq!(stats.phase.data()[0], 0.0);
}

#[test]
fn amplitude_never_exceeds_one() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let r = rng.gen_range(1..6);
        let c = rng.gen_range(1..4);
        let rows = Tensor::<f64>::from_fn(&[r, c], |_| rng.gen_range(-3.0..3.0));
        let t = Tensor::<f64>::from_fn(&[4, c], |_| rng.gen_range(-2.0..2.0));
        let stats = char_fn(&rows, &t).unwrap();
        for &a in stats.amplitude.data() {
            assert!(a <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn opposite_unit_rows_cancel_at_half_pi() {
    let rows = rows_of(&[1.0, -1.0], 1);
    let t = Tensor::new(vec![1, 1], vec![std::f64::consts::FRAC_PI_2]).unwrap();
    let stats = char_fn(&rows, &t).unwrap();
    assert!(stats.amplitude.data()[0] < 1e-15);
}

#[test]
fn empty_rows_are_refused() {
    let rows = Tensor::<f64>::zeros(&[0, 2]);
    let t = Tensor::<f64>::zeros(&[3, 2]);
    assert!(matches!(char_fn(&rows, &t), Err(Error::Contract(_))));
}

#[test]
fn identical_sets_have_negligible_discrepancy() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let rows = Tensor::<f64>::from_fn(&[7, 3], |_| rng.gen_range(-1.0..1.0));
    let t = Tensor::<f64>::from_fn(&[16, 3], |_| rng.gen_range(-2.0..2.0));
    let loss = chf_discrepancy(&rows, &rows, &t, 0.5).unwrap();
    // the stabilizer sets a floor of sqrt(CHF_EPS) = 1e-6 even at zero mismatch
    assert!((loss - CHF_EPS.sqrt()).abs() < 1e-9, "loss {loss}");
}

#[test]
fn closed_form_single_offset_rows() {
    // real row at 0, synthetic at delta: amplitudes are both 1, so only the
    // phase term remains and the discrepancy is mean_t sqrt(1 - cos(t*delta))
    let delta = 0.9f64;
    let real = rows_of(&[0.0], 1);
    let syn = rows_of(&[delta], 1);
    let tv = [0.7, -1.3, 2.1, 0.4, -2.6];
    let t = Tensor::new(vec![5, 1], tv.to_vec()).unwrap();
    let loss = chf_discrepancy(&real, &syn, &t, 0.5).unwrap();
    let want: f64 = tv.iter().map(|v| (1.0 - (v * delta).cos() + CHF_EPS).sqrt()).sum::<f64>() / 5.0;
    assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
}

#[test]
fn amplitude_only_discrepancy_ignores_row_order() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut shuffled = data.clone();
    shuffled.rotate_left(4); // whole-row rotation: rows permuted, entries intact
    let t = Tensor::<f64>::from_fn(&[8, 4], |_| rng.gen_range(-2.0..2.0));
    let loss = chf_discrepancy(&rows_of(&data, 4), &rows_of(&shuffled, 4), &t, 1.0).unwrap();
    assert!(loss <= 1e-6, "loss {loss}");
}

#[test]
fn permutation_invariance_of_the_statistic() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
    let data: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut perm = data.clone();
    perm.rotate_left(8);
    let t = Tensor::<f64>::from_fn(&[6, 4], |_| rng.gen_range(-2.0..2.0));
    let base = rows_of(&data, 4);
    let reordered = rows_of(&perm, 4);
    let syn = Tensor::<f64>::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
    let a = chf_discrepancy(&base, &syn, &t, 0.5).unwrap();
    let b = chf_discrepancy(&reordered, &syn, &t, 0.5).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn tape_discrepancy_matches_plain() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    let real = Tensor::<f64>::from_fn(&[6, 3], |_| rng.gen_range(-1.0..1.0));
    let syn = Tensor::<f64>::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0));
    let t = Tensor::<f64>::from_fn(&[10, 3], |_| rng.gen_range(-2.0..2.0));
    let plain = chf_discrepancy(&real, &syn, &t, 0.3).unwrap();
    let mut tape = GradTape::new();
    let s = tape.leaf(syn);
    let loss = chf_discrepancy_on(&mut tape, &real, s, &t, 0.3).unwrap();
    let on_tape = crate::numerics::wide(tape.value(loss).data()[0]);
    assert!((plain - on_tape).abs() < 1e-12, "{plain} vs {on_tape}");
}

#[test]
fn discrepancy_gradient_matches_finite_differences() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
    let real = Tensor::<f64>::from_fn(&[5, 2], |_| rng.gen_range(-1.0..1.0));
    let syn = Tensor::<f64>::from_fn(&[3, 2], |_| rng.gen_range(-1.0..1.0));
    let t = Tensor::<f64>::from_fn(&[7, 2], |_| rng.gen_range(-2.0..2.0));
    let mut tape = GradTape::new();
    let s = tape.leaf(syn.clone());
    let loss = chf_discrepancy_on(&mut tape, &real, s, &t, 0.5).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(s).unwrap().clone();
    let h = 1e-6;
    for i in 0..syn.numel() {
        let mut plus = syn.clone();
        plus.data_mut()[i] += h;
        let mut minus = syn.clone();
        minus.data_mut()[i] -= h;
        let fd = (chf_discrepancy(&real, &plus, &t, 0.5).unwrap()
            - chf_discrepancy(&real, &minus, &t, 0.5).unwrap())
            / (2.0 * h);
        let a = grad.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        assert!(rel < 1e-7, "entry {i}: analytic {a} vs fd {fd}");
    }
}

#[test]
fn alpha_outside_unit_interval_is_config_error() {
    let rows = rows_of(&[0.0, 1.0], 1);
    let t = Tensor::<f64>::zeros(&[2, 1]);
    assert!(matches!(chf_discrepancy(&rows, &rows, &t, 1.5), Err(Error::Config(_))));
}

#[test]
fn single_group_centroid_is_global_mean() {
    let means = rows_of(&[0.0, 0.0, 2.0, 0.0, 1.0, 3.0], 2);
    let ga = kmeans_group(&means, 1, 4).unwrap();
    assert_eq!(ga.real_groups, vec![0, 0, 0]);
    assert_eq!(ga.group_sizes, vec![3]);
    assert!((ga.centroids.data()[0] - 1.0).abs() < 1e-12);
    assert!((ga.centroids.data()[1] - 1.0).abs() < 1e-12);
}

#[test]
fn separated_blobs_are_recovered() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let mut data = Vec::new();
    for i in 0..10 {
        let cx = if i < 5 { -4.0 } else { 4.0 };
        data.push(cx + rng.gen_range(-0.3..0.3));
        data.push(rng.gen_range(-0.3..0.3));
    }
    let ga = kmeans_group(&rows_of(&data, 2), 2, 17).unwrap();
    let left = ga.real_groups[0];
    assert!(ga.real_groups[..5].iter().all(|&g| g == left));
    assert!(ga.real_groups[5..].iter().all(|&g| g != left));
    let again = kmeans_group(&rows_of(&data, 2), 2, 17).unwrap();
    assert_eq!(ga.real_groups, again.real_groups);
}

#[test]
fn too_many_groups_is_config_error() {
    let means = rows_of(&[0.0, 1.0], 1);
    assert!(matches!(kmeans_group(&means, 3, 0), Err(Error::Config(_))));
}

#[test]
fn small_instance_matches_exhaustive_optimum() {
    // every 2-partition of 6 points, best within-cluster cost
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
    let pts: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let means = rows_of(&pts, 2);
    let cost_of = |labels: &[usize]| -> f64 {
        let mut cost = 0.0;
        for g in 0..2 {
            let members: Vec<usize> = (0..6).filter(|&i| labels[i] == g).collect();
            if members.is_empty() {
                return f64::INFINITY;
            }
            let mut c = [0.0f64; 2];
            for &i in &members {
                c[0] += pts[i * 2];
                c[1] += pts[i * 2 + 1];
            }
            c[0] /= members.len() as f64;
            c[1] /= members.len() as f64;
            for &i in &members {
                cost += (pts[i * 2] - c[0]).powi(2) + (pts[i * 2 + 1] - c[1]).powi(2);
            }
        }
        cost
    };
    let mut best = f64::INFINITY;
    for mask in 0..64u32 {
        let labels: Vec<usize> = (0..6).map(|i| ((mask >> i) & 1) as usize).collect();
        best = best.min(cost_of(&labels));
    }
    let ga = kmeans_group(&means, 2, 3).unwrap();
    let got = cost_of(&ga.real_groups);
    assert!(got <= best + 1e-9, "kmeans cost {got} vs optimum {best}");
}

#[test]
fn largest_remainder_hand_case() {
    assert_eq!(largest_remainder(10, &[50, 30, 20]).unwrap(), vec![5, 3, 2]);
    assert_eq!(largest_remainder(0, &[5, 5]).unwrap(), vec![0, 0]);
}

#[test]
fn quotas_stay_proportional_and_exact() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    for _ in 0..300 {
        let m = rng.gen_range(1..7);
        let sizes: Vec<usize> = (0..m).map(|_| rng.gen_range(1..40)).collect();
        let seats = rng.gen_range(0..60);
        let quotas = largest_remainder(seats, &sizes).unwrap();
        assert_eq!(quotas.iter().sum::<usize>(), seats);
        let total: f64 = sizes.iter().sum::<usize>() as f64;
        for (q, &s) in quotas.iter().zip(&sizes) {
            let share = seats as f64 * s as f64 / total;
            assert!((*q as f64 - share).abs() < 1.0 + 1e-9, "quota {q} vs share {share}");
        }
    }
}

fn toy_assignment() -> GroupAssignment<f64> {
    // 12 real patches on a line: groups around 0, 5, 10
    let mut real = Vec::new();
    for g in 0..3 {
        for i in 0..(g + 3) {
            real.push(5.0 * g as f64 + 0.1 * i as f64);
        }
    }
    let means = rows_of(&real, 1);
    kmeans_group(&means, 3, 1).unwrap()
}

#[test]
fn no_assignments_at_zero_fraction() {
    let ga = toy_assignment();
    let syn = rows_of(&[0.2, 5.2, 9.8, 4.9], 1);
    let out = assign_synthetic(&ga, &syn, 0.0).unwrap();
    assert_eq!(out.assigned(), 0);
    assert!(out.pairs.is_empty());
}

#[test]
fn ramp_is_sticky_monotone_and_quota_exact() {
    let ga = toy_assignment();
    let syn = Tensor::<f64>::from_fn(&[9, 1], |i| (i as f64) * 1.3);
    let mut cur = ga;
    let mut prev: Vec<Option<usize>> = vec![None; 9];
    for &fraction in &[0.0, 0.25, 0.4, 0.7, 1.0] {
        cur = assign_synthetic(&cur, &syn, fraction).unwrap();
        let seats = (fraction * 9.0).round_ties_even() as usize;
        assert_eq!(cur.assigned(), seats, "fraction {fraction}");
        for (a, b) in prev.iter().zip(&cur.syn_groups) {
            if let Some(g) = a {
                assert_eq!(Some(*g), *b, "assignment must be sticky");
            }
        }
        for &(s, r) in &cur.pairs {
            assert_eq!(cur.syn_groups[s].unwrap(), cur.real_groups[r], "pairs stay within one group");
        }
        prev = cur.syn_groups.clone();
    }
    assert_eq!(cur.pairs.len(), 9);
}

#[test]
fn decreasing_fraction_is_refused() {
    let ga = toy_assignment();
    let syn = rows_of(&[0.0, 5.0], 1);
    let cur = assign_synthetic(&ga, &syn, 0.5).unwrap();
    assert!(matches!(assign_synthetic(&cur, &syn, 0.25), Err(Error::Contract(_))));
}

#[test]
fn blocked_patch_takes_next_nearest_group_with_quota() {
    // groups sized [2, 2] -> one seat each at fraction 1 with 2 synthetic
    // patches; both synthetic patches sit nearest to group 0, so the second
    // (farther) one must overflow into group 1
    let means = rows_of(&[0.0, 0.1, 10.0, 10.1], 1);
    let ga = kmeans_group(&means, 2, 2).unwrap();
    let g0 = ga.real_groups[0];
    let syn = rows_of(&[0.2, 0.3], 1);
    let out = assign_synthetic(&ga, &syn, 1.0).unwrap();
    assert_eq!(out.syn_groups[0], Some(g0));
    assert_eq!(out.syn_groups[1], Some(1 - g0));
}

#[test]
fn single_group_pairs_with_globally_nearest_real_patch() {
    let means = rows_of(&[0.0, 1.0], 1);
    let ga = kmeans_group(&means, 1, 0).unwrap();
    let syn = rows_of(&[0.4], 1);
    let out = assign_synthetic(&ga, &syn, 1.0).unwrap();
    assert_eq!(out.pairs, vec![(0, 0)]);
}

#[test]
fn pair_loss_hand_case() {
    // 1-D patch features, tile 1: real patches {0.0, 1.0}, synthetic {0.4}
    // pairs with 0.0 and the loss is |0.4 - 0.0| = 0.4
    let real_map = Tensor::<f64>::new(vec![2, 1, 1, 1], vec![0.0, 1.0]).unwrap();
    let real = partition_unfold(&real_map, 1).unwrap();
    let ga = kmeans_group(&patch_means(&real), 1, 0).unwrap();
    let syn_map = Tensor::<f64>::new(vec![1, 1, 1, 1], vec![0.4]).unwrap();
    let syn = partition_unfold(&syn_map, 1).unwrap();
    let ga = assign_synthetic(&ga, &patch_means(&syn), 1.0).unwrap();
    assert_eq!(ga.pairs, vec![(0, 0)]);
    let mut tape = GradTape::new();
    let s = tape.leaf(syn.rows.clone());
    let loss = pair_loss_on(&mut tape, &ga, &real, s, &syn.layout).unwrap();
    assert!((tape.value(loss).data()[0] - 0.4).abs() < 1e-12);
    tape.backward(loss).unwrap();
    assert!((tape.grad(s).unwrap().data()[0] - 1.0).abs() < 1e-12);
}

#[test]
fn identical_pairs_have_zero_loss() {
    let real_map = Tensor::<f64>::from_fn(&[2, 2, 2, 2], |i| (i as f64 * 0.37).sin());
    let real = partition_unfold(&real_map, 2).unwrap();
    let ga = kmeans_group(&patch_means(&real), 2, 5).unwrap();
    let ga = assign_synthetic(&ga, &patch_means(&real), 1.0).unwrap();
    let mut tape = GradTape::new();
    let s = tape.leaf(real.rows.clone());
    let loss = pair_loss_on(&mut tape, &ga, &real, s, &real.layout).unwrap();
    assert_eq!(tape.value(loss).data()[0], 0.0);
}

#[test]
fn group_loss_with_one_group_collapses_to_instance_statistic() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(30);
    let real_map = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |_| rng.gen_range(0.0..1.0));
    let syn_map = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |_| rng.gen_range(0.0..1.0));
    let real = partition_unfold(&real_map, 2).unwrap();
    let syn = partition_unfold(&syn_map, 2).unwrap();
    let ga = kmeans_group(&patch_means(&real), 1, 0).unwrap();
    let ga = assign_synthetic(&ga, &patch_means(&syn), 1.0).unwrap();
    let t = Tensor::<f64>::from_fn(&[12, 3], |_| rng.gen_range(-2.0..2.0));

    let mut tape = GradTape::new();
    let s = tape.leaf(syn.rows.clone());
    let grouped = group_loss_on(&mut tape, &ga, &real, s, &syn.layout, &t, 0.5).unwrap();
    let direct = chf_discrepancy_on(&mut tape, &real.rows, s, &t, 0.5).unwrap();
    let g = tape.value(grouped).data()[0];
    let d = tape.value(direct).data()[0];
    assert!((g - d).abs() < 1e-12, "{g} vs {d}");
}

#[test]
fn group_loss_without_assignments_is_zero() {
    let real_map = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.11).cos());
    let real = partition_unfold(&real_map, 2).unwrap();
    let ga = kmeans_group(&patch_means(&real), 2, 1).unwrap();
    let syn_map = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.07).sin());
    let syn = partition_unfold(&syn_map, 2).unwrap();
    let ga = assign_synthetic(&ga, &patch_means(&syn), 0.0).unwrap();
    let t = Tensor::<f64>::from_fn(&[5, 2], |i| (i as f64) - 2.0);
    let mut tape = GradTape::new();
    let s = tape.leaf(syn.rows.clone());
    let loss = group_loss_on(&mut tape, &ga, &real, s, &syn.layout, &t, 0.5).unwrap();
    assert_eq!(tape.value(loss).data()[0], 0.0);
}

#[test]
fn patch_means_average_rows_with_padding() {
    // [1,1,2,3] tile 2: two tiles, second zero-padded on its right column
    let map = Tensor::<f64>::new(vec![1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let rows = partition_unfold(&map, 2).unwrap();
    let means = patch_means(&rows);
    assert_eq!(means.shape(), &[2, 1]);
    assert!((means.data()[0] - (1.0 + 2.0 + 4.0 + 5.0) / 4.0).abs() < 1e-15);
    assert!((means.data()[1] - (3.0 + 0.0 + 6.0 + 0.0) / 4.0).abs() < 1e-15);
}

#[test]
fn row_group_bookkeeping() {
    let layout = crate::rlff::RowLayout { samples: 1, grid: (2, 1), tile: 2 };
    let of_row = rows_to_groups(&layout, &[1, 0]).unwrap();
    assert_eq!(of_row, vec![1, 1, 1, 1, 0, 0, 0, 0]);
    let subsets = group_row_subsets(&layout, &[Some(1), None], 2).unwrap();
    assert!(subsets[0].is_empty());
    assert_eq!(subsets[1], vec![0, 1, 2, 3]);
}
