//! Separable bicubic resampling (Keys kernel, a = -0.5).
//!
//! Downsampling stretches the kernel by the scale factor (the usual
//! antialiased convention); upsampling uses the 4-tap kernel directly. Taps
//! beyond the border are clamped to the edge pixel, and the weights of every
//! output position are normalized. Sums are anchored at the nearest input
//! pixel — `out = v_anchor + Σ w_j (v_j - v_anchor)` — so a constant input
//! reproduces exactly.

use crate::datapipe::{PatchKind, PatchSet};
use crate::error::{Error, Result};
use crate::numerics::{num, wide, Element, Tensor};

fn keys(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        A * (((x - 5.0) * x + 8.0) * x - 4.0)
    } else {
        0.0
    }
}

/// Normalized taps for one output position: anchor index plus
/// (input index, weight) pairs.
struct Taps {
    anchor: usize,
    weights: Vec<(usize, f64)>,
}

/// Tap table for resampling a `len`-pixel axis to `out_len` pixels.
fn tap_table(len: usize, out_len: usize) -> Vec<Taps> {
    let scale = len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    (0..out_len)
        .map(|o| {
            let x0 = (o as f64 + 0.5) * scale - 0.5;
            let lo = (x0 - 2.0 * stretch).floor() as isize + 1;
            let hi = (x0 + 2.0 * stretch).ceil() as isize - 1;
            let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
            let mut total = 0.0f64;
            for j in lo..=hi {
                let w = keys((j as f64 - x0) / stretch);
                if w != 0.0 {
                    weights.push((j.clamp(0, len as isize - 1) as usize, w));
                    total += w;
                }
            }
            for (_, w) in &mut weights {
                *w /= total;
            }
            Taps {
                anchor: (x0.round().max(0.0) as usize).min(len - 1),
                weights,
            }
        })
        .collect()
}

/// Resample the last axis of `[rows, len]` data.
fn resample_last_axis<S: Element>(data: &[S], rows: usize, len: usize, out_len: usize) -> Vec<S> {
    let taps = tap_table(len, out_len);
    let mut out = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        let line = &data[r * len..(r + 1) * len];
        for t in &taps {
            let anchor = wide(line[t.anchor]);
            let mut acc = 0.0f64;
            for &(j, w) in &t.weights {
                acc += w * (wide(line[j]) - anchor);
            }
            out.push(num::<S>(anchor + acc));
        }
    }
    out
}

/// Swap the last two axes of `[rows, a, b]` data.
fn transpose_last_two<S: Element>(data: &[S], rows: usize, a: usize, b: usize) -> Vec<S> {
    let mut out = vec![S::zero(); data.len()];
    for r in 0..rows {
        let base = r * a * b;
        for i in 0..a {
            for j in 0..b {
                out[base + j * a + i] = data[base + i * b + j];
            }
        }
    }
    out
}

/// Bicubic resize of `[N, C, H, W]` pixels to `[N, C, out_h, out_w]`,
/// without any output clamping (exposes kernel overshoot).
pub fn bicubic_resize_raw<S: Element>(input: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    if input.rank() != 4 {
        return Err(Error::Contract(format!("resize wants [N,C,H,W], got {:?}", input.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let horizontal = resample_last_axis(input.data(), n * c * h, w, out_w);
    let flipped = transpose_last_two(&horizontal, n * c, h, out_w);
    let vertical = resample_last_axis(&flipped, n * c * out_w, h, out_h);
    let restored = transpose_last_two(&vertical, n * c, out_w, out_h);
    Tensor::new(vec![n, c, out_h, out_w], restored)
}

fn resize_clamped<S: Element>(input: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let mut out = bicubic_resize_raw(input, out_h, out_w)?;
    out.clamp_in_place(S::zero(), S::one());
    Ok(out)
}

/// Degrade HR patches to LR by bicubic downsampling. The patch size must be
/// divisible by the scale.
pub fn downsample_bicubic<S: Element>(hr: &PatchSet<S>, scale: usize) -> Result<PatchSet<S>> {
    let kind = match hr.kind {
        PatchKind::RealHr => PatchKind::RealLr,
        PatchKind::SyntheticHr => PatchKind::SyntheticLr,
        other => return Err(Error::Contract(format!("cannot downsample {other:?} patches"))),
    };
    if scale == 0 {
        return Err(Error::Config("scale must be positive".into()));
    }
    let (h, w) = (hr.height(), hr.width());
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::Config(format!("patch size {h}x{w} not divisible by scale {scale}")));
    }
    PatchSet::new(
        resize_clamped(&hr.pixels, h / scale, w / scale)?,
        hr.source_id.clone(),
        hr.coords.clone(),
        kind,
    )
}

/// Upsample LR patches by the bicubic kernel (the built-in teacher path).
pub fn upsample_bicubic<S: Element>(lr: &PatchSet<S>, scale: usize) -> Result<PatchSet<S>> {
    let kind = match lr.kind {
        PatchKind::RealLr => PatchKind::RealHr,
        PatchKind::SyntheticLr => PatchKind::SyntheticHr,
        other => return Err(Error::Contract(format!("cannot upsample {other:?} patches"))),
    };
    if scale == 0 {
        return Err(Error::Config("scale must be positive".into()));
    }
    PatchSet::new(
        resize_clamped(&lr.pixels, lr.height() * scale, lr.width() * scale)?,
        lr.source_id.clone(),
        lr.coords.clone(),
        kind,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn hr_set(pixels: Tensor<f64>) -> PatchSet<f64> {
        PatchSet::new(pixels, "t".into(), vec![], PatchKind::RealHr).unwrap()
    }

    #[test]
    fn kernel_basics() {
        assert_eq!(keys(0.0), 1.0);
        assert_eq!(keys(1.0), 0.0);
        assert_eq!(keys(2.0), 0.0);
        assert_eq!(keys(-1.5), keys(1.5));
        assert!((keys(0.5) - 0.5625).abs() < 1e-15);
        assert!((keys(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn constant_patches_stay_exactly_constant() {
        for &v in &[0.0, 0.37, 1.0] {
            let set = hr_set(Tensor::filled(&[2, 3, 8, 8], v));
            let down = downsample_bicubic(&set, 2).unwrap();
            assert!(down.pixels.data().iter().all(|&p| p == v), "value {v}");
            let up = upsample_bicubic(&down, 4).unwrap();
            assert!(up.pixels.data().iter().all(|&p| p == v));
        }
    }

    #[test]
    fn unit_scale_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let set = hr_set(Tensor::from_fn(&[1, 3, 6, 6], |_| rng.gen_range(0.0..1.0)));
        let same = downsample_bicubic(&set, 1).unwrap();
        assert_eq!(same.pixels.data(), set.pixels.data());
        let up = upsample_bicubic(&hr_lr(&set), 1).unwrap();
        assert_eq!(up.pixels.data(), set.pixels.data());
    }

    fn hr_lr(set: &PatchSet<f64>) -> PatchSet<f64> {
        PatchSet::new(set.pixels.clone(), set.source_id.clone(), vec![], PatchKind::RealLr).unwrap()
    }

    #[test]
    fn output_sizes_follow_scale() {
        let set = hr_set(Tensor::filled(&[1, 3, 16, 16], 0.5));
        assert_eq!(downsample_bicubic(&set, 4).unwrap().pixels.shape(), &[1, 3, 4, 4]);
        assert_eq!(downsample_bicubic(&set, 2).unwrap().pixels.shape(), &[1, 3, 8, 8]);
        assert!(matches!(downsample_bicubic(&set, 3), Err(Error::Config(_))));
    }

    #[test]
    fn linear_ramp_downsamples_to_interior_means() {
        // a horizontal ramp 0..16 halves to values centered between source
        // pairs; cubic interpolation reproduces linear data exactly away
        // from the clamped borders
        let set = hr_set(Tensor::from_fn(&[1, 3, 8, 16], |i| (i % 16) as f64 / 16.0));
        let down = downsample_bicubic(&set, 2).unwrap();
        for x in 2..6 {
            let got = down.pixels.data()[x];
            let want = (2 * x) as f64 / 16.0 + 0.5 / 16.0;
            assert!((got - want).abs() < 1e-12, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn upsample_interpolates_linear_data_exactly_in_the_interior() {
        let set = PatchSet::new(
            Tensor::from_fn(&[1, 3, 4, 8], |i| (i % 8) as f64 / 8.0),
            "t".into(),
            vec![],
            PatchKind::RealLr,
        )
        .unwrap();
        let up = upsample_bicubic(&set, 2).unwrap();
        // interior HR pixel x maps to LR coordinate (x + 0.5)/2 - 0.5
        for x in 3..11 {
            let want = ((x as f64 + 0.5) / 2.0 - 0.5) / 8.0;
            let got = up.pixels.data()[x];
            assert!((got - want).abs() < 1e-12, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn overshoot_stays_within_kernel_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        // adversarial checkerboards and random binary noise
        for case in 0..40 {
            let pixels = Tensor::from_fn(&[1, 1, 16, 16], |i| {
                let (y, x) = (i / 16 % 16, i % 16);
                match case % 3 {
                    0 => ((x + y) % 2) as f64,
                    1 => (x % 2) as f64,
                    _ => {
                        if rng.gen::<bool>() {
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            });
            for &(oh, ow) in &[(8usize, 8usize), (4, 4), (32, 32)] {
                let raw = bicubic_resize_raw(&pixels, oh, ow).unwrap();
                for &v in raw.data() {
                    assert!((-0.25..=1.25).contains(&v), "raw {v} out of overshoot bound");
                }
            }
        }
    }

    #[test]
    fn clamped_outputs_stay_in_unit_range() {
        let pixels = Tensor::from_fn(&[1, 3, 8, 8], |i| ((i / 8 + i) % 2) as f64);
        let set = hr_set(pixels);
        let down = downsample_bicubic(&set, 2).unwrap();
        assert!(down.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn downsample_then_upsample_approximates_smooth_images() {
        let set = hr_set(Tensor::from_fn(&[1, 3, 16, 16], |i| {
            let (y, x) = ((i / 16) % 16, i % 16);
            0.5 + 0.3 * ((x as f64) * 0.3).sin() * ((y as f64) * 0.25).cos()
        }));
        let down = downsample_bicubic(&set, 2).unwrap();
        let up = upsample_bicubic(&down, 2).unwrap();
        let mut err = 0.0f64;
        for (a, b) in up.pixels.data().iter().zip(set.pixels.data()) {
            err = err.max((a - b).abs());
        }
        assert!(err < 0.08, "round-trip error {err}");
    }
}
