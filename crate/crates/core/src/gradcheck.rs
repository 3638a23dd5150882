//! Central-difference verification of analytic gradients.
//!
//! The optimizer trusts the tape's backward pass; these helpers check it
//! against the definition of the derivative. Disagreement is reported
//! relative to `max(|analytic|, |numeric|, 1)` so tiny and large gradients
//! are judged on the same scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{num, wide, Element, Tensor};

/// `|a - n| / max(|a|, |n|, 1)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central difference of a scalar field along one coordinate of `at`.
pub fn central_difference<S, F>(f: &mut F, at: &Tensor<S>, coord: usize, step: f64) -> Result<f64>
where
    S: Element,
    F: FnMut(&Tensor<S>) -> Result<f64>,
{
    if coord >= at.numel() {
        return Err(Error::Contract(format!("coordinate {coord} out of {}", at.numel())));
    }
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::Config(format!("difference step must be positive, got {step}")));
    }
    let base = wide(at.data()[coord]);
    let mut probe = at.clone();
    probe.data_mut()[coord] = num::<S>(base + step);
    let hi = f(&probe)?;
    probe.data_mut()[coord] = num::<S>(base - step);
    let lo = f(&probe)?;
    Ok((hi - lo) / (2.0 * step))
}

/// Worst disagreement found by [`check_gradient`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Largest relative error over the checked coordinates.
    pub worst: f64,
    /// Coordinate that produced it.
    pub worst_coord: usize,
    /// How many coordinates were compared.
    pub checked: usize,
}

/// Compare `analytic` against central differences of `f` at `at`. Every
/// coordinate is checked when there are at most `max_coords` of them,
/// otherwise a seeded uniform sample of `max_coords` distinct coordinates.
pub fn check_gradient<S, F>(
    mut f: F,
    at: &Tensor<S>,
    analytic: &Tensor<S>,
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheck>
where
    S: Element,
    F: FnMut(&Tensor<S>) -> Result<f64>,
{
    if analytic.shape() != at.shape() {
        return Err(Error::Contract(format!(
            "gradient shape {:?} does not match the point {:?}",
            analytic.shape(),
            at.shape()
        )));
    }
    if max_coords == 0 {
        return Err(Error::Config("max_coords must be at least 1".into()));
    }
    let n = at.numel();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..max_coords {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(max_coords);
        idx
    };
    let mut out = GradCheck { worst: 0.0, worst_coord: 0, checked: coords.len() };
    for &c in &coords {
        let numeric = central_difference(&mut f, at, c, step)?;
        let err = relative_error(wide(analytic.data()[c]), numeric);
        if err > out.worst {
            out.worst = err;
            out.worst_coord = c;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &Tensor<f64>) -> Result<f64> {
        Ok(x.data().iter().map(|&v| v * v).sum())
    }

    #[test]
    fn quadratic_gradient_is_recovered() {
        let at = Tensor::new(vec![5], vec![0.4, -1.2, 3.0, 0.0, -0.7]).unwrap();
        let grad = Tensor::new(vec![5], at.data().iter().map(|&v| 2.0 * v).collect()).unwrap();
        let check = check_gradient(quadratic, &at, &grad, 1e-4, 100, 0).unwrap();
        assert_eq!(check.checked, 5);
        assert!(check.worst < 1e-9, "worst {}", check.worst);
    }

    #[test]
    fn a_wrong_gradient_is_flagged() {
        let at = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut grad = Tensor::new(vec![3], vec![2.0, 4.0, 6.0]).unwrap();
        grad.data_mut()[1] = 3.5; // should be 4
        let check = check_gradient(quadratic, &at, &grad, 1e-4, 100, 0).unwrap();
        assert_eq!(check.worst_coord, 1);
        assert!(check.worst > 0.1, "worst {}", check.worst);
    }

    #[test]
    fn coordinate_sampling_is_seeded_and_bounded() {
        let at = Tensor::from_fn(&[40], |i| (i as f64) * 0.1 - 2.0);
        let grad = Tensor::new(vec![40], at.data().iter().map(|&v| 2.0 * v).collect()).unwrap();
        let a = check_gradient(quadratic, &at, &grad, 1e-4, 7, 3).unwrap();
        let b = check_gradient(quadratic, &at, &grad, 1e-4, 7, 3).unwrap();
        assert_eq!(a.checked, 7);
        assert_eq!(a.worst_coord, b.worst_coord);
        assert_eq!(a.worst, b.worst);
    }

    #[test]
    fn shape_mismatch_and_bad_step_are_rejected() {
        let at = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let grad = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            check_gradient(quadratic, &at, &grad, 1e-4, 10, 0),
            Err(Error::Contract(_))
        ));
        let mut f = quadratic;
        assert!(matches!(central_difference(&mut f, &at, 0, 0.0), Err(Error::Config(_))));
        assert!(matches!(central_difference(&mut f, &at, 9, 1e-4), Err(Error::Contract(_))));
    }
}
