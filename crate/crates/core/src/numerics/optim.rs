//! Pixel optimizers. Adam is the default; plain SGD is selectable. Both
//! mutate the parameter tensor in place and abort the step untouched if the
//! incoming gradient contains non-finite values.

use super::{num, Element, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adam,
    Sgd,
}

/// First/second moment buffers and step counter for one parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimState<S> {
    pub kind: OptimKind,
    step: u64,
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Element> OptimState<S> {
    pub fn new(kind: OptimKind, numel: usize) -> Self {
        let (m, v) = match kind {
            OptimKind::Adam => (vec![S::zero(); numel], vec![S::zero(); numel]),
            OptimKind::Sgd => (Vec::new(), Vec::new()),
        };
        OptimState { kind, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update of the configured kind.
    pub fn step(&mut self, params: &mut Tensor<S>, grad: &Tensor<S>, lr: f64) -> Result<()> {
        match self.kind {
            OptimKind::Adam => adam_step(params, grad, self, lr),
            OptimKind::Sgd => sgd_step(params, grad, self, lr),
        }
    }
}

fn check_step_inputs<S: Element>(params: &Tensor<S>, grad: &Tensor<S>) -> Result<()> {
    if params.shape() != grad.shape() {
        return Err(Error::Contract(format!(
            "optimizer shape mismatch: params {:?} vs grad {:?}",
            params.shape(),
            grad.shape()
        )));
    }
    if !grad.all_finite() {
        return Err(Error::Numeric("non-finite gradient, step aborted".into()));
    }
    Ok(())
}

/// One Adam update with bias correction (β1=0.9, β2=0.999, ε=1e-8).
pub fn adam_step<S: Element>(params: &mut Tensor<S>, grad: &Tensor<S>, state: &mut OptimState<S>, lr: f64) -> Result<()> {
    check_step_inputs(params, grad)?;
    if state.m.len() != params.numel() {
        return Err(Error::Contract(format!(
            "optimizer state sized for {} elements, params have {}",
            state.m.len(),
            params.numel()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (num::<S>(ADAM_BETA1), num::<S>(ADAM_BETA2));
    let (nb1, nb2) = (num::<S>(1.0 - ADAM_BETA1), num::<S>(1.0 - ADAM_BETA2));
    let corr1 = num::<S>(1.0 / (1.0 - ADAM_BETA1.powi(t as i32)));
    let corr2 = num::<S>(1.0 / (1.0 - ADAM_BETA2.powi(t as i32)));
    let eps = num::<S>(ADAM_EPS);
    let lr = num::<S>(lr);
    for ((p, &g), (m, v)) in params
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + nb1 * g;
        *v = b2 * *v + nb2 * g * g;
        let mhat = *m * corr1;
        let vhat = *v * corr2;
        *p = *p - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// One plain gradient-descent update: `p <- p - lr * g`.
pub fn sgd_step<S: Element>(params: &mut Tensor<S>, grad: &Tensor<S>, state: &mut OptimState<S>, lr: f64) -> Result<()> {
    check_step_inputs(params, grad)?;
    state.step += 1;
    let lr = num::<S>(lr);
    for (p, &g) in params.data_mut().iter_mut().zip(grad.data()) {
        *p = *p - lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_exact() {
        let mut p = Tensor::<f64>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let mut st = OptimState::new(OptimKind::Sgd, 2);
        st.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 + 0.025]);
    }

    #[test]
    fn adam_step_magnitude_approaches_lr_under_constant_gradient() {
        // With a constant gradient g, bias-corrected moments converge to
        // m̂=g, v̂=g², so the update magnitude tends to lr * |g| / (|g| + ε) ≈ lr.
        let mut p = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        let g = Tensor::new(vec![1], vec![0.37]).unwrap();
        let mut st = OptimState::new(OptimKind::Adam, 1);
        let lr = 0.1;
        let mut prev = p.data()[0];
        let mut last_step = 0.0;
        for _ in 0..2000 {
            st.step(&mut p, &g, lr).unwrap();
            last_step = (p.data()[0] - prev).abs();
            prev = p.data()[0];
        }
        assert!((last_step - lr).abs() < 1e-6, "step magnitude {last_step}");
    }

    #[test]
    fn first_adam_step_has_unit_scale() {
        // Bias correction makes the very first step lr * g/|g| regardless of g's size.
        for &gv in &[1e-6, 0.5, 40.0] {
            let mut p = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
            let g = Tensor::new(vec![1], vec![gv]).unwrap();
            let mut st = OptimState::new(OptimKind::Adam, 1);
            st.step(&mut p, &g, 0.1).unwrap();
            assert!((p.data()[0] + 0.1).abs() < 1e-3, "g={gv} gave {}", p.data()[0]);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        let mut st = OptimState::new(OptimKind::Adam, 2);
        let before = p.data().to_vec();
        assert!(matches!(st.step(&mut p, &g, 0.1), Err(Error::Numeric(_))));
        assert_eq!(p.data(), before.as_slice());
        assert_eq!(st.steps_taken(), 0);
    }
}
