//! Momentum SGD.

use alloc::vec::Vec;

use crate::error::{precondition, Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

/// One velocity buffer per parameter array (running statistics keep an unused slot).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape()))
                .collect(),
        }
    }

    pub fn velocity(&self, i: usize) -> &Tensor {
        &self.velocity[i]
    }
}

/// `v <- momentum * v + g; w <- w - lr * v` for every array with a gradient.
///
/// `grads[i]` pairs with `params.tensor(i)`; `None` leaves the array alone. All
/// gradients are checked before any parameter changes.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
    config: &SgdConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(precondition("sgd_step: gradient, velocity and parameter counts differ"));
    }
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let entry = &params.entries()[i];
        if g.shape() != entry.tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: entry.tensor.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(entry.path.clone()));
        }
    }
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let v = state.velocity[i].data_mut();
        let w = params.tensor_mut(i).data_mut();
        for ((v, w), g) in v.iter_mut().zip(w.iter_mut()).zip(g.data()) {
            *v = config.momentum * *v + g;
            *w -= config.learning_rate * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamEntry, ParamKind};
    use alloc::string::ToString;
    use alloc::vec;

    fn single(w: f64) -> ModelParams {
        ModelParams::from_entries(vec![ParamEntry {
            path: "w".to_string(),
            kind: ParamKind::ConvWeight,
            tensor: Tensor::full(&[1], w),
        }])
        .unwrap()
    }

    #[test]
    fn first_step_is_plain_descent() {
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p);
        let g = [Some(Tensor::full(&[1], 3.0))];
        sgd_step(&mut p, &g, &mut s, &SgdConfig::default()).unwrap();
        assert!((p.tensor(0).item() - (1.0 - 0.03)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_unroll_momentum() {
        let mut p = single(0.0);
        let mut s = OptimizerState::new(&p);
        let g = [Some(Tensor::full(&[1], 2.0))];
        for _ in 0..2 {
            sgd_step(&mut p, &g, &mut s, &SgdConfig::default()).unwrap();
        }
        assert!((p.tensor(0).item() + 0.01 * (2.0 + 1.9 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = single(0.7);
        let mut s = OptimizerState::new(&p);
        sgd_step(&mut p, &[Some(Tensor::zeros(&[1]))], &mut s, &SgdConfig::default()).unwrap();
        assert_eq!(p.tensor(0).item(), 0.7);
    }

    #[test]
    fn zero_momentum_is_gradient_descent() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
        };
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p);
        for g in [0.5, -0.25, 1.0] {
            let before = p.tensor(0).item();
            sgd_step(&mut p, &[Some(Tensor::full(&[1], g))], &mut s, &cfg).unwrap();
            assert_eq!(p.tensor(0).item(), before - 0.1 * g);
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p);
        let err = sgd_step(
            &mut p,
            &[Some(Tensor::full(&[1], f64::NAN))],
            &mut s,
            &SgdConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient("w".to_string()));
        assert_eq!(p.tensor(0).item(), 1.0);
    }
}
