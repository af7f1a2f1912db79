//! SGD with momentum and L2 weight decay (biases exempt).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::model::{Model, Param, ParamKind};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// When set, parameters of kind [`ParamKind::Bias`] get no decay.
    pub exempt_biases: bool,
    /// One buffer per parameter, same order and shapes.
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(model: &Model<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be ≥ 0, got {weight_decay}")));
        }
        Ok(OptimState {
            lr,
            momentum,
            weight_decay,
            exempt_biases: true,
            velocity: model.zero_grads(),
        })
    }
}

/// `v ← μ·v − lr·(g + λ·w)`, `w ← w + v`, with `λ = 0` for biases.
pub fn sgd_step<T: Scalar>(params: &mut [Param<T>], grads: &[Tensor<T>], state: &mut OptimState<T>) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} momentum buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        g.expect_shape(p.value.shape(), &format!("gradient of {}", p.name))?;
        v.expect_shape(p.value.shape(), &format!("momentum buffer of {}", p.name))?;
        g.ensure_finite(&format!("gradient of {}", p.name))?;
    }
    let (lr, mu) = (T::lit(state.lr), T::lit(state.momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        let decay = if p.kind == ParamKind::Bias && state.exempt_biases {
            T::zero()
        } else {
            T::lit(state.weight_decay)
        };
        for ((w, &g), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = mu * *v - lr * (g + decay * *w);
            *w = *w + *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar_param(kind: ParamKind, w: f64) -> Param<f64> {
        Param {
            name: "p".into(),
            kind,
            value: Tensor::full(Shape::new(1, 1, 1, 1).unwrap(), w),
        }
    }

    fn state(lr: f64, momentum: f64, decay: f64) -> OptimState<f64> {
        OptimState {
            lr,
            momentum,
            weight_decay: decay,
            exempt_biases: true,
            velocity: vec![Tensor::zeros(Shape::new(1, 1, 1, 1).unwrap())],
        }
    }

    fn grad(g: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::full(Shape::new(1, 1, 1, 1).unwrap(), g)]
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = vec![scalar_param(ParamKind::Weight, 0.3)];
        let mut s = state(0.01, 0.9, 0.0);
        sgd_step(&mut p, &grad(0.0), &mut s).unwrap();
        assert_eq!(p[0].value.data(), &[0.3]);
    }

    #[test]
    fn plain_step() {
        let mut p = vec![scalar_param(ParamKind::Weight, 1.0)];
        let mut s = state(0.01, 0.0, 0.0);
        sgd_step(&mut p, &grad(1.0), &mut s).unwrap();
        assert_eq!(p[0].value.data(), &[0.99]);
    }

    #[test]
    fn momentum_and_decay() {
        let mut p = vec![scalar_param(ParamKind::Weight, 1.0)];
        let mut s = state(0.1, 0.5, 0.01);
        sgd_step(&mut p, &grad(1.0), &mut s).unwrap();
        // v = -0.1·(1 + 0.01) = -0.101
        assert!((p[0].value.data()[0] - 0.899).abs() < 1e-15);
        sgd_step(&mut p, &grad(0.0), &mut s).unwrap();
        // v = 0.5·(-0.101) - 0.1·(0.01·0.899)
        let expected = 0.899 + (-0.0505 - 0.000899);
        assert!((p[0].value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn biases_are_not_decayed() {
        let mut p = vec![scalar_param(ParamKind::Bias, 5.0)];
        let mut s = state(0.01, 0.0, 1e-4);
        sgd_step(&mut p, &grad(0.0), &mut s).unwrap();
        assert_eq!(p[0].value.data(), &[5.0]);

        let mut w = vec![scalar_param(ParamKind::Weight, 5.0)];
        let mut s = state(0.01, 0.0, 1e-4);
        sgd_step(&mut w, &grad(0.0), &mut s).unwrap();
        assert!(w[0].value.data()[0] < 5.0);
    }

    #[test]
    fn non_finite_grads_rejected() {
        let mut p = vec![scalar_param(ParamKind::Weight, 1.0)];
        let mut s = state(0.01, 0.0, 0.0);
        assert!(sgd_step(&mut p, &grad(f64::NAN), &mut s).is_err());
        assert_eq!(p[0].value.data(), &[1.0]);
    }
}
