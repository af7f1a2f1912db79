//! Feedback heads and emphasis layers.
//!
//! A feedback head maps the previous pass's class posterior `p̂` to one
//! emphasis vector per attached convolution:
//!
//! ```text
//! â_i = Σ_j W_ij p̂_j + b_i
//! a_i = C · exp(â_i) / Σ_j exp(â_j)
//! ```
//!
//! so every emphasis vector is positive with channel mean exactly 1. The
//! emphasis layer multiplies channel `i` of the feature maps by `a_i`.
//! Zero head parameters give `a = 1`, which leaves the features untouched.

use crate::error::{Error, Result};
use crate::tensor::{channel_scale, gemm, reduce_channel_sum, Scalar, Shape, Tensor};

/// Borrowed feedback-head parameters: `weight` is `(C, N_class, 1, 1)`,
/// `bias` is `(C, 1, 1, 1)` (one bias per channel).
#[derive(Clone, Copy, Debug)]
pub struct FeedbackHead<'a, T> {
    pub weight: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
}

impl<T: Scalar> FeedbackHead<'_, T> {
    pub fn channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn classes(&self) -> usize {
        self.weight.shape().c
    }

    pub fn param_count(&self) -> usize {
        head_param_count(self.channels(), self.classes())
    }

    fn check(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.h != 1 || ws.w != 1 || self.bias.shape() != Shape::new(ws.n, 1, 1, 1)? {
            return Err(Error::shape(format!(
                "feedback head weight {ws} / bias {} are inconsistent",
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

/// Extra parameters one head adds: `C·N_class` weights plus `C` biases.
pub fn head_param_count(channels: usize, classes: usize) -> usize {
    channels * (classes + 1)
}

/// Per-sample channel weights, `(n, C, 1, 1)`, positive with mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EmphasisVector<T>(Tensor<T>);

impl<T: Scalar> EmphasisVector<T> {
    /// The all-ones vector used by the first pass.
    pub fn ones(n: usize, channels: usize) -> Result<Self> {
        Ok(EmphasisVector(Tensor::full(Shape::vectors(n, channels)?, T::one())))
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape().c
    }

    pub fn row(&self, n: usize) -> &[T] {
        self.0.sample(n)
    }

    pub fn channel_mean(&self, n: usize) -> T {
        let row = self.row(n);
        row.iter().copied().sum::<T>() / T::from_usize(row.len()).unwrap()
    }
}

/// Everything [`feedback_backward`] needs from the forward pass.
#[derive(Clone, Debug)]
pub struct FeedbackTrace<T> {
    pub posterior: Tensor<T>,
    /// Pre-normalization values `â`.
    pub raw: Tensor<T>,
    pub emphasis: EmphasisVector<T>,
}

#[derive(Clone, Debug)]
pub struct FeedbackGrad<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub posterior: Tensor<T>,
}

fn check_posterior<T: Scalar>(p: &Tensor<T>, classes: usize) -> Result<()> {
    let s = p.shape();
    if s.sample_len() != classes || s.h != 1 || s.w != 1 {
        return Err(Error::shape(format!(
            "posterior {s} does not have {classes} classes"
        )));
    }
    p.ensure_finite("feedback posterior")?;
    let tol = T::lit(1e-4);
    for (n, row) in p.data().chunks_exact(classes).enumerate() {
        let sum: T = row.iter().copied().sum();
        if row.iter().any(|&v| v < T::zero()) || (sum - T::one()).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "posterior row {n} is not on the probability simplex (sum {sum})"
            )));
        }
    }
    Ok(())
}

pub fn feedback_forward<T: Scalar>(
    head: &FeedbackHead<'_, T>,
    posterior: &Tensor<T>,
) -> Result<(EmphasisVector<T>, FeedbackTrace<T>)> {
    head.check()?;
    let (c, k) = (head.channels(), head.classes());
    check_posterior(posterior, k)?;
    let n = posterior.shape().n;

    let mut raw = Tensor::zeros(Shape::vectors(n, c)?);
    for row in raw.data_mut().chunks_exact_mut(c) {
        row.copy_from_slice(head.bias.data());
    }
    gemm(false, true, n, c, k, posterior.data(), head.weight.data(), T::one(), raw.data_mut());
    raw.ensure_finite("feedback pre-normalization values")?;

    // (C·e_i) / Σ e rather than C·(e_i / Σ e): equal inputs then give
    // exactly 1.0 for any channel count.
    let mut a = raw.clone();
    let scale = T::from_usize(c).unwrap();
    for row in a.data_mut().chunks_exact_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        row.iter_mut().for_each(|v| *v = scale * *v / sum);
    }
    let emphasis = EmphasisVector(a);
    Ok((
        emphasis.clone(),
        FeedbackTrace {
            posterior: posterior.clone(),
            raw,
            emphasis,
        },
    ))
}

/// Jacobian of the normalization for one sample: `∂a_i/∂â_k = a_i (δ_ik − a_k / C)`.
pub fn normalization_jacobian<T: Scalar>(a: &[T]) -> Vec<Vec<T>> {
    let c = T::from_usize(a.len()).unwrap();
    a.iter()
        .enumerate()
        .map(|(i, &ai)| {
            a.iter()
                .enumerate()
                .map(|(k, &ak)| {
                    let delta = if i == k { T::one() } else { T::zero() };
                    ai * (delta - ak / c)
                })
                .collect()
        })
        .collect()
}

pub fn feedback_backward<T: Scalar>(
    head: &FeedbackHead<'_, T>,
    trace: &FeedbackTrace<T>,
    grad_a: &Tensor<T>,
) -> Result<FeedbackGrad<T>> {
    head.check()?;
    let (c, k) = (head.channels(), head.classes());
    let n = trace.posterior.shape().n;
    grad_a.expect_shape(Shape::vectors(n, c)?, "feedback_backward grad_a")?;
    trace.raw.expect_shape(Shape::vectors(n, c)?, "feedback trace")?;

    // grad_â_k = g_k a_k − (a_k / C) Σ_i g_i a_i
    let cf = T::from_usize(c).unwrap();
    let mut grad_raw = grad_a.clone();
    for (g, a) in grad_raw
        .data_mut()
        .chunks_exact_mut(c)
        .zip(trace.emphasis.values().data().chunks_exact(c))
    {
        let dot: T = g.iter().zip(a).map(|(&g, &a)| g * a).sum();
        for (gk, &ak) in g.iter_mut().zip(a) {
            *gk = ak * (*gk - dot / cf);
        }
    }

    let mut weight = Tensor::zeros(head.weight.shape());
    gemm(true, false, c, k, n, grad_raw.data(), trace.posterior.data(), T::zero(), weight.data_mut());

    let mut bias = Tensor::zeros(head.bias.shape());
    for row in grad_raw.data().chunks_exact(c) {
        for (b, &g) in bias.data_mut().iter_mut().zip(row) {
            *b = *b + g;
        }
    }

    let mut posterior = Tensor::zeros(trace.posterior.shape());
    gemm(false, false, n, k, c, grad_raw.data(), head.weight.data(), T::zero(), posterior.data_mut());

    Ok(FeedbackGrad {
        weight,
        bias,
        posterior,
    })
}

fn check_emphasis<T: Scalar>(x: &Tensor<T>, a: &EmphasisVector<T>) -> Result<()> {
    let s = x.shape();
    if a.values().shape() != Shape::vectors(s.n, s.c)? {
        return Err(Error::shape(format!(
            "emphasis vector {} does not match feature maps {s}",
            a.values().shape()
        )));
    }
    Ok(())
}

/// `f'_i = a_i · f_i` per sample.
pub fn emphasis_forward<T: Scalar>(x: &Tensor<T>, a: &EmphasisVector<T>) -> Result<Tensor<T>> {
    check_emphasis(x, a)?;
    channel_scale(x, a.values())
}

/// Returns `(∂L/∂f, ∂L/∂a)` with `∂L/∂f_i = upstream_i · a_i` and
/// `∂L/∂a_i = Σ_pq upstream_ipq · f_ipq`.
pub fn emphasis_backward<T: Scalar>(
    x: &Tensor<T>,
    a: &EmphasisVector<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    emphasis_backward_with(x, a, upstream, false)
}

/// `drop_spatial_sum` deliberately breaks the emphasis gradient (only the
/// first spatial position contributes) so the gradient checker can be
/// shown to catch it.
pub(crate) fn emphasis_backward_with<T: Scalar>(
    x: &Tensor<T>,
    a: &EmphasisVector<T>,
    upstream: &Tensor<T>,
    drop_spatial_sum: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_emphasis(x, a)?;
    upstream.expect_shape(x.shape(), "emphasis_backward upstream")?;
    let grad_x = channel_scale(upstream, a.values())?;
    let mut prod = upstream.clone();
    for (u, &v) in prod.data_mut().iter_mut().zip(x.data()) {
        *u = *u * v;
    }
    let grad_a = if drop_spatial_sum {
        let s = x.shape();
        let data = prod.data().chunks_exact(s.plane()).map(|p| p[0]).collect();
        Tensor::from_vec(Shape::vectors(s.n, s.c)?, data)?
    } else {
        reduce_channel_sum(&prod)
    };
    Ok((grad_x, grad_a))
}
