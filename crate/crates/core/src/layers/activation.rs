use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_slope<T: Scalar>(negative_slope: T) -> Result<()> {
    if !(negative_slope >= T::zero() && negative_slope < T::one()) {
        return Err(Error::InvalidArgument(format!(
            "negative slope must lie in [0, 1), got {negative_slope}"
        )));
    }
    Ok(())
}

/// Leaky ReLU; a slope of 0 is the plain rectifier.
pub fn relu_forward<T: Scalar>(x: &Tensor<T>, negative_slope: T) -> Result<Tensor<T>> {
    check_slope(negative_slope)?;
    Ok(x.map(|v| if v > T::zero() { v } else { negative_slope * v }))
}

pub fn relu_backward<T: Scalar>(
    x: &Tensor<T>,
    negative_slope: T,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_slope(negative_slope)?;
    upstream.expect_shape(x.shape(), "relu_backward upstream")?;
    let mut grad = upstream.clone();
    for (g, &v) in grad.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = *g * negative_slope;
        }
    }
    Ok(grad)
}

/// Row-wise softmax over `(n, k, 1, 1)` logits, max-subtracted.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.ensure_finite("softmax logits")?;
    let k = logits.shape().sample_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Pulls a gradient on the posterior back through softmax:
/// `∂L/∂z_k = p_k (g_k − Σ_j p_j g_j)`.
pub fn softmax_backward<T: Scalar>(posterior: &Tensor<T>, grad_p: &Tensor<T>) -> Result<Tensor<T>> {
    grad_p.expect_shape(posterior.shape(), "softmax_backward")?;
    let k = posterior.shape().sample_len();
    let mut out = grad_p.clone();
    for (row, p) in out.data_mut().chunks_exact_mut(k).zip(posterior.data().chunks_exact(k)) {
        let dot: T = row.iter().zip(p).map(|(&g, &p)| g * p).sum();
        for (g, &p) in row.iter_mut().zip(p) {
            *g = p * (*g - dot);
        }
    }
    Ok(out)
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside [0, {k})"
        )));
    }
    Ok(())
}

/// Batch-mean `−log p̂_label` and its gradient with respect to the logits,
/// `(p̂ − onehot) / n`.
pub fn cross_entropy<T: Scalar>(posterior: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = posterior.shape();
    let k = s.sample_len();
    check_labels(labels, s.n, k)?;
    let scale = T::one() / T::from_usize(s.n).unwrap();
    let mut loss = T::zero();
    let mut grad = posterior.clone();
    for (row, &label) in grad.data_mut().chunks_exact_mut(k).zip(labels) {
        loss = loss - row[label].ln();
        row[label] = row[label] - T::one();
        row.iter_mut().for_each(|g| *g = *g * scale);
    }
    Ok((loss * scale, grad))
}

/// Softmax and cross-entropy from logits in one pass. The loss uses
/// log-sum-exp so a vanishing posterior cannot produce an infinite loss.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(Tensor<T>, T, Tensor<T>)> {
    logits.ensure_finite("logits")?;
    let s = logits.shape();
    let k = s.sample_len();
    check_labels(labels, s.n, k)?;
    let scale = T::one() / T::from_usize(s.n).unwrap();
    let mut posterior = logits.clone();
    let mut loss = T::zero();
    for ((row, z), &label) in posterior
        .data_mut()
        .chunks_exact_mut(k)
        .zip(logits.data().chunks_exact(k))
        .zip(labels)
    {
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss = loss + (lse - z[label]);
        softmax_in_place(row);
    }
    let mut grad = posterior.clone();
    for (row, &label) in grad.data_mut().chunks_exact_mut(k).zip(labels) {
        row[label] = row[label] - T::one();
        row.iter_mut().for_each(|g| *g = *g * scale);
    }
    Ok((posterior, loss * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{central_difference, rel_err, rng_tensor};
    use crate::tensor::Shape;

    fn row(v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_rows(&[v]).unwrap()
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu_forward(&row(vec![-1.0, 2.0]), 0.0).unwrap().data(), &[0.0, 2.0]);
        let pos = row(vec![0.5, 3.0, 1e-3]);
        assert_eq!(relu_forward(&pos, 0.0).unwrap(), pos);
        assert_eq!(relu_forward(&row(vec![-10.0]), 0.1).unwrap().data(), &[-1.0]);
        assert!(relu_forward(&pos, 1.0).is_err());
        assert!(relu_forward(&pos, -0.1).is_err());
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        let x = rng_tensor([2, 3, 2, 2], 30);
        let probe = rng_tensor([2, 3, 2, 2], 31);
        let g = relu_backward(&x, 0.1, &probe).unwrap();
        let num = central_difference(&x, |xp| {
            let y = relu_forward(xp, 0.1).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        });
        assert!(rel_err(&g, &num) < 1e-6);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&row(vec![1.5; 10])).unwrap();
        for &v in p.data() {
            assert!((v - 0.1).abs() < 1e-15);
        }
        let p = softmax(&row(vec![0.0, 3f64.ln()])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);

        let z = rng_tensor([3, 5, 1, 1], 40);
        let shifted = z.map(|v| v + 123.0);
        let (a, b) = (softmax(&z).unwrap(), softmax(&shifted).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for r in a.data().chunks(5) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&row(vec![0.0, f64::NAN])).is_err());
        assert!(softmax(&row(vec![f64::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let (loss, _) = cross_entropy(&row(vec![0.0, 1.0, 0.0]), &[1]).unwrap();
        assert_eq!(loss, 0.0);

        let (loss, grad) = cross_entropy(&row(vec![0.1; 10]), &[3]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(grad.data().iter().sum::<f64>().abs() < 1e-15);

        assert!(cross_entropy(&row(vec![0.5, 0.5]), &[2]).is_err());
    }

    #[test]
    fn fused_matches_separate() {
        let z = rng_tensor([4, 6, 1, 1], 50);
        let labels = [0, 5, 2, 2];
        let (p, loss, grad) = softmax_cross_entropy(&z, &labels).unwrap();
        let p2 = softmax(&z).unwrap();
        let (loss2, grad2) = cross_entropy(&p2, &labels).unwrap();
        assert!((loss - loss2).abs() < 1e-12);
        assert!(rel_err(&p, &p2) < 1e-12);
        assert!(rel_err(&grad, &grad2) < 1e-12);
        for r in grad.data().chunks(6) {
            assert!(r.iter().sum::<f64>().abs() < 1e-15);
        }

        let num = central_difference(&z, |zp| softmax_cross_entropy(zp, &labels).unwrap().1);
        assert!(rel_err(&grad, &num) < 1e-6);
    }

    #[test]
    fn fused_loss_is_finite_for_extreme_logits() {
        let z = Tensor::from_vec(Shape::vectors(1, 2).unwrap(), vec![0.0f32, 500.0]).unwrap();
        let (_, loss, _) = softmax_cross_entropy(&z, &[0]).unwrap();
        assert!(loss.is_finite());
        assert!((loss - 500.0).abs() < 1e-3);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z = rng_tensor([2, 4, 1, 1], 60);
        let probe = rng_tensor([2, 4, 1, 1], 61);
        let p = softmax(&z).unwrap();
        let g = softmax_backward(&p, &probe).unwrap();
        let num = central_difference(&z, |zp| {
            softmax(zp).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        });
        assert!(rel_err(&g, &num) < 1e-6);
    }
}
