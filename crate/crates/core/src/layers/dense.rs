use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Shape, Tensor};

use super::LayerGrad;

/// Borrowed fully-connected parameters: `weight` is `(out_dim, in_dim, 1, 1)`,
/// `bias` is `(out_dim, 1, 1, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct DenseParams<'a, T> {
    pub weight: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
}

impl<T: Scalar> DenseParams<'_, T> {
    pub fn out_dim(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape().sample_len()
    }

    fn check(&self, x: Shape) -> Result<()> {
        if x.sample_len() != self.in_dim() {
            return Err(Error::shape(format!(
                "dense layer expects {} inputs per sample, got {x}",
                self.in_dim()
            )));
        }
        if self.bias.len() != self.out_dim() {
            return Err(Error::shape(format!(
                "dense bias {} does not match out_dim {}",
                self.bias.shape(),
                self.out_dim()
            )));
        }
        Ok(())
    }
}

/// `out = W·x + b` per sample; `x` is flattened per sample. Output `(n, out_dim, 1, 1)`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, p: &DenseParams<'_, T>) -> Result<Tensor<T>> {
    let s = x.shape();
    p.check(s)?;
    let (n, din, dout) = (s.n, p.in_dim(), p.out_dim());
    let mut out = Tensor::zeros(Shape::vectors(n, dout)?);
    for row in out.data_mut().chunks_exact_mut(dout) {
        row.copy_from_slice(p.bias.data());
    }
    gemm(false, true, n, dout, din, x.data(), p.weight.data(), T::one(), out.data_mut());
    out.debug_finite("dense_forward")
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &DenseParams<'_, T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let s = x.shape();
    p.check(s)?;
    let (n, din, dout) = (s.n, p.in_dim(), p.out_dim());
    upstream.expect_shape(Shape::vectors(n, dout)?, "dense_backward upstream")?;
    let g = upstream.data();

    let mut grad_w = Tensor::zeros(p.weight.shape());
    gemm(true, false, dout, din, n, g, x.data(), T::zero(), grad_w.data_mut());

    let mut grad_b = Tensor::zeros(p.bias.shape());
    for row in g.chunks_exact(dout) {
        for (gb, &v) in grad_b.data_mut().iter_mut().zip(row) {
            *gb = *gb + v;
        }
    }

    let mut grad_x = Tensor::zeros(s);
    gemm(false, false, n, din, dout, g, p.weight.data(), T::zero(), grad_x.data_mut());

    Ok(LayerGrad {
        weight: Some(grad_w),
        bias: Some(grad_b),
        input: Some(grad_x.debug_finite("dense_backward input")?),
    })
}
