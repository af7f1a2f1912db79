use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Argmax positions recorded by [`maxpool_forward`], one flat input offset
/// per output element.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolRecord {
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub argmax: Vec<usize>,
}

pub fn pool_out_len(len: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "pool window and stride must be positive".into(),
        ));
    }
    if window > len {
        return Err(Error::shape(format!(
            "pool window {window} larger than input length {len}"
        )));
    }
    Ok((len - window) / stride + 1)
}

/// Max-pooling. Ties resolve to the first maximum in row-major window order.
pub fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolRecord)> {
    let s = x.shape();
    let oh = pool_out_len(s.h, window, stride)?;
    let ow = pool_out_len(s.w, window, stride)?;
    let out_shape = Shape::new(s.n, s.c, oh, ow)?;
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    let data = x.data();
    for plane_idx in 0..s.n * s.c {
        let base = plane_idx * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * s.w + ox * stride;
                for ky in 0..window {
                    let row = base + (oy * stride + ky) * s.w + ox * stride;
                    for idx in row..row + window {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                argmax.push(best);
                out.push(data[best]);
            }
        }
    }
    Ok((
        Tensor::from_vec(out_shape, out)?,
        PoolRecord {
            input_shape: s,
            output_shape: out_shape,
            argmax,
        },
    ))
}

/// Routes `upstream` back to the recorded argmax positions.
pub fn maxpool_backward<T: Scalar>(record: &PoolRecord, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.expect_shape(record.output_shape, "maxpool_backward upstream")?;
    let mut grad = Tensor::zeros(record.input_shape);
    let g = grad.data_mut();
    for (&idx, &u) in record.argmax.iter().zip(upstream.data()) {
        g[idx] = g[idx] + u;
    }
    Ok(grad)
}
