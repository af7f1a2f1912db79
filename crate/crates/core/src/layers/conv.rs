//! 2-D cross-correlation lowered to a patch matrix and a GEMM per sample.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Shape, Tensor};

use super::LayerGrad;

/// Borrowed view of a convolution's parameters.
///
/// `weight` is `(out_channels, in_channels, kh, kw)`, `bias` is
/// `(out_channels, 1, 1, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams<'a, T> {
    pub weight: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<'_, T> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().h, self.weight.shape().w)
    }

    /// Output shape for `input`, checking channel counts and spatial fit.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.bias.shape() != Shape::new(self.out_channels(), 1, 1, 1)? {
            return Err(Error::shape(format!(
                "conv bias {} does not match {} output channels",
                self.bias.shape(),
                self.out_channels()
            )));
        }
        if input.c != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got input {input}",
                self.in_channels()
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        let (kh, kw) = self.kernel();
        let oh = conv_out_len(input.h, kh, self.stride, self.padding)?;
        let ow = conv_out_len(input.w, kw, self.stride, self.padding)?;
        Shape::new(input.n, self.out_channels(), oh, ow)
    }
}

/// `(len + 2·padding − kernel) / stride + 1`, required to be exact and positive.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = len + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::shape(format!(
            "kernel {kernel} does not fit input length {len} with padding {padding}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::shape(format!(
            "kernel {kernel} / stride {stride} does not tile input length {len} (padding {padding})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(col_index, input_index)` for every in-bounds patch entry.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let cols = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let in_row = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * cols + oy * self.ow + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, input: &[T], col: &mut [T]) {
        if self.padding > 0 {
            col.fill(T::zero());
        }
        self.for_each(|c, i| col[c] = input[i]);
    }

    fn col2im<T: Scalar>(&self, col: &[T], input: &mut [T]) {
        self.for_each(|c, i| input[i] = input[i] + col[c]);
    }
}

fn geometry<T: Scalar>(x: Shape, p: &ConvParams<'_, T>) -> Result<(Geometry, Shape)> {
    let out = p.output_shape(x)?;
    let (kh, kw) = p.kernel();
    Ok((
        Geometry {
            c: x.c,
            h: x.h,
            w: x.w,
            kh,
            kw,
            oh: out.h,
            ow: out.w,
            stride: p.stride,
            padding: p.padding,
        },
        out,
    ))
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<'_, T>) -> Result<Tensor<T>> {
    let (geo, out_shape) = geometry(x.shape(), p)?;
    let (k, cols, oc) = (geo.rows(), geo.cols(), p.out_channels());
    let mut out = Tensor::zeros(out_shape);
    let mut col = vec![T::zero(); k * cols];
    for n in 0..out_shape.n {
        geo.im2col(x.sample(n), &mut col);
        let dst = out.sample_mut(n);
        for (plane, &b) in dst.chunks_exact_mut(cols).zip(p.bias.data()) {
            plane.fill(b);
        }
        gemm(false, false, oc, cols, k, p.weight.data(), &col, T::one(), dst);
    }
    out.debug_finite("conv2d_forward")
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<'_, T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    conv2d_backward_opts(x, p, upstream, true)
}

/// Backward pass; `need_input` = false skips the input gradient (first layer).
pub fn conv2d_backward_opts<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<'_, T>,
    upstream: &Tensor<T>,
    need_input: bool,
) -> Result<LayerGrad<T>> {
    let (geo, out_shape) = geometry(x.shape(), p)?;
    upstream.expect_shape(out_shape, "conv2d_backward upstream")?;
    let (k, cols, oc) = (geo.rows(), geo.cols(), p.out_channels());

    let mut grad_w = Tensor::zeros(p.weight.shape());
    let mut grad_b = Tensor::zeros(p.bias.shape());
    let mut grad_x = Tensor::zeros(if need_input {
        x.shape()
    } else {
        Shape::new(1, 1, 1, 1)?
    });
    let mut col = vec![T::zero(); k * cols];
    let mut grad_col = vec![T::zero(); k * cols];

    for n in 0..out_shape.n {
        let g = upstream.sample(n);
        geo.im2col(x.sample(n), &mut col);
        gemm(false, true, oc, k, cols, g, &col, T::one(), grad_w.data_mut());
        for (gb, plane) in grad_b.data_mut().iter_mut().zip(g.chunks_exact(cols)) {
            *gb = *gb + plane.iter().copied().sum();
        }
        if need_input {
            gemm(true, false, k, cols, oc, p.weight.data(), g, T::zero(), &mut grad_col);
            geo.col2im(&grad_col, grad_x.sample_mut(n));
        }
    }
    Ok(LayerGrad {
        weight: Some(grad_w.debug_finite("conv2d_backward weight")?),
        bias: Some(grad_b),
        input: need_input.then_some(grad_x),
    })
}
