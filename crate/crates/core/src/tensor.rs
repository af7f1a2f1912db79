//! Dense 4-D tensors in row-major `(n, c, h, w)` order.
//!
//! Everything in the crate, from images to posteriors to emphasis vectors,
//! travels as a [`Tensor`]. Vectors per sample use the shape `(n, d, 1, 1)`.
//! Element precision is a type parameter implementing [`Scalar`] (`f32` for
//! training, `f64` for finite-difference checks).

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Element type tag stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(DType::F32),
            8 => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("single"),
            DType::F64 => f.write_str("double"),
        }
    }
}

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a·b + beta * c` for an `m×k` by `k×n` product with
    /// arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

fn max_offset(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path, $bytes:expr) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(max_offset(m, k, a_strides) <= a.len(), "gemm: lhs out of bounds");
                assert!(max_offset(k, n, b_strides) <= b.len(), "gemm: rhs out of bounds");
                assert!(max_offset(m, n, c_strides) <= c.len(), "gemm: out out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel is bounded by the
                // `max_offset` checks above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm, 4);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm, 8);

/// Row-major matrix product helpers. `trans_*` flags select the transposed
/// view of a row-major operand.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    let a_strides = if trans_a { (1, m) } else { (k, 1) };
    let b_strides = if trans_b { (1, k) } else { (n, 1) };
    T::gemm_raw(m, k, n, T::one(), a, a_strides, b, b_strides, beta, c, (n, 1));
}

/// Tensor dimensions `(n, c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    /// Validated shape: every dimension ≥ 1 and the element count fits `usize`.
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape { n, c, h, w };
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("zero dimension in {shape}")));
        }
        n.checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::shape(format!("element count of {shape} overflows")))?;
        Ok(shape)
    }

    pub fn vectors(n: usize, d: usize) -> Result<Self> {
        Shape::new(n, d, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_batch(&self, n: usize) -> Self {
        Shape { n, ..*self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Tensor of the given `[n, c, h, w]` shape filled with `fill`.
    pub fn new(dims: [usize; 4], fill: T) -> Result<Self> {
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        Ok(Self::full(shape, fill))
    }

    pub fn full(shape: Shape, fill: T) -> Self {
        Tensor {
            shape,
            data: vec![fill; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "{} values cannot fill shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// `(n, d, 1, 1)` tensor from per-sample rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("ragged rows"));
        }
        Self::from_vec(Shape::vectors(n, d)?, rows.concat())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    /// The contiguous values of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Same data viewed under a different shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Samples at `indices`, in order, as a new batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let shape = Shape::new(indices.len(), self.shape.c, self.shape.h, self.shape.w)?;
        let mut data = Vec::with_capacity(shape.len());
        for &i in indices {
            if i >= self.shape.n {
                return Err(Error::InvalidArgument(format!(
                    "sample index {i} out of range for batch of {}",
                    self.shape.n
                )));
            }
            data.extend_from_slice(self.sample(i));
        }
        Ok(Tensor { shape, data })
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.expect_shape(other.shape, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.as_f64()).expect("finite cast"))
                .collect(),
        }
    }

    pub fn expect_shape(&self, shape: Shape, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "{what}: expected {shape}, got {}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::non_finite(format!("{context} (element {i})"))),
            None => Ok(()),
        }
    }

    /// Finite check performed on every op in debug builds only; release
    /// builds police NaN/Inf at the network boundary.
    pub(crate) fn debug_finite(self, context: &str) -> Result<Self> {
        if cfg!(debug_assertions) {
            self.ensure_finite(context)?;
        }
        Ok(self)
    }
}

/// `out[n,i,p,q] = s[n,i] * x[n,i,p,q]`, with `s` shaped `(n, c, 1, 1)`.
pub fn channel_scale<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if s.shape() != Shape::vectors(xs.n, xs.c)? {
        return Err(Error::shape(format!(
            "channel_scale: weights {} do not match features {xs}",
            s.shape()
        )));
    }
    let plane = xs.plane();
    let mut out = x.clone();
    for (chunk, &w) in out.data.chunks_exact_mut(plane).zip(&s.data) {
        chunk.iter_mut().for_each(|v| *v = *v * w);
    }
    out.debug_finite("channel_scale")
}

/// `out[n,i] = Σ_{p,q} x[n,i,p,q]`, shaped `(n, c, 1, 1)`.
pub fn reduce_channel_sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let xs = x.shape();
    let data = x
        .data
        .chunks_exact(xs.plane())
        .map(|chunk| chunk.iter().copied().sum())
        .collect();
    Tensor {
        shape: Shape {
            n: xs.n,
            c: xs.c,
            h: 1,
            w: 1,
        },
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(dims: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(dims[0], dims[1], dims[2], dims[3]).unwrap(), data).unwrap()
    }

    #[test]
    fn new_fills() {
        let z = Tensor::<f64>::new([1, 1, 2, 2], 0.0).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let ones = Tensor::<f32>::new([2, 20, 24, 24], 1.0).unwrap();
        assert_eq!(ones.len(), 23040);
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let half = Tensor::<f64>::new([1, 3, 2, 2], 0.5).unwrap();
        assert_eq!(half.len(), 12);
        assert!(half.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new([0, 1, 2, 2], 0.0).is_err());
        assert!(Tensor::<f32>::new([1, 1, 1, 0], 0.0).is_err());
        assert!(Tensor::<f32>::new([usize::MAX, 2, 2, 2], 0.0).is_err());
    }

    #[test]
    fn channel_scale_cases() {
        let x = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let two = t([1, 1, 1, 1], vec![2.0]);
        assert_eq!(channel_scale(&x, &two).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);

        let zero = t([1, 1, 1, 1], vec![0.0]);
        assert!(channel_scale(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        let one = t([1, 1, 1, 1], vec![1.0]);
        assert_eq!(channel_scale(&x, &one).unwrap(), x);
    }

    #[test]
    fn channel_scale_mismatch_names_shapes() {
        let x = Tensor::<f64>::zeros(Shape::new(2, 3, 2, 2).unwrap());
        let s = Tensor::<f64>::zeros(Shape::vectors(2, 4).unwrap());
        let msg = channel_scale(&x, &s).unwrap_err().to_string();
        assert!(msg.contains("(2,4,1,1)") && msg.contains("(2,3,2,2)"), "{msg}");
    }

    #[test]
    fn reduce_channel_sum_cases() {
        let ones = Tensor::<f64>::new([1, 1, 3, 3], 1.0).unwrap();
        assert_eq!(reduce_channel_sum(&ones).data(), &[9.0]);
        let zeros = Tensor::<f64>::new([2, 3, 2, 2], 0.0).unwrap();
        assert!(reduce_channel_sum(&zeros).data().iter().all(|&v| v == 0.0));
        let x = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(reduce_channel_sum(&x).data(), &[10.0]);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(true, false, 2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    fn sample_case() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
        (1usize..3, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(n, c, h, w)| {
            let len = n * c * h * w;
            (
                proptest::collection::vec(-10.0f64..10.0, len),
                proptest::collection::vec(-3.0f64..3.0, n * c),
                proptest::collection::vec(-3.0f64..3.0, n * c),
            )
                .prop_map(move |(x, s1, s2)| {
                    let shape = Shape::new(n, c, h, w).unwrap();
                    let vs = Shape::vectors(n, c).unwrap();
                    (
                        Tensor::from_vec(shape, x).unwrap(),
                        Tensor::from_vec(vs, s1).unwrap(),
                        Tensor::from_vec(vs, s2).unwrap(),
                    )
                })
        })
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
    }

    proptest! {
        #[test]
        fn unit_weights_are_identity((x, s, _) in sample_case()) {
            let ones = s.map(|_| 1.0);
            prop_assert_eq!(channel_scale(&x, &ones).unwrap(), x);
        }

        #[test]
        fn channel_scale_is_linear((x, s1, s2) in sample_case()) {
            let mut sum = s1.clone();
            sum.add_assign(&s2).unwrap();
            let lhs = channel_scale(&x, &sum).unwrap();
            let mut rhs = channel_scale(&x, &s1).unwrap();
            rhs.add_assign(&channel_scale(&x, &s2).unwrap()).unwrap();
            // Cancellation can make the sum tiny; compare against the scale of the terms.
            let scale = x.max_abs() * 6.0;
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * scale.max(1e-12));
            }
        }

        #[test]
        fn channel_sum_commutes_with_scale((x, s, _) in sample_case()) {
            let lhs = reduce_channel_sum(&channel_scale(&x, &s).unwrap());
            let sums = reduce_channel_sum(&x);
            for ((a, b), w) in lhs.data().iter().zip(sums.data()).zip(s.data()) {
                let plane_scale = x.max_abs() * (x.shape().plane() as f64) * w.abs();
                prop_assert!(close(*a, b * w, 1e-9) || (a - b * w).abs() <= 1e-12 * plane_scale.max(1.0));
            }
        }
    }
}
