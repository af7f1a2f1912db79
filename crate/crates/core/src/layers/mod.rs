//! Standard feedforward layers with explicit forward/backward passes.

mod activation;
mod conv;
mod dense;
mod pool;

pub use activation::{
    cross_entropy, relu_backward, relu_forward, softmax, softmax_backward, softmax_cross_entropy,
};
pub use conv::{conv2d_backward, conv2d_backward_opts, conv2d_forward, conv_out_len, ConvParams};
pub use dense::{dense_backward, dense_forward, DenseParams};
pub use pool::{maxpool_backward, maxpool_forward, pool_out_len, PoolRecord};


use rand::Rng;

use crate::tensor::{Scalar, Shape, Tensor};

/// Gradients produced by a parameterized layer's backward pass.
#[derive(Clone, Debug)]
pub struct LayerGrad<T> {
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor<T>>,
}

/// Zero-mean uniform weights in `±1/sqrt(fan_in)`.
pub fn init_uniform<T: Scalar, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..shape.len())
        .map(|_| T::lit(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

#[cfg(test)]
pub(crate) mod testutil {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::{Shape, Tensor};

    pub fn rng_tensor(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).unwrap();
        Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Central differences of a scalar function, step 1e-5.
    pub fn central_difference(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-5;
        let mut grad = Tensor::zeros(x.shape());
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        grad
    }

    /// Max over elements of `|a − b| / max(|a|, |b|, 1e-7)`.
    pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-7))
            .fold(0.0, f64::max)
    }
}
