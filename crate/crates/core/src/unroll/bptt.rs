//! The `T`-times unrolled network: forward over all iterations and
//! backpropagation through time.
//!
//! Iteration 1 runs with every emphasis vector fixed at 1. Iteration `t > 1`
//! feeds the posterior of iteration `t − 1` through the feedback heads to get
//! its emphasis vectors. Each iteration has its own cross-entropy loss and
//! the total loss is their unweighted sum. Gradients reach iteration `t − 1`
//! both through the shared weights and through `p̂_{t−1}` into the heads.

use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward_opts, conv2d_forward, dense_backward, dense_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, softmax_backward, softmax_cross_entropy,
    softmax, ConvParams, DenseParams, PoolRecord,
};
use crate::rethink::{
    emphasis_backward_with, emphasis_forward, feedback_backward, feedback_forward, EmphasisVector,
    FeedbackHead, FeedbackTrace,
};
use crate::tensor::{Scalar, Tensor};

use super::model::{Model, Step};

/// Backward-pass switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardOptions {
    /// Stop gradients flowing from iteration `t` into `p̂_{t−1}`
    /// (truncated BPTT). Heads still receive gradients.
    pub detach_feedback: bool,
    /// Test-only corruption of the emphasis gradient, used to show that the
    /// gradient checker catches a wrong derivative.
    pub mutate_emphasis_grad: bool,
}

/// What each step kept from the forward pass.
#[derive(Clone, Debug)]
enum StepCache<T> {
    Input(Tensor<T>),
    Pool(PoolRecord),
    /// Input features and emphasis; `None` on the first iteration, where the
    /// emphasis layer is the identity.
    Emphasis(Option<(Tensor<T>, EmphasisVector<T>)>),
}

/// One pass through the network.
#[derive(Clone, Debug)]
pub struct PassTrace<T> {
    caches: Vec<StepCache<T>>,
    pub posterior: Tensor<T>,
    pub loss: T,
    grad_logits: Tensor<T>,
}

impl<T: Scalar> PassTrace<T> {
    /// Max-pool argmax records and ReLU sign patterns; a finite-difference
    /// probe that changes this crossed a non-differentiable point.
    pub(crate) fn kink_signature(&self, model: &Model<T>) -> Vec<usize> {
        let mut sig = Vec::new();
        for (step, cache) in model.steps.iter().zip(&self.caches) {
            match (step, cache) {
                (Step::Pool { .. }, StepCache::Pool(rec)) => sig.extend_from_slice(&rec.argmax),
                (Step::Relu { .. }, StepCache::Input(x)) => {
                    sig.extend(x.data().iter().map(|&v| usize::from(v > T::zero())))
                }
                _ => {}
            }
        }
        sig
    }
}

/// Activation traces for every iteration of one batch.
#[derive(Clone, Debug)]
pub struct IterationTrace<T> {
    pub passes: Vec<PassTrace<T>>,
    /// `feedback[t][h]`: head `h` at iteration `t + 1` (empty for the first).
    pub feedback: Vec<Vec<FeedbackTrace<T>>>,
}

impl<T: Scalar> IterationTrace<T> {
    pub fn losses(&self) -> Vec<T> {
        self.passes.iter().map(|p| p.loss).collect()
    }

    pub fn posteriors(&self) -> Vec<&Tensor<T>> {
        self.passes.iter().map(|p| &p.posterior).collect()
    }
}

/// `L = Σ_t ℓ_t`.
pub fn total_loss<T: Scalar>(trace: &IterationTrace<T>) -> T {
    trace.passes.iter().map(|p| p.loss).sum()
}

fn head<'a, T: Scalar>(model: &'a Model<T>, h: usize) -> FeedbackHead<'a, T> {
    let slot = &model.heads[h];
    FeedbackHead {
        weight: &model.params()[slot.weight].value,
        bias: &model.params()[slot.bias].value,
    }
}

/// Runs the layer stack once. `emphasis = None` means every emphasis layer is
/// the identity (first iteration). With `record = false` nothing is cached.
fn run_layers<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor<T>,
    emphasis: Option<&[EmphasisVector<T>]>,
    record: bool,
) -> Result<(Tensor<T>, Vec<StepCache<T>>)> {
    let params = model.params();
    let mut caches = Vec::with_capacity(if record { model.steps.len() } else { 0 });
    let mut x = batch.clone();
    for step in &model.steps {
        let (next, cache) = match step {
            Step::Conv { weight, bias, stride, padding } => {
                let p = ConvParams {
                    weight: &params[*weight].value,
                    bias: &params[*bias].value,
                    stride: *stride,
                    padding: *padding,
                };
                (conv2d_forward(&x, &p)?, StepCache::Input(x))
            }
            Step::Pool { window, stride } => {
                let (y, rec) = maxpool_forward(&x, *window, *stride)?;
                (y, StepCache::Pool(rec))
            }
            Step::Dense { weight, bias } => {
                let p = DenseParams { weight: &params[*weight].value, bias: &params[*bias].value };
                (dense_forward(&x, &p)?, StepCache::Input(x))
            }
            Step::Relu { slope } => (relu_forward(&x, T::lit(*slope))?, StepCache::Input(x)),
            Step::Emphasis { head } => match emphasis {
                None => (x, StepCache::Emphasis(None)),
                Some(vectors) => {
                    let a = &vectors[*head];
                    let y = emphasis_forward(&x, a)?;
                    (y, StepCache::Emphasis(Some((x, a.clone()))))
                }
            },
        };
        if record {
            caches.push(cache);
        }
        x = next;
    }
    Ok((x, caches))
}

fn check_batch<T: Scalar>(model: &Model<T>, batch: &Tensor<T>) -> Result<()> {
    let s = batch.shape();
    let (c, h, w) = model.spec().input;
    if (s.c, s.h, s.w) != (c, h, w) {
        return Err(Error::shape(format!(
            "batch {s} does not match network input ({c},{h},{w})"
        )));
    }
    Ok(())
}

/// Emphasis vectors of one pass with the head activations behind them.
type Emphasis<T> = (Vec<EmphasisVector<T>>, Vec<FeedbackTrace<T>>);

fn emphasis_for<T: Scalar>(
    model: &Model<T>,
    posterior: &Tensor<T>,
) -> Result<Emphasis<T>> {
    (0..model.heads.len())
        .map(|h| feedback_forward(&head(model, h), posterior))
        .collect::<Result<Vec<_>>>()
        .map(|pairs| pairs.into_iter().unzip())
}

/// Forward pass over all `T` iterations with losses and caches for
/// [`bptt_backward`].
pub fn unrolled_forward<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<IterationTrace<T>> {
    check_batch(model, batch)?;
    let iterations = model.iterations();
    let mut passes: Vec<PassTrace<T>> = Vec::with_capacity(iterations);
    let mut feedback = Vec::with_capacity(iterations);
    for t in 0..iterations {
        let (emphasis, fb) = match passes.last() {
            Some(prev) if !model.heads.is_empty() => {
                let (e, f) = emphasis_for(model, &prev.posterior)?;
                (Some(e), f)
            }
            _ => (None, Vec::new()),
        };
        let (logits, caches) = run_layers(model, batch, emphasis.as_deref(), true)?;
        let (posterior, loss, grad_logits) = softmax_cross_entropy(&logits, labels)
            .map_err(|e| match e {
                Error::NonFinite { context } => {
                    Error::non_finite(format!("{context} at iteration {}", t + 1))
                }
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("loss at iteration {}", t + 1)));
        }
        passes.push(PassTrace { caches, posterior, loss, grad_logits });
        feedback.push(fb);
    }
    Ok(IterationTrace { passes, feedback })
}

/// Posteriors and emphasis vectors of every iteration, without labels or caches.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub posteriors: Vec<Tensor<T>>,
    /// `emphasis[t][h]`; the first iteration holds all-ones vectors.
    pub emphasis: Vec<Vec<EmphasisVector<T>>>,
}

pub fn infer<T: Scalar>(model: &Model<T>, batch: &Tensor<T>) -> Result<Inference<T>> {
    check_batch(model, batch)?;
    let n = batch.shape().n;
    let mut posteriors: Vec<Tensor<T>> = Vec::with_capacity(model.iterations());
    let mut emphasis = Vec::with_capacity(model.iterations());
    for _ in 0..model.iterations() {
        let vectors = match posteriors.last() {
            Some(prev) if !model.heads.is_empty() => Some(emphasis_for(model, prev)?.0),
            _ => None,
        };
        let (logits, _) = run_layers(model, batch, vectors.as_deref(), false)?;
        posteriors.push(softmax(&logits)?);
        emphasis.push(match vectors {
            Some(v) => v,
            None => model
                .heads
                .iter()
                .map(|h| EmphasisVector::ones(n, h.channels))
                .collect::<Result<_>>()?,
        });
    }
    Ok(Inference { posteriors, emphasis })
}

/// Gradients of `L = Σ_t ℓ_t` with respect to every parameter, in
/// [`Model::params`] order.
pub fn bptt_backward<T: Scalar>(
    model: &Model<T>,
    trace: &IterationTrace<T>,
    opts: BackwardOptions,
) -> Result<Vec<Tensor<T>>> {
    if trace.passes.len() != model.iterations()
        || trace.passes.iter().any(|p| p.caches.len() != model.steps.len())
    {
        return Err(Error::shape("trace does not belong to this model"));
    }
    let params = model.params();
    let mut grads = model.zero_grads();
    // ∂L/∂p̂_t contributed by the heads of iteration t + 1.
    let mut carry: Option<Tensor<T>> = None;

    for t in (0..trace.passes.len()).rev() {
        let pass = &trace.passes[t];
        let mut g = pass.grad_logits.clone();
        if let Some(gp) = carry.take() {
            g.add_assign(&softmax_backward(&pass.posterior, &gp)?)?;
        }

        let mut head_grads: Vec<Option<Tensor<T>>> = vec![None; model.heads.len()];
        for (i, (step, cache)) in model.steps.iter().zip(&pass.caches).enumerate().rev() {
            g = match (step, cache) {
                (Step::Conv { weight, bias, stride, padding }, StepCache::Input(x)) => {
                    let p = ConvParams {
                        weight: &params[*weight].value,
                        bias: &params[*bias].value,
                        stride: *stride,
                        padding: *padding,
                    };
                    let lg = conv2d_backward_opts(x, &p, &g, i > 0)?;
                    grads[*weight].add_assign(lg.weight.as_ref().unwrap())?;
                    grads[*bias].add_assign(lg.bias.as_ref().unwrap())?;
                    match lg.input {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                (Step::Pool { .. }, StepCache::Pool(rec)) => maxpool_backward(rec, &g)?,
                (Step::Dense { weight, bias }, StepCache::Input(x)) => {
                    let p = DenseParams { weight: &params[*weight].value, bias: &params[*bias].value };
                    let lg = dense_backward(x, &p, &g)?;
                    grads[*weight].add_assign(lg.weight.as_ref().unwrap())?;
                    grads[*bias].add_assign(lg.bias.as_ref().unwrap())?;
                    lg.input.unwrap()
                }
                (Step::Relu { slope }, StepCache::Input(x)) => relu_backward(x, T::lit(*slope), &g)?,
                (Step::Emphasis { head }, StepCache::Emphasis(cached)) => match cached {
                    None => g,
                    Some((x, a)) => {
                        let (gx, ga) = emphasis_backward_with(x, a, &g, opts.mutate_emphasis_grad)?;
                        head_grads[*head] = Some(ga);
                        gx
                    }
                },
                _ => return Err(Error::shape("trace cache does not match layer")),
            };
        }

        if t > 0 {
            let mut grad_prev: Option<Tensor<T>> = None;
            for (h, ga) in head_grads.into_iter().enumerate() {
                let Some(ga) = ga else { continue };
                let fg = feedback_backward(&head(model, h), &trace.feedback[t][h], &ga)?;
                let slot = &model.heads[h];
                grads[slot.weight].add_assign(&fg.weight)?;
                grads[slot.bias].add_assign(&fg.bias)?;
                if !opts.detach_feedback {
                    match grad_prev.as_mut() {
                        Some(acc) => acc.add_assign(&fg.posterior)?,
                        None => grad_prev = Some(fg.posterior),
                    }
                }
            }
            carry = grad_prev;
        }
    }
    Ok(grads)
}

/// How a single prediction is formed from the per-iteration posteriors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Posterior of the last iteration.
    Final,
    /// Mean of all iterations' posteriors.
    Mean,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Self::Final),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!("eval aggregation must be final or mean, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Final => "final",
            Self::Mean => "mean",
        })
    }
}

pub fn aggregate<T: Scalar>(posteriors: &[Tensor<T>], how: Aggregation) -> Tensor<T> {
    match how {
        Aggregation::Final => posteriors.last().expect("at least one iteration").clone(),
        Aggregation::Mean => {
            let mut acc = posteriors[0].clone();
            for p in &posteriors[1..] {
                acc.add_assign(p).expect("posteriors share a shape");
            }
            let scale = T::one() / T::from_usize(posteriors.len()).unwrap();
            acc.map(|v| v * scale)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unroll::spec::{EmphasisPlacement, NetworkSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(spec: &NetworkSpec, n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = spec.input;
        let shape = crate::tensor::Shape::new(n, c, h, w).unwrap();
        let x = Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels = (0..n).map(|_| rng.gen_range(0..spec.classes)).collect();
        (x, labels)
    }

    fn randomize_heads(model: &mut Model<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.params_mut().iter_mut().filter(|p| p.name.starts_with("fb_")) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        }
    }

    #[test]
    fn single_iteration_matches_baseline_bit_exactly() {
        let lr_spec = NetworkSpec::tiny(4, 1);
        let lr = Model::<f64>::new(lr_spec.clone(), 5).unwrap();
        let base = lr.transplant(lr_spec.baseline(), 0).unwrap();
        let (x, y) = batch(&lr_spec, 6, 1);
        let (tl, tb) = (unrolled_forward(&lr, &x, &y).unwrap(), unrolled_forward(&base, &x, &y).unwrap());
        assert_eq!(tl.losses(), tb.losses());
        let (gl, gb) = (
            bptt_backward(&lr, &tl, BackwardOptions::default()).unwrap(),
            bptt_backward(&base, &tb, BackwardOptions::default()).unwrap(),
        );
        for (p, g) in base.params().iter().zip(&gb) {
            let idx = lr.params().iter().position(|q| q.name == p.name).unwrap();
            assert_eq!(&gl[idx], g, "{}", p.name);
        }
    }

    #[test]
    fn zero_heads_repeat_the_first_iteration() {
        let spec = NetworkSpec::tiny(4, 2);
        let model = Model::<f64>::new(spec.clone(), 7).unwrap();
        let (x, y) = batch(&spec, 5, 2);
        let trace = unrolled_forward(&model, &x, &y).unwrap();
        assert_eq!(trace.passes[0].posterior, trace.passes[1].posterior);
        assert_eq!(total_loss(&trace), 2.0 * trace.passes[0].loss);

        let one = {
            let mut m = model.clone();
            m.set_iterations(1).unwrap();
            let tr = unrolled_forward(&m, &x, &y).unwrap();
            assert_eq!(total_loss(&tr), tr.passes[0].loss);
            bptt_backward(&m, &tr, BackwardOptions::default()).unwrap()
        };
        let two = bptt_backward(&model, &trace, BackwardOptions::default()).unwrap();
        for ((p, g1), g2) in model.params().iter().zip(&one).zip(&two) {
            if p.name.starts_with("fb_") {
                continue;
            }
            let doubled = g1.map(|v| 2.0 * v);
            assert_eq!(&doubled, g2, "{}", p.name);
        }
    }

    #[test]
    fn nonzero_heads_change_later_iterations() {
        let spec = NetworkSpec::tiny(4, 2);
        let mut model = Model::<f64>::new(spec.clone(), 8).unwrap();
        randomize_heads(&mut model, 3);
        let (x, y) = batch(&spec, 5, 4);
        let trace = unrolled_forward(&model, &x, &y).unwrap();
        assert_ne!(trace.passes[0].posterior, trace.passes[1].posterior);
        assert!(trace.losses().iter().all(|l| l.is_finite()));
    }

    #[test]
    fn perfect_classification_has_zero_loss() {
        // Bias the output so one class dominates overwhelmingly.
        let spec = NetworkSpec::tiny(3, 2);
        let mut model = Model::<f64>::new(spec.clone(), 9).unwrap();
        for p in model.params_mut() {
            if p.name == "fc2.weight" {
                p.value.fill(0.0);
            }
            if p.name == "fc2.bias" {
                p.value.data_mut().copy_from_slice(&[800.0, 0.0, 0.0]);
            }
        }
        let (x, _) = batch(&spec, 4, 5);
        let trace = unrolled_forward(&model, &x, &[0, 0, 0, 0]).unwrap();
        assert_eq!(total_loss(&trace), 0.0);
    }

    #[test]
    fn infer_matches_training_forward() {
        let spec = NetworkSpec::tiny(4, 3);
        let mut model = Model::<f64>::new(spec.clone(), 10).unwrap();
        randomize_heads(&mut model, 11);
        let (x, y) = batch(&spec, 3, 6);
        let trace = unrolled_forward(&model, &x, &y).unwrap();
        let inf = infer(&model, &x).unwrap();
        for (a, b) in trace.posteriors().into_iter().zip(&inf.posteriors) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-14);
            }
        }
        assert!(inf.emphasis[0].iter().all(|e| e.values().data().iter().all(|&v| v == 1.0)));
        assert_eq!(inf.emphasis.len(), 3);
    }

    #[test]
    fn after_pool_placement_runs() {
        let spec = NetworkSpec::tiny(4, 1).baseline().with_rethinking(EmphasisPlacement::AfterPool, 2);
        let mut model = Model::<f64>::new(spec.clone(), 12).unwrap();
        randomize_heads(&mut model, 13);
        let (x, y) = batch(&spec, 3, 7);
        let trace = unrolled_forward(&model, &x, &y).unwrap();
        bptt_backward(&model, &trace, BackwardOptions::default()).unwrap();
    }

    #[test]
    fn mean_aggregation() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(aggregate(&[a.clone(), b.clone()], Aggregation::Mean).data(), &[0.5, 0.5]);
        assert_eq!(aggregate(&[a, b.clone()], Aggregation::Final), b);
    }

    #[test]
    fn rejects_mismatched_batches() {
        let spec = NetworkSpec::tiny(4, 2);
        let model = Model::<f64>::new(spec, 1).unwrap();
        let x = Tensor::zeros(crate::tensor::Shape::new(2, 1, 9, 9).unwrap());
        assert!(unrolled_forward(&model, &x, &[0, 1]).is_err());
        let x = Tensor::zeros(crate::tensor::Shape::new(2, 1, 8, 8).unwrap());
        assert!(unrolled_forward(&model, &x, &[0, 9]).is_err());
    }
}
