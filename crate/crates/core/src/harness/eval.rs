//! Per-iteration top-k accuracy, loss and confidence.

use std::fmt;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::unroll::{aggregate, unrolled_forward, Aggregation, Model};

/// Rank of `label` in `row` (0 = top), ties broken towards the lower class
/// index as in arg-max.
fn rank<T: Scalar>(row: &[T], label: usize) -> usize {
    let pl = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &p)| p > pl || (p == pl && j < label))
        .count()
}

fn top1_conf<T: Scalar>(row: &[T]) -> f64 {
    row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)).as_f64()
}

/// Running sums over batches.
#[derive(Clone, Debug)]
pub(crate) struct Tally {
    ks: Vec<usize>,
    n: usize,
    loss: Vec<f64>,
    hits: Vec<Vec<usize>>,
    conf: Vec<f64>,
    final_hits: usize,
    mean_hits: usize,
}

impl Tally {
    pub(crate) fn new(iterations: usize, ks: &[usize]) -> Self {
        Tally {
            ks: ks.to_vec(),
            n: 0,
            loss: vec![0.0; iterations],
            hits: vec![vec![0; ks.len()]; iterations],
            conf: vec![0.0; iterations],
            final_hits: 0,
            mean_hits: 0,
        }
    }

    /// Adds a batch given each iteration's posterior and mean loss.
    pub(crate) fn add<T: Scalar>(&mut self, posteriors: &[&Tensor<T>], losses: &[T], labels: &[usize]) {
        let n = labels.len();
        for (t, p) in posteriors.iter().enumerate() {
            self.loss[t] += losses[t].as_f64() * n as f64;
            let classes = p.shape().c;
            for (i, &label) in labels.iter().enumerate() {
                let row = &p.data()[i * classes..(i + 1) * classes];
                let r = rank(row, label);
                for (h, &k) in self.hits[t].iter_mut().zip(&self.ks) {
                    *h += (r < k) as usize;
                }
                self.conf[t] += top1_conf(row);
            }
        }
        let owned: Vec<Tensor<T>> = posteriors.iter().map(|&p| p.clone()).collect();
        for (how, hits) in [(Aggregation::Final, &mut self.final_hits), (Aggregation::Mean, &mut self.mean_hits)] {
            let p = aggregate(&owned, how);
            let classes = p.shape().c;
            *hits += labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| rank(&p.data()[i * classes..(i + 1) * classes], l) == 0)
                .count();
        }
        self.n += n;
    }

    pub(crate) fn finish(&self) -> EvalReport {
        let n = self.n.max(1) as f64;
        let per_iter = (0..self.loss.len())
            .map(|t| {
                let topk: Vec<f64> = self.hits[t].iter().map(|&h| 100.0 * h as f64 / n).collect();
                let top1 = self
                    .ks
                    .iter()
                    .position(|&k| k == 1)
                    .map_or(f64::NAN, |i| topk[i]);
                IterationStats { loss: self.loss[t] / n, topk, top1_conf: self.conf[t] / n, error: 100.0 - top1 }
            })
            .collect();
        EvalReport {
            samples: self.n,
            ks: self.ks.clone(),
            per_iter,
            error_final: 100.0 - 100.0 * self.final_hits as f64 / n,
            error_mean: 100.0 - 100.0 * self.mean_hits as f64 / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationStats {
    /// Mean cross-entropy of this iteration's posterior.
    pub loss: f64,
    /// Top-k accuracy in percent, aligned with [`EvalReport::ks`].
    pub topk: Vec<f64>,
    /// Mean of the largest posterior entry.
    pub top1_conf: f64,
    /// `100 − top-1 accuracy`.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub ks: Vec<usize>,
    pub per_iter: Vec<IterationStats>,
    /// Error of the final iteration's prediction.
    pub error_final: f64,
    /// Error of the prediction averaged over iterations.
    pub error_mean: f64,
}

impl EvalReport {
    pub fn error(&self, how: Aggregation) -> f64 {
        match how {
            Aggregation::Final => self.error_final,
            Aggregation::Mean => self.error_mean,
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.per_iter.iter().map(|s| s.loss).collect()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.per_iter.iter().map(|s| s.error).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.per_iter.iter().map(|s| s.top1_conf).collect()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>4} {:>10}", "iter", "loss")?;
        for k in &self.ks {
            write!(f, " {:>8}", format!("top-{k}"))?;
        }
        writeln!(f, " {:>8} {:>10}", "error", "top1-conf")?;
        for (t, s) in self.per_iter.iter().enumerate() {
            write!(f, "{:>4} {:>10.5}", t + 1, s.loss)?;
            for a in &s.topk {
                write!(f, " {a:>7.3}%")?;
            }
            writeln!(f, " {:>7.3}% {:>10.5}", s.error, s.top1_conf)?;
        }
        write!(
            f,
            "samples {}  error(final) {:.3}%  error(mean over iterations) {:.3}%",
            self.samples, self.error_final, self.error_mean
        )
    }
}

/// Evaluates `model` on every sample of `data`.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, ks: &[usize], batch_size: usize) -> Result<EvalReport> {
    let classes = model.spec().classes;
    if data.classes() != classes {
        return Err(Error::Data(format!(
            "network predicts {classes} classes but the dataset has {}",
            data.classes()
        )));
    }
    if ks.is_empty() || ks.iter().any(|&k| k == 0 || k > classes) {
        return Err(Error::InvalidArgument(format!("every k must lie in [1, {classes}], got {ks:?}")));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut ks = ks.to_vec();
    if !ks.contains(&1) {
        ks.insert(0, 1);
    }
    let mut tally = Tally::new(model.iterations(), &ks);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, y) = data.batch::<T>(chunk)?;
        let trace = unrolled_forward(model, &x, &y)?;
        tally.add(&trace.posteriors(), &trace.losses(), &y);
    }
    Ok(tally.finish())
}
