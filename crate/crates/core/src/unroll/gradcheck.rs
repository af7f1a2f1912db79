//! Central-difference verification of [`bptt_backward`].

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::bptt::{bptt_backward, total_loss, unrolled_forward, BackwardOptions, IterationTrace};
use super::model::Model;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Entries probed per parameter tensor; 0 probes all of them.
    pub max_per_tensor: usize,
    /// Denominator floor of the relative error `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub seed: u64,
    pub backward: BackwardOptions,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-5,
            max_per_tensor: 0,
            floor: 1e-6,
            seed: 0,
            backward: BackwardOptions::default(),
        }
    }
}

impl GradCheckConfig {
    /// This configuration with the floor raised to the roundoff level of the
    /// loss at `(batch, labels)`. A central difference of `L` carries absolute
    /// error of order `eps * |L| / step`, so entries smaller than that over the
    /// tolerance are held to the roundoff bound instead of a relative one.
    pub fn roundoff_aware(self, model: &Model<f64>, batch: &Tensor<f64>, labels: &[usize]) -> Result<Self> {
        let loss = total_loss(&unrolled_forward(model, batch, labels)?).abs().max(1.0);
        let noise = 64.0 * f64::EPSILON * loss / self.step;
        Ok(GradCheckConfig { floor: self.floor.max(noise / self.tolerance), ..self })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Probes skipped because they crossed a max-pool or ReLU kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub iterations: usize,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "  T={} {:<16} checked {:>4} skipped {:>2} max rel err {:.3e} {}",
                self.iterations,
                t.name,
                t.checked,
                t.skipped,
                t.max_rel_err,
                if t.max_rel_err < self.tolerance { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "T={} {} (max rel err {:.3e}, tolerance {:.0e})",
            self.iterations,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tolerance
        )
    }
}

fn signature(model: &Model<f64>, trace: &IterationTrace<f64>) -> Vec<usize> {
    trace.passes.iter().flat_map(|p| p.kink_signature(model)).collect()
}

/// Compares analytic gradients of the total unrolled loss with central
/// differences, parameter tensor by parameter tensor.
pub fn gradcheck(
    model: &Model<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let base_trace = unrolled_forward(model, batch, labels)?;
    let base_sig = signature(model, &base_trace);
    let analytic = bptt_backward(model, &base_trace, cfg.backward)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = model.clone();
    let mut tensors = Vec::with_capacity(model.params().len());

    for (pi, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let indices: Vec<usize> = if cfg.max_per_tensor == 0 || len <= cfg.max_per_tensor {
            (0..len).collect()
        } else {
            let mut v = rand::seq::index::sample(&mut rng, len, cfg.max_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut check = TensorCheck {
            name: model.params()[pi].name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in indices {
            let orig = probe.params()[pi].value.data()[idx];
            let mut eval = |value: f64| -> Result<(f64, bool)> {
                probe.params_mut()[pi].value.data_mut()[idx] = value;
                let trace = unrolled_forward(&probe, batch, labels)?;
                Ok((total_loss(&trace), signature(&probe, &trace) == base_sig))
            };
            let (plus, same_plus) = eval(orig + cfg.step)?;
            let (minus, same_minus) = eval(orig - cfg.step)?;
            probe.params_mut()[pi].value.data_mut()[idx] = orig;
            if !(same_plus && same_minus) {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            check.checked += 1;
            if err >= check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = idx;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        iterations: model.iterations(),
        tolerance: cfg.tolerance,
        tensors,
    })
}
