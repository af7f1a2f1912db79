//! Two-phase training: a plain baseline first, then the same weights with
//! zero-initialized feedback heads trained through the unrolled network.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::data::{contrast_normalize, flip_horizontal, load_amat, synthetic_confusable, BatchIterator, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};
use crate::unroll::{
    bptt_backward, sgd_step, unrolled_forward, BackwardOptions, IterationTrace, Model, OptimState,
};

use super::checkpoint::Checkpoint;
use super::config::{DataSource, TrainConfig};
use super::eval::{evaluate, EvalReport, Tally};
use super::metrics::{MetricsLog, MetricsRow};

pub const PHASE1_CHECKPOINT: &str = "phase1.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BASELINE_FT_CHECKPOINT: &str = "baseline_ft.ckpt";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BASELINE_FT_METRICS_FILE: &str = "metrics_baseline_ft.csv";

/// Loads a data source, applying contrast normalization when configured.
pub fn load_source(source: &DataSource, split: Split, cfg: &TrainConfig) -> Result<Dataset> {
    let mut data = match source {
        DataSource::Amat(path) => load_amat(path, split)?,
        DataSource::Synthetic { n_per_class, seed } => {
            let mut d = synthetic_confusable(*n_per_class, *seed)?;
            d.split = split;
            d
        }
    };
    if cfg.normalize {
        data = contrast_normalize(&data, cfg.normalize_epsilon)?;
    }
    Ok(data)
}

/// One SGD step on the summed unrolled loss. Returns the forward trace,
/// computed before the update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    optim: &mut OptimState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    opts: BackwardOptions,
) -> Result<IterationTrace<T>> {
    let trace = unrolled_forward(model, x, labels)?;
    let grads = bptt_backward(model, &trace, opts)?;
    sgd_step(model.params_mut(), &grads, optim)?;
    Ok(trace)
}

/// End-of-run evaluations.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub phase1_test: Option<EvalReport>,
    pub final_train: EvalReport,
    pub final_test: Option<EvalReport>,
    pub baseline_ft_test: Option<EvalReport>,
    pub baseline_ft_train: Option<EvalReport>,
}

struct Session<'a, T> {
    cfg: &'a TrainConfig,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    model: Model<T>,
    optim: OptimState<T>,
    phase: u8,
    /// Epochs completed in the current phase.
    epoch: usize,
    batches: BatchIterator,
    metrics: MetricsLog,
    checkpoint_name: &'static str,
}

impl<T: Scalar> Session<'_, T> {
    fn global_epoch(&self) -> usize {
        self.epoch + if self.phase == 2 { self.cfg.phase1_epochs } else { 0 }
    }

    fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            optim: Some(self.optim.clone()),
            phase: self.phase,
            epoch: self.epoch as u64,
            rng_seed: self.batches.seed(),
            rng_epoch: self.batches.epoch(),
            config: self.cfg.to_string(),
        }
    }

    fn run_epoch(&mut self, log: &mut dyn Write) -> Result<()> {
        let start = Instant::now();
        let lr = self.cfg.lr_at(self.epoch + 1);
        self.optim.lr = lr;
        let opts = BackwardOptions { detach_feedback: self.cfg.truncated_bptt, ..Default::default() };
        let mut flip_rng = self.batches.epoch_rng(1);
        let mut tally = Tally::new(self.model.iterations(), &[1]);
        for chunk in self.batches.next_epoch() {
            let (mut x, y) = self.train.batch::<T>(&chunk)?;
            if self.cfg.flip {
                let coins: Vec<bool> = (0..chunk.len()).map(|_| flip_rng.gen_bool(0.5)).collect();
                flip_horizontal(&mut x, &coins)?;
            }
            let trace = match train_step(&mut self.model, &mut self.optim, &x, &y, opts) {
                Ok(t) => t,
                Err(e @ Error::NonFinite { .. }) => {
                    let path = self.cfg.out_dir.join(DIAGNOSTIC_CHECKPOINT);
                    self.checkpoint().save(&path)?;
                    writeln!(log, "non-finite value, diagnostic checkpoint written to {}", path.display())?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            tally.add(&trace.posteriors(), &trace.losses(), &y);
        }
        self.epoch += 1;
        let train = tally.finish();
        let seconds = start.elapsed().as_secs_f64();
        let epoch = self.global_epoch();
        let row = |split, r: &EvalReport, seconds| MetricsRow {
            phase: self.phase,
            epoch,
            split,
            lr,
            loss_total: r.losses().iter().sum(),
            loss_per_iter: r.losses(),
            error_per_iter: r.errors(),
            error_pred: r.error(self.cfg.eval_aggregation),
            top1_conf_per_iter: r.confidences(),
            seconds,
        };
        self.metrics.append(&row(Split::Train, &train, seconds))?;
        let phase_epochs = if self.phase == 1 { self.cfg.phase1_epochs } else { self.cfg.phase2_epochs };
        let mut line = format!(
            "phase {} epoch {}/{} lr {lr} train loss {:.5} err {:.3}%",
            self.phase,
            self.epoch,
            phase_epochs,
            train.losses().iter().sum::<f64>(),
            train.error(self.cfg.eval_aggregation)
        );
        if let Some(test) = self.test {
            if self.epoch.is_multiple_of(self.cfg.eval_every) || self.epoch == phase_epochs {
                let t0 = Instant::now();
                let r = evaluate(&self.model, test, &[1], self.cfg.batch_size)?;
                self.metrics.append(&row(Split::Test, &r, t0.elapsed().as_secs_f64()))?;
                line += &format!(" test err {:.3}%", r.error(self.cfg.eval_aggregation));
            }
        }
        writeln!(log, "{line} ({seconds:.1}s)")?;
        self.checkpoint().save(self.cfg.out_dir.join(self.checkpoint_name))?;
        Ok(())
    }

    fn run_phase(&mut self, epochs: usize, log: &mut dyn Write) -> Result<()> {
        while self.epoch < epochs {
            self.run_epoch(log)?;
        }
        Ok(())
    }
}

fn test_report<T: Scalar>(model: &Model<T>, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<Option<EvalReport>> {
    test.map(|d| evaluate(model, d, &[1], cfg.batch_size)).transpose()
}

/// Runs (or resumes) the whole schedule in precision `T`.
pub fn run_training<T: Scalar>(
    cfg: &TrainConfig,
    resume: Option<Checkpoint<T>>,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let train = load_source(cfg.train.as_ref().expect("validated"), Split::Train, cfg)?;
    let test = cfg.test.as_ref().map(|s| load_source(s, Split::Test, cfg)).transpose()?;
    if let Some(t) = &test {
        if t.classes() != train.classes() {
            return Err(Error::Data(format!("train has {} classes, test has {}", train.classes(), t.classes())));
        }
    }
    writeln!(log, "train samples {}  test samples {}", train.len(), test.as_ref().map_or(0, Dataset::len))?;
    let classes = train.classes();
    let out = |name: &str| cfg.out_dir.join(name);

    let mut session = match resume {
        None => {
            let model = Model::<T>::new(cfg.baseline_spec(classes)?, cfg.seed)?;
            Session {
                cfg,
                train: &train,
                test: test.as_ref(),
                optim: OptimState::new(&model, cfg.lr, cfg.momentum, cfg.weight_decay)?,
                model,
                phase: 1,
                epoch: 0,
                batches: BatchIterator::new(train.len(), cfg.batch_size, cfg.seed)?,
                metrics: MetricsLog::create(out(METRICS_FILE))?,
                checkpoint_name: LATEST_CHECKPOINT,
            }
        }
        Some(ckpt) => {
            let mut batches = BatchIterator::new(train.len(), cfg.batch_size, ckpt.rng_seed)?;
            batches.set_epoch(ckpt.rng_epoch);
            let optim = match ckpt.optim {
                Some(o) => o,
                None => OptimState::new(&ckpt.model, cfg.lr, cfg.momentum, cfg.weight_decay)?,
            };
            writeln!(log, "resuming phase {} after epoch {}", ckpt.phase, ckpt.epoch)?;
            Session {
                cfg,
                train: &train,
                test: test.as_ref(),
                model: ckpt.model,
                optim,
                phase: ckpt.phase,
                epoch: ckpt.epoch as usize,
                batches,
                metrics: MetricsLog::open(out(METRICS_FILE))?,
                checkpoint_name: LATEST_CHECKPOINT,
            }
        }
    };

    let mut phase1_test = None;
    let mut baseline_ft_test = None;
    let mut baseline_ft_train = None;
    if session.phase == 1 {
        session.run_phase(cfg.phase1_epochs, log)?;
        session.checkpoint().save(out(PHASE1_CHECKPOINT))?;
        phase1_test = test_report(&session.model, test.as_ref(), cfg)?;

        if cfg.baseline_finetune {
            writeln!(log, "continuing the baseline for {} epochs without heads", cfg.phase2_epochs)?;
            let mut ft = Session {
                cfg,
                train: &train,
                test: test.as_ref(),
                model: session.model.clone(),
                optim: OptimState::new(&session.model, cfg.lr, cfg.momentum, cfg.weight_decay)?,
                phase: 2,
                epoch: 0,
                batches: session.batches.clone(),
                metrics: MetricsLog::create(out(BASELINE_FT_METRICS_FILE))?,
                checkpoint_name: BASELINE_FT_CHECKPOINT,
            };
            ft.run_phase(cfg.phase2_epochs, log)?;
            ft.checkpoint().save(out(BASELINE_FT_CHECKPOINT))?;
            baseline_ft_test = test_report(&ft.model, test.as_ref(), cfg)?;
            baseline_ft_train = Some(evaluate(&ft.model, &train, &[1], cfg.batch_size)?);
        }

        let model = session.model.transplant(cfg.rethinking_spec(classes)?, cfg.seed)?;
        writeln!(
            log,
            "attached {} feedback heads ({} parameters), T = {}",
            model.spec().heads.len(),
            model.head_param_count(),
            model.iterations()
        )?;
        session.optim = OptimState::new(&model, cfg.lr, cfg.momentum, cfg.weight_decay)?;
        session.model = model;
        session.phase = 2;
        session.epoch = 0;
    }
    session.run_phase(cfg.phase2_epochs, log)?;
    session.checkpoint().save(out(FINAL_CHECKPOINT))?;

    let final_train = evaluate(&session.model, &train, &[1], cfg.batch_size)?;
    let final_test = test_report(&session.model, test.as_ref(), cfg)?;
    writeln!(log, "final model on the training set:\n{final_train}")?;
    if let Some(r) = &final_test {
        writeln!(log, "final model on the test set:\n{r}")?;
    }
    if let (Some(p1), Some(r)) = (&phase1_test, &final_test) {
        writeln!(log, "baseline after phase 1: test error {:.3}%", p1.error_final)?;
        if let Some(ft) = &baseline_ft_test {
            writeln!(log, "baseline further trained: test error {:.3}%", ft.error_final)?;
        }
        writeln!(log, "rethinking model: test error {:.3}%", r.error(cfg.eval_aggregation))?;
    }
    Ok(TrainSummary {
        out_dir: cfg.out_dir.clone(),
        phase1_test,
        final_train,
        final_test,
        baseline_ft_test,
        baseline_ft_train,
    })
}

/// Dispatches on the configured precision.
pub fn train(cfg: &TrainConfig, log: &mut dyn Write) -> Result<TrainSummary> {
    match cfg.precision {
        DType::F32 => run_training::<f32>(cfg, None, log),
        DType::F64 => run_training::<f64>(cfg, None, log),
    }
}

/// Continues a run from a checkpoint written by [`train`]. The stored
/// configuration is used, with `overrides` applied on top.
pub fn resume(path: &Path, overrides: &[String], log: &mut dyn Write) -> Result<TrainSummary> {
    let dtype = super::checkpoint::peek_dtype(path)?;
    fn go<T: Scalar>(path: &Path, overrides: &[String], log: &mut dyn Write) -> Result<TrainSummary> {
        let ckpt = Checkpoint::<T>::load(path)?;
        let mut cfg = TrainConfig::parse_text(&ckpt.config)?;
        for o in overrides {
            cfg.apply_override(o)?;
        }
        if cfg.precision != T::DTYPE {
            return Err(Error::Config("precision cannot change when resuming".into()));
        }
        writeln!(log, "{cfg}")?;
        run_training(&cfg, Some(ckpt), log)
    }
    match dtype {
        DType::F32 => go::<f32>(path, overrides, log),
        DType::F64 => go::<f64>(path, overrides, log),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Network;
    use crate::unroll::NetworkSpec;

    fn tiny_cfg(dir: &Path) -> TrainConfig {
        TrainConfig {
            train: Some(DataSource::Synthetic { n_per_class: 8, seed: 1 }),
            test: Some(DataSource::Synthetic { n_per_class: 4, seed: 2 }),
            network: Network::Tiny28,
            batch_size: 6,
            phase1_epochs: 2,
            phase2_epochs: 2,
            precision: DType::F64,
            out_dir: dir.to_path_buf(),
            ..Default::default()
        }
    }

    #[test]
    fn fresh_heads_reproduce_the_baseline_losses() {
        let data = synthetic_confusable(4, 3).unwrap();
        let base = Model::<f64>::new(NetworkSpec::tiny28(2, 1).baseline(), 2).unwrap();
        let lr = base.transplant(NetworkSpec::tiny28(2, 2), 2).unwrap();
        let (x, y) = data.batch::<f64>(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let tb = unrolled_forward(&base, &x, &y).unwrap();
        let tl = unrolled_forward(&lr, &x, &y).unwrap();
        assert_eq!(tl.losses(), vec![tb.losses()[0]; 2]);
    }

    #[test]
    fn run_writes_checkpoints_and_ordered_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { baseline_finetune: true, ..tiny_cfg(dir.path()) };
        let mut log = Vec::new();
        let summary = train(&cfg, &mut log).unwrap();
        for f in [PHASE1_CHECKPOINT, FINAL_CHECKPOINT, BASELINE_FT_CHECKPOINT, METRICS_FILE, BASELINE_FT_METRICS_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let rows = crate::harness::metrics::read_metrics(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows.last().unwrap().loss_per_iter.len(), 2);
        assert_eq!(rows[0].loss_per_iter.len(), 1);
        assert_eq!(summary.final_train.per_iter.len(), 2);
        assert!(summary.baseline_ft_test.is_some());
        let final_ckpt = Checkpoint::<f64>::load(dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!((final_ckpt.phase, final_ckpt.epoch), (2, 2));
        assert_eq!(final_ckpt.rng_epoch, 4);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let a = tempfile::tempdir().unwrap();
        let full = train(&tiny_cfg(a.path()), &mut Vec::new()).unwrap();

        let b = tempfile::tempdir().unwrap();
        let short = TrainConfig { phase2_epochs: 1, ..tiny_cfg(b.path()) };
        train(&short, &mut Vec::new()).unwrap();
        let resumed =
            resume(&b.path().join(LATEST_CHECKPOINT), &["phase2_epochs=2".to_string()], &mut Vec::new()).unwrap();
        assert_eq!(resumed.final_train, full.final_train);
        let ca = Checkpoint::<f64>::load(a.path().join(FINAL_CHECKPOINT)).unwrap();
        let cb = Checkpoint::<f64>::load(b.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(ca.model, cb.model);
        assert_eq!(ca.optim, cb.optim);
    }

    #[test]
    fn divergence_writes_a_diagnostic_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { lr: 1e30, momentum: 0.0, phase1_epochs: 3, normalize: false, ..tiny_cfg(dir.path()) };
        let err = train(&cfg, &mut Vec::new()).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
        assert!(dir.path().join(DIAGNOSTIC_CHECKPOINT).exists());
    }
}
