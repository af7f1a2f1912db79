//! Runners for the acceptance criteria. Each returns an [`Outcome`] with a
//! verdict and a one-line account of the measured values.

use std::env;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rethink_core::data::{synthetic_confusable, BatchIterator, Dataset};
use rethink_core::harness::{
    evaluate, gradcheck_suite, tensor_inventory, train, train_step, Checkpoint, DataSource, EvalReport, Network,
    TrainConfig, TrainSummary,
};
use rethink_core::rethink::{feedback_forward, head_param_count, FeedbackHead};
use rethink_core::unroll::{
    bptt_backward, gradcheck, unrolled_forward, BackwardOptions, EmphasisPlacement, GradCheckConfig, LayerSpec,
    Model, NetworkSpec, OptimState,
};
use rethink_core::{DType, Result, Scalar, Shape, Tensor};

/// Directory holding the MNIST-background-image AMAT files.
pub const DATA_DIR_VAR: &str = "MNIST_BG_DIR";
/// Set to `1` to run the full-length schedule instead of the smoke variant.
pub const FULL_RUN_VAR: &str = "RETHINK_FULL_RUN";
pub const TRAIN_FILE: &str = "mnist_background_images_train.amat";
pub const TEST_FILE: &str = "mnist_background_images_test.amat";

#[derive(Clone, Debug)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(f: impl FnOnce() -> Result<(bool, String)>) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Outcome { passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn random_batch(spec: &NetworkSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, Vec<usize>)> {
    let (c, h, w) = spec.input;
    let shape = Shape::new(n, c, h, w)?;
    let x = Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let y = (0..n).map(|_| rng.gen_range(0..spec.classes)).collect();
    Ok((x, y))
}

/// Seeded random draws of the 8×8 network: `T ∈ {1, 2, 3}`, either emphasis
/// placement, random ReLU slopes, weights within ±scale for scale up to 1.5,
/// every entry probed. Returns (passed draws, worst relative error).
pub fn randomized_gradchecks(draws: usize, seed: u64) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut passed, mut worst) = (0, 0.0f64);
    for draw in 0..draws {
        let placement = if rng.gen() { EmphasisPlacement::AfterPool } else { EmphasisPlacement::BeforePool };
        let mut spec = NetworkSpec::tiny(3, 1).baseline();
        for layer in &mut spec.layers {
            if let LayerSpec::Relu { negative_slope } = layer {
                *negative_slope = rng.gen_range(0.0..0.5);
            }
        }
        let spec = spec.with_rethinking(placement, rng.gen_range(1..=3));
        let scale = rng.gen_range(0.2..1.5);
        let mut model = Model::<f64>::new(spec.clone(), draw as u64)?;
        for p in model.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
        }
        let (x, y) = random_batch(&spec, 3, &mut rng)?;
        let cfg = GradCheckConfig { seed: draw as u64, ..Default::default() }.roundoff_aware(&model, &x, &y)?;
        let report = gradcheck(&model, &x, &y, &cfg)?;
        passed += usize::from(report.passed());
        worst = worst.max(report.max_rel_err());
    }
    Ok((passed, worst))
}

/// Gradient exactness on the 8×8 and 4×4 networks for `T ∈ {1, 2, 3}`, a
/// randomized sweep over the 8×8 network, and a control run with a corrupted
/// emphasis gradient that must fail.
const RANDOM_DRAWS: usize = 200;

pub fn gradient_exactness() -> Outcome {
    timed(|| {
        let start = Instant::now();
        let reports = gradcheck_suite(1e-5, false, 0, &mut std::io::sink())?;
        let worst = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
        let all_pass = reports.iter().all(|r| r.passed());
        let mutated = gradcheck_suite(1e-5, true, 0, &mut std::io::sink())?;
        let caught = mutated.iter().any(|r| !r.passed());
        let (random_passed, random_worst) = randomized_gradchecks(RANDOM_DRAWS, 7)?;
        let seconds = start.elapsed().as_secs_f64();
        let ts: Vec<String> = reports.iter().map(|r| r.iterations.to_string()).collect();
        Ok((
            all_pass && random_passed == RANDOM_DRAWS && caught && seconds < 60.0,
            format!(
                "{} networks (T = {}), max rel err {worst:.2e} < 1e-5: {all_pass}; \
                 random draws {random_passed}/{RANDOM_DRAWS} pass (max rel err {random_worst:.2e}); \
                 mutation detected: {caught}; {seconds:.1}s < 60s",
                reports.len(),
                ts.join(",")
            ),
        ))
    })
}

/// T = 1 against the plain baseline (bit-exact), and zero heads at T = 2
/// (identical posteriors), on LeNet in double precision.
pub fn equivalences() -> Outcome {
    timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base_spec = NetworkSpec::lenet(false, 0.0);
        let base = Model::<f64>::new(base_spec.clone(), 3)?;
        let lr1 = base.transplant(base_spec.with_rethinking(EmphasisPlacement::BeforePool, 1), 0)?;
        let (x, y) = random_batch(&base_spec, 6, &mut rng)?;
        let tb = unrolled_forward(&base, &x, &y)?;
        let tl = unrolled_forward(&lr1, &x, &y)?;
        let gb = bptt_backward(&base, &tb, BackwardOptions::default())?;
        let gl = bptt_backward(&lr1, &tl, BackwardOptions::default())?;
        let mut grads_equal = true;
        for (p, g) in base.params().iter().zip(&gb) {
            let i = lr1.params().iter().position(|q| q.name == p.name).expect("shared parameter");
            grads_equal &= gl[i].data() == g.data();
        }
        let loss_equal = tb.losses() == tl.losses();

        let lr2 = base.transplant(base_spec.with_rethinking(EmphasisPlacement::BeforePool, 2), 0)?;
        let t2 = unrolled_forward(&lr2, &x, &y)?;
        let posts = t2.posteriors();
        let same_posteriors = posts[0].data() == posts[1].data() && posts[0].data() == tb.posteriors()[0].data();
        Ok((
            loss_equal && grads_equal && same_posteriors,
            format!(
                "T=1 loss bit-exact: {loss_equal}, gradients bit-exact: {grads_equal}; zero heads T=2 posteriors identical: {same_posteriors}"
            ),
        ))
    })
}

fn random_simplex(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn normalization_draws<T: Scalar>(draws: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_mean, mut min_value) = (0.0f64, f64::INFINITY);
    for _ in 0..draws {
        let c = rng.gen_range(1..=64);
        let k = rng.gen_range(2..=12);
        let scale = rng.gen_range(0.0..10.0);
        let w = Tensor::from_vec(Shape::new(c, k, 1, 1)?, (0..c * k).map(|_| T::lit(rng.gen_range(-scale..=scale))).collect())?;
        let b = Tensor::from_vec(Shape::new(c, 1, 1, 1)?, (0..c).map(|_| T::lit(rng.gen_range(-scale..=scale))).collect())?;
        let p = Tensor::from_vec(Shape::vectors(1, k)?, random_simplex(k, &mut rng).into_iter().map(T::lit).collect())?;
        let (a, _) = feedback_forward(&FeedbackHead { weight: &w, bias: &b }, &p)?;
        let row: Vec<f64> = a.row(0).iter().map(|v| v.as_f64()).collect();
        let mean = row.iter().sum::<f64>() / c as f64;
        worst_mean = worst_mean.max((mean - 1.0).abs());
        min_value = row.iter().fold(min_value, |m, &v| m.min(v));
    }
    Ok((worst_mean, min_value))
}

/// 10,000 random heads and posteriors in each precision.
pub fn normalization_invariant() -> Outcome {
    timed(|| {
        let (dev64, min64) = normalization_draws::<f64>(10_000, 5)?;
        let (dev32, min32) = normalization_draws::<f32>(10_000, 6)?;
        let passed = dev64 < 1e-5 && dev32 < 1e-5 && min64 > 0.0 && min32 > 0.0;
        Ok((
            passed,
            format!(
                "10000 draws each: max |mean-1| double {dev64:.1e}, single {dev32:.1e} (< 1e-5); min entry double {min64:.2e}, single {min32:.2e} (> 0)"
            ),
        ))
    })
}

fn accuracy(report: &EvalReport) -> f64 {
    100.0 - report.error_final
}

/// Trains the 28×28 two-convolution rethinking network (T = 2) from scratch
/// on 64 synthetic samples until train accuracy reaches 99%.
pub fn overfit_sanity() -> Outcome {
    timed(|| {
        let start = Instant::now();
        let data = rethink_core::data::contrast_normalize(&synthetic_confusable(32, 17)?, 1e-8)?;
        let mut model = Model::<f32>::new(NetworkSpec::tiny28(2, 2), 17)?;
        let mut optim = OptimState::new(&model, 0.01, 0.9, 1e-4)?;
        let mut batches = BatchIterator::new(data.len(), 16, 17)?;
        let mut epochs = 0;
        let mut acc = 0.0;
        while epochs < 500 {
            for chunk in batches.next_epoch() {
                let (x, y) = data.batch::<f32>(&chunk)?;
                train_step(&mut model, &mut optim, &x, &y, BackwardOptions::default())?;
            }
            epochs += 1;
            acc = accuracy(&evaluate(&model, &data, &[1], 64)?);
            if acc >= 99.0 {
                break;
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        Ok((
            acc >= 99.0 && seconds < 300.0,
            format!("train accuracy {acc:.2}% after {epochs} epochs (>= 99% within 500); {seconds:.1}s < 300s"),
        ))
    })
}

/// The two LeNet heads, read back from a checkpoint's tensor inventory.
pub fn parameter_accounting() -> Outcome {
    timed(|| {
        let base = Model::<f32>::new(NetworkSpec::lenet(false, 0.0), 1)?;
        let lr = base.transplant(base.spec().with_rethinking(EmphasisPlacement::BeforePool, 2), 1)?;
        let dir = tempfile::tempdir()?;
        let count = |model: &Model<f32>, name: &str| -> Result<Vec<(String, usize)>> {
            let path = dir.path().join(name);
            Checkpoint { model: model.clone(), optim: None, phase: 2, epoch: 0, rng_seed: 0, rng_epoch: 0, config: String::new() }
                .save(&path)?;
            Ok(tensor_inventory(&path)?.into_iter().map(|(n, _, s)| (n, s.len())).collect())
        };
        let before = count(&base, "base.ckpt")?;
        let after = count(&lr, "lr.ckpt")?;
        let added: Vec<&(String, usize)> = after.iter().filter(|t| !before.contains(t)).collect();
        let per_head = |head: &str| added.iter().filter(|(n, _)| n.starts_with(&format!("{head}."))).map(|t| t.1).sum::<usize>();
        let (h1, h2) = (per_head("fb_conv1"), per_head("fb_conv2"));
        let total: usize = added.iter().map(|t| t.1).sum();
        let (e1, e2) = (head_param_count(20, 10), head_param_count(50, 10));
        let passed = h1 == 20 * 11 && h2 == 50 * 11 && e1 == h1 && e2 == h2 && total == h1 + h2 && added.len() == 4;
        Ok((
            passed,
            format!(
                "added tensors {}: fb_conv1 {h1} = 20x(10+1), fb_conv2 {h2} = 50x(10+1), total {total}; shared tensors unchanged: {}",
                added.len(),
                before.iter().all(|t| after.contains(t))
            ),
        ))
    })
}

/// Paths of the real dataset, when present.
pub fn real_data_paths() -> Option<(PathBuf, PathBuf)> {
    let dir = PathBuf::from(env::var_os(DATA_DIR_VAR)?);
    let (train, test) = (dir.join(TRAIN_FILE), dir.join(TEST_FILE));
    (train.is_file() && test.is_file()).then_some((train, test))
}

pub fn full_run_requested() -> bool {
    env::var(FULL_RUN_VAR).is_ok_and(|v| v == "1")
}

/// Results of the LeNet schedule on the real dataset.
#[derive(Clone, Debug)]
pub struct RealRun {
    pub full: bool,
    pub normalize: bool,
    pub summary: TrainSummary,
    pub seconds: f64,
}

impl RealRun {
    pub fn baseline_error(&self) -> f64 {
        self.summary.phase1_test.as_ref().map_or(f64::NAN, |r| r.error_final)
    }

    pub fn baseline_ft_error(&self) -> f64 {
        self.summary.baseline_ft_test.as_ref().map_or(f64::NAN, |r| r.error_final)
    }

    pub fn rethinking_error(&self) -> f64 {
        self.summary.final_test.as_ref().map_or(f64::NAN, |r| r.error_final)
    }
}

/// LeNet for 64 + 16 epochs (or 16 + 4 for the smoke variant) with the
/// further-trained baseline as the comparison arm.
pub fn real_run(train_path: PathBuf, test_path: PathBuf, full: bool, normalize: bool) -> Result<RealRun> {
    let dir = tempfile::tempdir()?;
    let (p1, p2) = if full { (64, 16) } else { (16, 4) };
    let cfg = TrainConfig {
        train: Some(DataSource::Amat(train_path)),
        test: Some(DataSource::Amat(test_path)),
        network: Network::LeNet,
        phase1_epochs: p1,
        phase2_epochs: p2,
        precision: DType::F32,
        normalize,
        baseline_finetune: true,
        eval_every: usize::MAX,
        out_dir: dir.path().to_path_buf(),
        ..Default::default()
    };
    let start = Instant::now();
    let summary = train(&cfg, &mut std::io::sink())?;
    Ok(RealRun { full, normalize, summary, seconds: start.elapsed().as_secs_f64() })
}

pub fn reproduction_verdict(run: &RealRun) -> (bool, String) {
    let (base, ft, lr) = (run.baseline_error(), run.baseline_ft_error(), run.rethinking_error());
    let schedule = if run.full { "64+16" } else { "16+4 smoke" };
    if run.full {
        let passed = base <= 10.0 && ft - lr >= 1.0;
        (passed, format!("{schedule}: baseline {base:.2}% (<= 10%), further-trained baseline {ft:.2}%, rethinking {lr:.2}% (gap {:.2} >= 1.0 pt)", ft - lr))
    } else {
        let passed = lr < ft && run.seconds < 1800.0;
        (
            passed,
            format!(
                "{schedule}: baseline {base:.2}%, further-trained baseline {ft:.2}%, rethinking {lr:.2}% (strictly lower); {:.0}s < 1800s",
                run.seconds
            ),
        )
    }
}

pub fn confidence_verdict(run: &RealRun) -> (bool, String) {
    let c = run.summary.final_train.confidences();
    (c[1] > c[0], format!("training-set mean top-1 posterior t=1 {:.5}, t=2 {:.5}", c[0], c[1]))
}

pub fn loss_verdict(run: &RealRun) -> (bool, String) {
    let l = run.summary.final_train.losses();
    (l[1] <= l[0], format!("training-set mean loss t=1 {:.5}, t=2 {:.5}", l[0], l[1]))
}

/// The two-phase schedule on synthetic data, used to report the direction
/// of the confidence and loss properties when the real data is missing.
pub fn synthetic_two_phase() -> Result<TrainSummary> {
    let dir = tempfile::tempdir()?;
    let cfg = TrainConfig {
        train: Some(DataSource::Synthetic { n_per_class: 256, seed: 3 }),
        test: Some(DataSource::Synthetic { n_per_class: 256, seed: 4 }),
        network: Network::Tiny28,
        batch_size: 32,
        phase1_epochs: 8,
        phase2_epochs: 4,
        precision: DType::F32,
        eval_every: usize::MAX,
        out_dir: dir.path().to_path_buf(),
        ..Default::default()
    };
    train(&cfg, &mut std::io::sink())
}

/// Rethinking gradients checked on a model trained on synthetic data rather
/// than at a random point.
pub fn trained_point_gradcheck(data: &Dataset) -> Result<bool> {
    let mut model = Model::<f64>::new(NetworkSpec::tiny28(2, 2), 2)?;
    let mut optim = OptimState::new(&model, 0.01, 0.9, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in model.params_mut().iter_mut().filter(|p| p.name.starts_with("fb_")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    let idx: Vec<usize> = (0..8).collect();
    let (x, y) = data.batch::<f64>(&idx)?;
    for _ in 0..20 {
        train_step(&mut model, &mut optim, &x, &y, BackwardOptions::default())?;
    }
    let cfg = GradCheckConfig { max_per_tensor: 12, ..Default::default() };
    Ok(gradcheck(&model, &x, &y, &cfg)?.passed())
}
