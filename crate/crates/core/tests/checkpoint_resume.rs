use rethink_core::data::synthetic_confusable;
use rethink_core::harness::{train_step, Checkpoint};
use rethink_core::unroll::{BackwardOptions, Model, NetworkSpec, OptimState};
use rethink_core::Scalar;

/// A few steps into training so that momentum buffers are non-zero, then
/// one more step with and without a save/load in between.
fn step_after_round_trip<T: Scalar>() {
    let data = synthetic_confusable(6, 3).unwrap();
    let idx: Vec<usize> = (0..12).collect();
    let (x, y) = data.batch::<T>(&idx).unwrap();
    let mut model = Model::<T>::new(NetworkSpec::tiny28(2, 2), 5).unwrap();
    let mut optim = OptimState::new(&model, 0.01, 0.9, 1e-4).unwrap();
    for _ in 0..3 {
        train_step(&mut model, &mut optim, &x, &y, BackwardOptions::default()).unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    Checkpoint { model: model.clone(), optim: Some(optim.clone()), phase: 2, epoch: 3, rng_seed: 1, rng_epoch: 3, config: String::new() }
        .save(&path)
        .unwrap();
    let restored = Checkpoint::<T>::load(&path).unwrap();
    let (mut m2, mut o2) = (restored.model, restored.optim.unwrap());

    train_step(&mut model, &mut optim, &x, &y, BackwardOptions::default()).unwrap();
    train_step(&mut m2, &mut o2, &x, &y, BackwardOptions::default()).unwrap();
    assert_eq!(m2, model);
    assert_eq!(o2, optim);
}

#[test]
fn round_trip_then_step_is_bit_exact_in_double() {
    step_after_round_trip::<f64>();
}

#[test]
fn round_trip_then_step_is_bit_exact_in_single() {
    step_after_round_trip::<f32>();
}
