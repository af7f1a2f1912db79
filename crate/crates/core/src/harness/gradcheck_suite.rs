//! Gradient checks over the small reference networks.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Shape, Tensor};
use crate::unroll::{gradcheck, BackwardOptions, GradCheckConfig, GradCheckReport, Model, NetworkSpec};

/// Every layer kind and head on the 8×8 network for `T ∈ {1, 2, 3}`, then
/// the 4×4 two-channel network for `T ∈ {2, 3}`, all with random
/// parameters and inputs in double precision.
pub fn gradcheck_suite(tolerance: f64, mutate: bool, seed: u64, log: &mut dyn Write) -> Result<Vec<GradCheckReport>> {
    let cases = [
        NetworkSpec::tiny(4, 1),
        NetworkSpec::tiny(4, 2),
        NetworkSpec::tiny(4, 3),
        NetworkSpec::micro(3, 2),
        NetworkSpec::micro(3, 3),
    ];
    let cfg = GradCheckConfig {
        tolerance,
        seed,
        backward: BackwardOptions { mutate_emphasis_grad: mutate, ..Default::default() },
        ..Default::default()
    };
    let mut reports = Vec::new();
    for (i, spec) in cases.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let (c, h, w) = spec.input;
        let classes = spec.classes;
        let mut model = Model::<f64>::new(spec, seed)?;
        for p in model.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
        }
        let shape = Shape::new(3, c, h, w)?;
        let x = Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..classes)).collect();
        let report = gradcheck(&model, &x, &labels, &cfg)?;
        writeln!(log, "network {}x{}x{} with {} heads:\n{report}", c, h, w, model.spec().heads.len())?;
        reports.push(report);
    }
    Ok(reports)
}
