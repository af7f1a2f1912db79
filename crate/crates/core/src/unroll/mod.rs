//! The unrolled rethinking network: descriptors, parameters, BPTT,
//! optimizer and gradient checking.

mod bptt;
mod gradcheck;
mod model;
mod optim;
mod spec;

pub use bptt::{
    aggregate, bptt_backward, infer, total_loss, unrolled_forward, Aggregation, BackwardOptions,
    Inference, IterationTrace, PassTrace,
};
pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport, TensorCheck};
pub use model::{param_layout, Model, Param, ParamKind};
pub use optim::{sgd_step, OptimState};
pub use spec::{EmphasisPlacement, HeadSpec, LayerShapes, LayerSpec, NetworkSpec};
