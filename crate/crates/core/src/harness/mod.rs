//! Training, evaluation and inspection commands shared by the binary.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck_suite;
pub mod inspect;
pub mod metrics;
pub mod preview;
pub mod train;

pub use checkpoint::{peek_dtype, tensor_inventory, Checkpoint};
pub use config::{DataSource, Network, TrainConfig};
pub use eval::{evaluate, EvalReport, IterationStats};
pub use gradcheck_suite::gradcheck_suite;
pub use inspect::{inspect_emphasis, Bucket, InspectOptions, InspectSummary};
pub use metrics::{read_metrics, MetricsLog, MetricsRow};
pub use train::{load_source, resume, run_training, train, train_step, TrainSummary};
