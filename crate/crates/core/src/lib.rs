pub mod data;
pub mod distill;
pub mod experiment;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use data::{ConfigError, DataError, ExperimentConfig};
pub use distill::{DistillBatchLoss, DistillError, DistillPlan};
pub use experiment::{Bundle, Error};
pub use heads::{HeadError, SvEmbedding, Task, TaskHead};
pub use metrics::{MetricReport, TrialSet};
pub use model::{EncoderModel, ModelConfig, ModelError};
pub use params::{BoundParams, ParamStore};
pub use tensor::{Graph, Precision, Tensor, TensorError, Var};
pub use trainer::{AdamConfig, AdamState, TrainError, TrainSchedule};
