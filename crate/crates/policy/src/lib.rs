//! Dual-head navigation policy: a causal transformer whose hidden states feed
//! a language head (rationale and action tokens) and a waypoint head, plus
//! supervised and group-relative fine-tuning and closed-loop evaluation.

pub mod checkpoint;
pub mod decode;
pub mod eval;
pub mod example;
pub mod grpo;
pub mod loss;
pub mod model;
pub mod optim;
pub mod sft;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use decode::{generate, DecodeConfig, Generation};
pub use eval::{EvalConfig, EvalSummary, Head};
pub use example::Example;
pub use grpo::RftConfig;
pub use model::{DualHeadModel, ModelConfig, ModelError, SparseFrame, Waypoints};
pub use sft::SftConfig;
pub use tensor::{Group, Tensor};

pub type Model64 = DualHeadModel<f64>;
pub type Model32 = DualHeadModel<f32>;
