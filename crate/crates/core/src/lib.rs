//! Multi-task learning over tasks with partially overlapping or disjoint
//! label sets, driven by a pretrained auxiliary network.
//!
//! Each task network reuses the auxiliary convolution weights through a
//! non-negative soft mask (`S = Ψ ⊙ W`), and its hidden FC layers are kept
//! close to the auxiliary FC layers by a class-conditional mean discrepancy
//! penalty. Everything runs on a small reverse-mode graph over `f64`.

pub mod alignment;
pub mod checkpoint;
pub mod dataset;
pub mod gradcheck;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use alignment::{class_means, cmmd, cmmd_value, ClassConditionalMeans};
pub use dataset::{LabeledSet, OverlapSpec, SplitOptions, TaskDataset, TaskSplit};
pub use network::{Architecture, AuxModel, TaskNetwork};
pub use tensor::{Graph, NodeId, Tensor, TensorError};
pub use trainer::{EpochMetrics, TrainConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
