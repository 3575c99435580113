//! Small convolutional classifiers trained with a class-purity objective:
//! a per-layer routing loss that pushes each response map toward firing for
//! few classes, and a balancing cost that stops whole classes going silent.
//!
//! Everything is `f64`, single-threaded per call, and deterministic given a
//! seed. Class labels are 0-based throughout.

pub mod data;
mod fsutil;
pub mod losses;
pub mod network;
pub mod ops;
pub mod probes;
pub mod table;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use fsutil::write_atomic;
pub use losses::{
    balancing_cost, balancing_cost_gradient, build_class_activation_matrix, node_activations, routing_loss,
    routing_loss_gradient, total_cost, ClassActivationMatrix, LossBreakdown, LossError, LossWeights,
};
pub use network::{forward, init_parameters, ForwardTrace, LayerSpec, NetworkTopology, ParameterSet};
pub use tape::{GradientTape, Gradients, TapeError, Var};
pub use tensor::{Tensor, TensorError};
