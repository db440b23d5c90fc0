//! Differentiable operations, implemented as methods on [`Graph`](crate::Graph).

mod attention;
mod conv;
mod elementwise;
mod linear;
mod norm;
mod reduce;
mod shape;
mod softmax;

pub use attention::attention_probabilities;
pub use norm::RunningStats;
