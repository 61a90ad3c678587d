//! Fault-tolerant data-parallel SGD.
//!
//! A small neural-network engine whose gradients are averaged across simulated
//! compute nodes by an allreduce that survives permanent node failures: the
//! communicator shrinks to the survivors, the lost batch contributions are
//! dropped, and only the failed nodes' data shards are read back.

pub mod audit;
pub mod collective;
pub mod data;
pub mod harness;
pub mod metrics;
pub mod model_spec;
pub mod nn;
pub mod scalar;
pub mod topology;
pub mod trainer;
pub mod transport;
pub mod wire;

pub use scalar::Scalar;

/// Stable identity of a compute node for the whole run.
pub type NodeId = u32;

pub type Tensor = nn::Tensor<f64>;
pub type Network = nn::Network<f64>;
pub type Layer = nn::Layer<f64>;
pub type FlatGradient = nn::FlatGradient<f64>;

pub type Tensor32 = nn::Tensor<f32>;
pub type Network32 = nn::Network<f32>;
pub type FlatGradient32 = nn::FlatGradient<f32>;
