//! Dense tensors, a recorded computation graph with reverse-mode gradients,
//! finite-difference checking and the Adam optimizer.
//!
//! Everything is generic over [`Scalar`] so the same graphs train in `f32`
//! and are checked against central differences in `f64`.

mod adam;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{grad_check, Graph, NodeId, L2_EPS};
pub use tensor::Tensor;

use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

/// Floating-point element type.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Precision mode for training and checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}
