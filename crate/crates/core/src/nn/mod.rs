//! Minimal CPU tensor layers for the score network.

pub mod attention;
pub mod float;
pub mod layers;
pub mod tensor;

pub use attention::SelfAttention;
pub use float::{Float, Op};
pub use layers::{Conv2d, GroupNorm, Linear, Mlp};
pub use tensor::{Mat, Param, Tensor, VisitParams};
