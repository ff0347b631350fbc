pub mod dataset;
pub mod error;
pub mod eval;
pub mod field;
pub mod nn;
pub mod pde;
pub mod sampler;
pub mod score_net;
pub mod sde;
pub mod seed;
pub mod trainer;
