//! Minimal differentiable-compute engine: dense tensors, a reverse-mode tape,
//! the layer set used by the VAE and the denoiser, Adam, and finite-difference
//! gradient checks.

mod conv;
pub mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckEntry, GradcheckReport};
pub use graph::{CustomOp, Graph, Var};
pub use layers::{Layer, LayerKind, LayerSpec, Sequential};
pub use params::{AdamConfig, Param, ParamId, ParamSet};
pub use tensor::{Scalar, Tensor};
