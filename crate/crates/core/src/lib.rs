//! Context-sensitive triadic Q/K/V modulation attention (Co⁴) with a
//! parameter-matched Transformer baseline, a small reverse-mode autodiff
//! engine, a MAC complexity meter, and desk-scale experiment harnesses.

pub mod block;
pub mod complexity;
pub mod data;
pub mod error;
pub mod graph;
pub mod modulation;
pub mod params;
pub mod rl;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use block::{Arch, Co4BlockConfig, InputSpec, Model, ModelInput, Mode, TriadicOutput};
pub use graph::{Gradients, Graph, OpCounter, Var};
pub use modulation::{cooperate, sample_field, transfer, FieldGrid, ModulationKind};
pub use params::{Bound, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64<'p> = Graph<'p, f64>;
pub type Model64 = Model<f64>;
