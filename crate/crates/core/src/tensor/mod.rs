//! Dense tensors, reverse-mode autodiff, random streams, AdamW, and
//! checkpoint I/O.

pub mod checkpoint;
mod element;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;
mod value;

pub use element::{cast, DType, Element};
pub use graph::{Gradients, Graph, RowMix, Var, LAYER_NORM_EPS};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use rng::{gumbel_from_uniform, gumbel_sample, normal_tensor, RngStream, GUMBEL_UNIFORM_CLAMP};
pub use value::Tensor;
