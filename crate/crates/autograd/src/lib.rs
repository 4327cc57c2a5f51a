//! Reverse-mode automatic differentiation over row-major `f32` matrices.
//!
//! Every value in a [`Graph`] is a 2-D matrix `(rows, cols)`; batched token
//! tensors are flattened to `(batch * tokens, width)` and the few ops that care
//! about the batch structure (attention, pooling, broadcasting) take the group
//! size explicitly. Graphs are built fresh for every forward pass and borrow
//! parameter storage, so inference and frozen weights cost no copies.

mod gemm;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gemm::gemm;
pub use graph::{Gradients, Graph, Var};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{ShapeError, Tensor};
