//! Small reverse-mode autodiff engine used to train the codec, the score
//! network and the spectral discriminators.

pub mod check;
pub mod graph;
pub mod optim;
pub mod params;

pub use graph::{reduce_to_shape, Conv2dSpec, Gradients, Graph, NodeId, Tensor, SVD_MAX_ITER};
pub use optim::Adam;
pub use params::{he_normal, Bound, ParamStore};
