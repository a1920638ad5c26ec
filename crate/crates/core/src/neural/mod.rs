//! A small batch-first neural network kernel: layers with hand-written
//! backward passes, a branched network graph, the cosine loss, Adam and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod layer;
mod loss;
mod network;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{
    analytic_gradients, compare_with_finite_differences, gradient_check, relative_error, GradCheckOptions, Gradients,
};
pub use layer::{layer_backward, layer_forward, LayerCache, LayerParams, LayerSpec, Mode, Padding, Pool, Shape, L2_EPS};
pub use loss::{batch_cosine_loss, cosine_loss};
pub use network::{net_backward, net_forward, Branch, NetOutput, NetworkSpec, ParamGrads, ParamSet};
