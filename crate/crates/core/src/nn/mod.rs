//! Dense tensors, the five layer kinds, and reverse-mode gradients for
//! sequential classifiers.

pub mod loss;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod spec;

pub use loss::{accuracy, cross_entropy, cross_entropy_grad, softmax};
pub use network::{backward, eval_network, LabeledBatch, Net};
pub use optim::Sgd;
pub use params::{LayerParams, Parameters, Params};
pub use spec::{Layer, NetworkSpec};
