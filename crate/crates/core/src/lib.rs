//! Face forgery fidelity scoring: a hybrid convolution/attention backbone
//! whose shallow blocks mix each feature map with its horizontal mirror,
//! quality-graded regression targets, and an RBF support-vector regressor
//! on top of the learned embeddings.

pub mod error;
pub mod fidelity;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod svr;
pub mod tensor;

pub use error::{Error, Result};
