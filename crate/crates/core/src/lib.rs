//! Compact Bayesian segmentation network: tensor kernels with reverse-mode
//! differentiation, the U-shaped dense/ASPP architecture, Monte Carlo dropout
//! inference, analytic cost accounting, and a training loop.

pub mod arch;
pub mod autodiff;
pub mod bayes;
pub mod cost;
pub mod data;
pub mod error;
pub mod mask;
pub mod ops;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use mask::Mask;
pub use tensor::{ConvSpec, Tensor};
