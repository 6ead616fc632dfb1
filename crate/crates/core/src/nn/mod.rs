//! Dense numerical core: matrices, small MLPs with analytic gradients,
//! losses, SGD and a Laplace sampler.

mod laplace;
mod loss;
mod matrix;
mod mlp;

pub use laplace::{laplace_draw, laplace_sample};
pub use loss::{bce_loss_and_grad, bce_with_logits, mse_loss_and_grad, sigmoid};
pub use matrix::DenseMatrix;
pub use mlp::{sgd_update, Activation, GradientAt, GradientBundle, Layer, LayerGradient, MlpParams};

pub(crate) use mlp::ensure_finite;
