//! Dense linear algebra, the small MLP with manual reverse-mode
//! differentiation, and the Adam optimizer.

mod adam;
mod matrix;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use matrix::Matrix;
pub use mlp::{ForwardCache, Gradients, MlpNet};
