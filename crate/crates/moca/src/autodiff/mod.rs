//! Reverse-mode autodiff: graph values, parameter storage, MLP encoders, and
//! the Adam optimizer.

mod adam;
mod mlp;
mod params;
mod value;

pub use adam::{Adam, AdamConfig};
pub use mlp::{Activation, Mlp, MlpConfig};
pub use params::{Binding, ParameterStore, CHECKPOINT_MAGIC};
pub use value::{gaussian_diag_logpdf, Value};
