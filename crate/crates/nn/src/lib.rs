//! CPU convolutional networks for 28x28 grayscale digits, with hand-written
//! backpropagation to both parameters and input pixels.

pub mod error;
pub mod gemm;
pub mod layers;
pub mod loss;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use layers::ForwardCtx;
pub use loss::{LossConfig, LossKind};
pub use objective::{compute_gradients, GradientBundle, Objective};
pub use model::{Arch, HeadKind, Model, ModelSpec, Output, Trace, IMAGE_PIXELS, IMAGE_SIDE};
pub use optim::{Sgd, SgdConfig};
pub use params::{EntryKind, Grads, ParamStore};
pub use tensor::Tensor;
