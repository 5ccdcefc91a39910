//! Minimal layer toolkit: tensors, layers with hand-written backward passes,
//! losses, a gradient checker, SGD with per-group learning rates and the
//! checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use gradcheck::{check_function, gradient_check, relative_error, GradCheckReport};
pub use layers::{Cache, Conv2d, ConvSpec, Layer, Linear, MaxPool2, Relu};
pub use optim::{sgd_step, Gradients, OptimizerConfig, ParamGroup, ParameterStore};
pub use tensor::Tensor;
