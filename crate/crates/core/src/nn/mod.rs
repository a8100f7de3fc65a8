//! Minimal CNN kernels in double precision: convolution, batch norm,
//! leaky-relu, max pooling and dense layers, each with an exact backward
//! pass, plus the Adadelta optimizer and the checkpoint container.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use layers::{dense_forward, leaky_relu, BatchNorm2d, BatchNormState, Conv2d, Dense, LeakyRelu, MaxPool2, Mode};
pub use optim::{Adadelta, Param};
pub use tensor::Tensor4;
