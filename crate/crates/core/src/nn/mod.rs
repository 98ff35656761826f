//! Dense CNN layers, forward/backward passes and SGD training.

pub(crate) mod gemm;
pub mod layer;
pub mod model;
pub mod ops;
pub mod train;
pub mod weights;

pub use layer::{Activation, Conv2d, Dense, Layer, LayerKind, MaxPool2d};
pub use model::ModelSpec;
pub use train::{
    backward_and_step, batch_loss, loss_and_gradients, train_model, Gradients, Loss, Samples, Target, TrainConfig,
    TrainReport,
};
pub use weights::{load_weights, read_weights_file, save_weights, write_weights_file};
