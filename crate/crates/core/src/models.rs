//! Reference architectures.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, Dense, Layer, MaxPool2d, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureId {
    EdgeCnn,
    LeNet5,
    MiniVggNet,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 3] = [ArchitectureId::EdgeCnn, ArchitectureId::LeNet5, ArchitectureId::MiniVggNet];

    pub fn slug(self) -> &'static str {
        match self {
            ArchitectureId::EdgeCnn => "edgecnn",
            ArchitectureId::LeNet5 => "lenet5",
            ArchitectureId::MiniVggNet => "minivggnet",
        }
    }

    pub fn default_input_shape(self) -> [usize; 3] {
        match self {
            ArchitectureId::EdgeCnn | ArchitectureId::LeNet5 => [1, 28, 28],
            ArchitectureId::MiniVggNet => [3, 32, 32],
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "edgecnn" => Ok(ArchitectureId::EdgeCnn),
            "lenet5" | "lenet" => Ok(ArchitectureId::LeNet5),
            "minivggnet" | "minivgg" => Ok(ArchitectureId::MiniVggNet),
            _ => Err(Error::config(format!("unknown architecture {s:?}"))),
        }
    }
}

fn conv(name: &str, cin: usize, cout: usize, k: usize, pad: usize) -> Result<Layer> {
    Ok(Layer::conv(name, Conv2d::new(cin, cout, (k, k), 1, pad, Activation::Relu)?))
}

fn pool(name: &str) -> Result<Layer> {
    Ok(Layer::pool(name, MaxPool2d::new(2, 2)?))
}

fn dense(name: &str, inputs: usize, units: usize, act: Activation) -> Result<Layer> {
    Ok(Layer::dense(name, Dense::new(inputs, units, act)?))
}

/// Builds `arch` with He-uniform weights drawn from `seed`.
pub fn build_model(arch: ArchitectureId, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<ModelSpec> {
    if input_shape != arch.default_input_shape() {
        return Err(Error::config(format!(
            "{arch} expects input {:?}, got {input_shape:?}",
            arch.default_input_shape()
        )));
    }
    if num_classes < 2 {
        return Err(Error::config("need at least two classes"));
    }
    let layers = match arch {
        // 3x3 "same" convolutions keep 28x28 maps up to the pool.
        ArchitectureId::EdgeCnn => vec![
            conv("Conv1", 1, 32, 3, 1)?,
            conv("Conv2", 32, 32, 3, 1)?,
            pool("Pool1")?,
            conv("Conv3", 32, 64, 3, 1)?,
            dense("FC1", 64 * 14 * 14, 128, Activation::Relu)?,
            dense("FC2", 128, num_classes, Activation::Softmax)?,
        ],
        // Classic geometry (28x28 padded to 32x32 by the first conv), ReLU activations.
        ArchitectureId::LeNet5 => vec![
            conv("Conv1", 1, 6, 5, 2)?,
            pool("Pool1")?,
            conv("Conv2", 6, 16, 5, 0)?,
            pool("Pool2")?,
            dense("FC1", 16 * 5 * 5, 120, Activation::Relu)?,
            dense("FC2", 120, 84, Activation::Relu)?,
            dense("FC3", 84, num_classes, Activation::Softmax)?,
        ],
        ArchitectureId::MiniVggNet => vec![
            conv("Conv1A", 3, 32, 3, 1)?,
            conv("Conv1B", 32, 32, 3, 1)?,
            pool("Pool1")?,
            conv("Conv2A", 32, 64, 3, 1)?,
            conv("Conv2B", 64, 64, 3, 1)?,
            pool("Pool2")?,
            dense("FC1", 64 * 8 * 8, 512, Activation::Relu)?,
            dense("FC2", 512, num_classes, Activation::Softmax)?,
        ],
    };
    let mut model = ModelSpec::new(input_shape.to_vec(), layers)?;
    model.init_weights(seed);
    Ok(model)
}

/// `<arch>-<dataset>-<seed>.shwt`
pub fn weight_file_name(arch: ArchitectureId, dataset: &str, seed: u64) -> String {
    format!("{}-{}-{seed}.shwt", arch.slug(), dataset.to_ascii_lowercase())
}
