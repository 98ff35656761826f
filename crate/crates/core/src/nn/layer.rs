use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Softmax,
}

impl Activation {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Softmax => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Softmax),
            _ => None,
        }
    }
}

/// 2-D cross-correlation over a `[C_in, H, W]` input.
///
/// `weights` is `[out_channels, in_channels, kernel_h, kernel_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Tensor,
    pub biases: Tensor,
    pub activation: Activation,
}

impl Conv2d {
    /// Zero-initialized convolution; use `ModelSpec::init_weights` for training.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        activation: Activation,
    ) -> Result<Self> {
        let (kernel_h, kernel_w) = kernel;
        if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::config("conv dimensions must be positive"));
        }
        if stride == 0 {
            return Err(Error::config("conv stride must be >= 1"));
        }
        if activation == Activation::Softmax {
            return Err(Error::config("softmax is only supported on dense layers"));
        }
        Ok(Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weights: Tensor::zeros(&[out_channels, in_channels, kernel_h, kernel_w]),
            biases: Tensor::zeros(&[out_channels]),
            activation,
        })
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 3 || input[0] != self.in_channels {
            return Err(Error::shape(format!("conv expects [{}, H, W], got {input:?}", self.in_channels)));
        }
        let h = input[1] + 2 * self.padding;
        let w = input[2] + 2 * self.padding;
        if h < self.kernel_h || w < self.kernel_w {
            return Err(Error::shape(format!(
                "input {input:?} with padding {} is smaller than kernel {}x{}",
                self.padding, self.kernel_h, self.kernel_w
            )));
        }
        Ok(vec![self.out_channels, (h - self.kernel_h) / self.stride + 1, (w - self.kernel_w) / self.stride + 1])
    }

    /// Copies the first `p` filters (weights and biases) into a new layer.
    pub fn filter_prefix(&self, p: usize) -> Result<Conv2d> {
        if p == 0 || p > self.out_channels {
            return Err(Error::config(format!("filter count {p} outside 1..={}", self.out_channels)));
        }
        Ok(Conv2d {
            out_channels: p,
            weights: self.weights.channel_slice(0, p)?,
            biases: self.biases.channel_slice(0, p)?,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::config("pool size and stride must be >= 1"));
        }
        Ok(MaxPool2d { size, stride })
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 3 {
            return Err(Error::shape(format!("pool expects [C, H, W], got {input:?}")));
        }
        if input[1] < self.size || input[2] < self.size {
            return Err(Error::shape(format!("input {input:?} smaller than pool size {}", self.size)));
        }
        Ok(vec![input[0], (input[1] - self.size) / self.stride + 1, (input[2] - self.size) / self.stride + 1])
    }
}

/// Fully connected layer. Inputs of any rank are read in row-major order, so
/// a `[C, H, W]` map feeds a dense layer without an explicit flatten.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub units: usize,
    pub weights: Tensor,
    pub biases: Tensor,
    pub activation: Activation,
}

impl Dense {
    pub fn new(in_features: usize, units: usize, activation: Activation) -> Result<Self> {
        if in_features == 0 || units == 0 {
            return Err(Error::config("dense dimensions must be positive"));
        }
        Ok(Dense {
            in_features,
            units,
            weights: Tensor::zeros(&[units, in_features]),
            biases: Tensor::zeros(&[units]),
            activation,
        })
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let n: usize = input.iter().product();
        if n != self.in_features {
            return Err(Error::shape(format!("dense expects {} features, got {input:?}", self.in_features)));
        }
        Ok(vec![self.units])
    }

    pub fn unit_prefix(&self, p: usize) -> Result<Dense> {
        if p == 0 || p > self.units {
            return Err(Error::config(format!("unit count {p} outside 1..={}", self.units)));
        }
        Ok(Dense {
            units: p,
            weights: self.weights.channel_slice(0, p)?,
            biases: self.biases.channel_slice(0, p)?,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv2d(Conv2d),
    MaxPool2d(MaxPool2d),
    Dense(Dense),
    Flatten,
}

impl LayerKind {
    pub(crate) fn tag(&self) -> u8 {
        match self {
            LayerKind::Conv2d(_) => 1,
            LayerKind::MaxPool2d(_) => 2,
            LayerKind::Dense(_) => 3,
            LayerKind::Flatten => 4,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::MaxPool2d(_) => "maxpool2d",
            LayerKind::Dense(_) => "dense",
            LayerKind::Flatten => "flatten",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Layer { name: name.into(), kind }
    }

    pub fn conv(name: &str, conv: Conv2d) -> Self {
        Self::new(name, LayerKind::Conv2d(conv))
    }

    pub fn pool(name: &str, pool: MaxPool2d) -> Self {
        Self::new(name, LayerKind::MaxPool2d(pool))
    }

    pub fn dense(name: &str, dense: Dense) -> Self {
        Self::new(name, LayerKind::Dense(dense))
    }

    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        match &self.kind {
            LayerKind::Conv2d(c) => c.output_dims(input),
            LayerKind::MaxPool2d(p) => p.output_dims(input),
            LayerKind::Dense(d) => d.output_dims(input),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let out = match &self.kind {
            LayerKind::Conv2d(c) => ops::conv2d_forward(input, c),
            LayerKind::MaxPool2d(p) => ops::maxpool_forward(input, p).map(|(t, _)| t),
            LayerKind::Dense(d) => ops::dense_forward(input, d),
            LayerKind::Flatten => {
                let n = input.len();
                input.clone().reshape(vec![n])
            }
        };
        out.map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("{}: {m}", self.name)),
            other => other,
        })
    }

    pub fn activation(&self) -> Activation {
        match &self.kind {
            LayerKind::Conv2d(c) => c.activation,
            LayerKind::Dense(d) => d.activation,
            _ => Activation::None,
        }
    }

    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match &self.kind {
            LayerKind::Conv2d(c) => Some((&c.weights, &c.biases)),
            LayerKind::Dense(d) => Some((&d.weights, &d.biases)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match &mut self.kind {
            LayerKind::Conv2d(c) => Some((&mut c.weights, &mut c.biases)),
            LayerKind::Dense(d) => Some((&mut d.weights, &mut d.biases)),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().map_or(0, |(w, b)| w.len() + b.len())
    }

    /// Multiply-accumulate count of one forward pass on `input` dims.
    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_dims(input)?;
        Ok(match &self.kind {
            LayerKind::Conv2d(c) => (out.iter().product::<usize>() * c.in_channels * c.kernel_h * c.kernel_w) as u64,
            LayerKind::MaxPool2d(p) => (out.iter().product::<usize>() * p.size * p.size) as u64,
            LayerKind::Dense(d) => (d.units * d.in_features) as u64,
            LayerKind::Flatten => 0,
        })
    }
}
