use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layer::{Layer, LayerKind};
use crate::tensor::Tensor;

/// An ordered stack of named layers plus the input shape it accepts.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    /// Builds a model and checks that names are unique and shapes compose.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let model = ModelSpec { input_shape, layers };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        let mut seen = HashSet::new();
        for layer in &self.layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::config(format!("duplicate layer name {:?}", layer.name)));
            }
            if let Some((w, b)) = layer.params() {
                let ok = match &layer.kind {
                    LayerKind::Conv2d(c) => {
                        w.dims() == [c.out_channels, c.in_channels, c.kernel_h, c.kernel_w]
                            && b.dims() == [c.out_channels]
                    }
                    LayerKind::Dense(d) => w.dims() == [d.units, d.in_features] && b.dims() == [d.units],
                    _ => true,
                };
                if !ok {
                    return Err(Error::shape(format!(
                        "{}: parameter shapes {:?}/{:?} disagree with layer dimensions",
                        layer.name,
                        w.dims(),
                        b.dims()
                    )));
                }
            }
        }
        self.layer_shapes().map(|_| ())
    }

    /// Output dims of every layer, in order.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut dims = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            dims = layer.output_dims(&dims).map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("{}: {m}", layer.name)),
                other => other,
            })?;
            shapes.push(dims.clone());
        }
        Ok(shapes)
    }

    /// Input dims of layer `index`.
    pub fn input_dims_of(&self, index: usize) -> Result<Vec<usize>> {
        if index == 0 {
            return Ok(self.input_shape.clone());
        }
        Ok(self.layer_shapes()?.swap_remove(index - 1))
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn num_outputs(&self) -> Result<usize> {
        Ok(self.layer_shapes()?.last().map_or(0, |d| d.iter().product()))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// He-uniform weights, zero biases. Layers draw from one seeded stream in
    /// order, so the same seed always reproduces the same model.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let fan_in = match &layer.kind {
                LayerKind::Conv2d(c) => c.in_channels * c.kernel_h * c.kernel_w,
                LayerKind::Dense(d) => d.in_features,
                _ => continue,
            };
            let limit = (6.0 / fan_in as f64).sqrt();
            let (w, b) = layer.params_mut().expect("parameterized layer");
            for v in w.data_mut() {
                *v = rng.random_range(-limit..limit);
            }
            b.data_mut().fill(0.0);
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.dims() != self.input_shape.as_slice() {
            return Err(Error::shape(format!("model expects input {:?}, got {:?}", self.input_shape, input.dims())));
        }
        Ok(())
    }

    /// Every intermediate feature map in layer order; the last one is the
    /// model output.
    pub fn forward_all(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        if self.layers.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        self.check_input(input)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = layer.forward(outputs.last().unwrap_or(input))?;
            outputs.push(next);
        }
        Ok(outputs)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        self.forward_range(input, 0..self.layers.len())
    }

    /// Runs layers `range` on a feature map that is the input of
    /// `range.start`.
    pub fn forward_range(&self, input: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
        if range.is_empty() || range.end > self.layers.len() {
            return Err(Error::config(format!("bad layer range {range:?}")));
        }
        let mut x = self.layers[range.start].forward(input)?;
        for layer in &self.layers[range.start + 1..range.end] {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(self.forward(input)?.argmax())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{Activation, Conv2d, Dense, MaxPool2d};

    fn tiny() -> ModelSpec {
        ModelSpec::new(
            vec![1, 6, 6],
            vec![
                Layer::conv("c1", Conv2d::new(1, 2, (3, 3), 1, 1, Activation::Relu).unwrap()),
                Layer::pool("p1", MaxPool2d::new(2, 2).unwrap()),
                Layer::dense("fc", Dense::new(18, 3, Activation::Softmax).unwrap()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn rejects_empty_and_duplicate_names() {
        assert!(ModelSpec::new(vec![1, 2, 2], vec![]).is_err());
        let pool = MaxPool2d::new(1, 1).unwrap();
        let err = ModelSpec::new(vec![1, 2, 2], vec![Layer::pool("a", pool.clone()), Layer::pool("a", pool)]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn rejects_non_composing_shapes() {
        let res = ModelSpec::new(
            vec![1, 6, 6],
            vec![
                Layer::conv("c1", Conv2d::new(1, 2, (3, 3), 1, 0, Activation::Relu).unwrap()),
                Layer::dense("fc", Dense::new(72, 3, Activation::None).unwrap()),
            ],
        );
        assert!(matches!(res, Err(Error::Shape(_))));
    }

    #[test]
    fn forward_all_matches_manual_composition() {
        let mut m = tiny();
        m.init_weights(4);
        let input = Tensor::new(vec![1, 6, 6], (0..36).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let outs = m.forward_all(&input).unwrap();
        assert_eq!(outs.len(), 3);
        let mut x = input.clone();
        for layer in &m.layers {
            x = layer.forward(&x).unwrap();
        }
        assert!(outs[2].bit_eq(&x));
        assert!(m.forward(&input).unwrap().bit_eq(&x));
        let s: f64 = x.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn same_seed_same_weights() {
        let mut a = tiny();
        let mut b = tiny();
        a.init_weights(11);
        b.init_weights(11);
        assert_eq!(a, b);
        b.init_weights(12);
        assert_ne!(a, b);
    }

    #[test]
    fn wrong_input_shape() {
        let m = tiny();
        assert!(m.forward_all(&Tensor::zeros(&[1, 5, 6])).is_err());
    }
}
