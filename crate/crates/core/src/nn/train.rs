//! Backpropagation and mini-batch SGD.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layer::{Activation, LayerKind};
use crate::nn::model::ModelSpec;
use crate::nn::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    SoftmaxCrossEntropy,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Loss,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Label(usize),
    Values(&'a Tensor),
}

/// Indexed training samples.
pub trait Samples: Sync {
    fn len(&self) -> usize;
    fn input(&self, i: usize) -> Cow<'_, Tensor>;
    fn target(&self, i: usize) -> Target<'_>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-layer parameter gradients; `None` for parameter-free layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelSpec) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| l.params().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()])))
                .collect(),
        }
    }

    fn scale(&mut self, k: f64) {
        for (w, b) in self.layers.iter_mut().flatten() {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= k);
        }
    }
}

/// Gradient of one sample's loss with respect to the final pre-activation
/// output, plus the loss value.
fn output_gradient(
    model: &ModelSpec,
    output: &Tensor,
    logits: Option<&[f64]>,
    target: Target<'_>,
    loss: Loss,
) -> Result<(f64, Vec<f64>)> {
    let (value, grad) = match (loss, target) {
        (Loss::SoftmaxCrossEntropy, Target::Label(label)) => {
            let z =
                logits.ok_or_else(|| Error::config("softmax cross-entropy needs a final dense layer with softmax"))?;
            if label >= z.len() {
                return Err(Error::config(format!("label {label} >= class count {}", z.len())));
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut g = output.data().to_vec();
            g[label] -= 1.0;
            (lse - z[label], g)
        }
        (Loss::Mse, Target::Values(t)) => {
            if t.len() != output.len() {
                return Err(Error::shape(format!("target {:?} does not match output {:?}", t.dims(), output.dims())));
            }
            let k = output.len() as f64;
            let mut sum = 0.0;
            let mut g = Vec::with_capacity(output.len());
            for (&y, &t) in output.data().iter().zip(t.data()) {
                let d = y - t;
                sum += d * d;
                g.push(2.0 * d / k);
            }
            let last = model.layers.last().expect("non-empty model");
            activation_backward(last.activation(), output.data(), &mut g);
            (sum / k, g)
        }
        _ => return Err(Error::config("target kind does not match loss")),
    };
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    Ok((value, grad))
}

/// Forward + backward over a batch, layer by layer; gradients are summed into
/// `grads` in sample order. Returns the summed loss.
fn accumulate_batch(
    model: &ModelSpec,
    batch: &[(&Tensor, Target<'_>)],
    loss: Loss,
    grads: &mut Gradients,
) -> Result<f64> {
    let last = model.layers.len() - 1;
    let n = batch.len();
    for (x, _) in batch {
        if x.dims() != model.input_shape.as_slice() {
            return Err(Error::shape(format!("model expects input {:?}, got {:?}", model.input_shape, x.dims())));
        }
    }
    // outputs[i][s]: output of layer i for sample s.
    let mut outputs: Vec<Vec<Tensor>> = Vec::with_capacity(model.layers.len());
    let mut argmax: Vec<Vec<Vec<usize>>> = Vec::with_capacity(model.layers.len());
    let mut logits: Option<Vec<Vec<f64>>> = None;
    for (i, layer) in model.layers.iter().enumerate() {
        let inputs: Vec<&Tensor> = match outputs.last() {
            Some(prev) => prev.iter().collect(),
            None => batch.iter().map(|(x, _)| *x).collect(),
        };
        let mut outs = Vec::with_capacity(n);
        let mut args = Vec::new();
        match &layer.kind {
            LayerKind::MaxPool2d(p) => {
                for x in inputs {
                    let (o, a) = ops::maxpool_forward(x, p)?;
                    outs.push(o);
                    args.push(a);
                }
            }
            LayerKind::Dense(d) => {
                let z = ops::dense_logits_batch(&inputs, d)?;
                if i == last && d.activation == Activation::Softmax {
                    logits = Some(z.clone());
                }
                for mut v in z {
                    ops::apply_activation(d.activation, &mut v);
                    outs.push(Tensor::from_parts(vec![d.units], v));
                }
            }
            _ => {
                for x in inputs {
                    outs.push(layer.forward(x)?);
                }
            }
        }
        outputs.push(outs);
        argmax.push(args);
    }

    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (s, (_, target)) in batch.iter().enumerate() {
        let z = logits.as_ref().map(|l| l[s].as_slice());
        let (value, g) = output_gradient(model, &outputs[last][s], z, *target, loss)?;
        total += value;
        grad.push(g);
    }

    for i in (0..=last).rev() {
        if i != last {
            for (g, out) in grad.iter_mut().zip(&outputs[i]) {
                activation_backward(model.layers[i].activation(), out.data(), g);
            }
        }
        let inputs: Vec<&Tensor> =
            if i == 0 { batch.iter().map(|(x, _)| *x).collect() } else { outputs[i - 1].iter().collect() };
        let want_input = i > 0;
        let next = match &model.layers[i].kind {
            LayerKind::Conv2d(c) => {
                let (gw, gb) = grads.layers[i].as_mut().expect("conv grads");
                let mut next = Vec::with_capacity(n);
                for (x, g) in inputs.iter().zip(&grad) {
                    if let Some(gi) = ops::conv2d_backward(x, c, g, gw, gb, want_input) {
                        next.push(gi);
                    }
                }
                next
            }
            LayerKind::Dense(d) => {
                let (gw, gb) = grads.layers[i].as_mut().expect("dense grads");
                ops::dense_backward_batch(&inputs, d, &grad, gw, gb, want_input)
            }
            LayerKind::MaxPool2d(_) => inputs
                .iter()
                .zip(&argmax[i])
                .zip(&grad)
                .map(|((x, arg), g)| ops::maxpool_backward(x.len(), arg, g))
                .collect(),
            LayerKind::Flatten => grad,
        };
        if !want_input {
            break;
        }
        grad = next;
    }
    Ok(total)
}

/// Converts a gradient with respect to post-activation values into one with
/// respect to pre-activation values.
fn activation_backward(act: Activation, out: &[f64], grad: &mut [f64]) {
    match act {
        Activation::None => {}
        Activation::Relu => {
            for (g, &y) in grad.iter_mut().zip(out) {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::Softmax => {
            let s: f64 = grad.iter().zip(out).map(|(g, y)| g * y).sum();
            for (g, &y) in grad.iter_mut().zip(out) {
                *g = y * (*g - s);
            }
        }
    }
}

/// Mean loss and mean gradients over a batch, without touching the model.
pub fn loss_and_gradients(model: &ModelSpec, batch: &[(&Tensor, Target<'_>)], loss: Loss) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let mut grads = Gradients::zeros_like(model);
    let total = accumulate_batch(model, batch, loss, &mut grads)?;
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Mean loss over a batch (forward only).
pub fn batch_loss(model: &ModelSpec, batch: &[(&Tensor, Target<'_>)], loss: Loss) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in batch {
        let out = model.forward(x)?;
        total += match (loss, t) {
            (Loss::SoftmaxCrossEntropy, Target::Label(l)) => -out.data()[*l].ln(),
            (Loss::Mse, Target::Values(v)) => {
                out.data().iter().zip(v.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / out.len() as f64
            }
            _ => return Err(Error::config("target kind does not match loss")),
        };
    }
    Ok(total / batch.len() as f64)
}

/// One SGD step on `batch`; returns the mean batch loss.
pub fn backward_and_step(model: &mut ModelSpec, batch: &[(&Tensor, Target<'_>)], cfg: &TrainConfig) -> Result<f64> {
    let (value, grads) = loss_and_gradients(model, batch, cfg.loss)?;
    apply_step(model, &grads, cfg.learning_rate);
    Ok(value)
}

fn apply_step(model: &mut ModelSpec, grads: &Gradients, lr: f64) {
    for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
        if let (Some((w, b)), Some((gw, gb))) = (layer.params_mut(), g) {
            for (p, d) in w.data_mut().iter_mut().zip(gw) {
                *p -= lr * d;
            }
            for (p, d) in b.data_mut().iter_mut().zip(gb) {
                *p -= lr * d;
            }
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
}

/// Shuffled mini-batch SGD. Epoch `e` shuffles with a generator seeded from
/// `cfg.seed` and `e`, so a run is reproducible bit for bit.
pub fn train_model<S: Samples + ?Sized>(
    model: &mut ModelSpec,
    train: &S,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let started = std::time::Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<Cow<'_, Tensor>> = chunk.iter().map(|&i| train.input(i)).collect();
            let batch: Vec<(&Tensor, Target<'_>)> =
                chunk.iter().zip(&inputs).map(|(&i, x)| (x.as_ref(), train.target(i))).collect();
            total +=
                backward_and_step(model, &batch, cfg).map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        on_epoch(epoch, mean);
        report.epoch_losses.push(mean);
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{Conv2d, Dense, Layer, MaxPool2d};
    use rand::Rng;

    fn dense_model(inputs: usize, units: usize, act: Activation) -> ModelSpec {
        ModelSpec::new(vec![inputs], vec![Layer::dense("fc", Dense::new(inputs, units, act).unwrap())]).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut m = dense_model(3, 2, Activation::Softmax);
        m.init_weights(1);
        let before = m.clone();
        let x = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let (_, g) = loss_and_gradients(&m, &[(&x, Target::Label(1))], Loss::SoftmaxCrossEntropy).unwrap();
        apply_step(&mut m, &g, 0.0);
        for (a, b) in m.layers.iter().zip(&before.layers) {
            let (wa, ba) = a.params().unwrap();
            let (wb, bb) = b.params().unwrap();
            assert!(wa.bit_eq(wb) && ba.bit_eq(bb));
        }
    }

    #[test]
    fn rejects_zero_learning_rate_config() {
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, batch_size: 1, seed: 0, loss: Loss::Mse };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mse_one_dimensional_closed_form() {
        let mut m = dense_model(1, 1, Activation::None);
        let (w, x, y) = (0.7, 1.3, -0.4);
        m.layers[0].params_mut().unwrap().0.data_mut()[0] = w;
        let input = Tensor::new(vec![1], vec![x]).unwrap();
        let target = Tensor::new(vec![1], vec![y]).unwrap();
        let (value, g) = loss_and_gradients(&m, &[(&input, Target::Values(&target))], Loss::Mse).unwrap();
        let (gw, gb) = g.layers[0].as_ref().unwrap();
        assert!((value - (w * x - y).powi(2)).abs() < 1e-15);
        assert!((gw[0] - 2.0 * (w * x - y) * x).abs() < 1e-15);
        assert!((gb[0] - 2.0 * (w * x - y)).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        let m = dense_model(2, 3, Activation::Softmax);
        let x = Tensor::zeros(&[2]);
        assert!(loss_and_gradients(&m, &[(&x, Target::Label(3))], Loss::SoftmaxCrossEntropy).is_err());
    }

    #[test]
    fn cross_entropy_requires_softmax_head() {
        let m = dense_model(2, 3, Activation::None);
        let x = Tensor::zeros(&[2]);
        assert!(matches!(
            loss_and_gradients(&m, &[(&x, Target::Label(0))], Loss::SoftmaxCrossEntropy),
            Err(Error::Config(_))
        ));
    }

    struct Toy {
        xs: Vec<Tensor>,
        ys: Vec<usize>,
    }

    impl Samples for Toy {
        fn len(&self) -> usize {
            self.xs.len()
        }
        fn input(&self, i: usize) -> Cow<'_, Tensor> {
            Cow::Borrowed(&self.xs[i])
        }
        fn target(&self, i: usize) -> Target<'_> {
            Target::Label(self.ys[i])
        }
    }

    fn separable(n: usize, seed: u64) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        while xs.len() < n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            // keep a margin around the separating line a + b = 0
            if (a + b).abs() < 0.1 {
                continue;
            }
            xs.push(Tensor::new(vec![2], vec![a, b]).unwrap());
            ys.push(usize::from(a + b > 0.0));
        }
        Toy { xs, ys }
    }

    #[test]
    fn learns_linearly_separable_toy_set() {
        let data = separable(200, 21);
        let mut m = ModelSpec::new(
            vec![2],
            vec![
                Layer::dense("h", Dense::new(2, 8, Activation::Relu).unwrap()),
                Layer::dense("out", Dense::new(8, 2, Activation::Softmax).unwrap()),
            ],
        )
        .unwrap();
        m.init_weights(5);
        let cfg =
            TrainConfig { learning_rate: 0.1, epochs: 50, batch_size: 8, seed: 9, loss: Loss::SoftmaxCrossEntropy };
        train_model(&mut m, &data, &cfg, |_, _| {}).unwrap();
        let correct = data.xs.iter().zip(&data.ys).filter(|(x, &y)| m.predict(x).unwrap() == y).count();
        assert!(correct as f64 / data.len() as f64 >= 0.99, "{correct}/200");
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let data = separable(10, 1);
        let mut m = dense_model(2, 2, Activation::Softmax);
        m.init_weights(3);
        let before = m.clone();
        let cfg =
            TrainConfig { learning_rate: 0.5, epochs: 0, batch_size: 4, seed: 0, loss: Loss::SoftmaxCrossEntropy };
        train_model(&mut m, &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable(40, 2);
        let build = || {
            let mut m = ModelSpec::new(
                vec![1, 2, 1],
                vec![
                    Layer::conv("c", Conv2d::new(1, 2, (1, 1), 1, 0, Activation::Relu).unwrap()),
                    Layer::pool("p", MaxPool2d::new(1, 1).unwrap()),
                    Layer::dense("fc", Dense::new(4, 2, Activation::Softmax).unwrap()),
                ],
            )
            .unwrap();
            m.init_weights(8);
            m
        };
        let reshaped = Toy {
            xs: data.xs.iter().map(|x| x.clone().reshape(vec![1, 2, 1]).unwrap()).collect(),
            ys: data.ys.clone(),
        };
        let cfg =
            TrainConfig { learning_rate: 0.05, epochs: 3, batch_size: 5, seed: 77, loss: Loss::SoftmaxCrossEntropy };
        let mut a = build();
        let mut b = build();
        train_model(&mut a, &reshaped, &cfg, |_, _| {}).unwrap();
        train_model(&mut b, &reshaped, &cfg, |_, _| {}).unwrap();
        assert_eq!(a, b);
    }
}
