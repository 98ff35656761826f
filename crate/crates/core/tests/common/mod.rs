//! Property checks shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sheath::attack::{apply_noise, noise_mask, NoiseConfig};
use sheath::harness::{layer_inputs, Detector};
use sheath::models::{build_model, ArchitectureId};
use sheath::nn::{
    batch_loss, loss_and_gradients, Activation, Conv2d, Dense, Layer, Loss, MaxPool2d, ModelSpec, Target,
};
use sheath::pipeline::{make_partition, run_pipeline, Grouping, PipelineHooks, Trust};
use sheath::sheath::PseudoSize;
use sheath::Tensor;

pub fn random_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---- gradients ----

const H: f64 = 1e-5;
pub const GRAD_REL: f64 = 1e-3;

/// A small model, its inputs and targets, and the loss to check.
pub struct MicroCase {
    pub name: &'static str,
    pub model: ModelSpec,
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub values: Vec<Tensor>,
    pub loss: Loss,
}

impl MicroCase {
    fn batch(&self) -> Vec<(&Tensor, Target<'_>)> {
        match self.loss {
            Loss::SoftmaxCrossEntropy => {
                self.inputs.iter().zip(&self.labels).map(|(x, &l)| (x, Target::Label(l))).collect()
            }
            Loss::Mse => self.inputs.iter().zip(&self.values).map(|(x, y)| (x, Target::Values(y))).collect(),
        }
    }
}

fn micro(input: Vec<usize>, layers: Vec<Layer>, seed: u64) -> ModelSpec {
    let mut m = ModelSpec::new(input, layers).unwrap();
    m.init_weights(seed);
    m
}

/// Fixed-seed micro-models covering every layer kind and both losses.
pub fn micro_cases() -> Vec<MicroCase> {
    let mut out = Vec::new();
    for seed in [1, 2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        out.push(MicroCase {
            name: "conv-pool-softmax",
            model: micro(
                vec![1, 6, 6],
                vec![
                    Layer::conv("c1", Conv2d::new(1, 2, (3, 3), 1, 1, Activation::Relu).unwrap()),
                    Layer::pool("p1", MaxPool2d::new(2, 2).unwrap()),
                    Layer::dense("d1", Dense::new(2 * 3 * 3, 3, Activation::Softmax).unwrap()),
                ],
                seed,
            ),
            inputs: (0..3).map(|_| random_tensor(&[1, 6, 6], &mut rng)).collect(),
            labels: vec![0, 1, 2],
            values: Vec::new(),
            loss: Loss::SoftmaxCrossEntropy,
        });
    }
    for seed in [4, 5] {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        out.push(MicroCase {
            name: "strided-conv-regressor",
            model: micro(
                vec![2, 7, 7],
                vec![
                    Layer::conv("c1", Conv2d::new(2, 3, (3, 3), 2, 0, Activation::None).unwrap()),
                    Layer::conv("c2", Conv2d::new(3, 2, (2, 2), 1, 1, Activation::Relu).unwrap()),
                    Layer::dense("d1", Dense::new(2 * 4 * 4, 4, Activation::Relu).unwrap()),
                    Layer::dense("d2", Dense::new(4, 2, Activation::None).unwrap()),
                ],
                seed,
            ),
            inputs: (0..2).map(|_| random_tensor(&[2, 7, 7], &mut rng)).collect(),
            labels: Vec::new(),
            values: (0..2).map(|_| random_tensor(&[2], &mut rng)).collect(),
            loss: Loss::Mse,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    out.push(MicroCase {
        name: "conv-map-target",
        model: micro(
            vec![3, 5, 5],
            vec![
                Layer::conv("a", Conv2d::new(3, 4, (3, 3), 1, 1, Activation::Relu).unwrap()),
                Layer::conv("b", Conv2d::new(4, 2, (3, 3), 1, 1, Activation::None).unwrap()),
            ],
            9,
        ),
        inputs: vec![random_tensor(&[3, 5, 5], &mut rng)],
        labels: Vec::new(),
        values: vec![random_tensor(&[2, 5, 5], &mut rng)],
        loss: Loss::Mse,
    });
    out
}

fn bump(model: &mut ModelSpec, layer: usize, which: usize, i: usize, by: f64) {
    let (w, b) = model.layers[layer].params_mut().unwrap();
    let t = if which == 0 { w } else { b };
    t.data_mut()[i] += by;
}

/// Compares every parameter's analytic gradient with a central difference.
/// Returns the number of parameters checked and the worst relative error.
pub fn check_gradients(case: &MicroCase) -> Result<(usize, f64), String> {
    let batch = case.batch();
    let model = &case.model;
    let (_, grads) = loss_and_gradients(model, &batch, case.loss).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (li, g) in grads.layers.iter().enumerate() {
        let Some((gw, gb)) = g else { continue };
        for (which, analytic) in [(0, gw), (1, gb)] {
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                bump(&mut plus, li, which, i, H);
                bump(&mut minus, li, which, i, -H);
                let lp = batch_loss(&plus, &batch, case.loss).map_err(|e| e.to_string())?;
                let lm = batch_loss(&minus, &batch, case.loss).map_err(|e| e.to_string())?;
                let numeric = (lp - lm) / (2.0 * H);
                let scale = a.abs().max(numeric.abs());
                let ok = if scale > 1e-7 {
                    worst = worst.max((a - numeric).abs() / scale);
                    (a - numeric).abs() <= GRAD_REL * scale
                } else {
                    (a - numeric).abs() <= 1e-9
                };
                if !ok {
                    return Err(format!(
                        "{}: layer {} {}[{i}] analytic {a:e} vs numeric {numeric:e}",
                        case.name,
                        model.layers[li].name,
                        if which == 0 { "weight" } else { "bias" }
                    ));
                }
                checked += 1;
            }
        }
    }
    if checked != model.param_count() {
        return Err(format!("{}: checked {checked} of {} parameters", case.name, model.param_count()));
    }
    Ok((checked, worst))
}

// ---- partitions ----

fn random_grouping(names: &[&str], rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut groups = vec![vec![names[0].to_string()]];
    for name in &names[1..] {
        if rng.random_bool(0.5) {
            groups.push(Vec::new());
        }
        groups.last_mut().unwrap().push(name.to_string());
    }
    groups
}

/// Runs `inputs` random images through `partitions` random contiguous
/// partitions of `arch` with no hooks and demands bit-identical outputs.
pub fn check_partitions(arch: ArchitectureId, partitions: usize, inputs: usize) -> Result<(), String> {
    let shape = arch.default_input_shape();
    let model = Arc::new(build_model(arch, &shape, 10, 17).map_err(|e| e.to_string())?);
    let mut rng = ChaCha8Rng::seed_from_u64(arch as u64 + 1);
    let len: usize = shape.iter().product();
    let xs: Vec<Tensor> = (0..inputs)
        .map(|_| Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random::<f64>()).collect()).unwrap())
        .collect();
    let expected: Vec<Tensor> = xs.iter().map(|x| model.forward(x).unwrap()).collect();
    let names = model.layer_names();
    for trial in 0..partitions {
        let groups = random_grouping(&names, &mut rng);
        let trust: Vec<Trust> =
            (0..groups.len()).map(|_| if rng.random_bool(0.5) { Trust::Trusted } else { Trust::Untrusted }).collect();
        let plan =
            make_partition(model.clone(), &Grouping::Explicit(groups.clone()), &trust).map_err(|e| e.to_string())?;
        let hooks = PipelineHooks::new();
        for (i, (x, want)) in xs.iter().zip(&expected).enumerate() {
            let got = run_pipeline(&plan, x, &hooks, i as u64).map_err(|e| e.to_string())?.output;
            if !got.bit_eq(want) {
                return Err(format!("{arch} partition {trial} {groups:?} differs on input {i}"));
            }
        }
    }
    Ok(())
}

// ---- compared channels ----

/// An EdgeCNN Conv3 message, its input, and a detector comparing the first
/// `p` filters.
pub struct FnFixture {
    pub detector: Detector,
    pub input: Tensor,
    pub message: Tensor,
}

pub fn fn_fixture(p: usize, image_seed: u64) -> FnFixture {
    let model = build_model(ArchitectureId::EdgeCnn, &[1, 28, 28], 10, 21).unwrap();
    let image = |s: u64| {
        let data = (0..784u64).map(|i| ((i * 7919 + s * 104729) % 997) as f64 / 997.0).collect();
        Tensor::new(vec![1, 28, 28], data).unwrap()
    };
    let calib: Vec<Tensor> = (0..4).map(image).collect();
    let (detector, _) = Detector::calibrated(&model, "Conv3", PseudoSize::P(p), &calib, 1e-12).unwrap();
    let input = layer_inputs(&model, "Conv3", &[image(100 + image_seed)]).unwrap().remove(0);
    let message = model.layer("Conv3").unwrap().forward(&input).unwrap();
    FnFixture { detector, input, message }
}

impl FnFixture {
    pub fn flagged(&self, payload: &Tensor) -> bool {
        self.detector.score(payload, &self.input) > self.detector.comparator.threshold
    }
}

/// Noise confined to filters `p..64` must pass unflagged.
pub fn outside_case(f: &FnFixture, p: usize, mut cfg: NoiseConfig) -> Result<(), String> {
    cfg.channels = Some([p, 64]);
    let noisy = apply_noise(&f.message, &cfg).map_err(|e| e.to_string())?;
    if f.flagged(&noisy) {
        return Err(format!("noise outside the {p} compared filters was flagged: {cfg:?}"));
    }
    Ok(())
}

/// Gaussian noise confined to filters `0..p` must be flagged whenever it
/// touches anything. Returns false when the mask came out empty.
pub fn inside_case(f: &FnFixture, p: usize, mut cfg: NoiseConfig) -> Result<bool, String> {
    cfg.channels = Some([0, p]);
    if !noise_mask(f.message.dims(), &cfg).map_err(|e| e.to_string())?.iter().any(|&m| m) {
        return Ok(false);
    }
    let noisy = apply_noise(&f.message, &cfg).map_err(|e| e.to_string())?;
    if !f.flagged(&noisy) {
        return Err(format!("noise inside the {p} compared filters was missed: {cfg:?}"));
    }
    Ok(true)
}
