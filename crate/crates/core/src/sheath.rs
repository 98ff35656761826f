//! The guard: a reduced copy of an untrusted layer (PseudoNet) recomputed on
//! a trusted node, an MSE comparator, and a trained model that regenerates
//! the channels the reduced copy does not cover.

use std::borrow::Cow;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    read_weights_file, train_model, write_weights_file, Activation, Conv2d, Layer, LayerKind, Loss, ModelSpec, Samples,
    Target, TrainConfig,
};
use crate::pipeline::{Guard, GuardInput, GuardVerdict};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-12;

/// Size of a PseudoNet: a fraction of the target's filters or an explicit
/// count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoSize {
    Alpha(f64),
    P(usize),
}

/// The first `p` filters (or units) of a trained layer, copied bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoNetSpec {
    pub target_layer: String,
    pub alpha: f64,
    pub p: usize,
    /// Channel count of the full target layer.
    pub n: usize,
    /// Input dims of the target layer.
    pub input_dims: Vec<usize>,
    pub layer: Layer,
}

impl PseudoNetSpec {
    /// Indices of the copied filters, `0..p`.
    pub fn filter_indices(&self) -> std::ops::Range<usize> {
        0..self.p
    }

    pub fn param_count(&self) -> usize {
        self.layer.param_count()
    }
}

pub fn build_pseudonet(model: &ModelSpec, target_layer: &str, size: PseudoSize) -> Result<PseudoNetSpec> {
    let idx =
        model.layer_index(target_layer).ok_or_else(|| Error::config(format!("unknown layer {target_layer:?}")))?;
    let layer = &model.layers[idx];
    let input_dims = model.input_dims_of(idx)?;
    let n = match &layer.kind {
        LayerKind::Conv2d(c) => c.out_channels,
        LayerKind::Dense(d) => d.units,
        LayerKind::MaxPool2d(_) => input_dims[0],
        LayerKind::Flatten => return Err(Error::config("cannot guard a flatten layer")),
    };
    let p = match size {
        PseudoSize::P(p) => p,
        PseudoSize::Alpha(a) => {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config(format!("alpha {a} outside (0, 1]")));
            }
            ((a * n as f64).round() as usize).max(1)
        }
    };
    if p == 0 || p > n {
        return Err(Error::config(format!("p = {p} outside 1..={n} for {target_layer}")));
    }
    let kind = match &layer.kind {
        LayerKind::Conv2d(c) => LayerKind::Conv2d(c.filter_prefix(p)?),
        LayerKind::Dense(d) => LayerKind::Dense(d.unit_prefix(p)?),
        LayerKind::MaxPool2d(pool) => {
            if p != n {
                return Err(Error::config("a pooling PseudoNet is always a full copy (p = n)"));
            }
            LayerKind::MaxPool2d(pool.clone())
        }
        LayerKind::Flatten => unreachable!(),
    };
    Ok(PseudoNetSpec {
        target_layer: target_layer.to_string(),
        alpha: match size {
            PseudoSize::Alpha(a) => a,
            PseudoSize::P(_) => p as f64 / n as f64,
        },
        p,
        n,
        input_dims,
        layer: Layer::new(target_layer, kind),
    })
}

pub fn pseudonet_forward(spec: &PseudoNetSpec, input_fm: &Tensor) -> Result<Tensor> {
    if input_fm.dims() != spec.input_dims.as_slice() {
        return Err(Error::shape(format!(
            "PseudoNet for {} expects input {:?}, got {:?}",
            spec.target_layer,
            spec.input_dims,
            input_fm.dims()
        )));
    }
    spec.layer.forward(input_fm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparatorConfig {
    pub threshold: f64,
    #[serde(default = "default_floor")]
    pub epsilon_floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_EPSILON_FLOOR
}

impl Default for ComparatorConfig {
    fn default() -> Self {
        ComparatorConfig { threshold: DEFAULT_EPSILON_FLOOR, epsilon_floor: DEFAULT_EPSILON_FLOOR }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub mse: f64,
    pub flagged: bool,
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("comparator shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Mean squared difference, flagged when above the threshold.
pub fn compare(pseudo_out: &Tensor, untrusted_subset: &Tensor, cfg: &ComparatorConfig) -> Result<Detection> {
    let mse = mse(pseudo_out, untrusted_subset)?;
    Ok(Detection { mse, flagged: mse > cfg.threshold })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub comparator: ComparatorConfig,
    pub max_clean_mse: f64,
    pub samples: usize,
    /// Clean MSE above 1e-9 means PseudoNet and the target layer disagree.
    pub warning: bool,
}

/// Threshold = largest comparator MSE on clean inputs + `epsilon_floor`.
/// `clean_inputs` are inputs of the target layer.
pub fn calibrate_threshold(
    model: &ModelSpec,
    spec: &PseudoNetSpec,
    clean_inputs: &[Tensor],
    epsilon_floor: f64,
) -> Result<Calibration> {
    if clean_inputs.is_empty() {
        return Err(Error::config("calibration needs at least one clean sample"));
    }
    if !(epsilon_floor >= 0.0 && epsilon_floor.is_finite()) {
        return Err(Error::config(format!("epsilon_floor {epsilon_floor} must be finite and >= 0")));
    }
    let target = model
        .layer(&spec.target_layer)
        .ok_or_else(|| Error::config(format!("unknown layer {:?}", spec.target_layer)))?;
    let mses: Vec<f64> = clean_inputs
        .par_iter()
        .map(|x| {
            let full = target.forward(x)?;
            mse(&pseudonet_forward(spec, x)?, &full.channel_slice(0, spec.p)?)
        })
        .collect::<Result<_>>()?;
    let max = mses.iter().copied().fold(0.0, f64::max);
    let warning = max > 1e-9;
    if warning {
        log::warn!("clean comparator MSE {max:e} on {}: PseudoNet is not bit-exact", spec.target_layer);
    }
    Ok(Calibration {
        comparator: ComparatorConfig { threshold: max + epsilon_floor, epsilon_floor },
        max_clean_mse: max,
        samples: clean_inputs.len(),
        warning,
    })
}

/// A conv stack mapping the target layer's input to its channels `p..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoverModel {
    pub l: usize,
    pub f: usize,
    pub p: usize,
    pub n: usize,
    pub model: ModelSpec,
}

impl RecoverModel {
    /// `l` conv layers: the first uses the target's kernel, stride and padding
    /// so spatial dims line up, the rest are 3x3 with padding 1. Hidden layers
    /// have `f` filters and ReLU; the last has `n - p` filters and the
    /// target's activation.
    pub fn new(target: &Conv2d, input_dims: &[usize], p: usize, l: usize, f: usize, seed: u64) -> Result<Self> {
        let n = target.out_channels;
        if l == 0 || p >= n {
            return Err(Error::config(format!("recover model needs l >= 1 and p < n (l={l}, p={p}, n={n})")));
        }
        if l > 1 && f == 0 {
            return Err(Error::config("hidden recover layers need f >= 1"));
        }
        let mut layers = Vec::with_capacity(l);
        let mut c_in = input_dims[0];
        for i in 0..l {
            let last = i + 1 == l;
            let out = if last { n - p } else { f };
            let act = if last { target.activation } else { Activation::Relu };
            let conv = if i == 0 {
                Conv2d::new(c_in, out, (target.kernel_h, target.kernel_w), target.stride, target.padding, act)?
            } else {
                Conv2d::new(c_in, out, (3, 3), 1, 1, act)?
            };
            layers.push(Layer::conv(&format!("Rec{}", i + 1), conv));
            c_in = out;
        }
        let mut model = ModelSpec::new(input_dims.to_vec(), layers)?;
        model.init_weights(seed);
        Ok(RecoverModel { l, f, p, n, model })
    }

    pub fn param_count(&self) -> usize {
        self.model.param_count()
    }

    pub fn forward(&self, input_fm: &Tensor) -> Result<Tensor> {
        self.model.forward(input_fm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_weights_file(&self.model, path)
    }

    pub fn load(path: &Path, p: usize, n: usize) -> Result<Self> {
        let model = read_weights_file(path)?;
        let out = model.layer_shapes()?.last().map_or(0, |d| d[0]);
        if out != n - p {
            return Err(Error::config(format!(
                "{}: recover model emits {out} channels, expected {}",
                path.display(),
                n - p
            )));
        }
        let l = model.layers.len();
        let f = if l > 1 { model.layer_shapes()?[0][0] } else { 0 };
        Ok(RecoverModel { l, f, p, n, model })
    }
}

/// Training pairs for a recover model: target-layer inputs and the missing
/// channels of its clean output.
pub struct RecoverPairs {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl RecoverPairs {
    /// Runs the clean model over `images` up to and including `target_layer`.
    pub fn generate(model: &ModelSpec, target_layer: &str, p: usize, images: &[Tensor]) -> Result<Self> {
        let idx =
            model.layer_index(target_layer).ok_or_else(|| Error::config(format!("unknown layer {target_layer:?}")))?;
        let pairs: Vec<(Tensor, Tensor)> = images
            .par_iter()
            .map(|x| {
                let input = if idx == 0 { x.clone() } else { model.forward_range(x, 0..idx)? };
                let out = model.layers[idx].forward(&input)?;
                let c = out.dims()[0];
                Ok((input, out.channel_slice(p, c)?))
            })
            .collect::<Result<_>>()?;
        let (inputs, targets) = pairs.into_iter().unzip();
        Ok(RecoverPairs { inputs, targets })
    }

    fn split_at(&self, k: usize) -> (PairView<'_>, PairView<'_>) {
        (
            PairView { inputs: &self.inputs[..k], targets: &self.targets[..k] },
            PairView { inputs: &self.inputs[k..], targets: &self.targets[k..] },
        )
    }
}

struct PairView<'a> {
    inputs: &'a [Tensor],
    targets: &'a [Tensor],
}

impl Samples for PairView<'_> {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn input(&self, i: usize) -> Cow<'_, Tensor> {
        Cow::Borrowed(&self.inputs[i])
    }

    fn target(&self, i: usize) -> Target<'_> {
        Target::Values(&self.targets[i])
    }
}

fn validation_mse(model: &ModelSpec, val: &PairView<'_>) -> Result<f64> {
    let total: f64 = (0..val.len())
        .into_par_iter()
        .map(|i| mse(&model.forward(&val.inputs[i])?, &val.targets[i]))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok(total / val.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub l_values: Vec<usize>,
    pub f_values: Vec<usize>,
    /// Fraction of pairs used for training; the rest validates.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub train: TrainConfig,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl GridSpec {
    /// `l` in `1..=l_max`, `f` in powers of two up to `f_max`.
    pub fn bounded(l_max: usize, f_max: usize, train: TrainConfig) -> Self {
        GridSpec {
            l_values: (1..=l_max).collect(),
            f_values: std::iter::successors(Some(1usize), |f| Some(f * 2)).take_while(|f| *f <= f_max).collect(),
            train_fraction: default_train_fraction(),
            train,
        }
    }

    pub fn len(&self) -> usize {
        self.l_values.len() * self.f_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub l: usize,
    pub f: usize,
    pub params: usize,
    pub val_mse: f64,
}

/// Trains one recover model per grid cell with MSE loss and keeps the one
/// with the lowest validation MSE; ties go to fewer parameters, then smaller
/// `l`. With `l = 1` the filter count is unused, so that model is trained once
/// and reported for every `f`.
pub fn grid_search_recover(
    model: &ModelSpec,
    target_layer: &str,
    p: usize,
    pairs: &RecoverPairs,
    grid: &GridSpec,
) -> Result<(RecoverModel, Vec<GridRow>)> {
    if grid.is_empty() {
        return Err(Error::config("empty recover grid"));
    }
    if grid.l_values.contains(&0) || grid.f_values.contains(&0) {
        return Err(Error::config("grid values must be positive"));
    }
    let idx =
        model.layer_index(target_layer).ok_or_else(|| Error::config(format!("unknown layer {target_layer:?}")))?;
    let LayerKind::Conv2d(target) = &model.layers[idx].kind else {
        return Err(Error::config(format!("{target_layer} is not a conv layer; nothing to recover")));
    };
    let input_dims = model.input_dims_of(idx)?;
    if pairs.inputs.len() < 2 {
        return Err(Error::config("recover training needs at least two pairs"));
    }
    let k = ((grid.train_fraction * pairs.inputs.len() as f64).round() as usize).clamp(1, pairs.inputs.len() - 1);
    let (train, val) = pairs.split_at(k);

    let mut cells: Vec<(usize, usize)> = Vec::new();
    for &l in &grid.l_values {
        for &f in &grid.f_values {
            cells.push((l, f));
        }
    }
    let mut rows = Vec::with_capacity(cells.len());
    let mut best: Option<(RecoverModel, GridRow)> = None;
    let mut single: Option<(RecoverModel, f64)> = None;
    for (l, f) in cells {
        let (rm, val_mse) = if l == 1 && single.is_some() {
            single.clone().unwrap()
        } else {
            let seed = grid.train.seed ^ ((l as u64) << 32 | f as u64);
            let mut rm = RecoverModel::new(target, &input_dims, p, l, f, seed)?;
            let cfg = TrainConfig { loss: Loss::Mse, ..grid.train.clone() };
            train_model(&mut rm.model, &train, &cfg, |_, _| {})?;
            let v = validation_mse(&rm.model, &val)?;
            log::info!("recover l={l} f={f}: val_mse {v:.6e}");
            if l == 1 {
                single = Some((rm.clone(), v));
            }
            (rm, v)
        };
        let row = GridRow { l, f, params: rm.param_count(), val_mse };
        let better = match &best {
            None => true,
            Some((_, b)) => (row.val_mse, row.params, row.l) < (b.val_mse, b.params, b.l),
        };
        rows.push(row.clone());
        if better {
            best = Some((rm, row));
        }
    }
    Ok((best.expect("non-empty grid").0, rows))
}

pub fn write_grid_csv<W: std::io::Write>(rows: &[GridRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::config(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// A deployed guard for one untrusted layer.
#[derive(Clone, Debug)]
pub struct SheathUnit {
    pub pseudonet: PseudoNetSpec,
    pub comparator: ComparatorConfig,
    /// `None` when `p = n`: the PseudoNet output is already complete.
    pub recover: Option<RecoverModel>,
    /// Node whose message is checked; the unit runs on the node after it.
    pub guarded_node: usize,
}

impl SheathUnit {
    pub fn new(
        pseudonet: PseudoNetSpec,
        comparator: ComparatorConfig,
        recover: Option<RecoverModel>,
        guarded_node: usize,
    ) -> Result<Self> {
        match (&recover, pseudonet.p == pseudonet.n) {
            (None, false) => {
                return Err(Error::config(format!("p = {} < n = {} needs a recover model", pseudonet.p, pseudonet.n)))
            }
            (Some(r), _) if r.p != pseudonet.p || r.n != pseudonet.n => {
                return Err(Error::config(format!(
                    "recover model covers channels {}..{}, PseudoNet leaves {}..{}",
                    r.p, r.n, pseudonet.p, pseudonet.n
                )))
            }
            (Some(r), _) if r.model.input_shape != pseudonet.input_dims => {
                return Err(Error::config("recover model and PseudoNet take different inputs"));
            }
            _ => {}
        }
        if comparator.threshold < 0.0 {
            return Err(Error::config("threshold must be >= 0"));
        }
        Ok(SheathUnit { pseudonet, comparator, recover, guarded_node })
    }

    pub fn detect(&self, payload: &Tensor, upstream_input: &Tensor) -> Result<Detection> {
        let pseudo = pseudonet_forward(&self.pseudonet, upstream_input)?;
        let subset = payload.channel_slice(0, self.pseudonet.p)?;
        compare(&pseudo, &subset, &self.comparator)
    }
}

/// PseudoNet channels `0..p` followed by recovered channels `p..n`.
pub fn recover_merge(unit: &SheathUnit, input_fm: &Tensor) -> Result<Tensor> {
    let pseudo = pseudonet_forward(&unit.pseudonet, input_fm)?;
    match &unit.recover {
        None => Ok(pseudo),
        Some(r) => {
            let rest = r.forward(input_fm)?;
            Tensor::concat_channels(&[&pseudo, &rest])
        }
    }
}

impl Guard for SheathUnit {
    fn inspect(&self, input: &GuardInput<'_>) -> Result<GuardVerdict> {
        if input.layer_name != self.pseudonet.target_layer {
            return Err(Error::config(format!(
                "guard for {} received a message from {}",
                self.pseudonet.target_layer, input.layer_name
            )));
        }
        let pseudo = pseudonet_forward(&self.pseudonet, input.upstream_input)?;
        let detection = match input
            .payload
            .channel_slice(0, self.pseudonet.p)
            .and_then(|subset| compare(&pseudo, &subset, &self.comparator))
        {
            Ok(d) => d,
            Err(e) => {
                log::warn!("comparator error on message from node {}: {e}", input.producer.node_id);
                Detection { mse: f64::INFINITY, flagged: true }
            }
        };
        if !detection.flagged {
            return Ok(GuardVerdict { detection, replacement: None });
        }
        let merged = match &self.recover {
            None => pseudo,
            Some(r) => Tensor::concat_channels(&[&pseudo, &r.forward(input.upstream_input)?])?,
        };
        Ok(GuardVerdict { detection, replacement: Some(merged) })
    }
}

/// Full duplicate of the target layer with a full-map comparison; the cost
/// baseline the guard is measured against.
pub struct RedundancyUnit {
    pub layer: Layer,
    pub threshold: f64,
}

impl RedundancyUnit {
    pub fn new(model: &ModelSpec, target_layer: &str, threshold: f64) -> Result<Self> {
        let layer =
            model.layer(target_layer).ok_or_else(|| Error::config(format!("unknown layer {target_layer:?}")))?.clone();
        Ok(RedundancyUnit { layer, threshold })
    }

    pub fn detect(&self, payload: &Tensor, upstream_input: &Tensor) -> Result<Detection> {
        let dup = self.layer.forward(upstream_input)?;
        compare(&dup, payload, &ComparatorConfig { threshold: self.threshold, epsilon_floor: 0.0 })
    }
}
