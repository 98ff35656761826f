//! Experiment runners: detection metrics on clean/attacked message mixes,
//! accuracy with and without guards, multi-node deployments, overhead
//! against full-layer redundancy, and report emission.

use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{stealth_sweep, NoiseKind, NoiseMatrix, StealthRow};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Layer, ModelSpec};
use crate::pipeline::{accuracy_of, run_batch, run_pipeline, Guard, PartitionPlan, PipelineHooks, TamperFlag};
use crate::sheath::{
    build_pseudonet, calibrate_threshold, mse, pseudonet_forward, Calibration, ComparatorConfig, PseudoNetSpec,
    PseudoSize, SheathUnit,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    /// `None` when the evaluated set holds only one class.
    pub roc_auc: Option<f64>,
}

/// Standard detection metrics from a confusion matrix. Precision is 1 when
/// nothing was flagged and recall is 1 when nothing was attacked.
pub fn compute_metrics(tp: usize, fp: usize, tn: usize, fn_: usize) -> Result<DetectionMetrics> {
    let total = tp + fp + tn + fn_;
    if total == 0 {
        return Err(Error::config("metrics need at least one sample"));
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(DetectionMetrics {
        accuracy: (tp + tn) as f64 / total as f64,
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        roc_auc: None,
    })
}

/// Area under the ROC curve of the rule "flag when score > θ", with θ swept
/// over every distinct score plus both infinities. `scored` pairs a score with
/// whether the sample was attacked. NaN scores count as infinite.
pub fn roc_auc(scored: &[(f64, bool)]) -> Option<f64> {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, bool)> =
        scored.iter().map(|&(s, y)| (if s.is_nan() { f64::INFINITY } else { s }, y)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Lowering θ past each distinct score admits that whole group at once.
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp as f64 / pos as f64, fp as f64 / neg as f64);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        (prev_tpr, prev_fpr) = (tpr, fpr);
    }
    Some(area)
}

/// Confusion counts of `score > threshold` against ground truth, plus AUC.
pub fn metrics_at(scored: &[(f64, bool)], threshold: f64) -> Result<DetectionMetrics> {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for &(s, attacked) in scored {
        let flagged = s.is_nan() || s > threshold;
        match (flagged, attacked) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut m = compute_metrics(tp, fp, tn, fn_)?;
    m.roc_auc = roc_auc(scored);
    Ok(m)
}

/// Feature maps entering `layer` for each image.
pub fn layer_inputs(model: &ModelSpec, layer: &str, images: &[Tensor]) -> Result<Vec<Tensor>> {
    let idx = model.layer_index(layer).ok_or_else(|| Error::config(format!("unknown layer {layer:?}")))?;
    images.par_iter().map(|x| if idx == 0 { Ok(x.clone()) } else { model.forward_range(x, 0..idx) }).collect()
}

/// A PseudoNet and its comparator without the recover model: all that
/// scoring a message needs.
#[derive(Clone, Debug)]
pub struct Detector {
    pub pseudonet: PseudoNetSpec,
    pub comparator: ComparatorConfig,
}

impl Detector {
    /// Builds the PseudoNet and calibrates its threshold on clean images.
    pub fn calibrated(
        model: &ModelSpec,
        layer: &str,
        size: PseudoSize,
        clean_images: &[Tensor],
        epsilon_floor: f64,
    ) -> Result<(Self, Calibration)> {
        let pseudonet = build_pseudonet(model, layer, size)?;
        let inputs = layer_inputs(model, layer, clean_images)?;
        let cal = calibrate_threshold(model, &pseudonet, &inputs, epsilon_floor)?;
        Ok((Detector { pseudonet, comparator: cal.comparator }, cal))
    }

    /// Comparator MSE; a message that cannot be compared scores infinity.
    pub fn score(&self, payload: &Tensor, upstream_input: &Tensor) -> f64 {
        pseudonet_forward(&self.pseudonet, upstream_input)
            .and_then(|p| mse(&p, &payload.channel_slice(0, self.pseudonet.p)?))
            .unwrap_or(f64::INFINITY)
    }
}

impl From<&SheathUnit> for Detector {
    fn from(unit: &SheathUnit) -> Self {
        Detector { pseudonet: unit.pseudonet.clone(), comparator: unit.comparator }
    }
}

/// Sizes of the clean and attacked halves of a detection set. Sample `i`
/// reads evaluation image `i mod len` and uses noise seed index `i`; the
/// first `n_clean` samples are clean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mix {
    pub n_clean: usize,
    pub n_noisy: usize,
}

impl Mix {
    pub fn len(&self) -> usize {
        self.n_clean + self.n_noisy
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A deployment: partitioned model, attacks, guards and evaluation data.
pub struct Scenario {
    pub id: String,
    pub plan: PartitionPlan,
    pub attacks: NoiseMatrix,
    pub units: Vec<Arc<SheathUnit>>,
    pub data: LabeledDataset,
    pub seed: u64,
}

impl Scenario {
    pub fn new(
        id: impl Into<String>,
        plan: PartitionPlan,
        attacks: NoiseMatrix,
        units: Vec<Arc<SheathUnit>>,
        data: LabeledDataset,
        seed: u64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::config("scenario needs evaluation data"));
        }
        let sc = Scenario { id: id.into(), plan, attacks, units, data, seed };
        sc.hooks(&sc.attacks, true)?;
        Ok(sc)
    }

    fn attacked_nodes(&self) -> Vec<usize> {
        let mut nodes: Vec<usize> = self.attacks.entries.iter().map(|e| e.node).collect();
        nodes.sort_unstable();
        nodes.dedup();
        nodes
    }

    /// Two attacked nodes in a row: one downstream guard sees a message whose
    /// own input was already tampered with, so it cannot rebuild it.
    pub fn expected_degraded(&self) -> bool {
        self.attacked_nodes().windows(2).any(|w| w[1] == w[0] + 1)
    }

    pub fn warnings(&self) -> Vec<String> {
        let attacked = self.attacked_nodes();
        let mut out = Vec::new();
        for u in &self.units {
            if !attacked.contains(&u.guarded_node) {
                out.push(format!(
                    "guard on node {} checks node {}, which is not attacked",
                    u.guarded_node + 1,
                    u.guarded_node
                ));
            }
        }
        for &a in &attacked {
            if !self.units.iter().any(|u| u.guarded_node == a) {
                out.push(format!("attack on node {a} is not guarded"));
            }
        }
        for w in attacked.windows(2).filter(|w| w[1] == w[0] + 1) {
            out.push(format!("consecutive attacks on nodes {} and {}; expected degraded", w[0], w[1]));
        }
        out
    }

    pub fn hooks(&self, attacks: &NoiseMatrix, guarded: bool) -> Result<PipelineHooks> {
        let mut hooks = PipelineHooks::new().noise_matrix(&self.plan, attacks)?;
        if guarded {
            for u in &self.units {
                hooks = hooks.guard(&self.plan, u.guarded_node + 1, u.clone() as Arc<dyn Guard>)?;
            }
        }
        Ok(hooks)
    }

    pub fn unit(&self, guarded_node: usize) -> Result<&Arc<SheathUnit>> {
        self.units
            .iter()
            .find(|u| u.guarded_node == guarded_node)
            .ok_or_else(|| Error::config(format!("no guard checks node {guarded_node}")))
    }

    fn image(&self, i: usize) -> Tensor {
        self.data.image(i % self.data.len())
    }

    /// Guard-free runs of a mix. For each sample: every detector's score on
    /// the message node `guarded_node` sends, and whether that node
    /// tampered with it.
    pub fn guard_scores(&self, guarded_node: usize, mix: Mix, detectors: &[Detector]) -> Result<Vec<(Vec<f64>, bool)>> {
        if mix.is_empty() {
            return Err(Error::config("empty detection mix"));
        }
        if guarded_node + 1 >= self.plan.nodes().len() {
            return Err(Error::config(format!("node {guarded_node} has no successor to host a guard")));
        }
        let clean = self.hooks(&NoiseMatrix::default(), false)?;
        let noisy = self.hooks(&self.attacks, false)?;
        (0..mix.len())
            .into_par_iter()
            .map(|i| {
                let x = self.image(i);
                let hooks = if i < mix.n_clean { &clean } else { &noisy };
                let trace = run_pipeline(&self.plan, &x, hooks, i as u64)?;
                let msg = &trace.messages[guarded_node];
                let upstream = if guarded_node == 0 { &x } else { &trace.messages[guarded_node - 1].payload };
                let scores = detectors.iter().map(|d| d.score(&msg.payload, upstream)).collect();
                Ok((scores, msg.tamper_flag == TamperFlag::Noised))
            })
            .collect()
    }

    fn accuracy(&self, attacks: &NoiseMatrix, guarded: bool) -> Result<(f64, f64)> {
        let hooks = self.hooks(attacks, guarded)?;
        let outcomes = run_batch(&self.plan, &self.data, &hooks)?;
        let flagged = outcomes.iter().filter(|o| o.detections.iter().any(|d| d.detection.flagged)).count();
        Ok((accuracy_of(&outcomes), flagged as f64 / outcomes.len() as f64))
    }
}

/// Guard verdicts against ground truth over a clean/attacked mix. Noisy
/// samples use the scenario's attacks.
pub fn run_detection_eval(sc: &Scenario, guarded_node: usize, mix: Mix) -> Result<DetectionMetrics> {
    let det = Detector::from(sc.unit(guarded_node)?.as_ref());
    let threshold = det.comparator.threshold;
    let scored: Vec<(f64, bool)> =
        sc.guard_scores(guarded_node, mix, &[det])?.into_iter().map(|(s, y)| (s[0], y)).collect();
    metrics_at(&scored, threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p: usize,
    pub threshold: f64,
    pub metrics: DetectionMetrics,
}

/// Detection metrics for PseudoNets of each size in `p_list`, each
/// calibrated on `calibration_images`. Detection does not involve the
/// recover model, so none is trained.
pub fn run_filter_sweep(
    sc: &Scenario,
    guarded_node: usize,
    p_list: &[usize],
    calibration_images: &[Tensor],
    epsilon_floor: f64,
    mix: Mix,
) -> Result<Vec<SweepPoint>> {
    if p_list.is_empty() {
        return Err(Error::config("empty p list"));
    }
    let node = sc.plan.node(guarded_node)?;
    let layer = node.layer_names.last().expect("nodes hold at least one layer").clone();
    let detectors: Vec<Detector> = p_list
        .iter()
        .map(|&p| Detector::calibrated(sc.plan.model(), &layer, PseudoSize::P(p), calibration_images, epsilon_floor))
        .map(|r| r.map(|(d, _)| d))
        .collect::<Result<_>>()?;
    let scores = sc.guard_scores(guarded_node, mix, &detectors)?;
    detectors
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let scored: Vec<(f64, bool)> = scores.iter().map(|(s, y)| (s[k], *y)).collect();
            Ok(SweepPoint {
                p: d.pseudonet.p,
                threshold: d.comparator.threshold,
                metrics: metrics_at(&scored, d.comparator.threshold)?,
            })
        })
        .collect()
}

/// An attack strength applied to every attacked (layer, node) of a scenario,
/// keeping each entry's seed and channel range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub kind: NoiseKind,
    pub np: f64,
    #[serde(default)]
    pub sp: f64,
}

impl NoiseLevel {
    pub fn apply(&self, attacks: &NoiseMatrix) -> Result<NoiseMatrix> {
        let mut out = attacks.clone();
        for e in &mut out.entries {
            e.noise.kind = self.kind;
            e.noise.np = self.np;
            e.noise.sp = self.sp;
            e.noise.validate()?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub kind: NoiseKind,
    pub np: f64,
    pub sp: f64,
    pub accuracy_with_noise: f64,
    pub accuracy_with_sheath: f64,
    /// Fraction of samples on which some guard flagged a message.
    pub flagged: f64,
}

/// Clean pipeline accuracy, no attacks and no guards.
pub fn baseline_accuracy(sc: &Scenario) -> Result<f64> {
    Ok(sc.accuracy(&NoiseMatrix::default(), false)?.0)
}

/// For each level: accuracy with guards disabled and enabled.
pub fn run_recovery_eval(sc: &Scenario, levels: &[NoiseLevel]) -> Result<Vec<RecoveryRow>> {
    if levels.is_empty() {
        return Err(Error::config("empty noise grid"));
    }
    levels
        .iter()
        .map(|level| {
            let attacks = level.apply(&sc.attacks)?;
            let (noisy, _) = sc.accuracy(&attacks, false)?;
            let (guarded, flagged) = sc.accuracy(&attacks, true)?;
            Ok(RecoveryRow {
                kind: level.kind,
                np: level.np,
                sp: level.sp,
                accuracy_with_noise: noisy,
                accuracy_with_sheath: guarded,
                flagged,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiNodeRow {
    pub kind: NoiseKind,
    pub np: f64,
    pub sp: f64,
    pub accuracy_unguarded: f64,
    pub accuracy_guarded: f64,
    /// Lowest unguarded accuracy with only one of the attacks active.
    pub lowest_single_attack_accuracy: f64,
    pub flagged: f64,
}

/// Every attack at once, with and without the guards, against each attack
/// on its own.
pub fn run_multinode_scenario(sc: &Scenario, levels: &[NoiseLevel]) -> Result<Vec<MultiNodeRow>> {
    if levels.is_empty() {
        return Err(Error::config("empty noise grid"));
    }
    levels
        .iter()
        .map(|level| {
            let attacks = level.apply(&sc.attacks)?;
            let (unguarded, _) = sc.accuracy(&attacks, false)?;
            let (guarded, flagged) = sc.accuracy(&attacks, true)?;
            let mut lowest = f64::INFINITY;
            for e in &attacks.entries {
                let single = NoiseMatrix { entries: vec![e.clone()] };
                lowest = lowest.min(sc.accuracy(&single, false)?.0);
            }
            Ok(MultiNodeRow {
                kind: level.kind,
                np: level.np,
                sp: level.sp,
                accuracy_unguarded: unguarded,
                accuracy_guarded: guarded,
                lowest_single_attack_accuracy: lowest,
                flagged,
            })
        })
        .collect()
}

/// Published reference timings. Hardware-specific; carried for context and
/// never compared against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTimings {
    pub t_d: f64,
    pub t_m: f64,
    pub t_r: f64,
    pub lenet_added_ms: f64,
    pub edgecnn_added_ms: f64,
    pub minivggnet_added_ms: f64,
}

impl Default for ReferenceTimings {
    fn default() -> Self {
        ReferenceTimings {
            t_d: 0.2033,
            t_m: 0.4632,
            t_r: 0.2784,
            lenet_added_ms: 1.7,
            edgecnn_added_ms: 1.87,
            minivggnet_added_ms: 153.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub layer: String,
    pub p: usize,
    pub n: usize,
    pub samples: usize,
    /// Mean seconds per message: detect path, recover path, full redundancy.
    pub t_d: f64,
    pub t_m: f64,
    pub t_r: f64,
    /// Parameter bytes each path keeps live.
    pub m_d: usize,
    pub m_m: usize,
    pub m_r: usize,
    pub flops_detect: u64,
    pub flops_recover: u64,
    pub flops_redundancy: u64,
    pub detect_faster: bool,
    pub detect_and_recover_faster: bool,
    pub reference: ReferenceTimings,
}

/// Multiply-adds count two, bias adds and activations one per output
/// element; comparing one element costs three (subtract, square, add).
fn layer_flops(layer: &Layer, input: &[usize]) -> Result<u64> {
    let out: usize = layer.output_dims(input)?.iter().product();
    Ok(2 * layer.macs(input)? + 2 * out as u64)
}

fn median_secs(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Times the guard's detect and recover paths against duplicating the full
/// target layer, per message, on the calling thread. Each sample is timed
/// `repeats` times and the median kept; the report holds the mean over
/// samples. `inputs` are feature maps entering the target layer.
pub fn measure_overhead(
    model: &ModelSpec,
    unit: &SheathUnit,
    inputs: &[Tensor],
    repeats: usize,
) -> Result<OverheadReport> {
    if inputs.is_empty() || repeats == 0 {
        return Err(Error::config("overhead needs samples and repeats"));
    }
    let spec = &unit.pseudonet;
    let target = model
        .layer(&spec.target_layer)
        .ok_or_else(|| Error::config(format!("unknown layer {:?}", spec.target_layer)))?;
    let (mut t_d, mut t_m, mut t_r) = (0.0, 0.0, 0.0);
    for x in inputs {
        let payload = target.forward(x)?;
        t_d += median_secs(repeats, || {
            let pseudo = pseudonet_forward(spec, x)?;
            black_box(mse(&pseudo, &payload.channel_slice(0, spec.p)?)?);
            Ok(())
        })?;
        if let Some(r) = &unit.recover {
            let pseudo = pseudonet_forward(spec, x)?;
            t_m += median_secs(repeats, || {
                let rest = r.forward(x)?;
                black_box(Tensor::concat_channels(&[&pseudo, &rest])?);
                Ok(())
            })?;
        }
        t_r += median_secs(repeats, || {
            let dup = target.forward(x)?;
            black_box(mse(&dup, &payload)?);
            Ok(())
        })?;
    }
    let k = inputs.len() as f64;
    let (t_d, t_m, t_r) = (t_d / k, t_m / k, t_r / k);

    let out_dims = target.output_dims(&spec.input_dims)?;
    let per_channel: usize = out_dims[1..].iter().product();
    let flops_detect = layer_flops(&spec.layer, &spec.input_dims)? + 3 * (spec.p * per_channel) as u64;
    let flops_redundancy = layer_flops(target, &spec.input_dims)? + 3 * (spec.n * per_channel) as u64;
    let (flops_recover, m_m) = match &unit.recover {
        None => (0, 0),
        Some(r) => {
            let mut dims = r.model.input_shape.clone();
            let mut flops = 0;
            for layer in &r.model.layers {
                flops += layer_flops(layer, &dims)?;
                dims = layer.output_dims(&dims)?;
            }
            (flops, r.param_count() * 8)
        }
    };
    Ok(OverheadReport {
        layer: spec.target_layer.clone(),
        p: spec.p,
        n: spec.n,
        samples: inputs.len(),
        t_d,
        t_m,
        t_r,
        m_d: spec.param_count() * 8,
        m_m,
        m_r: target.param_count() * 8,
        flops_detect,
        flops_recover,
        flops_redundancy,
        detect_faster: t_d < t_r,
        detect_and_recover_faster: t_d + t_m < t_r,
        reference: ReferenceTimings::default(),
    })
}

/// Post-attack map statistics and accuracy for each `np`.
pub fn run_stealth(
    model: &ModelSpec,
    data: &LabeledDataset,
    layer: &str,
    sp: f64,
    np_list: &[f64],
    seed: u64,
) -> Result<Vec<StealthRow>> {
    stealth_sweep(model, data, layer, sp, np_list, seed)
}

/// Everything one scenario run produced. Sections a scenario does not
/// exercise stay empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub baseline_accuracy: Option<f64>,
    /// Lowest across the evaluated noise levels.
    pub accuracy_with_noise: Option<f64>,
    pub accuracy_with_sheath: Option<f64>,
    pub detection: Option<DetectionMetrics>,
    pub sweep: Vec<SweepPoint>,
    pub recovery: Vec<RecoveryRow>,
    pub multinode: Vec<MultiNodeRow>,
    pub stealth: Vec<StealthRow>,
    pub overhead: Option<OverheadReport>,
    pub expected_degraded: bool,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct SweepCsvRow {
    p: usize,
    threshold: f64,
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    false_positives: usize,
    false_negatives: usize,
    roc_auc: Option<f64>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::config(format!("{}: {other:?}", path.display())),
    }
}

fn min_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    values.fold(None, |m, v| Some(m.map_or(v, |m: f64| m.min(v))))
}

impl ScenarioReport {
    pub fn new(scenario: impl Into<String>, seed: u64) -> Self {
        ScenarioReport { scenario: scenario.into(), seed, ..Default::default() }
    }

    /// Fills the headline accuracies from the recovery or multi-node rows.
    pub fn summarize_rows(&mut self) {
        if !self.recovery.is_empty() {
            self.accuracy_with_noise = min_of(self.recovery.iter().map(|r| r.accuracy_with_noise));
            self.accuracy_with_sheath = min_of(self.recovery.iter().map(|r| r.accuracy_with_sheath));
        } else if !self.multinode.is_empty() {
            self.accuracy_with_noise = min_of(self.multinode.iter().map(|r| r.accuracy_unguarded));
            self.accuracy_with_sheath = min_of(self.multinode.iter().map(|r| r.accuracy_guarded));
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut accs: Vec<f64> = [self.baseline_accuracy, self.accuracy_with_noise, self.accuracy_with_sheath]
            .into_iter()
            .flatten()
            .collect();
        accs.extend(self.recovery.iter().flat_map(|r| [r.accuracy_with_noise, r.accuracy_with_sheath]));
        accs.extend(self.multinode.iter().flat_map(|r| [r.accuracy_unguarded, r.accuracy_guarded]));
        accs.extend(self.stealth.iter().map(|r| r.accuracy));
        accs.extend(self.sweep.iter().map(|s| s.metrics.accuracy));
        accs.extend(self.detection.iter().map(|d| d.accuracy));
        match accs.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            Some(a) => Err(Error::Numeric(format!("accuracy {a} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    fn stem(&self) -> String {
        format!("{}-seed{}", self.scenario, self.seed)
    }

    /// Writes `<scenario>-seed<seed>.json` and one CSV per non-empty table
    /// into `dir`; returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = self.stem();
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::config(format!("json: {e}")))?;
        std::fs::write(&json, body + "\n").map_err(|e| Error::io(&json, e))?;
        let mut written = vec![json];
        let mut table = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
            let path = dir.join(format!("{stem}-{name}.csv"));
            f(&path)?;
            written.push(path);
            Ok(())
        };
        if !self.sweep.is_empty() {
            let rows: Vec<SweepCsvRow> = self
                .sweep
                .iter()
                .map(|s| SweepCsvRow {
                    p: s.p,
                    threshold: s.threshold,
                    accuracy: s.metrics.accuracy,
                    precision: s.metrics.precision,
                    recall: s.metrics.recall,
                    f1: s.metrics.f1,
                    false_positives: s.metrics.false_positives,
                    false_negatives: s.metrics.false_negatives,
                    roc_auc: s.metrics.roc_auc,
                })
                .collect();
            table("sweep", &|p| write_csv(p, &rows))?;
        }
        if !self.recovery.is_empty() {
            table("recovery", &|p| write_csv(p, &self.recovery))?;
        }
        if !self.multinode.is_empty() {
            table("multinode", &|p| write_csv(p, &self.multinode))?;
        }
        if !self.stealth.is_empty() {
            table("stealth", &|p| write_csv(p, &self.stealth))?;
        }
        Ok(written)
    }

    /// Plain-text tables for a terminal.
    pub fn summary(&self) -> String {
        let mut s = format!("scenario {} (seed {})\n", self.scenario, self.seed);
        if let Some(b) = self.baseline_accuracy {
            s += &format!("baseline accuracy   {b:.4}\n");
        }
        if let Some(d) = &self.detection {
            s += &format!(
                "detection           acc {:.4}  prec {:.4}  rec {:.4}  f1 {:.4}  fp {}  fn {}  auc {}\n",
                d.accuracy,
                d.precision,
                d.recall,
                d.f1,
                d.false_positives,
                d.false_negatives,
                d.roc_auc.map_or("-".into(), |a| format!("{a:.4}"))
            );
        }
        if !self.sweep.is_empty() {
            s += "    p  accuracy        f1    fp    fn\n";
            for pt in &self.sweep {
                let m = &pt.metrics;
                s += &format!(
                    "{:5}  {:8.4}  {:8.4}  {:4}  {:4}\n",
                    pt.p, m.accuracy, m.f1, m.false_positives, m.false_negatives
                );
            }
        }
        if !self.recovery.is_empty() {
            s += "kind               np    sp  noisy acc  sheath acc\n";
            for r in &self.recovery {
                s += &format!(
                    "{:<16} {:4.2}  {:4.2}  {:9.4}  {:10.4}\n",
                    kind_name(r.kind),
                    r.np,
                    r.sp,
                    r.accuracy_with_noise,
                    r.accuracy_with_sheath
                );
            }
        }
        if !self.multinode.is_empty() {
            s += "kind               np    sp  unguarded  guarded  worst single\n";
            for r in &self.multinode {
                s += &format!(
                    "{:<16} {:4.2}  {:4.2}  {:9.4}  {:7.4}  {:12.4}\n",
                    kind_name(r.kind),
                    r.np,
                    r.sp,
                    r.accuracy_unguarded,
                    r.accuracy_guarded,
                    r.lowest_single_attack_accuracy
                );
            }
        }
        if !self.stealth.is_empty() {
            s += "  np      mean     stdev  accuracy\n";
            for r in &self.stealth {
                s += &format!("{:4.2}  {:8.4}  {:8.4}  {:8.4}\n", r.np, r.mean, r.stdev, r.accuracy);
            }
        }
        if let Some(o) = &self.overhead {
            s += &format!(
                "overhead {} p={}/{}: t_d {:.3e}s  t_m {:.3e}s  t_r {:.3e}s  m_d {}B  m_m {}B  m_r {}B  flops {}/{}/{}\n",
                o.layer,
                o.p,
                o.n,
                o.t_d,
                o.t_m,
                o.t_r,
                o.m_d,
                o.m_m,
                o.m_r,
                o.flops_detect,
                o.flops_recover,
                o.flops_redundancy
            );
        }
        if self.expected_degraded {
            s += "expected degraded: consecutive attacked nodes\n";
        }
        for w in &self.warnings {
            s += &format!("warning: {w}\n");
        }
        s
    }
}

fn kind_name(kind: NoiseKind) -> &'static str {
    match kind {
        NoiseKind::GaussianMasked => "gaussian_masked",
        NoiseKind::PolaritySwitch => "polarity_switch",
        NoiseKind::StatPreserving => "stat_preserving",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::NoiseConfig;
    use crate::models::{build_model, ArchitectureId};
    use crate::pipeline::{make_partition, Grouping, Trust};
    use crate::sheath::RecoverModel;

    #[test]
    fn quarter_counts() {
        let m = compute_metrics(25, 25, 25, 25).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_conventions() {
        let m = compute_metrics(0, 0, 10, 0).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(compute_metrics(0, 0, 0, 0).is_err());
        let m = compute_metrics(0, 3, 0, 4).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn auc_extremes() {
        let perfect = [(0.0, false), (0.1, false), (0.5, true), (0.9, true)];
        assert_eq!(roc_auc(&perfect), Some(1.0));
        let inverted = [(0.9, false), (0.5, false), (0.1, true), (0.0, true)];
        assert_eq!(roc_auc(&inverted), Some(0.0));
        let tied = [(1.0, false), (1.0, true)];
        assert_eq!(roc_auc(&tied), Some(0.5));
        assert_eq!(roc_auc(&[(1.0, true)]), None);
        let with_inf = [(0.0, false), (f64::INFINITY, true), (f64::NAN, true)];
        assert_eq!(roc_auc(&with_inf), Some(1.0));
    }

    #[test]
    fn threshold_counts() {
        let scored = [(0.0, false), (2.0, false), (0.5, true), (3.0, true)];
        let m = metrics_at(&scored, 1.0).unwrap();
        assert_eq!((m.true_positives, m.false_positives, m.true_negatives, m.false_negatives), (1, 1, 1, 1));
        assert_eq!(m.roc_auc, Some(0.75));
    }

    fn tiny_data(n: usize) -> LabeledDataset {
        let mut px = Vec::with_capacity(n * 784);
        for i in 0..n {
            px.extend((0..784).map(|j| ((i * 131 + j * 7) % 256) as f64 / 255.0));
        }
        LabeledDataset::new(Tensor::new(vec![n, 1, 28, 28], px).unwrap(), (0..n).map(|i| i % 10).collect(), 10).unwrap()
    }

    fn scenario(p: usize, attacks: NoiseMatrix) -> Scenario {
        let m = Arc::new(build_model(ArchitectureId::EdgeCnn, &[1, 28, 28], 10, 3).unwrap());
        let mut trust = vec![Trust::Trusted; 6];
        trust[3] = Trust::Untrusted;
        let plan = make_partition(m.clone(), &Grouping::LayersPerNode(1), &trust).unwrap();
        let data = tiny_data(6);
        let images: Vec<Tensor> = (0..3).map(|i| data.image(i)).collect();
        let (det, _) = Detector::calibrated(&m, "Conv3", PseudoSize::P(p), &images, 1e-12).unwrap();
        let recover = (p < 64).then(|| RecoverModel::new(conv3(&m), &[32, 14, 14], p, 1, 4, 1).unwrap());
        let unit = SheathUnit::new(det.pseudonet, det.comparator, recover, 3).unwrap();
        Scenario::new("t", plan, attacks, vec![Arc::new(unit)], data, 1).unwrap()
    }

    fn conv3(m: &ModelSpec) -> &crate::nn::Conv2d {
        match &m.layer("Conv3").unwrap().kind {
            crate::nn::LayerKind::Conv2d(c) => c,
            _ => unreachable!(),
        }
    }

    #[test]
    fn clean_mix_has_no_false_positives() {
        let sc = scenario(5, NoiseMatrix::single("Conv3", 3, NoiseConfig::gaussian(0.5, 0.5, 1)));
        let m = run_detection_eval(&sc, 3, Mix { n_clean: 6, n_noisy: 0 }).unwrap();
        assert_eq!(m.false_positives, 0);
        assert_eq!((m.accuracy, m.precision), (1.0, 1.0));
        assert_eq!(m.roc_auc, None);
    }

    #[test]
    fn dense_noise_is_always_caught() {
        let sc = scenario(5, NoiseMatrix::single("Conv3", 3, NoiseConfig::gaussian(0.5, 0.5, 1)));
        let m = run_detection_eval(&sc, 3, Mix { n_clean: 4, n_noisy: 4 }).unwrap();
        assert_eq!((m.true_positives, m.true_negatives), (4, 4));
        assert_eq!(m.roc_auc, Some(1.0));
    }

    #[test]
    fn full_copy_point_of_sweep_is_exact() {
        let sc = scenario(5, NoiseMatrix::single("Conv3", 3, NoiseConfig::gaussian(0.02, 0.5, 1)));
        let images: Vec<Tensor> = (0..2).map(|i| sc.data.image(i)).collect();
        let pts = run_filter_sweep(&sc, 3, &[1, 64], &images, 1e-12, Mix { n_clean: 3, n_noisy: 3 }).unwrap();
        assert_eq!(pts[1].p, 64);
        assert_eq!(pts[1].metrics.accuracy, 1.0);
    }

    #[test]
    fn warnings_and_degraded_flag() {
        let mut attacks = NoiseMatrix::single("Conv3", 3, NoiseConfig::gaussian(0.5, 0.5, 1));
        attacks.entries.push(crate::attack::NoiseEntry {
            layer: "Pool1".into(),
            node: 2,
            noise: NoiseConfig::gaussian(0.5, 0.5, 2),
        });
        let m = Arc::new(build_model(ArchitectureId::EdgeCnn, &[1, 28, 28], 10, 3).unwrap());
        let mut trust = vec![Trust::Trusted; 6];
        trust[2] = Trust::Untrusted;
        trust[3] = Trust::Untrusted;
        let plan = make_partition(m, &Grouping::LayersPerNode(1), &trust).unwrap();
        let sc = Scenario::new("t", plan, attacks, vec![], tiny_data(2), 1).unwrap();
        assert!(sc.expected_degraded());
        let w = sc.warnings();
        assert!(w.iter().any(|w| w.contains("node 2 is not guarded")));
        assert!(w.iter().any(|w| w.contains("consecutive")));
    }

    #[test]
    fn recovery_rows_and_report_files() {
        let sc = scenario(5, NoiseMatrix::single("Conv3", 3, NoiseConfig::gaussian(0.5, 0.5, 1)));
        let levels = [
            NoiseLevel { kind: NoiseKind::GaussianMasked, np: 0.5, sp: 0.5 },
            NoiseLevel { kind: NoiseKind::PolaritySwitch, np: 0.85, sp: 0.0 },
        ];
        let rows = run_recovery_eval(&sc, &levels).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.flagged == 1.0));
        let mut report = ScenarioReport::new("recover", 1);
        report.baseline_accuracy = Some(baseline_accuracy(&sc).unwrap());
        report.recovery = rows;
        report.summarize_rows();
        report.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = report.write(dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files[0].ends_with("recover-seed1.json"));
        let back: ScenarioReport = serde_json::from_str(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert_eq!(back, report);
        assert!(report.summary().contains("sheath acc"));
    }

    #[test]
    fn overhead_flops_scale_with_p() {
        let sc = scenario(5, NoiseMatrix::default());
        let unit = sc.unit(3).unwrap();
        let inputs = layer_inputs(sc.plan.model(), "Conv3", &[sc.data.image(0)]).unwrap();
        let o = measure_overhead(sc.plan.model(), unit, &inputs, 3).unwrap();
        assert_eq!(o.flops_detect * 64, o.flops_redundancy * 5);
        assert!(o.m_r > o.m_d);
        assert!(o.flops_recover > 0);
    }
}
