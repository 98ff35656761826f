//! Experiment configuration files (TOML) and their validation.

// Negated comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{NoiseConfig, NoiseEntry, NoiseKind, NoiseMatrix};
use crate::error::{Error, Result};
use crate::harness::{Mix, NoiseLevel, ScenarioReport};
use crate::models::{build_model, ArchitectureId};
use crate::nn::{LayerKind, ModelSpec};
use crate::pipeline::{Grouping, Trust};
use crate::sheath::{PseudoSize, DEFAULT_EPSILON_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    /// Fashion-MNIST, same file layout as MNIST.
    Fashion,
    Cifar10,
}

impl DatasetKind {
    pub fn slug(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fashion => "fashion",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist | DatasetKind::Fashion => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    /// Files expected under the data directory: training files first, then
    /// test files.
    pub fn files(self) -> (Vec<&'static str>, Vec<&'static str>) {
        match self {
            DatasetKind::Mnist | DatasetKind::Fashion => (
                vec!["train-images-idx3-ubyte", "train-labels-idx1-ubyte"],
                vec!["t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"],
            ),
            DatasetKind::Cifar10 => (
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                vec!["test_batch.bin"],
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchitectureId,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    /// Defaults to `<out_dir>/<arch>-<dataset>-<seed>.shwt`.
    pub weights: Option<PathBuf>,
    /// Use only the first this many training images.
    pub train_samples: Option<usize>,
    pub train: TrainSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    #[serde(default = "default_grouping")]
    pub grouping: Grouping,
    /// Node ids that may tamper with their output; all others are trusted.
    #[serde(default)]
    pub untrusted: Vec<usize>,
}

fn default_grouping() -> Grouping {
    Grouping::LayersPerNode(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub layer: String,
    pub node: usize,
    pub kind: NoiseKind,
    pub np: f64,
    #[serde(default)]
    pub sp: f64,
    /// Defaults to the master seed.
    pub seed: Option<u64>,
    pub channels: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub l_values: Vec<usize>,
    pub f_values: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SheathSection {
    /// The checked (untrusted) node; the guard runs on the node after it.
    pub node: usize,
    pub p: Option<usize>,
    pub alpha: Option<f64>,
    #[serde(default = "default_floor")]
    pub epsilon_floor: f64,
    #[serde(default = "default_calibration_samples")]
    pub calibration_samples: usize,
    /// Fail `fit-sheath` when clean MSE is not zero.
    #[serde(default = "yes")]
    pub strict_calibration: bool,
    /// Training images turned into recover-model pairs.
    #[serde(default = "default_recover_pairs")]
    pub recover_pairs: usize,
    pub grid: Option<GridSection>,
}

fn default_floor() -> f64 {
    DEFAULT_EPSILON_FLOOR
}

fn default_calibration_samples() -> usize {
    100
}

fn default_recover_pairs() -> usize {
    2000
}

fn yes() -> bool {
    true
}

impl SheathSection {
    pub fn size(&self) -> Result<PseudoSize> {
        match (self.p, self.alpha) {
            (Some(p), None) => Ok(PseudoSize::P(p)),
            (None, Some(a)) => Ok(PseudoSize::Alpha(a)),
            _ => Err(Error::config(format!("sheath on node {}: set exactly one of p, alpha", self.node))),
        }
    }
}

/// A noise level with its own acceptance bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSection {
    pub kind: NoiseKind,
    pub np: f64,
    #[serde(default)]
    pub sp: f64,
    pub max_accuracy_with_noise: Option<f64>,
}

impl LevelSection {
    pub fn level(&self) -> NoiseLevel {
        NoiseLevel { kind: self.kind, np: self.np, sp: self.sp }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBound {
    pub p: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StealthMeanBound {
    pub np: f64,
    pub min: f64,
    pub max: f64,
}

/// Hard bounds on a report. `run` exits with status 3 when any is violated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min_baseline_accuracy: Option<f64>,
    /// Every guarded row, recovery or multi-node.
    pub min_accuracy_with_sheath: Option<f64>,
    pub max_accuracy_with_sheath: Option<f64>,
    /// Guarded accuracy identical across levels of the same attack kind.
    #[serde(default)]
    pub sheath_accuracy_constant: bool,
    /// All attacks together score below each attack alone.
    #[serde(default)]
    pub compounding: bool,
    pub min_detection_accuracy: Option<f64>,
    pub max_detection_accuracy: Option<f64>,
    pub max_false_positives: Option<usize>,
    #[serde(default)]
    pub sweep: Vec<SweepBound>,
    /// Largest allowed drop between consecutive sweep points.
    pub sweep_monotone_tolerance: Option<f64>,
    /// Relative stdev change from the first to the last stealth row.
    pub max_stdev_drift: Option<f64>,
    #[serde(default)]
    pub stealth_mean_monotone: bool,
    pub stealth_mean: Option<StealthMeanBound>,
    #[serde(default)]
    pub detect_faster: bool,
    #[serde(default)]
    pub exact_flop_ratio: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Use only the first this many test images.
    pub samples: Option<usize>,
    #[serde(default = "default_half")]
    pub n_clean: usize,
    #[serde(default = "default_half")]
    pub n_noisy: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_p_list")]
    pub p_list: Vec<usize>,
    #[serde(default = "default_np_list")]
    pub np_list: Vec<f64>,
    #[serde(default = "default_stealth_sp")]
    pub stealth_sp: f64,
    /// Defaults to the first attacked layer.
    pub stealth_layer: Option<String>,
    #[serde(default)]
    pub levels: Vec<LevelSection>,
    #[serde(default = "default_overhead_samples")]
    pub overhead_samples: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub bounds: Bounds,
}

fn default_half() -> usize {
    5000
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_p_list() -> Vec<usize> {
    (1..=10).collect()
}

fn default_np_list() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

fn default_stealth_sp() -> f64 {
    0.5
}

fn default_overhead_samples() -> usize {
    20
}

fn default_repeats() -> usize {
    5
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("every eval field has a default")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Prefix of report file names.
    pub id: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub model: ModelSection,
    pub partition: PartitionSection,
    #[serde(default)]
    pub attack: Vec<AttackSection>,
    #[serde(default)]
    pub sheath: Vec<SheathSection>,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_seed() -> u64 {
    1
}

impl ExperimentConfig {
    /// Parses and validates; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for p in [&mut cfg.model.data_dir, &mut cfg.eval.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(w) = cfg.model.weights.as_mut().filter(|w| w.is_relative()) {
            *w = base.join(&*w);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside resolve against the working
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, Path::new("")).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// An untrained instance of the configured architecture, for layer and
    /// shape lookups.
    pub fn skeleton(&self) -> Result<ModelSpec> {
        let classes = 10;
        build_model(self.model.arch, &self.model.dataset.input_shape(), classes, self.seed)
    }

    pub fn weights_path(&self) -> PathBuf {
        self.model.weights.clone().unwrap_or_else(|| {
            self.eval.out_dir.join(crate::models::weight_file_name(
                self.model.arch,
                self.model.dataset.slug(),
                self.seed,
            ))
        })
    }

    pub fn trust(&self, nodes: usize) -> Vec<Trust> {
        (0..nodes)
            .map(|i| if self.partition.untrusted.contains(&i) { Trust::Untrusted } else { Trust::Trusted })
            .collect()
    }

    pub fn node_layers(&self, model: &ModelSpec) -> Result<Vec<Vec<String>>> {
        let names = model.layer_names();
        match &self.partition.grouping {
            Grouping::LayersPerNode(0) => Err(Error::config("layers_per_node must be positive")),
            Grouping::LayersPerNode(k) => {
                Ok(names.chunks(*k).map(|c| c.iter().map(|s| s.to_string()).collect()).collect())
            }
            Grouping::Explicit(g) => Ok(g.clone()),
        }
    }

    pub fn noise_matrix(&self) -> NoiseMatrix {
        NoiseMatrix {
            entries: self
                .attack
                .iter()
                .map(|a| NoiseEntry {
                    layer: a.layer.clone(),
                    node: a.node,
                    noise: NoiseConfig {
                        kind: a.kind,
                        np: a.np,
                        sp: a.sp,
                        seed: a.seed.unwrap_or(self.seed),
                        channels: a.channels,
                    },
                })
                .collect(),
        }
    }

    pub fn mix(&self) -> Mix {
        Mix { n_clean: self.eval.n_clean, n_noisy: self.eval.n_noisy }
    }

    /// Cross-checks layer names, node ids, trust and sizes against the
    /// architecture.
    pub fn validate(&self) -> Result<()> {
        let model = self.skeleton()?;
        let groups = self.node_layers(&model)?;
        let flat: Vec<&str> = groups.iter().flatten().map(String::as_str).collect();
        if flat != model.layer_names() {
            return Err(Error::config(format!(
                "partition must list the layers {:?} once each, in order",
                model.layer_names()
            )));
        }
        let nodes = groups.len();
        let trust = self.trust(nodes);
        if let Some(&bad) = self.partition.untrusted.iter().find(|&&n| n >= nodes) {
            return Err(Error::config(format!("untrusted node {bad} does not exist ({nodes} nodes)")));
        }
        let t = &self.model.train;
        if !(t.learning_rate > 0.0) || t.batch_size == 0 {
            return Err(Error::config("model.train needs learning_rate > 0 and batch_size > 0"));
        }
        for a in &self.attack {
            let Some(group) = groups.get(a.node) else {
                return Err(Error::config(format!("attack on node {} which does not exist", a.node)));
            };
            if !group.contains(&a.layer) {
                return Err(Error::config(format!("attack layer {} does not run on node {}", a.layer, a.node)));
            }
            if trust[a.node] == Trust::Trusted {
                log::warn!("attack on trusted node {}", a.node);
            }
        }
        for e in self.noise_matrix().entries {
            e.noise.validate()?;
        }
        let mut seen = Vec::new();
        for s in &self.sheath {
            let host = s.node + 1;
            if host >= nodes {
                return Err(Error::config(format!("guard for node {} needs a node {host} to run on", s.node)));
            }
            if trust[host] == Trust::Untrusted {
                return Err(Error::config(format!("guard placed on untrusted node {host}")));
            }
            if seen.contains(&s.node) {
                return Err(Error::config(format!("two guards check node {}", s.node)));
            }
            seen.push(s.node);
            let layer = groups[s.node].last().expect("non-empty group");
            let n = match &model.layer(layer).expect("validated name").kind {
                LayerKind::Conv2d(c) => c.out_channels,
                LayerKind::Dense(d) => d.units,
                LayerKind::MaxPool2d(_) | LayerKind::Flatten => 0,
            };
            match s.size()? {
                PseudoSize::P(p) if p == 0 || (n > 0 && p > n) => {
                    return Err(Error::config(format!("guard for {layer}: p = {p} outside 1..={n}")));
                }
                PseudoSize::Alpha(a) if !(a > 0.0 && a <= 1.0) => {
                    return Err(Error::config(format!("guard for {layer}: alpha = {a} outside (0, 1]")));
                }
                _ => {}
            }
            if s.calibration_samples == 0 {
                return Err(Error::config("calibration_samples must be positive"));
            }
            if let Some(g) = &s.grid {
                if g.l_values.is_empty() || g.f_values.is_empty() || g.batch_size == 0 || !(g.learning_rate > 0.0) {
                    return Err(Error::config(format!("guard for {layer}: incomplete grid")));
                }
            }
        }
        if let Some(l) = &self.eval.stealth_layer {
            if model.layer_index(l).is_none() {
                return Err(Error::config(format!("unknown stealth layer {l:?}")));
            }
        }
        if self.eval.p_list.contains(&0) {
            return Err(Error::config("p_list entries must be positive"));
        }
        for l in &self.eval.levels {
            NoiseConfig { kind: l.kind, np: l.np, sp: l.sp, seed: 0, channels: None }.validate()?;
        }
        Ok(())
    }

    /// Bound violations of `report`, one message each.
    pub fn violations(&self, report: &ScenarioReport) -> Vec<String> {
        let b = &self.eval.bounds;
        let mut out = Vec::new();
        if let Some(v) = report.baseline_accuracy {
            below(&mut out, "baseline accuracy", v, b.min_baseline_accuracy);
        }
        let guarded: Vec<f64> = report
            .recovery
            .iter()
            .map(|r| r.accuracy_with_sheath)
            .chain(report.multinode.iter().map(|r| r.accuracy_guarded))
            .collect();
        for &v in &guarded {
            below(&mut out, "accuracy with sheath", v, b.min_accuracy_with_sheath);
        }
        if let Some(d) = &report.detection {
            below(&mut out, "detection accuracy", d.accuracy, b.min_detection_accuracy);
        }
        for sb in &b.sweep {
            match report.sweep.iter().find(|s| s.p == sb.p) {
                Some(s) => below(&mut out, &format!("sweep accuracy at p={}", sb.p), s.metrics.accuracy, sb.min),
                None => out.push(format!("sweep has no point p={}", sb.p)),
            }
        }

        for &v in &guarded {
            above(&mut out, "accuracy with sheath", v, b.max_accuracy_with_sheath);
        }
        if let Some(d) = &report.detection {
            above(&mut out, "detection accuracy", d.accuracy, b.max_detection_accuracy);
            above(&mut out, "false positives", d.false_positives as f64, b.max_false_positives.map(|m| m as f64));
        }
        for sb in &b.sweep {
            if let Some(s) = report.sweep.iter().find(|s| s.p == sb.p) {
                above(&mut out, &format!("sweep accuracy at p={}", sb.p), s.metrics.accuracy, sb.max);
            }
        }
        for r in &report.recovery {
            let bound = self
                .eval
                .levels
                .iter()
                .find(|l| l.kind == r.kind && l.np == r.np && l.sp == r.sp)
                .and_then(|l| l.max_accuracy_with_noise);
            above(
                &mut out,
                &format!("accuracy with noise ({:?} np={} sp={})", r.kind, r.np, r.sp),
                r.accuracy_with_noise,
                bound,
            );
        }

        if b.sheath_accuracy_constant {
            for r in &report.recovery {
                let first = report.recovery.iter().find(|q| q.kind == r.kind).expect("r itself");
                if r.accuracy_with_sheath != first.accuracy_with_sheath {
                    out.push(format!(
                        "sheath accuracy varies within {:?}: {} vs {}",
                        r.kind, first.accuracy_with_sheath, r.accuracy_with_sheath
                    ));
                }
            }
        }
        if b.compounding {
            for r in &report.multinode {
                if r.accuracy_unguarded >= r.lowest_single_attack_accuracy {
                    out.push(format!(
                        "combined attacks ({:.4}) not below single attack ({:.4}) at np={} sp={}",
                        r.accuracy_unguarded, r.lowest_single_attack_accuracy, r.np, r.sp
                    ));
                }
            }
        }
        if let Some(tol) = b.sweep_monotone_tolerance {
            for w in report.sweep.windows(2) {
                if w[1].metrics.accuracy < w[0].metrics.accuracy - tol {
                    out.push(format!(
                        "sweep accuracy drops from {:.4} (p={}) to {:.4} (p={})",
                        w[0].metrics.accuracy, w[0].p, w[1].metrics.accuracy, w[1].p
                    ));
                }
            }
        }
        if let (Some(max), Some(first), Some(last)) = (b.max_stdev_drift, report.stealth.first(), report.stealth.last())
        {
            let drift = (last.stdev - first.stdev).abs() / first.stdev;
            if !(drift < max) {
                out.push(format!("stdev drift {drift:.4} >= {max}"));
            }
        }
        if b.stealth_mean_monotone {
            for w in report.stealth.windows(2) {
                if w[1].mean < w[0].mean {
                    out.push(format!("stealth mean falls from np={} to np={}", w[0].np, w[1].np));
                }
            }
        }
        if let Some(sm) = &b.stealth_mean {
            match report.stealth.iter().find(|r| (r.np - sm.np).abs() < 1e-9) {
                Some(r) if r.mean < sm.min || r.mean > sm.max => {
                    out.push(format!("stealth mean {:.4} at np={} outside [{}, {}]", r.mean, sm.np, sm.min, sm.max))
                }
                Some(_) => {}
                None => out.push(format!("stealth table has no np={}", sm.np)),
            }
        }
        if let Some(o) = &report.overhead {
            if b.detect_faster && !o.detect_faster {
                out.push(format!("t_d {:.3e}s not below t_r {:.3e}s", o.t_d, o.t_r));
            }
            if b.exact_flop_ratio && o.flops_detect * o.n as u64 != o.flops_redundancy * o.p as u64 {
                out.push(format!(
                    "detect flops {} != {}/{} of redundancy flops {}",
                    o.flops_detect, o.p, o.n, o.flops_redundancy
                ));
            }
        }
        out
    }
}

fn below(out: &mut Vec<String>, what: &str, v: f64, min: Option<f64>) {
    if let Some(m) = min.filter(|m| v < *m) {
        out.push(format!("{what} {v:.4} < {m}"));
    }
}

fn above(out: &mut Vec<String>, what: &str, v: f64, max: Option<f64>) {
    if let Some(m) = max.filter(|m| v > *m) {
        out.push(format!("{what} {v:.4} > {m}"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
id = "t"
[model]
arch = "edgecnn"
dataset = "mnist"
data_dir = "data/mnist"
[model.train]
learning_rate = 0.05
epochs = 1
batch_size = 32
[partition]
untrusted = [3]
[[attack]]
layer = "Conv3"
node = 3
kind = "gaussian_masked"
np = 0.65
sp = 0.5
[[sheath]]
node = 3
p = 5
"#;

    fn parse(extra: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&format!("{BASE}{extra}"), Path::new("/base"))
    }

    #[test]
    fn defaults_and_paths() {
        let c = parse("").unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.model.data_dir, Path::new("/base/data/mnist"));
        assert_eq!(c.weights_path(), Path::new("/base/out/edgecnn-mnist-1.shwt"));
        assert_eq!(c.eval.p_list, (1..=10).collect::<Vec<_>>());
        assert_eq!(c.eval.np_list.len(), 11);
        assert_eq!(c.sheath[0].epsilon_floor, 1e-12);
        assert_eq!(c.noise_matrix().entries[0].noise.seed, 1);
        assert_eq!(c.trust(6)[3], Trust::Untrusted);
    }

    #[test]
    fn guard_on_untrusted_node_names_it() {
        let err = ExperimentConfig::parse(&BASE.replace("untrusted = [3]", "untrusted = [3, 4]"), Path::new("/"))
            .unwrap_err();
        assert!(err.to_string().contains("untrusted node 4"), "{err}");
    }

    #[test]
    fn rejects_bad_references() {
        let cases = [
            BASE.replace("layer = \"Conv3\"", "layer = \"Conv9\""),
            BASE.replace("node = 3\nkind", "node = 2\nkind"),
            BASE.replace("p = 5", "p = 65"),
            BASE.replace("p = 5", "p = 5\nalpha = 0.1"),
            BASE.replace(
                "untrusted = [3]",
                "untrusted = [3]\ngrouping = [[\"Conv2\", \"Conv1\"], [\"Pool1\", \"Conv3\", \"FC1\", \"FC2\"]]",
            ),
            BASE.replace("np = 0.65", "np = 1.5"),
            format!("{BASE}\n[[sheath]]\nnode = 5\np = 1\n"),
            format!("{BASE}\nbogus = 1\n"),
        ];
        for (i, c) in cases.iter().enumerate() {
            assert!(ExperimentConfig::parse(c, Path::new("/")).is_err(), "case {i} accepted");
        }
    }

    #[test]
    fn explicit_grouping_and_levels() {
        let text = BASE
            .replace(
                "untrusted = [3]",
                "untrusted = [1]\ngrouping = [[\"Conv1\", \"Conv2\"], [\"Pool1\", \"Conv3\"], [\"FC1\", \"FC2\"]]",
            )
            .replace("node = 3\nkind", "node = 1\nkind")
            .replace("node = 3\np = 5", "node = 1\np = 5");
        let text = format!(
            "{text}\n[eval]\nn_clean = 10\n[[eval.levels]]\nkind = \"polarity_switch\"\nnp = 0.85\nmax_accuracy_with_noise = 0.15\n"
        );
        let c = ExperimentConfig::parse(&text, Path::new("/")).unwrap();
        assert_eq!(c.node_layers(&c.skeleton().unwrap()).unwrap().len(), 3);
        assert_eq!(c.eval.levels[0].level().sp, 0.0);
        assert_eq!(c.mix(), Mix { n_clean: 10, n_noisy: 5000 });
    }
}
