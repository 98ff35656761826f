//! The commands behind the CLI: train a reference model, fit guards, run a
//! scenario and collect its report.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{evaluate_accuracy, load_cifar10, load_idx, LabeledDataset};
use crate::error::{Error, Result};
use crate::harness::{
    baseline_accuracy, layer_inputs, measure_overhead, run_detection_eval, run_filter_sweep, run_multinode_scenario,
    run_recovery_eval, run_stealth, NoiseLevel, Scenario, ScenarioReport,
};
use crate::models::build_model;
use crate::nn::{read_weights_file, train_model, write_weights_file, Loss, ModelSpec, TrainConfig};
use crate::pipeline::make_partition;
use crate::sheath::{
    build_pseudonet, calibrate_threshold, grid_search_recover, write_grid_csv, Calibration, GridRow, GridSpec,
    PseudoNetSpec, RecoverModel, RecoverPairs, SheathUnit,
};
use crate::tensor::Tensor;

pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn limit(ds: LabeledDataset, n: Option<usize>) -> Result<LabeledDataset> {
    match n {
        Some(n) if n < ds.len() => ds.take(n),
        _ => Ok(ds),
    }
}

/// Training and test sets from the configured directory, each cut to the
/// configured size.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let dir = &cfg.model.data_dir;
    let (train_files, test_files) = cfg.model.dataset.files();
    let paths = |names: &[&str]| -> Vec<PathBuf> { names.iter().map(|n| dir.join(n)).collect() };
    let (train, test) = match cfg.model.dataset {
        DatasetKind::Mnist | DatasetKind::Fashion => {
            let (tr, te) = (paths(&train_files), paths(&test_files));
            (load_idx(&tr[0], &tr[1])?, load_idx(&te[0], &te[1])?)
        }
        DatasetKind::Cifar10 => (load_cifar10(&paths(&train_files))?, load_cifar10(&paths(&test_files))?),
    };
    Ok(Datasets { train: limit(train, cfg.model.train_samples)?, test: limit(test, cfg.eval.samples)? })
}

fn first_images(ds: &LabeledDataset, n: usize) -> Vec<Tensor> {
    (0..n.min(ds.len())).map(|i| ds.image(i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub arch: String,
    pub dataset: String,
    pub seed: u64,
    pub weights: PathBuf,
    pub train_samples: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub epoch_losses: Vec<f64>,
    pub test_accuracy: f64,
    pub train_seconds: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let body = serde_json::to_string_pretty(value).map_err(|e| Error::config(format!("json: {e}")))?;
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Trains the configured architecture and writes its weights plus a
/// `<weights>.json` record. Test accuracy is measured on the whole test set,
/// whatever `eval.samples` says.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainRecord> {
    let mut full = cfg.clone();
    full.eval.samples = None;
    let data = load_datasets(&full)?;
    let arch = cfg.model.arch;
    let mut model = build_model(arch, data.train.image_shape(), data.train.num_classes(), cfg.seed)?;
    let t = &cfg.model.train;
    let train_cfg = TrainConfig {
        learning_rate: t.learning_rate,
        epochs: t.epochs,
        batch_size: t.batch_size,
        seed: cfg.seed,
        loss: Loss::SoftmaxCrossEntropy,
    };
    let start = Instant::now();
    let report = train_model(&mut model, &data.train, &train_cfg, |e, loss| {
        log::info!("epoch {e}: loss {loss:.4} ({:.0} s)", start.elapsed().as_secs_f64())
    })?;
    let test_accuracy = evaluate_accuracy(&model, &data.test)?;
    let weights = cfg.weights_path();
    if let Some(dir) = weights.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_weights_file(&model, &weights)?;
    let record = TrainRecord {
        arch: arch.slug().into(),
        dataset: cfg.model.dataset.slug().into(),
        seed: cfg.seed,
        weights: weights.clone(),
        train_samples: data.train.len(),
        learning_rate: t.learning_rate,
        epochs: t.epochs,
        batch_size: t.batch_size,
        epoch_losses: report.epoch_losses,
        test_accuracy,
        train_seconds: report.seconds,
    };
    write_json(&record_path(&weights), &record)?;
    Ok(record)
}

/// The record `train` wrote next to the configured weights.
pub fn load_train_record(cfg: &ExperimentConfig) -> Result<TrainRecord> {
    read_json(&record_path(&cfg.weights_path()))
}

fn record_path(weights: &Path) -> PathBuf {
    let mut name = weights.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// The trained model named by the config.
pub fn load_model(cfg: &ExperimentConfig) -> Result<ModelSpec> {
    let path = cfg.weights_path();
    if !path.exists() {
        return Err(Error::config(format!("no weights at {}; run `train` first", path.display())));
    }
    let model = read_weights_file(&path)?;
    let expected = cfg.skeleton()?;
    if model.layer_names() != expected.layer_names() || model.input_shape != expected.input_shape {
        return Err(Error::config(format!("{} does not hold a {} model", path.display(), cfg.model.arch)));
    }
    Ok(model)
}

/// Fitted guard state persisted by `fit-sheath`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SheathArtifact {
    pub guarded_node: usize,
    pub target_layer: String,
    pub p: usize,
    pub n: usize,
    pub alpha: f64,
    pub calibration: Calibration,
    /// Recover weights, next to this record; `None` when `p = n` and the
    /// PseudoNet output passes through whole.
    pub recover: Option<String>,
    pub recover_l: Option<usize>,
    pub recover_f: Option<usize>,
    pub grid: Vec<GridRow>,
}

fn guarded_layer(cfg: &ExperimentConfig, model: &ModelSpec, node: usize) -> Result<String> {
    let groups = cfg.node_layers(model)?;
    groups.get(node).and_then(|g| g.last().cloned()).ok_or_else(|| Error::config(format!("node {node} does not exist")))
}

fn artifact_stem(cfg: &ExperimentConfig, layer: &str, p: usize) -> String {
    format!("{}-{}-{}-{layer}-p{p}", cfg.model.arch.slug(), cfg.model.dataset.slug(), cfg.seed)
}

/// Calibrates every configured guard and trains its recover model; writes
/// `<stem>.sheath.json`, `<stem>.recover.shwt` and `<stem>.grid.csv` to the
/// output directory.
pub fn cmd_fit_sheath(cfg: &ExperimentConfig) -> Result<Vec<(PathBuf, SheathArtifact)>> {
    if cfg.sheath.is_empty() {
        return Err(Error::config("no [[sheath]] entries to fit"));
    }
    let model = load_model(cfg)?;
    let data = load_datasets(cfg)?;
    let out = &cfg.eval.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut fitted = Vec::new();
    for s in &cfg.sheath {
        let layer = guarded_layer(cfg, &model, s.node)?;
        let spec = build_pseudonet(&model, &layer, s.size()?)?;
        let inputs = layer_inputs(&model, &layer, &first_images(&data.train, s.calibration_samples))?;
        let calibration = calibrate_threshold(&model, &spec, &inputs, s.epsilon_floor)?;
        if calibration.warning && s.strict_calibration {
            return Err(Error::Numeric(format!(
                "{layer}: clean comparator MSE {:e} is not zero",
                calibration.max_clean_mse
            )));
        }
        let stem = artifact_stem(cfg, &layer, spec.p);
        let mut artifact = SheathArtifact {
            guarded_node: s.node,
            target_layer: layer.clone(),
            p: spec.p,
            n: spec.n,
            alpha: spec.alpha,
            calibration,
            recover: None,
            recover_l: None,
            recover_f: None,
            grid: Vec::new(),
        };
        if spec.p < spec.n {
            let g = s
                .grid
                .as_ref()
                .ok_or_else(|| Error::config(format!("guard for {layer}: p < n needs a [sheath.grid]")))?;
            let images = first_images(&data.train, s.recover_pairs);
            let pairs = RecoverPairs::generate(&model, &layer, spec.p, &images)?;
            let grid = GridSpec {
                l_values: g.l_values.clone(),
                f_values: g.f_values.clone(),
                train_fraction: g.train_fraction,
                train: TrainConfig {
                    learning_rate: g.learning_rate,
                    epochs: g.epochs,
                    batch_size: g.batch_size,
                    seed: cfg.seed,
                    loss: Loss::Mse,
                },
            };
            let (best, rows) = grid_search_recover(&model, &layer, spec.p, &pairs, &grid)?;
            let weights = format!("{stem}.recover.shwt");
            best.save(&out.join(&weights))?;
            let csv_path = out.join(format!("{stem}.grid.csv"));
            let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
            write_grid_csv(&rows, file)?;
            artifact.recover = Some(weights);
            artifact.recover_l = Some(best.l);
            artifact.recover_f = Some(best.f);
            artifact.grid = rows;
        }
        let path = out.join(format!("{stem}.sheath.json"));
        write_json(&path, &artifact)?;
        fitted.push((path, artifact));
    }
    Ok(fitted)
}

/// The fitted state of every configured guard, checked against `model`.
pub fn load_artifacts(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Vec<(PseudoNetSpec, SheathArtifact)>> {
    cfg.sheath
        .iter()
        .map(|s| {
            let layer = guarded_layer(cfg, model, s.node)?;
            let spec = build_pseudonet(model, &layer, s.size()?)?;
            let path = cfg.eval.out_dir.join(format!("{}.sheath.json", artifact_stem(cfg, &layer, spec.p)));
            if !path.exists() {
                return Err(Error::config(format!("no fitted guard at {}; run `fit-sheath` first", path.display())));
            }
            let a: SheathArtifact = read_json(&path)?;
            if (a.target_layer.as_str(), a.p, a.n, a.guarded_node) != (layer.as_str(), spec.p, spec.n, s.node) {
                return Err(Error::config(format!("{} was fitted for another guard", path.display())));
            }
            Ok((spec, a))
        })
        .collect()
}

/// The guards fitted for `cfg`, rebuilt on `model`.
pub fn load_units(cfg: &ExperimentConfig, model: &ModelSpec) -> Result<Vec<Arc<SheathUnit>>> {
    load_artifacts(cfg, model)?
        .into_iter()
        .map(|(spec, a)| {
            let recover = match &a.recover {
                Some(f) => Some(RecoverModel::load(&cfg.eval.out_dir.join(f), a.p, a.n)?),
                None => None,
            };
            Ok(Arc::new(SheathUnit::new(spec, a.calibration.comparator, recover, a.guarded_node)?))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Detect,
    Recover,
    Sweep,
    Multinode,
    Stealth,
    Overhead,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Detect,
        ScenarioKind::Recover,
        ScenarioKind::Sweep,
        ScenarioKind::Multinode,
        ScenarioKind::Stealth,
        ScenarioKind::Overhead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Detect => "detect",
            ScenarioKind::Recover => "recover",
            ScenarioKind::Sweep => "sweep",
            ScenarioKind::Multinode => "multinode",
            ScenarioKind::Stealth => "stealth",
            ScenarioKind::Overhead => "overhead",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ScenarioKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = ScenarioKind::ALL.iter().map(|k| k.name()).collect();
            format!("unknown scenario {s:?}; expected one of {}", names.join(", "))
        })
    }
}

pub struct RunOutcome {
    pub report: ScenarioReport,
    pub files: Vec<PathBuf>,
    /// Hard bounds from the config that the report violates.
    pub violations: Vec<String>,
}

fn scenario(
    cfg: &ExperimentConfig,
    model: Arc<ModelSpec>,
    test: LabeledDataset,
    units: Vec<Arc<SheathUnit>>,
) -> Result<Scenario> {
    let nodes = cfg.node_layers(&model)?.len();
    let plan = make_partition(model, &cfg.partition.grouping, &cfg.trust(nodes))?;
    Scenario::new(cfg.id.clone(), plan, cfg.noise_matrix(), units, test, cfg.seed)
}

fn logged_warnings(sc: &Scenario) -> Vec<String> {
    let w = sc.warnings();
    for line in &w {
        log::warn!("{}: {line}", sc.id);
    }
    w
}

fn levels(cfg: &ExperimentConfig) -> Result<Vec<NoiseLevel>> {
    if !cfg.eval.levels.is_empty() {
        return Ok(cfg.eval.levels.iter().map(|l| l.level()).collect());
    }
    let a = cfg.attack.first().ok_or_else(|| Error::config("no [[attack]] entries and no eval.levels"))?;
    Ok(vec![NoiseLevel { kind: a.kind, np: a.np, sp: a.sp }])
}

fn first_guarded_node(cfg: &ExperimentConfig) -> Result<usize> {
    cfg.sheath
        .first()
        .map(|s| s.node)
        .or_else(|| cfg.attack.first().map(|a| a.node))
        .ok_or_else(|| Error::config("no [[sheath]] or [[attack]] entry names a node to check"))
}

/// Runs one scenario, writes its report under the output directory and
/// checks it against the config's bounds.
pub fn cmd_run(cfg: &ExperimentConfig, kind: ScenarioKind) -> Result<RunOutcome> {
    let model = Arc::new(load_model(cfg)?);
    let data = load_datasets(cfg)?;
    let mut report = ScenarioReport::new(format!("{}-{kind}", cfg.id), cfg.seed);
    match kind {
        ScenarioKind::Stealth => {
            let layer = match (&cfg.eval.stealth_layer, cfg.attack.first()) {
                (Some(l), _) => l.clone(),
                (None, Some(a)) => a.layer.clone(),
                (None, None) => return Err(Error::config("stealth needs eval.stealth_layer or an [[attack]]")),
            };
            let seed = cfg.attack.first().and_then(|a| a.seed).unwrap_or(cfg.seed);
            report.stealth = run_stealth(&model, &data.test, &layer, cfg.eval.stealth_sp, &cfg.eval.np_list, seed)?;
            report.baseline_accuracy = report.stealth.iter().find(|r| r.np == 0.0).map(|r| r.accuracy);
        }
        ScenarioKind::Sweep => {
            let node = first_guarded_node(cfg)?;
            let calibration = cfg.sheath.first().map_or(100, |s| s.calibration_samples);
            let floor = cfg.sheath.first().map_or(crate::sheath::DEFAULT_EPSILON_FLOOR, |s| s.epsilon_floor);
            let images = first_images(&data.train, calibration);
            let sc = scenario(cfg, model.clone(), data.test, Vec::new())?;
            report.sweep = run_filter_sweep(&sc, node, &cfg.eval.p_list, &images, floor, cfg.mix())?;
        }
        ScenarioKind::Detect => {
            let units = load_units(cfg, &model)?;
            let node = first_guarded_node(cfg)?;
            let sc = scenario(cfg, model.clone(), data.test, units)?;
            report.warnings = logged_warnings(&sc);
            report.detection = Some(run_detection_eval(&sc, node, cfg.mix())?);
        }
        ScenarioKind::Recover | ScenarioKind::Multinode => {
            let units = load_units(cfg, &model)?;
            let sc = scenario(cfg, model.clone(), data.test, units)?;
            report.warnings = logged_warnings(&sc);
            report.expected_degraded = sc.expected_degraded();
            report.baseline_accuracy = Some(baseline_accuracy(&sc)?);
            let levels = levels(cfg)?;
            if kind == ScenarioKind::Recover {
                report.recovery = run_recovery_eval(&sc, &levels)?;
            } else {
                report.multinode = run_multinode_scenario(&sc, &levels)?;
            }
            report.summarize_rows();
        }
        ScenarioKind::Overhead => {
            let units = load_units(cfg, &model)?;
            let unit = units.first().ok_or_else(|| Error::config("overhead needs a [[sheath]] entry"))?;
            let images = first_images(&data.test, cfg.eval.overhead_samples);
            let inputs = layer_inputs(&model, &unit.pseudonet.target_layer, &images)?;
            report.overhead = Some(measure_overhead(&model, unit, &inputs, cfg.eval.repeats)?);
        }
    }
    report.validate()?;
    let files = report.write(&cfg.eval.out_dir)?;
    let violations = cfg.violations(&report);
    Ok(RunOutcome { report, files, violations })
}
