use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use sheath::config::{DatasetKind, ExperimentConfig};
use sheath::experiment::{cmd_fit_sheath, cmd_run, cmd_train, ScenarioKind};
use sheath::models::ArchitectureId;

/// Partitioned CNN inference with injected feature-map noise and a
/// lightweight redundancy guard.
#[derive(Parser)]
#[command(name = "sheath", version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a reference model and write its weights.
    Train {
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        /// Directory holding the dataset files.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Calibrate guards and grid-search their recover models.
    FitSheath,
    /// Run a scenario and write its report.
    Run {
        /// detect, recover, sweep, multinode, stealth or overhead.
        #[arg(long)]
        scenario: ScenarioKind,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Input(anyhow::Error),
    Usage(String),
    Bounds,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn default_config(arch: &str, dataset: &str, data_dir: Option<&Path>) -> Result<ExperimentConfig> {
    let arch: ArchitectureId = arch.parse()?;
    let dataset: DatasetKind = toml::Value::String(dataset.to_ascii_lowercase())
        .try_into()
        .map_err(|_| anyhow!("unknown dataset {dataset:?}; expected mnist, fashion or cifar10"))?;
    let data_dir = data_dir.map_or_else(|| PathBuf::from("data").join(dataset.slug()), Path::to_path_buf);
    let text = format!(
        "id = \"train\"\n[model]\narch = \"{}\"\ndataset = \"{}\"\ndata_dir = {}\n\
         [model.train]\nlearning_rate = 0.05\nepochs = 1\nbatch_size = 32\n[partition]\n",
        arch.slug(),
        dataset.slug(),
        toml::Value::String(data_dir.display().to_string()),
    );
    Ok(ExperimentConfig::parse(&text, Path::new(""))?)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match (&cli.config, &cli.command) {
        (Some(path), _) => ExperimentConfig::load(path).map_err(anyhow::Error::from)?,
        (None, Command::Train { arch: Some(arch), dataset: Some(dataset), data_dir }) => {
            default_config(arch, dataset, data_dir.as_deref())?
        }
        (None, Command::Train { .. }) => {
            return Err(Failure::Usage("train needs --config, or --arch and --dataset".into()))
        }
        (None, _) => return Err(Failure::Usage("--config is required".into())),
    };
    if let Command::Train { arch, dataset, data_dir } = &cli.command {
        if cli.config.is_some() && (arch.is_some() || dataset.is_some() || data_dir.is_some()) {
            return Err(Failure::Usage("--arch/--dataset/--data-dir replace --config; give one or the other".into()));
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.eval.out_dir = out.clone();
    }
    cfg.validate().map_err(anyhow::Error::from)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train { .. } => {
            let r = cmd_train(&cfg).context("train")?;
            println!(
                "{} on {}: test accuracy {:.4} after {:.0} s -> {}",
                r.arch,
                r.dataset,
                r.test_accuracy,
                r.train_seconds,
                r.weights.display()
            );
        }
        Command::FitSheath => {
            for (path, a) in cmd_fit_sheath(&cfg).context("fit-sheath")? {
                let recover = match (a.recover_l, a.recover_f) {
                    (Some(l), Some(f)) => format!("recover l={l} f={f} ({} grid rows)", a.grid.len()),
                    _ => "pass-through, no recover model".into(),
                };
                println!(
                    "node {} {} p={}/{}: threshold {:e} (max clean mse {:e}), {recover} -> {}",
                    a.guarded_node,
                    a.target_layer,
                    a.p,
                    a.n,
                    a.calibration.comparator.threshold,
                    a.calibration.max_clean_mse,
                    path.display()
                );
            }
        }
        Command::Run { scenario } => {
            let outcome = cmd_run(&cfg, *scenario).with_context(|| format!("run {scenario}"))?;
            print!("{}", outcome.report.summary());
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if !outcome.violations.is_empty() {
                for v in &outcome.violations {
                    eprintln!("bound violated: {v}");
                }
                return Err(Failure::Bounds);
            }
        }
    }
    Ok(())
}

/// The error chain on one line, skipping causes the parent already prints.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let s = cause.to_string();
        if !parts.last().is_some_and(|p| p.ends_with(&s)) {
            parts.push(s);
        }
    }
    parts.join(": ")
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("SHEATH_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().with_context(|| format!("SHEATH_THREADS={v:?} is not a count"))?;
    if n == 0 {
        bail!("SHEATH_THREADS must be positive");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {}", describe(&e));
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Bounds) => ExitCode::from(3),
    }
}
