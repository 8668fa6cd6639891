//! Experiment configuration and the multi-trial / sweep runner.
//!
//! Configs are TOML with strict key checking. Every default is materialized
//! and echoed to `config.resolved.toml` next to the results. Trial `i`
//! derives independent seeds for sharding, initialization, client
//! selection, client-side augmentation and server training from
//! `(seed, i, purpose)`; the dataset itself depends on the base seed only.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    dirichlet_shard, gen_blobs, load_csv, make_skewed_stream_schedule, make_stream_schedule,
    AugmentConfig, Dataset, LabelPlacement, ShardPlan,
};
use crate::engine::{RoundPlan, SimSeeds, Simulation, SimulationSetup, Topology};
use crate::error::{Error, Result};
use crate::metrics::{
    rounds_csv, stability_stats, trailing_window, CommLedger, Direction, RoundReport, Stability,
    TransmissionLog,
};
use crate::nn::{Activation, ModelSpec};
use crate::seed::derive_seed;
use crate::ssl::SslHyper;
use crate::variants::{SwitchDecision, VariantConfig, VariantKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Blobs,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub num_classes: usize,
    /// Blobs only.
    pub dim: usize,
    /// Blobs only: training examples per class.
    pub train_per_class: usize,
    /// Test examples per class (blobs, or held out of a CSV without `test_path`).
    pub test_per_class: usize,
    /// Blobs only.
    pub spread: f64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Min-max scale CSV features into [0, 1].
    pub scale: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Blobs,
            num_classes: 10,
            dim: 16,
            train_per_class: 420,
            test_per_class: 100,
            spread: 0.35,
            train_path: None,
            test_path: None,
            scale: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShardConfig {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    /// Labels-at-client: labeled examples per client.
    pub labeled_per_client: usize,
    /// Labels-at-server: size of the class-balanced server pool.
    pub server_labeled: usize,
    /// Defaults to an even split of whatever is left after labels.
    pub unlabeled_per_client: Option<usize>,
    /// Streaming segments per client; 1 disables streaming.
    pub stream_steps: usize,
    /// When set, each streaming segment is drawn with its own
    /// `Dirichlet(stream_alpha)` class preference.
    pub stream_alpha: Option<f64>,
}

impl Default for ShardConfig {
    fn default() -> Self {
        ShardConfig {
            num_clients: 20,
            dirichlet_alpha: 100.0,
            labeled_per_client: 10,
            server_labeled: 200,
            unlabeled_per_client: None,
            stream_steps: 1,
            stream_alpha: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub rounds: usize,
    /// Participation rate C.
    pub participation: f64,
    pub local_epochs: usize,
    pub server_epochs: usize,
    pub topology: Topology,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub server_batch: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub lambda_u: f64,
    pub mu: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let hyper = SslHyper::default();
        TrainingConfig {
            rounds: 100,
            participation: 0.25,
            local_epochs: 1,
            server_epochs: 1,
            topology: Topology::LabelsAtClient,
            labeled_batch: 10,
            unlabeled_batch: 50,
            server_batch: 50,
            client_lr: 0.05,
            server_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            tau: hyper.tau,
            lambda_u: hyper.lambda_u,
            mu: hyper.mu,
        }
    }
}

impl TrainingConfig {
    pub fn hyper(&self) -> SslHyper {
        SslHyper {
            tau: self.tau,
            lambda_u: self.lambda_u,
            mu: self.mu,
        }
    }

    pub fn round_plan(&self) -> RoundPlan {
        RoundPlan {
            participation_rate: self.participation,
            local_epochs: self.local_epochs,
            server_epochs: self.server_epochs,
            topology: self.topology,
            labeled_batch: self.labeled_batch,
            unlabeled_batch: self.unlabeled_batch,
            server_batch: self.server_batch,
            client_lr: self.client_lr,
            server_lr: self.server_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// 8 for 64-bit parameters, 4 to cost transport as 32-bit.
    pub bytes_per_param: usize,
    /// Trailing window for steady-state statistics, as a fraction of rounds.
    pub window_fraction: f64,
    /// Student accuracy that counts as "reached" for `rounds_to_threshold`.
    pub accuracy_threshold: Option<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            bytes_per_param: 8,
            window_fraction: 0.125,
            accuracy_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub variants: Vec<VariantKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub shard: ShardConfig,
    pub variant: VariantConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_trials() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/out")
}

impl ExperimentConfig {
    /// Fully defaulted config for `kind`.
    pub fn new(kind: VariantKind) -> Self {
        ExperimentConfig {
            seed: 0,
            trials: default_trials(),
            output: default_output(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            shard: ShardConfig::default(),
            variant: VariantConfig::new(kind),
            training: TrainingConfig::default(),
            augment: AugmentConfig::default(),
            metrics: MetricsConfig::default(),
            sweep: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        let d = &self.dataset;
        if d.num_classes < 2 {
            return Err(Error::Config("dataset.num_classes must be >= 2".into()));
        }
        match d.kind {
            DatasetKind::Blobs => {
                if d.dim == 0 || d.train_per_class == 0 || d.test_per_class == 0 {
                    return Err(Error::Config(
                        "dataset.dim, train_per_class and test_per_class must be >= 1".into(),
                    ));
                }
                if !(d.spread >= 0.0 && d.spread.is_finite()) {
                    return Err(Error::Config("dataset.spread must be non-negative".into()));
                }
            }
            DatasetKind::Csv => {
                if d.train_path.is_none() {
                    return Err(Error::Config(
                        "dataset.train_path is required when kind = \"csv\"".into(),
                    ));
                }
                if d.test_path.is_none() && d.test_per_class == 0 {
                    return Err(Error::Config(
                        "dataset.test_per_class must be >= 1 without a test_path".into(),
                    ));
                }
            }
        }
        self.shard_plan(0).validate().map_err(cfg_err)?;
        if self.shard.stream_steps == 0 {
            return Err(Error::Config("shard.stream_steps must be >= 1".into()));
        }
        if let Some(a) = self.shard.stream_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config("shard.stream_alpha must be positive".into()));
            }
        }
        self.variant.validate().map_err(cfg_err)?;
        self.training.hyper().validate().map_err(cfg_err)?;
        self.training.round_plan().validate().map_err(cfg_err)?;
        self.augment.validate().map_err(cfg_err)?;
        self.model_spec().map_err(cfg_err)?;
        if !matches!(self.metrics.bytes_per_param, 4 | 8) {
            return Err(Error::Config(
                "metrics.bytes_per_param must be 4 or 8".into(),
            ));
        }
        if !(self.metrics.window_fraction > 0.0 && self.metrics.window_fraction <= 1.0) {
            return Err(Error::Config(
                "metrics.window_fraction must be in (0, 1]".into(),
            ));
        }
        if let Some(sweep) = &self.sweep {
            validate_sweep(&sweep.alphas, &sweep.variants)?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let input_dim = match self.dataset.kind {
            DatasetKind::Blobs => self.dataset.dim,
            // Resolved from the file when the dataset is loaded.
            DatasetKind::Csv => self.dataset.dim.max(1),
        };
        Ok(ModelSpec::new(
            input_dim,
            self.model.hidden.clone(),
            self.dataset.num_classes,
        )?
        .with_activation(self.model.activation))
    }

    fn shard_plan(&self, seed: u64) -> ShardPlan {
        let labels = if self.training.topology.labels_at_server() {
            LabelPlacement::Server {
                total: self.shard.server_labeled,
            }
        } else {
            LabelPlacement::Client {
                per_client: self.shard.labeled_per_client,
            }
        };
        ShardPlan {
            num_clients: self.shard.num_clients,
            dirichlet_alpha: self.shard.dirichlet_alpha,
            labels,
            unlabeled_per_client: self.shard.unlabeled_per_client,
            seed,
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn validate_sweep(alphas: &[f64], variants: &[VariantKind]) -> Result<()> {
    if alphas.is_empty() || variants.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one alpha and one variant".into(),
        ));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::Config(format!("sweep alpha {a} must be positive")));
    }
    Ok(())
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Train/test split for the config. Independent of the trial index.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let data_seed = derive_seed(cfg.seed, "data", &[]);
    match d.kind {
        DatasetKind::Blobs => {
            let all = gen_blobs(
                d.num_classes,
                d.dim,
                d.train_per_class + d.test_per_class,
                d.spread,
                data_seed,
            )?;
            all.split_holdout(d.test_per_class, derive_seed(data_seed, "holdout", &[]))
        }
        DatasetKind::Csv => {
            let train_path = d
                .train_path
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.train_path is required".into()))?;
            let train = load_csv(train_path, d.num_classes, d.scale)?;
            match &d.test_path {
                Some(p) => Ok((train, load_csv(p, d.num_classes, d.scale)?)),
                None => {
                    train.split_holdout(d.test_per_class, derive_seed(data_seed, "holdout", &[]))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub trial_seed: u64,
    pub final_accuracy: f64,
    pub final_teacher_accuracy: Option<f64>,
    pub best_accuracy: f64,
    pub rounds_to_threshold: Option<usize>,
    pub downlink_models: usize,
    pub downlink_bytes: usize,
    pub uplink_models: usize,
    pub uplink_bytes: usize,
    /// FedSwitch only: rounds in which the teacher was sent.
    pub teacher_rounds: Option<usize>,
    /// Mean pseudo-label / true-label KL ratio over the trailing window.
    pub steady_kl_ratio: Option<f64>,
    pub trailing_window: usize,
    pub stability: Stability,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub summary: TrialSummary,
    pub reports: Vec<RoundReport>,
    pub log: TransmissionLog,
    pub decisions: Vec<SwitchDecision>,
}

/// Builds the simulation for trial `trial` without running it.
pub fn build_simulation(cfg: &ExperimentConfig, trial: usize) -> Result<Simulation> {
    let (train, test) = load_datasets(cfg)?;
    build_simulation_with_data(cfg, trial, train, test)
}

fn build_simulation_with_data(
    cfg: &ExperimentConfig,
    trial: usize,
    train: Dataset,
    test: Dataset,
) -> Result<Simulation> {
    let trial_seed = derive_seed(cfg.seed, "trial", &[trial as u64]);
    let sharding = dirichlet_shard(
        &train,
        &cfg.shard_plan(derive_seed(trial_seed, "shard", &[])),
    )?;
    let shards = sharding
        .clients
        .iter()
        .map(|s| {
            if cfg.shard.stream_steps <= 1 {
                return Ok(s.clone());
            }
            match cfg.shard.stream_alpha {
                Some(alpha) => make_skewed_stream_schedule(
                    s,
                    train.labels(),
                    train.num_classes(),
                    cfg.shard.stream_steps,
                    alpha,
                    derive_seed(trial_seed, "stream", &[s.client_id as u64]),
                ),
                None => make_stream_schedule(s, cfg.shard.stream_steps),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let server_pool = if cfg.training.topology.labels_at_server() {
        Some(train.select(&sharding.server_labeled)?)
    } else {
        None
    };
    let spec = ModelSpec::new(
        train.dim(),
        cfg.model.hidden.clone(),
        cfg.dataset.num_classes,
    )?
    .with_activation(cfg.model.activation);
    Simulation::new(SimulationSetup {
        spec,
        train,
        test,
        shards,
        server_pool,
        variant: cfg.variant,
        plan: cfg.training.round_plan(),
        hyper: cfg.training.hyper(),
        augment: cfg.augment,
        bytes_per_param: cfg.metrics.bytes_per_param,
        seeds: SimSeeds {
            init: derive_seed(trial_seed, "init", &[]),
            select: derive_seed(trial_seed, "select", &[]),
            client: derive_seed(trial_seed, "client", &[]),
            server: derive_seed(trial_seed, "server", &[]),
        },
    })
}

fn summarize(
    cfg: &ExperimentConfig,
    trial: usize,
    reports: &[RoundReport],
    log: &TransmissionLog,
    decisions: &[SwitchDecision],
) -> Result<TrialSummary> {
    let last = reports
        .last()
        .ok_or_else(|| Error::Config("training.rounds must be >= 1".into()))?;
    let ledger = CommLedger::from_log(log);
    let window = trailing_window(reports.len(), cfg.metrics.window_fraction);
    let tail = &reports[reports.len() - window..];
    let ratios: Vec<f64> = tail.iter().filter_map(|r| r.kl_ratio).collect();
    Ok(TrialSummary {
        trial,
        trial_seed: derive_seed(cfg.seed, "trial", &[trial as u64]),
        final_accuracy: last.eval_accuracy_student,
        final_teacher_accuracy: last.eval_accuracy_teacher,
        best_accuracy: reports
            .iter()
            .map(|r| r.eval_accuracy_student)
            .fold(0.0, f64::max),
        rounds_to_threshold: cfg.metrics.accuracy_threshold.and_then(|t| {
            reports
                .iter()
                .position(|r| r.eval_accuracy_student >= t)
                .map(|i| i + 1)
        }),
        downlink_models: ledger.models(Direction::Downlink),
        downlink_bytes: ledger.bytes(Direction::Downlink),
        uplink_models: ledger.models(Direction::Uplink),
        uplink_bytes: ledger.bytes(Direction::Uplink),
        teacher_rounds: (cfg.variant.kind == VariantKind::Fedswitch)
            .then(|| decisions.iter().filter(|d| d.send_teacher).count()),
        steady_kl_ratio: (!ratios.is_empty())
            .then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
        trailing_window: window,
        stability: stability_stats(reports, window)?,
    })
}

pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialOutcome> {
    let (train, test) = load_datasets(cfg)?;
    run_trial_with_data(cfg, trial, train, test)
}

fn run_trial_with_data(
    cfg: &ExperimentConfig,
    trial: usize,
    train: Dataset,
    test: Dataset,
) -> Result<TrialOutcome> {
    let mut sim = build_simulation_with_data(cfg, trial, train, test)?;
    let reports = sim.run(cfg.training.rounds)?;
    let summary = summarize(cfg, trial, &reports, sim.log(), sim.switch_decisions())?;
    Ok(TrialOutcome {
        summary,
        reports,
        log: sim.log().clone(),
        decisions: sim.switch_decisions().to_vec(),
    })
}

/// Runs every trial (in parallel) without touching the filesystem.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<Vec<TrialOutcome>> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            run_trial_with_data(cfg, t, train.clone(), test.clone()).map_err(|e| Error::Trial {
                trial: t,
                source: Box::new(e),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub variant: VariantKind,
    pub dirichlet_alpha: f64,
    pub trials: Vec<TrialSummary>,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
    pub best_accuracy_mean: f64,
    pub final_teacher_accuracy_mean: Option<f64>,
    pub steady_kl_ratio_mean: Option<f64>,
    pub downlink_bytes_mean: f64,
    pub uplink_bytes_mean: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn mean_of_some(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize_experiment(
    cfg: &ExperimentConfig,
    outcomes: &[TrialOutcome],
) -> ExperimentSummary {
    let trials: Vec<TrialSummary> = outcomes.iter().map(|o| o.summary.clone()).collect();
    let finals: Vec<f64> = trials.iter().map(|t| t.final_accuracy).collect();
    let (final_accuracy_mean, final_accuracy_std) = mean_std(&finals);
    let n = trials.len().max(1) as f64;
    ExperimentSummary {
        variant: cfg.variant.kind,
        dirichlet_alpha: cfg.shard.dirichlet_alpha,
        final_accuracy_mean,
        final_accuracy_std,
        best_accuracy_mean: trials.iter().map(|t| t.best_accuracy).sum::<f64>() / n,
        final_teacher_accuracy_mean: mean_of_some(trials.iter().map(|t| t.final_teacher_accuracy)),
        steady_kl_ratio_mean: mean_of_some(trials.iter().map(|t| t.steady_kl_ratio)),
        downlink_bytes_mean: trials.iter().map(|t| t.downlink_bytes as f64).sum::<f64>() / n,
        uplink_bytes_mean: trials.iter().map(|t| t.uplink_bytes as f64).sum::<f64>() / n,
        trials,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Config(e.to_string()))
}

fn decisions_csv(decisions: &[SwitchDecision]) -> String {
    let mut out = String::from("round,dkl_T,dkl_S,send_teacher\n");
    for d in decisions {
        out.push_str(&format!(
            "{},{},{},{}\n",
            d.round, d.dkl_teacher, d.dkl_student, d.send_teacher
        ));
    }
    out
}

/// Writes the resolved config, per-trial round CSVs, transmission logs and
/// the summary document under `dir`.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    outcomes: &[TrialOutcome],
    dir: &Path,
) -> Result<ExperimentSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.resolved.toml"), &cfg.to_toml_string()?)?;
    for o in outcomes {
        let tdir = dir.join(format!("trial_{:03}", o.summary.trial));
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        write_file(&tdir.join("rounds.csv"), &rounds_csv(&o.reports))?;
        write_file(&tdir.join("transmissions.csv"), &o.log.to_csv_string())?;
        if cfg.variant.kind == VariantKind::Fedswitch {
            write_file(
                &tdir.join("switch_decisions.csv"),
                &decisions_csv(&o.decisions),
            )?;
        }
        write_file(&tdir.join("summary.json"), &to_json(&o.summary)?)?;
    }
    let summary = summarize_experiment(cfg, outcomes);
    write_file(&dir.join("summary.json"), &to_json(&summary)?)?;
    Ok(summary)
}

/// Runs all trials and writes results to `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    let outcomes = run_trials(cfg)?;
    write_outputs(cfg, &outcomes, &cfg.output)
}

pub const SWEEP_CSV_HEADER: &str = "variant,dirichlet_alpha,trials,final_mean,final_std,best_mean,teacher_final_mean,kl_ratio_mean,downlink_bytes_mean,uplink_bytes_mean";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn sweep_csv(cells: &[ExperimentSummary]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.variant,
            c.dirichlet_alpha,
            c.trials.len(),
            c.final_accuracy_mean,
            c.final_accuracy_std,
            c.best_accuracy_mean,
            fmt_opt(c.final_teacher_accuracy_mean),
            fmt_opt(c.steady_kl_ratio_mean),
            c.downlink_bytes_mean,
            c.uplink_bytes_mean,
        ));
    }
    out
}

/// Config for one sweep cell.
pub fn sweep_cell_config(
    cfg: &ExperimentConfig,
    alpha: f64,
    kind: VariantKind,
) -> ExperimentConfig {
    let mut cell = cfg.clone();
    cell.shard.dirichlet_alpha = alpha;
    cell.variant.kind = kind;
    cell.sweep = None;
    cell.output = cfg.output.join(format!("{kind}_alpha{alpha}"));
    cell
}

/// Cartesian product `variants x alphas`; each cell writes its own output
/// tree and one row of `sweep.csv`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    alphas: &[f64],
    variants: &[VariantKind],
) -> Result<Vec<ExperimentSummary>> {
    validate_sweep(alphas, variants)?;
    cfg.validate()?;
    let mut cells = Vec::with_capacity(alphas.len() * variants.len());
    for &kind in variants {
        for &alpha in alphas {
            let cell = sweep_cell_config(cfg, alpha, kind);
            cells.push(run_experiment(&cell)?);
        }
    }
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    write_file(&cfg.output.join("sweep.csv"), &sweep_csv(&cells))?;
    Ok(cells)
}
