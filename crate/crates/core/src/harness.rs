//! Experiment configuration, orchestration and result files.
//!
//! A run writes four files into `{out}/{name}/`:
//!
//! | file           | contents                                                    |
//! |----------------|-------------------------------------------------------------|
//! | `results.csv`  | `round,test_accuracy,ece,sce,mean_beta,wall_ms`             |
//! | `bins.csv`     | `lower,upper,count,accuracy,confidence,gap` (final model)   |
//! | `summary.json` | final metrics, temperature scaling, echoed config           |
//! | `model.json`   | versioned parameter dump readable by [`load_model`]         |
//!
//! Every byte is a function of the config alone unless wall-clock timing is
//! requested, in which case only the `wall_ms` column varies.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{
    derive_seed, BetaRule, CalibrationPolicy, FlAlgorithm, LocalTraining, RoundRecord, SimulationConfig,
    Simulator,
};
use crate::error::{FedCalError, Result};
use crate::losses::{AuxKind, LossKind};
use crate::metrics::{
    reliability_export, report_from_probs, scaled_nll, temperature_scale, CalibrationReport, ReliabilityRow,
};
use crate::model::{predict_logits, softmax, DenseLayer, ModelSpec, ParameterSet, SgdConfig};
use crate::partition::{self, Dataset, PartitionPlan, PartitionScheme};
use crate::similarity::SimKind;

pub const SEED_ENV: &str = "FEDCAL_SEED";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub const RESULTS_FILE: &str = "results.csv";
pub const BINS_FILE: &str = "bins.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.json";
pub const COMPARE_FILE: &str = "compare.csv";
pub const PARTITION_FILE: &str = "partition.csv";

const TRAIN_DATA_STREAM: u64 = 1;
const TEST_DATA_STREAM: u64 = 2;
const PARTITION_STREAM: u64 = 3;
const HOLDOUT_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    Iid,
    Dirichlet { alpha: f64 },
}

impl PartitionConfig {
    fn scheme(self) -> PartitionScheme {
        match self {
            PartitionConfig::Iid => PartitionScheme::Iid,
            PartitionConfig::Dirichlet { alpha } => PartitionScheme::Dirichlet { alpha },
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}
fn default_algorithm() -> FlAlgorithm {
    FlAlgorithm::FedAvg
}
fn default_policy() -> CalibrationPolicy {
    CalibrationPolicy::uncalibrated()
}
fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    64
}
fn default_lr() -> f64 {
    SgdConfig::default().lr
}
fn default_momentum() -> f64 {
    SgdConfig::default().momentum
}
fn default_weight_decay() -> f64 {
    SgdConfig::default().weight_decay
}
fn default_participation() -> f64 {
    1.0
}
fn default_bins() -> usize {
    crate::metrics::DEFAULT_BINS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub clients: usize,
    pub partition: PartitionConfig,
    #[serde(default = "default_algorithm")]
    pub algorithm: FlAlgorithm,
    #[serde(default = "default_policy")]
    pub calibration: CalibrationPolicy,
    /// Hidden layer widths; input and output come from the dataset.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_participation")]
    pub participation: f64,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Fraction of the test split held out for fitting a temperature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts_holdout: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FedCalError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces the seed with the value of `FEDCAL_SEED`, when set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| FedCalError::config(SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(FedCalError::config("name", "must be a non-empty file name"));
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
            } => {
                if *classes < 2 {
                    return Err(FedCalError::config("dataset.classes", "must be >= 2"));
                }
                if *dim < 2 {
                    return Err(FedCalError::config("dataset.dim", "must be >= 2"));
                }
                if *train_per_class == 0 {
                    return Err(FedCalError::config("dataset.train_per_class", "must be >= 1"));
                }
                if *test_per_class == 0 {
                    return Err(FedCalError::config("dataset.test_per_class", "must be >= 1"));
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return Err(FedCalError::config("dataset.spread", "must be finite and >= 0"));
                }
            }
            DatasetConfig::Idx { .. } => {}
        }
        if self.clients == 0 {
            return Err(FedCalError::config("clients", "must be >= 1"));
        }
        if let PartitionConfig::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(FedCalError::config("partition.alpha", "must be finite and > 0"));
            }
        }
        if self.hidden.contains(&0) {
            return Err(FedCalError::config("hidden", "widths must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(FedCalError::config("rounds", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(FedCalError::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(FedCalError::config("batch_size", "must be >= 1"));
        }
        self.sgd().validate()?;
        self.algorithm.validate()?;
        self.calibration.validate()?;
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(FedCalError::config("participation", "must be in (0, 1]"));
        }
        if self.bins == 0 {
            return Err(FedCalError::config("bins", "must be >= 1"));
        }
        if let Some(f) = self.ts_holdout {
            if !(f > 0.0 && f < 1.0) {
                return Err(FedCalError::config("ts_holdout", "must be in (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn model_spec(&self, input_dim: usize, classes: usize) -> Result<ModelSpec> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend(&self.hidden);
        sizes.push(classes);
        ModelSpec::new(sizes)
    }
}

/// Train split, partition and the (optionally divided) test split of a config.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Dataset,
    /// Test samples used for reported metrics.
    pub eval: Dataset,
    /// Test samples reserved for fitting a temperature.
    pub holdout: Option<Dataset>,
    pub plan: PartitionPlan,
}

pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &config.dataset {
        DatasetConfig::Synthetic {
            classes,
            dim,
            train_per_class,
            test_per_class,
            spread,
        } => Ok((
            partition::synth_gaussian(
                *classes,
                *dim,
                *train_per_class,
                *spread,
                derive_seed(config.seed, 0, TRAIN_DATA_STREAM),
            )?,
            partition::synth_gaussian(
                *classes,
                *dim,
                *test_per_class,
                *spread,
                derive_seed(config.seed, 0, TEST_DATA_STREAM),
            )?,
        )),
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            let mut train = partition::load_idx(train_images, train_labels, *train_limit)?;
            let mut test = partition::load_idx(test_images, test_labels, *test_limit)?;
            let k = train.num_classes.max(test.num_classes);
            train.num_classes = k;
            test.num_classes = k;
            Ok((train, test))
        }
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<ExperimentData> {
    let (train, test) = load_datasets(config)?;
    if config.clients > train.len() {
        return Err(FedCalError::config(
            "clients",
            format!("{} clients but only {} training samples", config.clients, train.len()),
        ));
    }
    let plan = partition::partition(
        &train,
        config.clients,
        config.partition.scheme(),
        derive_seed(config.seed, 0, PARTITION_STREAM),
    )?;
    let (eval, holdout) = match config.ts_holdout {
        None => (test, None),
        Some(fraction) => {
            if test.len() < 2 {
                return Err(FedCalError::config("ts_holdout", "test split too small to divide"));
            }
            let mut order: Vec<usize> = (0..test.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0, HOLDOUT_STREAM)));
            let k = ((fraction * test.len() as f64).round() as usize).clamp(1, test.len() - 1);
            let (held, rest) = order.split_at(k);
            let (mut held, mut rest) = (held.to_vec(), rest.to_vec());
            held.sort_unstable();
            rest.sort_unstable();
            (test.subset(&rest), Some(test.subset(&held)))
        }
    };
    Ok(ExperimentData {
        train,
        eval,
        holdout,
        plan,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSummary {
    pub temperature: f64,
    pub holdout_nll_before: f64,
    pub holdout_nll_after: f64,
    /// Metrics on the evaluation split after dividing logits by `temperature`.
    pub report: CalibrationReport,
}

#[derive(Clone, Debug)]
pub struct ResultsBundle {
    pub config: ExperimentConfig,
    pub history: Vec<RoundRecord>,
    pub final_report: CalibrationReport,
    pub temperature: Option<TemperatureSummary>,
    pub reliability: Vec<ReliabilityRow>,
    pub model: ParameterSet,
    pub spec: ModelSpec,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub threads: usize,
    pub wall_clock: bool,
}

pub fn simulation_config(config: &ExperimentConfig, data: &ExperimentData, options: RunOptions) -> Result<SimulationConfig> {
    Ok(SimulationConfig {
        spec: config.model_spec(data.train.dim(), data.train.num_classes)?,
        algorithm: config.algorithm,
        policy: config.calibration,
        sgd: config.sgd(),
        local: LocalTraining {
            epochs: config.epochs,
            batch_size: config.batch_size,
        },
        rounds: config.rounds,
        participation: config.participation,
        bins: config.bins,
        seed: config.seed,
        threads: options.threads.max(1),
        measure_wall_clock: options.wall_clock,
    })
}

pub fn run_experiment(config: &ExperimentConfig, options: RunOptions) -> Result<ResultsBundle> {
    config.validate()?;
    let data = prepare(config)?;
    let sim = simulation_config(config, &data, options)?;
    let spec = sim.spec.clone();
    let outcome = Simulator::new(sim, &data.train, &data.eval, &data.plan).run()?;
    let model = outcome.final_state.global.clone();
    let temperature = match &data.holdout {
        None => None,
        Some(holdout) => Some(fit_temperature(&model, holdout, &data.eval, config.bins)?),
    };
    Ok(ResultsBundle {
        config: config.clone(),
        history: outcome.history,
        reliability: reliability_export(&outcome.final_report.bins),
        final_report: outcome.final_report,
        temperature,
        model,
        spec,
    })
}

/// Fits a temperature on `holdout` and reports its effect on `eval`.
pub fn fit_temperature(
    model: &ParameterSet,
    holdout: &Dataset,
    eval: &Dataset,
    bins: usize,
) -> Result<TemperatureSummary> {
    let held_logits = predict_logits(model, holdout.features.view())?;
    let temperature = temperature_scale(&held_logits, &holdout.labels);
    let eval_logits = predict_logits(model, eval.features.view())?;
    let scaled = softmax(&eval_logits.mapv(|z| z / temperature));
    Ok(TemperatureSummary {
        temperature,
        holdout_nll_before: scaled_nll(&held_logits, &holdout.labels, 1.0),
        holdout_nll_after: scaled_nll(&held_logits, &holdout.labels, temperature),
        report: report_from_probs(&scaled, &eval.labels, bins),
    })
}

fn write_csv<W: std::io::Write>(writer: W, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| FedCalError::io("<csv>", e))?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(&mut buf, header, rows)?;
    Ok(buf)
}

pub fn results_csv(history: &[RoundRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        &["round", "test_accuracy", "ece", "sce", "mean_beta", "wall_ms"],
        history.iter().map(|r| {
            vec![
                r.round.to_string(),
                r.test_accuracy.to_string(),
                r.ece.to_string(),
                r.sce.to_string(),
                r.mean_beta.to_string(),
                r.wall_ms.to_string(),
            ]
        }),
    )
}

pub fn bins_csv(rows: &[ReliabilityRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &["lower", "upper", "count", "accuracy", "confidence", "gap"],
        rows.iter().map(|r| {
            vec![
                r.lower.to_string(),
                r.upper.to_string(),
                r.count.to_string(),
                r.accuracy.to_string(),
                r.confidence.to_string(),
                r.gap.to_string(),
            ]
        }),
    )
}

#[derive(Serialize)]
struct Summary<'a> {
    name: &'a str,
    rounds: usize,
    #[serde(rename = "final")]
    final_report: &'a CalibrationReport,
    temperature_scaling: Option<&'a TemperatureSummary>,
    train_loss: Vec<f64>,
    config: &'a ExperimentConfig,
}

pub fn summary_json(bundle: &ResultsBundle) -> String {
    let summary = Summary {
        name: &bundle.config.name,
        rounds: bundle.history.len(),
        final_report: &bundle.final_report,
        temperature_scaling: bundle.temperature.as_ref(),
        train_loss: bundle.history.iter().map(|r| r.train_loss).collect(),
        config: &bundle.config,
    };
    serde_json::to_string_pretty(&summary).expect("summary serializes")
}

/// Reads back the echoed config from a `summary.json`.
pub fn config_from_summary(text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text)?;
    let cfg = value
        .get("config")
        .cloned()
        .ok_or_else(|| FedCalError::config("config", "summary has no config echo"))?;
    let cfg: ExperimentConfig = serde_json::from_value(cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| FedCalError::io(path, e))
}

fn ensure_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.join(RESULTS_FILE).exists() && !force {
        return Err(FedCalError::OutputExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(|e| FedCalError::io(dir, e))
}

pub fn write_bundle(bundle: &ResultsBundle, dir: &Path, force: bool) -> Result<()> {
    ensure_dir(dir, force)?;
    write_file(&dir.join(RESULTS_FILE), &results_csv(&bundle.history)?)?;
    write_file(&dir.join(BINS_FILE), &bins_csv(&bundle.reliability)?)?;
    write_file(&dir.join(SUMMARY_FILE), summary_json(bundle).as_bytes())?;
    write_file(&dir.join(MODEL_FILE), model_json(&bundle.spec, &bundle.model).as_bytes())?;
    Ok(())
}

/// Runs a config and writes its bundle to `{out}/{name}/`.
pub fn cmd_run(config: &ExperimentConfig, out: &Path, options: RunOptions, force: bool) -> Result<(PathBuf, ResultsBundle)> {
    let bundle = run_experiment(config, options)?;
    let dir = out.join(&config.name);
    write_bundle(&bundle, &dir, force)?;
    Ok((dir, bundle))
}

#[derive(Serialize, Deserialize)]
struct LayerDump {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDump {
    format_version: u32,
    layer_sizes: Vec<usize>,
    layers: Vec<LayerDump>,
}

pub fn model_json(spec: &ModelSpec, params: &ParameterSet) -> String {
    let dump = ModelDump {
        format_version: MODEL_FORMAT_VERSION,
        layer_sizes: spec.layer_sizes().to_vec(),
        layers: params
            .layers()
            .iter()
            .map(|l| LayerDump {
                rows: l.weights.nrows(),
                cols: l.weights.ncols(),
                weights: l.weights.iter().copied().collect(),
                bias: l.bias.to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&dump).expect("model serializes")
}

pub fn parse_model(text: &str) -> Result<(ModelSpec, ParameterSet)> {
    let dump: ModelDump =
        serde_json::from_str(text).map_err(|e| FedCalError::ModelFile(format!("cannot parse model file: {e}")))?;
    if dump.format_version != MODEL_FORMAT_VERSION {
        return Err(FedCalError::ModelFile(format!(
            "unsupported format_version {}, expected {MODEL_FORMAT_VERSION}",
            dump.format_version
        )));
    }
    let spec = ModelSpec::new(dump.layer_sizes).map_err(|e| FedCalError::ModelFile(e.to_string()))?;
    if dump.layers.len() != spec.num_layers() {
        return Err(FedCalError::ModelFile(format!(
            "{} layers listed but layer_sizes implies {}",
            dump.layers.len(),
            spec.num_layers()
        )));
    }
    let mut layers = Vec::with_capacity(dump.layers.len());
    for (l, (layer, w)) in dump.layers.into_iter().zip(spec.layer_sizes().windows(2)).enumerate() {
        if layer.rows != w[1] || layer.cols != w[0] || layer.bias.len() != w[1] {
            return Err(FedCalError::ModelFile(format!(
                "layer {l}: expected {}x{} weights and {} biases, got {}x{} and {}",
                w[1],
                w[0],
                w[1],
                layer.rows,
                layer.cols,
                layer.bias.len()
            )));
        }
        let weights = Array2::from_shape_vec((layer.rows, layer.cols), layer.weights)
            .map_err(|e| FedCalError::ModelFile(format!("layer {l}: {e}")))?;
        layers.push(DenseLayer {
            weights,
            bias: Array1::from(layer.bias),
        });
    }
    let params = ParameterSet::from_layers(layers);
    if !params.is_finite() {
        return Err(FedCalError::ModelFile("non-finite parameter".into()));
    }
    Ok((spec, params))
}

pub fn load_model(path: &Path) -> Result<(ModelSpec, ParameterSet)> {
    let text = fs::read_to_string(path).map_err(|e| FedCalError::io(path, e))?;
    parse_model(&text)
}

/// Evaluates a stored model on the evaluation split of `config`.
pub fn cmd_eval(model_path: &Path, config: &ExperimentConfig) -> Result<CalibrationReport> {
    let (spec, params) = load_model(model_path)?;
    let data = prepare(config)?;
    if data.eval.dim() != spec.input_dim() {
        return Err(FedCalError::DimensionMismatch {
            context: "model input vs dataset features",
            expected: spec.input_dim(),
            actual: data.eval.dim(),
        });
    }
    if data.eval.num_classes > spec.num_classes() {
        return Err(FedCalError::DimensionMismatch {
            context: "model outputs vs dataset classes",
            expected: spec.num_classes(),
            actual: data.eval.num_classes,
        });
    }
    crate::metrics::evaluate(&params, &data.eval, config.bins)
}

fn similarity_of(rule: &BetaRule) -> SimKind {
    match *rule {
        BetaRule::Nucfl { sim } | BetaRule::Reversed { sim, .. } => sim,
        BetaRule::Fixed { .. } => SimKind::Cosine,
    }
}

fn unknown_value(axis: &str, value: &str) -> FedCalError {
    FedCalError::config(axis, format!("unsupported value {value:?}"))
}

/// Returns `config` with one field replaced. Named axes (`beta_rule`, `sim`,
/// `aux`, `algorithm`, `task`, `partition`) take keywords; anything else is a
/// dotted path into the config JSON whose value is parsed as JSON when possible.
pub fn apply_override(config: &ExperimentConfig, axis: &str, value: &str) -> Result<ExperimentConfig> {
    let mut cfg = config.clone();
    match axis {
        "beta_rule" => {
            let sim = similarity_of(&cfg.calibration.beta_rule);
            let beta = match cfg.calibration.beta_rule {
                BetaRule::Fixed { beta } if beta > 0.0 => beta,
                _ => 1.0,
            };
            let cap = match cfg.calibration.beta_rule {
                BetaRule::Reversed { cap, .. } => cap,
                _ => 10.0,
            };
            cfg.calibration.beta_rule = match value {
                "fixed" => BetaRule::Fixed { beta },
                "nucfl" => BetaRule::Nucfl { sim },
                "reversed" => BetaRule::Reversed { sim, cap },
                _ => return Err(unknown_value(axis, value)),
            };
        }
        "sim" => {
            let sim = SimKind::parse(value).ok_or_else(|| unknown_value(axis, value))?;
            cfg.calibration.beta_rule = match cfg.calibration.beta_rule {
                BetaRule::Nucfl { .. } => BetaRule::Nucfl { sim },
                BetaRule::Reversed { cap, .. } => BetaRule::Reversed { sim, cap },
                BetaRule::Fixed { .. } => {
                    return Err(FedCalError::config(
                        "sim",
                        "sweeping the similarity needs a nucfl or reversed beta rule",
                    ))
                }
            };
        }
        "aux" => {
            cfg.calibration.aux = match value {
                "none" => AuxKind::None,
                "dca" => AuxKind::Dca,
                "mdca" => AuxKind::Mdca,
                _ => return Err(unknown_value(axis, value)),
            };
        }
        "task" => {
            cfg.calibration.task = match value {
                "cross_entropy" | "ce" => LossKind::CrossEntropy,
                "focal" => LossKind::Focal { gamma: 2.0 },
                "label_smoothing" | "ls" => LossKind::LabelSmoothing { alpha: 0.1 },
                "brier" => LossKind::Brier,
                _ => return Err(unknown_value(axis, value)),
            };
        }
        "algorithm" => {
            cfg.algorithm = match value {
                "fedavg" => FlAlgorithm::FedAvg,
                "fedprox" => FlAlgorithm::FedProx { mu: 1.0 },
                "scaffold" => FlAlgorithm::Scaffold,
                "feddyn" => FlAlgorithm::FedDyn { alpha: 0.1 },
                "fednova" => FlAlgorithm::FedNova,
                _ => return Err(unknown_value(axis, value)),
            };
        }
        "partition" => {
            cfg.partition = match value {
                "iid" => PartitionConfig::Iid,
                v => match v.strip_prefix("dirichlet:").unwrap_or(v).parse::<f64>() {
                    Ok(alpha) => PartitionConfig::Dirichlet { alpha },
                    Err(_) => return Err(unknown_value(axis, value)),
                },
            };
        }
        path => {
            let mut json = serde_json::to_value(&cfg)?;
            let mut slot = &mut json;
            let parts: Vec<&str> = path.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| FedCalError::UnknownAxis(path.into()))?;
                let optional_leaf = i + 1 == parts.len() && path == "ts_holdout";
                if !obj.contains_key(*part) && !optional_leaf {
                    return Err(FedCalError::UnknownAxis(path.into()));
                }
                slot = obj.entry(part.to_string()).or_insert(Value::Null);
            }
            *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.into()));
            cfg = serde_json::from_value(json).map_err(|e| FedCalError::config(path, e.to_string()))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub variant: String,
    pub accuracy: f64,
    pub ece: f64,
    pub sce: f64,
}

/// Runs one variant per value under `{out}/{name}/{axis}={value}/` and writes
/// `{out}/{name}/compare.csv`.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    axis: &str,
    values: &[String],
    out: &Path,
    options: RunOptions,
    force: bool,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(FedCalError::config("values", "sweep needs at least one value"));
    }
    // Validate every variant up front so a bad value fails before any run.
    let variants = values
        .iter()
        .map(|v| apply_override(config, axis, v).map(|c| (v.clone(), c)))
        .collect::<Result<Vec<_>>>()?;
    let root = out.join(&config.name);
    let mut rows = Vec::with_capacity(variants.len());
    for (value, variant) in variants {
        let name = format!("{}={}", sanitize(axis), sanitize(&value));
        let bundle = run_experiment(&variant, options)?;
        write_bundle(&bundle, &root.join(&name), force)?;
        rows.push(SweepRow {
            variant: name,
            accuracy: bundle.final_report.accuracy,
            ece: bundle.final_report.ece,
            sce: bundle.final_report.sce,
        });
    }
    let bytes = csv_bytes(
        &["variant", "final_accuracy", "ece", "sce"],
        rows.iter().map(|r| {
            vec![
                r.variant.clone(),
                r.accuracy.to_string(),
                r.ece.to_string(),
                r.sce.to_string(),
            ]
        }),
    )?;
    write_file(&root.join(COMPARE_FILE), &bytes)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionRow {
    pub client: usize,
    pub samples: usize,
    pub class_counts: Vec<usize>,
    pub max_class_share: f64,
}

pub fn partition_stats(config: &ExperimentConfig) -> Result<Vec<PartitionRow>> {
    let data = prepare(config)?;
    Ok(data
        .plan
        .clients
        .iter()
        .enumerate()
        .map(|(client, idx)| {
            let class_counts = data.train.class_counts(idx);
            let max = class_counts.iter().copied().max().unwrap_or(0);
            PartitionRow {
                client,
                samples: idx.len(),
                max_class_share: max as f64 / idx.len() as f64,
                class_counts,
            }
        })
        .collect())
}

pub fn partition_csv(rows: &[PartitionRow]) -> Result<Vec<u8>> {
    let k = rows.first().map_or(0, |r| r.class_counts.len());
    let class_headers: Vec<String> = (0..k).map(|j| format!("class_{j}")).collect();
    let mut header = vec!["client", "samples"];
    header.extend(class_headers.iter().map(String::as_str));
    header.push("max_class_share");
    csv_bytes(
        &header,
        rows.iter().map(|r| {
            let mut row = vec![r.client.to_string(), r.samples.to_string()];
            row.extend(r.class_counts.iter().map(ToString::to_string));
            row.push(r.max_class_share.to_string());
            row
        }),
    )
}

pub fn cmd_partition_stats(config: &ExperimentConfig, out: &Path) -> Result<(PathBuf, Vec<PartitionRow>)> {
    let rows = partition_stats(config)?;
    fs::create_dir_all(out).map_err(|e| FedCalError::io(out, e))?;
    let path = out.join(PARTITION_FILE);
    write_file(&path, &partition_csv(&rows)?)?;
    Ok((path, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "name": "small",
                "seed": 3,
                "dataset": {"kind": "synthetic", "classes": 3, "dim": 4,
                            "train_per_class": 20, "test_per_class": 10, "spread": 0.7},
                "clients": 4,
                "partition": {"kind": "dirichlet", "alpha": 0.5},
                "calibration": {"aux": "dca", "beta_rule": {"kind": "nucfl", "sim": "cosine"}},
                "hidden": [8],
                "rounds": 3,
                "epochs": 2,
                "batch_size": 8,
                "lr": 0.05
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn config_defaults_and_round_trip() {
        let cfg = small_config();
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.bins, 20);
        assert_eq!(cfg.participation, 1.0);
        assert_eq!(cfg.calibration.task, LossKind::CrossEntropy);
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn validation_names_the_field() {
        let text = small_config().to_json().replace("\"alpha\": 0.5", "\"alpha\": 0.0");
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("partition.alpha"), "{err}");
        let text = small_config().to_json().replace("\"rounds\": 3", "\"rounds\": 0");
        assert!(ExperimentConfig::from_json(&text).unwrap_err().to_string().contains("rounds"));
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn seed_override() {
        let mut cfg = small_config();
        cfg.apply_seed_override(None).unwrap();
        assert_eq!(cfg.seed, 3);
        cfg.apply_seed_override(Some("42")).unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(cfg.apply_seed_override(Some("x")).is_err());
    }

    #[test]
    fn overrides() {
        let cfg = small_config();
        let c = apply_override(&cfg, "beta_rule", "reversed").unwrap();
        assert_eq!(c.calibration.beta_rule, BetaRule::Reversed { sim: SimKind::Cosine, cap: 10.0 });
        let c = apply_override(&cfg, "sim", "rbfcka").unwrap();
        assert_eq!(c.calibration.beta_rule, BetaRule::Nucfl { sim: SimKind::RbfCka });
        let c = apply_override(&cfg, "partition.alpha", "5").unwrap();
        assert_eq!(c.partition, PartitionConfig::Dirichlet { alpha: 5.0 });
        let c = apply_override(&cfg, "ts_holdout", "0.5").unwrap();
        assert_eq!(c.ts_holdout, Some(0.5));
        assert!(matches!(apply_override(&cfg, "nonsense", "1"), Err(FedCalError::UnknownAxis(_))));
        assert!(apply_override(&cfg, "partition.alpha", "-1").is_err());
        assert!(apply_override(&cfg, "algorithm", "fedsgd").is_err());
    }

    #[test]
    fn holdout_split_is_disjoint() {
        let mut cfg = small_config();
        cfg.ts_holdout = Some(0.4);
        let data = prepare(&cfg).unwrap();
        assert_eq!(data.holdout.as_ref().unwrap().len(), 12);
        assert_eq!(data.eval.len(), 18);
    }

    #[test]
    fn model_dump_round_trip_and_errors() {
        let spec = ModelSpec::new(vec![3, 4, 2]).unwrap();
        let params = crate::model::init_model(&spec, 7);
        let text = model_json(&spec, &params);
        let (spec2, params2) = parse_model(&text).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(params2, params);
        assert!(matches!(parse_model(&text[..text.len() / 2]), Err(FedCalError::ModelFile(_))));
        let bumped = text.replace("\"format_version\":1", "\"format_version\":2");
        let err = parse_model(&bumped).unwrap_err().to_string();
        assert!(err.contains("format_version"), "{err}");
    }

    #[test]
    fn csv_headers() {
        let bytes = results_csv(&[]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "round,test_accuracy,ece,sce,mean_beta,wall_ms\n");
        let bytes = bins_csv(&[]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "lower,upper,count,accuracy,confidence,gap\n");
    }
}
