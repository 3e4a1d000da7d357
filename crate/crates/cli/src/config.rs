use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};

use layerwise_core::data::{self, CIFAR_CHANNELS, CIFAR_SIDE, NUM_CLASSES};
use layerwise_core::nn::{build_cnn, build_image_mlp, build_standard_cnn};
use layerwise_core::trainers::{RuleKind, SnapshotMode, TrainerConfig};
use layerwise_core::{Activation, Loss, Network, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn input_shape(self) -> Vec<usize> {
        match self {
            DatasetKind::Mnist => vec![1, 28, 28],
            DatasetKind::Cifar10 => vec![CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar" => Ok(DatasetKind::Cifar10),
            other => bail!("unknown dataset '{other}' (expected mnist or cifar10)"),
        }
    }
}

/// `cnn`, `toy_cnn`, or `mlp:<w0>,<w1>,...` where `w0` is the
/// flattened input size and the last width is the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelSpec {
    StandardCnn,
    /// 1x6x6 input, two 3x3 filters, 2x2 max-pool, 4 hidden units, 3 classes.
    ToyCnn,
    Mlp(Vec<usize>),
}

impl ModelSpec {
    pub fn build(&self, input_shape: &[usize], hidden_activation: Activation, seed: u64) -> anyhow::Result<Network> {
        let flat: usize = input_shape.iter().product();
        Ok(match self {
            ModelSpec::StandardCnn => build_standard_cnn(input_shape, NUM_CLASSES, seed)?,
            ModelSpec::ToyCnn => {
                if input_shape != [1, 6, 6] {
                    bail!("toy_cnn takes 1x6x6 inputs, not {input_shape:?}");
                }
                build_cnn(input_shape, &[2], 4, 3, hidden_activation, seed)?
            }
            ModelSpec::Mlp(dims) => {
                if dims.first() != Some(&flat) {
                    bail!("model {self} starts at width {:?} but samples have {flat} values", dims.first());
                }
                build_image_mlp(input_shape, &dims[1..], hidden_activation, seed)?
            }
        })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::StandardCnn => f.write_str("cnn"),
            ModelSpec::ToyCnn => f.write_str("toy_cnn"),
            ModelSpec::Mlp(dims) => {
                let dims: Vec<String> = dims.iter().map(usize::to_string).collect();
                write!(f, "mlp:{}", dims.join(","))
            }
        }
    }
}

impl FromStr for ModelSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "cnn" => Ok(ModelSpec::StandardCnn),
            "toy_cnn" => Ok(ModelSpec::ToyCnn),
            _ => {
                let Some(dims) = s.strip_prefix("mlp:") else {
                    bail!("unknown model '{s}' (expected cnn, toy_cnn or mlp:<widths>)");
                };
                let dims = dims
                    .split(',')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .with_context(|| format!("bad MLP widths in '{s}'"))?;
                if dims.len() < 2 || dims.contains(&0) {
                    bail!("an MLP needs at least two positive widths, got '{s}'");
                }
                Ok(ModelSpec::Mlp(dims))
            }
        }
    }
}

impl TryFrom<String> for ModelSpec {
    type Error = anyhow::Error;

    fn try_from(s: String) -> anyhow::Result<Self> {
        s.parse()
    }
}

impl From<ModelSpec> for String {
    fn from(m: ModelSpec) -> String {
        m.to_string()
    }
}

/// Everything a `train` run depends on. Serialized verbatim into the run
/// summary, which can be fed back in with `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Falls back to `$LAYERWISE_DATA_DIR`, then `./data`.
    pub data_dir: Option<PathBuf>,
    pub model: ModelSpec,
    pub activation: Activation,
    pub rule: RuleKind,
    pub snapshot_mode: SnapshotMode,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub layer_lr_scale: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub patience: Option<usize>,
    pub loss: Loss,
    /// Hold out this fraction of the training set for validation instead
    /// of validating on the test set.
    pub val_split: Option<f64>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainerConfig::default();
        ExperimentConfig {
            dataset: DatasetKind::Mnist,
            data_dir: None,
            model: ModelSpec::Mlp(vec![784, 128, 10]),
            activation: Activation::Relu,
            rule: t.rule,
            snapshot_mode: t.snapshot_mode,
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            layer_lr_scale: t.layer_lr_scale,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            patience: t.patience,
            loss: t.loss,
            val_split: None,
            train_limit: None,
            test_limit: None,
            out_dir: PathBuf::from("runs/latest"),
        }
    }
}

impl ExperimentConfig {
    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            rule: self.rule,
            snapshot_mode: self.snapshot_mode,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            layer_lr_scale: self.layer_lr_scale.clone(),
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            patience: self.patience,
            loss: self.loss,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(data::DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn build_model(&self) -> anyhow::Result<Network> {
        self.model.build(&self.dataset.input_shape(), self.activation, self.seed)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.trainer_config().validate()?;
        if let Some(r) = self.val_split {
            if !(r > 0.0 && r < 1.0) {
                bail!("val_split must lie strictly between 0 and 1, got {r}");
            }
        }
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            bail!("sample limits must be positive");
        }
        let net = self.build_model()?;
        if net.output_len() != NUM_CLASSES {
            bail!("model {} has {} outputs, {} has {NUM_CLASSES} classes", self.model, net.output_len(), self.dataset.name());
        }
        Ok(())
    }

    /// Reads a config file, or the `config` object of a run summary.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if value.get("schema_version").is_some() {
            if let Some(inner) = value.get_mut("config") {
                value = inner.take();
            }
        }
        serde_json::from_value(value).with_context(|| format!("invalid config in {}", path.display()))
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| e.to_string()))
        .collect()
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    parse_list(s)
}

/// Flags shared by `train` and `compare`; each one overrides the config
/// file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON config file (a previous run's summary.json also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mnist | cifar10
    #[arg(long)]
    pub dataset: Option<DatasetKind>,
    /// cnn | toy_cnn | mlp:<w0>,<w1>,...
    #[arg(long)]
    pub model: Option<ModelSpec>,
    /// Hidden activation: relu | sigmoid | tanh | identity
    #[arg(long)]
    pub activation: Option<Activation>,
    /// bp | dfa | layerwise
    #[arg(long)]
    pub rule: Option<RuleKind>,
    /// Layer-wise snapshot mode: pre | post
    #[arg(long)]
    pub mode: Option<SnapshotMode>,
    /// sgd | adam
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated multipliers, one per parameterized layer.
    #[arg(long)]
    pub layer_lr_scale: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs without validation improvement before stopping.
    #[arg(long, conflicts_with = "no_early_stop")]
    pub patience: Option<usize>,
    #[arg(long)]
    pub no_early_stop: bool,
    /// Validate on this fraction of the training set instead of the test set.
    #[arg(long)]
    pub val_split: Option<f64>,
    /// Use only the first N training samples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    pub test_limit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = &self.$flag {
                    c.$field = v.clone();
                }
            };
        }
        set!(dataset => dataset);
        set!(model => model);
        set!(activation => activation);
        set!(rule => rule);
        set!(mode => snapshot_mode);
        set!(optimizer => optimizer);
        set!(lr => learning_rate);
        if let Some(list) = &self.layer_lr_scale {
            c.layer_lr_scale = parse_f64_list(list).map_err(|e| anyhow::anyhow!("--layer-lr-scale: {e}"))?;
        }
        set!(batch_size => batch_size);
        set!(epochs => epochs);
        set!(seed => seed);
        set!(out => out_dir);
        if self.patience.is_some() {
            c.patience = self.patience;
        }
        if self.no_early_stop {
            c.patience = None;
        }
        if self.val_split.is_some() {
            c.val_split = self.val_split;
        }
        if self.train_limit.is_some() {
            c.train_limit = self.train_limit;
        }
        if self.test_limit.is_some() {
            c.test_limit = self.test_limit;
        }
        if self.data_dir.is_some() {
            c.data_dir = self.data_dir.clone();
        }
        // A model written for MNIST widths would not fit CIFAR, so switching
        // dataset alone keeps MLPs usable by resizing the input width.
        if let (Some(_), None, ModelSpec::Mlp(dims)) = (&self.dataset, &self.model, &mut c.model) {
            dims[0] = c.dataset.input_shape().iter().product();
        }
        c.validate()?;
        Ok(c)
    }
}
