use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{
    backprop_sweep, dfa_sweep, layerwise_instant_sweep, FeedbackMatrices, LearningRate, Loss,
    Optimizer, OptimizerKind,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{forward_pass, Network};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Backprop,
    Dfa,
    LayerwiseInstant,
}

impl RuleKind {
    pub fn label(self) -> &'static str {
        match self {
            RuleKind::Backprop => "bp",
            RuleKind::Dfa => "dfa",
            RuleKind::LayerwiseInstant => "layerwise",
        }
    }
}

impl std::str::FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bp" | "backprop" => Ok(RuleKind::Backprop),
            "dfa" => Ok(RuleKind::Dfa),
            "layerwise" | "layerwise_instant" | "instant" => Ok(RuleKind::LayerwiseInstant),
            other => Err(Error::Config(format!("unknown rule '{other}'"))),
        }
    }
}

/// Which `W_{l+1}` the layer-wise rule reads when computing `delta_l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotMode {
    /// The weights layer `l+1` already committed during this sweep.
    #[default]
    PostUpdate,
    /// The weights as they were before the sweep started.
    PreUpdate,
}

impl std::str::FromStr for SnapshotMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "post" | "post_update" => Ok(SnapshotMode::PostUpdate),
            "pre" | "pre_update" => Ok(SnapshotMode::PreUpdate),
            other => Err(Error::Config(format!("unknown snapshot mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub rule: RuleKind,
    #[serde(default)]
    pub snapshot_mode: SnapshotMode,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Multipliers on `learning_rate`, one per parameterized layer.
    #[serde(default)]
    pub layer_lr_scale: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a validation-accuracy
    /// improvement; `None` disables early stopping.
    pub patience: Option<usize>,
    #[serde(default)]
    pub loss: Loss,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            rule: RuleKind::LayerwiseInstant,
            snapshot_mode: SnapshotMode::PostUpdate,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            layer_lr_scale: Vec::new(),
            batch_size: 128,
            epochs: 100,
            seed: 0,
            patience: Some(10),
            loss: Loss::SoftmaxCrossEntropy,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if let Some(s) = self.layer_lr_scale.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("invalid layer learning-rate scale {s}")));
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> LearningRate {
        LearningRate::new(self.learning_rate, self.layer_lr_scale.clone())
    }
}

/// A configured learning rule, with its run-fixed state.
#[derive(Debug, Clone)]
pub enum UpdateRule {
    Backprop,
    Dfa(FeedbackMatrices),
    LayerwiseInstant(SnapshotMode),
}

impl UpdateRule {
    pub fn from_config(config: &TrainerConfig, net: &Network) -> Result<Self> {
        Ok(match config.rule {
            RuleKind::Backprop => UpdateRule::Backprop,
            RuleKind::Dfa => UpdateRule::Dfa(FeedbackMatrices::random(net, config.seed)?),
            RuleKind::LayerwiseInstant => UpdateRule::LayerwiseInstant(config.snapshot_mode),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Mean per-sample `||delta_l||_2` for each parameterized layer, in
    /// network order.
    pub error_norms: Vec<f64>,
    pub wall_time_s: f64,
}

impl EpochRecord {
    /// Everything except wall time, for determinism checks.
    pub fn same_outcome(&self, other: &EpochRecord) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_loss.to_bits() == other.val_loss.to_bits()
            && self.val_accuracy.to_bits() == other.val_accuracy.to_bits()
            && bits(&self.error_norms) == bits(&other.error_norms)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub history: Vec<EpochRecord>,
    /// Loss of every training batch, in order.
    pub batch_losses: Vec<f64>,
    /// Epoch whose parameters `best` holds; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    /// Parameters with the highest validation accuracy (the initial
    /// parameters when no epoch ran).
    pub best: Network,
    pub last: Network,
    pub stopped_early: bool,
}

impl TrainingRun {
    pub fn same_outcome(&self, other: &TrainingRun) -> bool {
        self.history.len() == other.history.len()
            && self.history.iter().zip(&other.history).all(|(a, b)| a.same_outcome(b))
            && self.batch_losses.iter().map(|v| v.to_bits()).eq(other.batch_losses.iter().map(|v| v.to_bits()))
            && self.best_epoch == other.best_epoch
            && self.best == other.best
            && self.last == other.last
            && self.stopped_early == other.stopped_early
    }
}

/// Mean loss and accuracy of `net` over `ds`, evaluated in chunks.
pub fn evaluate_loss(net: &Network, ds: &Dataset, loss: Loss, chunk: usize) -> Result<(f64, f64)> {
    let classes = net.output_len();
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for idx in ds.batches(chunk.max(1), None) {
        let (x, t) = ds.gather(&idx, net.input_shape(), classes)?;
        let out = net.predict(&x)?;
        let probe = crate::nn::LayerCache {
            pre_activation: out.clone(),
            activation: out,
            argmax: Vec::new(),
        };
        let act = net.layers().last().expect("non-empty").activation();
        let value = match loss {
            Loss::SoftmaxCrossEntropy => super::output_error(act, &probe, &t, loss)?.0,
            Loss::MeanSquaredError => {
                let d = probe.activation.sub(&t)?;
                0.5 * d.data().iter().map(|v| v * v).sum::<f64>() / idx.len() as f64
            }
        };
        total_loss += value * idx.len() as f64;
        let preds = probe.activation.argmax_rows();
        correct += preds
            .iter()
            .zip(&idx)
            .filter(|(&p, &i)| p == ds.labels()[i] as usize)
            .count();
    }
    Ok((total_loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

pub fn train(net: Network, train_set: &Dataset, val_set: &Dataset, config: &TrainerConfig) -> Result<TrainingRun> {
    train_with_observer(net, train_set, val_set, config, |_, _| {})
}

const EVAL_CHUNK: usize = 500;

/// The epoch loop: seeded shuffle, per-batch rule dispatch, validation,
/// best-model checkpointing and patience-based early stopping.
/// `observer` sees each epoch record, with the parameters at the end of
/// that epoch, as soon as it is complete.
pub fn train_with_observer(
    mut net: Network,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainerConfig,
    mut observer: impl FnMut(&EpochRecord, &Network),
) -> Result<TrainingRun> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let input_len: usize = net.input_shape().iter().product();
    if train_set.sample_len() != input_len || val_set.sample_len() != input_len {
        return Err(Error::Config(format!(
            "dataset samples {:?} do not fit network input {:?}",
            train_set.sample_shape(),
            net.input_shape()
        )));
    }
    let n_param_layers = net.param_layers().len();
    if !config.layer_lr_scale.is_empty() && config.layer_lr_scale.len() != n_param_layers {
        return Err(Error::Config(format!(
            "{} layer learning-rate scales for {n_param_layers} parameterized layers",
            config.layer_lr_scale.len()
        )));
    }

    let rule = UpdateRule::from_config(config, &net)?;
    let mut optimizer = Optimizer::new(config.optimizer, &net);
    let lr = config.learning_rate();
    let classes = net.output_len();
    let mut shuffle = rng::stream(config.seed, rng::STREAM_SHUFFLE);

    let mut history = Vec::new();
    let mut batch_losses = Vec::new();
    let mut best = net.clone();
    let mut best_epoch = None;
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut stale_epochs = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let plan = train_set.batches(config.batch_size, Some(shuffle.next_u64()));
        let mut loss_sum = 0.0;
        let mut norm_sums = vec![0.0; n_param_layers];
        for (b, idx) in plan.iter().enumerate() {
            let (x, t) = train_set.gather(idx, net.input_shape(), classes)?;
            let cache = forward_pass(&net, &x)?;
            let (loss, norms) = match &rule {
                UpdateRule::Backprop => {
                    let bw = backprop_sweep(&net, &cache, &t, config.loss)?;
                    check_finite(bw.loss, epoch, b)?;
                    optimizer.step(&mut net, &bw.grads, &lr)?;
                    (bw.loss, bw.errors.norms())
                }
                UpdateRule::Dfa(feedback) => {
                    let bw = dfa_sweep(&net, &cache, &t, config.loss, feedback)?;
                    check_finite(bw.loss, epoch, b)?;
                    optimizer.step(&mut net, &bw.grads, &lr)?;
                    (bw.loss, bw.errors.norms())
                }
                UpdateRule::LayerwiseInstant(mode) => {
                    check_finite(cache_loss_hint(&net, &cache, &t, config.loss)?, epoch, b)?;
                    let report = layerwise_instant_sweep(
                        &mut net, &cache, &t, config.loss, &mut optimizer, &lr, *mode,
                    )?;
                    (report.loss, report.error_norms)
                }
            };
            loss_sum += loss;
            batch_losses.push(loss);
            for (sum, l) in norm_sums.iter_mut().zip(net.param_layers()) {
                *sum += norms[l].unwrap_or(0.0);
            }
        }
        let batches = plan.len() as f64;
        let (val_loss, val_accuracy) = evaluate_loss(&net, val_set, config.loss, EVAL_CHUNK)?;
        check_finite(val_loss, epoch, plan.len())?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches,
            val_loss,
            val_accuracy,
            error_norms: norm_sums.iter().map(|s| s / batches).collect(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        observer(&record, &net);
        history.push(record);

        if val_accuracy > best_accuracy {
            best_accuracy = val_accuracy;
            best.load_params_from(&net)?;
            best_epoch = Some(epoch);
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if config.patience.is_some_and(|p| stale_epochs >= p) {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainingRun {
        history,
        batch_losses,
        best_epoch,
        best,
        last: net,
        stopped_early,
    })
}

/// The layer-wise rule mutates parameters inside the sweep, so divergence
/// has to be caught from the forward output before any update lands.
fn cache_loss_hint(net: &Network, cache: &crate::nn::ForwardCache, t: &crate::tensor::Tensor, loss: Loss) -> Result<f64> {
    let last = net.depth() - 1;
    Ok(super::output_error(net.layers()[last].activation(), &cache.layers[last], t, loss)?.0)
}

fn check_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, batch, loss })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mlp, Activation};
    use crate::tensor::Tensor;

    /// Two well-separated blobs per class on a 1x2x2 "image".
    fn blobs(n: usize) -> Dataset {
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        let mut px = Vec::with_capacity(n * 4);
        for (i, &c) in labels.iter().enumerate() {
            let jitter = ((i * 7919) % 13) as f64 / 26.0;
            for k in 0..4 {
                px.push(if k == c as usize { 1.0 + jitter } else { jitter * 0.2 });
            }
        }
        Dataset::new("blobs", Tensor::new(vec![n, 1, 2, 2], px).unwrap(), labels, true).unwrap()
    }

    fn net() -> Network {
        let mlp = build_mlp(&[4, 8, 10], Activation::Relu, 3).unwrap();
        Network::new(vec![1, 2, 2], [vec![crate::nn::Layer::flatten()], mlp.layers().to_vec()].concat()).unwrap()
    }

    fn config(rule: RuleKind) -> TrainerConfig {
        TrainerConfig {
            rule,
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 5,
            seed: 7,
            patience: None,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let ds = blobs(30);
        let run = train(net(), &ds, &ds, &TrainerConfig { epochs: 0, ..config(RuleKind::Backprop) }).unwrap();
        assert!(run.history.is_empty() && run.batch_losses.is_empty());
        assert_eq!(run.best_epoch, None);
        assert_eq!(run.best, net());
        assert_eq!(run.last, net());
    }

    #[test]
    fn every_rule_learns_the_blobs() {
        let ds = blobs(96);
        for rule in [RuleKind::Backprop, RuleKind::Dfa, RuleKind::LayerwiseInstant] {
            let mut seen = Vec::new();
            let run = train_with_observer(net(), &ds, &ds, &config(rule), |r, _| seen.push(r.epoch)).unwrap();
            assert_eq!(seen, vec![1, 2, 3, 4, 5]);
            assert_eq!(run.batch_losses.len(), 5 * 6);
            let first = run.history.first().unwrap();
            let last = run.history.last().unwrap();
            assert!(last.train_loss < first.train_loss, "{rule:?}");
            assert_eq!(last.error_norms.len(), 2);
            assert!(run.history.iter().any(|r| r.val_accuracy > 0.9), "{rule:?}");
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let ds = blobs(50);
        for rule in [RuleKind::Backprop, RuleKind::Dfa, RuleKind::LayerwiseInstant] {
            let a = train(net(), &ds, &ds, &config(rule)).unwrap();
            let b = train(net(), &ds, &ds, &config(rule)).unwrap();
            assert!(a.same_outcome(&b), "{rule:?}");
            let c = train(net(), &ds, &ds, &TrainerConfig { seed: 8, ..config(rule) }).unwrap();
            assert!(!a.same_outcome(&c));
        }
    }

    #[test]
    fn best_tracks_validation_accuracy() {
        let ds = blobs(60);
        let run = train(net(), &ds, &ds, &config(RuleKind::Backprop)).unwrap();
        let best = run.best_epoch.unwrap();
        let top = run.history.iter().map(|r| r.val_accuracy).fold(f64::MIN, f64::max);
        assert_eq!(run.history[best - 1].val_accuracy, top);
        assert!(run.history[..best - 1].iter().all(|r| r.val_accuracy < top));
        let (_, acc) = evaluate_loss(&run.best, &ds, Loss::SoftmaxCrossEntropy, 7).unwrap();
        assert_eq!(acc, top);
    }

    #[test]
    fn patience_stops_early() {
        let ds = blobs(30);
        let cfg = TrainerConfig {
            learning_rate: 1e-12,
            epochs: 50,
            patience: Some(3),
            ..config(RuleKind::Backprop)
        };
        let run = train(net(), &ds, &ds, &cfg).unwrap();
        assert!(run.stopped_early);
        assert!(run.history.len() < 50);
    }

    #[test]
    fn huge_rate_diverges_with_location() {
        let ds = blobs(30);
        let cfg = TrainerConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e300,
            ..config(RuleKind::LayerwiseInstant)
        };
        match train(net(), &ds, &ds, &cfg) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs() {
        let ds = blobs(30);
        for cfg in [
            TrainerConfig { learning_rate: 0.0, ..config(RuleKind::Backprop) },
            TrainerConfig { batch_size: 0, ..config(RuleKind::Backprop) },
            TrainerConfig { layer_lr_scale: vec![1.0], ..config(RuleKind::Backprop) },
        ] {
            assert!(matches!(train(net(), &ds, &ds, &cfg), Err(Error::Config(_))));
        }
        assert_eq!("layerwise".parse::<RuleKind>().unwrap(), RuleKind::LayerwiseInstant);
        assert_eq!("pre".parse::<SnapshotMode>().unwrap(), SnapshotMode::PreUpdate);
        assert!("sideways".parse::<RuleKind>().is_err());
    }
}
