use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::Args;
use rand::Rng;
use serde::{Deserialize, Serialize};

use layerwise_core::data::{load_cifar10_dir, load_mnist_dir};
use layerwise_core::gradcheck::{
    alignment_angle, compare_with_exclusions, finite_difference_grads, GradCheckReport, DEFAULT_ATOL,
    DEFAULT_EPSILON, DEFAULT_RTOL,
};
use layerwise_core::metrics::evaluate;
use layerwise_core::nn::forward_pass;
use layerwise_core::rng;
use layerwise_core::trainers::{backprop_sweep, dfa_sweep, train_with_observer, FeedbackMatrices, RuleKind};
use layerwise_core::{Activation, Dataset, Loss, MetricsReport, Network, SnapshotMode, Tensor, TrainingRun};

use crate::artifacts::{self, Summary, BATCHES_CSV, CHECKPOINT, HISTORY_CSV, LOSS_CURVE, SCHEMA_VERSION, SUMMARY};
use crate::config::{DatasetKind, ExperimentConfig, ModelSpec};

/// `(train, validation, test)`, normalized to `[0, 1]`.
pub fn load_datasets(cfg: &ExperimentConfig) -> anyhow::Result<(Dataset, Dataset, Dataset)> {
    let dir = cfg.data_dir();
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => load_mnist_dir(&dir),
        DatasetKind::Cifar10 => load_cifar10_dir(&dir),
    }
    .with_context(|| format!("loading {} from {}", cfg.dataset.name(), dir.display()))?;
    let mut train = train.normalize()?;
    let mut test = test.normalize()?;
    if let Some(n) = cfg.train_limit {
        train = train.take(n);
    }
    if let Some(n) = cfg.test_limit {
        test = test.take(n);
    }
    let (train, val) = match cfg.val_split {
        Some(ratio) => {
            let (val, train) = train.split(ratio, cfg.seed)?;
            (train, val)
        }
        None => (train, test.clone()),
    };
    Ok((train, val, test))
}

pub struct TrainOutcome {
    pub run: TrainingRun,
    pub summary: Summary,
}

/// Trains per `cfg`, writing the history CSV and checkpoint as epochs
/// finish and the remaining artifacts at the end.
pub fn run_train(cfg: &ExperimentConfig, log: &mut dyn Write) -> anyhow::Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let (train_set, val_set, test_set) = load_datasets(cfg)?;
    let net = cfg.build_model()?;
    let param_count = net.param_count();
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    writeln!(
        log,
        "{} {} rule={} params={param_count} train={} val={} test={}",
        cfg.dataset.name(),
        cfg.model,
        cfg.rule.label(),
        train_set.len(),
        val_set.len(),
        test_set.len()
    )?;

    let mut history = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut failure: Option<anyhow::Error> = None;
    let run = train_with_observer(net, &train_set, &val_set, &cfg.trainer_config(), |record, current: &Network| {
        if failure.is_some() {
            return;
        }
        history.push(record.clone());
        let mut step = || -> anyhow::Result<()> {
            writeln!(
                log,
                "epoch {:>3}  train_loss {:.5}  val_loss {:.5}  val_acc {:.4}  {:.1}s",
                record.epoch, record.train_loss, record.val_loss, record.val_accuracy, record.wall_time_s
            )?;
            artifacts::write_text(&out.join(HISTORY_CSV), &artifacts::history_csv(&history))?;
            if record.val_accuracy > best {
                best = record.val_accuracy;
                current.save_checkpoint(&out.join(CHECKPOINT))?;
            }
            Ok(())
        };
        failure = step().err();
    })?;
    if let Some(e) = failure {
        return Err(e);
    }

    run.best.save_checkpoint(&out.join(CHECKPOINT))?;
    artifacts::write_text(&out.join(HISTORY_CSV), &artifacts::history_csv(&run.history))?;
    artifacts::write_text(&out.join(BATCHES_CSV), &artifacts::batches_csv(&run.batch_losses))?;
    artifacts::write_text(&out.join(LOSS_CURVE), &artifacts::loss_curve_svg(&run.history))?;
    let test = evaluate(&run.best, &test_set)?;
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        param_count,
        epochs_run: run.history.len(),
        best_epoch: run.best_epoch,
        stopped_early: run.stopped_early,
        best_val_accuracy: run.best_epoch.map(|e| run.history[e - 1].val_accuracy),
        test,
        total_wall_time_s: started.elapsed().as_secs_f64(),
    };
    artifacts::write_json(&out.join(SUMMARY), &summary)?;
    writeln!(
        log,
        "best epoch {:?}: test accuracy {:.4}, macro F1 {:.4}; artifacts in {}",
        summary.best_epoch,
        summary.test.accuracy,
        summary.test.f1.macro_avg,
        out.display()
    )?;
    Ok(TrainOutcome { run, summary })
}

/// Metrics of a saved checkpoint on the configured test split.
pub fn run_evaluate(cfg: &ExperimentConfig, checkpoint: &Path) -> anyhow::Result<MetricsReport> {
    let net = Network::load_checkpoint(checkpoint)?;
    if net.input_shape() != cfg.dataset.input_shape() {
        bail!(
            "checkpoint expects inputs {:?}, {} provides {:?}",
            net.input_shape(),
            cfg.dataset.name(),
            cfg.dataset.input_shape()
        );
    }
    let (_, _, test) = load_datasets(cfg)?;
    Ok(evaluate(&net, &test)?)
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// mlp:<w0>,...  or toy_cnn
    #[arg(long, default_value = "mlp:4,5,3")]
    pub model: ModelSpec,
    #[arg(long, default_value = "tanh")]
    pub activation: Activation,
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub eps: f64,
    #[arg(long, default_value_t = DEFAULT_RTOL)]
    pub rtol: f64,
    #[arg(long, default_value_t = DEFAULT_ATOL)]
    pub atol: f64,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Adds this offset to every analytic gradient, to exercise the
    /// failure path.
    #[arg(long, hide = true)]
    pub corrupt: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutcome {
    pub model: String,
    pub excluded: usize,
    pub report: GradCheckReport,
    /// Angle between DFA and backprop gradients per layer, in degrees.
    pub dfa_alignment_deg: Vec<Option<f64>>,
}

pub fn run_gradcheck(args: &GradcheckArgs) -> anyhow::Result<GradcheckOutcome> {
    let input_shape = match &args.model {
        ModelSpec::Mlp(dims) => vec![dims[0]],
        ModelSpec::ToyCnn => vec![1, 6, 6],
        ModelSpec::StandardCnn => bail!("cnn is too large for a finite-difference check; use toy_cnn"),
    };
    if args.samples == 0 {
        bail!("need at least one sample");
    }
    let net = args.model.build(&input_shape, args.activation, args.seed)?;
    let mut r = rng::stream(args.seed, rng::STREAM_PROBE);
    let mut shape = vec![args.samples];
    shape.extend_from_slice(&input_shape);
    let len: usize = shape.iter().product();
    let x = Tensor::new(shape, (0..len).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let k = net.output_len();
    let mut t = vec![0.0; args.samples * k];
    for i in 0..args.samples {
        t[i * k + r.random_range(0..k)] = 1.0;
    }
    let t = Tensor::new(vec![args.samples, k], t)?;

    let loss = Loss::SoftmaxCrossEntropy;
    let cache = forward_pass(&net, &x)?;
    let mut bp = backprop_sweep(&net, &cache, &t, loss)?;
    let feedback = FeedbackMatrices::random(&net, args.seed)?;
    let dfa = dfa_sweep(&net, &cache, &t, loss, &feedback)?;
    let dfa_alignment_deg = alignment_angle(&dfa.grads, &bp.grads)?;
    if let Some(offset) = args.corrupt {
        for p in bp.grads.layers.iter_mut().flatten() {
            p.weights = p.weights.add_scalar(offset);
            p.bias = p.bias.add_scalar(offset);
        }
    }
    let numeric = finite_difference_grads(&net, &x, &t, loss, args.eps)?;
    let report = compare_with_exclusions(&bp.grads, &numeric, args.rtol, args.atol)?;
    let outcome = GradcheckOutcome {
        model: args.model.to_string(),
        excluded: numeric.excluded_count(),
        report,
        dfa_alignment_deg,
    };
    if let Some(path) = &args.out {
        artifacts::write_json(path, &outcome)?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: crate::config::RunArgs,
    /// Comma-separated rules to run.
    #[arg(long, default_value = "bp,dfa,layerwise")]
    pub rules: String,
    /// Number of seeds per rule, counting up from --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Tabulate existing run summaries instead of training.
    #[arg(long, num_args = 1..)]
    pub load: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub seed: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub spread: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let spread = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Stat { mean, spread, min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: String,
    pub runs: usize,
    pub accuracy: Stat,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub methods: Vec<MethodStats>,
}

pub fn method_label(rule: RuleKind, mode: SnapshotMode) -> String {
    match (rule, mode) {
        (RuleKind::LayerwiseInstant, SnapshotMode::PreUpdate) => "layerwise-pre".into(),
        _ => rule.label().into(),
    }
}

impl CompareRow {
    pub fn from_report(method: String, seed: u64, r: &MetricsReport) -> CompareRow {
        CompareRow {
            method,
            seed,
            accuracy: r.accuracy,
            precision: r.precision.macro_avg,
            recall: r.recall.macro_avg,
            f1: r.f1.macro_avg,
        }
    }
}

impl Comparison {
    pub fn from_rows(rows: Vec<CompareRow>) -> Comparison {
        let mut order: Vec<String> = Vec::new();
        for r in &rows {
            if !order.contains(&r.method) {
                order.push(r.method.clone());
            }
        }
        let methods = order
            .into_iter()
            .map(|m| {
                let mine: Vec<&CompareRow> = rows.iter().filter(|r| r.method == m).collect();
                let col = |f: fn(&CompareRow) -> f64| Stat::of(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
                MethodStats {
                    runs: mine.len(),
                    accuracy: col(|r| r.accuracy),
                    precision: col(|r| r.precision),
                    recall: col(|r| r.recall),
                    f1: col(|r| r.f1),
                    method: m,
                }
            })
            .collect();
        Comparison { rows, methods }
    }

    pub fn method(&self, name: &str) -> Option<&MethodStats> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Whether mean test accuracy orders layerwise >= bp >= dfa; `None` if
    /// one of the three is missing.
    pub fn claimed_ordering_holds(&self) -> Option<bool> {
        let acc = |m: &str| self.method(m).map(|s| s.accuracy.mean);
        Some(acc("layerwise")? >= acc("bp")? && acc("bp")? >= acc("dfa")?)
    }

    pub fn to_table(&self) -> String {
        let cell = |s: &Stat, runs: usize| {
            if runs > 1 {
                format!("{:.4} ± {:.4}", s.mean, s.spread)
            } else {
                format!("{:.4}", s.mean)
            }
        };
        let mut out = format!(
            "{:<14} | {:<17} | {:<17} | {:<17} | {:<17}\n",
            "Method", "Accuracy", "Precision", "Recall", "F1"
        );
        out.push_str(&format!("{}\n", "-".repeat(93)));
        for m in &self.methods {
            out.push_str(&format!(
                "{:<14} | {:<17} | {:<17} | {:<17} | {:<17}\n",
                format!("{} (n={})", m.method, m.runs),
                cell(&m.accuracy, m.runs),
                cell(&m.precision, m.runs),
                cell(&m.recall, m.runs),
                cell(&m.f1, m.runs)
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,runs,accuracy_mean,accuracy_std,precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std\n",
        );
        for m in &self.methods {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                m.method,
                m.runs,
                m.accuracy.mean,
                m.accuracy.spread,
                m.precision.mean,
                m.precision.spread,
                m.recall.mean,
                m.recall.spread,
                m.f1.mean,
                m.f1.spread
            ));
        }
        out
    }
}

pub fn parse_rules(list: &str) -> anyhow::Result<Vec<RuleKind>> {
    let rules = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<RuleKind>())
        .collect::<Result<Vec<_>, _>>()?;
    if rules.is_empty() {
        bail!("no rules given");
    }
    Ok(rules)
}

/// Trains every rule for every seed (or tabulates loaded summaries) and
/// writes `comparison.{txt,csv,json}` into the output directory.
pub fn run_compare(args: &CompareArgs, log: &mut dyn Write) -> anyhow::Result<Comparison> {
    let base = args.run.resolve()?;
    let mut rows = Vec::new();
    if args.load.is_empty() {
        if args.seeds == 0 {
            bail!("--seeds must be at least 1");
        }
        for rule in parse_rules(&args.rules)? {
            for seed in base.seed..base.seed + args.seeds {
                let method = method_label(rule, base.snapshot_mode);
                let cfg = ExperimentConfig {
                    rule,
                    seed,
                    out_dir: base.out_dir.join(format!("{method}-seed{seed}")),
                    ..base.clone()
                };
                let outcome = run_train(&cfg, log)?;
                rows.push(CompareRow::from_report(method, seed, &outcome.summary.test));
            }
        }
    } else {
        for path in &args.load {
            let s = artifacts::read_summary(path)?;
            rows.push(CompareRow::from_report(
                method_label(s.config.rule, s.config.snapshot_mode),
                s.config.seed,
                &s.test,
            ));
        }
    }
    let cmp = Comparison::from_rows(rows);
    std::fs::create_dir_all(&base.out_dir)?;
    artifacts::write_text(&base.out_dir.join("comparison.txt"), &cmp.to_table())?;
    artifacts::write_text(&base.out_dir.join("comparison.csv"), &cmp.to_csv())?;
    artifacts::write_json(&base.out_dir.join("comparison.json"), &cmp)?;
    writeln!(log, "{}", cmp.to_table())?;
    if let Some(holds) = cmp.claimed_ordering_holds() {
        writeln!(log, "layerwise >= bp >= dfa by mean accuracy: {}", if holds { "yes" } else { "no" })?;
    }
    Ok(cmp)
}
