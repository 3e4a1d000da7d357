//! Run outputs. Every file is written atomically, so an interrupted run
//! never leaves a half-written artifact behind.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use layerwise_core::nn::write_atomic;
use layerwise_core::trainers::EpochRecord;
use layerwise_core::MetricsReport;

use crate::config::ExperimentConfig;

pub const SCHEMA_VERSION: u32 = 1;

pub const HISTORY_CSV: &str = "history.csv";
pub const BATCHES_CSV: &str = "batches.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const SUMMARY: &str = "summary.json";
pub const LOSS_CURVE: &str = "loss_curve.svg";

/// Per-epoch metrics. `wall_time_s` is always the last column.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let layers = history.first().map_or(0, |r| r.error_norms.len());
    let mut s = String::from("epoch,train_loss,val_loss,val_accuracy");
    for k in 0..layers {
        let _ = write!(s, ",error_norm_{k}");
    }
    s.push_str(",wall_time_s\n");
    for r in history {
        let _ = write!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_accuracy);
        for n in &r.error_norms {
            let _ = write!(s, ",{n}");
        }
        let _ = writeln!(s, ",{}", r.wall_time_s);
    }
    s
}

pub fn batches_csv(losses: &[f64]) -> String {
    let mut s = String::from("batch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub param_count: usize,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub best_val_accuracy: Option<f64>,
    /// Metrics of the checkpointed (best) network on the test split.
    pub test: MetricsReport,
    pub total_wall_time_s: f64,
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_summary(path: &Path) -> anyhow::Result<Summary> {
    use anyhow::Context;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let summary: Summary = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if summary.schema_version != SCHEMA_VERSION {
        anyhow::bail!(
            "{} has summary schema {}, expected {SCHEMA_VERSION}",
            path.display(),
            summary.schema_version
        );
    }
    Ok(summary)
}

/// Train and validation loss per epoch as a standalone SVG line chart.
pub fn loss_curve_svg(history: &[EpochRecord]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let series = [
        ("train", "#1f77b4", history.iter().map(|r| r.train_loss).collect::<Vec<_>>()),
        ("validation", "#d62728", history.iter().map(|r| r.val_loss).collect::<Vec<_>>()),
    ];
    let finite = series.iter().flat_map(|s| s.2.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, lo.max(0.0) + 1.0) };
    let n = history.len().max(2) - 1;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / n as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(s, r#"<text x="10" y="{}" font-size="12">{hi:.4}</text>"#, PAD);
    let _ = writeln!(s, r#"<text x="10" y="{}" font-size="12">{lo:.4}</text>"#, H - PAD);
    for (k, (name, colour, values)) in series.iter().enumerate() {
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let ly = PAD + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-size="12" fill="{colour}">{name} loss</text>"#,
            W - PAD - 100.0
        );
    }
    s.push_str("</svg>\n");
    s
}
