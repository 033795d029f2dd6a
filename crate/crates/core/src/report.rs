//! Cross-run summaries: accuracy curves as CSV and a method comparison table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::ClientObjective;
use crate::config::{resolve_config, ExperimentConfig};
use crate::error::{Error, Result};
use crate::federation::RunDir;
use crate::metrics::MetricsReport;

/// Method variants whose mean accuracy must not exceed the full method's.
pub const ORDERED_ABLATIONS: &[&str] = &["wo_ltg", "r0"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub report: MetricsReport,
}

/// `finetune`, `lander`, or the joined ablation names.
pub fn run_label(config: &ExperimentConfig) -> String {
    if config.federation.objective == ClientObjective::Finetune {
        return "finetune".into();
    }
    let names: Vec<&str> = config
        .ablations
        .iter()
        .map(String::as_str)
        .filter(|a| *a != "finetune")
        .collect();
    if names.is_empty() {
        "lander".into()
    } else {
        names.join("+")
    }
}

pub fn summarize_run(config: &ExperimentConfig, report: MetricsReport) -> RunSummary {
    RunSummary {
        label: run_label(config),
        seed: config.runtime.seed,
        report,
    }
}

/// Reads `config.lock` and `metrics.json` from a run directory.
pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let run = RunDir::new(dir);
    let config = resolve_config(&fs::read_to_string(run.config_lock())?, &[])?;
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(run.metrics())?)?;
    Ok(summarize_run(&config, report))
}

/// Mean accuracy over seen tasks after each task, per run.
fn curve(report: &MetricsReport) -> Vec<f64> {
    report
        .per_task
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub label: String,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    /// `None` when every run had a single task.
    pub forgetting_mean: Option<f64>,
    pub forgetting_std: Option<f64>,
    /// Mean over runs of the per-task curve.
    pub curve: Vec<f64>,
}

/// One row per label, in order of first appearance.
pub fn summarize(runs: &[RunSummary]) -> Vec<MethodRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&RunSummary> = runs.iter().filter(|r| r.label == label).collect();
            let accs: Vec<f64> = group.iter().map(|r| r.report.acc).collect();
            let fs: Vec<f64> = group.iter().filter_map(|r| r.report.forgetting).collect();
            let (acc_mean, acc_std) = mean_std(&accs);
            let (forgetting_mean, forgetting_std) = if fs.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&fs);
                (Some(m), Some(s))
            };
            let curves: Vec<Vec<f64>> = group.iter().map(|r| curve(&r.report)).collect();
            let len = curves.iter().map(Vec::len).min().unwrap_or(0);
            let curve = (0..len)
                .map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / curves.len() as f64)
                .collect();
            MethodRow {
                label: label.to_string(),
                runs: group.len(),
                acc_mean,
                acc_std,
                forgetting_mean,
                forgetting_std,
                curve,
            }
        })
        .collect()
}

/// `label,seed,task,accuracy` rows, one per run and incremental task.
pub fn curve_csv(runs: &[RunSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "seed", "task", "accuracy"])?;
    for r in runs {
        for (t, acc) in curve(&r.report).iter().enumerate() {
            w.write_record([r.label.clone(), r.seed.to_string(), (t + 1).to_string(), format!("{acc:.4}")])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub better: String,
    pub worse: String,
    pub better_acc: f64,
    pub worse_acc: f64,
    pub holds: bool,
}

/// Compares `lander` against every present ablation in [`ORDERED_ABLATIONS`].
pub fn ablation_ordering(rows: &[MethodRow]) -> Vec<OrderingCheck> {
    let Some(full) = rows.iter().find(|r| r.label == "lander") else {
        return Vec::new();
    };
    ORDERED_ABLATIONS
        .iter()
        .filter_map(|name| rows.iter().find(|r| r.label == *name))
        .map(|r| OrderingCheck {
            better: full.label.clone(),
            worse: r.label.clone(),
            better_acc: full.acc_mean,
            worse_acc: r.acc_mean,
            holds: full.acc_mean >= r.acc_mean,
        })
        .collect()
}

fn pm(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

/// Plain-text comparison table followed by any ordering checks.
pub fn render_table(rows: &[MethodRow]) -> String {
    let tasks = rows.iter().map(|r| r.curve.len()).max().unwrap_or(0);
    let mut header = vec!["Method".to_string(), "Runs".into(), "Acc".into(), "F".into()];
    header.extend((1..=tasks).map(|t| format!("T{t}")));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![
                r.label.clone(),
                r.runs.to_string(),
                pm(r.acc_mean, r.acc_std),
                match (r.forgetting_mean, r.forgetting_std) {
                    (Some(m), Some(s)) => pm(m, s),
                    _ => "-".into(),
                },
            ];
            cells.extend((0..tasks).map(|t| r.curve.get(t).map_or("-".into(), |a| format!("{a:.2}"))));
            cells
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(body.iter())
                .map(|row| row[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = String::new();
    let _ = writeln!(out, "{}", line(&header));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    for row in &body {
        let _ = writeln!(out, "{}", line(row));
    }
    for check in ablation_ordering(rows) {
        let _ = writeln!(
            out,
            "ordering {} >= {}: {} ({:.2} vs {:.2})",
            check.better,
            check.worse,
            if check.holds { "ok" } else { "FAILED" },
            check.better_acc,
            check.worse_acc
        );
    }
    out
}
