//! Continual-learning evaluation.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{ChannelStats, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, ClassifierModel, ForwardMode, FrozenClassifier};

/// Anything that maps an input batch to logits.
pub trait Predictor {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl Predictor for ClassifierModel {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, ForwardMode::Eval)?.logits)
    }
}

impl Predictor for FrozenClassifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, ForwardMode::Eval)?.logits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub correct: usize,
    pub total: usize,
}

impl EvalCounts {
    pub fn percent(&self) -> f64 {
        100.0 * self.correct as f64 / self.total as f64
    }
}

pub const EVAL_BATCH: usize = 256;

/// Top-1 counts of `model` on `indices` of `dataset`.
pub fn eval_counts(
    model: &dyn Predictor,
    dataset: &LabeledDataset,
    indices: &[usize],
    stats: &ChannelStats,
    dtype: DType,
) -> Result<EvalCounts> {
    if indices.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut correct = 0;
    for batch in indices.chunks(EVAL_BATCH) {
        let x = dataset.batch_tensor(batch, stats, dtype, &Device::Cpu)?;
        let logits = model.logits(&x)?;
        let width = logits.dim(1)?;
        let labels = dataset.batch_labels(batch);
        if let Some(&y) = labels.iter().find(|&&y| y >= width) {
            return Err(Error::HeadTooNarrow { label: y, width });
        }
        correct += argmax_rows(&logits)?
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(EvalCounts {
        correct,
        total: indices.len(),
    })
}

/// Top-1 accuracy in percent.
pub fn eval_model(
    model: &dyn Predictor,
    dataset: &LabeledDataset,
    indices: &[usize],
    stats: &ChannelStats,
    dtype: DType,
) -> Result<f64> {
    Ok(eval_counts(model, dataset, indices, stats, dtype)?.percent())
}

/// Lower-triangular matrix `a[e][t]`: accuracy (percent) on task `t`'s test
/// split after training task `e`, both 0-based here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyHistory {
    rows: Vec<Vec<f64>>,
    /// Test-split size of every task.
    task_sizes: Vec<usize>,
}

impl AccuracyHistory {
    pub fn new(task_sizes: Vec<usize>) -> Self {
        Self {
            rows: Vec::new(),
            task_sizes,
        }
    }

    /// Appends the per-task accuracies measured after the next task.
    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "row {} must hold {} accuracies, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.len() > self.task_sizes.len() {
            return Err(Error::InvalidArgument("more rows than tasks".into()));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("accuracy {v} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_evaluated(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn task_sizes(&self) -> &[usize] {
        &self.task_sizes
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.rows.get(after).and_then(|r| r.get(task)).copied()
    }

    fn check_horizon(&self, tasks: usize) -> Result<()> {
        if tasks == 0 || tasks > self.rows.len() {
            return Err(Error::InvalidArgument(format!(
                "history covers {} tasks, asked for {tasks}",
                self.rows.len()
            )));
        }
        Ok(())
    }

    /// Mean of the per-task accuracies after task `after`.
    pub fn mean_of_tasks(&self, after: usize) -> Option<f64> {
        let row = self.rows.get(after)?;
        Some(row.iter().sum::<f64>() / row.len() as f64)
    }
}

/// Accuracy on the union test split of tasks `1..=tasks` after task `tasks`,
/// i.e. the test-size weighted mean of the last row.
pub fn last_incremental_accuracy(history: &AccuracyHistory, tasks: usize) -> Result<f64> {
    history.check_horizon(tasks)?;
    let row = &history.rows[tasks - 1];
    let sizes = &history.task_sizes[..tasks];
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::EmptySplit);
    }
    Ok(row.iter().zip(sizes).map(|(a, &n)| a * n as f64).sum::<f64>() / total as f64)
}

/// Mean over `t < T` of `max_{e >= t} a[e][t] - a[T][t]`.
pub fn average_forgetting(history: &AccuracyHistory, tasks: usize) -> Result<f64> {
    history.check_horizon(tasks)?;
    if tasks == 1 {
        return Err(Error::SingleTask);
    }
    let last = tasks - 1;
    let mut sum = 0.0;
    for t in 0..last {
        let peak = (t..=last)
            .map(|e| history.rows[e][t])
            .fold(f64::NEG_INFINITY, f64::max);
        sum += peak - history.rows[last][t];
    }
    Ok(sum / last as f64)
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    /// `null` for single-task runs.
    pub forgetting: Option<f64>,
    pub per_task: Vec<Vec<f64>>,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn from_history(history: &AccuracyHistory, config_hash: String, seed: u64) -> Result<Self> {
        let tasks = history.num_evaluated();
        let forgetting = match average_forgetting(history, tasks) {
            Ok(f) => Some(f),
            Err(Error::SingleTask) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            acc: last_incremental_accuracy(history, tasks)?,
            forgetting,
            per_task: history.rows().to_vec(),
            config_hash,
            seed,
        })
    }
}
