//! Local client training over paired real and synthetic batches.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelStats, ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::generation::SyntheticMemory;
use crate::losses::{
    client_loss_current, client_loss_previous, client_total, cross_entropy, scalar, LossWeights, ScaleFactors,
};
use crate::lte::LtePool;
use crate::nn::{attach_trainable, ClassifierModel, ForwardMode, FrozenClassifier, Sgd};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Synthetic batch size per step; `None` uses `batch_size`.
    pub synthetic_batch_size: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 128,
            synthetic_batch_size: None,
            lr: 0.04,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.synthetic_batch_size == Some(0) {
            return Err(Error::InvalidArgument("epochs and batch sizes must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("optimizer hyperparameters must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn synthetic_batch(&self) -> usize {
        self.synthetic_batch_size.unwrap_or(self.batch_size)
    }
}

/// Head columns scored by the current-task cross-entropy once previous
/// classes exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeScope {
    /// Only the current task's columns; labels are offset by the previous width.
    NewClasses,
    /// Every column of the head.
    AllClasses,
}

/// Which objective a client minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientObjective {
    /// Anchored current-task loss plus distillation on synthetic memory.
    Lander,
    /// Plain cross-entropy on real data only.
    Finetune,
}

/// One step's worth of sample indices: real shard positions and memory rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPair {
    pub real: Vec<usize>,
    pub synthetic: Vec<usize>,
}

fn chunk(mut order: Vec<usize>, size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    while !order.is_empty() {
        let take = size.min(order.len());
        let rest = order.split_off(take);
        out.push(order);
        order = rest;
    }
    // A trailing singleton batch would give degenerate batch statistics.
    if out.len() > 1 && out.last().map_or(false, |b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Pairs one epoch of shuffled real batches with shuffled memory batches.
///
/// The epoch length is the number of real batches and memory batches cycle;
/// without real data the epoch is one pass over memory.
pub fn pair_batches(
    real: &[usize],
    memory_len: usize,
    real_batch: usize,
    synthetic_batch: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<BatchPair>> {
    if real.is_empty() && memory_len == 0 {
        return Err(Error::BothEmpty);
    }
    if real_batch == 0 || synthetic_batch == 0 {
        return Err(Error::InvalidArgument("batch sizes must be at least 1".into()));
    }
    let mut real_order = real.to_vec();
    real_order.shuffle(rng);
    let mut memory_order: Vec<usize> = (0..memory_len).collect();
    memory_order.shuffle(rng);
    let real_batches = chunk(real_order, real_batch);
    let memory_batches = chunk(memory_order, synthetic_batch);
    if real_batches.is_empty() {
        return Ok(memory_batches
            .into_iter()
            .map(|synthetic| BatchPair {
                real: Vec::new(),
                synthetic,
            })
            .collect());
    }
    Ok(real_batches
        .into_iter()
        .enumerate()
        .map(|(i, real)| BatchPair {
            real,
            synthetic: if memory_batches.is_empty() {
                Vec::new()
            } else {
                memory_batches[i % memory_batches.len()].clone()
            },
        })
        .collect())
}

/// Read-only inputs shared by every client of a round.
pub struct ClientContext<'a> {
    pub dataset: &'a LabeledDataset,
    pub normalization: &'a ChannelStats,
    pub pool: &'a LtePool,
    /// Frozen previous-task server; `None` on the first task.
    pub prev_server: Option<&'a FrozenClassifier>,
    pub memory: Option<&'a SyntheticMemory>,
    pub factors: ScaleFactors,
    pub weights: LossWeights,
    pub objective: ClientObjective,
    pub ce_scope: CeScope,
    pub dtype: DType,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub model: ClassifierModel,
    /// Aggregation weight `n_k`.
    pub sample_count: usize,
    pub config: LocalConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub real_samples: usize,
}

impl ClientState {
    pub fn new(client_id: usize, model: ClassifierModel, config: LocalConfig) -> Self {
        Self {
            client_id,
            model,
            sample_count: 0,
            config,
        }
    }

    /// Runs `E` local epochs on the client's own shard.
    pub fn update(&mut self, shard: &ClientShard, ctx: &ClientContext<'_>, seed: u64) -> Result<ClientReport> {
        self.config.validate()?;
        let indices = shard.indices()?.to_vec();
        let distill = ctx.objective == ClientObjective::Lander && ctx.prev_server.is_some();
        let memory = if distill { ctx.memory.filter(|m| !m.is_empty()) } else { None };
        let memory_len = memory.map_or(0, |m| m.len());
        self.sample_count = indices.len();
        if indices.is_empty() && memory_len == 0 {
            return Ok(ClientReport {
                client_id: self.client_id,
                ..Default::default()
            });
        }
        let width = self.model.num_classes();
        for &i in &indices {
            let y = ctx.dataset.labels()[i];
            if y >= width {
                return Err(Error::HeadTooNarrow { label: y, width });
            }
            if ctx.objective == ClientObjective::Lander && !ctx.pool.contains(y) {
                return Err(Error::MissingAnchor(y));
            }
        }
        if let (Some(server), true) = (ctx.prev_server, distill) {
            if server.num_classes() > width {
                return Err(Error::HeadTooNarrow {
                    label: server.num_classes() - 1,
                    width,
                });
            }
        }

        let vars = attach_trainable(&mut self.model)?;
        let mut opt = Sgd::new(vars, self.config.lr, self.config.momentum, self.config.weight_decay);
        let mut rng = rng::stream(seed, &format!("client-{}/pairing", self.client_id));
        let device = Device::Cpu;
        let (mut total_loss, mut steps) = (0.0, 0usize);
        for _ in 0..self.config.epochs {
            let pairs = pair_batches(
                &indices,
                memory_len,
                self.config.batch_size,
                self.config.synthetic_batch(),
                &mut rng,
            )?;
            for pair in pairs {
                let real_x = (!pair.real.is_empty())
                    .then(|| ctx.dataset.batch_tensor(&pair.real, ctx.normalization, ctx.dtype, &device))
                    .transpose()?;
                let syn_x = match memory {
                    Some(m) if !pair.synthetic.is_empty() => Some(m.batch_tensor(&pair.synthetic, ctx.dtype)?),
                    _ => None,
                };
                let n_real = pair.real.len();
                let input = match (&real_x, &syn_x) {
                    (Some(r), Some(s)) => Tensor::cat(&[r, s], 0)?,
                    (Some(r), None) => r.clone(),
                    (None, Some(s)) => s.clone(),
                    (None, None) => continue,
                };
                let out = self.model.forward(&input, ForwardMode::Train)?;
                let loss = self.step_loss(ctx, &pair, &out.logits, &out.features, n_real, syn_x.as_ref())?;
                let value = scalar(&loss)?;
                if !value.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "client {} produced a non-finite loss",
                        self.client_id
                    )));
                }
                opt.step(&loss.backward()?)?;
                self.model.update_running_stats(&out.taps)?;
                total_loss += value;
                steps += 1;
            }
        }
        Ok(ClientReport {
            client_id: self.client_id,
            steps,
            mean_loss: if steps == 0 { 0.0 } else { total_loss / steps as f64 },
            real_samples: indices.len(),
        })
    }

    fn step_loss(
        &self,
        ctx: &ClientContext<'_>,
        pair: &BatchPair,
        logits: &Tensor,
        features: &Tensor,
        n_real: usize,
        syn_x: Option<&Tensor>,
    ) -> Result<Tensor> {
        let labels = ctx.dataset.batch_labels(&pair.real);
        if ctx.objective == ClientObjective::Finetune {
            return cross_entropy(&logits.narrow(0, 0, n_real)?, &labels);
        }
        let current = if n_real > 0 {
            let real_logits = logits.narrow(0, 0, n_real)?;
            let real_features = features.narrow(0, 0, n_real)?;
            let anchors = ctx
                .pool
                .query_batch(&labels, ctx.dtype, logits.device())
                .map_err(|e| match e {
                    Error::UnknownLabel(y) => Error::MissingAnchor(y),
                    other => other,
                })?;
            let projected = self.model.project(&real_features)?;
            let (real_logits, labels) = match (ctx.prev_server, ctx.ce_scope) {
                (Some(server), CeScope::NewClasses) => {
                    let old = server.num_classes();
                    let local = real_logits.narrow(1, old, real_logits.dim(1)? - old)?;
                    (local, labels.iter().map(|l| l - old).collect::<Vec<_>>())
                }
                _ => (real_logits, labels.clone()),
            };
            Some(client_loss_current(
                &real_logits,
                &labels,
                &projected,
                &anchors,
                ctx.weights.radius,
                ctx.weights.lambda_ltc,
            )?)
        } else {
            None
        };
        let previous = match (ctx.prev_server, syn_x) {
            (Some(server), Some(x)) => {
                let n_syn = x.dim(0)?;
                let teacher = server.forward(x, ForwardMode::Eval)?;
                Some(client_loss_previous(
                    &logits.narrow(0, n_real, n_syn)?,
                    &teacher.logits,
                    &features.narrow(0, n_real, n_syn)?,
                    &teacher.features,
                    ctx.weights.kd_temperature,
                )?)
            }
            _ => None,
        };
        match (current, previous) {
            (Some(c), None) if ctx.prev_server.is_none() => Ok(c),
            (Some(c), None) => Ok(c.affine(ctx.factors.alpha_cur_t, 0.0)?),
            (Some(c), Some(p)) => client_total(&c, &p, &ctx.factors),
            (None, Some(p)) => Ok(p.affine(ctx.factors.alpha_pre_t, 0.0)?),
            (None, None) => Err(Error::BothEmpty),
        }
    }
}
