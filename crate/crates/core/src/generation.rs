//! Server-side data-free generation of synthetic memory from a frozen teacher.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::archive::{self, bytes_to_f32s, bytes_to_u32s, f32s_to_bytes, u32s_to_bytes, MEMORY_MAGIC};
use crate::data::{ChannelStats, ImageShape};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, feature_mse, gen_adv_loss, gen_bn_loss, gen_ltc_loss, gen_oh_loss, gen_total, kd_kl, scalar,
    LossWeights,
};
use crate::lte::LtePool;
use crate::nn::{
    argmax_rows, attach_trainable, detached, gaussian_latent, Adam, BnTap, ClassifierModel, DataStatsMode,
    ForwardMode, FrozenClassifier, GeneratorConfig, GeneratorModel, GeneratorVariant, LearnableDataStats,
    NoisyLayer, Sgd,
};
use crate::rng::{self, Rng};

/// Generator input: the anchor through the noisy layer, or plain noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisyInput {
    Lte,
    Noise,
}

/// Where synthetic-batch statistics are matched for the BN loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnTarget {
    /// Teacher normalization inputs against teacher running statistics.
    Teacher,
    /// The generator's own normalization layers against their running statistics.
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Rounds `I`.
    pub rounds: usize,
    /// Generator steps `g` per round.
    pub steps: usize,
    /// Synthetic batch size per round.
    pub batch_size: usize,
    pub generator_lr: f64,
    pub student_lr: f64,
    pub student_momentum: f64,
    pub student_batch_size: usize,
    pub generator_scale: f64,
    pub generator_variant: GeneratorVariant,
    pub trailing_bn: bool,
    pub latent_dim: usize,
    pub noisy_input: NoisyInput,
    pub data_stats: DataStatsMode,
    pub bn_target: BnTarget,
    /// Anchor-bounding weight used during generation only.
    pub lambda_ltc: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            rounds: 40,
            steps: 40,
            batch_size: 256,
            generator_lr: 2e-3,
            student_lr: 0.05,
            student_momentum: 0.9,
            student_batch_size: 128,
            generator_scale: 1.0,
            generator_variant: GeneratorVariant::Shallow,
            trailing_bn: true,
            latent_dim: 256,
            noisy_input: NoisyInput::Lte,
            data_stats: DataStatsMode::Lds,
            bn_target: BnTarget::Teacher,
            lambda_ltc: 5.0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.steps == 0 || self.batch_size < 2 || self.student_batch_size < 2 {
            return Err(Error::InvalidArgument(
                "generation needs rounds, steps >= 1 and batch sizes >= 2".into(),
            ));
        }
        if !(self.generator_lr > 0.0) || !(self.student_lr >= 0.0) || !(self.lambda_ltc >= 0.0) {
            return Err(Error::InvalidArgument("generation learning rates and weights out of range".into()));
        }
        Ok(())
    }

    /// Memory size produced without running any gradient step.
    pub fn plan(&self) -> GenerationPlan {
        GenerationPlan {
            rounds: self.rounds,
            batch_size: self.batch_size,
            generator_steps: self.rounds * self.steps,
            memory_size: self.rounds * self.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub rounds: usize,
    pub batch_size: usize,
    pub generator_steps: usize,
    pub memory_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Task whose training consumes this memory.
    pub task: usize,
    pub rounds: Vec<usize>,
    pub seed: u64,
}

/// Synthetic images (already in the classifier's input space) with pseudo labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMemory {
    shape: ImageShape,
    images: Vec<f32>,
    labels: Vec<usize>,
    classes: Vec<usize>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct MemoryManifest {
    count: usize,
    image_shape: ImageShape,
    dtype: String,
    classes: Vec<usize>,
    seed: u64,
    task: usize,
    rounds: Vec<usize>,
    image_bytes: usize,
}

impl SyntheticMemory {
    pub fn new(shape: ImageShape, classes: Vec<usize>, task: usize, seed: u64) -> Self {
        Self {
            shape,
            images: Vec::new(),
            labels: Vec::new(),
            classes,
            provenance: Provenance {
                task,
                rounds: Vec::new(),
                seed,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    /// Classes pseudo labels may take.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Appends a `(B, C, H, W)` batch produced in `round`.
    pub fn append(&mut self, images: &Tensor, labels: &[usize], round: usize) -> Result<()> {
        let (b, c, h, w) = images.dims4()?;
        if (c, h, w) != self.shape.dims() || b != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "memory of {:?} cannot take batch {:?} with {} labels",
                self.shape.dims(),
                images.dims(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|l| !self.classes.contains(l)) {
            return Err(Error::InvalidArgument(format!("pseudo label {bad} is not a previous class")));
        }
        self.images
            .extend(images.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
        self.labels.extend_from_slice(labels);
        self.provenance.rounds.push(round);
        Ok(())
    }

    pub fn batch_tensor(&self, indices: &[usize], dtype: DType) -> Result<Tensor> {
        let n = self.shape.numel();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("memory index {i} out of range")));
            }
            out.extend_from_slice(&self.images[i * n..(i + 1) * n]);
        }
        let (c, h, w) = self.shape.dims();
        Ok(Tensor::from_vec(out, (indices.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let image_bytes = f32s_to_bytes(&self.images);
        let labels: Vec<u32> = self.labels.iter().map(|&l| l as u32).collect();
        let manifest = MemoryManifest {
            count: self.len(),
            image_shape: self.shape,
            dtype: "float32-le".into(),
            classes: self.classes.clone(),
            seed: self.provenance.seed,
            task: self.provenance.task,
            rounds: self.provenance.rounds.clone(),
            image_bytes: image_bytes.len(),
        };
        let mut payload = image_bytes;
        payload.extend(u32s_to_bytes(&labels));
        archive::write(path, MEMORY_MAGIC, &manifest, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, payload): (MemoryManifest, Vec<u8>) = archive::read(path, MEMORY_MAGIC)?;
        let corrupt = |reason: &str| Error::Archive {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if m.image_bytes > payload.len() || m.image_bytes != m.count * m.image_shape.numel() * 4 {
            return Err(corrupt("image blob size disagrees with manifest"));
        }
        let images = bytes_to_f32s(&payload[..m.image_bytes])?;
        let labels: Vec<usize> = bytes_to_u32s(&payload[m.image_bytes..])?
            .into_iter()
            .map(|l| l as usize)
            .collect();
        if labels.len() != m.count {
            return Err(corrupt("label blob size disagrees with manifest"));
        }
        Ok(Self {
            shape: m.image_shape,
            images,
            labels,
            classes: m.classes,
            provenance: Provenance {
                task: m.task,
                rounds: m.rounds,
                seed: m.seed,
            },
        })
    }
}

/// Uniform i.i.d. draws over `prev_classes`.
pub fn sample_pseudo_labels(prev_classes: &[usize], batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if prev_classes.is_empty() {
        return Err(Error::NoPreviousClasses);
    }
    Ok((0..batch_size)
        .map(|_| prev_classes[rng.random_range(0..prev_classes.len())])
        .collect())
}

/// Per-round generation diagnostics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub attempts: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub student_loss: f64,
}

/// Generator, noisy layer, data stats and student for one task's generation.
pub struct GeneratorBundle {
    config: GenerationConfig,
    generator: GeneratorModel,
    generator_vars: Vec<Var>,
    data_stats: LearnableDataStats,
    stats_vars: Vec<Var>,
    noisy: Option<NoisyLayer>,
    student: ClassifierModel,
    student_opt: Sgd,
    embed_dim: usize,
    seed: u64,
    dtype: DType,
}

impl GeneratorBundle {
    pub fn new(
        config: GenerationConfig,
        image: ImageShape,
        teacher: &FrozenClassifier,
        embed_dim: usize,
        dataset_stats: Option<&ChannelStats>,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let gen_config = GeneratorConfig {
            image,
            latent_dim: config.latent_dim,
            scale: config.generator_scale,
            variant: config.generator_variant,
            trailing_bn: config.trailing_bn,
        };
        let mut generator = GeneratorModel::new(gen_config, rng::derive_seed(seed, "generator"), dtype)?;
        let generator_vars = attach_trainable(&mut generator)?;
        let mut data_stats = LearnableDataStats::new(
            config.data_stats,
            image.channels,
            dataset_stats,
            rng::derive_seed(seed, "data-stats"),
            dtype,
        )?;
        let stats_vars = attach_trainable(&mut data_stats)?;
        let mut student = ClassifierModel::new(teacher.config().clone(), rng::derive_seed(seed, "student"), dtype)?;
        let student_vars = attach_trainable(&mut student)?;
        let student_opt = Sgd::new(student_vars, config.student_lr, config.student_momentum, 0.0);
        Ok(Self {
            config,
            generator,
            generator_vars,
            data_stats,
            stats_vars,
            noisy: None,
            student,
            student_opt,
            embed_dim,
            seed,
            dtype,
        })
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.config
    }

    pub fn generator(&self) -> &GeneratorModel {
        &self.generator
    }

    pub fn data_stats(&self) -> &LearnableDataStats {
        &self.data_stats
    }

    pub fn student(&self) -> &ClassifierModel {
        &self.student
    }

    /// Replaces the noisy layer with a freshly initialized one.
    pub fn reinit_noisy_layer(&mut self, seed: u64) -> Result<Vec<Var>> {
        if self.config.noisy_input == NoisyInput::Noise {
            self.noisy = None;
            return Ok(Vec::new());
        }
        let mut layer = NoisyLayer::new(self.embed_dim, self.config.latent_dim, seed, self.dtype)?;
        let vars = attach_trainable(&mut layer)?;
        self.noisy = Some(layer);
        Ok(vars)
    }

    fn latent(&self, pool: &LtePool, labels: &[usize], noise_seed: u64) -> Result<Tensor> {
        match &self.noisy {
            Some(layer) => {
                let anchors = pool.query_batch(labels, self.dtype, &Device::Cpu)?;
                layer.forward(&anchors)
            }
            None => gaussian_latent(labels.len(), self.config.latent_dim, noise_seed, self.dtype),
        }
    }

    /// `(G(Z(e_y)) - mu) / sigma`, with generator batch-norm statistics.
    fn synthesize_with_taps(
        &self,
        pool: &LtePool,
        labels: &[usize],
        noise_seed: u64,
    ) -> Result<(Tensor, Vec<BnTap>)> {
        for &y in labels {
            if !pool.contains(y) {
                return Err(Error::UnknownLabel(y));
            }
        }
        let out = self.generator.forward(&self.latent(pool, labels, noise_seed)?, ForwardMode::Train)?;
        Ok((self.data_stats.apply(&out.image)?, out.taps))
    }

    /// Synthesizes a batch for `labels` with the current noisy layer.
    pub fn synthesize_batch(&mut self, pool: &LtePool, labels: &[usize]) -> Result<Tensor> {
        if self.noisy.is_none() && self.config.noisy_input == NoisyInput::Lte {
            self.reinit_noisy_layer(rng::derive_seed(self.seed, "noisy/initial"))?;
        }
        Ok(self.synthesize_with_taps(pool, labels, rng::derive_seed(self.seed, "noise/adhoc"))?.0)
    }

    fn generation_loss(
        &self,
        teacher: &FrozenClassifier,
        pool: &LtePool,
        labels: &[usize],
        anchors: &Tensor,
        weights: &LossWeights,
        noise_seed: u64,
    ) -> Result<(Tensor, Vec<BnTap>)> {
        let (x, gen_taps) = self.synthesize_with_taps(pool, labels, noise_seed)?;
        let t = teacher.forward(&x, ForwardMode::Inversion)?;
        let student = detached(&self.student);
        let s = student.forward(&x, ForwardMode::Eval)?;
        let bn = match self.config.bn_target {
            BnTarget::Teacher => gen_bn_loss(&t.taps, &teacher.running_stats())?,
            BnTarget::Generator => gen_bn_loss(&gen_taps, &self.generator.running_stats())?,
        };
        let oh = gen_oh_loss(&t.logits, labels)?;
        let adv = gen_adv_loss(&s.logits, &t.logits, weights.kd_temperature)?;
        let ltc = gen_ltc_loss(&teacher.project(&t.features)?, anchors, weights.radius)?;
        let weights = LossWeights {
            lambda_ltc: self.config.lambda_ltc,
            ..*weights
        };
        if log::log_enabled!(log::Level::Trace) {
            log::trace!(
                "adv {:.4} bn {:.4} oh {:.4} ltc {:.4}",
                scalar(&adv)?,
                scalar(&bn)?,
                scalar(&oh)?,
                scalar(&ltc)?
            );
        }
        Ok((gen_total(&adv, &bn, &oh, &ltc, &weights)?, gen_taps))
    }

    /// One round: fresh noisy layer, `g` Adam steps on the generator objective
    /// over `{G, Z, mu, sigma}`, then the final batch. A non-finite loss aborts
    /// the attempt and retries once with a reseeded noisy layer.
    pub fn generation_round(
        &mut self,
        teacher: &FrozenClassifier,
        pool: &LtePool,
        labels: &[usize],
        weights: &LossWeights,
        round: usize,
    ) -> Result<(Tensor, RoundStats)> {
        let anchors = pool.query_batch(labels, self.dtype, &Device::Cpu)?;
        for attempt in 0..2 {
            let round_seed = rng::derive_seed(self.seed, &format!("round-{round}/attempt-{attempt}"));
            let noisy_vars = self.reinit_noisy_layer(round_seed)?;
            let mut vars = self.generator_vars.clone();
            vars.extend(self.stats_vars.iter().cloned());
            vars.extend(noisy_vars);
            let mut opt = Adam::new(vars, self.config.generator_lr);
            let mut stats = RoundStats {
                round,
                attempts: attempt + 1,
                ..Default::default()
            };
            let mut finite = true;
            for step in 0..self.config.steps {
                self.generator.refresh_spectral_norms()?;
                let (loss, taps) = self.generation_loss(teacher, pool, labels, &anchors, weights, round_seed)?;
                let value = scalar(&loss)?;
                if !value.is_finite() {
                    finite = false;
                    break;
                }
                if step == 0 {
                    stats.first_loss = value;
                }
                stats.final_loss = value;
                opt.step(&loss.backward()?)?;
                self.generator.update_running_stats(&taps)?;
            }
            if !finite {
                log::warn!("round {round}: non-finite generator loss on attempt {}", attempt + 1);
                continue;
            }
            let (x, _) = self.synthesize_with_taps(pool, labels, round_seed)?;
            let x = x.detach();
            let check = x.sqr()?.sum_all()?;
            if !scalar(&check)?.is_finite() {
                continue;
            }
            return Ok((x, stats));
        }
        Err(Error::NonFiniteLoss { round })
    }

    /// One shuffled pass over the whole memory distilling the teacher into
    /// the student (KL on logits plus feature MSE). Returns the mean loss.
    pub fn train_student_on_memory(&mut self, teacher: &FrozenClassifier, memory: &SyntheticMemory, seed: u64) -> Result<f64> {
        if memory.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let mut order: Vec<usize> = (0..memory.len()).collect();
        order.shuffle(&mut rng::stream(seed, "student/order"));
        let (mut total, mut steps) = (0.0, 0usize);
        for batch in order.chunks(self.config.student_batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let x = memory.batch_tensor(batch, self.dtype)?;
            let t = teacher.forward(&x, ForwardMode::Eval)?;
            let s = self.student.forward(&x, ForwardMode::Train)?;
            let loss = (kd_kl(&s.logits, &t.logits, 1.0)? + feature_mse(&s.features, &t.features)?)?;
            total += scalar(&loss)?;
            steps += 1;
            self.student_opt.step(&loss.backward()?)?;
            self.student.update_running_stats(&s.taps)?;
        }
        Ok(if steps == 0 { 0.0 } else { total / steps as f64 })
    }
}

/// Fraction of memory samples whose teacher argmax equals the pseudo label.
pub fn teacher_agreement(teacher: &FrozenClassifier, memory: &SyntheticMemory, dtype: DType) -> Result<f64> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let mut agree = 0usize;
    let indices: Vec<usize> = (0..memory.len()).collect();
    for batch in indices.chunks(256) {
        let x = memory.batch_tensor(batch, dtype)?;
        let pred = argmax_rows(&teacher.forward(&x, ForwardMode::Eval)?.logits)?;
        agree += pred
            .iter()
            .zip(memory.batch_labels(batch))
            .filter(|(p, y)| **p == *y)
            .count();
    }
    Ok(agree as f64 / memory.len() as f64)
}

/// Teacher cross-entropy of `x` against `labels`.
pub fn teacher_ce(teacher: &FrozenClassifier, x: &Tensor, labels: &[usize]) -> Result<f64> {
    scalar(&cross_entropy(&teacher.forward(x, ForwardMode::Eval)?.logits, labels)?)
}

/// Inputs of a task's generation phase.
pub struct GenerationJob<'a> {
    pub teacher: &'a FrozenClassifier,
    pub pool: &'a LtePool,
    pub prev_classes: &'a [usize],
    pub image: ImageShape,
    pub embed_dim: usize,
    pub dataset_stats: Option<&'a ChannelStats>,
    pub weights: LossWeights,
    /// Task that will consume the memory.
    pub task: usize,
    pub seed: u64,
    pub dtype: DType,
}

/// `I` rounds of generation, each followed by a student pass over the
/// accumulated memory. Produces `I * B` samples.
pub fn data_generation(job: &GenerationJob<'_>, config: &GenerationConfig) -> Result<(SyntheticMemory, Vec<RoundStats>)> {
    if job.prev_classes.is_empty() {
        return Err(Error::NoPreviousClasses);
    }
    let mut bundle = GeneratorBundle::new(
        config.clone(),
        job.image,
        job.teacher,
        job.embed_dim,
        job.dataset_stats,
        job.seed,
        job.dtype,
    )?;
    let mut memory = SyntheticMemory::new(job.image, job.prev_classes.to_vec(), job.task, job.seed);
    let mut label_rng = rng::stream(job.seed, "pseudo-labels");
    let mut log = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let labels = sample_pseudo_labels(job.prev_classes, config.batch_size, &mut label_rng)?;
        let (x, mut stats) = bundle.generation_round(job.teacher, job.pool, &labels, &job.weights, round)?;
        memory.append(&x, &labels, round)?;
        stats.student_loss =
            bundle.train_student_on_memory(job.teacher, &memory, rng::derive_seed(job.seed, &format!("student-{round}")))?;
        log::debug!(
            "generation round {round}: loss {:.4} -> {:.4}, student {:.4}",
            stats.first_loss,
            stats.final_loss,
            stats.student_loss
        );
        log.push(stats);
    }
    Ok((memory, log))
}
