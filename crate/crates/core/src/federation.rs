//! Task loop, memory generation, and communication rounds of broadcast,
//! local update and aggregation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::client::{ClientContext, ClientObjective, ClientReport, ClientState};
use crate::config::{AggregationMode, DataSource, ExperimentConfig};
use crate::data::{
    load_image_folder, split_classes_into_tasks, synthetic_blobs_dataset, ChannelStats, ClientShard, LabeledDataset,
    TaskSchedule,
};
use crate::error::{Error, Result};
use crate::generation::{data_generation, GenerationJob, RoundStats, SyntheticMemory};
use crate::losses::{adaptive_scale_factors, ScaleFactors};
use crate::lte::LtePool;
use crate::metrics::{eval_counts, AccuracyHistory, EvalCounts, MetricsReport};
use crate::nn::{load_state_dict, state_dict, ClassifierConfig, ClassifierModel, FrozenClassifier, ModelSnapshot, StateDict};
use crate::rng::SeedTree;

pub const CACHE_ENV: &str = "LANDER_CACHE";

/// Weighted mean of state dicts, computed per element in `f64`.
///
/// Each element's weighted terms are added in ascending order, so permuting
/// clients together with their weights leaves the result bit-identical.
///
/// Buffers (running statistics) are averaged with the same weights. Clients
/// with zero weight are skipped, so a one-hot weight vector returns that
/// client's tensors exactly.
pub fn aggregate(states: &[StateDict], weights: &[f64]) -> Result<StateDict> {
    if states.is_empty() || states.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} states with {} weights",
            states.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("aggregation weights must be finite and nonnegative".into()));
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllZeroWeights);
    }
    let reference = &states[0];
    for (k, s) in states.iter().enumerate().skip(1) {
        if s.len() != reference.len() {
            return Err(Error::ShapeMismatch(format!("client {k} has {} tensors, client 0 has {}", s.len(), reference.len())));
        }
        for (name, t) in reference {
            let other = s
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("client {k} lacks tensor `{name}`")))?;
            if other.dims() != t.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{name}`: {:?} vs {:?} on client {k}",
                    t.dims(),
                    other.dims()
                )));
            }
        }
    }
    let active: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(k, w)| (k, *w / total))
        .collect();
    let mut out = StateDict::new();
    for (name, t) in reference {
        let dtype = t.dtype();
        let columns = active
            .iter()
            .map(|&(k, _)| Ok(states[k][name].flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?))
            .collect::<Result<Vec<_>>>()?;
        let acc: Vec<f64> = if active.len() == 1 {
            columns.into_iter().next().expect("one active client")
        } else {
            // Terms are summed in value order, so the result ignores client order.
            let mut terms = vec![0f64; active.len()];
            (0..t.elem_count())
                .map(|i| {
                    for (term, (&(_, w), column)) in terms.iter_mut().zip(active.iter().zip(&columns)) {
                        *term = w * column[i];
                    }
                    terms.sort_by(f64::total_cmp);
                    terms.iter().sum()
                })
                .collect()
        };
        let merged = Tensor::from_vec(acc, t.dims(), &Device::Cpu)?.to_dtype(dtype)?;
        out.insert(name.clone(), merged);
    }
    Ok(out)
}

/// Aggregation weights for the given per-client real sample counts.
pub fn aggregation_weights(sample_counts: &[usize], mode: AggregationMode) -> Vec<f64> {
    match mode {
        AggregationMode::Weighted => sample_counts.iter().map(|&n| n as f64).collect(),
        AggregationMode::Uniform => vec![1.0; sample_counts.len()],
    }
}

/// One communication round's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub task: usize,
    pub round: usize,
    pub client_losses: Vec<f64>,
    pub client_steps: Vec<usize>,
    /// Server accuracy on each seen task's test split.
    pub task_accuracy: Vec<f64>,
    /// Server accuracy on the union of seen test splits.
    pub union_accuracy: f64,
    pub wall_ms: u128,
}

/// Result of a single task.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub task: usize,
    pub snapshot: ModelSnapshot,
    pub rounds: Vec<RoundLog>,
    pub memory: Option<SyntheticMemory>,
    pub generation: Vec<RoundStats>,
    /// End-of-task accuracy on every seen task.
    pub accuracy_row: Vec<f64>,
    pub client_reports: Vec<ClientReport>,
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub history: AccuracyHistory,
    pub tasks: Vec<TaskOutcome>,
    pub generation_events: usize,
}

/// Run directory layout.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_lock(&self) -> PathBuf {
        self.root.join("config.lock")
    }

    pub fn checkpoint(&self, task: usize) -> PathBuf {
        self.root.join("ckpt").join(format!("task_{task}.bin"))
    }

    pub fn memory(&self, task: usize) -> PathBuf {
        self.root.join("memory").join(format!("task_{task}.mem"))
    }

    pub fn rounds_csv(&self) -> PathBuf {
        self.root.join("logs").join("rounds.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
}

fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";")
}

fn write_rounds_csv(path: &Path, rounds: &[RoundLog]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", "round", "union_accuracy", "task_accuracy", "client_losses", "client_steps", "wall_ms"])?;
    for r in rounds {
        w.write_record([
            r.task.to_string(),
            r.round.to_string(),
            format!("{:.6}", r.union_accuracy),
            join_floats(&r.task_accuracy),
            join_floats(&r.client_losses),
            r.client_steps.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads the train and test datasets named by the config.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let shape = config.image_shape();
    let seeds = SeedTree::new(config.runtime.seed);
    let (train, test) = match config.data.source {
        DataSource::Blobs => (
            synthetic_blobs_dataset(config.data.num_classes, config.data.train_per_class, shape, seeds.seed("data/train"))?,
            synthetic_blobs_dataset(config.data.num_classes, config.data.test_per_class, shape, seeds.seed("data/test"))?,
        ),
        DataSource::Folder => {
            let load = |split: &str| {
                let dir = Path::new(&config.data.path).join(split);
                load_image_folder(&dir, shape).map_err(|e| Error::DatasetUnavailable {
                    path: dir.display().to_string(),
                    reason: e.to_string(),
                })
            };
            (load("train")?, load("test")?)
        }
    };
    for (name, d) in [("train", &train), ("test", &test)] {
        if d.num_classes() != config.data.num_classes {
            return Err(Error::InvalidValue {
                key: "data.num_classes".into(),
                reason: format!("{name} split has {} classes", d.num_classes()),
            });
        }
    }
    Ok((train, test))
}

/// Datasets, schedule and anchors shared by every task of a run.
pub struct Experiment {
    config: ExperimentConfig,
    seeds: SeedTree,
    train: LabeledDataset,
    test: LabeledDataset,
    schedule: TaskSchedule,
    pool: LtePool,
    normalization: ChannelStats,
    radius: f64,
    dtype: DType,
    config_hash: String,
    generation_events: usize,
}

impl Experiment {
    /// Loads data, relabels classes into incremental order, partitions every
    /// task across clients and builds the anchor pool.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_datasets(&config)?;
        Self::from_datasets(config, train, test)
    }

    pub fn from_datasets(config: ExperimentConfig, train: LabeledDataset, test: LabeledDataset) -> Result<Self> {
        config.validate()?;
        let seeds = SeedTree::new(config.runtime.seed);
        let k = config.data.num_classes;
        let t = config.federation.num_tasks;
        let ids: Vec<usize> = (0..k).collect();
        let shuffle = config.data.shuffle_classes.then(|| seeds.seed("class-order"));
        let order: Vec<usize> = split_classes_into_tasks(&ids, t, shuffle)?.concat();
        let mut mapping = vec![0; k];
        for (new, &old) in order.iter().enumerate() {
            mapping[old] = new;
        }
        let train = train.relabel(&mapping)?;
        let test = test.relabel(&mapping)?;
        let per_task = k / t;
        let tasks: Vec<Vec<usize>> = (0..t).map(|i| (i * per_task..(i + 1) * per_task).collect()).collect();
        let schedule = TaskSchedule::build(
            train.labels(),
            tasks,
            config.federation.num_clients,
            &config.partition_config(seeds.seed("partition")),
        )?;
        let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
        let pool = LtePool::build_cached(
            train.class_names(),
            &config.embedder_spec(),
            config.lte.template,
            config.lte.normalize,
            cache.as_deref(),
        )?;
        let radius = config.losses.r.resolve(|| pool.min_pairwise_sq_distance())?;
        let normalization = train.channel_stats();
        let config_hash = config.hash()?;
        Ok(Self {
            config,
            seeds,
            train,
            test,
            schedule,
            pool,
            normalization,
            radius,
            dtype: DType::F32,
            config_hash,
            generation_events: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn train(&self) -> &LabeledDataset {
        &self.train
    }

    pub fn test(&self) -> &LabeledDataset {
        &self.test
    }

    pub fn schedule(&self) -> &TaskSchedule {
        &self.schedule
    }

    pub fn pool(&self) -> &LtePool {
        &self.pool
    }

    pub fn normalization(&self) -> &ChannelStats {
        &self.normalization
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Number of memory-generation calls so far.
    pub fn generation_events(&self) -> usize {
        self.generation_events
    }

    /// Classes of tasks `1..=task`.
    pub fn seen_classes(&self, task: usize) -> Vec<usize> {
        self.schedule.tasks()[..task].concat()
    }

    /// Test indices of each task `1..=task`.
    pub fn test_splits(&self, task: usize) -> Vec<Vec<usize>> {
        self.schedule.tasks()[..task]
            .iter()
            .map(|classes| self.test.indices_of_classes(classes))
            .collect()
    }

    /// Fresh server model sized for the first task.
    pub fn initial_server(&self) -> Result<ClassifierModel> {
        let config = ClassifierConfig {
            arch: self.config.model.arch,
            width: self.config.model.width,
            in_channels: self.config.data.channels,
            num_classes: self.schedule.task_classes(0).len(),
            embed_dim: self.pool.dim(),
            normalize_projection: self.pool.is_normalized(),
        };
        ClassifierModel::new(config, self.seeds.seed("init"), self.dtype)
    }

    /// Per-task accuracy of `model` on tasks `1..=task`, plus union accuracy.
    pub fn evaluate(&self, model: &dyn crate::metrics::Predictor, task: usize) -> Result<(Vec<f64>, f64)> {
        let mut per_task = Vec::with_capacity(task);
        let mut union = EvalCounts::default();
        for split in self.test_splits(task) {
            let c = eval_counts(model, &self.test, &split, &self.normalization, self.dtype)?;
            per_task.push(c.percent());
            union.correct += c.correct;
            union.total += c.total;
        }
        Ok((per_task, union.percent()))
    }

    /// Synthesizes memory of the classes before `task` from the frozen
    /// previous server.
    pub fn generate_memory(&mut self, teacher: &FrozenClassifier, task: usize) -> Result<(SyntheticMemory, Vec<RoundStats>)> {
        self.generation_events += 1;
        let prev = self.seen_classes(task - 1);
        let job = GenerationJob {
            teacher,
            pool: &self.pool,
            prev_classes: &prev,
            image: self.config.image_shape(),
            embed_dim: self.pool.dim(),
            dataset_stats: Some(&self.normalization),
            weights: self.config.loss_weights(self.radius),
            task,
            seed: self.seeds.seed(&format!("generation/task-{task}")),
            dtype: self.dtype,
        };
        data_generation(&job, &self.config.generation_config())
    }

    fn scale_factors(&self, task: usize) -> Result<ScaleFactors> {
        if task == 1 {
            return Ok(ScaleFactors::current_only());
        }
        adaptive_scale_factors(
            self.schedule.task_classes(task - 1).len(),
            self.seen_classes(task - 1).len(),
            self.config.client.alpha_cur,
            self.config.client.alpha_pre,
        )
    }

    fn client_seed(&self, task: usize, round: usize, client: usize) -> u64 {
        self.seeds.seed(&format!("clients/task-{task}/round-{round}/client-{client}"))
    }

    fn run_clients(
        &self,
        server: &ClassifierModel,
        shards: &[ClientShard],
        ctx: &ClientContext<'_>,
        task: usize,
        round: usize,
    ) -> Result<Vec<(ClientState, ClientReport)>> {
        let local = self.config.local_config();
        let update = |shard: &ClientShard| -> Result<(ClientState, ClientReport)> {
            let k = shard.client();
            let mut client = ClientState::new(k, server.clone(), local.clone());
            let report = client.update(shard, ctx, self.client_seed(task, round, k))?;
            Ok((client, report))
        };
        let workers = self.config.runtime.parallel_clients.max(1);
        if self.config.runtime.sequential || workers == 1 {
            return shards.iter().map(update).collect();
        }
        let mut results = Vec::with_capacity(shards.len());
        for group in shards.chunks(workers) {
            let outcomes: Vec<Result<(ClientState, ClientReport)>> = std::thread::scope(|s| {
                let handles: Vec<_> = group.iter().map(|shard| s.spawn(|| update(shard))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidArgument("client worker panicked".into()))))
                    .collect()
            });
            for o in outcomes {
                results.push(o?);
            }
        }
        Ok(results)
    }

    /// Trains task `task` (1-based) starting from `server`, which holds the
    /// weights after task `task - 1`. `previous` is the frozen snapshot of
    /// that server and must be present exactly when `task > 1`.
    pub fn run_task(
        &mut self,
        task: usize,
        server: &mut ClassifierModel,
        previous: Option<&ModelSnapshot>,
    ) -> Result<TaskOutcome> {
        self.run_task_inner(task, server, previous).map_err(|e| e.in_task(task))
    }

    fn run_task_inner(
        &mut self,
        task: usize,
        server: &mut ClassifierModel,
        previous: Option<&ModelSnapshot>,
    ) -> Result<TaskOutcome> {
        if task == 0 || task > self.schedule.num_tasks() {
            return Err(Error::InvalidArgument(format!("task {task} outside 1..={}", self.schedule.num_tasks())));
        }
        if (task > 1) != previous.is_some() {
            return Err(Error::InvalidArgument("previous server snapshot is required exactly after task 1".into()));
        }
        for &c in self.schedule.task_classes(task - 1) {
            self.pool.query(c).map_err(|_| Error::MissingAnchor(c))?;
        }
        let seen = self.seen_classes(task).len();
        server.extend_head(seen, self.seeds.seed(&format!("head/task-{task}")))?;

        let teacher = previous.map(|s| FrozenClassifier::from_snapshot(s, self.dtype)).transpose()?;
        let objective = self.config.federation.objective;
        let (memory, generation) = match (&teacher, objective) {
            (Some(t), ClientObjective::Lander) => {
                let (m, g) = self.generate_memory(t, task)?;
                (Some(m), g)
            }
            _ => (None, Vec::new()),
        };

        let shards: Vec<ClientShard> = (0..self.schedule.num_clients())
            .map(|k| ClientShard::new(k, task, self.schedule.client_indices(task - 1, k).to_vec()))
            .collect();
        let ctx = ClientContext {
            dataset: &self.train,
            normalization: &self.normalization,
            pool: &self.pool,
            prev_server: teacher.as_ref(),
            memory: memory.as_ref(),
            factors: self.scale_factors(task)?,
            weights: self.config.loss_weights(self.radius),
            objective,
            ce_scope: self.config.client.ce_scope,
            dtype: self.dtype,
        };

        let mut rounds = Vec::with_capacity(self.config.federation.rounds);
        let mut last_reports = Vec::new();
        for round in 0..self.config.federation.rounds {
            let start = Instant::now();
            let mut step = || -> Result<(Vec<ClientReport>, Vec<f64>, f64)> {
                let results = self.run_clients(server, &shards, &ctx, task, round)?;
                let counts: Vec<usize> = results.iter().map(|(c, _)| c.sample_count).collect();
                let weights = aggregation_weights(&counts, self.config.federation.aggregation);
                let states = results.iter().map(|(c, _)| state_dict(&c.model)).collect::<Result<Vec<_>>>()?;
                let merged = aggregate(&states, &weights)?;
                load_state_dict(server, &merged, self.dtype)?;
                let (per_task, union) = self.evaluate(&*server, task)?;
                Ok((results.into_iter().map(|(_, r)| r).collect(), per_task, union))
            };
            let (reports, per_task, union) = step().map_err(|e| e.in_round(task, round))?;
            let log = RoundLog {
                task,
                round,
                client_losses: reports.iter().map(|r| r.mean_loss).collect(),
                client_steps: reports.iter().map(|r| r.steps).collect(),
                task_accuracy: per_task,
                union_accuracy: union,
                wall_ms: start.elapsed().as_millis(),
            };
            log::info!("task {task} round {round}: union accuracy {:.2}%", log.union_accuracy);
            rounds.push(log);
            last_reports = reports;
        }
        for shard in &shards {
            shard.revoke();
        }
        let accuracy_row = match rounds.last() {
            Some(r) => r.task_accuracy.clone(),
            None => self.evaluate(&*server, task)?.0,
        };
        Ok(TaskOutcome {
            task,
            snapshot: ModelSnapshot::capture(server, task, self.config.runtime.seed)?,
            rounds,
            memory,
            generation,
            accuracy_row,
            client_reports: last_reports,
        })
    }

    /// Runs every task, writing artifacts under `out` when given.
    pub fn run(&mut self, out: Option<&RunDir>) -> Result<ExperimentOutcome> {
        if let Some(dir) = out {
            fs::create_dir_all(dir.root())?;
            fs::write(dir.config_lock(), self.config.to_toml()?)?;
        }
        let sizes: Vec<usize> = self.test_splits(self.schedule.num_tasks()).iter().map(Vec::len).collect();
        let mut history = AccuracyHistory::new(sizes);
        let mut server = self.initial_server()?;
        let mut previous: Option<ModelSnapshot> = None;
        let mut outcomes = Vec::with_capacity(self.schedule.num_tasks());
        let mut all_rounds = Vec::new();
        for task in 1..=self.schedule.num_tasks() {
            let outcome = self.run_task(task, &mut server, previous.as_ref())?;
            history.push(outcome.accuracy_row.clone()).map_err(|e| e.in_task(task))?;
            all_rounds.extend(outcome.rounds.iter().cloned());
            if let Some(dir) = out {
                let write = || -> Result<()> {
                    outcome.snapshot.save(&dir.checkpoint(task))?;
                    if let Some(m) = &outcome.memory {
                        m.save(&dir.memory(task))?;
                    }
                    write_rounds_csv(&dir.rounds_csv(), &all_rounds)
                };
                write().map_err(|e| e.in_task(task))?;
            }
            previous = Some(outcome.snapshot.clone());
            outcomes.push(outcome);
        }
        let report = MetricsReport::from_history(&history, self.config_hash.clone(), self.config.runtime.seed)?;
        if let Some(dir) = out {
            fs::write(dir.metrics(), serde_json::to_string_pretty(&report)?)?;
        }
        Ok(ExperimentOutcome {
            report,
            history,
            tasks: outcomes,
            generation_events: self.generation_events,
        })
    }
}

/// Prepares and runs a full experiment.
pub fn run_experiment(config: ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let dir = out.map(RunDir::new);
    Experiment::prepare(config)?.run(dir.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_classifier;
    use proptest::prelude::*;

    fn scalar_state(v: f32) -> StateDict {
        let mut s = StateDict::new();
        s.insert("w".into(), Tensor::new(&[v], &Device::Cpu).unwrap());
        s
    }

    fn value(s: &StateDict) -> f32 {
        s["w"].to_vec1::<f32>().unwrap()[0]
    }

    #[test]
    fn weighted_scalar_example() {
        let out = aggregate(&[scalar_state(0.0), scalar_state(4.0)], &[1.0, 3.0]).unwrap();
        assert_eq!(value(&out), 3.0);
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(
            aggregate(&[scalar_state(1.0), scalar_state(2.0)], &[0.0, 0.0]),
            Err(Error::AllZeroWeights)
        ));
        let mut wide = StateDict::new();
        wide.insert("w".into(), Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap());
        assert!(matches!(aggregate(&[scalar_state(1.0), wide], &[1.0, 1.0]), Err(Error::ShapeMismatch(_))));
        let mut other = StateDict::new();
        other.insert("v".into(), Tensor::new(&[1f32], &Device::Cpu).unwrap());
        assert!(matches!(aggregate(&[scalar_state(1.0), other], &[1.0, 1.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn one_hot_weights_return_client_exactly() {
        let a = state_dict(&build_classifier("small_cnn", 4, 3, 8, 1, DType::F32).unwrap()).unwrap();
        let b = state_dict(&build_classifier("small_cnn", 4, 3, 8, 2, DType::F32).unwrap()).unwrap();
        let out = aggregate(&[a.clone(), b.clone()], &[0.0, 5.0]).unwrap();
        for (name, t) in &b {
            assert_eq!(out[name].flatten_all().unwrap().to_vec1::<f32>().unwrap(), t.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }

    #[test]
    fn uniform_and_weighted_modes() {
        assert_eq!(aggregation_weights(&[2, 0, 6], AggregationMode::Weighted), vec![2.0, 0.0, 6.0]);
        assert_eq!(aggregation_weights(&[2, 0, 6], AggregationMode::Uniform), vec![1.0, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn permutation_invariant(values in prop::collection::vec(-10f32..10.0, 3), weights in prop::collection::vec(0.1f64..5.0, 3)) {
            let states: Vec<StateDict> = values.iter().map(|&v| scalar_state(v)).collect();
            let a = value(&aggregate(&states, &weights).unwrap());
            let rev_states: Vec<StateDict> = states.iter().rev().cloned().collect();
            let rev_weights: Vec<f64> = weights.iter().rev().copied().collect();
            let b = value(&aggregate(&rev_states, &rev_weights).unwrap());
            prop_assert!((a - b).abs() <= 1e-7 * (1.0 + a.abs()));
        }

        #[test]
        fn identical_clients_are_fixed_points(v in -10f32..10.0, weights in prop::collection::vec(0.1f64..5.0, 4)) {
            let states = vec![scalar_state(v); 4];
            let out = value(&aggregate(&states, &weights).unwrap());
            prop_assert!((out - v).abs() <= 1e-7 * (1.0 + v.abs()));
        }
    }
}
