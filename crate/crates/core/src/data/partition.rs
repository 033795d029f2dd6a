//! Class-incremental task splitting and client partitioning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    /// Dirichlet concentration; smaller values give more skewed clients.
    pub beta: f64,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == PartitionMode::Dirichlet && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidValue {
                key: "partition.beta".into(),
                reason: format!("must be positive, got {}", self.beta),
            });
        }
        Ok(())
    }
}

/// Splits `class_ids` into `num_tasks` equal, disjoint groups.
///
/// With `shuffle_seed == None` the classes keep their sorted order; otherwise
/// they are shuffled deterministically first. Each group is returned sorted.
pub fn split_classes_into_tasks(class_ids: &[usize], num_tasks: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if num_tasks == 0 {
        return Err(Error::InvalidArgument("num_tasks must be at least 1".into()));
    }
    if class_ids.len() % num_tasks != 0 || class_ids.is_empty() {
        return Err(Error::IndivisibleClasses {
            num_classes: class_ids.len(),
            num_tasks,
        });
    }
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("duplicate class ids".into()));
    }
    if let Some(seed) = shuffle_seed {
        ids.shuffle(&mut rng::stream(seed, "class-order"));
    }
    let per_task = ids.len() / num_tasks;
    Ok(ids
        .chunks(per_task)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect())
}

fn positions_by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    by_class
}

/// Assigns positions of `labels` to clients with per-class Dirichlet(beta)
/// proportions. Empty clients are legal.
pub fn dirichlet_partition(labels: &[usize], num_clients: usize, beta: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("num_clients must be at least 1".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidValue {
            key: "beta".into(),
            reason: format!("must be positive, got {beta}"),
        });
    }
    let mut rng = rng::stream(seed, "partition/dirichlet");
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut clients = vec![Vec::new(); num_clients];
    for (_, mut members) in positions_by_class(labels) {
        members.shuffle(&mut rng);
        let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let proportions: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|d| d / total).collect()
        } else {
            // every draw underflowed: the mass collapses onto one client
            let winner = rng.random_range(0..num_clients);
            (0..num_clients).map(|k| if k == winner { 1.0 } else { 0.0 }).collect()
        };
        let n = members.len();
        let mut start = 0usize;
        let mut cumulative = 0.0;
        for (k, p) in proportions.iter().enumerate() {
            cumulative += p;
            let end = if k + 1 == num_clients {
                n
            } else {
                ((cumulative * n as f64).round() as usize).clamp(start, n)
            };
            clients[k].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(clients)
}

/// Shuffled per-class round-robin split. The starting client rotates across
/// classes so client totals stay balanced as well.
pub fn iid_partition(labels: &[usize], num_clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("num_clients must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, "partition/iid");
    let mut clients = vec![Vec::new(); num_clients];
    let mut next = 0usize;
    for (_, mut members) in positions_by_class(labels) {
        members.shuffle(&mut rng);
        for m in members {
            clients[next].push(m);
            next = (next + 1) % num_clients;
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(clients)
}

pub fn partition(labels: &[usize], num_clients: usize, config: &PartitionConfig) -> Result<Vec<Vec<usize>>> {
    match config.mode {
        PartitionMode::Iid => iid_partition(labels, num_clients, config.seed),
        PartitionMode::Dirichlet => dirichlet_partition(labels, num_clients, config.beta, config.seed),
    }
}

/// Ordered task class sets plus each client's sample indices per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSchedule {
    tasks: Vec<Vec<usize>>,
    /// `client_indices[task][client]` holds dataset indices.
    client_indices: Vec<Vec<Vec<usize>>>,
    num_clients: usize,
}

impl TaskSchedule {
    /// Partitions every task's samples across `num_clients` clients.
    ///
    /// Each task uses its own derived partition seed so tasks are skewed
    /// independently.
    pub fn build(labels: &[usize], tasks: Vec<Vec<usize>>, num_clients: usize, config: &PartitionConfig) -> Result<Self> {
        config.validate()?;
        for (i, a) in tasks.iter().enumerate() {
            for b in &tasks[i + 1..] {
                if a.iter().any(|c| b.contains(c)) {
                    return Err(Error::InvalidArgument("task class sets overlap".into()));
                }
            }
        }
        let mut client_indices = Vec::with_capacity(tasks.len());
        for (t, classes) in tasks.iter().enumerate() {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| classes.contains(&labels[i])).collect();
            let task_labels: Vec<usize> = members.iter().map(|&i| labels[i]).collect();
            let task_config = PartitionConfig {
                seed: rng::derive_seed(config.seed, &format!("task-{t}")),
                ..config.clone()
            };
            let parts = partition(&task_labels, num_clients, &task_config)?;
            client_indices.push(
                parts
                    .into_iter()
                    .map(|p| p.into_iter().map(|pos| members[pos]).collect())
                    .collect(),
            );
        }
        Ok(Self {
            tasks,
            client_indices,
            num_clients,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn tasks(&self) -> &[Vec<usize>] {
        &self.tasks
    }

    pub fn task_classes(&self, task: usize) -> &[usize] {
        &self.tasks[task]
    }

    /// Classes of tasks `0..task` (exclusive).
    pub fn classes_before(&self, task: usize) -> Vec<usize> {
        self.tasks[..task].iter().flatten().copied().collect()
    }

    pub fn client_indices(&self, task: usize, client: usize) -> &[usize] {
        &self.client_indices[task][client]
    }
}

/// Mean Shannon entropy (nats) of per-client label distributions; empty
/// clients are skipped.
pub fn mean_client_label_entropy(labels: &[usize], clients: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for client in clients.iter().filter(|c| !c.is_empty()) {
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in client {
            *hist.entry(labels[i]).or_default() += 1;
        }
        let n = client.len() as f64;
        total -= hist
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>();
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_labels(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes * per_class).map(|i| i % classes).collect()
    }

    fn assert_complete(clients: &[Vec<usize>], n: usize) {
        let mut all: Vec<usize> = clients.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn split_examples() {
        let classes: Vec<usize> = (0..100).collect();
        let tasks = split_classes_into_tasks(&classes, 5, Some(3)).unwrap();
        assert_eq!(tasks.len(), 5);
        assert!(tasks.iter().all(|t| t.len() == 20));
        let mut all: Vec<usize> = tasks.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, classes);

        let ten: Vec<usize> = (0..10).collect();
        assert_eq!(split_classes_into_tasks(&ten, 1, Some(9)).unwrap(), vec![ten.clone()]);
        assert!(matches!(
            split_classes_into_tasks(&ten, 3, None),
            Err(Error::IndivisibleClasses { .. })
        ));
        assert_eq!(split_classes_into_tasks(&ten, 2, None).unwrap()[0], vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced_labels(4, 7);
        for clients in [
            dirichlet_partition(&labels, 1, 0.3, 1).unwrap(),
            iid_partition(&labels, 1, 1).unwrap(),
        ] {
            assert_eq!(clients.len(), 1);
            assert_eq!(clients[0], (0..labels.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn iid_even_split() {
        let labels = balanced_labels(10, 10);
        let clients = iid_partition(&labels, 5, 4).unwrap();
        assert!(clients.iter().all(|c| c.len() == 20));
        assert_complete(&clients, 100);
        for c in &clients {
            for class in 0..10 {
                let count = c.iter().filter(|&&i| labels[i] == class).count();
                assert!((count as i64 - 2).abs() <= 1);
            }
        }
    }

    #[test]
    fn dirichlet_rejects_nonpositive_beta() {
        assert!(dirichlet_partition(&[0, 1], 2, 0.0, 0).is_err());
        assert!(dirichlet_partition(&[0, 1], 0, 1.0, 0).is_err());
    }

    #[test]
    fn dirichlet_huge_beta_is_near_uniform() {
        let labels = balanced_labels(10, 200);
        for seed in 0..10 {
            let clients = dirichlet_partition(&labels, 2, 1e6, seed).unwrap();
            for c in &clients {
                for class in 0..10 {
                    let count = c.iter().filter(|&&i| labels[i] == class).count() as f64;
                    assert!((count - 100.0).abs() <= 5.0, "seed {seed}: {count}");
                }
            }
        }
    }

    #[test]
    fn dirichlet_small_beta_is_more_skewed() {
        let labels = balanced_labels(10, 50);
        let mean_entropy = |beta: f64| {
            (0..10)
                .map(|s| mean_client_label_entropy(&labels, &dirichlet_partition(&labels, 5, beta, s).unwrap()))
                .sum::<f64>()
                / 10.0
        };
        assert!(mean_entropy(0.1) < mean_entropy(1.0));
    }

    #[test]
    fn schedule_covers_each_task() {
        let labels = balanced_labels(6, 10);
        let tasks = split_classes_into_tasks(&(0..6).collect::<Vec<_>>(), 3, None).unwrap();
        let cfg = PartitionConfig {
            mode: PartitionMode::Dirichlet,
            beta: 0.5,
            seed: 11,
        };
        let sched = TaskSchedule::build(&labels, tasks, 3, &cfg).unwrap();
        for t in 0..3 {
            let mut all: Vec<usize> = (0..3).flat_map(|k| sched.client_indices(t, k).to_vec()).collect();
            all.sort_unstable();
            let expected: Vec<usize> = (0..60).filter(|&i| sched.task_classes(t).contains(&labels[i])).collect();
            assert_eq!(all, expected);
        }
        assert_eq!(sched.classes_before(2), vec![0, 1, 2, 3]);
    }

    proptest::proptest! {
        #[test]
        fn partitions_are_complete_and_deterministic(
            labels in proptest::collection::vec(0usize..6, 1..200),
            clients in 1usize..7,
            beta in 0.05f64..5.0,
            seed in 0u64..1000,
        ) {
            let d = dirichlet_partition(&labels, clients, beta, seed).unwrap();
            assert_complete(&d, labels.len());
            proptest::prop_assert_eq!(&d, &dirichlet_partition(&labels, clients, beta, seed).unwrap());
            let i = iid_partition(&labels, clients, seed).unwrap();
            assert_complete(&i, labels.len());
            proptest::prop_assert_eq!(&i, &iid_partition(&labels, clients, seed).unwrap());
        }
    }
}
