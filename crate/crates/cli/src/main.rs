//! `lander` command-line runner.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lander_core::config::{load_config, ExperimentConfig};
use lander_core::data::mean_client_label_entropy;
use lander_core::federation::{Experiment, RunDir};
use lander_core::generation::{teacher_agreement, SyntheticMemory};
use lander_core::nn::{FrozenClassifier, ModelSnapshot};
use lander_core::report::{ablation_ordering, curve_csv, load_run, render_table, summarize, summarize_run};

#[derive(Parser)]
#[command(name = "lander", version, about = "Federated class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every task and write checkpoints, memories, logs and metrics.
    Run(CommonArgs),
    /// Print each client's per-task class histogram without training.
    PartitionPreview(CommonArgs),
    /// Synthesize replay memory from a saved checkpoint.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint whose classes are replayed.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only report the planned memory size.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint on the seen test splits.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also measure teacher agreement with this memory archive.
        #[arg(long)]
        memory: Option<PathBuf>,
    },
    /// Summarize finished run directories.
    Report {
        /// Run directories containing `config.lock` and `metrics.json`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for `curves.csv` and `table.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent client updates per round.
    #[arg(long, value_name = "N")]
    parallel_clients: Option<usize>,
    /// Bit-reproducible single-threaded client updates.
    #[arg(long)]
    sequential: bool,
}

impl CommonArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("runtime.seed={seed}"));
        }
        if let Some(n) = self.parallel_clients {
            overrides.push(format!("runtime.parallel_clients={n}"));
            overrides.push("runtime.sequential=false".into());
        }
        if self.sequential {
            overrides.push("runtime.sequential=true".into());
        }
        Ok(load_config(self.config.as_deref(), &overrides)?)
    }
}

/// Exclusive ownership of a run directory for the life of the process.
struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("run directory {} is locked by another process", dir.display()))?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn cmd_run(args: &CommonArgs) -> Result<()> {
    let config = args.resolve()?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
    let _lock = RunLock::acquire(&out)?;
    let mut experiment = Experiment::prepare(config.clone())?;
    let outcome = experiment.run(Some(&RunDir::new(&out)))?;
    let summary = summarize_run(&config, outcome.report);
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_partition_preview(args: &CommonArgs) -> Result<()> {
    let experiment = Experiment::prepare(args.resolve()?)?;
    let schedule = experiment.schedule();
    let labels = experiment.train().labels();
    for t in 0..schedule.num_tasks() {
        let classes = schedule.task_classes(t);
        println!("task {} classes {:?}", t + 1, classes);
        let clients: Vec<Vec<usize>> = (0..schedule.num_clients())
            .map(|k| schedule.client_indices(t, k).to_vec())
            .collect();
        for (k, idx) in clients.iter().enumerate() {
            let counts: Vec<usize> = classes
                .iter()
                .map(|c| idx.iter().filter(|&&i| labels[i] == *c).count())
                .collect();
            println!("  client {k}: {:>5} samples {:?}", idx.len(), counts);
        }
        println!("  mean label entropy {:.4} nats", mean_client_label_entropy(labels, &clients));
    }
    Ok(())
}

fn cmd_generate(args: &CommonArgs, checkpoint: &Path, dry_run: bool) -> Result<()> {
    let config = args.resolve()?;
    if dry_run {
        let plan = config.generation_config().plan();
        println!("{}", serde_json::to_string_pretty(&plan)?);
        return Ok(());
    }
    let snapshot = ModelSnapshot::load(checkpoint)?;
    let task = snapshot.meta().task;
    if task == 0 {
        bail!("checkpoint {} was taken before any task", checkpoint.display());
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs/generate"));
    let _lock = RunLock::acquire(&out)?;
    let mut experiment = Experiment::prepare(config)?;
    let teacher = FrozenClassifier::from_snapshot(&snapshot, experiment.dtype())?;
    let (memory, stats) = experiment.generate_memory(&teacher, task + 1)?;
    let path = RunDir::new(&out).memory(task + 1);
    memory.save(&path)?;
    let agreement = teacher_agreement(&teacher, &memory, experiment.dtype())?;
    let summary = serde_json::json!({
        "memory": path,
        "samples": memory.len(),
        "teacher_agreement": agreement,
        "final_round_loss": stats.last().map(|s| s.final_loss),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_eval(args: &CommonArgs, checkpoint: &Path, memory: Option<&Path>) -> Result<()> {
    let experiment = Experiment::prepare(args.resolve()?)?;
    let snapshot = ModelSnapshot::load(checkpoint)?;
    let task = snapshot.meta().task.max(1);
    let model = FrozenClassifier::from_snapshot(&snapshot, experiment.dtype())?;
    let (per_task, union) = experiment.evaluate(&model, task)?;
    let agreement = match memory {
        Some(path) => Some(teacher_agreement(&model, &SyntheticMemory::load(path)?, experiment.dtype())?),
        None => None,
    };
    let summary = serde_json::json!({
        "task": task,
        "union_accuracy": union,
        "task_accuracy": per_task,
        "teacher_agreement": agreement,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let summaries = runs
        .iter()
        .map(|d| load_run(d).with_context(|| format!("reading run {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let rows = summarize(&summaries);
    let table = render_table(&rows);
    let csv = curve_csv(&summaries)?;
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("table.txt"), &table)?;
        fs::write(dir.join("curves.csv"), &csv)?;
    } else {
        print!("\n{csv}");
    }
    if ablation_ordering(&rows).iter().any(|c| !c.holds) {
        log::warn!("ablation ordering failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::PartitionPreview(args) => cmd_partition_preview(args),
        Command::Generate {
            common,
            checkpoint,
            dry_run,
        } => cmd_generate(common, checkpoint, *dry_run),
        Command::Eval {
            common,
            checkpoint,
            memory,
        } => cmd_eval(common, checkpoint, memory.as_deref()),
        Command::Report { runs, out } => cmd_report(runs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(ToString::to_string).collect();
            let message = serde_json::json!({ "error": e.to_string(), "causes": causes });
            eprintln!("{message}");
            ExitCode::FAILURE
        }
    }
}
