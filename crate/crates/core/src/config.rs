//! Experiment configuration: presets, ablation fragments, file loading and
//! dotted overrides.
//!
//! Resolution order: preset defaults, then ablation fragments in listed
//! order, then the file's own values, then `--set` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::client::{CeScope, ClientObjective, LocalConfig};
use crate::data::{ImageShape, PartitionConfig, PartitionMode};
use crate::error::{Error, Result};
use crate::generation::{BnTarget, GenerationConfig, NoisyInput};
use crate::losses::LossWeights;
use crate::lte::{EmbedderKind, EmbedderSpec, PromptTemplate};
use crate::nn::{ArchKind, DataStatsMode, GeneratorVariant};

pub const PRESETS: &[&str] = &["desk", "cifar100"];

/// Named override fragments; each is a TOML document merged over the preset.
pub const ABLATIONS: &[(&str, &str)] = &[
    ("finetune", "[federation]\nobjective = \"finetune\"\n"),
    ("wo_ltg", "[generation]\nlambda_ltc = 0.0\n"),
    ("wo_nl", "[generation]\nnoisy_input = \"noise\"\n"),
    ("r0", "[losses]\nr = 0.0\n"),
    ("lds_tds", "[generation]\ndata_stats = \"tds\"\n"),
    ("lds_rds", "[generation]\ndata_stats = \"rds\"\n"),
    ("lds_none", "[generation]\ndata_stats = \"none\"\n"),
    ("prompt_p1", "[lte]\ntemplate = \"P1\"\n"),
    ("prompt_p3", "[lte]\ntemplate = \"P3\"\n"),
    ("bn_generator", "[generation]\nbn_target = \"generator\"\n"),
    ("no_trailing_bn", "[generation]\ntrailing_bn = false\n"),
    ("uniform_aggregation", "[federation]\naggregation = \"uniform\"\n"),
    ("full_head_ce", "[client]\nce_scope = \"all_classes\"\n"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Procedural coloured-blob images.
    Blobs,
    /// `<path>/train` and `<path>/test` image folders.
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub path: String,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Shuffle class order before splitting into tasks.
    pub shuffle_classes: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Weights `n_k / n`.
    Weighted,
    /// Weights `1 / m`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub num_tasks: usize,
    pub num_clients: usize,
    pub rounds: usize,
    pub aggregation: AggregationMode,
    pub objective: ClientObjective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub mode: PartitionMode,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchKind,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// 0 means equal to `batch_size`.
    pub synthetic_batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_cur: f64,
    pub alpha_pre: f64,
    /// Head columns scored by the current-task cross-entropy after task 1.
    pub ce_scope: CeScope,
}

/// Bounding radius: a number, or `"auto"` for half the minimum pairwise
/// squared anchor distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Radius {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl Radius {
    pub fn resolve(&self, min_pairwise_sq_distance: impl FnOnce() -> Result<f64>) -> Result<f64> {
        match self {
            Radius::Fixed(r) => Ok(*r),
            Radius::Auto(_) => Ok(0.5 * min_pairwise_sq_distance()?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda_bn: f64,
    pub lambda_oh: f64,
    pub lambda_ltc: f64,
    pub r: Radius,
    pub kd_temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    pub rounds: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub generator_lr: f64,
    pub student_lr: f64,
    pub student_momentum: f64,
    pub student_batch_size: usize,
    pub generator_scale: f64,
    pub variant: GeneratorVariant,
    pub trailing_bn: bool,
    pub latent_dim: usize,
    pub noisy_input: NoisyInput,
    pub data_stats: DataStatsMode,
    pub bn_target: BnTarget,
    pub lambda_ltc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LteSection {
    pub embedder: EmbedderKind,
    pub dim: usize,
    /// Precomputed embedding table for the external encoder.
    pub path: String,
    pub seed: u64,
    pub template: PromptTemplate,
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeSection {
    pub seed: u64,
    /// Concurrent client updates per round; ignored in sequential mode.
    pub parallel_clients: usize,
    pub sequential: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub ablations: Vec<String>,
    pub data: DataSection,
    pub federation: FederationSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub client: ClientSection,
    pub losses: LossSection,
    pub generation: GenerationSection,
    pub lte: LteSection,
    pub runtime: RuntimeSection,
}

impl ExperimentConfig {
    /// Small synthetic benchmark that runs on one CPU core.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            ablations: Vec::new(),
            data: DataSection {
                source: DataSource::Blobs,
                path: String::new(),
                num_classes: 10,
                train_per_class: 120,
                test_per_class: 40,
                channels: 3,
                image_size: 16,
                shuffle_classes: false,
            },
            federation: FederationSection {
                num_tasks: 2,
                num_clients: 3,
                rounds: 5,
                aggregation: AggregationMode::Weighted,
                objective: ClientObjective::Lander,
            },
            partition: PartitionSection {
                mode: PartitionMode::Dirichlet,
                beta: 0.5,
            },
            model: ModelSection {
                arch: ArchKind::SmallCnn,
                width: 16,
            },
            client: ClientSection {
                epochs: 2,
                batch_size: 32,
                synthetic_batch_size: 0,
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                alpha_cur: 0.2,
                alpha_pre: 0.4,
                ce_scope: CeScope::NewClasses,
            },
            losses: LossSection {
                lambda_bn: 1.0,
                lambda_oh: 2.0,
                lambda_ltc: 5.0,
                r: Radius::Auto(AutoTag::Auto),
                kd_temperature: 1.0,
            },
            generation: GenerationSection {
                rounds: 4,
                steps: 20,
                batch_size: 64,
                generator_lr: 1e-2,
                student_lr: 0.05,
                student_momentum: 0.9,
                student_batch_size: 64,
                generator_scale: 0.25,
                variant: GeneratorVariant::Shallow,
                trailing_bn: true,
                latent_dim: 256,
                noisy_input: NoisyInput::Lte,
                data_stats: DataStatsMode::Lds,
                bn_target: BnTarget::Teacher,
                lambda_ltc: 5.0,
            },
            lte: LteSection {
                embedder: EmbedderKind::DeterministicTest,
                dim: 64,
                path: String::new(),
                seed: 0,
                template: PromptTemplate::PhotoOfName,
                normalize: true,
            },
            runtime: RuntimeSection {
                seed: 0,
                parallel_clients: 1,
                sequential: true,
            },
        }
    }

    /// CIFAR-100 scale hyperparameters.
    pub fn cifar100() -> Self {
        let mut c = Self::desk();
        c.preset = "cifar100".into();
        c.data = DataSection {
            source: DataSource::Folder,
            path: "data/cifar100".into(),
            num_classes: 100,
            train_per_class: 500,
            test_per_class: 100,
            channels: 3,
            image_size: 32,
            shuffle_classes: false,
        };
        c.federation.num_tasks = 5;
        c.federation.num_clients = 5;
        c.federation.rounds = 100;
        c.model = ModelSection {
            arch: ArchKind::Resnet18Like,
            width: 64,
        };
        c.client.batch_size = 128;
        c.client.lr = 0.04;
        c.generation.rounds = 40;
        c.generation.steps = 40;
        c.generation.generator_lr = 2e-3;
        c.generation.batch_size = 256;
        c.generation.student_batch_size = 256;
        c.generation.generator_scale = 1.0;
        c.lte.embedder = EmbedderKind::ExternalTextEncoder;
        c.lte.dim = 512;
        c.lte.path = "embeddings/cifar100.json".into();
        c.losses.lambda_oh = 0.5;
        c.losses.r = Radius::Fixed(0.015);
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "cifar100" => Ok(Self::cifar100()),
            other => Err(Error::InvalidValue {
                key: "preset".into(),
                reason: format!("unknown preset `{other}`, expected one of {PRESETS:?}"),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, reason: &str| Error::InvalidValue {
            key: key.into(),
            reason: reason.into(),
        };
        for (key, v) in [
            ("data.num_classes", self.data.num_classes),
            ("data.train_per_class", self.data.train_per_class),
            ("data.test_per_class", self.data.test_per_class),
            ("data.channels", self.data.channels),
            ("data.image_size", self.data.image_size),
            ("federation.num_tasks", self.federation.num_tasks),
            ("federation.num_clients", self.federation.num_clients),
            ("federation.rounds", self.federation.rounds),
            ("model.width", self.model.width),
            ("client.epochs", self.client.epochs),
            ("client.batch_size", self.client.batch_size),
            ("generation.rounds", self.generation.rounds),
            ("generation.steps", self.generation.steps),
            ("generation.latent_dim", self.generation.latent_dim),
            ("lte.dim", self.lte.dim),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        if self.data.num_classes % self.federation.num_tasks != 0 {
            return Err(invalid(
                "federation.num_tasks",
                &format!("{} classes do not split into {} tasks", self.data.num_classes, self.federation.num_tasks),
            ));
        }
        if self.generation.batch_size < 2 {
            return Err(invalid("generation.batch_size", "must be at least 2"));
        }
        if self.generation.student_batch_size < 2 {
            return Err(invalid("generation.student_batch_size", "must be at least 2"));
        }
        if self.partition.mode == PartitionMode::Dirichlet && !(self.partition.beta > 0.0) {
            return Err(invalid("partition.beta", "must be positive"));
        }
        for (key, v) in [
            ("client.lr", self.client.lr),
            ("client.momentum", self.client.momentum),
            ("client.weight_decay", self.client.weight_decay),
            ("client.alpha_cur", self.client.alpha_cur),
            ("client.alpha_pre", self.client.alpha_pre),
            ("losses.lambda_bn", self.losses.lambda_bn),
            ("losses.lambda_oh", self.losses.lambda_oh),
            ("losses.lambda_ltc", self.losses.lambda_ltc),
            ("generation.lambda_ltc", self.generation.lambda_ltc),
            ("generation.student_lr", self.generation.student_lr),
            ("generation.student_momentum", self.generation.student_momentum),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(key, "must be a finite nonnegative number"));
            }
        }
        if let Radius::Fixed(r) = self.losses.r {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(invalid("losses.r", "must be nonnegative or \"auto\""));
            }
        }
        if !(self.losses.kd_temperature > 0.0) {
            return Err(invalid("losses.kd_temperature", "must be positive"));
        }
        if !(self.generation.generator_lr > 0.0) {
            return Err(invalid("generation.generator_lr", "must be positive"));
        }
        if !(self.generation.generator_scale > 0.0) {
            return Err(invalid("generation.generator_scale", "must be positive"));
        }
        let down = self.generation.variant.downsample();
        if self.data.image_size % down != 0 {
            return Err(invalid(
                "data.image_size",
                &format!("must be divisible by {down} for the {:?} generator", self.generation.variant),
            ));
        }
        if self.data.source == DataSource::Folder && self.data.path.is_empty() {
            return Err(invalid("data.path", "required for folder datasets"));
        }
        if self.lte.embedder == EmbedderKind::ExternalTextEncoder && self.lte.path.is_empty() {
            return Err(invalid("lte.path", "required for the external text encoder"));
        }
        for a in &self.ablations {
            if !ABLATIONS.iter().any(|(name, _)| name == a) {
                return Err(invalid("ablations", &format!("unknown ablation `{a}`")));
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape::new(self.data.channels, self.data.image_size, self.data.image_size)
    }

    pub fn partition_config(&self, seed: u64) -> PartitionConfig {
        PartitionConfig {
            mode: self.partition.mode,
            beta: self.partition.beta,
            seed,
        }
    }

    pub fn local_config(&self) -> LocalConfig {
        LocalConfig {
            epochs: self.client.epochs,
            batch_size: self.client.batch_size,
            synthetic_batch_size: (self.client.synthetic_batch_size > 0).then_some(self.client.synthetic_batch_size),
            lr: self.client.lr,
            momentum: self.client.momentum,
            weight_decay: self.client.weight_decay,
        }
    }

    /// Loss weights with the radius resolved by the caller.
    pub fn loss_weights(&self, radius: f64) -> LossWeights {
        LossWeights {
            lambda_bn: self.losses.lambda_bn,
            lambda_oh: self.losses.lambda_oh,
            lambda_ltc: self.losses.lambda_ltc,
            radius,
            kd_temperature: self.losses.kd_temperature,
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        let g = &self.generation;
        GenerationConfig {
            rounds: g.rounds,
            steps: g.steps,
            batch_size: g.batch_size,
            generator_lr: g.generator_lr,
            student_lr: g.student_lr,
            student_momentum: g.student_momentum,
            student_batch_size: g.student_batch_size,
            generator_scale: g.generator_scale,
            generator_variant: g.variant,
            trailing_bn: g.trailing_bn,
            latent_dim: g.latent_dim,
            noisy_input: g.noisy_input,
            data_stats: g.data_stats,
            bn_target: g.bn_target,
            lambda_ltc: g.lambda_ltc,
        }
    }

    pub fn embedder_spec(&self) -> EmbedderSpec {
        EmbedderSpec {
            kind: self.lte.embedder,
            dim: self.lte.dim,
            identifier: self.lte.path.clone(),
            seed: self.lte.seed,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 of the resolved TOML text.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn parse_toml(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Parse(e.to_string()))
}

fn join_key(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

/// Merges `overlay` into `base`; every key must already exist in `base`.
fn merge(base: &mut toml::Table, overlay: &toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in overlay {
        let path = join_key(prefix, key);
        let Some(slot) = base.get_mut(key) else {
            return Err(Error::UnknownKey(path));
        };
        match (slot, value) {
            (Value::Table(b), Value::Table(o)) => merge(b, o, &path)?,
            (slot @ Value::Float(_), Value::Integer(i)) => *slot = Value::Float(*i as f64),
            (slot, value) if path == "losses.r" => {
                let ok = matches!(value, Value::Float(_) | Value::Integer(_))
                    || matches!(value, Value::String(s) if s == "auto");
                if !ok {
                    return Err(Error::InvalidValue {
                        key: path,
                        reason: "expected a number or \"auto\"".into(),
                    });
                }
                *slot = match value {
                    Value::Integer(i) => Value::Float(*i as f64),
                    v => v.clone(),
                };
            }
            (slot, value) => {
                if std::mem::discriminant(slot) != std::mem::discriminant(value) {
                    return Err(Error::InvalidValue {
                        key: path,
                        reason: format!("expected {}, found {}", type_name(slot), type_name(value)),
                    });
                }
                *slot = value.clone();
            }
        }
    }
    Ok(())
}

/// Parses a `key=value` override; the value is read as a TOML literal and
/// falls back to a bare string.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("override `{text}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Parse(format!("override `{text}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

fn nest(key: &str, value: Value) -> toml::Table {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = toml::Table::new();
    table.insert(last.to_string(), value);
    while let Some(p) = parts.pop() {
        let mut outer = toml::Table::new();
        outer.insert(p.to_string(), Value::Table(table));
        table = outer;
    }
    table
}

fn string_of(table: &toml::Table, key: &str) -> Result<Option<String>> {
    match table.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => Err(Error::InvalidValue {
            key: key.into(),
            reason: format!("expected string, found {}", type_name(other)),
        }),
    }
}

fn strings_of(table: &toml::Table, key: &str) -> Result<Option<Vec<String>>> {
    match table.get(key) {
        None => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                other => Err(Error::InvalidValue {
                    key: key.into(),
                    reason: format!("expected strings, found {}", type_name(other)),
                }),
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
        Some(other) => Err(Error::InvalidValue {
            key: key.into(),
            reason: format!("expected array, found {}", type_name(other)),
        }),
    }
}

/// Resolves configuration text plus `key=value` overrides.
pub fn resolve_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let file = parse_toml(text)?;
    let sets: Vec<(String, Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_>>()?;
    let set_table = |key: &str| sets.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.clone());

    let mut preset = string_of(&file, "preset")?.unwrap_or_else(|| "desk".into());
    if let Some(v) = set_table("preset") {
        preset = string_of(&nest("preset", v), "preset")?.expect("present");
    }
    let mut ablations = strings_of(&file, "ablations")?.unwrap_or_default();
    if let Some(v) = set_table("ablations") {
        ablations = strings_of(&nest("ablations", v), "ablations")?.expect("present");
    }

    let base = ExperimentConfig::preset(&preset)?;
    let mut resolved = toml::Table::try_from(&base).map_err(|e| Error::Parse(e.to_string()))?;
    for name in &ablations {
        let fragment = ABLATIONS
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::InvalidValue {
                key: "ablations".into(),
                reason: format!("unknown ablation `{name}`"),
            })?
            .1;
        merge(&mut resolved, &parse_toml(fragment)?, "")?;
    }
    merge(&mut resolved, &file, "")?;
    for (key, value) in sets {
        merge(&mut resolved, &nest(&key, value), "")?;
    }
    resolved.insert("preset".into(), Value::String(preset));
    resolved.insert(
        "ablations".into(),
        Value::Array(ablations.into_iter().map(Value::String).collect()),
    );
    let config: ExperimentConfig = Value::Table(resolved)
        .try_into()
        .map_err(|e: toml::de::Error| Error::InvalidValue {
            key: "config".into(),
            reason: e.to_string(),
        })?;
    config.validate()?;
    Ok(config)
}

/// Loads a config file (or the default preset when `path` is `None`).
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    resolve_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_preset_has_reference_defaults() {
        let c = resolve_config("preset = \"cifar100\"", &[]).unwrap();
        assert_eq!(c.client.alpha_cur, 0.2);
        assert_eq!(c.client.alpha_pre, 0.4);
        assert_eq!(c.losses.lambda_bn, 1.0);
        assert_eq!(c.losses.lambda_oh, 0.5);
        assert_eq!(c.losses.lambda_ltc, 5.0);
        assert_eq!(c.generation.steps, 40);
        assert_eq!(c.generation.rounds, 40);
        assert_eq!(c.generation.batch_size, 256);
        assert_eq!(c.client.lr, 0.04);
        assert_eq!(c.client.momentum, 0.9);
        assert_eq!(c.client.weight_decay, 5e-4);
        assert_eq!(c.client.batch_size, 128);
        assert_eq!(c.client.epochs, 2);
        assert_eq!(c.generation.generator_lr, 2e-3);
        assert_eq!(c.federation.rounds, 100);
    }

    #[test]
    fn empty_text_is_desk() {
        assert_eq!(resolve_config("", &[]).unwrap(), ExperimentConfig::desk());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = resolve_config("", &["losses.r=0".into()]).unwrap();
        assert_eq!(c.losses.r, Radius::Fixed(0.0));
        let c = resolve_config("", &["losses.r=auto".into(), "client.lr=1".into()]).unwrap();
        assert_eq!(c.losses.r, Radius::Auto(AutoTag::Auto));
        assert_eq!(c.client.lr, 1.0);
        match resolve_config("", &["losses.radius=0".into()]) {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "losses.radius"),
            other => panic!("{other:?}"),
        }
        match resolve_config("[client]\nbogus = 1\n", &[]) {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "client.bogus"),
            other => panic!("{other:?}"),
        }
        match resolve_config("", &["client.epochs=\"two\"".into()]) {
            Err(Error::InvalidValue { key, .. }) => assert_eq!(key, "client.epochs"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(resolve_config("not toml [", &[]), Err(Error::Parse(_))));
        match resolve_config("", &["federation.num_clients=0".into()]) {
            Err(Error::InvalidValue { key, .. }) => assert_eq!(key, "federation.num_clients"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_ablation_is_reachable() {
        for (name, _) in ABLATIONS {
            let c = resolve_config("", &[format!("ablations=[\"{name}\"]")]).unwrap();
            assert_eq!(c.ablations, vec![name.to_string()]);
        }
        let c = resolve_config("ablations = [\"wo_ltg\", \"lds_tds\"]", &[]).unwrap();
        assert_eq!(c.generation.lambda_ltc, 0.0);
        assert_eq!(c.losses.lambda_ltc, 5.0);
        assert_eq!(c.generation.data_stats, DataStatsMode::Tds);
        let c = resolve_config("", &["lte.template=P3".into(), "generation.noisy_input=noise".into()]).unwrap();
        assert_eq!(c.lte.template, PromptTemplate::PhotoOfIndex);
        assert_eq!(c.generation.noisy_input, NoisyInput::Noise);
        assert!(resolve_config("", &["ablations=[\"nope\"]".into()]).is_err());
    }

    #[test]
    fn round_trip_is_idempotent() {
        let once = resolve_config(
            "ablations = [\"r0\"]\n[client]\nlr = 0.01\n",
            &["losses.r=0.02".into(), "runtime.seed=4".into()],
        )
        .unwrap();
        let twice = resolve_config(&once.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.hash().unwrap(), twice.hash().unwrap());
        assert_eq!(twice.losses.r, Radius::Fixed(0.02));
    }

    #[test]
    fn radius_resolution() {
        assert_eq!(Radius::Fixed(0.3).resolve(|| Ok(10.0)).unwrap(), 0.3);
        assert_eq!(Radius::Auto(AutoTag::Auto).resolve(|| Ok(0.03)).unwrap(), 0.015);
    }
}
