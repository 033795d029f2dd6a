//! Label-text embedding (LTE) pool: one frozen anchor vector per class.
//!
//! Embeddings are produced once at build time from a prompt such as
//! `"a photo of a dog"` and never change afterwards. The pool owns no
//! reference to the embedder, so nothing downstream can re-invoke it.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::rng;

/// Prompt templates `P1`, `P2` and `P3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum PromptTemplate {
    /// `a class of a {name}`
    #[serde(rename = "P1")]
    ClassOfName,
    /// `a photo of a {name}`
    #[default]
    #[serde(rename = "P2")]
    PhotoOfName,
    /// `a photo of a {index}`
    #[serde(rename = "P3")]
    PhotoOfIndex,
}

impl PromptTemplate {
    pub fn code(&self) -> &'static str {
        match self {
            PromptTemplate::ClassOfName => "P1",
            PromptTemplate::PhotoOfName => "P2",
            PromptTemplate::PhotoOfIndex => "P3",
        }
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P1" | "p1" => Ok(Self::ClassOfName),
            "P2" | "p2" => Ok(Self::PhotoOfName),
            "P3" | "p3" => Ok(Self::PhotoOfIndex),
            other => Err(Error::InvalidArgument(format!("unknown prompt template `{other}`"))),
        }
    }
}

/// A class identified by index, optionally with a human-readable name.
#[derive(Debug, Clone, Copy)]
pub struct ClassLabel<'a> {
    pub index: usize,
    pub name: Option<&'a str>,
}

impl<'a> ClassLabel<'a> {
    pub fn named(index: usize, name: &'a str) -> Self {
        Self { index, name: Some(name) }
    }

    pub fn index_only(index: usize) -> Self {
        Self { index, name: None }
    }
}

pub fn render_prompt(class: ClassLabel<'_>, template: PromptTemplate) -> Result<String> {
    let name = || {
        class.name.ok_or(Error::MissingClassName {
            template: template.code(),
            index: class.index,
        })
    };
    Ok(match template {
        PromptTemplate::ClassOfName => format!("a class of a {}", name()?),
        PromptTemplate::PhotoOfName => format!("a photo of a {}", name()?),
        PromptTemplate::PhotoOfIndex => format!("a photo of a {}", class.index),
    })
}

/// Maps a prompt string to a fixed-dimension vector.
pub trait TextEmbedder {
    fn fingerprint(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&mut self, prompt: &str) -> Result<Vec<f32>>;
}

/// Offline embedder: hashes the prompt with a global seed and draws a unit
/// vector from the resulting standard-normal stream.
pub fn deterministic_test_embedding(prompt: &str, dim: usize, global_seed: u64) -> Result<Vec<f32>> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dim must be positive".into()));
    }
    let mut rng = rng::stream(global_seed, &format!("lte/{prompt}"));
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(raw.into_iter().map(|v| (v / norm) as f32).collect())
}

#[derive(Debug, Clone)]
pub struct DeterministicEmbedder {
    dim: usize,
    seed: u64,
}

impl DeterministicEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEmbedder for DeterministicEmbedder {
    fn fingerprint(&self) -> String {
        format!("deterministic-test/d{}/s{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&mut self, prompt: &str) -> Result<Vec<f32>> {
        deterministic_test_embedding(prompt, self.dim, self.seed)
    }
}

/// Embeddings exported offline by an external text encoder (e.g. CLIP) as a
/// JSON object `{ "<prompt>": [f32, ...], ... }`.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbedder {
    path: PathBuf,
    dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl PrecomputedEmbedder {
    pub fn open(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::EmbedderUnavailable(format!("{}: {e}", path.display())))?;
        let table: HashMap<String, Vec<f32>> = serde_json::from_str(&text)
            .map_err(|e| Error::EmbedderUnavailable(format!("{}: {e}", path.display())))?;
        let dim = table.values().next().map(Vec::len).unwrap_or(0);
        if dim == 0 || table.values().any(|v| v.len() != dim) {
            return Err(Error::EmbedderUnavailable(format!(
                "{}: embeddings must share one positive dimension",
                path.display()
            )));
        }
        Ok(Self {
            path: path.to_path_buf(),
            dim,
            table,
        })
    }
}

impl TextEmbedder for PrecomputedEmbedder {
    fn fingerprint(&self) -> String {
        let name = self.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        format!("external/{name}/d{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&mut self, prompt: &str) -> Result<Vec<f32>> {
        self.table
            .get(prompt)
            .cloned()
            .ok_or_else(|| Error::EmbedderUnavailable(format!("no embedding for prompt `{prompt}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    ExternalTextEncoder,
    DeterministicTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dim: usize,
    /// Path to the exported embedding table for external encoders; a free
    /// label for the deterministic embedder.
    pub identifier: String,
    pub seed: u64,
}

impl EmbedderSpec {
    pub fn resolve(&self) -> Result<Box<dyn TextEmbedder>> {
        if self.dim == 0 {
            return Err(Error::InvalidValue {
                key: "lte.dim".into(),
                reason: "must be positive".into(),
            });
        }
        match self.kind {
            EmbedderKind::DeterministicTest => Ok(Box::new(DeterministicEmbedder::new(self.dim, self.seed))),
            EmbedderKind::ExternalTextEncoder => {
                let e = PrecomputedEmbedder::open(Path::new(&self.identifier))?;
                if e.dim() != self.dim {
                    return Err(Error::EmbedderUnavailable(format!(
                        "external encoder has dim {}, config expects {}",
                        e.dim(),
                        self.dim
                    )));
                }
                Ok(Box::new(e))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoolManifest {
    embedder_fingerprint: String,
    template: PromptTemplate,
    dim: usize,
    classes: Vec<String>,
    normalized: bool,
}

/// Frozen class-id → anchor map. There is no way to mutate a built pool.
#[derive(Debug, Clone, PartialEq)]
pub struct LtePool {
    dim: usize,
    embeddings: Vec<Vec<f32>>,
    class_names: Vec<String>,
    template: PromptTemplate,
    fingerprint: String,
    normalized: bool,
}

impl LtePool {
    /// Embeds one prompt per class, invoking the embedder exactly once each.
    pub fn build(class_names: &[String], embedder: &mut dyn TextEmbedder, template: PromptTemplate, normalize: bool) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::InvalidArgument("cannot build a pool without classes".into()));
        }
        let dim = embedder.dim();
        let mut embeddings = Vec::with_capacity(class_names.len());
        for (index, name) in class_names.iter().enumerate() {
            let prompt = render_prompt(ClassLabel::named(index, name), template)?;
            let mut v = embedder.embed(&prompt)?;
            if v.len() != dim {
                return Err(Error::DimMismatch(format!("embedder returned {} values, expected {dim}", v.len())));
            }
            if normalize {
                let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::InvalidArgument(format!("zero embedding for `{prompt}`")));
                }
                v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
            }
            embeddings.push(v);
        }
        Ok(Self {
            dim,
            embeddings,
            class_names: class_names.to_vec(),
            template,
            fingerprint: embedder.fingerprint(),
            normalized: normalize,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn template(&self) -> PromptTemplate {
        self.template
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn contains(&self, label: usize) -> bool {
        label < self.embeddings.len()
    }

    pub fn query(&self, label: usize) -> Result<&[f32]> {
        self.embeddings.get(label).map(Vec::as_slice).ok_or(Error::UnknownLabel(label))
    }

    /// Stacks the anchors of `labels` into a `(B, d_e)` tensor.
    pub fn query_batch(&self, labels: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(labels.len() * self.dim);
        for &l in labels {
            flat.extend_from_slice(self.query(l)?);
        }
        Ok(Tensor::from_vec(flat, (labels.len(), self.dim), device)?.to_dtype(dtype)?)
    }

    pub fn min_pairwise_sq_distance(&self) -> Result<f64> {
        if self.len() < 2 {
            return Err(Error::SingleClass);
        }
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let d: f64 = self.embeddings[i]
                    .iter()
                    .zip(&self.embeddings[j])
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum();
                best = best.min(d);
            }
        }
        Ok(best)
    }

    /// Cache file name keyed by embedder fingerprint, template and normalization.
    pub fn cache_key(fingerprint: &str, template: PromptTemplate, normalized: bool) -> String {
        let safe: String = fingerprint
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        format!("lte-{safe}-{}-{}.bin", template.code(), if normalized { "norm" } else { "raw" })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = PoolManifest {
            embedder_fingerprint: self.fingerprint.clone(),
            template: self.template,
            dim: self.dim,
            classes: self.class_names.clone(),
            normalized: self.normalized,
        };
        let flat: Vec<f32> = self.embeddings.iter().flatten().copied().collect();
        archive::write(path, archive::LTE_MAGIC, &manifest, &archive::f32s_to_bytes(&flat))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, payload): (PoolManifest, _) = archive::read(path, archive::LTE_MAGIC)?;
        let flat = archive::bytes_to_f32s(&payload)?;
        if m.dim == 0 || flat.len() != m.dim * m.classes.len() {
            return Err(Error::Archive {
                path: path.to_path_buf(),
                reason: format!("{} floats for {} classes of dim {}", flat.len(), m.classes.len(), m.dim),
            });
        }
        Ok(Self {
            dim: m.dim,
            embeddings: flat.chunks_exact(m.dim).map(<[f32]>::to_vec).collect(),
            class_names: m.classes,
            template: m.template,
            fingerprint: m.embedder_fingerprint,
            normalized: m.normalized,
        })
    }

    /// Loads the pool from `cache_dir` when a matching entry exists, otherwise
    /// builds it and writes the cache.
    pub fn build_cached(
        class_names: &[String],
        spec: &EmbedderSpec,
        template: PromptTemplate,
        normalize: bool,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        let mut embedder = spec.resolve()?;
        let Some(dir) = cache_dir else {
            return Self::build(class_names, embedder.as_mut(), template, normalize);
        };
        let path = dir.join(Self::cache_key(&embedder.fingerprint(), template, normalize));
        if path.exists() {
            if let Ok(pool) = Self::load(&path) {
                if pool.class_names == class_names {
                    return Ok(pool);
                }
            }
        }
        let pool = Self::build(class_names, embedder.as_mut(), template, normalize)?;
        pool.save(&path)?;
        Ok(pool)
    }
}
