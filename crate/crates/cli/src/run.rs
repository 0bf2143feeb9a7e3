//! Resolved run configuration, manifests and checkpoint sidecars.

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use molmix_core::config::ModelConfig;
use molmix_core::data::{load_jsonl, Dataset, GeneratorConfig, Normalization, SplitFile};
use molmix_core::fusion::ModalityMask;
use molmix_core::trainer::{Metrics, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Default,
    Desk,
    Minimal,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Minimal => ModelConfig::minimal(),
        }
    }
}

/// Everything a training-type command needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Train/val/test fractions used when no split file is given.
    pub split: [f64; 3],
    pub split_seed: u64,
}

impl RunConfig {
    pub fn with_model(model: ModelConfig) -> Self {
        Self {
            model,
            train: TrainConfig::default(),
            split: [0.8, 0.1, 0.1],
            split_seed: 0,
        }
    }

    /// `base`, overlaid with the JSON file at `path` when given. Keys in
    /// the file replace the matching defaults; unknown keys are errors.
    pub fn resolve(base: Self, path: Option<&Path>) -> Result<Self> {
        let mut value = serde_json::to_value(base)?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            merge(&mut value, file);
        }
        let cfg: Self = serde_json::from_value(value).context("invalid config")?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Content hash in git's object style: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Job {
    Gen {
        generator: GeneratorConfig,
    },
    Train {
        data: PathBuf,
        split_file: Option<PathBuf>,
        run: RunConfig,
    },
    Ablate {
        data: PathBuf,
        split_file: Option<PathBuf>,
        run: RunConfig,
        masks: Vec<ModalityMask>,
    },
    Transfer {
        data: PathBuf,
        split_file: Option<PathBuf>,
        checkpoint: PathBuf,
        run: RunConfig,
    },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Gen { .. } => "gen",
            Job::Train { .. } => "train",
            Job::Ablate { .. } => "ablate",
            Job::Transfer { .. } => "transfer",
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            Job::Gen { .. } => vec![],
            Job::Train { data, split_file, .. } | Job::Ablate { data, split_file, .. } => {
                std::iter::once(data.as_path()).chain(split_file.as_deref()).collect()
            }
            Job::Transfer {
                data,
                split_file,
                checkpoint,
                ..
            } => [data.as_path(), checkpoint.as_path()].into_iter().chain(split_file.as_deref()).collect(),
        }
    }
}

/// Fully resolved description of a run, written before any work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    #[serde(flatten)]
    pub job: Job,
    /// Content hash of every input file, in the order data, checkpoint,
    /// split file.
    pub input_hashes: Vec<(PathBuf, String)>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl RunManifest {
    pub fn new(job: Job, seeds: Vec<u64>, out: &Path) -> Result<Self> {
        let input_hashes = job
            .inputs()
            .into_iter()
            .map(|p| Ok((p.to_path_buf(), content_hash(p)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            job,
            input_hashes,
            seeds,
            out: out.to_path_buf(),
        })
    }

    pub fn load(path: &Path, command: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let m: Self = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        if m.job.name() != command {
            bail!("manifest {} describes a `{}` run, not `{command}`", path.display(), m.job.name());
        }
        for (p, hash) in &m.input_hashes {
            if &content_hash(p)? != hash {
                bail!("input {} changed since the manifest was written", p.display());
            }
        }
        Ok(m)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        write_json(&out.join("manifest.json"), self)
    }
}

/// Sidecar stored next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Vocabulary file contents, one character per line.
    pub vocab: String,
    pub train: TrainConfig,
    pub target: String,
    pub normalization: Normalization,
    pub step: u64,
    pub best_step: Option<u64>,
    pub val: Metrics,
    pub splits: SplitFile,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

impl CheckpointMeta {
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let p = meta_path(checkpoint);
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading checkpoint sidecar {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Loads a dataset and assigns splits from `split_file` or the seeded
/// fractions in `run`.
pub fn load_dataset(data: &Path, split_file: Option<&Path>, run: &RunConfig) -> Result<Dataset> {
    let ds = load_jsonl(data).with_context(|| format!("loading {}", data.display()))?;
    Ok(match split_file {
        Some(p) => ds.apply_split_file(&SplitFile::load(p)?)?,
        None => ds.split_deterministic(run.split, run.split_seed)?,
    })
}
