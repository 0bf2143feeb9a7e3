//! Molecules, datasets, splits and target normalization.

mod generator;
mod jsonl;
mod smiles_writer;

pub use generator::{generate, geom_target, str_target, topo_target, wiener_index, GeneratorConfig, TargetSpec};
pub use jsonl::{load_jsonl, meta_path, parse_jsonl, to_jsonl, write_jsonl, DatasetMeta, Record};
pub use smiles_writer::{write_smiles, ELEMENTS};

use crate::conf3d::Conformer;
use crate::error::{bail, Result};
use crate::fusion::ModalitySource;
use crate::graph2d::MolGraph;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub id: String,
    pub smiles: String,
    pub graph: MolGraph,
    pub conformers: Vec<Conformer>,
    pub targets: Vec<f64>,
}

impl Molecule {
    pub fn validate(&self) -> Result<()> {
        if self.smiles.is_empty() {
            bail!(Data, "molecule `{}` has an empty SMILES string", self.id);
        }
        if self.graph.num_atoms() == 0 {
            bail!(Data, "molecule `{}` has no atoms", self.id);
        }
        self.graph.validate().map_err(|e| crate::error::Error::Data(format!("molecule `{}`: {e}", self.id)))?;
        for (c, conf) in self.conformers.iter().enumerate() {
            if conf.num_atoms() != self.graph.num_atoms() {
                bail!(
                    Data,
                    "molecule `{}`: conformer {c} has {} atoms, graph has {}",
                    self.id,
                    conf.num_atoms(),
                    self.graph.num_atoms()
                );
            }
        }
        Ok(())
    }
}

impl ModalitySource for Molecule {
    fn id(&self) -> &str {
        &self.id
    }
    fn smiles(&self) -> &str {
        &self.smiles
    }
    fn atom_features(&self) -> &[Vec<usize>] {
        &self.graph.atom_features
    }
    fn graph(&self) -> &MolGraph {
        &self.graph
    }
    fn conformers(&self) -> &[Conformer] {
        &self.conformers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Molecule ids per split, as stored in a split file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Per-target z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn normalize(&self, t: usize, y: f64) -> f64 {
        (y - self.mean[t]) / self.std[t]
    }

    pub fn denormalize(&self, t: usize, z: f64) -> f64 {
        z * self.std[t] + self.mean[t]
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub molecules: Vec<Molecule>,
    pub target_names: Vec<String>,
    pub splits: Vec<Split>,
}

impl Dataset {
    /// Every molecule starts in the train split.
    pub fn new(molecules: Vec<Molecule>, target_names: Vec<String>) -> Result<Self> {
        if molecules.is_empty() {
            bail!(Input, "dataset is empty");
        }
        let mut seen = HashMap::new();
        for (i, m) in molecules.iter().enumerate() {
            m.validate()?;
            if m.targets.len() != target_names.len() {
                bail!(
                    Data,
                    "molecule `{}` has {} targets, dataset declares {}",
                    m.id,
                    m.targets.len(),
                    target_names.len()
                );
            }
            if let Some(j) = seen.insert(m.id.clone(), i) {
                bail!(Data, "duplicate molecule id `{}` (entries {j} and {i})", m.id);
            }
        }
        let splits = vec![Split::Train; molecules.len()];
        Ok(Self {
            molecules,
            target_names,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn target_index(&self, name: &str) -> Result<usize> {
        match self.target_names.iter().position(|n| n == name) {
            Some(i) => Ok(i),
            None => bail!(Config, "unknown target `{name}`; dataset has {:?}", self.target_names),
        }
    }

    /// Seeded shuffle, then the first `round(f_train·N)` molecules go to
    /// train and the next `round(f_val·N)` to val.
    pub fn split_deterministic(mut self, fractions: [f64; 3], seed: u64) -> Result<Self> {
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!(Config, "split fractions {fractions:?} must be in [0, 1] and sum to 1");
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        for (rank, &i) in order.iter().enumerate() {
            self.splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        Ok(self)
    }

    pub fn split_file(&self) -> SplitFile {
        let ids = |s| self.indices(s).into_iter().map(|i| self.molecules[i].id.clone()).collect();
        SplitFile {
            train: ids(Split::Train),
            val: ids(Split::Val),
            test: ids(Split::Test),
        }
    }

    /// Assigns splits from a file; every molecule must appear exactly once.
    pub fn apply_split_file(mut self, file: &SplitFile) -> Result<Self> {
        let index: HashMap<&str, usize> = self.molecules.iter().enumerate().map(|(i, m)| (m.id.as_str(), i)).collect();
        let mut assigned = vec![None; self.len()];
        for (split, ids) in [(Split::Train, &file.train), (Split::Val, &file.val), (Split::Test, &file.test)] {
            for id in ids {
                let Some(&i) = index.get(id.as_str()) else {
                    bail!(Data, "split file names unknown molecule `{id}`");
                };
                if assigned[i].replace(split).is_some() {
                    bail!(Data, "molecule `{id}` appears in more than one split");
                }
            }
        }
        if let Some(i) = assigned.iter().position(Option::is_none) {
            bail!(Data, "molecule `{}` is missing from the split file", self.molecules[i].id);
        }
        self.splits = assigned.into_iter().map(Option::unwrap).collect();
        Ok(self)
    }

    /// Mean and population standard deviation of the train split; a
    /// constant target gets unit scale.
    pub fn normalization(&self) -> Result<Normalization> {
        let train = self.indices(Split::Train);
        if train.is_empty() {
            bail!(Config, "train split is empty");
        }
        let t = self.target_names.len();
        let mut mean = vec![0.0; t];
        let mut std = vec![0.0; t];
        for j in 0..t {
            let vals: Vec<f64> = train.iter().map(|&i| self.molecules[i].targets[j]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            mean[j] = m;
            std[j] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
        }
        Ok(Normalization { mean, std })
    }

    /// Keeps only the molecules at `indices`, preserving their split labels.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            molecules: indices.iter().map(|&i| self.molecules[i].clone()).collect(),
            target_names: self.target_names.clone(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
        }
    }
}
