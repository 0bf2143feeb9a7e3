//! One molecule per line:
//! `{"id", "smiles", "atoms": [[int]], "bonds": [[u, v, type]],
//! "conformers": [[[x, y, z]]], "targets": [float]}`.
//!
//! Target names and the generator config (if any) live in a sidecar
//! `<stem>.meta.json` next to the data file.

use super::{Dataset, GeneratorConfig, Molecule};
use crate::conf3d::Conformer;
use crate::error::{Error, Result};
use crate::graph2d::MolGraph;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub smiles: String,
    pub atoms: Vec<Vec<usize>>,
    pub bonds: Vec<[usize; 3]>,
    pub conformers: Vec<Vec<[f64; 3]>>,
    pub targets: Vec<f64>,
}

impl Record {
    pub fn from_molecule(m: &Molecule) -> Self {
        Self {
            id: m.id.clone(),
            smiles: m.smiles.clone(),
            atoms: m.graph.atom_features.clone(),
            bonds: m.graph.bonds().into_iter().map(|(u, v, t)| [u, v, t]).collect(),
            conformers: m.conformers.iter().map(|c| c.coords.clone()).collect(),
            targets: m.targets.clone(),
        }
    }

    pub fn into_molecule(self) -> Result<Molecule> {
        let id = self.id;
        let ctx = |e: Error| Error::Data(format!("molecule `{id}`: {e}"));
        let bonds: Vec<(usize, usize, usize)> = self.bonds.iter().map(|b| (b[0], b[1], b[2])).collect();
        let graph = MolGraph::new(self.atoms, &bonds).map_err(ctx)?;
        let conformers = self
            .conformers
            .into_iter()
            .map(Conformer::new)
            .collect::<Result<Vec<_>>>()
            .map_err(ctx)?;
        let m = Molecule {
            id: id.clone(),
            smiles: self.smiles,
            graph,
            conformers,
            targets: self.targets,
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub target_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
}

pub fn meta_path(data: &Path) -> PathBuf {
    data.with_extension("meta.json")
}

/// Parses JSONL text; errors carry 1-based line numbers.
pub fn parse_jsonl(text: &str, target_names: Option<Vec<String>>) -> Result<Dataset> {
    let mut molecules = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("line {}: malformed record: {e}", n + 1)))?;
        molecules.push(
            rec.into_molecule()
                .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?,
        );
    }
    let names = match target_names {
        Some(n) => n,
        None => (0..molecules.first().map_or(0, |m| m.targets.len()))
            .map(|i| format!("t{i}"))
            .collect(),
    };
    Dataset::new(molecules, names)
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mp = meta_path(path);
    let names = if mp.exists() {
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&mp)?)?;
        Some(meta.target_names)
    } else {
        None
    };
    parse_jsonl(&text, names)
}

pub fn to_jsonl(ds: &Dataset) -> Result<String> {
    let mut s = String::new();
    for m in &ds.molecules {
        s.push_str(&serde_json::to_string(&Record::from_molecule(m))?);
        s.push('\n');
    }
    Ok(s)
}

/// Writes the data file and its sidecar.
pub fn write_jsonl(path: &Path, ds: &Dataset, generator: Option<&GeneratorConfig>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(to_jsonl(ds)?.as_bytes())?;
    f.flush()?;
    let meta = DatasetMeta {
        target_names: ds.target_names.clone(),
        generator: generator.cloned(),
    };
    std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}
