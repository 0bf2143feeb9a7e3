//! Synthetic molecules with targets that each depend on one modality.
//!
//! Graphs are random trees, optionally closed into a single ring, under
//! simple valence limits. Conformers come from a random layout relaxed
//! with springs (bonds at 1.5 Å, angle pairs at 2.5 Å, soft repulsion below
//! 3 Å), each with its own Gaussian coordinate noise.

use super::{smiles_writer::write_smiles, Dataset, Molecule};
use crate::conf3d::Conformer;
use crate::error::{bail, Result};
use crate::graph2d::MolGraph;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Element index (see the SMILES writer's table), valence, sampling weight.
const ELEMENT_TABLE: [(usize, usize, f64); 6] = [(0, 4, 0.55), (1, 3, 0.15), (2, 2, 0.17), (3, 2, 0.04), (4, 1, 0.05), (5, 1, 0.04)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSpec {
    /// Mean pairwise distance in the first conformer.
    Geom,
    /// Wiener index divided by the number of atom pairs.
    Topo,
    /// Fraction of SMILES characters equal to the marked character.
    Str,
    /// Weighted sum of the three.
    Mix,
    /// All four columns.
    All,
}

impl TargetSpec {
    pub fn names(self) -> Vec<String> {
        let n: &[&str] = match self {
            TargetSpec::Geom => &["geom"],
            TargetSpec::Topo => &["topo"],
            TargetSpec::Str => &["str"],
            TargetSpec::Mix => &["mix"],
            TargetSpec::All => &["geom", "topo", "str", "mix"],
        };
        n.iter().map(|s| s.to_string()).collect()
    }
}

impl std::str::FromStr for TargetSpec {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "geom" => TargetSpec::Geom,
            "topo" => TargetSpec::Topo,
            "str" => TargetSpec::Str,
            "mix" => TargetSpec::Mix,
            "all" => TargetSpec::All,
            _ => bail!(Config, "unknown target `{s}` (expected geom, topo, str, mix or all)"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub count: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub k_conformers: usize,
    /// Standard deviation of per-conformer coordinate noise, Å.
    pub noise: f64,
    pub ring_prob: f64,
    pub double_bond_prob: f64,
    pub target: TargetSpec,
    pub marked_char: char,
    /// Weights of (geom, topo, str) in the mixed target.
    pub mix_weights: [f64; 3],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            count: 100,
            min_atoms: 5,
            max_atoms: 12,
            k_conformers: 2,
            noise: 0.05,
            ring_prob: 0.3,
            double_bond_prob: 0.15,
            target: TargetSpec::Mix,
            marked_char: 'O',
            mix_weights: [1.0, 1.0, 4.0],
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            bail!(Config, "count must be at least 1");
        }
        if self.min_atoms == 0 || self.min_atoms > self.max_atoms {
            bail!(Config, "atom range {}..={} is empty", self.min_atoms, self.max_atoms);
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.ring_prob) || !(0.0..=1.0).contains(&self.double_bond_prob)
        {
            bail!(Config, "noise must be non-negative and probabilities in [0, 1]");
        }
        Ok(())
    }
}

/// Sum of shortest-path lengths over unordered atom pairs.
pub fn wiener_index(graph: &MolGraph) -> usize {
    let n = graph.num_atoms();
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in &graph.edges {
        adj[u].push(v);
    }
    let mut total = 0;
    for s in 0..n {
        let mut dist = vec![usize::MAX; n];
        dist[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    q.push_back(v);
                }
            }
        }
        total += dist[s + 1..].iter().filter(|&&d| d != usize::MAX).sum::<usize>();
    }
    total
}

pub fn topo_target(graph: &MolGraph) -> f64 {
    let n = graph.num_atoms();
    if n < 2 {
        return 0.0;
    }
    wiener_index(graph) as f64 / (n * (n - 1) / 2) as f64
}

/// Mean distance over unordered atom pairs.
pub fn geom_target(conf: &Conformer) -> f64 {
    let n = conf.num_atoms();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for u in 0..n {
        for v in u + 1..n {
            s += conf.distance(u, v);
        }
    }
    s / (n * (n - 1) / 2) as f64
}

pub fn str_target(smiles: &str, marked: char) -> f64 {
    let n = smiles.chars().count();
    if n == 0 {
        return 0.0;
    }
    smiles.chars().filter(|&c| c == marked).count() as f64 / n as f64
}

fn pick_element(rng: &mut ChaCha8Rng, max_valence: usize) -> (usize, usize) {
    let allowed: Vec<&(usize, usize, f64)> = ELEMENT_TABLE.iter().filter(|e| e.1 <= max_valence.max(1)).collect();
    let total: f64 = allowed.iter().map(|e| e.2).sum();
    let mut r = rng.random_range(0.0..total);
    for e in &allowed {
        if r < e.2 {
            return (e.0, e.1);
        }
        r -= e.2;
    }
    let last = allowed.last().unwrap();
    (last.0, last.1)
}

fn bfs_dist(adj: &[Vec<usize>], s: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; adj.len()];
    dist[s] = 0;
    let mut q = VecDeque::from([s]);
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                q.push_back(v);
            }
        }
    }
    dist
}

fn random_graph(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<MolGraph> {
    let n = rng.random_range(cfg.min_atoms..=cfg.max_atoms);
    let mut elements = vec![0usize];
    let mut valence = vec![4usize];
    let mut used = vec![0usize];
    let mut bonds: Vec<(usize, usize, usize)> = Vec::new();
    for i in 1..n {
        let open: Vec<usize> = (0..i).filter(|&a| used[a] < valence[a]).collect();
        if open.is_empty() {
            break;
        }
        let parent = open[rng.random_range(0..open.len())];
        let (mut e, mut val) = pick_element(rng, 4);
        if val == 1 && i + 1 < n && open.len() == 1 {
            // a terminal atom here would end the chain early
            (e, val) = (0, 4);
        }
        let room = (valence[parent] - used[parent]).min(val);
        let order = if room >= 2 && val >= 2 && rng.random_bool(cfg.double_bond_prob) {
            if room >= 3 && val >= 3 && rng.random_bool(0.2) {
                3
            } else {
                2
            }
        } else {
            1
        };
        elements.push(e);
        valence.push(val);
        used.push(order);
        used[parent] += order;
        bonds.push((parent, i, order - 1));
    }
    let n = elements.len();
    if n >= 5 && rng.random_bool(cfg.ring_prob) {
        let mut adj = vec![Vec::new(); n];
        for &(u, v, _) in &bonds {
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut candidates = Vec::new();
        for u in 0..n {
            let d = bfs_dist(&adj, u);
            for v in u + 1..n {
                if (4..=5).contains(&d[v]) && used[u] < valence[u] && used[v] < valence[v] {
                    candidates.push((u, v));
                }
            }
        }
        if !candidates.is_empty() {
            let (u, v) = candidates[rng.random_range(0..candidates.len())];
            used[u] += 1;
            used[v] += 1;
            bonds.push((u, v, 0));
        }
    }
    let mut degree = vec![0usize; n];
    for &(u, v, _) in &bonds {
        degree[u] += 1;
        degree[v] += 1;
    }
    let feats = (0..n).map(|a| vec![elements[a], degree[a].min(6), 2]).collect();
    MolGraph::new(feats, &bonds)
}

/// Spring relaxation of a random initial layout.
fn embed(graph: &MolGraph, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = graph.num_atoms();
    let box_len = 1.5 * (n as f64).cbrt() + 1.0;
    let mut x: Vec<[f64; 3]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-box_len..box_len)))
        .collect();
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in &graph.edges {
        adj[u].push(v);
    }
    let mut target = vec![vec![None; n]; n];
    for u in 0..n {
        let d = bfs_dist(&adj, u);
        for v in 0..n {
            target[u][v] = match d[v] {
                1 => Some(1.5),
                2 => Some(2.5),
                _ => None,
            };
        }
    }
    let step = 0.05;
    for _ in 0..300 {
        let mut g = vec![[0.0f64; 3]; n];
        for u in 0..n {
            for v in u + 1..n {
                let diff: [f64; 3] = std::array::from_fn(|c| x[u][c] - x[v][c]);
                let r = (diff.iter().map(|d| d * d).sum::<f64>()).sqrt().max(1e-6);
                // dE/dr for E = (r - r0)² (springs) or (3 - r)² below 3 Å
                let de = match target[u][v] {
                    Some(r0) => 2.0 * (r - r0),
                    None if r < 3.0 => -2.0 * (3.0 - r),
                    None => 0.0,
                };
                for c in 0..3 {
                    let f = de * diff[c] / r;
                    g[u][c] += f;
                    g[v][c] -= f;
                }
            }
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            for c in 0..3 {
                xi[c] -= step * gi[c];
            }
        }
    }
    x
}

/// Generates `cfg.count` molecules; identical configs give identical data.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| crate::error::Error::Config(e.to_string()))?;
    let mut molecules = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let graph = random_graph(cfg, &mut rng)?;
        let smiles = write_smiles(&graph);
        let base = embed(&graph, &mut rng);
        let conformers: Vec<Conformer> = (0..cfg.k_conformers)
            .map(|_| {
                let c = base
                    .iter()
                    .map(|p| std::array::from_fn(|k| p[k] + if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 }))
                    .collect();
                Conformer::new(c)
            })
            .collect::<Result<_>>()?;
        // the geometric target needs coordinates even when none are emitted
        let geom = geom_target(conformers.first().unwrap_or(&Conformer { coords: base.clone() }));
        let topo = topo_target(&graph);
        let st = str_target(&smiles, cfg.marked_char);
        let w = cfg.mix_weights;
        let mix = w[0] * geom + w[1] * topo + w[2] * st;
        let targets = match cfg.target {
            TargetSpec::Geom => vec![geom],
            TargetSpec::Topo => vec![topo],
            TargetSpec::Str => vec![st],
            TargetSpec::Mix => vec![mix],
            TargetSpec::All => vec![geom, topo, st, mix],
        };
        molecules.push(Molecule {
            id: format!("mol{i:05}"),
            smiles,
            graph,
            conformers,
            targets,
        });
    }
    Dataset::new(molecules, cfg.target.names())
}
