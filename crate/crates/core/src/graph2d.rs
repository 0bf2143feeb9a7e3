//! GINE message passing over the covalent bond graph.
//!
//! Each layer computes
//! `z_v = MLP((1 + ε)·h_v + Σ_{u ∈ N(v)} ReLU(h_u + E[bond(u, v)]))`
//! and updates `h_v ← h_v + LN(z_v)`. Every post-layer embedding is kept so
//! the fusion sequence can draw tokens from all depths.

use crate::error::{bail, Result};
use crate::nn::{CategoricalEmbedding, Ctx, LayerNorm, Mlp};
use crate::tensor::{ParamBuilder, ParamId, Scalar, Var};
use serde::{Deserialize, Serialize};

pub const BOND_TYPES: usize = 4;

/// Atoms with categorical features and bonds stored in both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolGraph {
    pub atom_features: Vec<Vec<usize>>,
    /// Directed edges `(u, v)`; every edge has its reverse at the same type.
    pub edges: Vec<(usize, usize)>,
    pub edge_types: Vec<usize>,
}

impl MolGraph {
    /// Builds a graph from undirected bonds `(u, v, type)`, mirroring each.
    pub fn new(atom_features: Vec<Vec<usize>>, bonds: &[(usize, usize, usize)]) -> Result<Self> {
        let n = atom_features.len();
        let mut edges = Vec::with_capacity(bonds.len() * 2);
        let mut edge_types = Vec::with_capacity(bonds.len() * 2);
        let mut seen = std::collections::HashSet::new();
        for &(u, v, t) in bonds {
            if u >= n || v >= n {
                bail!(Data, "bond ({u}, {v}) references an atom outside 0..{n}");
            }
            if u == v {
                bail!(Data, "self-loop on atom {u}");
            }
            if t >= BOND_TYPES {
                bail!(Data, "unknown bond type {t} on bond ({u}, {v})");
            }
            if !seen.insert((u.min(v), u.max(v))) {
                bail!(Data, "duplicate bond ({u}, {v})");
            }
            edges.push((u, v));
            edge_types.push(t);
            edges.push((v, u));
            edge_types.push(t);
        }
        Ok(Self {
            atom_features,
            edges,
            edge_types,
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_features.len()
    }

    /// Undirected bonds `(u, v, type)` with `u < v`, in first-seen order.
    pub fn bonds(&self) -> Vec<(usize, usize, usize)> {
        self.edges
            .iter()
            .zip(&self.edge_types)
            .filter(|((u, v), _)| u < v)
            .map(|(&(u, v), &t)| (u, v, t))
            .collect()
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.0 == v).map(|e| e.1)
    }

    /// Relabels atoms so that old atom `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut atom_features = vec![Vec::new(); self.num_atoms()];
        for (i, f) in self.atom_features.iter().enumerate() {
            atom_features[perm[i]] = f.clone();
        }
        Self {
            atom_features,
            edges: self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect(),
            edge_types: self.edge_types.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_atoms();
        if self.edges.len() != self.edge_types.len() {
            bail!(Data, "edge list and edge types differ in length");
        }
        let mut set = std::collections::HashMap::new();
        for (&(u, v), &t) in self.edges.iter().zip(&self.edge_types) {
            if u >= n || v >= n || u == v {
                bail!(Data, "invalid edge ({u}, {v}) for {n} atoms");
            }
            set.insert((u, v), t);
        }
        for (&(u, v), &t) in &set {
            if set.get(&(v, u)) != Some(&t) {
                bail!(Data, "edge ({u}, {v}) lacks a reverse copy with the same type");
            }
        }
        Ok(())
    }
}

/// Disjoint union of several graphs, as consumed by the encoder.
#[derive(Debug, Clone, Default)]
pub struct GraphBatch {
    pub atom_features: Vec<Vec<usize>>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge_types: Vec<usize>,
    /// Atom offsets per graph with sentinel.
    pub offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&MolGraph]) -> Self {
        let mut b = GraphBatch {
            offsets: vec![0],
            ..Default::default()
        };
        for g in graphs {
            let base = b.atom_features.len();
            b.atom_features.extend(g.atom_features.iter().cloned());
            for (&(u, v), &t) in g.edges.iter().zip(&g.edge_types) {
                b.src.push(base + u);
                b.dst.push(base + v);
                b.edge_types.push(t);
            }
            b.offsets.push(b.atom_features.len());
        }
        b
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_features.len()
    }
}

/// Per-atom embeddings after every message-passing layer.
#[derive(Debug, Clone)]
pub struct LayerEmbeddings {
    pub per_layer: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct GineLayer {
    pub eps: ParamId,
    pub bond_embedding: ParamId,
    pub mlp: Mlp,
    pub norm: LayerNorm,
    pub d: usize,
}

impl GineLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize) -> Result<Self> {
        Ok(Self {
            eps: pb.zeros("eps", &[1])?,
            bond_embedding: pb.weight("bond_embedding", BOND_TYPES, d)?,
            mlp: pb.scope("mlp", |pb| Mlp::new(pb, d, 2 * d, d))?,
            norm: pb.scope("norm", |pb| LayerNorm::new(pb, d))?,
            d,
        })
    }

    /// The GINE update `MLP((1+ε)h_v + Σ ReLU(h_u + E[e_uv]))`.
    pub fn message_update<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, h: Var, batch: &GraphBatch) -> Result<Var> {
        let width = ctx.tape.value(h).cols();
        if width != self.d {
            bail!(
                Config,
                "bond embeddings have width {} but atom embeddings have width {width}",
                self.d
            );
        }
        let eps = ctx.param(self.eps);
        let scaled = ctx.tape.mul_scalar(h, eps)?;
        let mut agg = ctx.tape.add(h, scaled)?;
        if !batch.src.is_empty() {
            let table = ctx.param(self.bond_embedding);
            let e = ctx.tape.gather_rows(table, &batch.edge_types)?;
            let hu = ctx.tape.gather_rows(h, &batch.src)?;
            let m = ctx.tape.add(hu, e)?;
            let m = ctx.tape.relu(m);
            let s = ctx.tape.scatter_sum(m, &batch.dst, batch.num_atoms())?;
            agg = ctx.tape.add(agg, s)?;
        }
        self.mlp.forward(ctx, agg)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, h: Var, batch: &GraphBatch) -> Result<Var> {
        let z = self.message_update(ctx, h, batch)?;
        let z = self.norm.forward(ctx, z)?;
        ctx.tape.add(h, z)
    }
}

#[derive(Debug, Clone)]
pub struct GraphEncoder {
    pub atom_embedding: CategoricalEmbedding,
    pub layers: Vec<GineLayer>,
}

impl GraphEncoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, atom_sizes: &[usize], d: usize, layers: usize) -> Result<Self> {
        Ok(Self {
            atom_embedding: pb.scope("atom_embedding", |pb| CategoricalEmbedding::new(pb, atom_sizes, d))?,
            layers: (0..layers)
                .map(|j| pb.scope(&format!("layer{j}"), |pb| GineLayer::new(pb, d)))
                .collect::<Result<_>>()?,
        })
    }

    /// Runs every layer and returns the post-layer embeddings (the embedded
    /// input is not included).
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, batch: &GraphBatch) -> Result<LayerEmbeddings> {
        if batch.num_atoms() == 0 {
            bail!(Input, "graph has no atoms");
        }
        let mut h = self.atom_embedding.forward(ctx, &batch.atom_features)?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(ctx, h, batch)?;
            per_layer.push(h);
        }
        Ok(LayerEmbeddings { per_layer })
    }

    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, graph: &MolGraph) -> Result<LayerEmbeddings> {
        self.forward(ctx, &GraphBatch::new(&[graph]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::tensor::{InitMode, ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SIZES: [usize; 2] = [5, 4];

    fn setup(seed: u64, d: usize, layers: usize) -> (ParamStore<f64>, GraphEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, InitMode::Glorot);
        let enc = GraphEncoder::new(&mut pb, &SIZES, d, layers).unwrap();
        // non-zero ε so its path is exercised
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("eps") {
                store.get_mut(id).data_mut()[0] = 0.3;
            }
        }
        (store, enc)
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> MolGraph {
        let feats = (0..n).map(|_| vec![rng.random_range(0..5), rng.random_range(0..4)]).collect();
        let mut bonds = Vec::new();
        for v in 1..n {
            bonds.push((rng.random_range(0..v), v, rng.random_range(0..BOND_TYPES)));
        }
        if n > 3 && !bonds.iter().any(|&(u, v, _)| u == 0 && v == n - 1) {
            bonds.push((0, n - 1, 1));
        }
        MolGraph::new(feats, &bonds).unwrap()
    }

    fn embed_input(store: &ParamStore<f64>, enc: &GraphEncoder, g: &MolGraph) -> Tensor<f64> {
        let mut ctx = Ctx::new(store, AttentionKind::Naive);
        let h = enc.atom_embedding.forward(&mut ctx, &g.atom_features).unwrap();
        ctx.tape.value(h).clone()
    }

    #[test]
    fn graph_construction_mirrors_and_validates() {
        let g = MolGraph::new(vec![vec![0]; 3], &[(0, 1, 0), (1, 2, 1)]).unwrap();
        assert_eq!(g.edges.len(), 4);
        g.validate().unwrap();
        assert_eq!(g.bonds(), vec![(0, 1, 0), (1, 2, 1)]);
        assert!(MolGraph::new(vec![vec![0]; 2], &[(0, 0, 0)]).is_err());
        assert!(MolGraph::new(vec![vec![0]; 2], &[(0, 2, 0)]).is_err());
        assert!(MolGraph::new(vec![vec![0]; 2], &[(0, 1, 7)]).is_err());
    }

    #[test]
    fn message_update_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, enc) = setup(4, 6, 1);
        let g = random_graph(&mut rng, 6);
        let h0 = embed_input(&store, &enc, &g);
        let layer = &enc.layers[0];

        let mut ctx = Ctx::new(&store, AttentionKind::Naive);
        let hv = ctx.constant(h0.clone());
        let z = layer.message_update(&mut ctx, hv, &GraphBatch::new(&[&g])).unwrap();
        let got = ctx.tape.value(z).clone();

        // per-node oracle of the same formula
        let d = 6;
        let p = |name: &str| store.by_name(name).unwrap();
        let eps = p("layer0.eps").data()[0];
        let bond = p("layer0.bond_embedding");
        let (w1, b1) = (p("layer0.mlp.fc1.w"), p("layer0.mlp.fc1.b"));
        let (w2, b2) = (p("layer0.mlp.fc2.w"), p("layer0.mlp.fc2.b"));
        for v in 0..6 {
            let mut agg: Vec<f64> = (0..d).map(|c| (1.0 + eps) * h0.get2(v, c)).collect();
            for (&(a, b), &t) in g.edges.iter().zip(&g.edge_types) {
                if b == v {
                    for c in 0..d {
                        agg[c] += (h0.get2(a, c) + bond.get2(t, c)).max(0.0);
                    }
                }
            }
            let hidden: Vec<f64> = (0..2 * d)
                .map(|j| (b1.data()[j] + (0..d).map(|c| agg[c] * w1.get2(c, j)).sum::<f64>()).max(0.0))
                .collect();
            for c in 0..d {
                let o = b2.data()[c] + (0..2 * d).map(|j| hidden[j] * w2.get2(j, c)).sum::<f64>();
                assert!((o - got.get2(v, c)).abs() < 1e-12, "node {v} col {c}");
            }
        }
    }

    #[test]
    fn isolated_node_reduces_to_scaled_self() {
        let (store, enc) = setup(5, 4, 1);
        let g = MolGraph::new(vec![vec![2, 1]], &[]).unwrap();
        let h0 = embed_input(&store, &enc, &g);
        let mut ctx = Ctx::new(&store, AttentionKind::Naive);
        let hv = ctx.constant(h0.clone());
        let z = enc.layers[0].message_update(&mut ctx, hv, &GraphBatch::new(&[&g])).unwrap();
        let z = ctx.tape.value(z).clone();

        let mut ctx = Ctx::new(&store, AttentionKind::Naive);
        let scaled = Tensor::new(vec![1, 4], h0.data().iter().map(|v| v * 1.3).collect()).unwrap();
        let sv = ctx.constant(scaled);
        let expect = enc.layers[0].mlp.forward(&mut ctx, sv).unwrap();
        assert!(ctx.tape.value(expect).max_abs_diff(&z) < 1e-15);
    }

    #[test]
    fn symmetric_pair_gets_identical_outputs() {
        let (store, enc) = setup(6, 8, 3);
        let g = MolGraph::new(vec![vec![1, 1], vec![1, 1]], &[(0, 1, 2)]).unwrap();
        let mut ctx = Ctx::new(&store, AttentionKind::Naive);
        let out = enc.encode(&mut ctx, &g).unwrap();
        for &l in &out.per_layer {
            let t = ctx.tape.value(l);
            assert_eq!(t.row(0), t.row(1));
        }
    }

    #[test]
    fn output_shapes_follow_layer_count() {
        let (store, enc) = setup(7, 128, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_graph(&mut rng, 5);
        let mut ctx = Ctx::new(&store, AttentionKind::Naive);
        let out = enc.encode(&mut ctx, &g).unwrap();
        assert_eq!(out.per_layer.len(), 6);
        for &l in &out.per_layer {
            assert_eq!(ctx.tape.shape(l), &[5, 128]);
        }
    }

    #[test]
    fn relabeling_permutes_rows() {
        let (store, enc) = setup(8, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_graph(&mut rng, 7);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let gp = g.permuted(&perm);
        let mut ctx = Ctx::new(&store, AttentionKind::Naive);
        let a = enc.encode(&mut ctx, &g).unwrap();
        let b = enc.encode(&mut ctx, &gp).unwrap();
        for (&la, &lb) in a.per_layer.iter().zip(&b.per_layer) {
            let (ta, tb) = (ctx.tape.value(la), ctx.tape.value(lb));
            for i in 0..7 {
                for (x, y) in ta.row(i).iter().zip(tb.row(perm[i])) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn swapping_directed_copies_changes_nothing() {
        let (store, enc) = setup(9, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_graph(&mut rng, 6);
        let mut swapped = g.clone();
        for pair in swapped.edges.chunks_mut(2) {
            pair.swap(0, 1);
        }
        swapped.validate().unwrap();
        let mut ctx = Ctx::new(&store, AttentionKind::Naive);
        let a = enc.encode(&mut ctx, &g).unwrap();
        let b = enc.encode(&mut ctx, &swapped).unwrap();
        for (&la, &lb) in a.per_layer.iter().zip(&b.per_layer) {
            assert_eq!(ctx.tape.value(la), ctx.tape.value(lb));
        }
    }

    #[test]
    fn disconnected_components_are_independent() {
        let (store, enc) = setup(10, 8, 3);
        let a = MolGraph::new(vec![vec![0, 1], vec![1, 2], vec![2, 1]], &[(0, 1, 0), (1, 2, 0)]).unwrap();
        let union = |bfeat: usize| {
            MolGraph::new(
                vec![vec![0, 1], vec![1, 2], vec![2, 1], vec![bfeat, 0], vec![bfeat, 3]],
                &[(0, 1, 0), (1, 2, 0), (3, 4, 1)],
            )
            .unwrap()
        };
        let mut ctx = Ctx::new(&store, AttentionKind::Naive);
        let alone = enc.encode(&mut ctx, &a).unwrap();
        let u1 = enc.encode(&mut ctx, &union(4)).unwrap();
        let u0 = enc.encode(&mut ctx, &union(0)).unwrap();
        for j in 0..3 {
            let ta = ctx.tape.value(alone.per_layer[j]).clone();
            for u in [&u1, &u0] {
                let tu = ctx.tape.value(u.per_layer[j]);
                assert_eq!(&tu.data()[..3 * 8], ta.data());
            }
        }
    }
}
