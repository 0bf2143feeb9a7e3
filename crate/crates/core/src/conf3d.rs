//! SchNet-style conformer encoder: continuous-filter convolutions over
//! pairwise distances, so the output depends on coordinates only through
//! `‖r_u − r_v‖`.

use crate::error::{bail, Result};
use crate::nn::{CategoricalEmbedding, Ctx, Linear};
use crate::tensor::{ParamBuilder, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Atom coordinates in Å, ordered like the parent graph's atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conformer {
    pub coords: Vec<[f64; 3]>,
}

impl Conformer {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(i) = coords.iter().position(|c| c.iter().any(|x| !x.is_finite())) {
            bail!(Data, "conformer coordinate of atom {i} is not finite");
        }
        Ok(Self { coords })
    }

    pub fn num_atoms(&self) -> usize {
        self.coords.len()
    }

    pub fn distance(&self, u: usize, v: usize) -> f64 {
        let (a, b) = (self.coords[u], self.coords[v]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    /// `x ↦ R·x + t` for every atom.
    pub fn transformed(&self, rot: &[[f64; 3]; 3], t: [f64; 3]) -> Self {
        let coords = self
            .coords
            .iter()
            .map(|x| {
                let mut y = t;
                for (r, yr) in rot.iter().zip(y.iter_mut()) {
                    *yr += r[0] * x[0] + r[1] * x[1] + r[2] * x[2];
                }
                y
            })
            .collect();
        Self { coords }
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut coords = vec![[0.0; 3]; self.coords.len()];
        for (i, c) in self.coords.iter().enumerate() {
            coords[perm[i]] = *c;
        }
        Self { coords }
    }
}

/// `0.5·(cos(π r / r_cut) + 1)` inside the cutoff, zero outside.
pub fn cosine_cutoff(r: f64, r_cut: f64) -> Result<f64> {
    if r < 0.0 || r.is_nan() {
        bail!(Input, "distance must be non-negative, got {r}");
    }
    Ok(if r < r_cut { 0.5 * ((PI * r / r_cut).cos() + 1.0) } else { 0.0 })
}

/// Gaussian expansion `exp(-γ (r − μ_k)²)` with centers spread over `[0, r_cut]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialBasis {
    pub centers: Vec<f64>,
    pub gamma: f64,
}

impl RadialBasis {
    pub fn new(count: usize, r_cut: f64, gamma: f64) -> Result<Self> {
        if count < 2 {
            bail!(Config, "radial basis needs at least 2 centers, got {count}");
        }
        if !(r_cut > 0.0) {
            bail!(Config, "cutoff radius must be positive, got {r_cut}");
        }
        let step = r_cut / (count - 1) as f64;
        Ok(Self {
            centers: (0..count).map(|k| k as f64 * step).collect(),
            gamma,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn expand(&self, r: f64) -> impl Iterator<Item = f64> + '_ {
        self.centers.iter().map(move |&m| (-self.gamma * (r - m).powi(2)).exp())
    }
}

/// Ordered neighbor pairs of a set of conformers packed as disjoint unions,
/// with their distance features precomputed.
#[derive(Debug, Clone)]
pub struct PairList<T> {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `[pairs × G]` radial features.
    pub rbf: Tensor<T>,
    pub cutoff: Vec<T>,
    pub num_atoms: usize,
}

impl<T: Scalar> PairList<T> {
    pub fn new(conformers: &[&Conformer], basis: &RadialBasis, r_cut: f64) -> Result<Self> {
        let (mut src, mut dst, mut rbf, mut cutoff) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut base = 0;
        for c in conformers {
            let n = c.num_atoms();
            for v in 0..n {
                for u in 0..n {
                    if u == v {
                        continue;
                    }
                    let r = c.distance(u, v);
                    if r >= r_cut {
                        continue;
                    }
                    src.push(base + u);
                    dst.push(base + v);
                    rbf.extend(basis.expand(r).map(T::lit));
                    cutoff.push(T::lit(cosine_cutoff(r, r_cut)?));
                }
            }
            base += n;
        }
        Ok(Self {
            rbf: Tensor::new(vec![src.len(), basis.len()], rbf)?,
            src,
            dst,
            cutoff,
            num_atoms: base,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

fn ssp<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var) -> Var {
    ctx.tape.shifted_softplus(x)
}

/// One interaction block: cfconv followed by an atomwise MLP and residual.
#[derive(Debug, Clone)]
pub struct InteractionBlock {
    pub in2f: Linear,
    pub filter1: Linear,
    pub filter2: Linear,
    pub out1: Linear,
    pub out2: Linear,
}

impl InteractionBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize, rbf: usize) -> Result<Self> {
        Ok(Self {
            in2f: pb.scope("in2f", |pb| Linear::new(pb, d, d, false))?,
            filter1: pb.scope("filter1", |pb| Linear::new(pb, rbf, d, true))?,
            filter2: pb.scope("filter2", |pb| Linear::new(pb, d, d, true))?,
            out1: pb.scope("out1", |pb| Linear::new(pb, d, d, true))?,
            out2: pb.scope("out2", |pb| Linear::new(pb, d, d, true))?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, h: Var, pairs: &PairList<T>) -> Result<Var> {
        let x = self.in2f.forward(ctx, h)?;
        let agg = if pairs.is_empty() {
            let d = ctx.tape.value(x).cols();
            ctx.constant(Tensor::zeros(&[pairs.num_atoms, d]))
        } else {
            let rbf = ctx.constant(pairs.rbf.clone());
            let w = self.filter1.forward(ctx, rbf)?;
            let w = ssp(ctx, w);
            let w = self.filter2.forward(ctx, w)?;
            let w = ctx.tape.scale_rows(w, pairs.cutoff.clone())?;
            let xu = ctx.tape.gather_rows(x, &pairs.src)?;
            let m = ctx.tape.mul(xu, w)?;
            ctx.tape.scatter_sum(m, &pairs.dst, pairs.num_atoms)?
        };
        let v = self.out1.forward(ctx, agg)?;
        let v = ssp(ctx, v);
        let v = self.out2.forward(ctx, v)?;
        ctx.tape.add(h, v)
    }
}

#[derive(Debug, Clone)]
pub struct ConformerEncoder {
    pub atom_embedding: CategoricalEmbedding,
    pub blocks: Vec<InteractionBlock>,
    pub basis: RadialBasis,
    pub r_cut: f64,
}

impl ConformerEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        atom_sizes: &[usize],
        d: usize,
        blocks: usize,
        rbf_count: usize,
        r_cut: f64,
        gamma: f64,
    ) -> Result<Self> {
        let basis = RadialBasis::new(rbf_count, r_cut, gamma)?;
        Ok(Self {
            atom_embedding: pb.scope("atom_embedding", |pb| CategoricalEmbedding::new(pb, atom_sizes, d))?,
            blocks: (0..blocks)
                .map(|b| pb.scope(&format!("block{b}"), |pb| InteractionBlock::new(pb, d, rbf_count)))
                .collect::<Result<_>>()?,
            basis,
            r_cut,
        })
    }

    /// Encodes each `(atom features, conformer)` pair; the result stacks the
    /// per-atom embeddings of all inputs in order.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, items: &[(&[Vec<usize>], &Conformer)]) -> Result<Var> {
        let mut feats = Vec::new();
        for (i, (f, c)) in items.iter().enumerate() {
            if f.len() != c.num_atoms() {
                bail!(
                    Data,
                    "conformer {i} has {} atoms but the graph has {}",
                    c.num_atoms(),
                    f.len()
                );
            }
            feats.extend(f.iter().cloned());
        }
        if feats.is_empty() {
            bail!(Input, "no atoms to encode");
        }
        let confs: Vec<&Conformer> = items.iter().map(|(_, c)| *c).collect();
        let pairs = PairList::new(&confs, &self.basis, self.r_cut)?;
        let mut h = self.atom_embedding.forward(ctx, &feats)?;
        for b in &self.blocks {
            h = b.forward(ctx, h, &pairs)?;
        }
        Ok(h)
    }

    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, features: &[Vec<usize>], conf: &Conformer) -> Result<Var> {
        self.forward(ctx, &[(features, conf)])
    }
}

/// Uniformly random orthogonal matrix from the QR decomposition of a
/// Gaussian matrix; `proper` forces determinant +1.
pub fn random_orthogonal<R: rand::Rng>(rng: &mut R, proper: bool) -> [[f64; 3]; 3] {
    use rand_distr::{Distribution, StandardNormal};
    let mut cols: Vec<[f64; 3]> = (0..3)
        .map(|_| std::array::from_fn(|_| StandardNormal.sample(rng)))
        .collect();
    // Gram-Schmidt on columns
    for i in 0..3 {
        for j in 0..i {
            let p: f64 = (0..3).map(|r| cols[i][r] * cols[j][r]).sum();
            for r in 0..3 {
                cols[i][r] -= p * cols[j][r];
            }
        }
        let n = (0..3).map(|r| cols[i][r] * cols[i][r]).sum::<f64>().sqrt();
        for r in 0..3 {
            cols[i][r] /= n;
        }
    }
    let mut m = [[0.0; 3]; 3];
    for (c, col) in cols.iter().enumerate() {
        for r in 0..3 {
            m[r][c] = col[r];
        }
    }
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if proper && det < 0.0 {
        for row in m.iter_mut() {
            row[0] = -row[0];
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::tensor::{InitMode, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SIZES: [usize; 1] = [4];

    fn setup<T: Scalar>(seed: u64, d: usize, blocks: usize) -> (ParamStore<T>, ConformerEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, InitMode::Glorot);
        let enc = ConformerEncoder::new(&mut pb, &SIZES, d, blocks, 50, 5.0, 10.0).unwrap();
        (store, enc)
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> (Vec<Vec<usize>>, Conformer) {
        let f = (0..n).map(|_| vec![rng.random_range(0..4)]).collect();
        let c = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-spread..spread)))
            .collect();
        (f, Conformer::new(c).unwrap())
    }

    fn run<T: Scalar>(store: &ParamStore<T>, enc: &ConformerEncoder, f: &[Vec<usize>], c: &Conformer) -> Tensor<T> {
        let mut ctx = Ctx::new(store, AttentionKind::Naive);
        let h = enc.encode(&mut ctx, f, c).unwrap();
        ctx.tape.value(h).clone()
    }

    #[test]
    fn cutoff_examples() {
        assert_eq!(cosine_cutoff(0.0, 5.0).unwrap(), 1.0);
        assert!(cosine_cutoff(5.0, 5.0).unwrap().abs() < 1e-15);
        assert!((cosine_cutoff(2.5, 5.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(cosine_cutoff(7.0, 5.0).unwrap(), 0.0);
        assert!(cosine_cutoff(-0.1, 5.0).is_err());
    }

    #[test]
    fn radial_basis_is_sorted_and_spans_cutoff() {
        let b = RadialBasis::new(50, 5.0, 10.0).unwrap();
        assert_eq!(b.centers.first(), Some(&0.0));
        assert!((b.centers[49] - 5.0).abs() < 1e-12);
        assert!(b.centers.windows(2).all(|w| w[0] < w[1]));
        assert!(RadialBasis::new(1, 5.0, 10.0).is_err());
    }

    #[test]
    fn interaction_block_matches_pairwise_oracle() {
        let (store, enc) = setup::<f64>(3, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f, c) = cloud(&mut rng, 5, 2.0);
        let mut ctx = Ctx::new(&store, AttentionKind::Naive);
        let h0 = enc.atom_embedding.forward(&mut ctx, &f).unwrap();
        let h0 = ctx.tape.value(h0).clone();
        let got = run(&store, &enc, &f, &c);

        let p = |n: &str| store.by_name(&format!("block0.{n}")).unwrap();
        let lin = |x: &[f64], n: &str, bias: bool| -> Vec<f64> {
            let w = p(&format!("{n}.w"));
            (0..w.cols())
                .map(|j| {
                    let b = if bias { p(&format!("{n}.b")).data()[j] } else { 0.0 };
                    b + x.iter().enumerate().map(|(i, xi)| xi * w.get2(i, j)).sum::<f64>()
                })
                .collect()
        };
        let ssp = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| (0.5 * x.exp() + 0.5).ln()).collect() };
        for v in 0..5 {
            let mut agg = vec![0.0; 6];
            for u in 0..5 {
                let r = c.distance(u, v);
                if u == v || r >= 5.0 {
                    continue;
                }
                let rbf: Vec<f64> = enc.basis.expand(r).collect();
                let w = lin(&ssp(lin(&rbf, "filter1", true)), "filter2", true);
                let x = lin(h0.row(u), "in2f", false);
                let cut = cosine_cutoff(r, 5.0).unwrap();
                for k in 0..6 {
                    agg[k] += x[k] * w[k] * cut;
                }
            }
            let out = lin(&ssp(lin(&agg, "out1", true)), "out2", true);
            for k in 0..6 {
                assert!((h0.get2(v, k) + out[k] - got.get2(v, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn far_atoms_behave_as_isolated() {
        let (store, enc) = setup::<f64>(4, 8, 3);
        let f = vec![vec![1], vec![2]];
        let pair = Conformer::new(vec![[0.0; 3], [6.0, 0.0, 0.0]]).unwrap();
        let both = run(&store, &enc, &f, &pair);
        let a = run(&store, &enc, &f[..1], &Conformer::new(vec![[0.0; 3]]).unwrap());
        let b = run(&store, &enc, &f[1..], &Conformer::new(vec![[1.0; 3]]).unwrap());
        assert_eq!(both.row(0), a.row(0));
        assert_eq!(both.row(1), b.row(0));
    }

    #[test]
    fn output_shape_default_width() {
        let (store, enc) = setup::<f32>(5, 128, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (f, c) = cloud(&mut rng, 7, 2.0);
        assert_eq!(run(&store, &enc, &f, &c).shape(), &[7, 128]);
    }

    #[test]
    fn translation_is_exact_and_rotation_within_tolerance() {
        let (store, enc) = setup::<f32>(6, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let (f, c) = cloud(&mut rng, 6, 2.0);
            let base = run(&store, &enc, &f, &c);
            let ident = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            // integer shift keeps the f64 differences bit-identical
            let moved = run(&store, &enc, &f, &c.transformed(&ident, [4.0, -8.0, 2.0]));
            assert!(base.max_abs_diff(&moved) < 1e-6);
            let rot = random_orthogonal(&mut rng, false);
            let turned = run(&store, &enc, &f, &c.transformed(&rot, [0.3, 0.1, -2.0]));
            assert!(base.max_abs_diff(&turned) < 1e-5);
        }
    }

    #[test]
    fn rigid_motion_invariance_f64() {
        let (store, enc) = setup::<f64>(7, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let (f, c) = cloud(&mut rng, 6, 2.5);
            let rot = random_orthogonal(&mut rng, false);
            let t = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
            let diff = run(&store, &enc, &f, &c).max_abs_diff(&run(&store, &enc, &f, &c.transformed(&rot, t)));
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (store, enc) = setup::<f64>(8, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (f, c) = cloud(&mut rng, 5, 2.0);
        let perm = [2, 4, 0, 1, 3];
        let mut fp = vec![Vec::new(); 5];
        for i in 0..5 {
            fp[perm[i]] = f[i].clone();
        }
        let a = run(&store, &enc, &f, &c);
        let b = run(&store, &enc, &fp, &c.permuted(&perm));
        for i in 0..5 {
            for (x, y) in a.row(i).iter().zip(b.row(perm[i])) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn output_is_smooth_across_cutoff() {
        let (store, enc) = setup::<f64>(9, 8, 3);
        let f = vec![vec![0], vec![1]];
        let at = |x: f64| run(&store, &enc, &f, &Conformer::new(vec![[0.0; 3], [x, 0.0, 0.0]]).unwrap());
        let h = 1e-4;
        let slope = |x: f64| {
            let (a, b) = (at(x + h), at(x - h));
            a.data().iter().zip(b.data()).map(|(p, q)| (p - q) / (2.0 * h)).collect::<Vec<_>>()
        };
        let inside = slope(5.0 - 2.0 * h);
        let outside = slope(5.0 + 2.0 * h);
        let jump = inside.iter().zip(&outside).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(jump < 1e-3, "derivative jump {jump}");
    }

    #[test]
    fn mismatched_atom_count_is_data_error() {
        let (store, enc) = setup::<f64>(10, 8, 1);
        let mut ctx = Ctx::new(&store, AttentionKind::Naive);
        let c = Conformer::new(vec![[0.0; 3]]).unwrap();
        assert!(matches!(
            enc.encode(&mut ctx, &[vec![0], vec![1]], &c),
            Err(crate::error::Error::Data(_))
        ));
        assert!(Conformer::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }
}
