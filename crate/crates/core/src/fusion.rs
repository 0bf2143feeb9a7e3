//! The multimodal model: three encoders, the packed token sequence
//! `[CLS, 1D…, SEP, 2D…, SEP, 3D…, SEP]`, a downstream transformer and a
//! readout on the CLS row.
//!
//! 2D tokens are ordered layer-major (all atoms of layer 1, then layer 2, …)
//! and 3D tokens conformer-major. No positional encoding is added in the
//! downstream stack, so only the modality encodings and special tokens tell
//! token groups apart.

use crate::attention::{AttentionProbe, ScoreDump};
use crate::conf3d::{Conformer, ConformerEncoder};
use crate::config::ModelConfig;
use crate::error::{bail, Error, Result};
use crate::graph2d::{GraphBatch, GraphEncoder, MolGraph};
use crate::nn::{Ctx, Linear, Mlp, TransformerStack};
use crate::smiles::{SmilesEncoder, SmilesTokens, SmilesVocab};
use crate::tensor::{InitMode, ParamBuilder, ParamId, ParamStore, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Cls,
    Sep,
    Smiles,
    Graph,
    Conformer,
}

/// Where a token of the fused sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Cls,
    Sep,
    Char(usize),
    Atom { atom: usize, layer: usize },
    ConformerAtom { atom: usize, conformer: usize },
}

impl Provenance {
    pub fn kind(self) -> TokenKind {
        match self {
            Provenance::Cls => TokenKind::Cls,
            Provenance::Sep => TokenKind::Sep,
            Provenance::Char(_) => TokenKind::Smiles,
            Provenance::Atom { .. } => TokenKind::Graph,
            Provenance::ConformerAtom { .. } => TokenKind::Conformer,
        }
    }
}

/// Which modalities enter the sequence. Labels follow `1d`, `2d`, `3d`
/// joined by `+` (commas are accepted too).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalityMask {
    pub use_1d: bool,
    pub use_2d: bool,
    pub use_3d: bool,
}

impl ModalityMask {
    pub const ALL: ModalityMask = ModalityMask {
        use_1d: true,
        use_2d: true,
        use_3d: true,
    };

    pub fn new(use_1d: bool, use_2d: bool, use_3d: bool) -> Result<Self> {
        if !(use_1d || use_2d || use_3d) {
            bail!(Config, "at least one modality must be enabled");
        }
        Ok(Self { use_1d, use_2d, use_3d })
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.use_1d, "1d"), (self.use_2d, "2d"), (self.use_3d, "3d")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, l)| *l)
            .collect();
        parts.join("+")
    }

    /// The seven non-empty masks in the order 1d, 2d, 3d, 1d+2d, 1d+3d,
    /// 2d+3d, 1d+2d+3d.
    pub fn all_combinations() -> Vec<Self> {
        ["1d", "2d", "3d", "1d+2d", "1d+3d", "2d+3d", "1d+2d+3d"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect()
    }
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ModalityMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut a, mut b, mut c) = (false, false, false);
        for part in s.split(['+', ',']).map(str::trim) {
            match part.to_ascii_lowercase().as_str() {
                "1d" => a = true,
                "2d" => b = true,
                "3d" => c = true,
                _ => bail!(Config, "unknown modality `{part}` in `{s}` (expected 1d, 2d or 3d)"),
            }
        }
        Self::new(a, b, c)
    }
}

impl Serialize for ModalityMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for ModalityMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Read access to the per-modality inputs of one molecule.
pub trait ModalitySource {
    fn id(&self) -> &str;
    fn smiles(&self) -> &str;
    fn atom_features(&self) -> &[Vec<usize>];
    fn graph(&self) -> &MolGraph;
    fn conformers(&self) -> &[Conformer];
}

/// Packed encoder rows of one modality plus, per molecule, the rows to
/// place in its sequence.
#[derive(Debug, Clone)]
pub struct ModalityTokens {
    pub rows: Var,
    pub per_molecule: Vec<Vec<(usize, Provenance)>>,
}

/// Fused sequences of a batch, packed with segment offsets.
#[derive(Debug, Clone)]
pub struct FusionSequence {
    pub tokens: Var,
    pub offsets: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl FusionSequence {
    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Vec<TokenKind> {
        self.provenance.iter().map(|p| p.kind()).collect()
    }

    /// SEP positions of segment `m`, relative to its start.
    pub fn sep_positions(&self, m: usize) -> Vec<usize> {
        let (s, e) = (self.offsets[m], self.offsets[m + 1]);
        (s..e).filter(|&i| self.provenance[i] == Provenance::Sep).map(|i| i - s).collect()
    }
}

/// Sequence length for one molecule under `mask`.
pub fn sequence_length(n_chars: usize, atoms: usize, layers: usize, conformers: usize, mask: ModalityMask) -> usize {
    let mut l = 1;
    if mask.use_1d {
        l += n_chars + 1;
    }
    if mask.use_2d {
        l += atoms * layers + 1;
    }
    if mask.use_3d {
        l += atoms * conformers + 1;
    }
    l
}

#[derive(Debug, Clone)]
pub struct MolMix {
    pub config: ModelConfig,
    pub vocab: SmilesVocab,
    pub smiles: SmilesEncoder,
    pub graph: GraphEncoder,
    pub conformer: ConformerEncoder,
    pub proj: [Linear; 3],
    pub modality: [ParamId; 3],
    pub cls: ParamId,
    pub sep: ParamId,
    pub downstream: TransformerStack,
    pub readout: Mlp,
}

impl MolMix {
    /// Builds the model; `config.vocab_size` is taken from `vocab`.
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, config: &ModelConfig, vocab: SmilesVocab) -> Result<Self> {
        let mut config = config.clone();
        config.vocab_size = vocab.len();
        config.validate()?;
        let c = &config;
        let smiles = pb.scope("smiles", |pb| {
            SmilesEncoder::new(pb, c.vocab_size, c.d_enc, c.smiles_layers, c.smiles_heads, c.ff_mult)
        })?;
        let graph = pb.scope("graph", |pb| GraphEncoder::new(pb, &c.atom_feature_sizes, c.d_enc, c.gine_layers))?;
        let conformer = pb.scope("conformer", |pb| {
            ConformerEncoder::new(
                pb,
                &c.atom_feature_sizes,
                c.d_enc,
                c.schnet_blocks,
                c.rbf_count,
                c.cutoff,
                c.rbf_gamma,
            )
        })?;
        let mut proj = Vec::new();
        let mut modality = Vec::new();
        for tag in ["1d", "2d", "3d"] {
            proj.push(pb.scope(&format!("proj{tag}"), |pb| Linear::new(pb, c.d_enc, c.d_model, true))?);
            modality.push(pb.scope("modality", |pb| pb.weight(tag, 1, c.d_model))?);
        }
        let cls = pb.weight("cls", 1, c.d_model)?;
        let sep = pb.weight("sep", 1, c.d_model)?;
        let downstream =
            pb.scope("fusion", |pb| TransformerStack::new(pb, c.d_model, c.fusion_layers, c.fusion_heads, c.ff_mult))?;
        let readout = pb.scope("readout", |pb| Mlp::new(pb, c.d_model, c.d_model, c.targets))?;
        Ok(Self {
            smiles,
            graph,
            conformer,
            proj: proj.try_into().unwrap(),
            modality: modality.try_into().unwrap(),
            cls,
            sep,
            downstream,
            readout,
            vocab,
            config,
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init<T: Scalar>(
        config: &ModelConfig,
        vocab: SmilesVocab,
        seed: u64,
        mode: InitMode,
    ) -> Result<(ParamStore<T>, Self)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, mode);
        let model = Self::new(&mut pb, config, vocab)?;
        Ok((store, model))
    }

    pub fn tokenize(&self, smiles: &str) -> Result<SmilesTokens> {
        self.vocab.tokenize(smiles)
    }

    /// Runs the enabled encoders over the batch. Disabled modalities are not
    /// read from `mols`.
    pub fn encode<T: Scalar, M: ModalitySource + ?Sized>(
        &self,
        ctx: &mut Ctx<'_, T>,
        mols: &[&M],
        mask: ModalityMask,
    ) -> Result<[Option<ModalityTokens>; 3]> {
        ModalityMask::new(mask.use_1d, mask.use_2d, mask.use_3d)?;
        if mols.is_empty() {
            bail!(Input, "empty molecule batch");
        }
        let one = if mask.use_1d {
            let tokens = mols
                .iter()
                .map(|m| {
                    self.tokenize(m.smiles())
                        .map_err(|e| Error::Data(format!("molecule `{}`: {e}", m.id())))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SmilesTokens> = tokens.iter().collect();
            let (rows, offsets) = self.smiles.forward(ctx, &refs)?;
            let per_molecule = offsets
                .windows(2)
                .map(|w| (w[0]..w[1]).map(|r| (r, Provenance::Char(r - w[0]))).collect())
                .collect();
            Some(ModalityTokens { rows, per_molecule })
        } else {
            None
        };

        let two = if mask.use_2d {
            let graphs: Vec<&MolGraph> = mols.iter().map(|m| m.graph()).collect();
            let batch = GraphBatch::new(&graphs);
            let emb = self.graph.forward(ctx, &batch)?;
            let total = batch.num_atoms();
            let rows = ctx.tape.concat_rows(&emb.per_layer)?;
            let per_molecule = batch
                .offsets
                .windows(2)
                .map(|w| {
                    (0..emb.per_layer.len())
                        .flat_map(|j| (w[0]..w[1]).map(move |a| (j * total + a, Provenance::Atom { atom: a - w[0], layer: j + 1 })))
                        .collect()
                })
                .collect();
            Some(ModalityTokens { rows, per_molecule })
        } else {
            None
        };

        let three = if mask.use_3d {
            let mut items = Vec::new();
            let mut per_molecule = Vec::with_capacity(mols.len());
            let mut row = 0;
            for m in mols {
                let confs = m.conformers();
                if confs.is_empty() {
                    bail!(Data, "molecule `{}` has no conformers but the 3d modality is enabled", m.id());
                }
                let feats = m.atom_features();
                let mut toks = Vec::new();
                for (c, conf) in confs.iter().enumerate() {
                    items.push((feats, conf));
                    for a in 0..conf.num_atoms() {
                        toks.push((row + a, Provenance::ConformerAtom { atom: a, conformer: c }));
                    }
                    row += conf.num_atoms();
                }
                per_molecule.push(toks);
            }
            let rows = self.conformer.forward(ctx, &items)?;
            Some(ModalityTokens { rows, per_molecule })
        } else {
            None
        };
        Ok([one, two, three])
    }

    /// Projects each modality, adds its modality encoding and interleaves
    /// CLS/SEP tokens into one packed sequence per molecule.
    pub fn build_sequence<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        modalities: &[Option<ModalityTokens>; 3],
    ) -> Result<FusionSequence> {
        let present: Vec<usize> = (0..3).filter(|&i| modalities[i].is_some()).collect();
        if present.is_empty() {
            bail!(Config, "at least one modality must be enabled");
        }
        let batch = modalities[present[0]].as_ref().unwrap().per_molecule.len();
        let cls = ctx.param(self.cls);
        let sep = ctx.param(self.sep);
        let mut parts = vec![cls, sep];
        let mut base = vec![0usize; 3];
        let mut next = 2;
        for &i in &present {
            let m = modalities[i].as_ref().unwrap();
            let width = ctx.tape.value(m.rows).cols();
            if width != self.config.d_enc {
                bail!(
                    Config,
                    "modality {} encodings have width {width}, expected {}",
                    i + 1,
                    self.config.d_enc
                );
            }
            if m.per_molecule.len() != batch {
                bail!(Contract, "modalities disagree on the batch size");
            }
            let p = self.proj[i].forward(ctx, m.rows)?;
            let enc = ctx.param(self.modality[i]);
            parts.push(ctx.tape.add_row(p, enc)?);
            base[i] = next;
            next += ctx.tape.value(m.rows).rows();
        }
        let all = ctx.tape.concat_rows(&parts)?;
        let mut index = Vec::new();
        let mut provenance = Vec::new();
        let mut offsets = vec![0];
        for b in 0..batch {
            index.push(0);
            provenance.push(Provenance::Cls);
            for &i in &present {
                for &(r, p) in &modalities[i].as_ref().unwrap().per_molecule[b] {
                    index.push(base[i] + r);
                    provenance.push(p);
                }
                index.push(1);
                provenance.push(Provenance::Sep);
            }
            offsets.push(index.len());
        }
        let tokens = ctx.tape.gather_rows(all, &index)?;
        Ok(FusionSequence {
            tokens,
            offsets,
            provenance,
        })
    }

    /// Downstream transformer and CLS readout; returns `[batch × targets]`
    /// and the per-layer attention projections.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, seq: &FusionSequence) -> Result<(Var, Vec<AttentionProbe>)> {
        let (h, probes) = self.downstream.forward(ctx, seq.tokens, &seq.offsets)?;
        let cls_rows: Vec<usize> = seq.offsets[..seq.offsets.len() - 1].to_vec();
        let cls = ctx.tape.gather_rows(h, &cls_rows)?;
        Ok((self.readout.forward(ctx, cls)?, probes))
    }

    pub fn predict_batch<T: Scalar, M: ModalitySource + ?Sized>(
        &self,
        ctx: &mut Ctx<'_, T>,
        mols: &[&M],
        mask: ModalityMask,
    ) -> Result<Var> {
        let enc = self.encode(ctx, mols, mask)?;
        let seq = self.build_sequence(ctx, &enc)?;
        Ok(self.forward(ctx, &seq)?.0)
    }

    /// `f_θ` for one molecule, in normalized target units.
    pub fn predict<T: Scalar, M: ModalitySource + ?Sized>(
        &self,
        store: &ParamStore<T>,
        mol: &M,
        mask: ModalityMask,
    ) -> Result<Vec<T>> {
        let mut ctx = Ctx::new(store, self.config.attention);
        let y = self.predict_batch(&mut ctx, &[mol], mask)?;
        Ok(ctx.tape.value(y).data().to_vec())
    }

    /// Clipped pre-softmax scores of every downstream layer and head for one
    /// molecule, with SEP positions as boundaries.
    pub fn attention_dumps<T: Scalar, M: ModalitySource + ?Sized>(
        &self,
        store: &ParamStore<T>,
        mol: &M,
        mask: ModalityMask,
    ) -> Result<Vec<(usize, usize, ScoreDump)>> {
        let mut ctx = Ctx::new(store, self.config.attention);
        let enc = self.encode(&mut ctx, &[mol], mask)?;
        let seq = self.build_sequence(&mut ctx, &enc)?;
        let (_, probes) = self.forward(&mut ctx, &seq)?;
        let seps = seq.sep_positions(0);
        let heads = self.config.fusion_heads;
        let mut out = Vec::new();
        for (l, p) in probes.iter().enumerate() {
            let (q, k) = (ctx.tape.value(p.q), ctx.tape.value(p.k));
            for h in 0..heads {
                out.push((l, h, ScoreDump::from_projections(q, k, heads, 0..seq.len(), h, seps.clone())?));
            }
        }
        Ok(out)
    }
}
