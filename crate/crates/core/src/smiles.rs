//! Character-level SMILES vocabulary, tokenizer and transformer encoder.

use crate::error::{bail, Error, Result};
use crate::nn::{sinusoidal_positions, Ctx, TransformerStack};
use crate::tensor::{ParamBuilder, ParamId, Scalar, Var};
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const RESERVED: usize = 2;

/// Bijective map between characters and ids; ids 0 and 1 are PAD and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmilesVocab {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

impl SmilesVocab {
    /// Vocabulary of every distinct character in `corpus`, sorted.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            bail!(Input, "cannot build a vocabulary from an empty corpus");
        }
        let set: BTreeSet<char> = corpus.iter().flat_map(|s| s.as_ref().chars()).collect();
        Ok(Self::from_chars(set.into_iter().collect()))
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let ids = chars.iter().enumerate().map(|(i, &c)| (c, i + RESERVED)).collect();
        Self { chars, ids }
    }

    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.ids.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn char(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED).and_then(|i| self.chars.get(i)).copied()
    }

    pub fn tokenize(&self, s: &str) -> Result<SmilesTokens> {
        if s.is_empty() {
            bail!(Input, "cannot tokenize an empty SMILES string");
        }
        Ok(SmilesTokens {
            ids: s.chars().map(|c| self.id(c)).collect(),
        })
    }

    /// Inverse of [`tokenize`](Self::tokenize); UNK decodes to `?`.
    pub fn decode(&self, tokens: &SmilesTokens) -> String {
        tokens
            .ids
            .iter()
            .map(|&i| self.char(i).unwrap_or('?'))
            .collect()
    }

    /// One character per line; line `i` holds id `i + 2`.
    pub fn to_file_string(&self) -> String {
        self.chars.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut chars = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => bail!(Input, "vocabulary line {} must hold exactly one character", n + 1),
            }
        }
        let set: BTreeSet<char> = chars.iter().copied().collect();
        if set.len() != chars.len() {
            bail!(Input, "vocabulary has duplicate characters");
        }
        Ok(Self::from_chars(chars))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }
}

/// Vocabulary ids of one SMILES string, one per character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmilesTokens {
    pub ids: Vec<usize>,
}

impl SmilesTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Embedding + sinusoidal positions + transformer stack, one output row per
/// character.
#[derive(Debug, Clone)]
pub struct SmilesEncoder {
    pub embedding: ParamId,
    pub vocab_size: usize,
    pub d: usize,
    pub stack: TransformerStack,
}

impl SmilesEncoder {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        vocab_size: usize,
        d: usize,
        layers: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        Ok(Self {
            embedding: pb.weight("embedding", vocab_size, d)?,
            vocab_size,
            d,
            stack: pb.scope("transformer", |pb| TransformerStack::new(pb, d, layers, heads, ff_mult))?,
        })
    }

    /// Encodes several strings packed into one `[Σ n_i × d]` matrix; returns
    /// it with the segment offsets.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, seqs: &[&SmilesTokens]) -> Result<(Var, Vec<usize>)> {
        let mut ids = Vec::new();
        let mut offsets = vec![0];
        let mut positions = Vec::new();
        let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        for s in seqs {
            if s.is_empty() {
                bail!(Input, "empty token sequence");
            }
            if let Some((pos, &i)) = s.ids.iter().enumerate().find(|(_, &i)| i >= self.vocab_size) {
                bail!(
                    Index,
                    "token id {i} at position {pos} is outside the vocabulary of {}",
                    self.vocab_size
                );
            }
            ids.extend_from_slice(&s.ids);
            positions.extend(0..s.len());
            offsets.push(ids.len());
        }
        let table = ctx.param(self.embedding);
        let e = ctx.tape.gather_rows(table, &ids)?;
        let pe_table = sinusoidal_positions::<T>(longest, self.d);
        let pe_rows = pe_table.data().chunks(self.d);
        let rows: Vec<&[T]> = pe_rows.collect();
        let pe_data: Vec<T> = positions.iter().flat_map(|&p| rows[p].iter().copied()).collect();
        let pe = ctx.constant(
            crate::tensor::Tensor::new(vec![ids.len(), self.d], pe_data).map_err(|e| Error::Dimension(e.to_string()))?,
        );
        let z = ctx.tape.add(e, pe)?;
        let (h, _) = self.stack.forward(ctx, z, &offsets)?;
        Ok((h, offsets))
    }

    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, tokens: &SmilesTokens) -> Result<Var> {
        Ok(self.forward(ctx, &[tokens])?.0)
    }
}
