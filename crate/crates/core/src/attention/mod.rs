//! Packed multi-head attention: a naive kernel that materializes every
//! score matrix and a tiled online-softmax kernel that streams key/value
//! blocks, plus scratch accounting and pre-softmax score dumps.

mod kernels;

pub use kernels::{kernel_backward, kernel_forward, AttentionKind, AttnCache};

use crate::error::{bail, Result};
use crate::fusion::TokenKind;
use crate::nn::{Ctx, Linear};
use crate::tensor::{ParamBuilder, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

/// Validated segment layout of a packed `[L_total × d]` buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub offsets: Vec<usize>,
    pub total: usize,
    pub d: usize,
    pub heads: usize,
}

impl Layout {
    pub fn new(offsets: &[usize], total: usize, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            bail!(Config, "model width {d} is not divisible by {heads} heads");
        }
        validate_offsets(offsets, total)?;
        Ok(Self {
            offsets: offsets.to_vec(),
            total,
            d,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn segments(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }

    pub fn max_len(&self) -> usize {
        self.segments().map(|r| r.len()).max().unwrap_or(0)
    }

    pub(crate) fn check_block(&self, block: usize) -> Result<()> {
        if block == 0 {
            bail!(Config, "attention block size must be at least 1");
        }
        Ok(())
    }
}

fn validate_offsets(offsets: &[usize], total: usize) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != total {
        bail!(
            Contract,
            "segment offsets {:?} must start at 0 and end at {total}",
            offsets
        );
    }
    if let Some(w) = offsets.windows(2).find(|w| w[1] <= w[0]) {
        bail!(Contract, "empty or reversed segment {}..{}", w[0], w[1]);
    }
    Ok(())
}

/// Tokens of several sequences concatenated without padding.
#[derive(Debug, Clone)]
pub struct PackedBatch<T> {
    pub tokens: Tensor<T>,
    /// Start index of every segment followed by the sentinel `L_total`.
    pub seq_offsets: Vec<usize>,
    /// Per-token modality labels; empty when unknown.
    pub labels: Vec<TokenKind>,
}

impl<T: Scalar> PackedBatch<T> {
    pub fn new(tokens: Tensor<T>, seq_offsets: Vec<usize>) -> Result<Self> {
        if tokens.shape().len() != 2 {
            bail!(Dimension, "packed tokens must be 2D, got {:?}", tokens.shape());
        }
        validate_offsets(&seq_offsets, tokens.rows())?;
        Ok(Self {
            tokens,
            seq_offsets,
            labels: Vec::new(),
        })
    }

    /// Concatenates `[L_i × d]` segments.
    pub fn from_segments(segments: &[Tensor<T>]) -> Result<Self> {
        let d = segments.first().map_or(0, Tensor::cols);
        let mut data = Vec::new();
        let mut offsets = vec![0];
        for s in segments {
            if s.cols() != d {
                bail!(Dimension, "segment widths {} and {} differ", d, s.cols());
            }
            data.extend_from_slice(s.data());
            offsets.push(offsets.last().unwrap() + s.rows());
        }
        let total = *offsets.last().unwrap();
        Self::new(Tensor::new(vec![total, d], data)?, offsets)
    }

    pub fn segment(&self, i: usize) -> Range<usize> {
        self.seq_offsets[i]..self.seq_offsets[i + 1]
    }

    pub fn num_segments(&self) -> usize {
        self.seq_offsets.len() - 1
    }

    pub fn max_len(&self) -> usize {
        (0..self.num_segments())
            .map(|i| self.segment(i).len())
            .max()
            .unwrap_or(0)
    }
}

/// Scratch-memory and work counters for one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct AttentionStats {
    pub peak_scratch_elements: usize,
    pub flops_estimate: usize,
}

/// Tracks live and peak scratch elements allocated by a kernel.
#[derive(Debug, Clone, Default)]
pub struct ScratchCounter {
    current: usize,
    peak: usize,
}

impl ScratchCounter {
    pub fn alloc(&mut self, elements: usize) {
        self.current += elements;
        self.peak = self.peak.max(self.current);
    }

    pub fn free(&mut self, elements: usize) {
        self.current = self.current.saturating_sub(elements);
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Runs one forward and one backward pass of the chosen kernel over
/// `packed` (tokens used as queries, keys and values) and reports the peak
/// scratch elements and an estimate of multiply-add work.
pub fn measure_stats<T: Scalar>(
    kind: AttentionKind,
    packed: &PackedBatch<T>,
    heads: usize,
) -> Result<AttentionStats> {
    let layout = Layout::new(&packed.seq_offsets, packed.tokens.rows(), packed.tokens.cols(), heads)?;
    let x = packed.tokens.data();
    let mut counter = ScratchCounter::default();
    let (out, cache) = kernel_forward(kind, &layout, x, x, x, &mut counter)?;
    let dout = vec![T::one(); out.len()];
    kernel_backward(kind, &layout, x, x, x, &out, &cache, &dout, &mut counter)?;
    let dh = layout.head_dim();
    let work: usize = layout.segments().map(|r| r.len() * r.len()).sum();
    Ok(AttentionStats {
        peak_scratch_elements: counter.peak(),
        // forward: QKᵀ and PV; backward: dV, dP, dQ, dK
        flops_estimate: 6 * 2 * heads * work * dh,
    })
}

/// Deterministic random packed batch of `batch` segments of `len` tokens.
pub fn synthetic_batch<T: Scalar>(batch: usize, len: usize, d: usize, seed: u64) -> Result<PackedBatch<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segs: Vec<Tensor<T>> = (0..batch)
        .map(|_| {
            let data = (0..len * d).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
            Tensor::new(vec![len, d], data)
        })
        .collect::<Result<_>>()?;
    PackedBatch::from_segments(&segs)
}

/// Multi-head self-attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

/// Intermediate projections of one attention call, used for score dumps.
#[derive(Debug, Clone, Copy)]
pub struct AttentionProbe {
    pub q: Var,
    pub k: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            bail!(Config, "model width {d} is not divisible by {heads} heads");
        }
        Ok(Self {
            heads,
            wq: pb.scope("q", |pb| Linear::new(pb, d, d, true))?,
            wk: pb.scope("k", |pb| Linear::new(pb, d, d, true))?,
            wv: pb.scope("v", |pb| Linear::new(pb, d, d, true))?,
            wo: pb.scope("o", |pb| Linear::new(pb, d, d, true))?,
        })
    }

    /// Attention of `q_in` over `k_in`/`v_in`, segment by segment.
    pub fn forward_qkv<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        offsets: &[usize],
    ) -> Result<(Var, AttentionProbe)> {
        let q = self.wq.forward(ctx, q_in)?;
        let k = self.wk.forward(ctx, k_in)?;
        let v = self.wv.forward(ctx, v_in)?;
        let kind = ctx.attention;
        let a = ctx.tape.attention(q, k, v, self.heads, offsets, kind)?;
        let o = self.wo.forward(ctx, a)?;
        Ok((o, AttentionProbe { q, k }))
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        offsets: &[usize],
    ) -> Result<(Var, AttentionProbe)> {
        self.forward_qkv(ctx, x, x, x, offsets)
    }
}

/// Pre-softmax scores of one head over one segment, clipped to a range.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDump {
    pub rows: usize,
    pub cols: usize,
    /// Token indices (within the segment) where modality boundaries fall.
    pub boundaries: Vec<usize>,
    pub values: Vec<f64>,
}

pub const DUMP_CLIP: f64 = 10.0;

impl ScoreDump {
    /// Scaled scores `q_i·k_j / √d_h` for `segment` and `head`, clipped to
    /// `[-DUMP_CLIP, DUMP_CLIP]`.
    pub fn from_projections<T: Scalar>(
        q: &Tensor<T>,
        k: &Tensor<T>,
        heads: usize,
        segment: Range<usize>,
        head: usize,
        boundaries: Vec<usize>,
    ) -> Result<Self> {
        let d = q.cols();
        if heads == 0 || d % heads != 0 {
            bail!(Config, "model width {d} is not divisible by {heads} heads");
        }
        if head >= heads {
            bail!(Range, "head {head} out of range for {heads} heads");
        }
        if segment.end > q.rows() || segment.is_empty() {
            bail!(Range, "segment {:?} out of range for {} tokens", segment, q.rows());
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let len = segment.len();
        let mut values = Vec::with_capacity(len * len);
        let col = head * dh;
        for i in segment.clone() {
            let qi = &q.row(i)[col..col + dh];
            for j in segment.clone() {
                let kj = &k.row(j)[col..col + dh];
                let s: f64 = qi.iter().zip(kj).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                values.push((s * scale).clamp(-DUMP_CLIP, DUMP_CLIP));
            }
        }
        Ok(Self {
            rows: len,
            cols: len,
            boundaries,
            values,
        })
    }

    /// Header `# rows cols boundaries=i,j,..` followed by space-separated rows.
    pub fn to_text(&self) -> String {
        let b: Vec<String> = self.boundaries.iter().map(usize::to_string).collect();
        let mut s = format!("# {} {} boundaries={}\n", self.rows, self.cols, b.join(","));
        for row in self.values.chunks(self.cols.max(1)) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let parts: Vec<&str> = header.trim_start_matches('#').split_whitespace().collect();
        let bad = || crate::error::Error::Input(format!("bad dump header `{header}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let rows: usize = parts[0].parse().map_err(|_| bad())?;
        let cols: usize = parts[1].parse().map_err(|_| bad())?;
        let b = parts[2].strip_prefix("boundaries=").ok_or_else(bad)?;
        let boundaries = if b.is_empty() {
            Vec::new()
        } else {
            b.split(',').map(|x| x.parse().map_err(|_| bad())).collect::<Result<_>>()?
        };
        let values: Vec<f64> = lines
            .flat_map(str::split_whitespace)
            .map(|x| x.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if values.len() != rows * cols {
            return Err(bad());
        }
        Ok(Self {
            rows,
            cols,
            boundaries,
            values,
        })
    }
}
