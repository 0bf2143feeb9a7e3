//! Shared layers built on the tape: linear maps, layer norm, feed-forward
//! blocks and pre-norm transformer stacks.

use crate::attention::{AttentionKind, AttentionProbe, MultiHeadAttention};
use crate::error::Result;
use crate::tensor::{ParamBuilder, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Ctx<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: Option<&'a [bool]>,
    pub attention: AttentionKind,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, attention: AttentionKind) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable: None,
            attention,
        }
    }

    /// Only parameters whose flag is set get gradients.
    pub fn with_trainable(mut self, trainable: &'a [bool]) -> Self {
        self.trainable = Some(trainable);
        self
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let rg = self.trainable.map_or(true, |t| t[id.index()]);
        let v = self.tape.leaf(self.store.get(id).clone(), rg);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Gradients aligned with the store; `None` for parameters that were
    /// not used or are frozen.
    pub fn param_grads(&self) -> Vec<Option<Vec<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).map(<[T]>::to_vec)))
            .collect()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }
}

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let w = pb.weight("w", din, dout)?;
        let b = if bias { Some(pb.zeros("b", &[dout])?) } else { None };
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        let y = ctx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.ones("gamma", &[d])?,
            beta: pb.zeros("beta", &[d])?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// `Linear → ReLU → Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, din: usize, hidden: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            l1: pb.scope("fc1", |pb| Linear::new(pb, din, hidden, true))?,
            l2: pb.scope("fc2", |pb| Linear::new(pb, hidden, dout, true))?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        self.l2.forward(ctx, h)
    }
}

/// Pre-norm block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize, heads: usize, ff_mult: usize) -> Result<Self> {
        Ok(Self {
            ln1: pb.scope("ln1", |pb| LayerNorm::new(pb, d))?,
            attn: pb.scope("attn", |pb| MultiHeadAttention::new(pb, d, heads))?,
            ln2: pb.scope("ln2", |pb| LayerNorm::new(pb, d))?,
            ff: pb.scope("ff", |pb| Mlp::new(pb, d, d * ff_mult, d))?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        offsets: &[usize],
    ) -> Result<(Var, AttentionProbe)> {
        let h = self.ln1.forward(ctx, x)?;
        let (a, probe) = self.attn.forward(ctx, h, offsets)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let f = self.ff.forward(ctx, h)?;
        Ok((ctx.tape.add(x, f)?, probe))
    }
}

/// Stack of pre-norm blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
    pub heads: usize,
}

impl TransformerStack {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        d: usize,
        layers: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| pb.scope(&format!("layer{i}"), |pb| TransformerBlock::new(pb, d, heads, ff_mult)))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            final_ln: pb.scope("final_ln", |pb| LayerNorm::new(pb, d))?,
            heads,
        })
    }

    /// Returns the normalized output and the query/key projections of every
    /// layer.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        mut x: Var,
        offsets: &[usize],
    ) -> Result<(Var, Vec<AttentionProbe>)> {
        let mut probes = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, p) = b.forward(ctx, x, offsets)?;
            x = y;
            probes.push(p);
        }
        Ok((self.final_ln.forward(ctx, x)?, probes))
    }
}

/// Fixed sinusoidal positional encodings `[len × d]`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("positional shape")
}

/// Sum of per-field embedding lookups for categorical feature rows.
#[derive(Debug, Clone)]
pub struct CategoricalEmbedding {
    pub tables: Vec<ParamId>,
    pub sizes: Vec<usize>,
}

impl CategoricalEmbedding {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, sizes: &[usize], d: usize) -> Result<Self> {
        let tables = sizes
            .iter()
            .enumerate()
            .map(|(f, &n)| pb.weight(&format!("field{f}"), n, d))
            .collect::<Result<_>>()?;
        Ok(Self {
            tables,
            sizes: sizes.to_vec(),
        })
    }

    /// `features[i][f]` indexes table `f`; rows sum over fields.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, features: &[Vec<usize>]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (f, (&table, &size)) in self.tables.iter().zip(&self.sizes).enumerate() {
            let index: Vec<usize> = features
                .iter()
                .map(|row| row.get(f).copied().unwrap_or(0))
                .collect();
            if let Some((pos, &i)) = index.iter().enumerate().find(|(_, &i)| i >= size) {
                crate::error::bail!(
                    Index,
                    "categorical feature {f} of row {pos} is {i}, table size is {size}"
                );
            }
            let t = ctx.param(table);
            let e = ctx.tape.gather_rows(t, &index)?;
            acc = Some(match acc {
                Some(a) => ctx.tape.add(a, e)?,
                None => e,
            });
        }
        acc.ok_or_else(|| crate::error::Error::Config("no categorical feature fields".into()))
    }
}
