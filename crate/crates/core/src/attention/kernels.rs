//! Forward and backward kernels for packed multi-head attention.
//!
//! Both kernels operate on row-major `[L_total × d]` buffers where head `h`
//! owns columns `h·d_h .. (h+1)·d_h`. Segments come from [`Layout`].
//!
//! Scratch accounting (elements, peak over forward + backward):
//!
//! * naive: `H·Σ L_i²` stored probabilities plus one `L_max²` buffer for
//!   the probability gradient.
//! * tiled with block `B`: one `L_max × B` score tile, two running-statistic
//!   vectors of length `L_max`, and the per-row log-sum-exp `H·L_total`
//!   kept for the backward pass. For a single segment of length `L` this is
//!   `L·(B + H + 2) ≤ H·L·B + c·L` with `c = H + 2`.

use super::{Layout, ScratchCounter};
use crate::error::Result;
use crate::tensor::Scalar;

/// Attention implementation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "impl", rename_all = "lowercase")]
pub enum AttentionKind {
    /// Materializes every segment's full score matrix.
    Naive,
    /// Streams key/value blocks with the online-softmax recurrence.
    Tiled { block: usize },
}

impl Default for AttentionKind {
    fn default() -> Self {
        AttentionKind::Tiled { block: 32 }
    }
}

/// What the forward pass keeps for the backward pass.
#[derive(Debug, Clone)]
pub enum AttnCache<T> {
    /// Softmax probabilities, `H` blocks of `L_i × L_i` per segment.
    Probs(Vec<T>),
    /// Per-row log-sum-exp of the scaled scores, laid out `[H × L_total]`.
    Lse(Vec<T>),
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

pub fn kernel_forward<T: Scalar>(
    kind: AttentionKind,
    layout: &Layout,
    q: &[T],
    k: &[T],
    v: &[T],
    counter: &mut ScratchCounter,
) -> Result<(Vec<T>, AttnCache<T>)> {
    match kind {
        AttentionKind::Naive => {
            let (o, p) = naive_forward(layout, q, k, v, counter);
            Ok((o, AttnCache::Probs(p)))
        }
        AttentionKind::Tiled { block } => {
            layout.check_block(block)?;
            let (o, lse) = tiled_forward(layout, block, q, k, v, counter);
            Ok((o, AttnCache::Lse(lse)))
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn kernel_backward<T: Scalar>(
    kind: AttentionKind,
    layout: &Layout,
    q: &[T],
    k: &[T],
    v: &[T],
    out: &[T],
    cache: &AttnCache<T>,
    dout: &[T],
    counter: &mut ScratchCounter,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    match (kind, cache) {
        (AttentionKind::Naive, AttnCache::Probs(p)) => {
            Ok(naive_backward(layout, q, k, v, p, dout, counter))
        }
        (AttentionKind::Tiled { block }, AttnCache::Lse(lse)) => {
            layout.check_block(block)?;
            Ok(tiled_backward(layout, block, q, k, v, out, lse, dout, counter))
        }
        _ => Err(crate::error::Error::Contract(
            "attention cache does not match kernel kind".into(),
        )),
    }
}

fn naive_forward<T: Scalar>(
    layout: &Layout,
    q: &[T],
    k: &[T],
    v: &[T],
    counter: &mut ScratchCounter,
) -> (Vec<T>, Vec<T>) {
    let (d, dh, heads) = (layout.d, layout.head_dim(), layout.heads);
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let total_sq: usize = layout.segments().map(|r| r.len() * r.len()).sum();
    counter.alloc(heads * total_sq);
    let mut probs = vec![T::zero(); heads * total_sq];
    let mut out = vec![T::zero(); layout.total * d];
    let mut base = 0;
    for seg in layout.segments() {
        let (s, len) = (seg.start, seg.len());
        for h in 0..heads {
            let col = h * dh;
            let p = &mut probs[base..base + len * len];
            for i in 0..len {
                let qi = &q[(s + i) * d + col..(s + i) * d + col + dh];
                let row = &mut p[i * len..(i + 1) * len];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = dot(qi, &k[(s + j) * d + col..(s + j) * d + col + dh]) * scale;
                }
                crate::tensor::softmax_in_place(row);
                let oi = &mut out[(s + i) * d + col..(s + i) * d + col + dh];
                for (j, &pij) in row.iter().enumerate() {
                    axpy(pij, &v[(s + j) * d + col..(s + j) * d + col + dh], oi);
                }
            }
            base += len * len;
        }
    }
    (out, probs)
}

fn naive_backward<T: Scalar>(
    layout: &Layout,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    counter: &mut ScratchCounter,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (d, dh, heads) = (layout.d, layout.head_dim(), layout.heads);
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let n = layout.total * d;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let lmax = layout.max_len();
    counter.alloc(lmax * lmax);
    let mut ds = vec![T::zero(); lmax * lmax];
    let mut base = 0;
    for seg in layout.segments() {
        let (s, len) = (seg.start, seg.len());
        for h in 0..heads {
            let col = h * dh;
            let row_of = |i: usize| (s + i) * d + col..(s + i) * d + col + dh;
            let p = &probs[base..base + len * len];
            for i in 0..len {
                let doi = &dout[row_of(i)];
                let prow = &p[i * len..(i + 1) * len];
                let dsrow = &mut ds[i * len..(i + 1) * len];
                let mut rowdot = T::zero();
                for j in 0..len {
                    let dp = dot(doi, &v[row_of(j)]);
                    dsrow[j] = dp;
                    rowdot = rowdot + prow[j] * dp;
                }
                for j in 0..len {
                    dsrow[j] = prow[j] * (dsrow[j] - rowdot);
                    axpy(prow[j], doi, &mut dv[row_of(j)]);
                }
            }
            for i in 0..len {
                for j in 0..len {
                    let g = ds[i * len + j] * scale;
                    axpy(g, &k[row_of(j)], &mut dq[row_of(i)]);
                    axpy(g, &q[row_of(i)], &mut dk[row_of(j)]);
                }
            }
            base += len * len;
        }
    }
    counter.free(lmax * lmax);
    (dq, dk, dv)
}

fn tiled_forward<T: Scalar>(
    layout: &Layout,
    block: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    counter: &mut ScratchCounter,
) -> (Vec<T>, Vec<T>) {
    let (d, dh, heads) = (layout.d, layout.head_dim(), layout.heads);
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let lmax = layout.max_len();
    let bw = block.min(lmax);
    counter.alloc(heads * layout.total);
    let mut lse = vec![T::zero(); heads * layout.total];
    counter.alloc(lmax * bw + 2 * lmax);
    let mut tile = vec![T::zero(); lmax * bw];
    let mut run_max = vec![T::zero(); lmax];
    let mut run_sum = vec![T::zero(); lmax];
    let mut out = vec![T::zero(); layout.total * d];
    for seg in layout.segments() {
        let (s, len) = (seg.start, seg.len());
        for h in 0..heads {
            let col = h * dh;
            run_max[..len].fill(T::neg_infinity());
            run_sum[..len].fill(T::zero());
            for kb in (0..len).step_by(bw) {
                let bsz = bw.min(len - kb);
                for i in 0..len {
                    let qi = &q[(s + i) * d + col..(s + i) * d + col + dh];
                    let t = &mut tile[i * bw..i * bw + bsz];
                    let mut bmax = T::neg_infinity();
                    for (j, tj) in t.iter_mut().enumerate() {
                        let kj = (s + kb + j) * d + col;
                        *tj = dot(qi, &k[kj..kj + dh]) * scale;
                        bmax = bmax.max(*tj);
                    }
                    let m_new = run_max[i].max(bmax);
                    let corr = (run_max[i] - m_new).exp();
                    let oi = &mut out[(s + i) * d + col..(s + i) * d + col + dh];
                    if corr != T::one() {
                        oi.iter_mut().for_each(|o| *o = *o * corr);
                    }
                    let mut bsum = T::zero();
                    for (j, tj) in t.iter_mut().enumerate() {
                        *tj = (*tj - m_new).exp();
                        bsum = bsum + *tj;
                        let vj = (s + kb + j) * d + col;
                        axpy(*tj, &v[vj..vj + dh], oi);
                    }
                    run_sum[i] = run_sum[i] * corr + bsum;
                    run_max[i] = m_new;
                }
            }
            for i in 0..len {
                let inv = T::one() / run_sum[i];
                out[(s + i) * d + col..(s + i) * d + col + dh]
                    .iter_mut()
                    .for_each(|o| *o = *o * inv);
                lse[h * layout.total + s + i] = run_max[i] + run_sum[i].ln();
            }
        }
    }
    counter.free(lmax * bw + 2 * lmax);
    (out, lse)
}

#[allow(clippy::too_many_arguments)]
fn tiled_backward<T: Scalar>(
    layout: &Layout,
    block: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    out: &[T],
    lse: &[T],
    dout: &[T],
    counter: &mut ScratchCounter,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (d, dh, heads) = (layout.d, layout.head_dim(), layout.heads);
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let n = layout.total * d;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let lmax = layout.max_len();
    let bw = block.min(lmax);
    counter.alloc(lmax * bw + lmax);
    let mut tile = vec![T::zero(); lmax * bw];
    let mut delta = vec![T::zero(); lmax];
    for seg in layout.segments() {
        let (s, len) = (seg.start, seg.len());
        for h in 0..heads {
            let col = h * dh;
            let r = |i: usize| (s + i) * d + col..(s + i) * d + col + dh;
            for i in 0..len {
                delta[i] = dot(&dout[r(i)], &out[r(i)]);
            }
            for kb in (0..len).step_by(bw) {
                let bsz = bw.min(len - kb);
                for i in 0..len {
                    let l = lse[h * layout.total + s + i];
                    let qi = &q[r(i)];
                    let doi = &dout[r(i)];
                    let t = &mut tile[i * bw..i * bw + bsz];
                    for (j, tj) in t.iter_mut().enumerate() {
                        let p = (dot(qi, &k[r(kb + j)]) * scale - l).exp();
                        axpy(p, doi, &mut dv[r(kb + j)]);
                        let dp = dot(doi, &v[r(kb + j)]);
                        *tj = p * (dp - delta[i]) * scale;
                    }
                }
                for i in 0..len {
                    for j in 0..bsz {
                        let g = tile[i * bw + j];
                        let (ri, rj) = (r(i), r(kb + j));
                        axpy(g, &k[rj.clone()], &mut dq[ri.clone()]);
                        axpy(g, &q[ri], &mut dk[rj]);
                    }
                }
            }
        }
    }
    counter.free(lmax * bw + lmax);
    (dq, dk, dv)
}
