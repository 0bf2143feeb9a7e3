use super::{Scalar, Tensor};
use crate::attention::{self, AttentionKind, AttnCache, ScratchCounter};
use crate::error::{bail, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Relu(Var),
    ShiftedSoftplus(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    ScatterSum { x: Var, index: Vec<usize> },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        offsets: Vec<usize>,
        kind: AttentionKind,
        cache: AttnCache<T>,
    },
    Sum(Var),
    Mean(Var),
    L1Loss { pred: Var, target: Vec<T> },
    MseLoss { pred: Var, target: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert list of operations; gradients are filled in by [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// requires grad and was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Dimension,
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, data: Vec<T>, op: Op<T>) -> Var {
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, op, rg)
    }

    /// `a[.., m×k] · b[k×n]`; leading dimensions of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            bail!(Dimension, "matmul: incompatible shapes {:?} and {:?}", sa, sb);
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(Vec<T>, bool)> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((data, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, rg) = self.zip(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, rg) = self.zip(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, rg) = self.zip(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    /// Adds the vector `row[n]` to every row of `x[.., n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(row).numel() != n {
            bail!(
                Dimension,
                "add_row: row of shape {:?} does not match last dim of {:?}",
                self.shape(row),
                self.shape(x)
            );
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor { shape, data }, Op::AddRow(x, row), rg))
    }

    /// Multiplies `x` by the single-element variable `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            bail!(Dimension, "mul_scalar: scale has shape {:?}", self.shape(s));
        }
        let sv = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|&v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor { shape, data }, Op::MulScalar(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        self.unary(x, data, Op::Scale(x, c))
    }

    /// Multiplies row `i` of `x` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let rows = self.value(x).rows();
        if weights.len() != rows {
            bail!(
                Dimension,
                "scale_rows: {} weights for {} rows",
                weights.len(),
                rows
            );
        }
        let n = self.value(x).cols();
        let data = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .zip(&weights)
            .flat_map(|(c, &w)| c.iter().map(move |&v| v * w))
            .collect();
        Ok(self.unary(x, data, Op::ScaleRows(x, weights)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        self.unary(x, data, Op::Relu(x))
    }

    /// `ln(0.5·eˣ + 0.5)`, the softplus shifted to pass through the origin.
    pub fn shifted_softplus(&mut self, x: Var) -> Var {
        let ln2 = T::lit(std::f64::consts::LN_2);
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v.max(T::zero()) + (-v.abs()).exp().ln_1p() - ln2)
            .collect();
        self.unary(x, data, Op::ShiftedSoftplus(x))
    }

    /// Normalizes each row of `x` over its last dimension, then applies
    /// `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            bail!(
                Dimension,
                "layer_norm: gamma {:?} / beta {:?} do not match last dim of {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            );
        }
        let rows = self.value(x).rows();
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        {
            let xs = self.value(x).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            for row in xs.chunks(d) {
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for j in 0..d {
                    let h = (row[j] - mean) * r;
                    xhat.push(h);
                    out.push(h * g[j] + b[j]);
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last dimension, stabilized by subtracting the row max.
    pub fn softmax_rowwise(&mut self, x: Var) -> Var {
        let n = self.value(x).cols().max(1);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.unary(x, data, Op::Softmax(x))
    }

    /// `out[i] = Σ_{e: index[e] == i} x[e]`.
    pub fn scatter_sum(&mut self, x: Var, index: &[usize], out_rows: usize) -> Result<Var> {
        let rows = self.value(x).rows();
        if index.len() != rows {
            bail!(
                Dimension,
                "scatter_sum: {} indices for {} rows",
                index.len(),
                rows
            );
        }
        if let Some((pos, &i)) = index.iter().enumerate().find(|(_, &i)| i >= out_rows) {
            bail!(
                Index,
                "scatter_sum: index {i} at position {pos} is out of range for {out_rows} rows"
            );
        }
        let d = self.value(x).cols();
        let mut out = vec![T::zero(); out_rows * d];
        for (src, &dst) in self.value(x).data().chunks(d.max(1)).zip(index) {
            for (o, &s) in out[dst * d..(dst + 1) * d].iter_mut().zip(src) {
                *o = *o + s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![out_rows, d],
                data: out,
            },
            Op::ScatterSum {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of a 2D tensor (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let rows = self.value(x).rows();
        if let Some((pos, &i)) = index.iter().enumerate().find(|(_, &i)| i >= rows) {
            bail!(
                Index,
                "gather_rows: index {i} at position {pos} is out of range for {rows} rows"
            );
        }
        let d = self.value(x).cols();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![index.len(), d],
                data: out,
            },
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks 2D tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat_rows: no inputs");
        };
        let d = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != d {
                bail!(
                    Dimension,
                    "concat_rows: shapes {:?} and {:?} differ in width",
                    self.shape(first),
                    self.shape(p)
                );
            }
            rows += self.value(p).rows();
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor {
                shape: vec![rows, d],
                data: out,
            },
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over a packed batch. Rows of
    /// `q`, `k`, `v` are tokens; `offsets` delimits the segments, and no token
    /// attends across a segment boundary.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        offsets: &[usize],
        kind: AttentionKind,
    ) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let d = self.value(q).cols();
        let layout = attention::Layout::new(offsets, self.value(q).rows(), d, heads)?;
        let mut counter = ScratchCounter::default();
        let (out, cache) = attention::kernel_forward(
            kind,
            &layout,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &mut counter,
        )?;
        let shape = self.shape(q).to_vec();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Attention {
                q,
                k,
                v,
                heads,
                offsets: offsets.to_vec(),
                kind,
                cache,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel().max(1) as f64);
        let s = self.value(x).data().iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn check_target(&self, pred: Var, target: &[T], what: &str) -> Result<()> {
        if self.value(pred).numel() != target.len() {
            bail!(
                Dimension,
                "{what}: prediction {:?} vs {} targets",
                self.shape(pred),
                target.len()
            );
        }
        Ok(())
    }

    /// Mean absolute error against constant targets.
    pub fn l1_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        self.check_target(pred, target, "l1_loss")?;
        let n = T::lit(target.len().max(1) as f64);
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t).abs())
            .sum::<T>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(s),
            Op::L1Loss {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared error against constant targets.
    pub fn mse_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        self.check_target(pred, target, "mse_loss")?;
        let n = T::lit(target.len().max(1) as f64);
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(s),
            Op::MseLoss {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Afterwards every reachable node
    /// that requires grad holds `∂loss/∂node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let node = &nodes[v.0];
            if node.requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
                f(slot);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                // dA = dC · Bᵀ
                acc(a, &mut |ga| {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        val(b),
                        1,
                        n as isize,
                        T::one(),
                        ga,
                        k as isize,
                        1,
                    )
                });
                // dB = Aᵀ · dC
                acc(b, &mut |gb| {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        val(a),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::one(),
                        gb,
                        n as isize,
                        1,
                    )
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &d)| *o = *o - d));
            }
            &Op::Mul(a, b) => {
                acc(a, &mut |ga| {
                    for ((o, &d), &y) in ga.iter_mut().zip(g).zip(val(b)) {
                        *o = *o + d * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((o, &d), &x) in gb.iter_mut().zip(g).zip(val(a)) {
                        *o = *o + d * x;
                    }
                });
            }
            &Op::AddRow(x, row) => {
                acc(x, &mut |gx| add_into(gx, g));
                acc(row, &mut |gr| {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            &Op::MulScalar(x, s) => {
                let sv = val(s)[0];
                acc(x, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * sv)
                });
                acc(s, &mut |gs| {
                    let dot: T = g.iter().zip(val(x)).map(|(&d, &v)| d * v).sum();
                    gs[0] = gs[0] + dot;
                });
            }
            &Op::Scale(x, c) => {
                acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * c));
            }
            Op::ScaleRows(x, w) => {
                acc(*x, &mut |gx| {
                    let n = gx.len() / w.len().max(1);
                    for ((go, gi), &wi) in gx.chunks_mut(n.max(1)).zip(g.chunks(n.max(1))).zip(w) {
                        go.iter_mut().zip(gi).for_each(|(o, &d)| *o = *o + d * wi);
                    }
                });
            }
            &Op::Relu(x) => {
                acc(x, &mut |gx| {
                    for ((o, &d), &y) in gx.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *o = *o + d;
                        }
                    }
                });
            }
            &Op::ShiftedSoftplus(x) => {
                acc(x, &mut |gx| {
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(val(x)) {
                        let sig = T::one() / (T::one() + (-v).exp());
                        *o = *o + d * sig;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let gm = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    let dn = T::lit(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (((gxr, gr), hr), &r) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .zip(rstd)
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gm[j];
                            mean_d = mean_d + dxhat[j];
                            mean_dh = mean_dh + dxhat[j] * hr[j];
                        }
                        mean_d = mean_d / dn;
                        mean_dh = mean_dh / dn;
                        for j in 0..d {
                            gxr[j] = gxr[j] + r * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                acc(x, &mut |gx| {
                    let n = nodes[x.0].value.cols().max(1);
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] = gxr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::ScatterSum { x, index } => {
                let x = *x;
                acc(x, &mut |gx| {
                    let d = nodes[x.0].value.cols();
                    for (row, &dst) in gx.chunks_mut(d.max(1)).zip(index) {
                        add_into(row, &g[dst * d..(dst + 1) * d]);
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let x = *x;
                acc(x, &mut |gx| {
                    let d = nodes[x.0].value.cols();
                    for (gr, &src) in g.chunks(d.max(1)).zip(index) {
                        add_into(&mut gx[src * d..(src + 1) * d], gr);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |gp| add_into(gp, &g[start..start + len]));
                    start += len;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                offsets,
                kind,
                cache,
            } => {
                let d = nodes[q.0].value.cols();
                let layout = attention::Layout::new(offsets, nodes[q.0].value.rows(), d, *heads)?;
                let mut counter = ScratchCounter::default();
                let (dq, dk, dv) = attention::kernel_backward(
                    *kind,
                    &layout,
                    val(*q),
                    val(*k),
                    val(*v),
                    out,
                    cache,
                    g,
                    &mut counter,
                )?;
                acc(*q, &mut |gq| add_into(gq, &dq));
                acc(*k, &mut |gk| add_into(gk, &dk));
                acc(*v, &mut |gv| add_into(gv, &dv));
            }
            &Op::Sum(x) => {
                acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o = *o + g[0]));
            }
            &Op::Mean(x) => {
                let n = T::lit(nodes[x.0].value.numel().max(1) as f64);
                acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o = *o + g[0] / n));
            }
            Op::L1Loss { pred, target } => {
                let n = T::lit(target.len().max(1) as f64);
                acc(*pred, &mut |gp| {
                    for ((o, &p), &t) in gp.iter_mut().zip(val(*pred)).zip(target) {
                        let s = if p > t {
                            T::one()
                        } else if p < t {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *o = *o + g[0] * s / n;
                    }
                });
            }
            Op::MseLoss { pred, target } => {
                let n = T::lit(target.len().max(1) as f64);
                let two = T::lit(2.0);
                acc(*pred, &mut |gp| {
                    for ((o, &p), &t) in gp.iter_mut().zip(val(*pred)).zip(target) {
                        *o = *o + g[0] * two * (p - t) / n;
                    }
                });
            }
        }
        Ok(())
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &s)| *o = *o + s);
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
