use std::collections::HashMap;

use super::{inverse_axes, numel, permute_data, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngHandle;

/// Additive attention-mask value. Finite so forward values stay finite;
/// `exp` of it underflows to exactly zero in both precisions.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows { x: Var, idx: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Softmax(Var),
    Conv3d { x: Var, w: Var, b: Option<Var>, k: usize },
    AvgPool3d { x: Var, k: usize },
    MaxPool3d { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of tensor operations, recorded in topological order.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.leaves.get(v))
    }

    /// Gradients of every bound trainable parameter, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.leaves.get(v).map(|g| (*id, g)))
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), store: None, bound: HashMap::new() }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self { nodes: Vec::new(), store: Some(store), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value in node {}", self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter as a leaf (once per graph). Frozen
    /// parameters become constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.bound.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: fn(Var, Var) -> Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor { shape: va.shape().to_vec(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::shape("add_broadcast", format!("{sy:?} is not a suffix of {sx:?}")));
        }
        let vy = self.value(y).data();
        let inner = vy.len();
        let vx = self.value(x);
        let data = vx.data().iter().enumerate().map(|(i, &a)| a + vy[i % inner]).collect();
        let t = Tensor { shape: vx.shape().to_vec(), data };
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(t, Op::AddBroadcast(x, y), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let vx = self.value(x);
        let t = Tensor { shape: vx.shape().to_vec(), data: vx.data().iter().map(|&a| a * c).collect() };
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// `x[..., k] · w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape("matmul", format!("{sx:?} · {sw:?}")));
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = numel(&sx) / k;
        let mut out = vec![T::zero(); rows * n];
        T::gemm(rows, k, n, self.value(x).data(), (k, 1), self.value(w).data(), (n, 1), T::zero(), &mut out, (n, 1));
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(x, w), rg))
    }

    /// `x · w + b` with `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    /// Batched `a[B, m, k] · b[B, k, n]`, or `· b[B, n, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("bmm", format!("{sa:?} · {sb:?} (trans_b = {trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..],
                (k, 1),
                &db[i * k * n..],
                b_strides,
                T::zero(),
                &mut out[i * m * n..],
                (n, 1),
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![batch, m, n], data: out }, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(axes)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::shape("transpose", format!("axes ({a}, {b}) for {:?}", self.shape(x))));
        }
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    /// Selects rows per batch: `x[B, N, C]`, `idx` holds `B·K` row indices
    /// in `0..N`; output `[B, K, C]`.
    pub fn gather(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || idx.len() != s[0] * k || idx.iter().any(|&i| i >= s[1]) {
            return Err(Error::shape("gather", format!("x {s:?}, {} indices, k = {k}", idx.len())));
        }
        let (n, c) = (s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for (j, &i) in idx.iter().enumerate() {
            let b = j / k;
            out.extend_from_slice(&xv[(b * n + i) * c..(b * n + i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![s[0], k, c], data: out }, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Row lookup `table[V, C]` at `ids` → `[len, C]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() || ids.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("embedding", format!("table {s:?}, ids {ids:?}")));
        }
        let c = s[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor { shape: vec![ids.len(), c], data: out }, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor { shape, data: out }, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {s:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::lit(eps);
        let inv_c = T::one() / T::lit(c as f64);
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / c;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in xv.chunks_exact(c) {
            let mean = r.iter().copied().sum::<T>() * inv_c;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in r.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor { shape: s, data: out }, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor { shape: vx.shape().to_vec(), data };
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = self.value(x).data().to_vec();
        for r in out.chunks_exact_mut(c) {
            softmax_row(r);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: s, data: out }, Op::Softmax(x), rg))
    }

    /// Non-overlapping 3D convolution: `x[B, C, H, W, D]`,
    /// `w[C', C, k, k, k]`, stride `k`, no padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, k: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = |msg: String| Error::shape("conv3d", format!("input {sx:?}, kernel {sw:?}: {msg}"));
        if sx.len() != 5 || sw.len() != 5 {
            return Err(bad("expected 5-axis input and kernel".into()));
        }
        if k == 0 || sw[2..] != [k, k, k] || sw[1] != sx[1] {
            return Err(bad(format!("kernel must be [C', {}, {k}, {k}, {k}]", sx[1])));
        }
        if sx[2..].iter().any(|&d| d % k != 0) {
            return Err(bad(format!("k = {k} must divide spatial dims")));
        }
        let co = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(bad(format!("bias shape {:?}", self.shape(b))));
            }
        }
        let geo = ConvGeom::new(&sx, k);
        let cols = geo.im2col(self.value(x).data());
        let mut flat = vec![T::zero(); geo.rows() * co];
        T::gemm(geo.rows(), geo.kdim(), co, &cols, (geo.kdim(), 1), self.value(w).data(), (1, geo.kdim()), T::zero(), &mut flat, (co, 1));
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = geo.rows_to_channels(&flat, co, bias.as_deref());
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let shape = vec![geo.b, co, geo.out[0], geo.out[1], geo.out[2]];
        Ok(self.push(Tensor { shape, data: out }, Op::Conv3d { x, w, b, k }, rg))
    }

    fn pool_check(&self, op: &'static str, x: Var, k: usize) -> Result<ConvGeom> {
        let sx = self.shape(x);
        if sx.len() != 5 || k == 0 || sx[2..].iter().any(|&d| d % k != 0) {
            return Err(Error::shape(op, format!("input {sx:?} with k = {k}")));
        }
        Ok(ConvGeom::new(sx, k))
    }

    /// Mean over non-overlapping `k³` blocks of `x[B, C, H, W, D]`.
    pub fn avg_pool3d(&mut self, x: Var, k: usize) -> Result<Var> {
        let geo = self.pool_check("avg_pool3d", x, k)?;
        let inv = T::one() / T::lit((k * k * k) as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); geo.b * geo.c * geo.m()];
        geo.for_each_block(|bc, m, src| {
            let mut acc = T::zero();
            for i in src {
                acc = acc + xv[i];
            }
            out[bc * geo.m() + m] = acc * inv;
        });
        let shape = vec![geo.b, geo.c, geo.out[0], geo.out[1], geo.out[2]];
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::AvgPool3d { x, k }, rg))
    }

    /// Max over non-overlapping `k³` blocks; ties go to the first voxel in
    /// scan order.
    pub fn max_pool3d(&mut self, x: Var, k: usize) -> Result<Var> {
        let geo = self.pool_check("max_pool3d", x, k)?;
        let xv = self.value(x).data();
        let len = geo.b * geo.c * geo.m();
        let mut out = vec![T::zero(); len];
        let mut argmax = vec![0; len];
        geo.for_each_block(|bc, m, src| {
            let mut best: Option<usize> = None;
            for i in src {
                if best.is_none_or(|b| xv[i] > xv[b]) {
                    best = Some(i);
                }
            }
            let best = best.expect("non-empty block");
            out[bc * geo.m() + m] = xv[best];
            argmax[bc * geo.m() + m] = best;
        });
        let shape = vec![geo.b, geo.c, geo.out[0], geo.out[1], geo.out[2]];
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::MaxPool3d { x, argmax }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean squared error against a fixed target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("mse_loss", format!("{:?} vs {:?}", self.shape(pred), target.shape())));
        }
        let pv = self.value(pred).data();
        let n = T::lit(pv.len() as f64);
        let loss = pv.iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.data().to_vec() }, rg))
    }

    /// Mean next-token cross-entropy over rows with a target. `logits` is
    /// `[..., V]`; `targets` holds one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let v = *s.last().ok_or_else(|| Error::shape("cross_entropy", "scalar logits"))?;
        let rows = numel(&s) / v;
        if targets.len() != rows || targets.iter().flatten().any(|&t| t >= v) {
            return Err(Error::shape("cross_entropy", format!("logits {s:?}, {} targets", targets.len())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::shape("cross_entropy", "no supervised positions"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (r, t) in probs.chunks_exact_mut(v).zip(targets) {
            softmax_row(r);
            if let Some(t) = *t {
                loss = loss - r[t].max(T::min_positive_value()).ln();
            }
        }
        loss = loss / T::lit(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, rg))
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngHandle) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(self.shape(x).to_vec(), |_| if rng.bernoulli(p) { T::zero() } else { keep });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(Var(i), Tensor { shape: node.value.shape().to_vec(), data: g });
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        // Participating or not, every differentiable leaf gets a gradient.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaves.entry(Var(i)).or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { leaves, params: self.bound_params() })
    }

    fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut v: Vec<_> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        v.sort_unstable_by_key(|&(p, _)| p);
        v
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.grad_buf(grads, v) {
                        axpy(ga, g, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    axpy(gb, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    let yv = self.value(y).data();
                    if let Some(gx) = self.grad_buf(grads, x) {
                        for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(yv) {
                            *d = *d + gi * yi;
                        }
                    }
                }
            }
            Op::AddBroadcast(x, y) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    axpy(gx, g, T::one());
                }
                if let Some(gy) = self.grad_buf(grads, *y) {
                    let inner = gy.len();
                    for chunk in g.chunks_exact(inner) {
                        axpy(gy, chunk, T::one());
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    axpy(gx, g, *c);
                }
            }
            Op::MatMul(x, w) => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let rows = g.len() / n;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    T::gemm(rows, n, k, g, (n, 1), self.value(*w).data(), (1, n), T::one(), gx, (k, 1));
                }
                if let Some(gw) = self.grad_buf(grads, *w) {
                    T::gemm(k, rows, n, self.value(*x).data(), (1, k), g, (n, 1), T::one(), gw, (n, 1));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.shape()[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.grad_buf(grads, *a) {
                    // dA = dC · B_effᵀ
                    let bt = if *trans_b { (k, 1) } else { (1, n) };
                    for i in 0..batch {
                        T::gemm(m, n, k, &g[i * m * n..], (n, 1), &bv[i * k * n..], bt, T::one(), &mut ga[i * m * k..], (k, 1));
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for i in 0..batch {
                        if *trans_b {
                            // dB (stored [n, k]) = dCᵀ · A
                            T::gemm(n, m, k, &g[i * m * n..], (1, n), &av[i * m * k..], (k, 1), T::one(), &mut gb[i * k * n..], (k, 1));
                        } else {
                            T::gemm(k, m, n, &av[i * m * k..], (1, k), &g[i * m * n..], (n, 1), T::one(), &mut gb[i * k * n..], (n, 1));
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    axpy(gx, g, T::one());
                }
            }
            Op::Permute(x, axes) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let (back, _) = permute_data(g, out.shape(), &inverse_axes(axes));
                    axpy(gx, &back, T::one());
                }
            }
            Op::GatherRows { x, idx } => {
                let s = self.shape(*x);
                let (n, c) = (s[1], s[2]);
                let k = idx.len() / s[0];
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (j, &r) in idx.iter().enumerate() {
                        let b = j / k;
                        axpy(&mut gx[(b * n + r) * c..(b * n + r + 1) * c], &g[j * c..(j + 1) * c], T::one());
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let c = self.shape(*table)[1];
                if let Some(gt) = self.grad_buf(grads, *table) {
                    for (j, &r) in ids.iter().enumerate() {
                        axpy(&mut gt[r * c..(r + 1) * c], &g[j * c..(j + 1) * c], T::one());
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if let Some(gv) = self.grad_buf(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            axpy(&mut gv[o * len..(o + 1) * len], src, T::one());
                        }
                    }
                    offset += len;
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                if let Some(gg) = self.grad_buf(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *beta) {
                    for gr in g.chunks_exact(c) {
                        axpy(gb, gr, T::one());
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let inv_c = T::one() / T::lit(c as f64);
                    for (r, (gr, hr)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * hr[j];
                        }
                        mean_d = mean_d * inv_c;
                        mean_dh = mean_dh * inv_c;
                        let dst = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            dst[j] = dst[j] + rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d = *d + gi * gelu_grad(v);
                    }
                }
            }
            Op::Softmax(x) => {
                let c = *out.shape().last().unwrap();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((dst, gr), yr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.data().chunks_exact(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dst[j] = dst[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Conv3d { x, w, b, k } => {
                let geo = ConvGeom::new(self.shape(*x), *k);
                let co = self.shape(*w)[0];
                let flat = geo.channels_to_rows(g, co);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let mut dcols = vec![T::zero(); geo.rows() * geo.kdim()];
                    T::gemm(geo.rows(), co, geo.kdim(), &flat, (co, 1), self.value(*w).data(), (geo.kdim(), 1), T::zero(), &mut dcols, (geo.kdim(), 1));
                    geo.col2im_add(&dcols, gx);
                }
                if let Some(gw) = self.grad_buf(grads, *w) {
                    let cols = geo.im2col(self.value(*x).data());
                    T::gemm(co, geo.rows(), geo.kdim(), &flat, (1, co), &cols, (geo.kdim(), 1), T::one(), gw, (geo.kdim(), 1));
                }
                if let Some(b) = b {
                    if let Some(gb) = self.grad_buf(grads, *b) {
                        for row in flat.chunks_exact(co) {
                            axpy(gb, row, T::one());
                        }
                    }
                }
            }
            Op::AvgPool3d { x, k } => {
                let geo = ConvGeom::new(self.shape(*x), *k);
                let inv = T::one() / T::lit((k * k * k) as f64);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    geo.for_each_block(|bc, m, src| {
                        let gi = g[bc * geo.m() + m] * inv;
                        for i in src {
                            gx[i] = gx[i] + gi;
                        }
                    });
                }
            }
            Op::MaxPool3d { x, argmax } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        gx[src] = gx[src] + gi;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for d in gx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let s = g[0] / T::lit(gx.len() as f64);
                    for d in gx.iter_mut() {
                        *d = *d + s;
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                if let Some(gp) = self.grad_buf(grads, *pred) {
                    let s = g[0] * T::lit(2.0) / T::lit(pv.len() as f64);
                    for ((d, &p), &t) in gp.iter_mut().zip(pv).zip(target) {
                        *d = *d + s * (p - t);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = *self.shape(*logits).last().unwrap();
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    let s = g[0] / T::lit(*count as f64);
                    for ((dst, pr), t) in gl.chunks_exact_mut(v).zip(probs.chunks_exact(v)).zip(targets) {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dst[j] = dst[j] + s * (pr[j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

fn softmax_row<T: Real>(r: &mut [T]) {
    let max = r.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in r.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in r.iter_mut() {
        *v = *v / sum;
    }
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_S: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu_fwd<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_S) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_S) * (x + T::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_S) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

/// Index bookkeeping for stride-`k` block operations on `[B, C, H, W, D]`.
struct ConvGeom {
    b: usize,
    c: usize,
    k: usize,
    dims: [usize; 3],
    out: [usize; 3],
}

impl ConvGeom {
    fn new(shape: &[usize], k: usize) -> Self {
        let dims = [shape[2], shape[3], shape[4]];
        Self { b: shape[0], c: shape[1], k, dims, out: dims.map(|d| d / k) }
    }

    fn m(&self) -> usize {
        self.out.iter().product()
    }

    fn rows(&self) -> usize {
        self.b * self.m()
    }

    fn kdim(&self) -> usize {
        self.c * self.k * self.k * self.k
    }

    /// Calls `f(b * C + c, block index, source indices)` for every block.
    fn for_each_block(&self, mut f: impl FnMut(usize, usize, &mut dyn Iterator<Item = usize>)) {
        let [h, w, d] = self.dims;
        let k = self.k;
        let vol = h * w * d;
        for bc in 0..self.b * self.c {
            let base = bc * vol;
            let mut m = 0;
            for oh in 0..self.out[0] {
                for ow in 0..self.out[1] {
                    for od in 0..self.out[2] {
                        let mut it = (0..k * k * k).map(|t| {
                            let (kh, kw, kd) = (t / (k * k), (t / k) % k, t % k);
                            base + ((oh * k + kh) * w + ow * k + kw) * d + od * k + kd
                        });
                        f(bc, m, &mut it);
                        m += 1;
                    }
                }
            }
        }
    }

    /// Rows `(b, block)`, columns `(c, kh, kw, kd)` matching the kernel layout.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let kk = self.k * self.k * self.k;
        let mut cols = vec![T::zero(); self.rows() * self.kdim()];
        let (m_total, kdim, c_n) = (self.m(), self.kdim(), self.c);
        self.for_each_block(|bc, m, src| {
            let (b, c) = (bc / c_n, bc % c_n);
            let row = (b * m_total + m) * kdim + c * kk;
            for (t, i) in src.enumerate() {
                cols[row + t] = x[i];
            }
        });
        cols
    }

    fn col2im_add<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let kk = self.k * self.k * self.k;
        let (m_total, kdim, c_n) = (self.m(), self.kdim(), self.c);
        self.for_each_block(|bc, m, src| {
            let (b, c) = (bc / c_n, bc % c_n);
            let row = (b * m_total + m) * kdim + c * kk;
            for (t, i) in src.enumerate() {
                dx[i] = dx[i] + cols[row + t];
            }
        });
    }

    /// `[B·M, C']` → `[B, C', M]`, adding the bias.
    fn rows_to_channels<T: Real>(&self, flat: &[T], co: usize, bias: Option<&[T]>) -> Vec<T> {
        let m = self.m();
        let mut out = vec![T::zero(); self.b * co * m];
        for b in 0..self.b {
            for i in 0..m {
                for o in 0..co {
                    let bias = bias.map_or(T::zero(), |bv| bv[o]);
                    out[(b * co + o) * m + i] = flat[(b * m + i) * co + o] + bias;
                }
            }
        }
        out
    }

    fn channels_to_rows<T: Real>(&self, g: &[T], co: usize) -> Vec<T> {
        let m = self.m();
        let mut flat = vec![T::zero(); self.b * m * co];
        for b in 0..self.b {
            for o in 0..co {
                for i in 0..m {
                    flat[(b * m + i) * co + o] = g[(b * co + o) * m + i];
                }
            }
        }
        flat
    }
}
