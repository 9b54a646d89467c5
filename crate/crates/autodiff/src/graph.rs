use std::borrow::Cow;

use crate::attention::{self, AttentionGrads, AttentionSpec};
use crate::error::{AutodiffError, Result};
use crate::rng::CounterRng;
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale { a: Var, factor: T },
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { a: Var, gain: Var, bias: Var, normed: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    MaxPool { a: Var, argmax: Vec<usize> },
    Dropout { a: Var, mask: Vec<T> },
    RepeatRows { a: Var, times: usize },
    MeanPool { a: Var, seq: usize, lens: Vec<usize> },
    Sum(Var),
    WeightedSum { a: Var, weights: Vec<T> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, head_dim: usize, probs: Vec<T> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and backward is a single reverse sweep. Leaves may
/// borrow their values (parameters) for the lifetime `'a`.
#[derive(Debug)]
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Vec<T>>>,
    rng: CounterRng,
    dropout_calls: u64,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// Graph whose dropout masks are drawn from the counter stream `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            rng: CounterRng::new(seed),
            dropout_calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Owned leaf; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
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
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was on
    /// the loss path.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    // ---- forward operations ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let op_name = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(op_name, sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err(op_name, sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        T::gemm(m, k, n, T::one(), av, 0, k, 1, bv, 0, rsb, csb, T::zero(), &mut out, 0, n, 1);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -T::one());
        self.add(a, neg)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(row).numel() != cols {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.derived(value, Op::AddRow { a, row }, &[a, row]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.derived(value, Op::Scale { a, factor }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.derived(value, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.derived(value, Op::Relu(a), &[a])
    }

    /// Row-wise softmax over the last axis, computed with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.derived(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.derived(value, Op::LogSoftmaxRows(a), &[a])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(AutodiffError::Config(format!("layer norm eps must be positive, got {eps}")));
        }
        let src = self.value(a);
        let d = src.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(shape_err("layer_norm", src.shape(), self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let rows = src.rows();
        let mut normed = vec![T::zero(); src.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.numel()];
        for r in 0..rows {
            let x = src.row(r);
            let mean = x.iter().copied().sum::<T>() * inv_d;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (x[j] - mean) * rs;
                normed[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::LayerNorm { a, gain, bias, normed, rstd }, &[a, gain, bias]))
    }

    /// Gathers rows of `table`; backward scatter-adds into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(shape_err("embedding", t.shape(), &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(AutodiffError::Config("embedding lookup with no ids".into()));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::Index { id, size: rows });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.derived(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Column-wise maximum over all rows of a `K×d` matrix.
    pub fn rowwise_max_pool(&mut self, a: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        let v = self.max_pool_groups(a, rows)?;
        let d = self.value(a).cols();
        self.reshape(v, &[d])
    }

    /// Column-wise maximum over consecutive groups of `group` rows:
    /// `[G*group, d] -> [G, d]`. Ties go to the lowest row.
    pub fn max_pool_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let src = self.value(a);
        if group == 0 || src.rows() == 0 {
            return Err(AutodiffError::EmptyPool);
        }
        if !src.rows().is_multiple_of(group) {
            return Err(shape_err("max_pool_groups", src.shape(), &[group]));
        }
        let d = src.cols();
        let groups = src.rows() / group;
        let mut out = vec![T::zero(); groups * d];
        let mut argmax = vec![0usize; groups * d];
        for gi in 0..groups {
            for j in 0..d {
                let mut best = gi * group;
                for r in gi * group + 1..(gi + 1) * group {
                    if src.at(r, j) > src.at(best, j) {
                        best = r;
                    }
                }
                out[gi * d + j] = src.at(best, j);
                argmax[gi * d + j] = best;
            }
        }
        let value = Tensor::new(vec![groups, d], out)?;
        Ok(self.derived(value, Op::MaxPool { a, argmax }, &[a]))
    }

    /// Inverted dropout. Identity (same node) when not training or `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let stream = self.dropout_calls;
        self.dropout_calls += 1;
        let keep = T::of(1.0 / (1.0 - rate));
        let src = self.value(a);
        let mask: Vec<T> = (0..src.numel() as u64)
            .map(|i| if self.rng.uniform(stream, i) < rate { T::zero() } else { keep })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.derived(value, Op::Dropout { a, mask }, &[a]))
    }

    /// `[B, d] -> [B*times, d]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let src = self.value(a);
        if times == 0 {
            return Err(AutodiffError::Config("repeat_rows with times = 0".into()));
        }
        let d = src.cols();
        let mut out = Vec::with_capacity(src.numel() * times);
        for r in 0..src.rows() {
            for _ in 0..times {
                out.extend_from_slice(src.row(r));
            }
        }
        let value = Tensor::new(vec![src.rows() * times, d], out)?;
        Ok(self.derived(value, Op::RepeatRows { a, times }, &[a]))
    }

    /// Mean over the first `lens[b]` rows of each length-`seq` block:
    /// `[B*seq, d] -> [B, d]`.
    pub fn mean_pool(&mut self, a: Var, seq: usize, lens: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let d = src.cols();
        if seq == 0 || src.rows() != lens.len() * seq {
            return Err(shape_err("mean_pool", src.shape(), &[lens.len(), seq]));
        }
        if lens.iter().any(|&l| l == 0 || l > seq) {
            return Err(AutodiffError::Config(format!("mean_pool lengths {lens:?} invalid for {seq}")));
        }
        let mut out = vec![T::zero(); lens.len() * d];
        for (b, &len) in lens.iter().enumerate() {
            let inv = T::one() / T::of(len as f64);
            for r in 0..len {
                for (o, &x) in out[b * d..(b + 1) * d].iter_mut().zip(src.row(b * seq + r)) {
                    *o += x;
                }
            }
            for o in out[b * d..(b + 1) * d].iter_mut() {
                *o *= inv;
            }
        }
        let value = Tensor::new(vec![lens.len(), d], out)?;
        Ok(self.derived(value, Op::MeanPool { a, seq, lens: lens.to_vec() }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.derived(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).numel() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// `Σ a_i * w_i` against a constant weight buffer of the same size.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<T>) -> Result<Var> {
        let src = self.value(a);
        if weights.len() != src.numel() {
            return Err(shape_err("weighted_sum", src.shape(), &[weights.len()]));
        }
        let total = src.data().iter().zip(&weights).map(|(&x, &w)| x * w).sum();
        Ok(self.derived(Tensor::scalar(total), Op::WeightedSum { a, weights }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.derived(value, Op::Reshape(a), &[a]))
    }

    /// Multi-head scaled dot-product attention; see [`AttentionSpec`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let head_dim = spec.validate(self.shape(q), self.shape(k), self.shape(v))?;
        let (out, probs) = attention::forward(
            &spec,
            head_dim,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let value = Tensor::new(self.shape(q).to_vec(), out)?;
        Ok(self.derived(value, Op::Attention { q, k, v, spec, head_dim, probs }, &[q, k, v]))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, populating gradients of every node
    /// on the loss path that requires them. Previous gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape.to_vec()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(upstream) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &upstream);
            self.grads[i] = Some(upstream);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let Graph { nodes, grads, .. } = self;
        let node = &nodes[i];
        let out = node.value.data();
        // Returns the zero-initialized gradient buffer of `v`, or None when
        // `v` does not require gradients.
        fn slot<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<'_, T>], v: Var) -> Option<&'g mut Vec<T>> {
            let n = &nodes[v.0];
            if !n.requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.numel()]))
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                if let Some(da) = slot(grads, nodes, *a) {
                    if *trans_b {
                        // dA += dC·B
                        T::gemm(m, n, k, T::one(), g, 0, n, 1, val(*b), 0, k, 1, T::one(), da, 0, k, 1);
                    } else {
                        // dA += dC·Bᵀ
                        T::gemm(m, n, k, T::one(), g, 0, n, 1, val(*b), 0, 1, n, T::one(), da, 0, k, 1);
                    }
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    if *trans_b {
                        // dB += dCᵀ·A
                        T::gemm(n, m, k, T::one(), g, 0, 1, n, val(*a), 0, k, 1, T::one(), db, 0, k, 1);
                    } else {
                        // dB += Aᵀ·dC
                        T::gemm(k, m, n, T::one(), val(*a), 0, 1, k, g, 0, n, 1, T::one(), db, 0, n, 1);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = slot(grads, nodes, *v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = slot(grads, nodes, *a) {
                    da.iter_mut().zip(g.iter().zip(val(*b))).for_each(|(d, (&g, &y))| *d += g * y);
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    db.iter_mut().zip(g.iter().zip(val(*a))).for_each(|(d, (&g, &x))| *d += g * x);
                }
            }
            Op::AddRow { a, row } => {
                if let Some(da) = slot(grads, nodes, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if let Some(dr) = slot(grads, nodes, *row) {
                    let cols = dr.len();
                    for chunk in g.chunks(cols) {
                        dr.iter_mut().zip(chunk).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = slot(grads, nodes, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *factor);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = slot(grads, nodes, *a) {
                    for ((d, &g), &s) in da.iter_mut().zip(g).zip(out) {
                        *d += g * s * (T::one() - s);
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                if let Some(da) = slot(grads, nodes, *a) {
                    for ((d, &g), &x) in da.iter_mut().zip(g).zip(x) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = node.value.cols();
                if let Some(da) = slot(grads, nodes, *a) {
                    for ((d, g), y) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let cols = node.value.cols();
                if let Some(da) = slot(grads, nodes, *a) {
                    for ((d, g), y) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let total: T = g.iter().copied().sum();
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += g - y.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { a, gain, bias, normed, rstd } => {
                let d = node.value.cols();
                let gv = val(*gain);
                if let Some(dg) = slot(grads, nodes, *gain) {
                    for (g, xh) in g.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            dg[j] += g[j] * xh[j];
                        }
                    }
                }
                if let Some(db) = slot(grads, nodes, *bias) {
                    for g in g.chunks(d) {
                        db.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
                if let Some(da) = slot(grads, nodes, *a) {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut dxh = vec![T::zero(); d];
                    for (r, ((dx, g), xh)) in da.chunks_mut(d).zip(g.chunks(d)).zip(normed.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxh[j] = g[j] * gv[j];
                        }
                        let mean_dxh = dxh.iter().copied().sum::<T>() * inv_d;
                        let mean_dxh_xh = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for j in 0..d {
                            dx[j] += rstd[r] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = slot(grads, nodes, *table) {
                    let d = node.value.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::MaxPool { a, argmax, .. } => {
                let d = node.value.cols();
                if let Some(da) = slot(grads, nodes, *a) {
                    for (idx, &row) in argmax.iter().enumerate() {
                        da[row * d + idx % d] += g[idx];
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(da) = slot(grads, nodes, *a) {
                    for ((d, &g), &m) in da.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            Op::RepeatRows { a, times } => {
                let d = node.value.cols();
                if let Some(da) = slot(grads, nodes, *a) {
                    for (r, dr) in da.chunks_mut(d).enumerate() {
                        for t in 0..*times {
                            let src = &g[(r * times + t) * d..(r * times + t + 1) * d];
                            dr.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                        }
                    }
                }
            }
            Op::MeanPool { a, seq, lens } => {
                let d = node.value.cols();
                if let Some(da) = slot(grads, nodes, *a) {
                    for (b, &len) in lens.iter().enumerate() {
                        let inv = T::one() / T::of(len as f64);
                        for r in 0..len {
                            let row = &mut da[(b * seq + r) * d..(b * seq + r + 1) * d];
                            row.iter_mut().zip(&g[b * d..(b + 1) * d]).for_each(|(d, &g)| *d += g * inv);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = slot(grads, nodes, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum { a, weights } => {
                if let Some(da) = slot(grads, nodes, *a) {
                    da.iter_mut().zip(weights).for_each(|(d, &w)| *d += g[0] * w);
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = slot(grads, nodes, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Attention { q, k, v, spec, head_dim, probs } => {
                // q, k and v may alias (self-attention), so each gets its own
                // scratch buffer that is folded in afterwards.
                let fresh = |x: Var| nodes[x.0].requires_grad.then(|| vec![T::zero(); nodes[x.0].value.numel()]);
                let (mut dq, mut dk, mut dv) = (fresh(*q), fresh(*k), fresh(*v));
                attention::backward(
                    spec,
                    *head_dim,
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    g,
                    AttentionGrads {
                        dq: dq.as_deref_mut(),
                        dk: dk.as_deref_mut(),
                        dv: dv.as_deref_mut(),
                    },
                );
                for (x, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let (Some(buf), Some(dst)) = (buf, slot(grads, nodes, x)) {
                        dst.iter_mut().zip(&buf).for_each(|(d, &b)| *d += b);
                    }
                }
            }
        }
    }
}
