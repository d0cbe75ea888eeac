use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::batchnorm::{bn_forward, BatchNormState, BnMode};
use super::kernels::{clamped_ln, PROB_FLOOR};
use super::{dim_err, Result, Tensor, TensorError};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// How a per-row loss is reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Plain sum over the selected rows.
    Sum,
    /// Sum divided by the total row count N (not by the number of selected rows).
    Mean,
}

/// Fixed-width neighbour lists, one row of `k` point indices per point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborTable {
    k: usize,
    indices: Vec<u32>,
}

impl NeighborTable {
    pub fn new(k: usize, indices: Vec<u32>) -> Result<Self> {
        if k == 0 || indices.len() % k != 0 {
            return Err(dim_err("NeighborTable", format!("{} indices do not split into rows of {k}", indices.len())));
        }
        Ok(Self { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    AddRow { x: usize, bias: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: T },
    Sum { x: usize },
    Relu { x: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, normalized: Vec<T>, inv_std: Vec<T>, instance: bool },
    NeighborMean { x: usize, table: Arc<NeighborTable> },
    ConcatCols { a: usize, b: usize },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    ClampedLog { x: usize },
    Nll { logp: usize, targets: Vec<T>, weights: Vec<T>, scale: T },
    WeightedEntropy { logp: usize, weights: Vec<T>, scale: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations execute, so every node's inputs precede
/// it. Leaf gradients accumulate across [`Tape::backward`] calls until
/// [`Tape::zero_grad`].
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::Graph(format!("variable {} does not belong to this tape", v.index)));
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        Ok(&self.nodes[self.idx(v)?])
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("foreign variable").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.node(v).ok().and_then(|n| n.grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = super::kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::MatMul { a: ia, b: ib }, rg))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let mut out = super::kernels::matmul(&self.nodes[ix].value, &self.nodes[iw].value)?;
        let c = out.cols();
        let bias = &self.nodes[ib].value;
        if bias.len() != c {
            return Err(dim_err("linear", format!("bias has {} entries, output has {c} columns", bias.len())));
        }
        for row in out.data_mut().chunks_exact_mut(c.max(1)) {
            for (o, &bv) in row.iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(&[ix, iw, ib]);
        Ok(self.push(out, Op::Linear { x: ix, w: iw, b: ib }, rg))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let xv = &self.nodes[ix].value;
        let (_, c) = xv.expect_matrix("add_row")?;
        let bv = &self.nodes[ib].value;
        if bv.len() != c {
            return Err(dim_err("add_row", format!("bias has {} entries, input has {c} columns", bv.len())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(c.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[ix, ib]);
        Ok(self.push(out, Op::AddRow { x: ix, bias: ib }, rg))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(dim_err(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ia, ib)?;
        let av = &self.nodes[ia].value;
        let data = av.data().iter().zip(self.nodes[ib].value.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::Add { a: ia, b: ib }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ia, ib)?;
        let av = &self.nodes[ia].value;
        let data = av.data().iter().zip(self.nodes[ib].value.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::Mul { a: ia, b: ib }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(|v| v * factor);
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::Scale { x: ix, factor }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let total: f64 = self.nodes[ix].value.data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::scalar(T::lit(total)), Op::Sum { x: ix }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::Relu { x: ix }, rg))
    }

    /// Batch normalisation with learnable `gamma`/`beta` taken from the tape
    /// and statistics, epsilon and mode taken from `st`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, st: &BatchNormState<T>) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let fwd = bn_forward(
            &self.nodes[ix].value,
            self.nodes[ig].value.data(),
            self.nodes[ib].value.data(),
            &st.running_mu,
            &st.running_sigma2,
            st.epsilon,
            st.mode,
        )?;
        let out = Tensor::new(self.nodes[ix].value.shape().to_vec(), fwd.output)?;
        let rg = self.rg(&[ix, ig, ib]);
        let op = Op::BatchNorm {
            x: ix,
            gamma: ig,
            beta: ib,
            normalized: fwd.normalized,
            inv_std: fwd.inv_std,
            instance: st.mode == BnMode::InstanceStats,
        };
        Ok(self.push(out, op, rg))
    }

    /// Mean of each row's neighbour rows: `y_i = (1/k) Σ_j x_{nbr(i, j)}`.
    pub fn neighbor_mean(&mut self, x: Var, table: Arc<NeighborTable>) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let (n, c) = xv.expect_matrix("neighbor_mean")?;
        if table.rows() != n {
            return Err(dim_err("neighbor_mean", format!("table has {} rows, input has {n}", table.rows())));
        }
        if table.indices().iter().any(|&j| j as usize >= n) {
            return Err(dim_err("neighbor_mean", "neighbour index out of range"));
        }
        let inv_k = T::lit(1.0 / table.k() as f64);
        let mut out = vec![T::zero(); n * c];
        for (i, dst) in out.chunks_exact_mut(c.max(1)).enumerate().take(n) {
            for &j in table.row(i) {
                for (d, &v) in dst.iter_mut().zip(xv.row(j as usize)) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv_k);
        }
        let out = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::NeighborMean { x: ix, table }, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (na, ca) = self.nodes[ia].value.expect_matrix("concat_cols")?;
        let (nb, cb) = self.nodes[ib].value.expect_matrix("concat_cols")?;
        if na != nb {
            return Err(dim_err("concat_cols", format!("row counts {na} and {nb} differ")));
        }
        let mut data = Vec::with_capacity(na * (ca + cb));
        for r in 0..na {
            data.extend_from_slice(self.nodes[ia].value.row(r));
            data.extend_from_slice(self.nodes[ib].value.row(r));
        }
        let out = Tensor::new(vec![na, ca + cb], data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::ConcatCols { a: ia, b: ib }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = super::kernels::softmax(&self.nodes[ix].value)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::Softmax { x: ix }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = super::kernels::log_softmax(&self.nodes[ix].value)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::LogSoftmax { x: ix }, rg))
    }

    /// `ln(clamp(p, PROB_FLOOR, 1))`; the gradient vanishes outside the clamp range.
    pub fn clamped_log(&mut self, p: Var) -> Result<Var> {
        let ip = self.idx(p)?;
        let out = self.nodes[ip].value.map(clamped_ln);
        let rg = self.rg(&[ip]);
        Ok(self.push(out, Op::ClampedLog { x: ip }, rg))
    }

    fn reduction_scale(reduction: Reduction, rows: usize) -> T {
        match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::lit(1.0 / rows.max(1) as f64),
        }
    }

    /// Negative log-likelihood `−scale · Σ_i w_i Σ_m target_im · logp_im`.
    pub fn nll(&mut self, logp: Var, targets: &Tensor<T>, row_weights: &[T], reduction: Reduction) -> Result<Var> {
        let il = self.idx(logp)?;
        let lv = &self.nodes[il].value;
        let (n, m) = lv.expect_matrix("nll")?;
        if targets.shape() != lv.shape() {
            return Err(dim_err("nll", format!("targets {:?} vs log-probs {:?}", targets.shape(), lv.shape())));
        }
        if row_weights.len() != n {
            return Err(dim_err("nll", format!("{} row weights for {n} rows", row_weights.len())));
        }
        let scale = Self::reduction_scale(reduction, n);
        let mut total = 0.0f64;
        for i in 0..n {
            let w = row_weights[i];
            if w == T::zero() {
                continue;
            }
            let mut row = 0.0f64;
            for j in 0..m {
                let t = targets.data()[i * m + j];
                if t != T::zero() {
                    row += (t * lv.data()[i * m + j]).as_f64();
                }
            }
            total += w.as_f64() * row;
        }
        let value = Tensor::scalar(T::lit(-scale.as_f64() * total));
        let rg = self.rg(&[il]);
        let op = Op::Nll { logp: il, targets: targets.data().to_vec(), weights: row_weights.to_vec(), scale };
        Ok(self.push(value, op, rg))
    }

    /// Cross-entropy of probabilities `p` against `targets` over the rows
    /// selected by a 0/1 `mask`. Probabilities are clamped before the log.
    pub fn masked_weighted_cross_entropy(
        &mut self,
        p: Var,
        targets: &Tensor<T>,
        mask: &[T],
        reduction: Reduction,
    ) -> Result<Var> {
        if mask.iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(TensorError::Contract { op: "masked_weighted_cross_entropy", detail: "mask entries must be 0 or 1".into() });
        }
        if mask.iter().all(|&v| v == T::zero()) {
            return Err(TensorError::EmptySupport("masked_weighted_cross_entropy"));
        }
        let logp = self.clamped_log(p)?;
        self.nll(logp, targets, mask, reduction)
    }

    /// Weighted entropy `−scale · Σ_i w_i Σ_m exp(l_im) · l_im` of log-probabilities.
    pub fn weighted_entropy(&mut self, logp: Var, weights: &[T], reduction: Reduction) -> Result<Var> {
        let il = self.idx(logp)?;
        let lv = &self.nodes[il].value;
        let (n, m) = lv.expect_matrix("weighted_entropy")?;
        if weights.len() != n {
            return Err(dim_err("weighted_entropy", format!("{} weights for {n} rows", weights.len())));
        }
        let scale = Self::reduction_scale(reduction, n);
        let mut total = 0.0f64;
        for (row, &w) in lv.data().chunks_exact(m.max(1)).zip(weights) {
            if w == T::zero() {
                continue;
            }
            let h: f64 = row.iter().map(|&l| (l.exp() * l).as_f64()).sum();
            total += w.as_f64() * h;
        }
        let value = Tensor::scalar(T::lit(-scale.as_f64() * total));
        let rg = self.rg(&[il]);
        Ok(self.push(value, Op::WeightedEntropy { logp: il, weights: weights.to_vec(), scale }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        fn buf<T: Scalar>(grads: &mut [Option<Vec<T>>], j: usize, len: usize) -> &mut Vec<T> {
            grads[j].get_or_insert_with(|| vec![T::zero(); len])
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (r, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                let c = out.cols();
                if wants(*a) {
                    let bv = nodes[*b].value.data();
                    let da = buf(grads, *a, r * k);
                    T::gemm(r, c, k, g, (c as isize, 1), bv, (1, c as isize), da, true);
                }
                if wants(*b) {
                    let av = nodes[*a].value.data();
                    let db = buf(grads, *b, k * c);
                    T::gemm(k, r, c, av, (1, k as isize), g, (c as isize, 1), db, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (r, k) = (nodes[*x].value.rows(), nodes[*x].value.cols());
                let c = out.cols();
                if wants(*x) {
                    let wv = nodes[*w].value.data();
                    let dx = buf(grads, *x, r * k);
                    T::gemm(r, c, k, g, (c as isize, 1), wv, (1, c as isize), dx, true);
                }
                if wants(*w) {
                    let xv = nodes[*x].value.data();
                    let dw = buf(grads, *w, k * c);
                    T::gemm(k, r, c, xv, (1, k as isize), g, (c as isize, 1), dw, true);
                }
                if wants(*b) {
                    let db = buf(grads, *b, c);
                    for row in g.chunks_exact(c.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                let c = out.cols();
                if wants(*x) {
                    buf(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if wants(*bias) {
                    let db = buf(grads, *bias, c);
                    for row in g.chunks_exact(c.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Add { a, b } => {
                for j in [*a, *b] {
                    if wants(j) {
                        buf(grads, j, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (j, other) in [(*a, *b), (*b, *a)] {
                    if wants(j) {
                        let ov = nodes[other].value.data();
                        buf(grads, j, g.len())
                            .iter_mut()
                            .zip(g.iter().zip(ov))
                            .for_each(|(d, (&gv, &o))| *d += gv * o);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if wants(*x) {
                    buf(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v * *factor);
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let len = nodes[*x].value.len();
                    buf(grads, *x, len).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xv = nodes[*x].value.data();
                    buf(grads, *x, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(xv))
                        .for_each(|(d, (&gv, &v))| {
                            if v > T::zero() {
                                *d += gv;
                            }
                        });
                }
            }
            Op::BatchNorm { x, gamma, beta, normalized, inv_std, instance } => {
                let (n, c) = (out.rows(), out.cols());
                let gam = nodes[*gamma].value.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gh = vec![T::zero(); c];
                for (gr, hr) in g.chunks_exact(c).zip(normalized.chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_gh[j] += gr[j] * hr[j];
                    }
                }
                if wants(*gamma) {
                    buf(grads, *gamma, c).iter_mut().zip(&sum_gh).for_each(|(d, &v)| *d += v);
                }
                if wants(*beta) {
                    buf(grads, *beta, c).iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                }
                if wants(*x) {
                    let dx = buf(grads, *x, n * c);
                    if *instance {
                        let nn = T::lit(n as f64);
                        let inv_n = nn.recip();
                        for ((dr, gr), hr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(normalized.chunks_exact(c)) {
                            for j in 0..c {
                                let coef = gam[j] * inv_std[j] * inv_n;
                                dr[j] += coef * (nn * gr[j] - sum_g[j] - hr[j] * sum_gh[j]);
                            }
                        }
                    } else {
                        for (dr, gr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for j in 0..c {
                                dr[j] += gr[j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::NeighborMean { x, table } => {
                if wants(*x) {
                    let c = out.cols();
                    let inv_k = T::lit(1.0 / table.k() as f64);
                    let dx = buf(grads, *x, nodes[*x].value.len());
                    for (i, gr) in g.chunks_exact(c.max(1)).enumerate() {
                        for &j in table.row(i) {
                            let dst = &mut dx[j as usize * c..(j as usize + 1) * c];
                            dst.iter_mut().zip(gr).for_each(|(d, &v)| *d += v * inv_k);
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let ca = nodes[*a].value.cols();
                let cb = nodes[*b].value.cols();
                let n = out.rows();
                if wants(*a) {
                    let da = buf(grads, *a, n * ca);
                    for r in 0..n {
                        let src = &g[r * (ca + cb)..r * (ca + cb) + ca];
                        da[r * ca..(r + 1) * ca].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
                if wants(*b) {
                    let db = buf(grads, *b, n * cb);
                    for r in 0..n {
                        let src = &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                        db[r * cb..(r + 1) * cb].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Softmax { x } => {
                if wants(*x) {
                    let m = out.cols();
                    let dx = buf(grads, *x, g.len());
                    for ((dr, gr), pr) in dx.chunks_exact_mut(m).zip(g.chunks_exact(m)).zip(out.data().chunks_exact(m)) {
                        let dot: T = gr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        for j in 0..m {
                            dr[j] += pr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                if wants(*x) {
                    let m = out.cols();
                    let dx = buf(grads, *x, g.len());
                    for ((dr, gr), lr) in dx.chunks_exact_mut(m).zip(g.chunks_exact(m)).zip(out.data().chunks_exact(m)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..m {
                            dr[j] += gr[j] - lr[j].exp() * total;
                        }
                    }
                }
            }
            Op::ClampedLog { x } => {
                if wants(*x) {
                    let lo = T::lit(PROB_FLOOR);
                    let pv = nodes[*x].value.data();
                    buf(grads, *x, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(pv))
                        .for_each(|(d, (&gv, &p))| {
                            if p >= lo && p <= T::one() {
                                *d += gv / p;
                            }
                        });
                }
            }
            Op::Nll { logp, targets, weights, scale } => {
                if wants(*logp) {
                    let m = out_cols(nodes, *logp);
                    let coef = -g[0] * *scale;
                    let dl = buf(grads, *logp, targets.len());
                    for (i, &w) in weights.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        for j in 0..m {
                            dl[i * m + j] += coef * w * targets[i * m + j];
                        }
                    }
                }
            }
            Op::WeightedEntropy { logp, weights, scale } => {
                if wants(*logp) {
                    let lv = &nodes[*logp].value;
                    let m = lv.cols();
                    let coef = -g[0] * *scale;
                    let dl = buf(grads, *logp, lv.len());
                    for (i, &w) in weights.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        for j in 0..m {
                            let l = lv.data()[i * m + j];
                            dl[i * m + j] += coef * w * l.exp() * (l + T::one());
                        }
                    }
                }
            }
        }
    }
}

fn out_cols<T: Scalar>(nodes: &[Node<T>], j: usize) -> usize {
    nodes[j].value.cols()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[4], 3.0), true);
        let y = tape.scale(x, 0.0).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn foreign_and_non_scalar_losses_rejected() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.leaf(Tensor::full(&[2], 1.0), true);
        let s = a.sum(x).unwrap();
        assert!(matches!(b.backward(s), Err(TensorError::Graph(_))));
        assert!(matches!(a.backward(x), Err(TensorError::Graph(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap(), true);
        let t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let ce = tape.masked_weighted_cross_entropy(p, &t, &[1.0], Reduction::Sum).unwrap();
        assert!((tape.value(ce).item().unwrap() - 2f64.ln()).abs() < 1e-12);

        let exact = tape.constant(t.clone());
        let ce = tape.masked_weighted_cross_entropy(exact, &t, &[1.0], Reduction::Sum).unwrap();
        assert_eq!(tape.value(ce).item().unwrap(), 0.0);

        assert!(matches!(
            tape.masked_weighted_cross_entropy(p, &t, &[0.0], Reduction::Sum),
            Err(TensorError::EmptySupport(_))
        ));
        assert!(matches!(
            tape.masked_weighted_cross_entropy(p, &t, &[0.5], Reduction::Sum),
            Err(TensorError::Contract { .. })
        ));
    }

    #[test]
    fn mean_reduction_divides_by_all_rows() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap());
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let ce = tape.masked_weighted_cross_entropy(p, &t, &[1.0, 0.0], Reduction::Mean).unwrap();
        assert!((tape.value(ce).item().unwrap() - 2f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn neighbor_table_validation() {
        assert!(NeighborTable::new(0, vec![]).is_err());
        assert!(NeighborTable::new(2, vec![0, 1, 2]).is_err());
        let t = Arc::new(NeighborTable::new(1, vec![5, 0]).unwrap());
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 1]));
        assert!(tape.neighbor_mean(x, t).is_err());
    }
}
