use rand::Rng;

use super::kernels::{self, LayerNormCache, MASKED};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, b_t: bool },
    Add { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    Scale { x: usize, c: f64 },
    Mul { a: usize, b: usize },
    MaskMul { x: usize, mask: Vec<f64> },
    Softmax { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, cache: LayerNormCache },
    Gelu { x: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, ignore: usize, probs: Vec<f64>, count: usize },
    Embedding { table: usize, ids: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    Sum { x: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of operations. Nodes are appended after their inputs, so
/// reverse insertion order is a reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[usize]) -> Var {
        value.requires_grad = inputs.iter().any(|&i| self.nodes[i].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it is trainable iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.requiring_grad())
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a trainable leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.val(a).matrix_dims("matmul")?;
        let (k2, n) = self.val(b).matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.val(a).shape(), self.val(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), false, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a: a.0, b: b.0, b_t: false }, &[a.0, b.0]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.val(a).matrix_dims("matmul_nt")?;
        let (n, k2) = self.val(b).matrix_dims("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.val(a).shape(), self.val(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), true, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a: a.0, b: b.0, b_t: true }, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(bias));
        if tb.numel() != tx.cols() {
            return Err(Error::shape("add_row", tx.shape(), tb.shape()));
        }
        let c = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, v)| v + tb.data()[i % c]).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow { x: x.0, bias: bias.0 }, &[x.0, bias.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.val(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect()).unwrap();
        self.push(t, Op::Scale { x: x.0, c }, &[x.0])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 − rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let tx = self.val(x);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).unwrap();
        self.push(t, Op::MaskMul { x: x.0, mask }, &[x.0])
    }

    /// Row-wise softmax of `x + mask`; `mask` entries must be `0` or
    /// [`MASKED`]. Fully masked rows produce all-zero rows.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[f64]>) -> Result<Var> {
        let tx = self.val(x);
        if let Some(m) = mask {
            if m.len() != tx.numel() {
                return Err(Error::shape("softmax_rows", tx.shape(), &[m.len()]));
            }
            if m.iter().any(|&v| v != 0.0 && v != MASKED) {
                return Err(Error::Config("softmax mask entries must be 0 or -inf".into()));
            }
        }
        let out = kernels::softmax_rows(tx.data(), mask, tx.cols());
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x: x.0 }, &[x.0]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gain), self.val(bias));
        if tg.numel() != tx.cols() || tb.numel() != tx.cols() {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let (out, cache) = kernels::layer_norm(tx.data(), tg.data(), tb.data(), eps);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, cache },
            &[x.0, gain.0, bias.0],
        ))
    }

    /// Tanh-approximated GELU, see [`kernels::gelu`].
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| kernels::gelu(v)).collect())
            .unwrap();
        self.push(t, Op::Gelu { x: x.0 }, &[x.0])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping rows whose target is `ignore_id`. Zero when every
    /// row is ignored.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let tl = self.val(logits);
        let (rows, vocab) = tl.matrix_dims("cross_entropy_logits")?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy_logits", tl.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &target) in targets.iter().enumerate() {
            if target == ignore_id {
                continue;
            }
            if target >= vocab {
                return Err(Error::Index { what: "cross_entropy target", index: target, len: vocab });
            }
            let row = tl.row(r);
            let lse = kernels::log_sum_exp(row);
            total += lse - row[target];
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), ignore: ignore_id, probs, count };
        Ok(self.push(Tensor::scalar(loss), op, &[logits.0]))
    }

    /// Gathers rows of `table` (`vocab×d`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.val(table);
        let (vocab, d) = tt.matrix_dims("embedding")?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", tt.shape(), &[0]));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { what: "embedding id", index: id, len: vocab });
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(t, Op::Embedding { table: table.0, ids: ids.to_vec() }, &[table.0]))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.val(x);
        let (rows, cols) = tx.matrix_dims("slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::Index { what: "slice_cols", index: start + len, len: cols });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(t, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::shape("concat_cols", &[], &[]))?;
        let rows = self.val(*first).matrix_dims("concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (r, c) = self.val(*p).matrix_dims("concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.val(*first).shape(), self.val(*p).shape()));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.val(*p).row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols { parts: ids.clone() }, &ids))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, &[x.0])
    }

    /// Populates `grad` on every trainable leaf reachable from `loss`.
    ///
    /// A second call without [`Graph::zero_grad`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("gradients already computed; call zero_grad first"));
        }
        if !self.val(loss).is_scalar() {
            return Err(Error::Backward("loss must be a scalar"));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(dy);
                continue;
            }
            self.propagate(i, &dy, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                node.value.grad = g;
            }
        }
        Ok(())
    }

    /// Clears leaf gradients so that [`Graph::backward`] may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.backward_done = false;
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].value.requires_grad;
        let val = |j: usize| &nodes[j].value;

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_t } => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(i).cols();
                if needs(a) {
                    let da = slot(grads, a, m * k);
                    // dA = dC · op(B)ᵀ
                    kernels::gemm(m, n, k, dy, false, val(b).data(), !b_t, da, 1.0);
                }
                if needs(b) {
                    let db = slot(grads, b, k * n);
                    if b_t {
                        // B is n×k: dB = dCᵀ · A
                        kernels::gemm(n, m, k, dy, true, val(a).data(), false, db, 1.0);
                    } else {
                        kernels::gemm(k, m, n, val(a).data(), true, dy, false, db, 1.0);
                    }
                }
            }
            &Op::Add { a, b } => {
                for j in [a, b] {
                    if needs(j) {
                        axpy(slot(grads, j, dy.len()), dy, 1.0);
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if needs(x) {
                    axpy(slot(grads, x, dy.len()), dy, 1.0);
                }
                if needs(bias) {
                    let c = val(bias).numel();
                    let db = slot(grads, bias, c);
                    for row in dy.chunks(c) {
                        axpy(db, row, 1.0);
                    }
                }
            }
            &Op::Scale { x, c } => {
                if needs(x) {
                    axpy(slot(grads, x, dy.len()), dy, c);
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    let other = val(b).data();
                    for ((d, g), o) in slot(grads, a, dy.len()).iter_mut().zip(dy).zip(other) {
                        *d += g * o;
                    }
                }
                if needs(b) {
                    let other = val(a).data();
                    for ((d, g), o) in slot(grads, b, dy.len()).iter_mut().zip(dy).zip(other) {
                        *d += g * o;
                    }
                }
            }
            Op::MaskMul { x, mask } => {
                if needs(*x) {
                    for ((d, g), m) in slot(grads, *x, dy.len()).iter_mut().zip(dy).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            &Op::Softmax { x } => {
                if needs(x) {
                    let cols = val(i).cols();
                    kernels::softmax_rows_backward(val(i).data(), dy, slot(grads, x, dy.len()), cols);
                }
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = val(gain).numel();
                let g = val(gain).data();
                if needs(x) {
                    kernels::layer_norm_backward(cache, g, dy, Some(slot(grads, x, dy.len())), None, None);
                }
                if needs(gain) {
                    kernels::layer_norm_backward(cache, g, dy, None, Some(slot(grads, gain, d)), None);
                }
                if needs(bias) {
                    kernels::layer_norm_backward(cache, g, dy, None, None, Some(slot(grads, bias, d)));
                }
            }
            &Op::Gelu { x } => {
                if needs(x) {
                    let xs = val(x).data();
                    for ((d, g), v) in slot(grads, x, dy.len()).iter_mut().zip(dy).zip(xs) {
                        *d += g * kernels::gelu_grad(*v);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                if needs(*logits) && *count > 0 {
                    let vocab = val(*logits).cols();
                    let scale = dy[0] / *count as f64;
                    let dl = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        for (d, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *d += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let d = val(*table).cols();
                    let dt = slot(grads, *table, val(*table).numel());
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * d..(id + 1) * d], &dy[r * d..(r + 1) * d], 1.0);
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                if needs(x) {
                    let cols = val(x).cols();
                    let len = val(i).cols();
                    let dx = slot(grads, x, val(x).numel());
                    for (r, g) in dy.chunks(len).enumerate() {
                        axpy(&mut dx[r * cols + start..r * cols + start + len], g, 1.0);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = val(i).cols();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if needs(p) {
                        let dp = slot(grads, p, val(p).numel());
                        for (r, g) in dy.chunks(total).enumerate() {
                            axpy(&mut dp[r * c..(r + 1) * c], &g[offset..offset + c], 1.0);
                        }
                    }
                    offset += c;
                }
            }
            &Op::Sum { x } => {
                if needs(x) {
                    let dx = slot(grads, x, val(x).numel());
                    for d in dx.iter_mut() {
                        *d += dy[0];
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}
