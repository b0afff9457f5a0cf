//! Reverse-mode differentiation over a recorded graph of matrix operations.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are either
//! parameters (gradients wanted) or constants; every other node remembers the
//! operation that produced it. [`Tape::backward`] walks the nodes in reverse
//! creation order, which is a valid topological order by construction.

use crate::numerics::{gemm, gemm_slices, masked_softmax_row, selu, selu_derivative, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Selu(Var),
    MaskedSoftmax(Var),
    MaskRows(Var, Vec<bool>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    AppendBroadcast(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<Option<usize>>),
    SliceRows(Var, usize),
    GroupMean {
        x: Var,
        group: usize,
        mask: Vec<bool>,
    },
    Dot(Var, Matrix),
    /// Scalar function of `Var` whose gradient was computed alongside its value.
    ScalarFn(Var, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulBt(a, b), ng)
    }

    /// `a · bᵀ` assembled block by block: `blocks` partitions the rows of
    /// both operands and block `(m, n)` of the result is `a_m · b_nᵀ`.
    /// Each query block is computed against all key blocks at once, filling
    /// one contiguous row strip of the result.
    pub fn block_matmul_bt(&mut self, a: Var, b: Var, blocks: &[usize]) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "block_matmul_bt inner dimension");
        assert_eq!(blocks.iter().sum::<usize>(), av.rows(), "row blocks of a");
        assert_eq!(blocks.iter().sum::<usize>(), bv.rows(), "row blocks of b");
        let total = av.rows();
        let d = av.cols();
        let mut value = Matrix::zeros(total, total);
        let mut start = 0;
        for &n in blocks.iter().filter(|&&n| n > 0) {
            let strip = &av.as_slice()[start * d..(start + n) * d];
            let out = &mut value.as_mut_slice()[start * total..(start + n) * total];
            gemm_slices(n, d, total, strip, (d, 1), bv.as_slice(), (1, d), out);
            start += n;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulBt(a, b), ng)
    }

    /// Adds the `1 × n` row `bias` to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut value = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, value.cols()), "bias shape");
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(b.as_slice()) {
                *v += bb;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddRowBias(x, bias), ng)
    }

    /// `x · W + b`
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul(x, weight);
        self.add_row_bias(y, bias)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut value = self.value(x).clone();
        value.scale_in_place(s);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    pub fn selu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.as_slice().iter().map(|&v| selu(v)).collect();
        let value = Matrix::from_vec(src.rows(), src.cols(), data).expect("shape");
        let ng = self.needs(x);
        self.push(value, Op::Selu(x), ng)
    }

    /// Row-wise softmax over the key columns where `key_mask` is true;
    /// masked columns come out exactly zero. At least one key must be valid.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool]) -> Var {
        let src = self.value(x);
        assert_eq!(src.cols(), key_mask.len(), "key mask length");
        assert!(key_mask.iter().any(|&b| b), "all keys masked");
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            masked_softmax_row(src.row(r), key_mask, value.row_mut(r));
        }
        let ng = self.needs(x);
        self.push(value, Op::MaskedSoftmax(x), ng)
    }

    /// Zeroes the rows where `mask` is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Var {
        let mut value = self.value(x).clone();
        assert_eq!(value.rows(), mask.len(), "row mask length");
        for (r, &keep) in mask.iter().enumerate() {
            if !keep {
                value.row_mut(r).fill(0.0);
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::MaskRows(x, mask.to_vec()), ng)
    }

    /// Layer normalization of every row with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        assert_eq!(g.len(), cols, "layer norm gain");
        assert_eq!(b.len(), cols, "layer norm bias");
        let mut normalized = Matrix::zeros(rows, cols);
        let mut value = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            let nr = normalized.row_mut(r);
            for (n, v) in nr.iter_mut().zip(row) {
                *n = (v - mean) * is;
            }
            let nr = normalized.row(r).to_vec();
            for (((o, n), gg), bb) in value.row_mut(r).iter_mut().zip(&nr).zip(g).zip(b) {
                *o = n * gg + bb;
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            ng,
        )
    }

    /// Concatenates the `1 × k` row `e` to the right of every row of `x`.
    pub fn append_broadcast(&mut self, x: Var, e: Var) -> Var {
        let src = self.value(x);
        let ev = self.value(e);
        assert_eq!(ev.rows(), 1, "appended embedding must be a row");
        let cols = src.cols() + ev.cols();
        let mut value = Matrix::zeros(src.rows(), cols);
        for r in 0..src.rows() {
            let row = value.row_mut(r);
            row[..src.cols()].copy_from_slice(src.row(r));
            row[src.cols()..].copy_from_slice(ev.as_slice());
        }
        let ng = self.needs(x) || self.needs(e);
        self.push(value, Op::AppendBroadcast(x, e), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats).expect("concat_rows column mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Output row `i` is row `indices[i]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, indices: &[Option<usize>]) -> Var {
        let src = self.value(x);
        let mut value = Matrix::zeros(indices.len(), src.cols());
        for (dst, idx) in indices.iter().enumerate() {
            if let Some(s) = idx {
                value.row_mut(dst).copy_from_slice(src.row(*s));
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::GatherRows(x, indices.to_vec()), ng)
    }

    /// Rows `start..start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        assert!(start + len <= src.rows(), "slice_rows out of range");
        let cols = src.cols();
        let data = src.as_slice()[start * cols..(start + len) * cols].to_vec();
        let value = Matrix::from_vec(len, cols, data).expect("shape");
        let ng = self.needs(x);
        self.push(value, Op::SliceRows(x, start), ng)
    }

    /// Splits the rows of `x` into consecutive groups of `group` rows and
    /// averages the rows whose `mask` entry is set within each group.
    pub fn group_mean(&mut self, x: Var, group: usize, mask: &[bool]) -> Var {
        let src = self.value(x);
        assert!(group > 0 && src.rows() % group == 0, "group size");
        assert_eq!(mask.len(), src.rows(), "group mask length");
        let n_groups = src.rows() / group;
        let mut value = Matrix::zeros(n_groups, src.cols());
        for g in 0..n_groups {
            let rows = g * group..(g + 1) * group;
            let count = mask[rows.clone()].iter().filter(|&&b| b).count();
            assert!(count > 0, "group without valid rows");
            let out = value.row_mut(g);
            for r in rows.filter(|&r| mask[r]) {
                for (o, v) in out.iter_mut().zip(src.row(r)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= count as f64;
            }
        }
        let ng = self.needs(x);
        self.push(
            value,
            Op::GroupMean {
                x,
                group,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// `Σ x ⊙ weights`, a `1 × 1` result.
    pub fn dot(&mut self, x: Var, weights: Matrix) -> Var {
        let src = self.value(x);
        assert_eq!(src.shape(), weights.shape(), "dot shape");
        let s: f64 = src.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum();
        let ng = self.needs(x);
        self.push(Matrix::filled(1, 1, s), Op::Dot(x, weights), ng)
    }

    /// Records a scalar `value = f(x)` whose gradient `df/dx` the caller has
    /// already computed.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Matrix) -> Var {
        assert_eq!(self.value(x).shape(), grad.shape(), "scalar_fn gradient shape");
        let ng = self.needs(x);
        self.push(Matrix::filled(1, 1, value), Op::ScalarFn(x, grad), ng)
    }

    /// Gradients of the `1 × 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            // leaf gradients stay in place; intermediate ones are consumed
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let (ga, beta) = slot(&mut grads, *a, self.value(*a));
                        gemm(1.0, &g, false, self.value(*b), true, beta, ga);
                    }
                    if self.needs(*b) {
                        let (gb, beta) = slot(&mut grads, *b, self.value(*b));
                        gemm(1.0, self.value(*a), true, &g, false, beta, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    // c = a bᵀ: da = g b, db = gᵀ a
                    if self.needs(*a) {
                        let (ga, beta) = slot(&mut grads, *a, self.value(*a));
                        gemm(1.0, &g, false, self.value(*b), false, beta, ga);
                    }
                    if self.needs(*b) {
                        let (gb, beta) = slot(&mut grads, *b, self.value(*b));
                        gemm(1.0, &g, true, self.value(*a), false, beta, gb);
                    }
                }
                Op::AddRowBias(x, bias) => {
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, column_sums(&g));
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    gx.scale_in_place(*s);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Selu(x) => {
                    let mut gx = g;
                    for (gv, xv) in gx.as_mut_slice().iter_mut().zip(self.value(*x).as_slice()) {
                        *gv *= selu_derivative(*xv);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaskedSoftmax(x) => {
                    let p = &node.value;
                    let mut gx = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, pv), gv) in gx.row_mut(r).iter_mut().zip(pr).zip(gr) {
                            *o = pv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaskRows(x, mask) => {
                    let mut gx = g;
                    for (r, &keep) in mask.iter().enumerate() {
                        if !keep {
                            gx.row_mut(r).fill(0.0);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gv = self.value(*gain).as_slice();
                    let (rows, cols) = normalized.shape();
                    if self.needs(*gain) {
                        let mut gg = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            for ((o, a), b) in gg.as_mut_slice().iter_mut().zip(g.row(r)).zip(normalized.row(r)) {
                                *o += a * b;
                            }
                        }
                        accumulate(&mut grads, *gain, gg);
                    }
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, column_sums(&g));
                    }
                    if self.needs(*x) {
                        let n = cols as f64;
                        let mut gx = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            let xhat = normalized.row(r);
                            let dxhat: Vec<f64> = g.row(r).iter().zip(gv).map(|(a, b)| a * b).collect();
                            let sum: f64 = dxhat.iter().sum();
                            let dot: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
                            for ((o, d), xh) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat) {
                                *o = inv_std[r] / n * (n * d - sum - xh * dot);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::AppendBroadcast(x, e) => {
                    let xc = self.value(*x).cols();
                    let ec = self.value(*e).cols();
                    if self.needs(*x) {
                        let mut gx = Matrix::zeros(g.rows(), xc);
                        for r in 0..g.rows() {
                            gx.row_mut(r).copy_from_slice(&g.row(r)[..xc]);
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.needs(*e) {
                        let mut ge = Matrix::zeros(1, ec);
                        for r in 0..g.rows() {
                            for (o, v) in ge.as_mut_slice().iter_mut().zip(&g.row(r)[xc..]) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *e, ge);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.needs(p) {
                            let idx: Vec<usize> = (off..off + rows).collect();
                            accumulate(&mut grads, p, g.select_rows(&idx));
                        }
                        off += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        if self.needs(p) {
                            let mut gp = Matrix::zeros(g.rows(), cols);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        off += cols;
                    }
                }
                Op::GatherRows(x, indices) => {
                    let gx = zeroed_slot(&mut grads, *x, self.value(*x));
                    for (dst, idx) in indices.iter().enumerate() {
                        if let Some(s) = idx {
                            for (o, v) in gx.row_mut(*s).iter_mut().zip(g.row(dst)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::SliceRows(x, start) => {
                    let gx = zeroed_slot(&mut grads, *x, self.value(*x));
                    let cols = g.cols();
                    let dst = &mut gx.as_mut_slice()[start * cols..(start + g.rows()) * cols];
                    for (o, v) in dst.iter_mut().zip(g.as_slice()) {
                        *o += v;
                    }
                }
                Op::GroupMean { x, group, mask } => {
                    let src = self.value(*x);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for gi in 0..g.rows() {
                        let rows = gi * group..(gi + 1) * group;
                        let count = mask[rows.clone()].iter().filter(|&&b| b).count() as f64;
                        for r in rows.filter(|&r| mask[r]) {
                            for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(gi)) {
                                *o = v / count;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dot(x, w) => {
                    let mut gx = w.clone();
                    gx.scale_in_place(g.get(0, 0));
                    accumulate(&mut grads, *x, gx);
                }
                Op::ScalarFn(x, local) => {
                    let mut gx = local.clone();
                    gx.scale_in_place(g.get(0, 0));
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Gradients { grads }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// The gradient buffer of `v` and the `beta` to write into it with: 1 when
/// it already holds a partial sum, 0 for a fresh buffer shaped like `like`.
fn slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> (&'a mut Matrix, f64) {
    let beta = if grads[v.0].is_some() { 1.0 } else { 0.0 };
    let m = grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()));
    (m, beta)
}

fn zeroed_slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
