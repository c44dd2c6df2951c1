//! Tape-based reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value is a 2-D array (`rows x cols`); scalars are `1 x 1`. Nodes are
//! appended in evaluation order, so the tape index order is a valid
//! topological order and backward is a single reverse sweep.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::params::{ParamId, ParamStore};
use crate::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed rotary tables: one row per sequence row, one column per
/// rotation pair within a head.
#[derive(Debug, Clone)]
pub struct RopeTable<A> {
    pub cos: Array2<A>,
    pub sin: Array2<A>,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl<A: Scalar> RopeTable<A> {
    pub fn new(positions: &[usize], n_heads: usize, head_dim: usize, base: f64) -> Self {
        assert!(head_dim.is_multiple_of(2), "rotary head_dim must be even");
        let half = head_dim / 2;
        let mut cos = Array2::zeros((positions.len(), half));
        let mut sin = Array2::zeros((positions.len(), half));
        for (r, &p) in positions.iter().enumerate() {
            for j in 0..half {
                let freq = base.powf(-(2.0 * j as f64) / head_dim as f64);
                let angle = p as f64 * freq;
                cos[[r, j]] = A::lit(angle.cos());
                sin[[r, j]] = A::lit(angle.sin());
            }
        }
        Self { cos, sin, n_heads, head_dim }
    }
}

enum Value<A> {
    Owned(Array2<A>),
    Param(ParamId),
}

enum Op<A> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, A),
    MaskFill(Var, Rc<Array2<bool>>),
    Silu(Var),
    RmsNorm(Var, Vec<A>),
    Softmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Rope(Var, Rc<RopeTable<A>>),
    Unfold(Var, usize),
    CrossEntropy(Var, Vec<usize>, Vec<A>, Array2<A>),
    WeightedSse(Var, Array2<A>, Vec<A>),
    StraightThrough(Var),
    SumAll(Var),
}

struct Node<A> {
    value: Value<A>,
    op: Op<A>,
    needs_grad: bool,
}

/// A single forward evaluation recorded for differentiation.
pub struct Graph<'p, A: Scalar> {
    params: Option<&'p ParamStore<A>>,
    nodes: Vec<Node<A>>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p, A: Scalar> Graph<'p, A> {
    pub fn new(params: &'p ParamStore<A>) -> Self {
        Self { params: Some(params), nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    /// A graph with no parameter store; only constants and ops.
    pub fn detached() -> Self {
        Self { params: None, nodes: Vec::new(), param_nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, A> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a.view(),
            Value::Param(id) => self.params.expect("param store").get(*id).view(),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> A {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<A>, op: Op<A>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Array2<A>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not backed by a parameter (used by gradient checks).
    pub fn input(&mut self, value: Array2<A>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) - &self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) * &self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Broadcast-add a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let out = &self.value(a) + &self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Broadcast-multiply every row of `a` by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a single row");
        let out = &self.value(a) * &self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: A) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    /// Row-wise RMS normalization without gain.
    pub fn rms_norm(&mut self, a: Var, eps: A) -> Var {
        let x = self.value(a);
        let cols = A::from_usize_lossy(x.ncols());
        let mut out = x.to_owned();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let ms = row.iter().map(|&v| v * v).sum::<A>() / cols;
            let r = A::one() / (ms + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            inv.push(r);
        }
        let ng = self.ng(a);
        self.push(out, Op::RmsNorm(a, inv), ng)
    }

    /// Row-wise softmax. Entries equal to `-inf` get probability zero; a row
    /// that is entirely `-inf` yields all zeros.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        for mut row in out.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Additive masking: disallowed positions are set to `-inf` (no gradient flows to them).
    pub fn masked_fill_neg_inf(&mut self, a: Var, allowed: Rc<Array2<bool>>) -> Var {
        let mut out = self.value(a).to_owned();
        assert_eq!(out.dim(), allowed.dim(), "mask shape mismatch");
        Zip::from(&mut out).and(&*allowed).for_each(|v, &ok| {
            if !ok {
                *v = A::neg_infinity();
            }
        });
        let ng = self.ng(a);
        self.push(out, Op::MaskFill(a, allowed), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        let ng = self.ng(table);
        self.push(out, Op::Gather(table, ids.to_vec()), ng)
    }

    /// Rotary position embedding applied per head to interleaved pairs.
    pub fn rope(&mut self, a: Var, table: Rc<RopeTable<A>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), table.cos.nrows(), "rope table rows");
        assert_eq!(x.ncols(), table.n_heads * table.head_dim, "rope width");
        let out = rotate(x, &table, false);
        let ng = self.ng(a);
        self.push(out, Op::Rope(a, table), ng)
    }

    /// Same-padded 1-D im2col along rows: output row `t` holds input rows
    /// `t - k/2 ..= t + k/2` side by side (zeros outside the sequence).
    pub fn unfold(&mut self, a: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let half = kernel / 2;
        let mut out = Array2::zeros((rows, kernel * cols));
        for t in 0..rows {
            for j in 0..kernel {
                let src = t as isize + j as isize - half as isize;
                if src >= 0 && (src as usize) < rows {
                    out.slice_mut(s![t, j * cols..(j + 1) * cols]).assign(&x.row(src as usize));
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Unfold(a, kernel), ng)
    }

    /// `sum_r weights[r] * CE(logits[r], targets[r])`, as a `1 x 1` node.
    /// Rows with zero weight are skipped entirely.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[A]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len());
        assert_eq!(x.nrows(), weights.len());
        let mut probs = x.to_owned();
        let mut total = A::zero();
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            if weights[r] == A::zero() {
                row.fill(A::zero());
                continue;
            }
            let slice = row.as_slice_mut().expect("contiguous row");
            let lse = log_sum_exp(slice);
            total += weights[r] * (lse - slice[targets[r]]);
            for v in slice.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let ng = self.ng(logits);
        self.push(Array2::from_elem((1, 1), total), Op::CrossEntropy(logits, targets.to_vec(), weights.to_vec(), probs), ng)
    }

    /// `sum_r weights[r] * ||pred[r] - target[r]||²`, as a `1 x 1` node.
    pub fn weighted_sse(&mut self, pred: Var, target: Array2<A>, weights: &[A]) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "sse shape mismatch");
        assert_eq!(p.nrows(), weights.len());
        let mut total = A::zero();
        for (r, w) in weights.iter().enumerate() {
            if *w == A::zero() {
                continue;
            }
            let row: A = p.row(r).iter().zip(target.row(r)).map(|(&a, &b)| (a - b) * (a - b)).sum();
            total += *w * row;
        }
        let ng = self.ng(pred);
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSse(pred, target, weights.to_vec()), ng)
    }

    /// Forward value `replacement`, backward identity to `a`.
    pub fn straight_through(&mut self, a: Var, replacement: Array2<A>) -> Var {
        assert_eq!(self.shape(a), replacement.dim());
        let ng = self.ng(a);
        self.push(replacement, Op::StraightThrough(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a), ng)
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, root: Var) -> Gradients<A> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<A>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), A::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let out = Var(idx);
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.t().dot(&self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.mapv(|v| -v));
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * &self.value(*b));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, &g * &self.value(*a));
                    }
                }
                Op::AddRow(a, r) => {
                    if self.ng(*r) {
                        acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, r) => {
                    if self.ng(*r) {
                        let gr = (&g * &self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *r, gr);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * &self.value(*r));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.mapv(|v| v * c));
                }
                Op::MaskFill(a, allowed) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&**allowed).for_each(|v, &ok| {
                        if !ok {
                            *v = A::zero();
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        let sg = sigmoid(x);
                        *gv = *gv * sg * (A::one() + x * (A::one() - sg));
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::RmsNorm(a, inv) => {
                    let y = self.value(out);
                    let cols = A::from_usize_lossy(y.ncols());
                    let mut ga = g;
                    for (r, mut grow) in ga.rows_mut().into_iter().enumerate() {
                        let yrow = y.row(r);
                        let dot: A = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<A>() / cols;
                        Zip::from(&mut grow).and(&yrow).for_each(|gv, &yv| *gv = (*gv - yv * dot) * inv[r]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = self.value(out);
                    let mut ga = g;
                    for (r, mut grow) in ga.rows_mut().into_iter().enumerate() {
                        let yrow = y.row(r);
                        let dot: A = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum();
                        Zip::from(&mut grow).and(&yrow).for_each(|gv, &yv| *gv = yv * (*gv - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Array2::zeros((rows, cols));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Array2::zeros((rows, cols));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.ng(p) {
                            acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.ng(p) {
                            acc(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::Gather(table, ids) => {
                    let mut gt = Array2::zeros(self.shape(*table));
                    for (i, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Rope(a, table) => {
                    acc(&mut grads, *a, rotate(g.view(), table, true));
                }
                Op::Unfold(a, kernel) => {
                    let (rows, cols) = self.shape(*a);
                    let half = kernel / 2;
                    let mut ga = Array2::zeros((rows, cols));
                    for t in 0..rows {
                        for j in 0..*kernel {
                            let src = t as isize + j as isize - half as isize;
                            if src >= 0 && (src as usize) < rows {
                                let mut dst = ga.row_mut(src as usize);
                                dst += &g.slice(s![t, j * cols..(j + 1) * cols]);
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy(logits, targets, weights, probs) => {
                    let scale = g[[0, 0]];
                    let mut gl = probs.clone();
                    for (r, mut row) in gl.rows_mut().into_iter().enumerate() {
                        let w = weights[r];
                        if w == A::zero() {
                            continue;
                        }
                        row[targets[r]] -= A::one();
                        row.mapv_inplace(|v| v * w * scale);
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::WeightedSse(pred, target, weights) => {
                    let scale = g[[0, 0]];
                    let two = A::lit(2.0);
                    let mut gp = &self.value(*pred) - target;
                    for (r, mut row) in gp.rows_mut().into_iter().enumerate() {
                        let w = weights[r] * two * scale;
                        row.mapv_inplace(|v| v * w);
                    }
                    acc(&mut grads, *pred, gp);
                }
                Op::StraightThrough(a) => acc(&mut grads, *a, g),
                Op::SumAll(a) => {
                    let v = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(self.shape(*a), v));
                }
            }
        }

        let mut by_param = vec![None; self.param_nodes.len()];
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(v) = node {
                by_param[pid] = grads[v.0].take();
            }
        }
        Gradients { nodes: grads, params: by_param }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<A> {
    nodes: Vec<Option<Array2<A>>>,
    params: Vec<Option<Array2<A>>>,
}

impl<A: Scalar> Gradients<A> {
    /// Gradient with respect to a non-parameter differentiable leaf.
    pub fn wrt(&self, v: Var) -> Option<&Array2<A>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<A>> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn into_param_grads(self) -> Vec<Option<Array2<A>>> {
        self.params
    }
}

fn acc<A: Scalar>(grads: &mut [Option<Array2<A>>], v: Var, g: Array2<A>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid<A: Scalar>(x: A) -> A {
    A::one() / (A::one() + (-x).exp())
}

fn rotate<A: Scalar>(x: ArrayView2<'_, A>, table: &RopeTable<A>, inverse: bool) -> Array2<A> {
    let mut out = x.to_owned();
    let half = table.head_dim / 2;
    for r in 0..out.nrows() {
        for h in 0..table.n_heads {
            let base = h * table.head_dim;
            for j in 0..half {
                let c = table.cos[[r, j]];
                let s = if inverse { -table.sin[[r, j]] } else { table.sin[[r, j]] };
                let x0 = x[[r, base + 2 * j]];
                let x1 = x[[r, base + 2 * j + 1]];
                out[[r, base + 2 * j]] = x0 * c - x1 * s;
                out[[r, base + 2 * j + 1]] = x0 * s + x1 * c;
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp<A: Scalar>(row: &[A]) -> A {
    let m = row.iter().copied().fold(A::neg_infinity(), A::max);
    if m == A::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<A>().ln()
}

pub(crate) fn softmax_in_place<A: Scalar>(row: &mut [A]) {
    let m = row.iter().copied().fold(A::neg_infinity(), A::max);
    if m == A::neg_infinity() {
        row.iter_mut().for_each(|v| *v = A::zero());
        return;
    }
    let mut total = A::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Central finite differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let eps = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += eps;
            let mut xm = x.clone();
            xm[[r, c]] -= eps;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn check(x: Array2<f64>, build: impl Fn(&mut Graph<'_, f64>, Var) -> Var) {
        let eval = |x: &Array2<f64>| {
            let mut g = Graph::detached();
            let v = g.input(x.clone());
            let out = build(&mut g, v);
            let out = g.sum_all(out);
            g.scalar(out)
        };
        let mut g = Graph::detached();
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        let out = g.sum_all(out);
        let grads = g.backward(out);
        let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        let numeric = numeric_grad(&x, &eval);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-5 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn grad_matmul_both_sides(x in mat(3, 4), w in mat(4, 2)) {
            let w2 = w.clone();
            check(x.clone(), move |g, v| { let c = g.constant(w2.clone()); g.matmul(v, c) });
            let x2 = x.clone();
            check(w.clone(), move |g, v| { let c = g.constant(x2.clone()); g.matmul(c, v) });
            let wt = w.t().to_owned();
            check(x, move |g, v| { let c = g.constant(wt.clone()); g.matmul_t(v, c) });
        }

        #[test]
        fn grad_silu_rms_softmax(x in mat(3, 5)) {
            check(x.clone(), |g, v| { let s = g.silu(v); g.mul(s, v) });
            check(x.clone(), |g, v| { let n = g.rms_norm(v, 1e-6); let w = g.constant(Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 * 0.1)); g.mul(n, w) });
            check(x, |g, v| { let p = g.softmax(v); let w = g.constant(Array2::from_shape_fn((3, 5), |(i, j)| (i + 2 * j) as f64)); g.mul(p, w) });
        }

        #[test]
        fn grad_rope_unfold_gather(x in mat(4, 4)) {
            let table = Rc::new(RopeTable::<f64>::new(&[0, 3, 7, 11], 2, 2, 100.0));
            check(x.clone(), move |g, v| { let r = g.rope(v, table.clone()); let w = g.constant(Array2::from_shape_fn((4, 4), |(i, j)| (i as f64) - (j as f64))); g.mul(r, w) });
            check(x.clone(), |g, v| { let u = g.unfold(v, 3); let w = g.constant(Array2::from_shape_fn((4, 12), |(i, j)| ((i * 7 + j) % 5) as f64)); g.mul(u, w) });
            check(x, |g, v| { let u = g.gather(v, &[2, 0, 2]); let w = g.constant(Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64)); g.mul(u, w) });
        }

        #[test]
        fn grad_losses(x in mat(3, 4)) {
            check(x.clone(), |g, v| g.cross_entropy(v, &[1, 3, 0], &[0.5, 0.0, 2.0]));
            let t = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64) * 0.3 - j as f64);
            check(x, move |g, v| g.weighted_sse(v, t.clone(), &[1.0, 0.25, 0.0]));
        }

        #[test]
        fn grad_broadcast_and_slices(x in mat(3, 4), r in mat(1, 4)) {
            let r2 = r.clone();
            check(x.clone(), move |g, v| { let c = g.constant(r2.clone()); let a = g.mul_row(v, c); g.add_row(a, c) });
            let x2 = x.clone();
            check(r, move |g, v| { let c = g.constant(x2.clone()); let a = g.mul_row(c, v); g.add_row(a, v) });
            check(x, |g, v| {
                let a = g.slice_cols(v, 1, 2);
                let b = g.slice_rows(v, 0, 2);
                let c = g.concat_rows(&[b, v]);
                let d = g.concat_cols(&[a, a]);
                let e = g.sum_all(c);
                let f = g.sum_all(d);
                let h = g.mul(e, f);
                g.scale(h, 0.5)
            });
        }
    }

    #[test]
    fn masked_rows_get_zero_probability() {
        let mut g = Graph::<f64>::detached();
        let x = g.input(array![[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]);
        let allowed = Rc::new(array![[true, false, true], [false, true, false]]);
        let m = g.masked_fill_neg_inf(x, allowed);
        let p = g.softmax(m);
        let pv = g.value(p).to_owned();
        assert_eq!(pv[[0, 1]], 0.0);
        assert_eq!(pv[[1, 1]], 1.0);
        let w = g.constant(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let y = g.mul(p, w);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let gx = grads.wrt(x).unwrap();
        assert!(gx.iter().all(|v| v.is_finite()));
        assert_eq!(gx[[0, 1]], 0.0);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut g = Graph::<f64>::detached();
        let z = g.input(array![[0.2, 0.4]]);
        let q = g.straight_through(z, array![[1.0, -1.0]]);
        assert_eq!(g.value(q), array![[1.0, -1.0]]);
        let w = g.constant(array![[3.0, 5.0]]);
        let y = g.mul(q, w);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(z).unwrap(), &array![[3.0, 5.0]]);
    }
}
