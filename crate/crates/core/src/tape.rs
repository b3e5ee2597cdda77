//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every value on a [`Tape`] is an `Array2<f64>`; scalars are `1 × 1`
//! matrices. Operations append a node holding the forward value and enough
//! information to route the upstream gradient back to its inputs. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse once.
//!
//! Nodes created with [`Tape::constant`] never receive gradients, and neither
//! does anything computed only from constants, so data tensors cost nothing on
//! the backward pass.

use std::rc::Rc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed sparse linear map between flattened (row-major) matrices.
///
/// `out[o] = Σ weight · in[col]` over the entries of row `o`. Used for
/// gathers such as building node-pair rows.
#[derive(Debug, Clone)]
pub struct SparseMap {
    out_shape: (usize, usize),
    in_shape: (usize, usize),
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    pub fn builder(in_shape: (usize, usize), out_shape: (usize, usize)) -> SparseMapBuilder {
        let mut row_ptr = Vec::with_capacity(out_shape.0 * out_shape.1 + 1);
        row_ptr.push(0);
        SparseMapBuilder {
            map: SparseMap {
                out_shape,
                in_shape,
                row_ptr,
                cols: Vec::new(),
                weights: Vec::new(),
            },
        }
    }

    pub fn in_shape(&self) -> (usize, usize) {
        self.in_shape
    }

    pub fn out_shape(&self) -> (usize, usize) {
        self.out_shape
    }

    fn apply(&self, input: &Array2<f64>) -> Array2<f64> {
        let src = input.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.out_shape.0 * self.out_shape.1];
        for (o, slot) in out.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[o], self.row_ptr[o + 1]);
            let mut acc = 0.0;
            for e in a..b {
                acc += self.weights[e] * src[self.cols[e]];
            }
            *slot = acc;
        }
        Array2::from_shape_vec(self.out_shape, out).expect("shape")
    }

    fn apply_transpose(&self, grad: &Array2<f64>) -> Array2<f64> {
        let g = grad.as_standard_layout();
        let g = g.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.in_shape.0 * self.in_shape.1];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            for e in self.row_ptr[o]..self.row_ptr[o + 1] {
                out[self.cols[e]] += self.weights[e] * go;
            }
        }
        Array2::from_shape_vec(self.in_shape, out).expect("shape")
    }
}

pub struct SparseMapBuilder {
    map: SparseMap,
}

impl SparseMapBuilder {
    /// Adds a term to the output entry currently being built.
    pub fn push(&mut self, in_row: usize, in_col: usize, weight: f64) {
        debug_assert!(in_row < self.map.in_shape.0 && in_col < self.map.in_shape.1);
        self.map.cols.push(in_row * self.map.in_shape.1 + in_col);
        self.map.weights.push(weight);
    }

    /// Closes the current output entry (row-major order).
    pub fn next(&mut self) {
        self.map.row_ptr.push(self.map.cols.len());
    }

    pub fn build(self) -> SparseMap {
        let map = self.map;
        assert_eq!(
            map.row_ptr.len(),
            map.out_shape.0 * map.out_shape.1 + 1,
            "sparse map has the wrong number of output entries"
        );
        map
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    Reshape(Var),
    Sparse(Var, Rc<SparseMap>),
    Im2Col(Var, usize, usize),
    SegmentPool(Var, usize, usize),
    GraphMix(Var, Var),
    RowNormalize(Var),
    StraightThrough(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the
    /// loss (or is a constant).
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
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

    /// A differentiable leaf (a parameter).
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + 1·bias`, broadcasting the `1 × d` row `bias` over every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(self.shape(bias).0, 1, "bias must be a single row");
        let value = self.value(a) + self.value(bias);
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 - x);
        let rg = self.rg(a);
        self.push(value, Op::OneMinus(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start, end), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let src = self.value(a).as_standard_layout().into_owned();
        let value = src.into_shape_with_order(shape).expect("reshape: element count differs");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn sparse(&mut self, a: Var, map: Rc<SparseMap>) -> Var {
        assert_eq!(self.shape(a), map.in_shape(), "sparse map input shape");
        let value = map.apply(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Sparse(a, map), rg)
    }

    /// Unfolds `blocks` stacked sequences for a 1-D convolution.
    ///
    /// `a` is `(blocks·len) × c` (one row per time step). The result is
    /// `(blocks·(len−k+1)) × (c·k)` whose row `(b, t)` holds `a[(b, t+j), ch]`
    /// at column `ch·k + j`.
    pub fn im2col(&mut self, a: Var, blocks: usize, kernel: usize) -> Var {
        let value = im2col_forward(self.value(a), blocks, kernel);
        let rg = self.rg(a);
        self.push(value, Op::Im2Col(a, blocks, kernel), rg)
    }

    /// Average-pools each of `blocks` stacked sequences (`(blocks·len) × c`)
    /// into `bins` contiguous bins: bin `p` covers steps
    /// `⌊p·len/bins⌋ .. ⌈(p+1)·len/bins⌉`.
    pub fn segment_pool(&mut self, a: Var, blocks: usize, bins: usize) -> Var {
        let value = segment_pool_forward(self.value(a), blocks, bins);
        let rg = self.rg(a);
        self.push(value, Op::SegmentPool(a, blocks, bins), rg)
    }

    /// Applies the `n × n` matrix `p` to every consecutive block of `n` rows of
    /// `y`, i.e. `blockdiag(p, …, p) · y`.
    pub fn graph_mix(&mut self, p: Var, y: Var) -> Var {
        let value = graph_mix_forward(self.value(p), self.value(y));
        let rg = self.rg(p) || self.rg(y);
        self.push(value, Op::GraphMix(p, y), rg)
    }

    /// `D⁻¹ a` with `D = diag(row sums)`; rows summing to zero map to zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let value = row_normalize(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::RowNormalize(a), rg)
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Array2<f64>) -> Var {
        assert_eq!(hard.dim(), self.shape(soft));
        let rg = self.rg(soft);
        self.push(hard, Op::StraightThrough(soft), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Smallest |input| over every ReLU and absolute-value node that takes part
    /// in the gradient. Finite differences straddling a kink are meaningless,
    /// so gradient checks use this to detect bad probe points.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            if !node.requires_grad {
                continue;
            }
            if let Op::Relu(a) | Op::Abs(a) = node.op {
                for &x in self.nodes[a.0].value.iter() {
                    best = best.min(x.abs());
                }
            }
        }
        best
    }

    /// Which side of its kink every ReLU and absolute-value input lies on.
    /// Two forward passes with equal patterns are on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = node.op {
                out.extend(self.nodes[a.0].value.iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let d = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = self.value(*a).t().dot(&g);
                        acc(&mut grads, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*bias) {
                        let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *bias, d);
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::OneMinus(a) => acc(&mut grads, *a, -g),
                Op::Sigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Abs(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| *d *= sign(x));
                    acc(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| *d *= 2.0 * x);
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                        }
                        offset += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::Transpose(a) => {
                    acc(&mut grads, *a, g.t().as_standard_layout().into_owned());
                }
                Op::Reshape(a) => {
                    let d = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(self.shape(*a))
                        .expect("reshape");
                    acc(&mut grads, *a, d);
                }
                Op::Sparse(a, map) => acc(&mut grads, *a, map.apply_transpose(&g)),
                Op::Im2Col(a, blocks, kernel) => {
                    let d = im2col_backward(self.shape(*a), &g, *blocks, *kernel);
                    acc(&mut grads, *a, d);
                }
                Op::SegmentPool(a, blocks, bins) => {
                    let d = segment_pool_backward(self.shape(*a), &g, *blocks, *bins);
                    acc(&mut grads, *a, d);
                }
                Op::GraphMix(p, y) => {
                    let (dp, dy) = graph_mix_backward(self.value(*p), self.value(*y), &g);
                    if self.rg(*p) {
                        acc(&mut grads, *p, dp);
                    }
                    if self.rg(*y) {
                        acc(&mut grads, *y, dy);
                    }
                }
                Op::RowNormalize(a) => {
                    let d = row_normalize_backward(self.value(*a), &node.value, &g);
                    acc(&mut grads, *a, d);
                }
                Op::StraightThrough(soft) => acc(&mut grads, *soft, g),
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let d = Array2::from_elem(shape, g[[0, 0]] / (shape.0 * shape.1) as f64);
                    acc(&mut grads, *a, d);
                }
            }
        }
        Grads { grads }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `D⁻¹ a` with `D = diag(row sums)`; a zero row sum yields a zero row.
pub fn row_normalize(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let s: f64 = row.sum();
        if s == 0.0 {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|x| x / s);
        }
    }
    out
}

fn row_normalize_backward(a: &Array2<f64>, out: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut d = Array2::zeros(a.dim());
    for i in 0..a.nrows() {
        let s: f64 = a.row(i).sum();
        if s == 0.0 {
            continue;
        }
        let dot: f64 = g.row(i).dot(&out.row(i));
        for j in 0..a.ncols() {
            d[[i, j]] = (g[[i, j]] - dot) / s;
        }
    }
    d
}

fn im2col_forward(a: &Array2<f64>, blocks: usize, kernel: usize) -> Array2<f64> {
    let (rows, c) = a.dim();
    assert_eq!(rows % blocks, 0, "im2col: rows must split into blocks");
    let len = rows / blocks;
    assert!(len >= kernel, "im2col: sequence shorter than kernel");
    let out_len = len - kernel + 1;
    let mut out = Array2::zeros((blocks * out_len, c * kernel));
    for b in 0..blocks {
        for t in 0..out_len {
            let mut orow = out.row_mut(b * out_len + t);
            for ch in 0..c {
                for j in 0..kernel {
                    orow[ch * kernel + j] = a[[b * len + t + j, ch]];
                }
            }
        }
    }
    out
}

fn im2col_backward(in_shape: (usize, usize), g: &Array2<f64>, blocks: usize, kernel: usize) -> Array2<f64> {
    let (rows, c) = in_shape;
    let len = rows / blocks;
    let out_len = len - kernel + 1;
    let mut d = Array2::zeros(in_shape);
    for b in 0..blocks {
        for t in 0..out_len {
            let grow = g.row(b * out_len + t);
            for ch in 0..c {
                for j in 0..kernel {
                    d[[b * len + t + j, ch]] += grow[ch * kernel + j];
                }
            }
        }
    }
    d
}

fn pool_bounds(len: usize, bins: usize, p: usize) -> (usize, usize) {
    let start = p * len / bins;
    let end = ((p + 1) * len).div_ceil(bins);
    (start, end)
}

fn segment_pool_forward(a: &Array2<f64>, blocks: usize, bins: usize) -> Array2<f64> {
    let (rows, c) = a.dim();
    assert_eq!(rows % blocks, 0, "segment_pool: rows must split into blocks");
    let len = rows / blocks;
    assert!(len >= bins, "segment_pool: fewer steps than bins");
    let mut out = Array2::zeros((blocks * bins, c));
    for b in 0..blocks {
        for p in 0..bins {
            let (s0, s1) = pool_bounds(len, bins, p);
            let w = 1.0 / (s1 - s0) as f64;
            let mut orow = out.row_mut(b * bins + p);
            for t in s0..s1 {
                orow.scaled_add(w, &a.row(b * len + t));
            }
        }
    }
    out
}

fn segment_pool_backward(in_shape: (usize, usize), g: &Array2<f64>, blocks: usize, bins: usize) -> Array2<f64> {
    let len = in_shape.0 / blocks;
    let mut d = Array2::zeros(in_shape);
    for b in 0..blocks {
        for p in 0..bins {
            let (s0, s1) = pool_bounds(len, bins, p);
            let w = 1.0 / (s1 - s0) as f64;
            let grow = g.row(b * bins + p);
            for t in s0..s1 {
                d.row_mut(b * len + t).scaled_add(w, &grow);
            }
        }
    }
    d
}

fn graph_mix_forward(p: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let n = p.nrows();
    assert_eq!(p.ncols(), n, "graph_mix: operator must be square");
    assert_eq!(y.nrows() % n, 0, "graph_mix: rows must be a multiple of n");
    let blocks = y.nrows() / n;
    let d = y.ncols();
    let y = y.as_standard_layout();
    let ys = y.as_slice().expect("standard layout");
    let mut out = vec![0.0; y.len()];
    for b in 0..blocks {
        let base = b * n * d;
        for i in 0..n {
            let orow = &mut out[base + i * d..base + (i + 1) * d];
            for j in 0..n {
                let w = p[[i, j]];
                if w == 0.0 {
                    continue;
                }
                let yrow = &ys[base + j * d..base + (j + 1) * d];
                for (o, &v) in orow.iter_mut().zip(yrow) {
                    *o += w * v;
                }
            }
        }
    }
    Array2::from_shape_vec((blocks * n, d), out).expect("shape")
}

fn graph_mix_backward(p: &Array2<f64>, y: &Array2<f64>, g: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = p.nrows();
    let blocks = y.nrows() / n;
    let d = y.ncols();
    let y = y.as_standard_layout();
    let g = g.as_standard_layout();
    let ys = y.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let mut dp = Array2::zeros((n, n));
    let mut dy = vec![0.0; ys.len()];
    for b in 0..blocks {
        let base = b * n * d;
        for i in 0..n {
            let grow = &gs[base + i * d..base + (i + 1) * d];
            for j in 0..n {
                let yrow = &ys[base + j * d..base + (j + 1) * d];
                let mut dot = 0.0;
                for (&gv, &yv) in grow.iter().zip(yrow) {
                    dot += gv * yv;
                }
                dp[[i, j]] += dot;
                let w = p[[i, j]];
                if w != 0.0 {
                    let dyrow = &mut dy[base + j * d..base + (j + 1) * d];
                    for (o, &gv) in dyrow.iter_mut().zip(grow) {
                        *o += w * gv;
                    }
                }
            }
        }
    }
    (dp, Array2::from_shape_vec((blocks * n, d), dy).expect("shape"))
}
