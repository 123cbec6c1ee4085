use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::params::{Gradients, ParamId, ParamStore};
use crate::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Constant row-compressed sparse matrix, used as a fixed left operand
/// (graph propagation matrices).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix<T: Scalar> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut sorted: Vec<(usize, usize, T)> = triplets.to_vec();
        sorted.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<T> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().expect("nonempty") += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self { rows, cols, indptr, indices, values }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Array2<T> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[[r, c]] += v;
            }
        }
        out
    }

    fn matmul(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut dst = out.row_mut(r);
            for (c, v) in self.row(r) {
                dst.scaled_add(v, &x.row(c));
            }
        }
        out
    }

    /// `acc += selfᵀ · g`
    fn transpose_matmul_into(&self, g: ArrayView2<T>, acc: &mut Array2<T>) {
        for r in 0..self.rows {
            let src = g.row(r);
            for (c, v) in self.row(r) {
                acc.row_mut(c).scaled_add(v, &src);
            }
        }
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<T> },
    GatherRows { src: Var, rows: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    SegmentMean { x: Var, segments: Vec<(usize, usize)> },
    SumAll(Var),
    Transpose(Var),
    Reshape(Var),
    SpMatMul { adj: Arc<SparseMatrix<T>>, x: Var },
    Unfold1d { x: Var, kernel: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Array2<T> },
    Lstm(Box<LstmRecord<T>>),
}

/// Saved forward state of [`Tape::lstm`], time-major like its output.
#[derive(Debug)]
struct LstmRecord<T: Scalar> {
    xw: Var,
    rec: Var,
    batch: usize,
    reverse: bool,
    /// Activated gates `[i f g o]`, `L·B × 4u`.
    gates: Array2<T>,
    cells: Array2<T>,
}

struct Node<T: Scalar> {
    value: Arc<Array2<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records a forward computation so it can be differentiated.
///
/// Every operation appends a node and returns a [`Var`]. Nodes whose inputs
/// carry no gradient are marked constant and skipped by [`Tape::backward`].
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), grad_enabled: true }
    }

    /// A tape on which no value requires a gradient. Used for inference.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad, None)
    }

    fn push_arc(&self, value: Arc<Array2<T>>, op: Op<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        debug_assert!(value.iter().all(|x| !x.is_nan()), "NaN produced by {op:?}");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled, param });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array2<T>> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    pub fn value_arc(&self, v: Var) -> Arc<Array2<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (useful for tests and probes).
    pub fn variable(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a stored parameter on the tape. Repeated calls for the same id
    /// return the same node, so gradients from every use accumulate.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push_arc(Arc::clone(&p.value), Op::Leaf, p.trainable, Some(id));
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(x.ncols(), y.nrows(), "matmul {:?} x {:?}", x.dim(), y.dim());
            x.dot(y.as_ref())
        };
        self.push(out, Op::MatMul(a, b), self.rg(&[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.zip_values(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), self.rg(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.zip_values(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), self.rg(&[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.zip_values(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), self.rg(&[a, b]))
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Array2<T> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!(x.dim(), y.dim(), "elementwise shape mismatch");
        Zip::from(x.as_ref()).and(y.as_ref()).map_collect(|&x, &y| f(x, y))
    }

    /// `a (m×n) + row (1×n)`, broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, r) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!((1, x.ncols()), r.dim(), "add_row shape mismatch");
            x.as_ref() + r.as_ref()
        };
        self.push(out, Op::AddRow(a, row), self.rg(&[a, row]))
    }

    /// `a (m×n) ⊙ row (1×n)`, broadcast over rows.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, r) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!((1, x.ncols()), r.dim(), "mul_row shape mismatch");
            x.as_ref() * r.as_ref()
        };
        self.push(out, Op::MulRow(a, row), self.rg(&[a, row]))
    }

    pub fn scale(&self, a: Var, factor: T) -> Var {
        let out = self.value(a).mapv(|x| x * factor);
        self.push(out, Op::Scale(a, factor), self.rg(&[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), self.rg(&[a]))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a), self.rg(&[a]))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.tanh());
        self.push(out, Op::Tanh(a), self.rg(&[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
        let out = self.value(a).mapv(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), self.rg(&[a]))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = softmax_rows(&self.value(a));
        self.push(out, Op::SoftmaxRows(a), self.rg(&[a]))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&self, a: Var, eps: T) -> Var {
        let (out, inv_std) = {
            let x = self.value(a);
            let n = T::from_usize(x.ncols()).expect("width fits");
            let mut out = Array2::zeros(x.raw_dim());
            let mut inv_std = Vec::with_capacity(x.nrows());
            for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
                let mean = src.sum() / n;
                let var = src.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
                let is = T::one() / (var + eps).sqrt();
                Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = (s - mean) * is);
                inv_std.push(is);
            }
            (out, inv_std)
        };
        self.push(out, Op::LayerNormRows { x: a, inv_std }, self.rg(&[a]))
    }

    /// Selects rows of `src` by index (embedding lookup, reordering).
    pub fn gather_rows(&self, src: Var, rows: &[usize]) -> Var {
        let out = {
            let x = self.value(src);
            let mut out = Array2::zeros((rows.len(), x.ncols()));
            for (i, &r) in rows.iter().enumerate() {
                assert!(r < x.nrows(), "row index {r} out of range {}", x.nrows());
                out.row_mut(i).assign(&x.row(r));
            }
            out
        };
        self.push(out, Op::GatherRows { src, rows: rows.to_vec() }, self.rg(&[src]))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let out = {
            let nodes = self.nodes.borrow();
            let views: Vec<ArrayView2<T>> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts differ")
        };
        self.push(out, Op::ConcatCols(parts.to_vec()), self.rg(parts))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let out = {
            let nodes = self.nodes.borrow();
            let views: Vec<ArrayView2<T>> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows column counts differ")
        };
        self.push(out, Op::ConcatRows(parts.to_vec()), self.rg(parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols { x: a, start }, self.rg(&[a]))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows { x: a, start }, self.rg(&[a]))
    }

    /// Column means, as a `1×n` row.
    pub fn mean_rows(&self, a: Var) -> Var {
        let out = {
            let x = self.value(a);
            assert!(x.nrows() > 0, "mean over zero rows");
            x.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0))
        };
        self.push(out, Op::MeanRows(a), self.rg(&[a]))
    }

    /// Mean of each contiguous row range; one output row per segment.
    pub fn segment_mean(&self, a: Var, segments: &[(usize, usize)]) -> Var {
        let out = {
            let x = self.value(a);
            let mut out = Array2::zeros((segments.len(), x.ncols()));
            for (i, &(lo, hi)) in segments.iter().enumerate() {
                assert!(lo < hi && hi <= x.nrows(), "bad segment {lo}..{hi}");
                let m = x.slice(s![lo..hi, ..]).mean_axis(Axis(0)).expect("nonempty");
                out.row_mut(i).assign(&m);
            }
            out
        };
        self.push(out, Op::SegmentMean { x: a, segments: segments.to_vec() }, self.rg(&[a]))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a), self.rg(&[a]))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a), self.rg(&[a]))
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let out = {
            let x = self.value(a);
            assert_eq!(x.len(), rows * cols, "reshape {:?} -> ({rows}, {cols})", x.dim());
            let flat: Vec<T> = x.iter().copied().collect();
            Array2::from_shape_vec((rows, cols), flat).expect("sizes checked")
        };
        self.push(out, Op::Reshape(a), self.rg(&[a]))
    }

    /// `adj · x` for a constant sparse `adj`.
    pub fn sparse_matmul(&self, adj: Arc<SparseMatrix<T>>, x: Var) -> Var {
        let out = {
            let v = self.value(x);
            assert_eq!(adj.cols, v.nrows(), "sparse_matmul shape mismatch");
            adj.matmul(v.view())
        };
        self.push(out, Op::SpMatMul { adj, x }, self.rg(&[x]))
    }

    /// Sliding windows of width `kernel` over each row of a `B×L` input.
    ///
    /// Output is `(B·(L-kernel+1))×kernel`; row `b·P + p` holds
    /// `x[b, p..p+kernel]` where `P = L-kernel+1`.
    pub fn unfold1d(&self, x: Var, kernel: usize) -> Var {
        let out = {
            let v = self.value(x);
            let (b, l) = v.dim();
            assert!(kernel >= 1 && l >= kernel, "unfold1d: width {l} < kernel {kernel}");
            let p = l - kernel + 1;
            let mut out = Array2::zeros((b * p, kernel));
            for bi in 0..b {
                for pi in 0..p {
                    out.row_mut(bi * p + pi).assign(&v.slice(s![bi, pi..pi + kernel]));
                }
            }
            out
        };
        self.push(out, Op::Unfold1d { x, kernel }, self.rg(&[x]))
    }

    /// Mean softmax cross-entropy of `logits` (B×C) against class indices.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Var {
        let (loss, probs) = {
            let z = self.value(logits);
            assert_eq!(z.nrows(), targets.len(), "one target per row");
            let probs = softmax_rows(&z);
            let mut loss = T::zero();
            for (i, &t) in targets.iter().enumerate() {
                assert!(t < z.ncols(), "target {t} out of range");
                let row = z.row(i);
                let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
                let lse = row.fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
                loss += lse - z[[i, t]];
            }
            (loss / T::from_usize(targets.len().max(1)).expect("fits"), probs)
        };
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            self.rg(&[logits]),
        )
    }

    /// Whole-sequence LSTM recurrence with gate order `i f g o`.
    ///
    /// `xw` holds the input projections plus bias for every step, time-major
    /// (`L·B × 4u`, row `t·B + b`); `rec` is the `u × 4u` recurrent kernel.
    /// Returns the hidden state at every time step in the same time-major
    /// layout (`L·B × u`). With `reverse` the recurrence runs from the last
    /// step to the first, but rows still index time.
    pub fn lstm(&self, xw: Var, rec: Var, batch: usize, reverse: bool) -> Var {
        let (out, gates, cells) = {
            let nodes = self.nodes.borrow();
            let (x, u_mat) = (&nodes[xw.0].value, &nodes[rec.0].value);
            let u = u_mat.nrows();
            assert_eq!(u_mat.ncols(), 4 * u, "recurrent kernel must be u x 4u");
            assert_eq!(x.ncols(), 4 * u, "projection width must be 4u");
            assert!(batch > 0 && x.nrows() % batch == 0, "rows must be steps x batch");
            let steps = x.nrows() / batch;
            let mut out = Array2::<T>::zeros((steps * batch, u));
            let mut gates = Array2::<T>::zeros((steps * batch, 4 * u));
            let mut cells = Array2::<T>::zeros((steps * batch, u));
            let mut h = Array2::<T>::zeros((batch, u));
            let mut c = Array2::<T>::zeros((batch, u));
            let mut z = Array2::<T>::zeros((batch, 4 * u));
            for k in 0..steps {
                let t = if reverse { steps - 1 - k } else { k };
                let rows = s![t * batch..(t + 1) * batch, ..];
                z.assign(&x.slice(rows));
                general_mat_mul(T::one(), &h, u_mat.as_ref(), T::one(), &mut z);
                let mut gt = gates.slice_mut(rows);
                for b in 0..batch {
                    for j in 0..u {
                        let i = sigmoid(z[[b, j]]);
                        let f = sigmoid(z[[b, u + j]]);
                        let g = z[[b, 2 * u + j]].tanh();
                        let o = sigmoid(z[[b, 3 * u + j]]);
                        let cv = f * c[[b, j]] + i * g;
                        c[[b, j]] = cv;
                        h[[b, j]] = o * cv.tanh();
                        gt[[b, j]] = i;
                        gt[[b, u + j]] = f;
                        gt[[b, 2 * u + j]] = g;
                        gt[[b, 3 * u + j]] = o;
                    }
                }
                cells.slice_mut(rows).assign(&c);
                out.slice_mut(rows).assign(&h);
            }
            (out, gates, cells)
        };
        let record = LstmRecord { xw, rec, batch, reverse, gates, cells };
        self.push(out, Op::Lstm(Box::new(record)), self.rg(&[xw, rec]))
    }

    /// Reverse pass from a `1×1` output. Returns gradients for every
    /// trainable parameter reached.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Array2::ones((1, 1)));
        let mut result = Gradients::default();

        for i in (0..=output.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let mut acc = Accumulator { nodes: &nodes, grads: &mut grads };
            match &node.op {
                Op::Leaf => {
                    if let Some(pid) = node.param {
                        result.grads.insert(pid, g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = acc.slot(*a) {
                        general_mat_mul(T::one(), &g, &bv.t(), T::one(), ga);
                    }
                    if let Some(gb) = acc.slot(*b) {
                        general_mat_mul(T::one(), &av.t(), &g, T::one(), gb);
                    }
                }
                Op::Add(a, b) => {
                    acc.add(*a, &g);
                    acc.add(*b, &g);
                }
                Op::Sub(a, b) => {
                    acc.add(*a, &g);
                    if let Some(gb) = acc.slot(*b) {
                        *gb -= &g;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = acc.slot(*a) {
                        Zip::from(ga).and(&g).and(bv.as_ref()).for_each(|d, &g, &y| *d += g * y);
                    }
                    if let Some(gb) = acc.slot(*b) {
                        Zip::from(gb).and(&g).and(av.as_ref()).for_each(|d, &g, &x| *d += g * x);
                    }
                }
                Op::AddRow(a, r) => {
                    acc.add(*a, &g);
                    if let Some(gr) = acc.slot(*r) {
                        *gr += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    }
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (&nodes[a.0].value, &nodes[r.0].value);
                    if let Some(ga) = acc.slot(*a) {
                        *ga += &(&g * rv.as_ref());
                    }
                    if let Some(gr) = acc.slot(*r) {
                        *gr += &(&g * av.as_ref()).sum_axis(Axis(0)).insert_axis(Axis(0));
                    }
                }
                Op::Scale(a, f) => {
                    if let Some(ga) = acc.slot(*a) {
                        ga.scaled_add(*f, &g);
                    }
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    if let Some(ga) = acc.slot(*a) {
                        Zip::from(ga).and(&g).and(y.as_ref()).for_each(|d, &g, &y| {
                            if y > T::zero() {
                                *d += g
                            }
                        });
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    if let Some(ga) = acc.slot(*a) {
                        Zip::from(ga).and(&g).and(y.as_ref()).for_each(|d, &g, &y| *d += g * y * (T::one() - y));
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    if let Some(ga) = acc.slot(*a) {
                        Zip::from(ga).and(&g).and(y.as_ref()).for_each(|d, &g, &y| *d += g * (T::one() - y * y));
                    }
                }
                Op::Gelu(a) => {
                    let x = &nodes[a.0].value;
                    let (c, k, half, three) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5), T::lit(3.0));
                    if let Some(ga) = acc.slot(*a) {
                        Zip::from(ga).and(&g).and(x.as_ref()).for_each(|d, &g, &x| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                            *d += g * (half * (T::one() + t) + half * x * dt);
                        });
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    if let Some(ga) = acc.slot(*a) {
                        for ((gy, yy), mut d) in g.rows().into_iter().zip(y.rows()).zip(ga.rows_mut()) {
                            let dot = gy.dot(&yy);
                            Zip::from(&mut d).and(&gy).and(&yy).for_each(|d, &g, &y| *d += y * (g - dot));
                        }
                    }
                }
                Op::LayerNormRows { x, inv_std } => {
                    let y = &node.value;
                    if let Some(gx) = acc.slot(*x) {
                        let n = T::from_usize(y.ncols()).expect("fits");
                        for (r, ((gy, yy), mut d)) in g.rows().into_iter().zip(y.rows()).zip(gx.rows_mut()).enumerate() {
                            let mean_g = gy.sum() / n;
                            let mean_gy = gy.dot(&yy) / n;
                            let is = inv_std[r];
                            Zip::from(&mut d)
                                .and(&gy)
                                .and(&yy)
                                .for_each(|d, &g, &y| *d += is * (g - mean_g - y * mean_gy));
                        }
                    }
                }
                Op::GatherRows { src, rows } => {
                    if let Some(gs) = acc.slot(*src) {
                        for (i, &r) in rows.iter().enumerate() {
                            gs.row_mut(r).scaled_add(T::one(), &g.row(i));
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = nodes[p.0].value.ncols();
                        if let Some(gp) = acc.slot(*p) {
                            *gp += &g.slice(s![.., start..start + w]);
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = nodes[p.0].value.nrows();
                        if let Some(gp) = acc.slot(*p) {
                            *gp += &g.slice(s![start..start + h, ..]);
                        }
                        start += h;
                    }
                }
                Op::SliceCols { x, start } => {
                    if let Some(gx) = acc.slot(*x) {
                        let mut view = gx.slice_mut(s![.., *start..*start + g.ncols()]);
                        view += &g;
                    }
                }
                Op::Lstm(r) => {
                    let (dxw, drec) = lstm_backward(r, &node.value, &nodes[r.rec.0].value, &g);
                    acc.add(r.xw, &dxw);
                    acc.add(r.rec, &drec);
                }
                Op::SliceRows { x, start } => {
                    if let Some(gx) = acc.slot(*x) {
                        let mut view = gx.slice_mut(s![*start..*start + g.nrows(), ..]);
                        view += &g;
                    }
                }
                Op::MeanRows(a) => {
                    if let Some(ga) = acc.slot(*a) {
                        let m = T::from_usize(ga.nrows()).expect("fits");
                        let row = g.row(0).mapv(|v| v / m);
                        for mut r in ga.rows_mut() {
                            r += &row;
                        }
                    }
                }
                Op::SegmentMean { x, segments } => {
                    if let Some(gx) = acc.slot(*x) {
                        for (i, &(lo, hi)) in segments.iter().enumerate() {
                            let m = T::from_usize(hi - lo).expect("fits");
                            let row = g.row(i).mapv(|v| v / m);
                            for r in lo..hi {
                                gx.row_mut(r).scaled_add(T::one(), &row);
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let s = g[[0, 0]];
                    if let Some(ga) = acc.slot(*a) {
                        ga.mapv_inplace(|v| v + s);
                    }
                }
                Op::Transpose(a) => {
                    if let Some(ga) = acc.slot(*a) {
                        *ga += &g.t();
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = acc.slot(*a) {
                        let flat: Vec<T> = g.iter().copied().collect();
                        let reshaped = Array2::from_shape_vec(ga.raw_dim(), flat).expect("same size");
                        *ga += &reshaped;
                    }
                }
                Op::SpMatMul { adj, x } => {
                    if let Some(gx) = acc.slot(*x) {
                        adj.transpose_matmul_into(g.view(), gx);
                    }
                }
                Op::Unfold1d { x, kernel } => {
                    if let Some(gx) = acc.slot(*x) {
                        let (b, l) = gx.dim();
                        let p = l - kernel + 1;
                        for bi in 0..b {
                            for pi in 0..p {
                                let src = g.row(bi * p + pi);
                                let mut dst = gx.slice_mut(s![bi, pi..pi + kernel]);
                                dst += &src;
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g[[0, 0]] / T::from_usize(targets.len().max(1)).expect("fits");
                    if let Some(gl) = acc.slot(*logits) {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..probs.ncols() {
                                let onehot = if j == t { T::one() } else { T::zero() };
                                gl[[i, j]] += scale * (probs[[i, j]] - onehot);
                            }
                        }
                    }
                }
            }
        }
        result
    }
}

struct Accumulator<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Array2<T>>],
}

impl<T: Scalar> Accumulator<'_, T> {
    /// Gradient buffer of `v`, allocated on first use; `None` if `v` is constant.
    fn slot(&mut self, v: Var) -> Option<&mut Array2<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(self.grads[v.0].get_or_insert_with(|| Array2::zeros(node.value.raw_dim())))
    }

    fn add(&mut self, v: Var, g: &Array2<T>) {
        if let Some(buf) = self.slot(v) {
            *buf += g;
        }
    }
}

/// Backpropagation through time for [`Tape::lstm`]. Returns the gradients
/// of the projections and of the recurrent kernel.
fn lstm_backward<T: Scalar>(r: &LstmRecord<T>, hs: &Array2<T>, rec: &Array2<T>, g: &Array2<T>) -> (Array2<T>, Array2<T>) {
    let (batch, u) = (r.batch, rec.nrows());
    let steps = hs.nrows() / batch;
    let one = T::one();
    let mut dz = Array2::<T>::zeros((steps * batch, 4 * u));
    let mut h_prev = Array2::<T>::zeros((steps * batch, u));
    let mut dh_next = Array2::<T>::zeros((batch, u));
    let mut dc_next = Array2::<T>::zeros((batch, u));
    for k in (0..steps).rev() {
        let t = if r.reverse { steps - 1 - k } else { k };
        let prev = if k == 0 { None } else { Some(if r.reverse { t + 1 } else { t - 1 }) };
        let base = t * batch;
        for b in 0..batch {
            let row = base + b;
            for j in 0..u {
                let (i, f, gg, o) = (r.gates[[row, j]], r.gates[[row, u + j]], r.gates[[row, 2 * u + j]], r.gates[[row, 3 * u + j]]);
                let c = r.cells[[row, j]];
                let c_prev = prev.map_or(T::zero(), |p| r.cells[[p * batch + b, j]]);
                let tc = c.tanh();
                let dh = g[[row, j]] + dh_next[[b, j]];
                let dc = dc_next[[b, j]] + dh * o * (one - tc * tc);
                dz[[row, j]] = dc * gg * i * (one - i);
                dz[[row, u + j]] = dc * c_prev * f * (one - f);
                dz[[row, 2 * u + j]] = dc * i * (one - gg * gg);
                dz[[row, 3 * u + j]] = dh * tc * o * (one - o);
                dc_next[[b, j]] = dc * f;
            }
            if let Some(p) = prev {
                h_prev.row_mut(row).assign(&hs.row(p * batch + b));
            }
        }
        dh_next.fill(T::zero());
        general_mat_mul(one, &dz.slice(s![base..base + batch, ..]), &rec.t(), T::zero(), &mut dh_next);
    }
    let drec = h_prev.t().dot(&dz);
    (dz, drec)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}
