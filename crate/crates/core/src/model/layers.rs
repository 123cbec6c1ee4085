//! Trainable building blocks on top of the autograd tape.

use ndarray::Array2;
use rand::{Rng, RngCore};
use scvd_autograd::{init, ParamId, ParamStore, Scalar, SparseMatrix, Tape, Var};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Gelu,
}

pub fn activate<T: Scalar>(tape: &Tape<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Linear => x,
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Gelu => tape.gelu(x),
    }
}

/// `x · W + b` followed by an activation. `W` is `in×out`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        act: Activation,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init::glorot_uniform(rng, fan_in, fan_out), true);
        let b = store.add(format!("{name}.b"), init::zeros((1, fan_out)), true);
        Self { w, b, act }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = tape.matmul(x, tape.param(store, self.w));
        let y = tape.add_row(y, tape.param(store, self.b));
        activate(tape, y, self.act)
    }
}

/// Inverted dropout: active only when an RNG is supplied.
pub fn dropout<T: Scalar>(tape: &Tape<T>, x: Var, rate: f64, rng: Option<&mut dyn RngCore>) -> Var {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let shape = tape.shape(x);
    let scale = T::lit(1.0 / keep);
    let mask = Array2::from_shape_fn(shape, |_| if rng.gen::<f64>() < keep { scale } else { T::zero() });
    tape.mul(x, tape.constant(mask))
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, eps: f64, trainable: bool) -> Self {
        let gamma = store.add(format!("{name}.gamma"), init::filled((1, width), 1.0), trainable);
        let beta = store.add(format!("{name}.beta"), init::zeros((1, width)), trainable);
        Self { gamma, beta, eps }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = tape.layer_norm_rows(x, T::lit(self.eps));
        let n = tape.mul_row(n, tape.param(store, self.gamma));
        tape.add_row(n, tape.param(store, self.beta))
    }
}

/// One LSTM direction with Keras gate order `i, f, c, o`.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub kernel: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub units: usize,
}

impl Lstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
        name: &str,
        input: usize,
        units: usize,
    ) -> Self {
        let kernel = store.add(format!("{name}.kernel"), init::glorot_uniform(rng, input, 4 * units), true);
        let recurrent = store.add(format!("{name}.recurrent"), init::glorot_uniform(rng, units, 4 * units), true);
        let mut b = init::zeros::<T>((1, 4 * units));
        b.slice_mut(ndarray::s![.., units..2 * units]).fill(T::one());
        let bias = store.add(format!("{name}.bias"), b, true);
        Self { kernel, recurrent, bias, units }
    }

    /// Runs over a time-major input (`L·B × in`, row `t·B + b`). Returns the
    /// hidden state at every step, time-major (`L·B × u`). `reverse`
    /// processes the steps from last to first.
    pub fn run<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var, batch: usize, reverse: bool) -> Var {
        let xw = tape.matmul(x, tape.param(store, self.kernel));
        let xw = tape.add_row(xw, tape.param(store, self.bias));
        tape.lstm(xw, tape.param(store, self.recurrent), batch, reverse)
    }
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
        name: &str,
        input: usize,
        units: usize,
    ) -> Self {
        Self {
            forward: Lstm::new(store, rng, &format!("{name}.fwd"), input, units),
            backward: Lstm::new(store, rng, &format!("{name}.bwd"), input, units),
        }
    }

    pub fn units(&self) -> usize {
        self.forward.units
    }

    /// Per-step outputs, time-major `L·B × 2u` (forward then backward halves).
    pub fn sequences<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var, batch: usize) -> Var {
        let f = self.forward.run(tape, store, x, batch, false);
        let b = self.backward.run(tape, store, x, batch, true);
        tape.concat_cols(&[f, b])
    }

    /// Final states of both directions, `B × 2u`: the forward pass at the
    /// last step and the backward pass at the first.
    pub fn last<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var, steps: usize, batch: usize) -> Var {
        let f = self.forward.run(tape, store, x, batch, false);
        let b = self.backward.run(tape, store, x, batch, true);
        let f_last = tape.slice_rows(f, (steps - 1) * batch, steps * batch);
        let b_last = tape.slice_rows(b, 0, batch);
        tape.concat_cols(&[f_last, b_last])
    }
}

/// Graph convolution `Â · X · W + b` with `Â` the symmetrically normalized
/// adjacency including self-loops.
#[derive(Clone, Debug)]
pub struct GcnConv {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
}

impl GcnConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
        name: &str,
        input: usize,
        output: usize,
        act: Activation,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init::glorot_uniform(rng, input, output), true);
        let b = store.add(format!("{name}.b"), init::zeros((1, output)), true);
        Self { w, b, act }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, adj: &Arc<SparseMatrix<T>>, x: Var) -> Var {
        let xw = tape.matmul(x, tape.param(store, self.w));
        let y = tape.add_row(tape.sparse_matmul(Arc::clone(adj), xw), tape.param(store, self.b));
        activate(tape, y, self.act)
    }
}

/// Normalized adjacency for `n` nodes and directed `(src, dst)` edges.
///
/// Messages flow from source to target. Self-loops are added and degrees are
/// counted at the target, giving `Â[i][j] = 1/sqrt(deg(i)·deg(j))` for each
/// edge `j → i`. Parallel edges add up.
pub fn normalized_adjacency<T: Scalar>(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> SparseMatrix<T> {
    let mut pairs: Vec<(usize, usize)> = edges.into_iter().collect();
    pairs.extend((0..n).map(|i| (i, i)));
    let mut deg = vec![0.0f64; n];
    for &(_, dst) in &pairs {
        deg[dst] += 1.0;
    }
    let triplets: Vec<(usize, usize, T)> =
        pairs.iter().map(|&(s, d)| (d, s, T::lit(1.0 / (deg[s] * deg[d]).sqrt()))).collect();
    SparseMatrix::from_triplets(n, n, &triplets)
}

/// Valid 1-D convolution over a single-channel signal, `filters` outputs.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub filters: usize,
}

impl Conv1d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut dyn RngCore,
        name: &str,
        kernel: usize,
        filters: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init::glorot_uniform(rng, kernel, filters), true);
        let b = store.add(format!("{name}.b"), init::zeros((1, filters)), true);
        Self { w, b, kernel, filters }
    }

    /// `B × L` → `B × ((L-k+1)·filters)`, flattened position-major.
    pub fn forward_flat<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let (batch, len) = tape.shape(x);
        let positions = len + 1 - self.kernel;
        let windows = tape.unfold1d(x, self.kernel);
        let y = tape.add_row(tape.matmul(windows, tape.param(store, self.w)), tape.param(store, self.b));
        let y = tape.relu(y);
        tape.reshape(y, batch, positions * self.filters)
    }
}
