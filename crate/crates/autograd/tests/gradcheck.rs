//! Central-difference checks of every differentiable operation.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scvd_autograd::{ParamStore, SparseMatrix, Tape, Var};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

/// Reduces `build`'s output to a scalar through a fixed random projection and
/// compares tape gradients with central differences for every input.
fn check<F>(inputs: Vec<Array2<f64>>, build: F)
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs.iter().enumerate().map(|(i, x)| store.add(format!("x{i}"), x.clone(), true)).collect();

    let eval = |store: &ParamStore<f64>, weights: Option<&Array2<f64>>| -> (f64, Array2<f64>) {
        let tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let out = build(&tape, &vars);
        let shape = tape.shape(out);
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(777);
                random(&mut rng, shape.0, shape.1)
            }
        };
        let wv = tape.constant(w.clone());
        let loss = tape.sum_all(tape.mul(out, wv));
        let value = tape.value(loss)[[0, 0]];
        (value, w)
    };

    let (_, weights) = eval(&store, None);
    let tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let out = build(&tape, &vars);
    let wv = tape.constant(weights.clone());
    let loss = tape.sum_all(tape.mul(out, wv));
    let grads = tape.backward(loss);

    let h = 1e-6;
    for &id in &ids {
        let base = store.value(id).as_ref().clone();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(base.raw_dim()));
        for idx in 0..base.len() {
            let (r, c) = (idx / base.ncols(), idx % base.ncols());
            let mut plus = base.clone();
            plus[[r, c]] += h;
            store.set_value(id, plus);
            let (fp, _) = eval(&store, Some(&weights));
            let mut minus = base.clone();
            minus[[r, c]] -= h;
            store.set_value(id, minus);
            let (fm, _) = eval(&store, Some(&weights));
            store.set_value(id, base.clone());
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[[r, c]];
            let tol = 1e-5 * (1.0 + numeric.abs());
            assert!((a - numeric).abs() < tol, "input {id:?} at ({r},{c}): analytic {a} vs numeric {numeric}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

#[test]
fn matmul_add_sub_mul() {
    let mut r = rng();
    check(vec![random(&mut r, 3, 4), random(&mut r, 4, 2)], |t, v| t.matmul(v[0], v[1]));
    check(vec![random(&mut r, 3, 4), random(&mut r, 3, 4)], |t, v| t.add(v[0], v[1]));
    check(vec![random(&mut r, 3, 4), random(&mut r, 3, 4)], |t, v| t.sub(v[0], v[1]));
    check(vec![random(&mut r, 3, 4), random(&mut r, 3, 4)], |t, v| t.mul(v[0], v[1]));
    // Same input on both sides of a product.
    check(vec![random(&mut r, 3, 3)], |t, v| t.matmul(v[0], v[0]));
}

#[test]
fn row_broadcasts_and_scale() {
    let mut r = rng();
    check(vec![random(&mut r, 4, 3), random(&mut r, 1, 3)], |t, v| t.add_row(v[0], v[1]));
    check(vec![random(&mut r, 4, 3), random(&mut r, 1, 3)], |t, v| t.mul_row(v[0], v[1]));
    check(vec![random(&mut r, 4, 3)], |t, v| t.scale(v[0], -2.5));
}

#[test]
fn activations() {
    let mut r = rng();
    // Keep relu inputs away from the kink.
    let x = random(&mut r, 4, 5).mapv(|v: f64| if v.abs() < 0.05 { v + 0.1 } else { v });
    check(vec![x], |t, v| t.relu(v[0]));
    check(vec![random(&mut r, 4, 5)], |t, v| t.sigmoid(v[0]));
    check(vec![random(&mut r, 4, 5)], |t, v| t.tanh(v[0]));
    check(vec![random(&mut r, 4, 5).mapv(|v| v * 3.0)], |t, v| t.gelu(v[0]));
}

#[test]
fn softmax_and_layer_norm() {
    let mut r = rng();
    check(vec![random(&mut r, 3, 6)], |t, v| t.softmax_rows(v[0]));
    check(vec![random(&mut r, 3, 6)], |t, v| t.layer_norm_rows(v[0], 1e-5));
}

#[test]
fn structural_ops() {
    let mut r = rng();
    check(vec![random(&mut r, 5, 3)], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]));
    check(vec![random(&mut r, 3, 2), random(&mut r, 3, 4)], |t, v| t.concat_cols(&[v[0], v[1], v[0]]));
    check(vec![random(&mut r, 2, 3), random(&mut r, 4, 3)], |t, v| t.concat_rows(&[v[1], v[0]]));
    check(vec![random(&mut r, 3, 6)], |t, v| t.slice_cols(v[0], 2, 5));
    check(vec![random(&mut r, 6, 3)], |t, v| t.slice_rows(v[0], 1, 4));
    check(vec![random(&mut r, 6, 3)], |t, v| t.mean_rows(v[0]));
    check(vec![random(&mut r, 7, 3)], |t, v| t.segment_mean(v[0], &[(0, 2), (2, 3), (3, 7)]));
    check(vec![random(&mut r, 3, 4)], |t, v| t.transpose(v[0]));
    check(vec![random(&mut r, 3, 4)], |t, v| t.reshape(v[0], 2, 6));
    check(vec![random(&mut r, 2, 7)], |t, v| t.unfold1d(v[0], 3));
}

#[test]
fn sparse_propagation() {
    let mut r = rng();
    let adj = Arc::new(SparseMatrix::from_triplets(
        4,
        4,
        &[(0, 0, 0.5), (0, 1, 0.25), (1, 1, 1.0), (2, 0, -0.3), (2, 3, 0.7), (3, 3, 0.1), (3, 0, 0.2)],
    ));
    check(vec![random(&mut r, 4, 3)], move |t, v| t.sparse_matmul(Arc::clone(&adj), v[0]));
}

#[test]
fn cross_entropy_matches_differences() {
    let mut r = rng();
    check(vec![random(&mut r, 4, 3)], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]));
}

#[test]
fn composite_recurrent_cell() {
    // One LSTM-like step, exercising accumulation through shared inputs.
    let mut r = rng();
    check(
        vec![random(&mut r, 2, 3), random(&mut r, 3, 8), random(&mut r, 2, 2), random(&mut r, 2, 8)],
        |t, v| {
            let z = t.add(t.matmul(v[0], v[1]), t.matmul(v[2], v[3]));
            let i = t.sigmoid(t.slice_cols(z, 0, 2));
            let f = t.sigmoid(t.slice_cols(z, 2, 4));
            let c = t.tanh(t.slice_cols(z, 4, 6));
            let o = t.sigmoid(t.slice_cols(z, 6, 8));
            let cell = t.add(t.mul(f, v[2]), t.mul(i, c));
            t.mul(o, t.tanh(cell))
        },
    );
}

#[test]
fn fused_lstm_both_directions() {
    let mut r = rng();
    // 4 steps, batch 2, 3 units.
    for reverse in [false, true] {
        check(vec![random(&mut r, 8, 12), random(&mut r, 3, 12)], |t, v| t.lstm(v[0], v[1], 2, reverse));
    }
    check(vec![random(&mut r, 3, 8), random(&mut r, 2, 8)], |t, v| t.lstm(v[0], v[1], 1, false));
}

/// The fused recurrence equals the same cell written with elementary ops.
#[test]
fn fused_lstm_matches_unrolled_cell() {
    let mut r = rng();
    let (steps, batch, u) = (5, 3, 4);
    let x = random(&mut r, steps * batch, 4 * u);
    let w = random(&mut r, u, 4 * u);
    for reverse in [false, true] {
        let tape = Tape::<f64>::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let fused = tape.value(tape.lstm(xv, wv, batch, reverse)).to_owned();
        let mut h = tape.constant(Array2::zeros((batch, u)));
        let mut c = tape.constant(Array2::zeros((batch, u)));
        let mut rows = vec![None; steps];
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let z = tape.add(tape.slice_rows(xv, t * batch, (t + 1) * batch), tape.matmul(h, wv));
            let i = tape.sigmoid(tape.slice_cols(z, 0, u));
            let f = tape.sigmoid(tape.slice_cols(z, u, 2 * u));
            let g = tape.tanh(tape.slice_cols(z, 2 * u, 3 * u));
            let o = tape.sigmoid(tape.slice_cols(z, 3 * u, 4 * u));
            c = tape.add(tape.mul(f, c), tape.mul(i, g));
            h = tape.mul(o, tape.tanh(c));
            rows[t] = Some(h);
        }
        let unrolled: Vec<Var> = rows.into_iter().map(|v| v.unwrap()).collect();
        let unrolled = tape.value(tape.concat_rows(&unrolled)).to_owned();
        for (a, b) in fused.iter().zip(unrolled.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
