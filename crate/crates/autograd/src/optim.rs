use std::collections::HashMap;

use ndarray::{Array2, Zip};

use crate::{Gradients, ParamId, ParamStore, Scalar};

/// Adaptive-moment optimizer with bias correction.
///
/// Defaults match the common Keras configuration: `beta1 = 0.9`,
/// `beta2 = 0.999`, `eps = 1e-7`.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    first: HashMap<ParamId, Array2<T>>,
    second: HashMap<ParamId, Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: T) -> Self {
        Self {
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-7),
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.step);
        let bc2 = one - self.beta2.powi(self.step);
        let lr_t = self.learning_rate * bc2.sqrt() / bc1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);

        let mut ids: Vec<ParamId> = grads.grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let g = &grads.grads[&id];
            let m = self.first.entry(id).or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self.second.entry(id).or_insert_with(|| Array2::zeros(g.raw_dim()));
            let w = store.value_mut(id);
            Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= lr_t * *m / (v.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;
    use ndarray::array;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[3.0f64, -2.0]], true);
        let target = array![[0.5f64, 1.5]];
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let tape = Tape::new();
            let wv = tape.param(&store, w);
            let t = tape.constant(target.clone());
            let d = tape.sub(wv, t);
            let loss = tape.sum_all(tape.mul(d, d));
            let grads = tape.backward(loss);
            adam.step(&mut store, &grads);
        }
        let got = store.value(w);
        assert!((got[[0, 0]] - 0.5).abs() < 1e-3 && (got[[0, 1]] - 1.5).abs() < 1e-3, "{got:?}");
        assert_eq!(adam.steps_taken(), 2000);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0f32]], false);
        let tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum_all(tape.mul(wv, wv));
        let grads = tape.backward(loss);
        assert!(grads.is_empty());
        Adam::new(0.1).step(&mut store, &grads);
        assert_eq!(store.value(w)[[0, 0]], 1.0);
    }
}
