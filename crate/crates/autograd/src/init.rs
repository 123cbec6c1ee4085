//! Weight initializers.

use ndarray::Array2;
use rand::Rng;

use crate::Scalar;

/// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, (fan_in, fan_out), limit)
}

pub fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), limit: f64) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || T::lit(rng.gen_range(-limit..=limit)))
}

/// Zero-mean normal via Box-Muller.
pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        T::lit(z * std)
    })
}

pub fn zeros<T: Scalar>(shape: (usize, usize)) -> Array2<T> {
    Array2::zeros(shape)
}

pub fn filled<T: Scalar>(shape: (usize, usize), value: f64) -> Array2<T> {
    Array2::from_elem(shape, T::lit(value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Array2<f64> = glorot_uniform(&mut rng, 10, 20);
        let limit = (6.0f64 / 30.0).sqrt();
        assert_eq!(w.dim(), (10, 20));
        assert!(w.iter().all(|x| x.abs() <= limit));
    }

    #[test]
    fn normal_has_roughly_right_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Array2<f64> = normal(&mut rng, (100, 100), 0.02);
        let mean = w.mean().unwrap();
        let var = w.mapv(|x| (x - mean) * (x - mean)).mean().unwrap();
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - 0.02).abs() < 2e-3);
    }
}
