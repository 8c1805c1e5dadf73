use rand::Rng;

use crate::tensorcore::{Scalar, Shape, Tensor};

/// Zero-mean uniform 3×3 kernel with bound `1/√fan_in`.
pub fn uniform_kernel<T: Scalar>(cin: usize, cout: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / ((9 * cin) as f64).sqrt();
    Tensor::from_fn(Shape::new(3, 3, cin, cout), |_, _, _, _| {
        T::from_f64_lossy(rng.gen_range(-bound..bound))
    })
}

/// Zero-mean uniform dense weights `(1, 1, features, outputs)`.
pub fn uniform_dense<T: Scalar>(features: usize, outputs: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (features as f64).sqrt();
    Tensor::from_fn(Shape::new(1, 1, features, outputs), |_, _, _, _| {
        T::from_f64_lossy(rng.gen_range(-bound..bound))
    })
}
