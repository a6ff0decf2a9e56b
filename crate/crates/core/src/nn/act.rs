use ndarray::{Array4, ArrayView4, Zip};

use super::Real;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Derivative of `x * sigmoid(x)`.
#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// SiLU activation; caches its input for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Silu<T> {
    input: Option<Array4<T>>,
}

impl<T: Real> Silu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }

    pub fn forward(&mut self, x: Array4<T>) -> Array4<T> {
        let y = x.mapv(silu);
        self.input = Some(x);
        y
    }

    pub fn infer(&self, x: ArrayView4<T>) -> Array4<T> {
        x.mapv(silu)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("Silu::backward without forward");
        let mut dx = x;
        Zip::from(&mut dx).and(dy).for_each(|v, &g| *v = g * silu_grad(*v));
        dx
    }
}
