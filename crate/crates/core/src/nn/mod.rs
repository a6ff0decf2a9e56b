//! Minimal layer stack with explicit backward passes.
//!
//! Every layer follows the same protocol: `forward` runs in training mode and
//! caches what its `backward` needs, `infer` runs in evaluation mode through a
//! shared reference, and `backward` accumulates parameter gradients and
//! returns the gradient with respect to the layer input. Activations are
//! `[batch, channels, height, width]` arrays in standard layout.

mod act;
mod block;
mod conv;
mod norm;
mod resample;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use act::{sigmoid, silu, silu_grad, Silu};
pub use block::{ConvBnSilu, ResidualBlock};
pub use conv::{Conv2d, ConvTranspose2x2};
pub use norm::BatchNorm2d;
pub use resample::{bilinear_matrix, upsample_bilinear, upsample_bilinear_adjoint};

/// Floating-point element type the layers are generic over.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag stored in checkpoints.
    const DTYPE: u8;

    fn from_f64_lossy(x: f64) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: u8 = 0;
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    const DTYPE: u8 = 1;
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
}

#[inline]
pub(crate) fn lit<T: Real>(x: f64) -> T {
    T::from_f64_lossy(x)
}

/// A named tensor owned by a layer: trainable weight or persistent buffer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    /// SGD momentum buffer.
    pub velocity: ArrayD<T>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let velocity = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            velocity,
            trainable: true,
        }
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn buffer(value: ArrayD<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// He-normal initialisation for a weight with the given fan-in.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| lit(normal.sample(rng))).collect();
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data"))
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Parameter traversal shared by the optimizer, checkpoints and tests.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Number of trainable scalars.
    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
