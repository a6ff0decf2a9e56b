use ndarray::{Array4, ArrayView4};
use rand::Rng;

use super::{join, Conv2d, BatchNorm2d, Module, Param, Real, Silu};

/// `SiLU(BN(Conv3x3(x)))`, the convolution unit used by every stage of the
/// encoder, the temporal fusion and the decoder.
#[derive(Clone, Debug)]
pub struct ConvBnSilu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    act: Silu<T>,
}

impl<T: Real> ConvBnSilu<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, stride, false, rng),
            bn: BatchNorm2d::new(cout),
            act: Silu::new(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&mut self, x: Array4<T>) -> Array4<T> {
        let y = self.conv.forward(x);
        let y = self.bn.forward(y);
        self.act.forward(y)
    }

    pub fn infer(&self, x: ArrayView4<T>) -> Array4<T> {
        let y = self.conv.infer(x);
        let y = self.bn.infer(y.view());
        self.act.infer(y.view())
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let g = self.act.backward(dy);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }
}

impl<T: Real> Module<T> for ConvBnSilu<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// `SiLU(x + BN(Conv3x3(SiLU(BN(Conv3x3(x))))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub first: ConvBnSilu<T>,
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    out_act: Silu<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self {
            first: ConvBnSilu::new(width, width, 1, rng),
            conv: Conv2d::new(width, width, 3, 1, false, rng),
            bn: BatchNorm2d::new(width),
            out_act: Silu::new(),
        }
    }

    /// Zero the affine output of the branch so the block reduces to `SiLU(x)`.
    pub fn zero_branch(&mut self) {
        self.bn.gamma.value.fill(T::zero());
        self.bn.beta.value.fill(T::zero());
    }

    pub fn forward(&mut self, x: Array4<T>) -> Array4<T> {
        let branch = self.first.forward(x.clone());
        let branch = self.conv.forward(branch);
        let branch = self.bn.forward(branch);
        self.out_act.forward(x + branch)
    }

    pub fn infer(&self, x: ArrayView4<T>) -> Array4<T> {
        let branch = self.first.infer(x);
        let branch = self.conv.infer(branch.view());
        let branch = self.bn.infer(branch.view());
        self.out_act.infer((&x + &branch).view())
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let g = self.out_act.backward(dy);
        let gb = self.bn.backward(&g);
        let gb = self.conv.backward(&gb);
        let gb = self.first.backward(&gb);
        g + gb
    }
}

impl<T: Real> Module<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.first.visit(&join(prefix, "first"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}
