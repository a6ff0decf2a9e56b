use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;

use super::{join, Module, Param, Real};

/// Square-kernel 2-D convolution with zero padding `kernel / 2`.
///
/// Lowered to one GEMM per sample over an im2col buffer; the buffer is
/// rebuilt during backward instead of being cached.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    input: Option<Array4<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        Self {
            weight,
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("conv weight is contiguous")
    }

    fn geometry(&self) -> Geometry {
        Geometry {
            in_channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
        }
    }

    fn compute(&self, x: ArrayView4<T>) -> Array4<T> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(h, w);
        let x = x.as_standard_layout();
        let mut out = Array4::<T>::zeros((b, self.out_channels, oh, ow));
        let wm = self.weight_matrix();
        let rows = self.in_channels * self.kernel * self.kernel;
        let geo = self.geometry();
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * oh * ow]
        };
        for bi in 0..b {
            let xb = x.index_axis(Axis(0), bi);
            let mut ob = out
                .index_axis_mut(Axis(0), bi)
                .into_shape_with_order((self.out_channels, oh * ow))
                .expect("contiguous output");
            if self.is_pointwise() {
                let xm = xb.into_shape_with_order((c, h * w)).expect("contiguous input");
                general_mat_mul(T::one(), &wm, &xm, T::zero(), &mut ob);
            } else {
                geo.im2col(xb.as_slice().expect("contiguous"), h, w, oh, ow, &mut col);
                let cm = ArrayView2::from_shape((rows, oh * ow), &col).expect("col shape");
                general_mat_mul(T::one(), &wm, &cm, T::zero(), &mut ob);
            }
        }
        if let Some(bias) = &self.bias {
            for (mut ch, &bv) in out.axis_iter_mut(Axis(1)).zip(bias.value.iter()) {
                ch += bv;
            }
        }
        out
    }

    pub fn forward(&mut self, x: Array4<T>) -> Array4<T> {
        let y = self.compute(x.view());
        self.input = Some(x);
        y
    }

    pub fn infer(&self, x: ArrayView4<T>) -> Array4<T> {
        self.compute(x)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("Conv2d::backward without forward");
        let x = x.as_standard_layout().into_owned();
        let dy = dy.as_standard_layout();
        let (b, c, h, w) = x.dim();
        let (_, oc, oh, ow) = dy.dim();
        let rows = c * self.kernel * self.kernel;
        let geo = self.geometry();
        let pointwise = self.is_pointwise();
        let mut dx = Array4::<T>::zeros((b, c, h, w));
        let mut col = vec![T::zero(); rows * oh * ow];
        let mut dcol = Array2::<T>::zeros((rows, oh * ow));
        {
            let wm = self
                .weight
                .value
                .view()
                .into_shape_with_order((oc, rows))
                .expect("contiguous weight")
                .to_owned();
            let mut dw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((oc, rows))
                .expect("contiguous grad");
            for bi in 0..b {
                let xb = x.index_axis(Axis(0), bi);
                let gb = dy
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((oc, oh * ow))
                    .expect("contiguous dy");
                let mut dxb = dx.index_axis_mut(Axis(0), bi);
                if pointwise {
                    let xm = xb.into_shape_with_order((c, h * w)).expect("contiguous");
                    general_mat_mul(T::one(), &gb, &xm.t(), T::one(), &mut dw);
                    let mut dxm = dxb.into_shape_with_order((c, h * w)).expect("contiguous");
                    general_mat_mul(T::one(), &wm.t(), &gb, T::zero(), &mut dxm);
                } else {
                    geo.im2col(xb.as_slice().expect("contiguous"), h, w, oh, ow, &mut col);
                    let cm = ArrayView2::from_shape((rows, oh * ow), &col).expect("col shape");
                    general_mat_mul(T::one(), &gb, &cm.t(), T::one(), &mut dw);
                    general_mat_mul(T::one(), &wm.t(), &gb, T::zero(), &mut dcol);
                    geo.col2im(
                        dcol.as_slice().expect("contiguous"),
                        h,
                        w,
                        oh,
                        ow,
                        dxb.as_slice_mut().expect("contiguous"),
                    );
                }
            }
        }
        if let Some(bias) = &mut self.bias {
            for (o, g) in bias.grad.iter_mut().enumerate() {
                *g += dy.index_axis(Axis(1), o).sum();
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    in_channels: usize,
    kernel: usize,
    stride: usize,
}

impl Geometry {
    fn im2col<T: Real>(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, col: &mut [T]) {
        let k = self.kernel;
        let p = (self.kernel / 2) as isize;
        let st = self.stride;
        let npix = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * npix..][..npix];
                    for oy in 0..oh {
                        let iy = (oy * st) as isize + ky as isize - p;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * st) as isize + kx as isize - p;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let k = self.kernel;
        let p = (self.kernel / 2) as isize;
        let st = self.stride;
        let npix = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * npix..][..npix];
                    for oy in 0..oh {
                        let iy = (oy * st) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &g) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * st) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution with a 2×2 kernel and stride 2 (exact ×2 upsampling).
///
/// Weight layout `[in, out, 2, 2]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    input: Option<Array4<T>>,
}

impl<T: Real> ConvTranspose2x2<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::he_normal(&[in_channels, out_channels, 2, 2], in_channels, rng),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.in_channels, self.out_channels * 4))
            .expect("contiguous weight")
    }

    fn compute(&self, x: ArrayView4<T>) -> Array4<T> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "transpose conv input channels");
        let x = x.as_standard_layout();
        let oc = self.out_channels;
        let wm = self.weight_matrix();
        let mut out = Array4::<T>::zeros((b, oc, 2 * h, 2 * w));
        let mut tmp = Array2::<T>::zeros((oc * 4, h * w));
        for bi in 0..b {
            let xm = x
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
            general_mat_mul(T::one(), &wm.t(), &xm, T::zero(), &mut tmp);
            let mut ob = out.index_axis_mut(Axis(0), bi);
            for o in 0..oc {
                let bv = self.bias.value[o];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let src = tmp.row(o * 4 + dy * 2 + dx);
                        let mut dst = ob.slice_mut(s![o, dy..;2, dx..;2]);
                        for (d, &v) in dst.iter_mut().zip(src.iter()) {
                            *d = v + bv;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: Array4<T>) -> Array4<T> {
        let y = self.compute(x.view());
        self.input = Some(x);
        y
    }

    pub fn infer(&self, x: ArrayView4<T>) -> Array4<T> {
        self.compute(x)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("ConvTranspose2x2::backward without forward");
        let x = x.as_standard_layout().into_owned();
        let (b, c, h, w) = x.dim();
        let oc = self.out_channels;
        let wm = self.weight_matrix().to_owned();
        let mut dx = Array4::<T>::zeros((b, c, h, w));
        let mut g = Array2::<T>::zeros((oc * 4, h * w));
        let mut dw = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((c, oc * 4))
            .expect("contiguous grad");
        for bi in 0..b {
            let gb = dy.index_axis(Axis(0), bi);
            for o in 0..oc {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let src = gb.slice(s![o, ky..;2, kx..;2]);
                        let mut dst = g.row_mut(o * 4 + ky * 2 + kx);
                        for (d, &v) in dst.iter_mut().zip(src.iter()) {
                            *d = v;
                        }
                    }
                }
            }
            let xm = x
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
            general_mat_mul(T::one(), &xm, &g.t(), T::one(), &mut dw);
            let mut dxm = dx
                .index_axis_mut(Axis(0), bi)
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
            general_mat_mul(T::one(), &wm, &g, T::zero(), &mut dxm);
        }
        for (o, gbias) in self.bias.grad.iter_mut().enumerate() {
            *gbias += dy.index_axis(Axis(1), o).sum();
        }
        dx
    }
}

impl<T: Real> Module<T> for ConvTranspose2x2<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Reference direct convolution used to cross-check the im2col path.
#[cfg(test)]
pub(crate) fn naive_conv<T: Real>(conv: &Conv2d<T>, x: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = conv.output_size(h, w);
    let k = conv.kernel as isize;
    let p = conv.pad() as isize;
    let mut out = Array4::<T>::zeros((b, conv.out_channels, oh, ow));
    for bi in 0..b {
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias.as_ref().map_or(T::zero(), |bb| bb.value[o]);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride) as isize + ky - p;
                                let ix = (ox * conv.stride) as isize + kx - p;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += conv.weight.value[[o, ci, ky as usize, kx as usize]]
                                        * x[[bi, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    out[[bi, o, oy, ox]] = acc;
                }
            }
        }
    }
    out
}
