use ndarray::{Array1, Array4, ArrayView4, Axis, IxDyn, Zip};

use super::{join, lit, Module, Param, Real};

/// Per-channel batch normalisation over `(batch, height, width)`.
///
/// Training mode normalises with the biased batch variance and folds the
/// unbiased estimate into the running statistics; evaluation mode uses the
/// running statistics only.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Array4<T>, Array1<T>)>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(ndarray::ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ndarray::ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: Array4<T>) -> Array4<T> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch norm channels");
        let n = (b * h * w) as f64;
        let mut xhat = x;
        let mut inv_std = Array1::<T>::zeros(c);
        let m = self.momentum;
        for (ci, mut ch) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let mut sum = 0.0;
            for &v in ch.iter() {
                sum += v.as_f64();
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for &v in ch.iter() {
                let d = v.as_f64() - mean;
                sq += d * d;
            }
            let var = sq / n;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = lit(istd);
            let (mean_t, istd_t) = (lit::<T>(mean), lit::<T>(istd));
            ch.mapv_inplace(|v| (v - mean_t) * istd_t);

            let unbiased = if n > 1.0 { sq / (n - 1.0) } else { var };
            let rm = &mut self.running_mean.value[ci];
            *rm = lit((1.0 - m) * rm.as_f64() + m * mean);
            let rv = &mut self.running_var.value[ci];
            *rv = lit((1.0 - m) * rv.as_f64() + m * unbiased);
        }
        let mut y = xhat.clone();
        self.affine(&mut y);
        self.cache = Some((xhat, inv_std));
        y
    }

    fn affine(&self, y: &mut Array4<T>) {
        for (ci, mut ch) in y.axis_iter_mut(Axis(1)).enumerate() {
            let g = self.gamma.value[ci];
            let bt = self.beta.value[ci];
            ch.mapv_inplace(|v| v * g + bt);
        }
    }

    pub fn infer(&self, x: ArrayView4<T>) -> Array4<T> {
        let mut y = x.to_owned();
        for (ci, mut ch) in y.axis_iter_mut(Axis(1)).enumerate() {
            let istd = 1.0 / (self.running_var.value[ci].as_f64() + self.eps).sqrt();
            let scale = lit::<T>(self.gamma.value[ci].as_f64() * istd);
            let shift = lit::<T>(
                self.beta.value[ci].as_f64()
                    - self.running_mean.value[ci].as_f64() * self.gamma.value[ci].as_f64() * istd,
            );
            ch.mapv_inplace(|v| v * scale + shift);
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (xhat, inv_std) = self.cache.take().expect("BatchNorm2d::backward without forward");
        let (b, _, h, w) = xhat.dim();
        let n = (b * h * w) as f64;
        let mut dx = xhat;
        for (ci, (mut ch, g)) in dx
            .axis_iter_mut(Axis(1))
            .zip(dy.axis_iter(Axis(1)))
            .enumerate()
        {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            Zip::from(&ch).and(&g).for_each(|&xh, &gv| {
                sum_g += gv.as_f64();
                sum_gx += (gv * xh).as_f64();
            });
            self.gamma.grad[ci] += lit(sum_gx);
            self.beta.grad[ci] += lit(sum_g);
            let k = lit::<T>(self.gamma.value[ci].as_f64() * inv_std[ci].as_f64() / n);
            let ng = lit::<T>(n);
            let sg = lit::<T>(sum_g);
            let sgx = lit::<T>(sum_gx);
            Zip::from(&mut ch).and(&g).for_each(|xh, &gv| {
                *xh = k * (ng * gv - sg - *xh * sgx);
            });
        }
        dx
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn training_output_is_standardised() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Array::from_shape_fn((3, 2, 4, 4), |(a, b, c, d)| {
            (a * 3 + b * 100 + c * 5 + d) as f64 * 0.5 + b as f64
        });
        let y = bn.forward(x);
        for ch in y.axis_iter(Axis(1)) {
            let mean = ch.mean().unwrap();
            let var = ch.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.beta.value[0] = 0.3;
        let y = bn.forward(Array4::from_elem((2, 1, 3, 3), 5.0));
        assert!(y.iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value[0] = 1.7;
        bn.gamma.value[1] = -0.4;
        bn.beta.value[1] = 0.2;
        let x = Array::from_shape_fn((2, 2, 3, 3), |(a, b, c, d)| {
            ((a * 19 + b * 7 + c * 5 + d * 3) as f64 * 0.41).sin()
        });
        let g = Array::from_shape_fn(x.raw_dim(), |(a, b, c, d)| ((a + 2 * b + c + 3 * d) as f64).cos());
        let _ = bn.forward(x.clone());
        let dx = bn.backward(&g);
        let loss = |x: &Array4<f64>| {
            let mut m = bn.clone();
            (&m.forward(x.clone()) * &g).sum()
        };
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 1], [0, 1, 1, 2]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((num - dx[idx]).abs() < 1e-6, "{num} vs {}", dx[idx]);
        }
    }
}
