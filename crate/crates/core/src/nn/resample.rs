use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView4};

use super::{lit, Real};

/// Interpolation matrix `[out, in]` for half-pixel-centred bilinear resampling
/// along one axis (the `align_corners = false` convention).
pub fn bilinear_matrix<T: Real>(input: usize, output: usize) -> Array2<T> {
    let mut m = Array2::<T>::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[[o, i0]] += lit::<T>(1.0 - frac);
        m[[o, i1]] += lit::<T>(frac);
    }
    m
}

/// Separable bilinear upsampling `rows · X · colsᵀ` applied per channel.
pub fn upsample_bilinear<T: Real>(
    x: ArrayView4<T>,
    rows: &Array2<T>,
    cols: &Array2<T>,
) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (rows.nrows(), cols.nrows());
    debug_assert_eq!(rows.ncols(), h);
    debug_assert_eq!(cols.ncols(), w);
    let mut out = Array4::<T>::zeros((b, c, oh, ow));
    let mut tmp = Array2::<T>::zeros((h, ow));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.slice(s![bi, ci, .., ..]);
            general_mat_mul(T::one(), &plane, &cols.t(), T::zero(), &mut tmp);
            let mut dst = out.slice_mut(s![bi, ci, .., ..]);
            general_mat_mul(T::one(), rows, &tmp, T::zero(), &mut dst);
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`]: `rowsᵀ · G · cols` per channel.
pub fn upsample_bilinear_adjoint<T: Real>(
    g: ArrayView4<T>,
    rows: &Array2<T>,
    cols: &Array2<T>,
) -> Array4<T> {
    let (b, c, oh, ow) = g.dim();
    let (h, w) = (rows.ncols(), cols.ncols());
    debug_assert_eq!(rows.nrows(), oh);
    debug_assert_eq!(cols.nrows(), ow);
    let mut out = Array4::<T>::zeros((b, c, h, w));
    let mut tmp = Array2::<T>::zeros((h, ow));
    for bi in 0..b {
        for ci in 0..c {
            let plane = g.slice(s![bi, ci, .., ..]);
            general_mat_mul(T::one(), &rows.t(), &plane, T::zero(), &mut tmp);
            let mut dst = out.slice_mut(s![bi, ci, .., ..]);
            general_mat_mul(T::one(), &tmp, cols, T::zero(), &mut dst);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn rows_sum_to_one() {
        for (i, o) in [(2, 8), (4, 16), (8, 32), (3, 3)] {
            let m = bilinear_matrix::<f64>(i, o);
            for r in m.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_plane_stays_constant() {
        let x = Array4::<f64>::from_elem((1, 2, 4, 4), 0.75);
        let r = bilinear_matrix(4, 16);
        let y = upsample_bilinear(x.view(), &r, &r);
        assert!(y.iter().all(|v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn adjoint_identity() {
        // <up(x), g> == <x, up*(g)>
        let x = Array::from_shape_fn((2, 3, 4, 2), |(a, b, c, d)| {
            ((a * 7 + b * 5 + c * 3 + d) as f64 * 0.37).sin()
        });
        let g = Array::from_shape_fn((2, 3, 16, 8), |(a, b, c, d)| {
            ((a + b * 11 + c * 13 + d * 17) as f64 * 0.11).cos()
        });
        let rows = bilinear_matrix::<f64>(4, 16);
        let cols = bilinear_matrix::<f64>(2, 8);
        let lhs = (&upsample_bilinear(x.view(), &rows, &cols) * &g).sum();
        let rhs = (&x * &upsample_bilinear_adjoint(g.view(), &rows, &cols)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
